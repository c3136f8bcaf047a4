//! Fixed-size spectral maps of variable-length behavioral series.
//!
//! Every channel is mean-centered, transformed with a real DFT, log-compressed,
//! resampled onto [`BINS`] points over normalized frequency `[0, 0.5]` and
//! z-normalized. Videos of any length map to the same `channels x 80` shape.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::ingest::{Modality, ModalitySeries, SeriesMeta, Task};

pub const BINS: usize = 80;

#[derive(Debug, thiserror::Error)]
pub enum SpectralError {
    #[error("signal has {0} samples, need at least 2")]
    TooShort(usize),
    #[error("signal contains non-finite values")]
    NonFinite,
    #[error("map shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SpectralError>;

/// `|X_k|` for `k = 0..=n/2` of a real signal.
pub fn dft_magnitude(signal: &[f64]) -> Result<Vec<f64>> {
    let n = signal.len();
    if n < 2 {
        return Err(SpectralError::TooShort(n));
    }
    if signal.iter().any(|x| !x.is_finite()) {
        return Err(SpectralError::NonFinite);
    }
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    Ok(buf[..=n / 2].iter().map(|c| c.norm()).collect())
}

/// Linearly resamples a half-spectrum (bin `k` at normalized frequency `k/n`)
/// onto `BINS` equally spaced frequencies in `[0, 0.5]`. Frequencies past the
/// last bin (odd `n`) hold the last value.
pub fn resample_half_spectrum(half: &[f64], n: usize) -> Vec<f64> {
    let last = half.len() - 1;
    (0..BINS)
        .map(|i| {
            let f = 0.5 * i as f64 / (BINS - 1) as f64;
            let pos = f * n as f64;
            let k = pos.floor() as usize;
            if k >= last {
                half[last]
            } else {
                let w = pos - k as f64;
                half[k] + w * (half[k + 1] - half[k])
            }
        })
        .collect()
}

fn is_constant(col: ArrayView1<f64>) -> bool {
    let first = col[0];
    col.iter().all(|&v| v == first)
}

/// Mean-center, DFT magnitude, `log1p` and resample one channel.
pub fn log_spectrum(channel: ArrayView1<f64>) -> Result<Vec<f64>> {
    let n = channel.len();
    if n < 2 {
        return Err(SpectralError::TooShort(n));
    }
    if is_constant(channel) {
        return Ok(vec![0.0; BINS]);
    }
    let mean = channel.sum() / n as f64;
    let centered: Vec<f64> = channel.iter().map(|v| v - mean).collect();
    let half: Vec<f64> = dft_magnitude(&centered)?.into_iter().map(f64::ln_1p).collect();
    Ok(resample_half_spectrum(&half, n))
}

/// Rescales `row` to zero mean and unit (population) variance; near-constant
/// rows become all zeros.
pub fn z_normalize(row: &mut [f64]) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 1e-10) {
        row.iter_mut().for_each(|v| *v = 0.0);
    } else {
        row.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
}

/// A `channels x 80` spectral representation of one modality series.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMap {
    pub modality: Modality,
    pub meta: SeriesMeta,
    pub source_frames: usize,
    pub data: Array2<f64>,
}

impl SpectralMap {
    pub fn channels(&self) -> usize {
        self.data.nrows()
    }
}

/// Rows after log compression and resampling, before z-normalization.
pub fn raw_spectral_rows(series: &ModalitySeries) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((series.channels(), BINS));
    for (c, col) in series.data.columns().into_iter().enumerate() {
        let row = log_spectrum(col)?;
        out.row_mut(c).assign(&ArrayView1::from(&row));
    }
    Ok(out)
}

pub fn spectral_map(series: &ModalitySeries) -> Result<SpectralMap> {
    let mut data = raw_spectral_rows(series)?;
    for mut row in data.rows_mut() {
        z_normalize(row.as_slice_mut().expect("standard layout"));
    }
    Ok(SpectralMap {
        modality: series.modality,
        meta: series.meta.clone(),
        source_frames: series.frames(),
        data,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub modality: Modality,
    pub channels: usize,
    pub bins: usize,
    pub session_id: String,
    pub participant_id: String,
    pub task: Task,
    pub source_frames: usize,
}

/// Writes `<stem>.f32` (little-endian, row-major) and `<stem>.json`.
/// Returns the blob path.
pub fn write_spectral_map(map: &SpectralMap, stem: &Path) -> Result<PathBuf> {
    let blob = stem.with_extension("f32");
    let mut bytes = Vec::with_capacity(map.data.len() * 4);
    for v in map.data.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(&blob, bytes)?;
    let sidecar = MapSidecar {
        modality: map.modality,
        channels: map.channels(),
        bins: BINS,
        session_id: map.meta.session_id.clone(),
        participant_id: map.meta.participant_id.clone(),
        task: map.meta.task,
        source_frames: map.source_frames,
    };
    std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(blob)
}

pub fn read_spectral_map(stem: &Path) -> Result<SpectralMap> {
    let sidecar: MapSidecar = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
    let bytes = std::fs::read(stem.with_extension("f32"))?;
    if sidecar.bins != BINS || sidecar.channels != sidecar.modality.channels() {
        return Err(SpectralError::Shape(format!(
            "{} x {} for {}",
            sidecar.channels, sidecar.bins, sidecar.modality
        )));
    }
    if bytes.len() != sidecar.channels * BINS * 4 {
        return Err(SpectralError::Shape(format!("blob has {} bytes", bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(SpectralMap {
        modality: sidecar.modality,
        meta: SeriesMeta {
            participant_id: sidecar.participant_id,
            session_id: sidecar.session_id,
            task: sidecar.task,
        },
        source_frames: sidecar.source_frames,
        data: Array2::from_shape_vec((sidecar.channels, BINS), values).expect("checked length"),
    })
}
