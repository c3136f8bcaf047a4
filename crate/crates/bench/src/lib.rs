//! Deterministic inputs shared by the benchmarks.

use ndarray::Array2;
use nuance_core::ingest::{ModalitySeries, SeriesMeta};
use nuance_core::nn::DyadInput;
use nuance_core::{Modality, Task, BINS};

/// A multi-tone series with `frames` rows for `m`.
pub fn series(m: Modality, frames: usize) -> ModalitySeries {
    let data = Array2::from_shape_fn((frames, m.channels()), |(j, c)| {
        let x = j as f64;
        (0.37 * x + c as f64).sin() + 0.5 * (0.11 * x * (c + 1) as f64).cos()
    });
    let meta = SeriesMeta {
        participant_id: "P000".into(),
        session_id: "S0000".into(),
        task: Task::Lego,
    };
    ModalitySeries::new(m, 25.0, data, meta).expect("valid series")
}

pub fn dyad() -> DyadInput {
    let map = |m: Modality, k: usize| Array2::from_shape_fn((m.channels(), BINS), |(c, b)| (((c + 3 * k) * 7 + b) as f64).sin());
    DyadInput::new(Modality::ALL.map(|m| map(m, 0)), Modality::ALL.map(|m| map(m, 1))).expect("valid shapes")
}
