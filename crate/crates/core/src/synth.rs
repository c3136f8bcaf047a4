//! Seeded synthetic dyadic datasets with planted personality signal.
//!
//! Questionnaire answers come from latent traits through facet factors. Each
//! behavioral channel sums one sinusoid per trait whose amplitude grows with
//! the participant's scored trait, weaker sinusoids driven by the partner's
//! traits, a fixed-amplitude reference tone, and Gaussian noise. Channel `c`
//! carries trait `c % 5` at full gain and the others scaled by `crosstalk`. Frequencies
//! sit on the spectral map grid so the planted peaks survive resampling.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bfi2::{Level, PersonalityVector, ScoringKey};
use crate::ingest::{
    self, IngestError, ManifestFile, ParticipantFiles, ParticipantInfo, SessionEntry, SessionFiles, Task,
    AU_INTENSITY, AU_INTENSITY_MAX,
};
use crate::spectral::BINS;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Normalized frequency of spectral map grid point `i`.
pub fn grid_frequency(i: usize) -> f64 {
    0.5 * i as f64 / (BINS - 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedMap {
    /// Cycles per frame of the tone carrying each trait (O, C, E, A, N).
    pub trait_frequencies: Vec<f64>,
    /// Shift of the partner-driven tone relative to the trait tone.
    pub partner_offset: f64,
    pub reference_frequency: f64,
    /// Tone amplitude per trait point on the 1-5 scale.
    pub trait_gain: f64,
    pub partner_gain: f64,
    pub reference_amplitude: f64,
    /// Relative gain of the traits a channel is not keyed to.
    pub crosstalk: f64,
}

impl Default for PlantedMap {
    fn default() -> Self {
        Self {
            trait_frequencies: [10, 18, 26, 34, 42].iter().map(|&i| grid_frequency(i)).collect(),
            partner_offset: grid_frequency(3),
            reference_frequency: grid_frequency(71),
            trait_gain: 0.2,
            partner_gain: 0.08,
            reference_amplitude: 0.5,
            crosstalk: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_participants: usize,
    /// Nominal sessions per participant, 1 to 5.
    pub sessions_per_participant: usize,
    /// Participants only meet inside their club, keeping dyads splittable.
    pub club_size: usize,
    pub tasks: Vec<Task>,
    pub frames: usize,
    /// Talk videos last five minutes instead of `frames`.
    pub realistic_talk: bool,
    pub frame_rate: f64,
    pub sample_rate: u32,
    /// Signal-to-noise ratio; noise sd is `1 / snr`.
    pub snr: f64,
    pub seed: u64,
    pub planted: PlantedMap,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_participants: 40,
            sessions_per_participant: 2,
            club_size: 4,
            tasks: Task::ALL.to_vec(),
            frames: 600,
            realistic_talk: false,
            frame_rate: 25.0,
            sample_rate: 1600,
            snr: 10.0,
            seed: 0,
            planted: PlantedMap::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_participants < 2 {
            return bad("need at least 2 participants".into());
        }
        if !(1..=5).contains(&self.sessions_per_participant) {
            return bad(format!("sessions_per_participant {} outside 1..=5", self.sessions_per_participant));
        }
        let club = self.club_size.min(self.n_participants);
        if self.sessions_per_participant >= club {
            return bad(format!(
                "{} sessions per participant need clubs larger than {club}",
                self.sessions_per_participant
            ));
        }
        if self.sessions_per_participant % 2 == 1 && club % 2 == 1 {
            return bad("an odd session count needs an even club size".into());
        }
        if self.tasks.is_empty() {
            return bad("no tasks".into());
        }
        if self.frames < 2 {
            return bad("frames must be at least 2".into());
        }
        if !(self.frame_rate > 0.0) || self.sample_rate == 0 || (self.sample_rate as f64) < self.frame_rate {
            return bad("frame_rate and sample_rate must be positive with sample_rate >= frame_rate".into());
        }
        if !(self.snr > 0.0) {
            return bad(format!("snr {} must be positive", self.snr));
        }
        let p = &self.planted;
        if p.trait_frequencies.len() != 5 {
            return bad("need one frequency per trait".into());
        }
        let in_band = |f: f64| f > 0.0 && f < 0.5;
        if !p.trait_frequencies.iter().all(|&f| in_band(f) && in_band(f + p.partner_offset)) || !in_band(p.reference_frequency) {
            return bad("planted frequencies must lie in (0, 0.5)".into());
        }
        if !(0.0..=1.0).contains(&p.crosstalk) {
            return bad(format!("crosstalk {} must lie in [0, 1]", p.crosstalk));
        }
        Ok(())
    }

    pub fn frames_for(&self, task: Task) -> usize {
        if task == Task::Talk && self.realistic_talk {
            (300.0 * self.frame_rate).round() as usize
        } else {
            self.frames
        }
    }

    fn noise_sd(&self) -> f64 {
        if self.snr.is_infinite() {
            0.0
        } else {
            1.0 / self.snr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParticipant {
    pub info: ParticipantInfo,
    /// Latent standard-normal trait factors.
    pub latent: Vec<f64>,
    /// Questionnaire answers, item order of the key.
    pub items: Vec<f64>,
    /// Trait scores of `items` under the key.
    pub traits: Vec<f64>,
}

const AGE_BRACKETS: [(u32, u32); 5] = [(18, 24), (25, 34), (35, 44), (45, 59), (60, 75)];
const FACET_LOADING: f64 = 0.9;
const ITEM_LOADING: f64 = 0.9;
const ITEM_NOISE: f64 = 0.3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Roster with questionnaire answers and demographics.
pub fn sample_participants(spec: &SynthSpec, key: &ScoringKey) -> Result<Vec<SynthParticipant>> {
    spec.validate()?;
    let mut rng = stream(spec.seed, 0);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let (lo, hi) = (key.likert_min(), key.likert_max());
    let mid = 0.5 * (lo + hi);
    let width = (spec.n_participants - 1).to_string().len().max(3);
    (0..spec.n_participants)
        .map(|i| {
            let latent: Vec<f64> = (0..key.len(Level::Trait)).map(|_| std.sample(&mut rng)).collect();
            let facet: Vec<f64> = key
                .facets()
                .iter()
                .map(|f| FACET_LOADING * latent[f.trait_index] + (1.0 - FACET_LOADING * FACET_LOADING).sqrt() * std.sample(&mut rng))
                .collect();
            let items: Vec<f64> = key
                .items()
                .iter()
                .map(|it| {
                    let x = ITEM_LOADING * facet[it.facet_index] + ITEM_NOISE * std.sample(&mut rng);
                    let x = if it.reversed { -x } else { x };
                    (mid + x).round().clamp(lo, hi)
                })
                .collect();
            let traits = key
                .nuances_to_traits(&PersonalityVector::new(Level::Nuance, items.clone(), ""))
                .expect("generated vector matches key")
                .scores;
            let (a, b) = AGE_BRACKETS[rng.random_range(0..AGE_BRACKETS.len())];
            let info = ParticipantInfo {
                id: format!("P{i:0width$}"),
                age: rng.random_range(a..=b) as f64,
                gender: if rng.random_bool(0.5) { "F".into() } else { "M".into() },
            };
            Ok(SynthParticipant {
                info,
                latent,
                items,
                traits,
            })
        })
        .collect()
}

/// Unordered dyads: a circulant pattern inside each club of `club_size`
/// consecutive participants (the last club absorbs any remainder).
pub fn pair_participants(spec: &SynthSpec) -> Vec<(usize, usize)> {
    let n = spec.n_participants;
    let c = spec.club_size.min(n).max(2);
    let mut clubs: Vec<(usize, usize)> = (0..n / c).map(|k| (k * c, (k + 1) * c)).collect();
    if n % c != 0 {
        match clubs.last_mut() {
            Some(last) => last.1 = n,
            None => clubs.push((0, n)),
        }
    }
    let s = spec.sessions_per_participant;
    let mut pairs = BTreeSet::new();
    for (start, end) in clubs {
        let m = end - start;
        let mut add = |a: usize, b: usize| {
            let (a, b) = (start + a % m, start + b % m);
            if a != b {
                pairs.insert((a.min(b), a.max(b)));
            }
        };
        for d in 1..=s / 2 {
            for i in 0..m {
                add(i, i + d);
            }
        }
        if s % 2 == 1 {
            for i in 0..m / 2 {
                add(i, i + m / 2);
            }
        }
    }
    pairs.into_iter().collect()
}

/// Per-frame signals of one participant in one task video.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedParticipant {
    pub action_units: Array2<f64>,
    pub gaze: Array2<f64>,
    pub head_pose: Array2<f64>,
    pub audio_samples: Vec<f32>,
    /// Per-frame log energy of `audio_samples`, as ingest computes it.
    pub audio: Vec<f64>,
}

fn tone_signal(spec: &SynthSpec, channel: usize, own: &[f64], partner: &[f64], rng: &mut ChaCha8Rng, frames: usize) -> Vec<f64> {
    let p = &spec.planted;
    let n = p.trait_frequencies.len();
    // (frequency, amplitude) of every planted tone, each with its own phase
    let mut tones: Vec<(f64, f64)> = Vec::with_capacity(2 * n + 1);
    for (t, &f) in p.trait_frequencies.iter().enumerate() {
        let w = if t == channel % n { 1.0 } else { p.crosstalk };
        tones.push((f, w * p.trait_gain * own[t]));
        tones.push((f + p.partner_offset, w * p.partner_gain * partner[t]));
    }
    tones.push((p.reference_frequency, p.reference_amplitude));
    let phases: Vec<f64> = tones.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let sd = spec.noise_sd();
    let noise = Normal::new(0.0, sd.max(f64::MIN_POSITIVE)).expect("finite sd");
    (0..frames)
        .map(|j| {
            let x = j as f64;
            let mut v: f64 = tones
                .iter()
                .zip(&phases)
                .map(|(&(f, a), ph)| a * (2.0 * PI * f * x + ph).sin())
                .sum();
            if sd > 0.0 {
                v += noise.sample(rng);
            }
            v
        })
        .collect()
}

const AU_BASELINE: f64 = 2.5;
const PRESENCE_BASELINE: f64 = 0.5;
const AUDIO_CARRIER: f64 = 1.0;

/// Renders one participant's video signals given their and their partner's traits.
pub fn render_participant(spec: &SynthSpec, own: &[f64], partner: &[f64], task: Task, rng: &mut ChaCha8Rng) -> RenderedParticipant {
    let frames = spec.frames_for(task);
    let mut channels: Vec<Vec<f64>> = (0..48).map(|c| tone_signal(spec, c, own, partner, rng, frames)).collect();
    let n_int = AU_INTENSITY.len();
    let au = Array2::from_shape_fn((frames, 35), |(i, j)| {
        let v = channels[j][i];
        if j < n_int {
            (AU_BASELINE + v).clamp(0.0, AU_INTENSITY_MAX)
        } else if PRESENCE_BASELINE + v >= 0.5 {
            1.0
        } else {
            0.0
        }
    });
    let gaze = Array2::from_shape_fn((frames, 6), |(i, j)| channels[35 + j][i]);
    let head_pose = Array2::from_shape_fn((frames, 6), |(i, j)| channels[41 + j][i]);
    let env = channels.pop().expect("audio channel");

    let sr = spec.sample_rate as f64;
    let per_frame = sr / spec.frame_rate;
    let n_samples = (frames as f64 * per_frame).floor() as usize;
    let carrier = sr / 4.0;
    let audio_samples: Vec<f32> = (0..n_samples)
        .map(|k| {
            let frame = ((k as f64 / per_frame).floor() as usize).min(frames - 1);
            let amp = AUDIO_CARRIER * (0.5 * env[frame]).exp();
            (amp * (2.0 * PI * carrier * k as f64 / sr).sin()) as f32
        })
        .collect();
    let as_f64: Vec<f64> = audio_samples.iter().map(|&x| x as f64).collect();
    let audio = ingest::log_energy_frames(&as_f64, sr, spec.frame_rate);
    RenderedParticipant {
        action_units: au,
        gaze,
        head_pose,
        audio_samples,
        audio,
    }
}

/// One rendered dyad: both participants' signals.
#[derive(Debug, Clone)]
pub struct RenderedSession {
    pub session_id: String,
    pub task: Task,
    pub target: usize,
    pub partner: usize,
    pub target_signals: RenderedParticipant,
    pub partner_signals: RenderedParticipant,
}

/// Renders a dyad; `index` selects the session's private RNG stream.
pub fn render_session(
    spec: &SynthSpec,
    roster: &[SynthParticipant],
    pair: (usize, usize),
    task: Task,
    index: u64,
) -> Result<RenderedSession> {
    let (a, b) = pair;
    if a == b {
        return Err(SynthError::InvalidSpec(format!("participant {a} paired with itself")));
    }
    let mut rng = stream(spec.seed, 1 + index);
    let target_signals = render_participant(spec, &roster[a].traits, &roster[b].traits, task, &mut rng);
    let partner_signals = render_participant(spec, &roster[b].traits, &roster[a].traits, task, &mut rng);
    Ok(RenderedSession {
        session_id: format!("S{:04}", index / spec.tasks.len() as u64),
        task,
        target: a,
        partner: b,
        target_signals,
        partner_signals,
    })
}

fn write_participant(dir: &Path, stem: &str, r: &RenderedParticipant, spec: &SynthSpec) -> Result<ParticipantFiles> {
    let openface = dir.join(format!("{stem}.csv"));
    let audio = dir.join(format!("{stem}.wav"));
    ingest::write_openface_csv(&openface, &r.action_units, &r.gaze, &r.head_pose, spec.frame_rate)?;
    ingest::write_wav_f32(&audio, &r.audio_samples, spec.sample_rate)?;
    Ok(ParticipantFiles { openface, audio })
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest_path: PathBuf,
    pub participants: Vec<SynthParticipant>,
    pub sessions: usize,
}

/// Writes labels, signals and a manifest under `out`. Uses `jobs` threads
/// (0 = all cores); the bytes written do not depend on it.
pub fn write_dataset(spec: &SynthSpec, key: &ScoringKey, out: &Path, jobs: usize) -> Result<SynthDataset> {
    let roster = sample_participants(spec, key)?;
    let pairs = pair_participants(spec);
    std::fs::create_dir_all(out.join("sessions"))?;

    let labels: BTreeMap<String, Vec<f64>> = roster.iter().map(|p| (p.info.id.clone(), p.items.clone())).collect();
    ingest::write_labels_csv(out.join("labels.csv"), &labels)?;

    let jobs_list: Vec<(usize, (usize, usize), Task)> = pairs
        .iter()
        .enumerate()
        .flat_map(|(s, &pair)| spec.tasks.iter().map(move |&t| (s, pair, t)))
        .collect();
    let n_tasks = spec.tasks.len();
    let render = |&(s, pair, task): &(usize, (usize, usize), Task)| -> Result<SessionEntry> {
        let ti = spec.tasks.iter().position(|&t| t == task).expect("task listed");
        let rs = render_session(spec, &roster, pair, task, (s * n_tasks + ti) as u64)?;
        let dir = out.join("sessions").join(format!("{}_{}", rs.session_id, task));
        std::fs::create_dir_all(&dir)?;
        let (ta, pa) = (&roster[pair.0].info.id, &roster[pair.1].info.id);
        let tf = write_participant(&dir, ta, &rs.target_signals, spec)?;
        let pf = write_participant(&dir, pa, &rs.partner_signals, spec)?;
        let rel = |p: PathBuf| p.strip_prefix(out).map(Path::to_path_buf).unwrap_or(p);
        Ok(SessionEntry {
            session_id: rs.session_id,
            task,
            target_id: ta.clone(),
            partner_id: pa.clone(),
            files: SessionFiles {
                target: ParticipantFiles {
                    openface: rel(tf.openface),
                    audio: rel(tf.audio),
                },
                partner: ParticipantFiles {
                    openface: rel(pf.openface),
                    audio: rel(pf.audio),
                },
            },
        })
    };
    let sessions: Vec<SessionEntry> = if jobs == 1 {
        jobs_list.iter().map(render).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        pool.install(|| jobs_list.par_iter().map(render).collect::<Result<_>>())?
    };

    let manifest = ManifestFile {
        version: 1,
        frame_rate: spec.frame_rate,
        labels: PathBuf::from("labels.csv"),
        participants: roster.iter().map(|p| p.info.clone()).collect(),
        sessions,
    };
    let manifest_path = out.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(out.join("synth_spec.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(SynthDataset {
        manifest_path,
        sessions: manifest.sessions.len(),
        participants: roster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{load_manifest, load_session, Modality};
    use crate::spectral::{raw_spectral_rows, spectral_map};

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_participants: 8,
            tasks: vec![Task::Lego],
            frames: 200,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn items_are_on_the_likert_scale_and_deterministic() {
        let key = ScoringKey::bfi2();
        let spec = SynthSpec {
            n_participants: 50,
            ..small_spec()
        };
        let a = sample_participants(&spec, &key).unwrap();
        assert!(a.iter().flat_map(|p| &p.items).all(|&v| (1.0..=5.0).contains(&v) && v.fract() == 0.0));
        assert_eq!(a, sample_participants(&spec, &key).unwrap());
        let other = sample_participants(&SynthSpec { seed: 12, ..spec }, &key).unwrap();
        assert_ne!(a, other);
    }

    fn corr(x: &[f64], y: &[f64]) -> f64 {
        crate::eval::pearson(x, y).unwrap()
    }

    #[test]
    fn facets_within_a_trait_correlate_positively() {
        let key = ScoringKey::bfi2();
        let spec = SynthSpec {
            n_participants: 200,
            club_size: 4,
            ..small_spec()
        };
        let roster = sample_participants(&spec, &key).unwrap();
        let facets: Vec<Vec<f64>> = roster
            .iter()
            .map(|p| key.nuances_to_facets(&PersonalityVector::new(Level::Nuance, p.items.clone(), "")).unwrap().scores)
            .collect();
        for members in key.trait_facets() {
            for (i, &a) in members.iter().enumerate() {
                for &b in &members[i + 1..] {
                    let x: Vec<f64> = facets.iter().map(|f| f[a]).collect();
                    let y: Vec<f64> = facets.iter().map(|f| f[b]).collect();
                    assert!(corr(&x, &y) > 0.0, "facets {a},{b}");
                }
            }
        }
    }

    #[test]
    fn pairing_stays_inside_clubs() {
        let spec = SynthSpec {
            n_participants: 10,
            sessions_per_participant: 3,
            club_size: 4,
            ..Default::default()
        };
        let pairs = pair_participants(&spec);
        // clubs {0..4} and {4..10}
        for &(a, b) in &pairs {
            assert_eq!(a < 4, b < 4);
        }
        let mut degree = vec![0; 10];
        for &(a, b) in &pairs {
            degree[a] += 1;
            degree[b] += 1;
        }
        assert!(degree.iter().all(|&d| d == 3));
        assert!(SynthSpec { sessions_per_participant: 4, ..spec.clone() }.validate().is_err());
        assert!(SynthSpec { sessions_per_participant: 0, ..spec }.validate().is_err());
    }

    #[test]
    fn noiseless_spectra_peak_at_planted_frequencies() {
        let key = ScoringKey::bfi2();
        let spec = SynthSpec {
            snr: f64::INFINITY,
            ..small_spec()
        };
        let roster = sample_participants(&spec, &key).unwrap();
        let rs = render_session(&spec, &roster, (0, 1), Task::Lego, 0).unwrap();
        let series = ingest::ModalitySeries::new(
            Modality::Gaze,
            spec.frame_rate,
            rs.target_signals.gaze.clone(),
            ingest::SeriesMeta {
                participant_id: "x".into(),
                session_id: "s".into(),
                task: Task::Lego,
            },
        )
        .unwrap();
        let map = spectral_map(&series).unwrap();
        let raw = raw_spectral_rows(&series).unwrap();
        let grid = |f: f64| (f / 0.5 * (BINS - 1) as f64).round() as usize;
        let p = &spec.planted;
        let mut planted: Vec<usize> = p.trait_frequencies.iter().map(|&f| grid(f)).collect();
        planted.extend(p.trait_frequencies.iter().map(|&f| grid(f + p.partner_offset)));
        planted.push(grid(p.reference_frequency));
        for c in 0..6 {
            let row = map.data.row(c);
            let argmax = (0..BINS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(planted.contains(&argmax), "channel {c}: argmax {argmax} not in {planted:?}");
            // the keyed tones and the reference are local maxima; crosstalk
            // tones may sit under a neighbour's leakage
            let keyed = (35 + c) % 5;
            let f = p.trait_frequencies[keyed];
            let strong = [grid(f), grid(f + p.partner_offset), grid(p.reference_frequency)];
            let r = raw.row(c);
            for &k in &strong {
                assert!(r[k] > r[k - 1] && r[k] > r[k + 1], "channel {c} bin {k}");
            }
        }
    }

    #[test]
    fn higher_trait_raises_its_peak() {
        let key = ScoringKey::bfi2();
        let spec = SynthSpec {
            snr: f64::INFINITY,
            ..small_spec()
        };
        let mut roster = sample_participants(&spec, &key).unwrap();
        roster[0].traits = vec![1.5, 2.0, 3.0, 4.0, 4.5];
        roster[1].traits = vec![4.5, 4.0, 3.0, 2.0, 1.5];
        let peak = |who: usize| {
            let rs = render_session(&spec, &roster, (who, 2), Task::Lego, 0).unwrap();
            let series = ingest::ModalitySeries::new(
                Modality::HeadPose,
                spec.frame_rate,
                rs.target_signals.head_pose,
                ingest::SeriesMeta {
                    participant_id: "x".into(),
                    session_id: "s".into(),
                    task: Task::Lego,
                },
            )
            .unwrap();
            raw_spectral_rows(&series).unwrap()
        };
        let (a, b) = (peak(0), peak(1));
        let grid = |f: f64| (f / 0.5 * (BINS - 1) as f64).round() as usize;
        for c in 0..6 {
            for (t, &f) in spec.planted.trait_frequencies.iter().enumerate() {
                let k = grid(f);
                let (x, y) = (roster[0].traits[t], roster[1].traits[t]);
                if x != y {
                    assert_eq!(a[[c, k]] > b[[c, k]], x > y, "channel {c} trait {t}");
                }
            }
        }
    }

    #[test]
    fn keyed_trait_dominates_its_channel() {
        let key = ScoringKey::bfi2();
        let spec = SynthSpec {
            snr: f64::INFINITY,
            ..small_spec()
        };
        let mut roster = sample_participants(&spec, &key).unwrap();
        roster[0].traits = vec![3.0; 5];
        let rs = render_session(&spec, &roster, (0, 1), Task::Lego, 0).unwrap();
        let series = ingest::ModalitySeries::new(
            Modality::HeadPose,
            spec.frame_rate,
            rs.target_signals.head_pose,
            ingest::SeriesMeta {
                participant_id: "x".into(),
                session_id: "s".into(),
                task: Task::Lego,
            },
        )
        .unwrap();
        let raw = raw_spectral_rows(&series).unwrap();
        let grid = |f: f64| (f / 0.5 * (BINS - 1) as f64).round() as usize;
        let bins: Vec<usize> = spec.planted.trait_frequencies.iter().map(|&f| grid(f)).collect();
        for c in 0..6 {
            let keyed = (41 + c) % 5;
            for (t, &k) in bins.iter().enumerate().filter(|&(t, _)| t != keyed) {
                assert!(raw[[c, bins[keyed]]] > raw[[c, k]] + 1.0, "channel {c}: trait {t} rivals {keyed}");
            }
        }
    }

    #[test]
    fn partner_changes_the_cross_subject_component() {
        let key = ScoringKey::bfi2();
        let spec = SynthSpec {
            snr: f64::INFINITY,
            ..small_spec()
        };
        let mut roster = sample_participants(&spec, &key).unwrap();
        roster[1].traits = vec![1.0; 5];
        roster[2].traits = vec![5.0; 5];
        let a = render_session(&spec, &roster, (0, 1), Task::Lego, 3).unwrap();
        let b = render_session(&spec, &roster, (0, 2), Task::Lego, 3).unwrap();
        // same stream, so only the partner amplitude differs
        let diff = &a.target_signals.gaze - &b.target_signals.gaze;
        assert!(diff.iter().any(|v| v.abs() > 1e-3));
        let f = spec.planted.trait_frequencies[0] + spec.planted.partner_offset;
        let col: Vec<f64> = diff.column(0).to_vec();
        let fit: f64 = col.iter().enumerate().map(|(j, v)| v * (2.0 * PI * f * j as f64).sin()).sum::<f64>();
        let fit2: f64 = col.iter().enumerate().map(|(j, v)| v * (2.0 * PI * f * j as f64).cos()).sum::<f64>();
        let amp = 2.0 * (fit * fit + fit2 * fit2).sqrt() / col.len() as f64;
        assert!((amp - spec.planted.partner_gain * 4.0).abs() < 0.05, "partner amplitude {amp}");
    }

    #[test]
    fn files_round_trip_through_ingest() {
        let key = ScoringKey::bfi2();
        let spec = small_spec();
        let dir = tempfile::tempdir().unwrap();
        let ds = write_dataset(&spec, &key, dir.path(), 1).unwrap();
        let manifest = load_manifest(&ds.manifest_path).unwrap();
        assert_eq!(manifest.sessions.len(), pair_participants(&spec).len());
        for (id, row) in &manifest.labels.rows {
            let p = ds.participants.iter().find(|p| &p.info.id == id).unwrap();
            assert_eq!(row, &p.items);
        }
        let roster = sample_participants(&spec, &key).unwrap();
        let pairs = pair_participants(&spec);
        for (s, entry) in manifest.sessions.iter().enumerate() {
            let rec = load_session(entry, manifest.frame_rate).unwrap();
            let rs = render_session(&spec, &roster, pairs[s], Task::Lego, s as u64).unwrap();
            let close = |a: &Array2<f64>, b: &Array2<f64>| a.dim() == b.dim() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6);
            assert!(close(&rec.target.series[0].data, &rs.target_signals.action_units));
            assert!(close(&rec.target.series[1].data, &rs.target_signals.gaze));
            assert!(close(&rec.partner.series[2].data, &rs.partner_signals.head_pose));
            let audio = rec.target.series[3].data.column(0).to_vec();
            assert_eq!(audio.len(), rs.target_signals.audio.len());
            assert!(audio.iter().zip(&rs.target_signals.audio).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }

    #[test]
    fn output_is_independent_of_job_count() {
        let key = ScoringKey::bfi2();
        let spec = small_spec();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(&spec, &key, a.path(), 1).unwrap();
        write_dataset(&spec, &key, b.path(), 3).unwrap();
        fn files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
            for e in std::fs::read_dir(dir).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    files(root, &p, out);
                } else {
                    out.push(p.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        let (mut fa, mut fb) = (Vec::new(), Vec::new());
        files(a.path(), a.path(), &mut fa);
        files(b.path(), b.path(), &mut fb);
        fa.sort();
        fb.sort();
        assert_eq!(fa, fb);
        assert!(fa.len() > 10);
        for rel in &fa {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
    }
}
