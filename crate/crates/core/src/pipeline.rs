//! Glue from a dataset manifest to training samples and evaluation tables.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bfi2::{Level, Order, PersonalityVector, ScoringError, ScoringKey, Strategy};
use crate::eval::{self, EvalError, FoldSplit, MetricTable, Roster, RosterEntry, SessionLink, SessionRef};
use crate::ingest::{self, DatasetManifest, IngestError, LabelTable, Modality, SessionEntry, Task};
use crate::nn::{DyadInput, Model, NnError};
use crate::spectral::{self, SpectralError, SpectralMap};
use crate::train::{Sample, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("labels lack item {0} of the scoring key")]
    MissingItem(u32),
    #[error("no features for session {0}")]
    MissingFeatures(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Nuance vectors, in key item order, for every row of a label table.
pub fn label_nuances(labels: &LabelTable, key: &ScoringKey) -> Result<BTreeMap<String, PersonalityVector>> {
    let cols: Vec<usize> = key
        .items()
        .iter()
        .map(|it| {
            labels
                .item_ids
                .iter()
                .position(|&id| id == it.id)
                .ok_or(PipelineError::MissingItem(it.id))
        })
        .collect::<Result<_>>()?;
    Ok(labels
        .rows
        .iter()
        .map(|(id, row)| {
            let scores = cols.iter().map(|&c| row[c]).collect();
            (id.clone(), PersonalityVector::new(Level::Nuance, scores, id.clone()))
        })
        .collect())
}

/// Nuance-level ground truth of the manifest's participants.
pub fn participant_nuances(manifest: &DatasetManifest, key: &ScoringKey) -> Result<BTreeMap<String, PersonalityVector>> {
    let mut all = label_nuances(&manifest.labels, key)?;
    all.retain(|id, _| manifest.participant(id).is_some());
    Ok(all)
}

/// Ground truth converted to `level`.
pub fn truths_at(nuances: &BTreeMap<String, PersonalityVector>, key: &ScoringKey, level: Level) -> Result<BTreeMap<String, PersonalityVector>> {
    nuances
        .iter()
        .map(|(id, v)| {
            let mut out = key.nuances_to_level(v, level)?;
            out.subject = id.clone();
            Ok((id.clone(), out))
        })
        .collect()
}

/// Balancing roster, optionally restricted to one task's sessions.
pub fn roster(manifest: &DatasetManifest, key: &ScoringKey, task: Option<Task>) -> Result<Roster> {
    let traits = truths_at(&participant_nuances(manifest, key)?, key, Level::Trait)?;
    Ok(Roster {
        participants: manifest
            .participants
            .iter()
            .map(|p| RosterEntry {
                id: p.id.clone(),
                age: p.age,
                gender: p.gender.clone(),
                traits: traits[&p.id].scores.clone(),
            })
            .collect(),
        sessions: manifest
            .sessions
            .iter()
            .filter(|s| task.is_none_or(|t| t == s.task))
            .map(|s| SessionLink {
                session: SessionRef {
                    session_id: s.session_id.clone(),
                    task: s.task,
                },
                a: s.target_id.clone(),
                b: s.partner_id.clone(),
            })
            .collect(),
    })
}

/// Spectral maps of both participants of one task video.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionMaps {
    pub session: SessionRef,
    pub a_id: String,
    pub b_id: String,
    pub a: [Array2<f64>; 4],
    pub b: [Array2<f64>; 4],
}

impl SessionMaps {
    /// Both role assignments: `(target id, input)`.
    pub fn dyads(&self) -> [(String, DyadInput); 2] {
        [
            (
                self.a_id.clone(),
                DyadInput {
                    target: self.a.clone(),
                    partner: self.b.clone(),
                },
            ),
            (
                self.b_id.clone(),
                DyadInput {
                    target: self.b.clone(),
                    partner: self.a.clone(),
                },
            ),
        ]
    }
}

fn maps_of(bundle: &ingest::ParticipantBundle) -> Result<[SpectralMap; 4]> {
    let m = |i: usize| spectral::spectral_map(&bundle.series[i]);
    Ok([m(0)?, m(1)?, m(2)?, m(3)?])
}

pub fn session_maps(entry: &SessionEntry, frame_rate: f64) -> Result<(SessionRef, [SpectralMap; 4], [SpectralMap; 4])> {
    let rec = ingest::load_session(entry, frame_rate)?;
    Ok((
        SessionRef {
            session_id: entry.session_id.clone(),
            task: entry.task,
        },
        maps_of(&rec.target)?,
        maps_of(&rec.partner)?,
    ))
}

fn data(maps: &[SpectralMap; 4]) -> [Array2<f64>; 4] {
    [maps[0].data.clone(), maps[1].data.clone(), maps[2].data.clone(), maps[3].data.clone()]
}

fn run_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Maps for every session (optionally one task) in manifest order.
pub fn compute_features(manifest: &DatasetManifest, task: Option<Task>, jobs: usize) -> Result<Vec<SessionMaps>> {
    let entries: Vec<&SessionEntry> = manifest
        .sessions
        .iter()
        .filter(|s| task.is_none_or(|t| t == s.task))
        .collect();
    let fr = manifest.frame_rate;
    let one = |e: &&SessionEntry| -> Result<SessionMaps> {
        let (session, a, b) = session_maps(e, fr)?;
        Ok(SessionMaps {
            session,
            a_id: e.target_id.clone(),
            b_id: e.partner_id.clone(),
            a: data(&a),
            b: data(&b),
        })
    };
    run_pool(jobs, || entries.par_iter().map(one).collect::<Result<Vec<_>>>())?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureIndexEntry {
    session_id: String,
    task: Task,
    a_id: String,
    b_id: String,
}

pub const FEATURE_INDEX: &str = "features.json";

fn stem(dir: &Path, s: &SessionRef, pid: &str, m: Modality) -> PathBuf {
    dir.join(format!("{}_{}_{}_{}", s.session_id, s.task, pid, m.name()))
}

/// Computes and writes maps for every session, plus an index file.
pub fn write_features(manifest: &DatasetManifest, out: &Path, jobs: usize) -> Result<usize> {
    std::fs::create_dir_all(out)?;
    let fr = manifest.frame_rate;
    let entries: Vec<&SessionEntry> = manifest.sessions.iter().collect();
    let write_one = |e: &&SessionEntry| -> Result<FeatureIndexEntry> {
        let (session, a, b) = session_maps(e, fr)?;
        for (pid, maps) in [(&e.target_id, &a), (&e.partner_id, &b)] {
            for map in maps {
                spectral::write_spectral_map(map, &stem(out, &session, pid, map.modality))?;
            }
        }
        Ok(FeatureIndexEntry {
            session_id: session.session_id,
            task: session.task,
            a_id: e.target_id.clone(),
            b_id: e.partner_id.clone(),
        })
    };
    let index = run_pool(jobs, || entries.par_iter().map(write_one).collect::<Result<Vec<_>>>())??;
    std::fs::write(out.join(FEATURE_INDEX), serde_json::to_string_pretty(&index)?)?;
    Ok(index.len())
}

/// Reads maps written by [`write_features`], optionally for one task.
pub fn read_features(dir: &Path, task: Option<Task>) -> Result<Vec<SessionMaps>> {
    let index: Vec<FeatureIndexEntry> = serde_json::from_str(&std::fs::read_to_string(dir.join(FEATURE_INDEX))?)?;
    index
        .into_iter()
        .filter(|e| task.is_none_or(|t| t == e.task))
        .map(|e| {
            let session = SessionRef {
                session_id: e.session_id,
                task: e.task,
            };
            let load = |pid: &str| -> Result<[Array2<f64>; 4]> {
                let m = |mo: Modality| -> Result<Array2<f64>> { Ok(spectral::read_spectral_map(&stem(dir, &session, pid, mo))?.data) };
                Ok([m(Modality::ActionUnits)?, m(Modality::Gaze)?, m(Modality::HeadPose)?, m(Modality::Audio)?])
            };
            Ok(SessionMaps {
                a: load(&e.a_id)?,
                b: load(&e.b_id)?,
                a_id: e.a_id,
                b_id: e.b_id,
                session,
            })
        })
        .collect()
}

/// Two samples per listed session, one per participant as target.
pub fn build_samples(maps: &[SessionMaps], sessions: &[SessionRef], truths: &BTreeMap<String, PersonalityVector>) -> Result<Vec<Sample>> {
    let by_ref: BTreeMap<&SessionRef, &SessionMaps> = maps.iter().map(|m| (&m.session, m)).collect();
    let mut out = Vec::with_capacity(2 * sessions.len());
    for s in sessions {
        let m = by_ref
            .get(s)
            .ok_or_else(|| PipelineError::MissingFeatures(format!("{}/{}", s.session_id, s.task)))?;
        for (pid, input) in m.dyads() {
            let t = truths
                .get(&pid)
                .ok_or_else(|| EvalError::MissingParticipant(pid.clone()))?;
            out.push(Sample {
                session_id: s.session_id.clone(),
                participant_id: pid,
                input,
                target: t.scores.clone(),
            });
        }
    }
    Ok(out)
}

/// Train/validation/test samples of one fold.
#[derive(Debug, Clone)]
pub struct FoldSamples {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn with_task(list: &[SessionRef], task: Option<Task>) -> Vec<SessionRef> {
    list.iter()
        .filter(|s| task.is_none_or(|t| t == s.task))
        .cloned()
        .collect()
}

pub fn fold_samples(
    maps: &[SessionMaps],
    fold: &FoldSplit,
    task: Option<Task>,
    truths: &BTreeMap<String, PersonalityVector>,
) -> Result<FoldSamples> {
    Ok(FoldSamples {
        train: build_samples(maps, &with_task(&fold.train_sessions, task), truths)?,
        val: build_samples(maps, &with_task(&fold.val_sessions, task), truths)?,
        test: build_samples(maps, &with_task(&fold.test_sessions, task), truths)?,
    })
}

/// Eval-mode predictions, one vector per sample, subject = target id.
pub fn predict_samples(model: &Model, samples: &[Sample], level: Level) -> Result<Vec<PersonalityVector>> {
    samples
        .iter()
        .map(|s| Ok(PersonalityVector::new(level, model.predict(&s.input)?, s.participant_id.clone())))
        .collect()
}

/// Trait-level tables of the model and the mean baseline on one fold's test
/// participants. The baseline averages the training participants' truths at
/// the model's level and goes through the same aggregation.
pub struct FoldEvaluation {
    pub model: MetricTable,
    pub baseline: MetricTable,
}

pub fn evaluate_fold(
    preds: &[PersonalityVector],
    fold: &FoldSplit,
    train_ids: &BTreeSet<String>,
    nuances: &BTreeMap<String, PersonalityVector>,
    key: &ScoringKey,
    level: Level,
    order: Order,
    strategy: Strategy,
) -> Result<FoldEvaluation> {
    let tested: BTreeSet<&str> = preds.iter().map(|p| p.subject.as_str()).collect();
    let test_truth: BTreeMap<String, PersonalityVector> = nuances
        .iter()
        .filter(|(id, _)| fold.test.contains(*id) && tested.contains(id.as_str()))
        .map(|(id, v)| (id.clone(), v.clone()))
        .collect();
    let model = eval::evaluate_cross_level(preds, &test_truth, key, order, strategy)?;
    let level_truths = truths_at(nuances, key, level)?;
    let train: Vec<PersonalityVector> = train_ids.iter().map(|id| level_truths[id].clone()).collect();
    let base = eval::baseline_predict(&train)?;
    let base_preds: Vec<PersonalityVector> = test_truth
        .keys()
        .map(|id| PersonalityVector::new(level, base.scores.clone(), id.clone()))
        .collect();
    let baseline = eval::evaluate_cross_level(&base_preds, &test_truth, key, order, strategy)?;
    Ok(FoldEvaluation { model, baseline })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{write_dataset, SynthSpec};

    #[test]
    fn features_round_trip_and_samples() {
        let key = ScoringKey::bfi2();
        let spec = SynthSpec {
            n_participants: 8,
            tasks: vec![Task::Lego, Task::Ghost],
            frames: 120,
            seed: 5,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let ds = write_dataset(&spec, &key, dir.path(), 1).unwrap();
        let manifest = ingest::load_manifest(&ds.manifest_path).unwrap();
        let live = compute_features(&manifest, Some(Task::Lego), 1).unwrap();
        assert_eq!(live.len(), manifest.sessions_for_task(Task::Lego).count());
        let fdir = dir.path().join("maps");
        assert_eq!(write_features(&manifest, &fdir, 2).unwrap(), manifest.sessions.len());
        let back = read_features(&fdir, Some(Task::Lego)).unwrap();
        assert_eq!(back.len(), live.len());
        for (x, y) in live.iter().zip(&back) {
            assert_eq!(x.session, y.session);
            for (a, b) in x.a.iter().zip(&y.a) {
                assert!(a.iter().zip(b).all(|(u, v)| (u - v).abs() < 1e-5));
            }
        }
        let nu = participant_nuances(&manifest, &key).unwrap();
        let traits = truths_at(&nu, &key, Level::Trait).unwrap();
        let refs: Vec<SessionRef> = live.iter().map(|m| m.session.clone()).collect();
        let samples = build_samples(&live, &refs, &traits).unwrap();
        assert_eq!(samples.len(), 2 * refs.len());
        assert_eq!(samples[0].target, traits[&samples[0].participant_id].scores);
        assert_eq!(samples[1].input.target, samples[0].input.partner);
        let r = roster(&manifest, &key, Some(Task::Lego)).unwrap();
        assert_eq!(r.participants.len(), 8);
        assert_eq!(r.sessions.len(), refs.len());
    }
}
