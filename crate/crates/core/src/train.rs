//! MSE training with Adam and early stopping, plus a small hyperparameter sweep.

use std::path::PathBuf;

use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bfi2::Level;
use crate::ingest::Task;
use crate::nn::{DyadInput, Model, ModelConfig, NnError, ParameterSet};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("parameter and gradient sets differ in shape")]
    ShapeMismatch,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("invalid search bounds: {0}")]
    InvalidBounds(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub const LR_BOUNDS: (f64, f64) = (1e-5, 1e-2);
pub const BATCH_SIZES: [usize; 2] = [16, 32];

/// Mean of squared differences.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(TrainError::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update; increments `state.t` before use.
pub fn adam_step(params: &mut ParameterSet, grads: &ParameterSet, state: &mut AdamState, lr: f64, cfg: AdamConfig) -> Result<()> {
    if !params.same_shapes(grads) || !params.same_shapes(&state.m) || !params.same_shapes(&state.v) {
        return Err(TrainError::ShapeMismatch);
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let g = grads.get(name)?;
        let m = state.m.get_mut(name)?;
        Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
        let v = state.v.get_mut(name)?;
        Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        if lr == 0.0 {
            continue;
        }
        let (m, v) = (state.m.get(name)?, state.v.get(name)?);
        Zip::from(params.get_mut(name)?).and(m).and(v).for_each(|p, &m, &v| {
            *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub sweep_count: usize,
    /// Decoupled decay of weight matrices (not biases or norm gains), scaled
    /// by the learning rate.
    pub weight_decay: f64,
    pub seed: u64,
    pub level: Level,
    pub task: Option<Task>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 200,
            patience: 10,
            sweep_count: 10,
            weight_decay: 0.0,
            seed: 0,
            level: Level::Trait,
            task: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = LR_BOUNDS;
        // lr = 0 is allowed for stall diagnostics
        if !(self.learning_rate == 0.0 || (lo..=hi).contains(&self.learning_rate)) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate {} outside [{lo}, {hi}]",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be positive".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(TrainError::InvalidConfig("max_epochs and patience must be positive".into()));
        }
        if self.sweep_count == 0 {
            return Err(TrainError::InvalidConfig("sweep_count must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        Ok(())
    }
}

/// One dyadic example: the target's label vector at the trained level.
#[derive(Debug, Clone)]
pub struct Sample {
    pub session_id: String,
    pub participant_id: String,
    pub input: DyadInput,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// `initial`, `random` or `expected-improvement`.
    pub proposal: String,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub checkpoint: Option<PathBuf>,
    pub search_note: Option<String>,
    pub trials: Vec<TrialRecord>,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Mean eval-mode MSE over `samples`.
pub fn evaluate_loss(model: &Model, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += mse_loss(&model.predict(&s.input)?, &s.target)?;
    }
    Ok(total / samples.len() as f64)
}

/// Per-label mean of the training targets.
pub fn label_means(samples: &[Sample]) -> Vec<f64> {
    let k = samples[0].target.len();
    let mut mean = vec![0.0; k];
    for s in samples {
        for (m, t) in mean.iter_mut().zip(&s.target) {
            *m += t;
        }
    }
    mean.iter_mut().for_each(|m| *m /= samples.len() as f64);
    mean
}

/// Trains one model with early stopping on validation MSE and returns the
/// best-epoch parameters. The head bias starts at the training-label mean.
fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name.ends_with(".g") || name.ends_with(".bo"))
}

/// Shrinks weight matrices by `1 - lr * decay`; biases and norm parameters are kept.
pub fn apply_weight_decay(params: &mut ParameterSet, lr: f64, decay: f64) {
    let keep = 1.0 - lr * decay;
    for (_, w) in params.iter_mut().filter(|(n, _)| decays(n)) {
        *w *= keep;
    }
}

pub fn train_model(train: &[Sample], val: &[Sample], cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let k = model_cfg.output_dim;
    if let Some(s) = train.iter().chain(val).find(|s| s.target.len() != k) {
        return Err(TrainError::LengthMismatch(s.target.len(), k));
    }
    let mut model = Model::new(model_cfg.clone())?;
    let means = label_means(train);
    model
        .params
        .get_mut("head.b")?
        .iter_mut()
        .zip(&means)
        .for_each(|(b, m)| *b = *m);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&model.params);
    let adam = AdamConfig::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0, model.params.clone());
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.params.zeros_like();
            for &i in batch {
                let bp = model.backprop(&train[i].input, &train[i].target, Some(&mut rng))?;
                train_loss += bp.loss;
                grads.add_scaled(&bp.grads, 1.0 / batch.len() as f64);
            }
            if cfg.weight_decay > 0.0 {
                apply_weight_decay(&mut model.params, cfg.learning_rate, cfg.weight_decay);
            }
            adam_step(&mut model.params, &grads, &mut state, cfg.learning_rate, adam)?;
        }
        train_loss /= train.len() as f64;
        let val_loss = evaluate_loss(&model, val)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.params = best.2;
    let report = TrainReport {
        config: cfg.clone(),
        model: model_cfg.clone(),
        epochs,
        best_epoch: best.1,
        best_val_loss: best.0,
        stopped_early,
        checkpoint: None,
        search_note: None,
        trials: Vec::new(),
    };
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lr_min: f64,
    pub lr_max: f64,
    pub batch_sizes: Vec<usize>,
    /// Propose trials after the third by expected improvement under a
    /// Gaussian-process surrogate instead of pure random sampling.
    pub surrogate: bool,
    /// Points evaluated as the first trials, before any sampled proposal.
    #[serde(default)]
    pub initial: Vec<TrialParams>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            lr_min: LR_BOUNDS.0,
            lr_max: LR_BOUNDS.1,
            batch_sizes: BATCH_SIZES.to_vec(),
            surrogate: true,
            initial: Vec::new(),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(TrainError::InvalidBounds(format!("lr range [{}, {}]", self.lr_min, self.lr_max)));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(TrainError::InvalidBounds("batch sizes must be non-empty and positive".into()));
        }
        for p in &self.initial {
            if !(self.lr_min..=self.lr_max).contains(&p.learning_rate) || !self.batch_sizes.contains(&p.batch_size) {
                return Err(TrainError::InvalidBounds(format!(
                    "initial point lr {} batch {} outside the space",
                    p.learning_rate, p.batch_size
                )));
            }
        }
        Ok(())
    }

    /// Unit-cube coordinates of a point: normalized log lr, batch index.
    fn encode(&self, lr: f64, batch_idx: usize) -> [f64; 2] {
        let span = (self.lr_max / self.lr_min).ln();
        let x = if span > 0.0 { (lr / self.lr_min).ln() / span } else { 0.0 };
        let b = if self.batch_sizes.len() > 1 {
            batch_idx as f64 / (self.batch_sizes.len() - 1) as f64
        } else {
            0.0
        };
        [x, b]
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> (f64, usize) {
        let u: f64 = rng.random();
        let lr = self.lr_min * (self.lr_max / self.lr_min).powf(u);
        (lr, rng.random_range(0..self.batch_sizes.len()))
    }

    fn params(&self, lr: f64, batch_idx: usize) -> TrialParams {
        TrialParams {
            learning_rate: lr,
            batch_size: self.batch_sizes[batch_idx],
        }
    }

    fn encode_params(&self, p: &TrialParams) -> [f64; 2] {
        let bi = self.batch_sizes.iter().position(|&b| b == p.batch_size).unwrap_or(0);
        self.encode(p.learning_rate, bi)
    }
}

pub const SEARCH_NOTE: &str = "initial points first, then log-uniform learning rate and uniform batch size; \
trials after the third proposed by expected improvement under a GP surrogate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub best: TrialParams,
    pub best_trial: usize,
    pub trials: Vec<TrialRecord>,
}

/// Outcome of evaluating one trial.
pub struct TrialOutcome {
    pub val_loss: f64,
    pub best_epoch: usize,
}

const SURROGATE_WARMUP: usize = 3;
const EI_CANDIDATES: usize = 256;

/// Runs `trials` evaluations of `objective` and returns the argmin.
/// `objective` receives the trial index and parameters.
pub fn sweep<F>(space: &SearchSpace, trials: usize, seed: u64, objective: F) -> Result<SweepResult>
where
    F: Fn(usize, &TrialParams) -> Result<TrialOutcome> + Sync,
{
    sweep_with(space, trials, seed, 1, |t, p| objective(t, p).map(|o| (o, ()))).map(|(r, _)| r)
}

/// [`sweep`] with a payload per trial and up to `jobs` trials in flight.
/// Trials whose proposals do not depend on pending outcomes (the random
/// warm-up, or every trial without the surrogate) run concurrently; the
/// result does not depend on `jobs`.
pub fn sweep_with<T, F>(space: &SearchSpace, trials: usize, seed: u64, jobs: usize, objective: F) -> Result<(SweepResult, Vec<T>)>
where
    T: Send,
    F: Fn(usize, &TrialParams) -> Result<(TrialOutcome, T)> + Sync,
{
    space.validate()?;
    if trials == 0 {
        return Err(TrainError::InvalidBounds("trials must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| TrainError::InvalidConfig(format!("worker pool: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records: Vec<TrialRecord> = Vec::with_capacity(trials);
    let mut payloads = Vec::with_capacity(trials);
    let mut seen: Vec<([f64; 2], f64)> = Vec::new();
    while records.len() < trials {
        let start = records.len();
        let mut batch: Vec<(usize, TrialParams, &'static str)> = Vec::new();
        if space.surrogate && start >= SURROGATE_WARMUP.max(space.initial.len()) {
            let gp = Gp::fit(&seen);
            let best_y = seen.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
            let mut pick = None;
            for _ in 0..EI_CANDIDATES {
                let (lr, bi) = space.sample(&mut rng);
                let ei = gp.expected_improvement(space.encode(lr, bi), best_y);
                if pick.is_none_or(|(e, _, _)| ei > e) {
                    pick = Some((ei, lr, bi));
                }
            }
            let (_, lr, bi) = pick.expect("candidates drawn");
            batch.push((start, space.params(lr, bi), "expected-improvement"));
        } else {
            let end = if space.surrogate { SURROGATE_WARMUP.min(trials) } else { trials };
            let end = end.max(space.initial.len().min(trials));
            for t in start..end {
                match space.initial.get(t) {
                    Some(p) => batch.push((t, p.clone(), "initial")),
                    None => {
                        let (lr, bi) = space.sample(&mut rng);
                        batch.push((t, space.params(lr, bi), "random"));
                    }
                }
            }
        }
        let outcomes: Vec<Result<(TrialOutcome, T)>> =
            pool.install(|| batch.par_iter().map(|(t, p, _)| objective(*t, p)).collect());
        for ((trial, params, proposal), out) in batch.into_iter().zip(outcomes) {
            let (out, payload) = out?;
            log::info!(
                "trial {trial}: lr {:.3e} batch {} -> {:.5}",
                params.learning_rate,
                params.batch_size,
                out.val_loss
            );
            // failed trials are kept in the table but cannot win
            let y = if out.val_loss.is_finite() { out.val_loss } else { f64::MAX };
            seen.push((space.encode_params(&params), y));
            records.push(TrialRecord {
                trial,
                learning_rate: params.learning_rate,
                batch_size: params.batch_size,
                proposal: proposal.to_string(),
                best_val_loss: out.val_loss,
                best_epoch: out.best_epoch,
            });
            payloads.push(payload);
        }
    }
    let best_trial = records
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let ya = if a.1.best_val_loss.is_finite() { a.1.best_val_loss } else { f64::MAX };
            let yb = if b.1.best_val_loss.is_finite() { b.1.best_val_loss } else { f64::MAX };
            ya.total_cmp(&yb)
        })
        .map(|(i, _)| i)
        .expect("at least one trial");
    Ok((
        SweepResult {
            best: TrialParams {
                learning_rate: records[best_trial].learning_rate,
                batch_size: records[best_trial].batch_size,
            },
            best_trial,
            trials: records,
        },
        payloads,
    ))
}

/// Sweeps learning rate and batch size, training one model per trial, and
/// returns the best model with its report carrying the full trial table.
pub fn sweep_train(
    train: &[Sample],
    val: &[Sample],
    space: &SearchSpace,
    base: &TrainConfig,
    model_cfg: &ModelConfig,
    jobs: usize,
) -> Result<(Model, TrainReport)> {
    base.validate()?;
    let (result, mut runs) = sweep_with(space, base.sweep_count, base.seed, jobs, |trial, p| {
        let cfg = TrainConfig {
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            seed: base.seed.wrapping_add(1 + trial as u64),
            ..base.clone()
        };
        let mcfg = ModelConfig {
            seed: model_cfg.seed.wrapping_add(trial as u64),
            ..model_cfg.clone()
        };
        let (model, report) = train_model(train, val, &cfg, &mcfg)?;
        let out = TrialOutcome {
            val_loss: report.best_val_loss,
            best_epoch: report.best_epoch,
        };
        Ok((out, (model, report)))
    })?;
    let (model, mut report) = runs.swap_remove(result.best_trial);
    report.trials = result.trials;
    if space.surrogate {
        report.search_note = Some(SEARCH_NOTE.to_string());
    }
    Ok((model, report))
}

/// Zero-mean GP with a squared-exponential kernel on standardized targets.
struct Gp {
    xs: Vec<[f64; 2]>,
    alpha: Vec<f64>,
    chol: Vec<Vec<f64>>,
    y_mean: f64,
    y_sd: f64,
}

const GP_LENGTH: f64 = 0.3;
const GP_NOISE: f64 = 1e-6;

fn kernel(a: [f64; 2], b: [f64; 2]) -> f64 {
    let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    (-0.5 * d2 / (GP_LENGTH * GP_LENGTH)).exp()
}

fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][j] = (a[i][i] - s).max(1e-12).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

fn forward_sub(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; b.len()];
    for i in 0..b.len() {
        let s: f64 = (0..i).map(|k| l[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / l[i][i];
    }
    x
}

fn backward_sub_t(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
        x[i] = (b[i] - s) / l[i][i];
    }
    x
}

impl Gp {
    fn fit(data: &[([f64; 2], f64)]) -> Self {
        let n = data.len() as f64;
        let y_mean = data.iter().map(|d| d.1).sum::<f64>() / n;
        let var = data.iter().map(|d| (d.1 - y_mean).powi(2)).sum::<f64>() / n;
        let y_sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        let xs: Vec<[f64; 2]> = data.iter().map(|d| d.0).collect();
        let ys: Vec<f64> = data.iter().map(|d| (d.1 - y_mean) / y_sd).collect();
        let k: Vec<Vec<f64>> = xs
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                xs.iter()
                    .enumerate()
                    .map(|(j, &b)| kernel(a, b) + if i == j { GP_NOISE } else { 0.0 })
                    .collect()
            })
            .collect();
        let chol = cholesky(&k);
        let alpha = backward_sub_t(&chol, &forward_sub(&chol, &ys));
        Self {
            xs,
            alpha,
            chol,
            y_mean,
            y_sd,
        }
    }

    /// Posterior mean and sd in original units.
    fn predict(&self, x: [f64; 2]) -> (f64, f64) {
        let ks: Vec<f64> = self.xs.iter().map(|&a| kernel(a, x)).collect();
        let mu: f64 = ks.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        let v = forward_sub(&self.chol, &ks);
        let var = (1.0 - v.iter().map(|x| x * x).sum::<f64>()).max(0.0);
        (self.y_mean + self.y_sd * mu, self.y_sd * var.sqrt())
    }

    /// Expected improvement for minimization.
    fn expected_improvement(&self, x: [f64; 2], best: f64) -> f64 {
        let (mu, sd) = self.predict(x);
        if sd < 1e-12 {
            return (best - mu).max(0.0);
        }
        let z = (best - mu) / sd;
        let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cdf = 0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
        (best - mu) * cdf + sd * pdf
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn single(name: &str, values: &[f64]) -> ParameterSet {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap());
        ParameterSet::from_tensors(m)
    }

    fn noise_samples(n: usize, k: usize, seed: u64) -> Vec<Sample> {
        use crate::ingest::Modality;
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut map = |m: Modality| Array2::from_shape_fn((m.channels(), crate::BINS), |_| std.sample(&mut rng));
        (0..n)
            .map(|i| {
                let target = Modality::ALL.map(&mut map);
                let partner = Modality::ALL.map(&mut map);
                Sample {
                    session_id: format!("S{}", i / 2),
                    participant_id: format!("P{i}"),
                    input: DyadInput::new(target, partner).unwrap(),
                    target: (0..k).map(|j| 1.0 + ((i * 7 + j * 3) % 5) as f64).collect(),
                }
            })
            .collect()
    }

    fn tiny_model(k: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            output_dim: k,
            ..Default::default()
        }
    }

    #[test]
    fn one_epoch_when_capped() {
        // four sessions, both roles each
        let data = noise_samples(8, 5, 1);
        let cfg = TrainConfig {
            max_epochs: 1,
            ..Default::default()
        };
        let (_, report) = train_model(&data[..6], &data[6..], &cfg, &tiny_model(5)).unwrap();
        assert_eq!(report.epochs.len(), 1);
        assert_eq!(report.best_epoch, 1);
        assert!(!report.stopped_early);
    }

    #[test]
    fn stalls_stop_after_patience() {
        let data = noise_samples(8, 5, 2);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 20,
            patience: 2,
            ..Default::default()
        };
        let (model, report) = train_model(&data[..6], &data[6..], &cfg, &tiny_model(5)).unwrap();
        assert_eq!(report.epochs.len(), 3);
        assert!(report.stopped_early);
        assert_eq!(report.best_epoch, 1);
        assert!(report.epochs.iter().all(|e| e.val_loss == report.epochs[0].val_loss));
        assert_eq!(evaluate_loss(&model, &data[6..]).unwrap(), report.best_val_loss);
    }

    #[test]
    fn head_bias_starts_at_label_mean() {
        let data = noise_samples(6, 5, 3);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 2,
            patience: 1,
            ..Default::default()
        };
        let (model, _) = train_model(&data[..4], &data[4..], &cfg, &tiny_model(5)).unwrap();
        let b = model.params.get("head.b").unwrap();
        for (x, m) in b.iter().zip(label_means(&data[..4])) {
            assert_eq!(*x, m);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = noise_samples(4, 5, 4);
        let cfg = TrainConfig::default();
        assert!(matches!(train_model(&[], &data, &cfg, &tiny_model(5)), Err(TrainError::EmptySplit(_))));
        assert!(matches!(train_model(&data, &[], &cfg, &tiny_model(5)), Err(TrainError::EmptySplit(_))));
        assert!(matches!(train_model(&data, &data, &cfg, &tiny_model(15)), Err(TrainError::LengthMismatch(5, 15))));
    }

    #[test]
    fn overfits_tiny_planted_set() {
        use crate::bfi2::ScoringKey;
        use crate::synth::{write_dataset, SynthSpec};
        use crate::{ingest, pipeline};
        let key = ScoringKey::bfi2();
        let spec = SynthSpec {
            n_participants: 8,
            tasks: vec![crate::Task::Lego],
            frames: 160,
            seed: 11,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let ds = write_dataset(&spec, &key, dir.path(), 1).unwrap();
        let manifest = ingest::load_manifest(&ds.manifest_path).unwrap();
        let maps = pipeline::compute_features(&manifest, None, 1).unwrap();
        let nu = pipeline::participant_nuances(&manifest, &key).unwrap();
        let traits = pipeline::truths_at(&nu, &key, Level::Trait).unwrap();
        let refs: Vec<_> = maps.iter().map(|m| m.session.clone()).collect();
        let data = pipeline::build_samples(&maps, &refs, &traits).unwrap();
        let means = label_means(&data);
        let variance = data
            .iter()
            .map(|s| s.target.iter().zip(&means).map(|(t, m)| (t - m).powi(2)).sum::<f64>() / 5.0)
            .sum::<f64>()
            / data.len() as f64;
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            max_epochs: 200,
            patience: 199,
            ..Default::default()
        };
        let mcfg = ModelConfig {
            dropout: 0.0,
            ..tiny_model(5)
        };
        let (model, _) = train_model(&data, &data, &cfg, &mcfg).unwrap();
        let mse = evaluate_loss(&model, &data).unwrap();
        assert!(mse < 0.1 * variance, "train mse {mse} vs variance {variance}");
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0, 0.0], &[3.0, 1.0]).unwrap(), 5.0);
        assert!(matches!(mse_loss(&[1.0], &[1.0, 2.0]), Err(TrainError::LengthMismatch(1, 2))));
    }

    proptest! {
        #[test]
        fn mse_matches_loop(v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40)) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let mut s = 0.0;
            for i in 0..p.len() {
                s += (p[i] - t[i]).powi(2);
            }
            prop_assert!((mse_loss(&p, &t).unwrap() - s / p.len() as f64).abs() < 1e-12);
        }

        #[test]
        fn adam_first_step_is_signed_lr(g in prop::collection::vec(-5.0f64..5.0, 1..20), lr in 1e-5f64..1e-2) {
            // |g| >= 0.1 keeps the eps correction lr * eps / |g| below 1e-9
            prop_assume!(g.iter().all(|x| x.abs() >= 0.1));
            let mut p = single("w", &vec![0.5; g.len()]);
            let grads = single("w", &g);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &grads, &mut st, lr, AdamConfig::default()).unwrap();
            for (w, gi) in p.get("w").unwrap().iter().zip(&g) {
                let expected = 0.5 - lr * gi.signum();
                prop_assert!((w - expected).abs() < 1e-9, "{} vs {}", w, expected);
                let exact = 0.5 - lr * gi / (gi.abs() + 1e-8);
                prop_assert!((w - exact).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr() {
        let mut p = single("w", &[1.0, -2.0, 0.0, -0.0]);
        let orig = p.clone();
        let mut st = AdamState::new(&p);
        let zeros = p.zeros_like();
        adam_step(&mut p, &zeros, &mut st, 1e-3, AdamConfig::default()).unwrap();
        assert_eq!(p, orig);
        let grads = single("w", &[0.3, -0.1, 2.0, 5.0]);
        adam_step(&mut p, &grads, &mut st, 0.0, AdamConfig::default()).unwrap();
        let bits = |s: &ParameterSet| s.get("w").unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&orig));
        assert_eq!(st.t, 2);
        let wrong = single("w", &[1.0]);
        assert!(matches!(
            adam_step(&mut p, &wrong, &mut st, 1e-3, AdamConfig::default()),
            Err(TrainError::ShapeMismatch)
        ));
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = single("w", &[10.0, -8.0, 6.0]);
        let mut st = AdamState::new(&p);
        let mut norms = Vec::new();
        for _ in 0..100 {
            let grads = single("w", &p.get("w").unwrap().mapv(|w| 2.0 * w).iter().copied().collect::<Vec<_>>());
            adam_step(&mut p, &grads, &mut st, 0.05, AdamConfig::default()).unwrap();
            norms.push(p.get("w").unwrap().iter().map(|w| w * w).sum::<f64>().sqrt());
        }
        for w in norms[2..].windows(2) {
            assert!(w[1] < w[0], "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.learning_rate = 0.1));
        assert!(bad(|c| c.max_epochs = 0));
        assert!(bad(|c| c.batch_size = 0));
        assert!(bad(|c| c.weight_decay = -1.0));
    }

    #[test]
    fn weight_decay_spares_biases_and_norms() {
        let before = Model::new(tiny_model(5)).unwrap().params;
        let mut after = before.clone();
        apply_weight_decay(&mut after, 1e-2, 5.0);
        for (name, t) in after.iter() {
            let old = before.get(name).unwrap();
            if name.ends_with(".b") || name.ends_with(".g") || name.ends_with(".bo") {
                assert_eq!(t, old, "{name}");
            } else {
                assert_eq!(t, &(old * 0.95), "{name}");
            }
        }
    }

    fn bowl(p: &TrialParams) -> f64 {
        // optimum at lr = 1e-3, batch 32
        let x = p.learning_rate.log10() + 3.0;
        x * x + if p.batch_size == 32 { 0.0 } else { 0.5 }
    }

    #[test]
    fn sweep_ignores_job_count() {
        for surrogate in [true, false] {
            let space = SearchSpace {
                surrogate,
                ..Default::default()
            };
            let run = |jobs| {
                sweep_with(&space, 7, 9, jobs, |t, p| Ok((TrialOutcome { val_loss: bowl(p), best_epoch: 1 }, t)))
                    .unwrap()
            };
            let (a, pa) = run(1);
            let (b, pb) = run(3);
            assert_eq!(a, b);
            assert_eq!(pa, (0..7).collect::<Vec<_>>());
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn initial_points_run_first() {
        let first = TrialParams {
            learning_rate: 3e-3,
            batch_size: 32,
        };
        for surrogate in [true, false] {
            let space = SearchSpace {
                surrogate,
                initial: vec![first.clone()],
                ..Default::default()
            };
            let r = sweep(&space, 5, 2, |_, p| Ok(TrialOutcome { val_loss: bowl(p), best_epoch: 1 })).unwrap();
            assert_eq!(r.trials[0].proposal, "initial");
            assert_eq!((r.trials[0].learning_rate, r.trials[0].batch_size), (3e-3, 32));
            assert!(r.trials[1..].iter().all(|t| t.proposal != "initial"));
        }
        let outside = SearchSpace {
            initial: vec![TrialParams {
                learning_rate: 0.5,
                batch_size: 16,
            }],
            ..Default::default()
        };
        assert!(outside.validate().is_err());
    }

    #[test]
    fn sweep_single_trial_and_bounds() {
        let space = SearchSpace::default();
        let r = sweep(&space, 1, 4, |_, p| Ok(TrialOutcome { val_loss: bowl(p), best_epoch: 1 })).unwrap();
        assert_eq!(r.trials.len(), 1);
        assert_eq!(r.best.learning_rate, r.trials[0].learning_rate);
        let r = sweep(&space, 10, 5, |_, p| Ok(TrialOutcome { val_loss: bowl(p), best_epoch: 1 })).unwrap();
        for t in &r.trials {
            assert!((1e-5..=1e-2).contains(&t.learning_rate));
            assert!(BATCH_SIZES.contains(&t.batch_size));
        }
        assert!(r.trials[3..].iter().all(|t| t.proposal == "expected-improvement"));
        let bad = SearchSpace {
            lr_min: 1e-2,
            lr_max: 1e-5,
            ..Default::default()
        };
        assert!(matches!(sweep(&bad, 3, 0, |_, _| unreachable!()), Err(TrainError::InvalidBounds(_))));
    }

    #[test]
    fn sweep_beats_box_median_on_synthetic_objective() {
        // median of the objective over the box by dense grid
        let mut grid = Vec::new();
        for i in 0..=300 {
            let lr = 1e-5 * 1000f64.powf(i as f64 / 300.0);
            for b in BATCH_SIZES {
                grid.push(bowl(&TrialParams { learning_rate: lr, batch_size: b }));
            }
        }
        grid.sort_by(f64::total_cmp);
        let median = 0.5 * (grid[grid.len() / 2 - 1] + grid[grid.len() / 2]);
        for seed in 0..20 {
            for surrogate in [false, true] {
                let space = SearchSpace {
                    surrogate,
                    ..Default::default()
                };
                let r = sweep(&space, 10, seed, |_, p| Ok(TrialOutcome { val_loss: bowl(p), best_epoch: 1 })).unwrap();
                let best = r.trials[r.best_trial].best_val_loss;
                assert!(best < median, "seed {seed}: {best} vs median {median}");
            }
        }
    }

    #[test]
    fn gp_interpolates_observations() {
        let data = vec![([0.1, 0.0], 2.0), ([0.5, 1.0], 1.0), ([0.9, 0.0], 3.0)];
        let gp = Gp::fit(&data);
        for (x, y) in &data {
            let (mu, sd) = gp.predict(*x);
            assert!((mu - y).abs() < 1e-3, "{mu} vs {y}");
            assert!(sd < 1e-2);
        }
        assert!(gp.expected_improvement([0.5, 1.0], 1.0) < 1e-3);
        assert!(gp.expected_improvement([0.3, 1.0], 1.0) > 0.0);
    }
}
