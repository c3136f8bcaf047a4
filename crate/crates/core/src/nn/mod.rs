//! Multimodal dyadic transformer.
//!
//! Each participant's four spectral maps are projected to `d_model`, tagged
//! with a sinusoidal encoding over the 80 frequency bins, and passed through
//! one cross-modal block (queries from the modality, keys/values from the other
//! three modalities concatenated along the sequence) followed by one
//! self-attention block. The four streams are summed into a participant
//! encoding. A cross-subject block lets the target's encoding attend to the
//! partner's; the result is mean-pooled and regressed onto `K` labels.
//!
//! All blocks are pre-layer-norm residual blocks. Gradients come from the
//! reverse-mode [`tape`].

pub mod checkpoint;
pub mod tape;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::Modality;
use crate::spectral::{SpectralMap, BINS};
use tape::{Graph, Var};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in {0}")]
    NonFinite(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub dropout: f64,
    pub output_dim: usize,
    pub blocks_per_participant: usize,
    pub seed: u64,
    /// Clamp predictions into the Likert range at inference.
    pub clamp_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            ffn_mult: 4,
            dropout: 0.1,
            output_dim: 5,
            blocks_per_participant: Modality::ALL.len(),
            seed: 0,
            clamp_output: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(NnError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if ![5, 15, 60].contains(&self.output_dim) {
            return Err(NnError::Config(format!(
                "output_dim {} is not a hierarchy level size",
                self.output_dim
            )));
        }
        if self.blocks_per_participant != Modality::ALL.len() {
            return Err(NnError::Config(format!(
                "blocks_per_participant must equal the modality count ({})",
                Modality::ALL.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.ffn_mult == 0 {
            return Err(NnError::Config("ffn_mult must be positive".into()));
        }
        Ok(())
    }

    fn ffn_width(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Target,
    Partner,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Target => "target",
            Role::Partner => "partner",
        }
    }
}

pub const CROSS_SUBJECT: &str = "cross_subject";

/// Named weight tensors. Iteration order is the name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Array2<f64>>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

fn block_specs(prefix: &str, cross: bool, d: usize, f: usize, out: &mut Vec<(String, (usize, usize), Init)>) {
    let mut push = |name: &str, shape, init| out.push((format!("{prefix}.{name}"), shape, init));
    push("ln1.g", (1, d), Init::Ones);
    push("ln1.b", (1, d), Init::Zeros);
    if cross {
        push("ln_kv.g", (1, d), Init::Ones);
        push("ln_kv.b", (1, d), Init::Zeros);
    }
    for w in ["wq", "wk", "wv", "wo"] {
        push(w, (d, d), Init::Xavier);
    }
    push("bo", (1, d), Init::Zeros);
    push("ln2.g", (1, d), Init::Ones);
    push("ln2.b", (1, d), Init::Zeros);
    push("ff1.w", (d, f), Init::Xavier);
    push("ff1.b", (1, f), Init::Zeros);
    push("ff2.w", (f, d), Init::Xavier);
    push("ff2.b", (1, d), Init::Zeros);
}

/// Every parameter of the architecture in initialization order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let (d, f) = (cfg.d_model, cfg.ffn_width());
    let mut specs = Vec::new();
    for role in [Role::Target, Role::Partner] {
        for m in Modality::ALL {
            let p = format!("{}.{}", role.prefix(), m.name());
            specs.push((format!("{p}.proj.w"), (m.channels(), d), Init::Xavier));
            specs.push((format!("{p}.proj.b"), (1, d), Init::Zeros));
            block_specs(&format!("{p}.cross"), true, d, f, &mut specs);
            block_specs(&format!("{p}.self"), false, d, f, &mut specs);
        }
    }
    block_specs(CROSS_SUBJECT, true, d, f, &mut specs);
    specs.push(("head.w".into(), (d, cfg.output_dim), Init::Xavier));
    specs.push(("head.b".into(), (1, cfg.output_dim), Init::Zeros));
    specs
}

impl ParameterSet {
    /// Deterministic initialization from `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let tensors = param_specs(cfg)
            .into_iter()
            .map(|(name, (r, c), init)| {
                let t = match init {
                    Init::Zeros => Array2::zeros((r, c)),
                    Init::Ones => Array2::ones((r, c)),
                    Init::Xavier => {
                        let a = (6.0 / (r + c) as f64).sqrt();
                        Array2::from_shape_fn((r, c), |_| rng.random_range(-a..a))
                    }
                };
                (name, t)
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn from_tensors(tensors: BTreeMap<String, Array2<f64>>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Array2::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += k * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ParameterSet, k: f64) {
        for (name, t) in &mut self.tensors {
            t.scaled_add(k, &other.tensors[name]);
        }
    }

    pub fn same_shapes(&self, other: &ParameterSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, x), (b, y))| a == b && x.dim() == y.dim())
    }
}

/// Spectral maps of both participants, each `channels x 80`, in
/// [`Modality::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct DyadInput {
    pub target: [Array2<f64>; 4],
    pub partner: [Array2<f64>; 4],
}

fn check_maps(maps: &[Array2<f64>; 4]) -> Result<()> {
    for (m, map) in Modality::ALL.iter().zip(maps) {
        if map.dim() != (m.channels(), BINS) {
            return Err(NnError::ShapeMismatch(format!(
                "{m} map is {:?}, expected ({}, {BINS})",
                map.dim(),
                m.channels()
            )));
        }
    }
    Ok(())
}

impl DyadInput {
    pub fn new(target: [Array2<f64>; 4], partner: [Array2<f64>; 4]) -> Result<Self> {
        check_maps(&target)?;
        check_maps(&partner)?;
        Ok(Self { target, partner })
    }

    pub fn from_maps(target: &[SpectralMap], partner: &[SpectralMap]) -> Result<Self> {
        let pick = |maps: &[SpectralMap]| -> Result<[Array2<f64>; 4]> {
            let get = |m: Modality| {
                maps.iter()
                    .find(|s| s.modality == m)
                    .map(|s| s.data.clone())
                    .ok_or_else(|| NnError::ShapeMismatch(format!("missing {m} map")))
            };
            Ok([
                get(Modality::ActionUnits)?,
                get(Modality::Gaze)?,
                get(Modality::HeadPose)?,
                get(Modality::Audio)?,
            ])
        };
        Self::new(pick(target)?, pick(partner)?)
    }

    pub fn swapped(&self) -> Self {
        Self {
            target: self.partner.clone(),
            partner: self.target.clone(),
        }
    }
}

/// Sinusoidal encoding of the bin index, `BINS x d`.
pub fn positional_encoding(d: usize) -> Array2<f64> {
    Array2::from_shape_fn((BINS, d), |(pos, i)| {
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = pos as f64 / rate;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Builds one forward pass on a fresh [`Graph`].
pub(crate) struct Builder<'a> {
    pub g: Graph,
    pub vars: BTreeMap<String, Var>,
    cfg: &'a ModelConfig,
    dropout: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Builder<'a> {
    pub fn new(params: &ParameterSet, cfg: &'a ModelConfig, dropout: Option<&'a mut ChaCha8Rng>) -> Self {
        let mut g = Graph::new();
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone())))
            .collect();
        Self {
            g,
            vars,
            cfg,
            dropout: if cfg.dropout > 0.0 { dropout } else { None },
        }
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    fn drop(&mut self, x: Var) -> Var {
        let Some(rng) = self.dropout.as_deref_mut() else {
            return x;
        };
        let p = self.cfg.dropout;
        let keep = 1.0 / (1.0 - p);
        let dim = self.g.value(x).dim();
        let mask = Array2::from_shape_fn(dim, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        self.g.mask(x, mask)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.p(w)?, self.p(b)?);
        let y = self.g.matmul(x, w);
        Ok(self.g.add_row(y, b))
    }

    fn norm(&mut self, x: Var, prefix: &str, ln: &str) -> Result<Var> {
        let gain = self.p(&format!("{prefix}.{ln}.g"))?;
        let bias = self.p(&format!("{prefix}.{ln}.b"))?;
        Ok(self.g.layer_norm(x, gain, bias))
    }

    fn multi_head(&mut self, prefix: &str, q_in: Var, kv_in: Var) -> Result<Var> {
        let q = self.g.matmul(q_in, self.p(&format!("{prefix}.wq"))?);
        let k = self.g.matmul(kv_in, self.p(&format!("{prefix}.wk"))?);
        let v = self.g.matmul(kv_in, self.p(&format!("{prefix}.wv"))?);
        let heads = self.cfg.heads;
        let dh = self.cfg.d_model / heads;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.g.slice_cols(q, h * dh, dh),
                    self.g.slice_cols(k, h * dh, dh),
                    self.g.slice_cols(v, h * dh, dh),
                )
            };
            outs.push(attention(&mut self.g, qh, kh, vh));
        }
        let merged = if heads == 1 { outs[0] } else { self.g.concat_cols(&outs) };
        self.linear(merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    /// `h = x + MHA(LN(x), LN(kv))`, `out = h + FFN(LN(h))`; self-attention when `kv` is `None`.
    pub fn block(&mut self, prefix: &str, x: Var, kv: Option<Var>) -> Result<Var> {
        let xn = self.norm(x, prefix, "ln1")?;
        let kvn = match kv {
            Some(kv) => self.norm(kv, prefix, "ln_kv")?,
            None => xn,
        };
        let att = self.multi_head(prefix, xn, kvn)?;
        let att = self.drop(att);
        let h = self.g.add(x, att);
        let hn = self.norm(h, prefix, "ln2")?;
        let f1 = self.linear(hn, &format!("{prefix}.ff1.w"), &format!("{prefix}.ff1.b"))?;
        let f1 = self.g.gelu(f1);
        let f2 = self.linear(f1, &format!("{prefix}.ff2.w"), &format!("{prefix}.ff2.b"))?;
        let f2 = self.drop(f2);
        Ok(self.g.add(h, f2))
    }

    /// Projected and position-tagged input stream of one modality, `BINS x d`.
    pub fn embed(&mut self, role: Role, m: Modality, map: &Array2<f64>) -> Result<Var> {
        let x = self.g.leaf(map.t().to_owned());
        let p = format!("{}.{}", role.prefix(), m.name());
        let y = self.linear(x, &format!("{p}.proj.w"), &format!("{p}.proj.b"))?;
        Ok(self.g.add_const(y, &positional_encoding(self.cfg.d_model)))
    }

    pub fn encode(&mut self, role: Role, maps: &[Array2<f64>; 4]) -> Result<Var> {
        let streams = Modality::ALL
            .iter()
            .zip(maps)
            .map(|(&m, map)| self.embed(role, m, map))
            .collect::<Result<Vec<_>>>()?;
        let mut sum: Option<Var> = None;
        for (i, m) in Modality::ALL.iter().enumerate() {
            let others: Vec<Var> = (0..streams.len()).filter(|&j| j != i).map(|j| streams[j]).collect();
            let kv = self.g.concat_rows(&others);
            let p = format!("{}.{}", role.prefix(), m.name());
            let x = self.block(&format!("{p}.cross"), streams[i], Some(kv))?;
            let x = self.block(&format!("{p}.self"), x, None)?;
            sum = Some(match sum {
                Some(s) => self.g.add(s, x),
                None => x,
            });
        }
        Ok(sum.expect("four modalities"))
    }

    pub fn forward(&mut self, dyad: &DyadInput) -> Result<Var> {
        let t = self.encode(Role::Target, &dyad.target)?;
        let p = self.encode(Role::Partner, &dyad.partner)?;
        let c = self.block(CROSS_SUBJECT, t, Some(p))?;
        let pooled = self.g.mean_rows(c);
        let out = self.linear(pooled, "head.w", "head.b")?;
        if self.g.value(out).iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("model output".into()));
        }
        Ok(out)
    }

    pub fn param_grads(&self, grads: &mut tape::Gradients) -> ParameterSet {
        let tensors = self
            .vars
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Array2::zeros(self.g.value(v).dim()));
                (name.clone(), g)
            })
            .collect();
        ParameterSet { tensors }
    }
}

/// `softmax(q k^T / sqrt(d)) v` on the graph.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Var {
    let d = g.value(q).ncols() as f64;
    let s = g.matmul_t(q, k);
    let s = g.scale(s, 1.0 / d.sqrt());
    let a = g.softmax_rows(s);
    g.matmul(a, v)
}

pub fn scaled_dot_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<Array2<f64>> {
    if q.ncols() == 0 || q.ncols() != k.ncols() || k.nrows() != v.nrows() || k.nrows() == 0 {
        return Err(NnError::ShapeMismatch(format!(
            "q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
    let out = attention(&mut g, qv, kv, vv);
    Ok(g.value(out).clone())
}

fn check_stream(x: &Array2<f64>, d: usize, what: &str) -> Result<()> {
    if x.dim() != (BINS, d) {
        return Err(NnError::ShapeMismatch(format!("{what} is {:?}, expected ({BINS}, {d})", x.dim())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Self-attention residual block `prefix` applied to a `BINS x d_model` stream.
pub fn self_attention_block(x: &Array2<f64>, params: &ParameterSet, prefix: &str, cfg: &ModelConfig) -> Result<Array2<f64>> {
    check_stream(x, cfg.d_model, "block input")?;
    let mut b = Builder::new(params, cfg, None);
    let xv = b.g.leaf(x.clone());
    let out = b.block(prefix, xv, None)?;
    Ok(b.g.value(out).clone())
}

/// Cross-modal block: queries from `target`, keys/values from the row-wise
/// concatenation of `others`.
pub fn cross_modal_block(
    target: &Array2<f64>,
    others: &[Array2<f64>],
    params: &ParameterSet,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Array2<f64>> {
    check_stream(target, cfg.d_model, "cross-modal target")?;
    for o in others {
        check_stream(o, cfg.d_model, "cross-modal source")?;
    }
    let mut b = Builder::new(params, cfg, None);
    let t = b.g.leaf(target.clone());
    let parts: Vec<Var> = others.iter().map(|o| b.g.leaf(o.clone())).collect();
    let kv = b.g.concat_rows(&parts);
    let out = b.block(prefix, t, Some(kv))?;
    Ok(b.g.value(out).clone())
}

/// Gradients of `<seed, block(x, sources)>` for one residual block.
#[derive(Debug, Clone)]
pub struct BlockGradients {
    pub input: Array2<f64>,
    pub sources: Vec<Array2<f64>>,
    /// Only the block's own tensors.
    pub params: ParameterSet,
}

/// Vector-Jacobian product of block `prefix`: self-attention when `sources`
/// is empty, cross-modal otherwise.
pub fn block_vjp(
    x: &Array2<f64>,
    sources: &[Array2<f64>],
    params: &ParameterSet,
    prefix: &str,
    cfg: &ModelConfig,
    seed: &Array2<f64>,
) -> Result<BlockGradients> {
    check_stream(x, cfg.d_model, "block input")?;
    check_stream(seed, cfg.d_model, "block seed")?;
    for o in sources {
        check_stream(o, cfg.d_model, "cross-modal source")?;
    }
    let mut b = Builder::new(params, cfg, None);
    let xv = b.g.leaf(x.clone());
    let parts: Vec<Var> = sources.iter().map(|o| b.g.leaf(o.clone())).collect();
    let kv = if parts.is_empty() { None } else { Some(b.g.concat_rows(&parts)) };
    let out = b.block(prefix, xv, kv)?;
    let mut grads = b.g.backward(out, seed.clone());
    let zero = |v: Var, g: &mut tape::Gradients| g.take(v).unwrap_or_else(|| Array2::zeros(b.g.value(v).dim()));
    let input = zero(xv, &mut grads);
    let sources = parts.iter().map(|&v| zero(v, &mut grads)).collect();
    let all = b.param_grads(&mut grads);
    let own = all
        .iter()
        .filter(|(n, _)| n.starts_with(&format!("{prefix}.")))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    Ok(BlockGradients {
        input,
        sources,
        params: ParameterSet::from_tensors(own),
    })
}

pub fn encode_participant(maps: &[Array2<f64>; 4], params: &ParameterSet, cfg: &ModelConfig, role: Role) -> Result<Array2<f64>> {
    check_maps(maps)?;
    let mut b = Builder::new(params, cfg, None);
    let out = b.encode(role, maps)?;
    Ok(b.g.value(out).clone())
}

/// Eval-mode prediction of `K` scores.
pub fn forward(dyad: &DyadInput, params: &ParameterSet, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let mut b = Builder::new(params, cfg, None);
    let out = b.forward(dyad)?;
    Ok(b.g.value(out).iter().copied().collect())
}

/// A configured network and its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

/// Loss, prediction and parameter gradients of one training example.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub loss: f64,
    pub prediction: Vec<f64>,
    pub grads: ParameterSet,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ParameterSet::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn predict(&self, dyad: &DyadInput) -> Result<Vec<f64>> {
        let mut out = forward(dyad, &self.params, &self.config)?;
        if self.config.clamp_output {
            out.iter_mut().for_each(|v| *v = v.clamp(1.0, 5.0));
        }
        Ok(out)
    }

    /// MSE against `target` and its gradient. Dropout is active when `rng` is given.
    pub fn backprop(&self, dyad: &DyadInput, target: &[f64], rng: Option<&mut ChaCha8Rng>) -> Result<Backprop> {
        if target.len() != self.config.output_dim {
            return Err(NnError::ShapeMismatch(format!(
                "target has {} values, model predicts {}",
                target.len(),
                self.config.output_dim
            )));
        }
        let mut b = Builder::new(&self.params, &self.config, rng);
        let out = b.forward(dyad)?;
        let prediction: Vec<f64> = b.g.value(out).iter().copied().collect();
        let k = target.len() as f64;
        let loss = prediction.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / k;
        let seed = Array2::from_shape_fn((1, target.len()), |(_, j)| 2.0 * (prediction[j] - target[j]) / k);
        let mut grads = b.g.backward(out, seed);
        let grads = b.param_grads(&mut grads);
        Ok(Backprop {
            loss,
            prediction,
            grads,
        })
    }
}
