//! Training settings resolved as flag > config file > default.

use std::path::Path;

use anyhow::{Context, Result};
use nuance_core::nn::ModelConfig;
use nuance_core::train::{SearchSpace, TrainConfig, TrialParams};
use serde::Deserialize;

use crate::TrainArgs;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub weight_decay: Option<f64>,
    pub sweep: Option<usize>,
    pub surrogate: Option<bool>,
    pub seed: Option<u64>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_mult: Option<usize>,
    pub dropout: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// `None` trains once with the configured learning rate and batch size.
    pub sweep: Option<SearchSpace>,
}

pub fn resolve(args: &TrainArgs, file: &FileConfig, output_dim: usize) -> Resolved {
    let t = TrainConfig::default();
    let m = ModelConfig::default();
    let seed = args.seed.or(file.seed).unwrap_or(t.seed);
    let sweep_count = args.sweep.or(file.sweep);
    let train = TrainConfig {
        learning_rate: args.lr.or(file.learning_rate).unwrap_or(t.learning_rate),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(t.batch_size),
        max_epochs: args.max_epochs.or(file.max_epochs).unwrap_or(t.max_epochs),
        patience: args.patience.or(file.patience).unwrap_or(t.patience),
        weight_decay: args.weight_decay.or(file.weight_decay).unwrap_or(t.weight_decay),
        sweep_count: sweep_count.unwrap_or(1),
        seed,
        ..t
    };
    let model = ModelConfig {
        d_model: args.d_model.or(file.d_model).unwrap_or(m.d_model),
        heads: args.heads.or(file.heads).unwrap_or(m.heads),
        ffn_mult: args.ffn_mult.or(file.ffn_mult).unwrap_or(m.ffn_mult),
        dropout: args.dropout.or(file.dropout).unwrap_or(m.dropout),
        output_dim,
        seed,
        ..m
    };
    let surrogate = if args.no_surrogate { false } else { file.surrogate.unwrap_or(true) };
    // an explicit learning rate becomes the sweep's first trial
    let initial = match args.lr.or(file.learning_rate) {
        Some(lr) => vec![TrialParams {
            learning_rate: lr,
            batch_size: train.batch_size,
        }],
        None => Vec::new(),
    };
    let sweep = sweep_count.map(|_| SearchSpace {
        surrogate,
        initial,
        ..SearchSpace::default()
    });
    Resolved { train, model, sweep }
}
