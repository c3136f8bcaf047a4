use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nuance_core::eval::{self, FoldPlan, MetricTable};
use nuance_core::nn::checkpoint;
use nuance_core::synth::{self, SynthSpec};
use nuance_core::train::{self, SEARCH_NOTE};
use nuance_core::{ingest, pipeline, Level, Order, PersonalityVector, ScoringKey, Strategy, Task};
use serde::{Deserialize, Serialize};

use crate::config::{self, FileConfig};
use crate::{EvaluateArgs, FeaturesArgs, LevelArg, OrderArg, ReportArgs, ScoreArgs, SplitArgs, StrategyArg, SynthArgs, TaskArg, TrainArgs};

impl From<LevelArg> for Level {
    fn from(l: LevelArg) -> Self {
        match l {
            LevelArg::Trait => Level::Trait,
            LevelArg::Facet => Level::Facet,
            LevelArg::Nuance => Level::Nuance,
        }
    }
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Talk => Task::Talk,
            TaskArg::Ghost => Task::Ghost,
            TaskArg::Lego => Task::Lego,
            TaskArg::Animals => Task::Animals,
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_key(path: Option<&Path>) -> Result<ScoringKey> {
    match path {
        Some(p) => ScoringKey::from_json_str(&read(p)?, None).with_context(|| format!("key {}", p.display())),
        None => Ok(ScoringKey::bfi2()),
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str::<SynthSpec>(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let key = load_key(a.key.as_deref())?;
    let ds = synth::write_dataset(&spec, &key, &a.out, a.jobs)?;
    println!(
        "{} participants, {} sessions -> {}",
        ds.participants.len(),
        ds.sessions,
        ds.manifest_path.display()
    );
    Ok(())
}

pub fn features(a: FeaturesArgs) -> Result<()> {
    let manifest = ingest::load_manifest(&a.manifest)?;
    let n = pipeline::write_features(&manifest, &a.out, a.jobs)?;
    println!("{n} sessions -> {}", a.out.display());
    Ok(())
}

pub fn split(a: SplitArgs) -> Result<()> {
    let manifest = ingest::load_manifest(&a.manifest)?;
    let key = load_key(a.key.as_deref())?;
    let roster = pipeline::roster(&manifest, &key, None)?;
    let plan = eval::make_folds(&roster, a.folds, a.seed)?;
    write(&a.out, &plan.to_json())?;
    let dropped: usize = plan.folds.iter().map(|f| f.dropped.len()).sum();
    println!(
        "{} folds over {} participants (objective {:.4}, {dropped} session drops) -> {}",
        plan.n_folds,
        roster.participants.len(),
        plan.objective,
        a.out.display()
    );
    Ok(())
}

/// What `evaluate` needs to score a run without the model.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub manifest: PathBuf,
    pub key: Option<PathBuf>,
    pub split: PathBuf,
    pub fold: usize,
    pub task: Task,
    pub level: Level,
    pub train_participants: Vec<String>,
    pub test_participants: Vec<String>,
}

pub const RUN_INFO: &str = "run.json";
pub const REPORT: &str = "report.json";
pub const PREDICTIONS: &str = "predictions.json";
pub const TRIALS: &str = "trials.csv";
pub const CHECKPOINT: &str = "model.ckpt";

fn load_plan(path: &Path) -> Result<FoldPlan> {
    FoldPlan::from_json(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn ids(samples: &[train::Sample]) -> Vec<String> {
    let set: BTreeSet<&str> = samples.iter().map(|s| s.participant_id.as_str()).collect();
    set.into_iter().map(str::to_string).collect()
}

fn trials_csv(report: &train::TrainReport) -> String {
    let mut out = format!("# {}\n", report.search_note.as_deref().unwrap_or(SEARCH_NOTE));
    out.push_str("trial,learning_rate,batch_size,proposal,best_val_loss,best_epoch\n");
    for t in &report.trials {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.trial, t.learning_rate, t.batch_size, t.proposal, t.best_val_loss, t.best_epoch
        ));
    }
    out
}

pub fn train(a: TrainArgs) -> Result<()> {
    let level: Level = a.level.into();
    let task: Task = a.task.into();
    let manifest = ingest::load_manifest(&a.manifest)?;
    let key = load_key(a.key.as_deref())?;
    let plan = load_plan(&a.split)?;
    let fold = plan
        .folds
        .get(a.fold)
        .ok_or_else(|| anyhow!("fold {} out of range, plan has {}", a.fold, plan.folds.len()))?;
    let file = match &a.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut cfg = config::resolve(&a, &file, key.len(level));
    cfg.train.level = level;
    cfg.train.task = Some(task);

    let maps = match &a.features {
        Some(dir) => pipeline::read_features(dir, Some(task))?,
        None => pipeline::compute_features(&manifest, Some(task), a.jobs)?,
    };
    let nuances = pipeline::participant_nuances(&manifest, &key)?;
    let truths = pipeline::truths_at(&nuances, &key, level)?;
    let data = pipeline::fold_samples(&maps, fold, Some(task), &truths)?;
    if data.test.is_empty() {
        bail!("fold {} has no {task} test sessions", a.fold);
    }
    let (model, mut report) = match &cfg.sweep {
        Some(space) => train::sweep_train(&data.train, &data.val, space, &cfg.train, &cfg.model, a.jobs)?,
        None => train::train_model(&data.train, &data.val, &cfg.train, &cfg.model)?,
    };
    report.checkpoint = Some(PathBuf::from(CHECKPOINT));

    let info = RunInfo {
        manifest: absolute(&a.manifest)?,
        key: a.key.as_deref().map(absolute).transpose()?,
        split: absolute(&a.split)?,
        fold: a.fold,
        task,
        level,
        train_participants: ids(&data.train),
        test_participants: ids(&data.test),
    };
    let preds = pipeline::predict_samples(&model, &data.test, level)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    checkpoint::save_model(&model, serde_json::to_value(&info)?, &a.out.join(CHECKPOINT))?;
    write(&a.out.join(RUN_INFO), &serde_json::to_string_pretty(&info)?)?;
    write(&a.out.join(REPORT), &report.to_json())?;
    write(&a.out.join(PREDICTIONS), &serde_json::to_string_pretty(&preds)?)?;
    if !report.trials.is_empty() {
        write(&a.out.join(TRIALS), &trials_csv(&report))?;
    }
    println!(
        "{} {} fold {}: best epoch {} val mse {:.5} -> {}",
        task,
        level.name(),
        a.fold,
        report.best_epoch,
        report.best_val_loss,
        a.out.display()
    );
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let info: RunInfo = serde_json::from_str(&read(&a.run.join(RUN_INFO))?).context("parsing run info")?;
    let preds: Vec<PersonalityVector> =
        serde_json::from_str(&read(&a.run.join(PREDICTIONS))?).context("parsing predictions")?;
    let manifest = ingest::load_manifest(&info.manifest)?;
    let key = load_key(info.key.as_deref())?;
    let plan = load_plan(&info.split)?;
    let fold = plan
        .folds
        .get(info.fold)
        .ok_or_else(|| anyhow!("fold {} missing from {}", info.fold, info.split.display()))?;
    let order = match a.order {
        OrderArg::ConvertFirst => Order::ConvertThenCollapse,
        OrderArg::CollapseFirst => Order::CollapseThenConvert,
    };
    let strategy = match a.strategy {
        StrategyArg::Mean => Strategy::Mean,
        StrategyArg::Median => Strategy::Median,
    };
    let nuances = pipeline::participant_nuances(&manifest, &key)?;
    let train_ids: BTreeSet<String> = info.train_participants.iter().cloned().collect();
    let ev = pipeline::evaluate_fold(&preds, fold, &train_ids, &nuances, &key, info.level, order, strategy)?;
    let mut table = ev.model;
    table.name = Some(format!("{} {}", info.task, info.level.name()));
    write(&a.out, &table.to_json())?;
    if let Some(path) = &a.baseline_out {
        let mut base = ev.baseline;
        base.name = Some("baseline".into());
        write(path, &base.to_json())?;
    }
    println!(
        "{} trait mse {:.5} over {} participants -> {}",
        table.name.as_deref().unwrap_or_default(),
        table.mean.mse,
        table.subjects,
        a.out.display()
    );
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let tables = a
        .tables
        .iter()
        .map(|p| MetricTable::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let md = eval::improvement_markdown(&tables[0], &tables[1..])?;
    write(&a.out, &md)?;
    print!("{md}");
    Ok(())
}

pub fn score(a: ScoreArgs) -> Result<()> {
    let level: Level = a.level.into();
    let key = load_key(a.key.as_deref())?;
    let labels = ingest::read_labels_csv(&a.labels)?;
    let nuances = pipeline::label_nuances(&labels, &key)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["participant_id".to_string()];
    header.extend(key.labels(level));
    w.write_record(&header)?;
    for (id, v) in &nuances {
        let scores = key.nuances_to_level(v, level)?;
        let mut row = vec![id.clone()];
        row.extend(scores.scores.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("csv buffer: {e}"))?;
    write(&a.out, std::str::from_utf8(&bytes)?)?;
    println!("{} participants -> {}", nuances.len(), a.out.display());
    Ok(())
}
