//! Metrics, subject-independent folds, the mean baseline and improvement reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bfi2::{to_trait_level, Level, Order, PersonalityVector, ScoringError, ScoringKey, Strategy};
use crate::ingest::Task;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("level mismatch: {0} vs {1}")]
    LevelMismatch(Level, Level),
    #[error("subject mismatch at position {0}: {1} vs {2}")]
    SubjectMismatch(usize, String, String),
    #[error("need at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("need at least {needed} participants for {needed} folds, got {got}")]
    TooFewParticipants { needed: usize, got: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("no predictions for participant {0}")]
    MissingParticipant(String),
    #[error("reference value for {0} is not positive")]
    NonPositiveReference(String),
    #[error("tables have different labels")]
    LabelMismatch,
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Metrics of one label (or the label average).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub mse: f64,
    #[serde(default)]
    pub mae: Option<f64>,
    #[serde(default)]
    pub pcc: Option<f64>,
    #[serde(default)]
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    /// Free-form row title, e.g. `lego/nuance`.
    #[serde(default)]
    pub name: Option<String>,
    pub level: Level,
    #[serde(default)]
    pub subjects: usize,
    pub labels: Vec<MetricRow>,
    pub mean: MetricRow,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricTable {
    /// Builds a table from per-label rows and fills the `Mean` row.
    pub fn from_rows(name: Option<String>, level: Level, subjects: usize, labels: Vec<MetricRow>) -> Self {
        let n = labels.len() as f64;
        let mean = MetricRow {
            label: "Mean".into(),
            mse: labels.iter().map(|r| r.mse).sum::<f64>() / n,
            mae: mean_opt(labels.iter().map(|r| r.mae)),
            pcc: mean_opt(labels.iter().map(|r| r.pcc)),
            r2: mean_opt(labels.iter().map(|r| r.r2)),
        };
        Self {
            name,
            level,
            subjects,
            labels,
            mean,
        }
    }

    pub fn row(&self, label: &str) -> Option<&MetricRow> {
        if label == "Mean" {
            return Some(&self.mean);
        }
        self.labels.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("label,mse,mae,pcc,r2\n");
        for r in self.labels.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(out, "{},{},{},{},{}", r.label, r.mse, f(r.mae), f(r.pcc), f(r.r2));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn check_aligned(preds: &[PersonalityVector], truths: &[PersonalityVector]) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch(preds.len(), truths.len()));
    }
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        if p.level != t.level {
            return Err(EvalError::LevelMismatch(p.level, t.level));
        }
        if p.len() != t.len() {
            return Err(EvalError::LengthMismatch(p.len(), t.len()));
        }
        if p.subject != t.subject {
            return Err(EvalError::SubjectMismatch(i, p.subject.clone(), t.subject.clone()));
        }
    }
    Ok(())
}

/// Sample Pearson correlation; `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `1 - SS_res / SS_tot` with `SS_tot` around the truth mean; `None` for constant truth.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Option<f64> {
    let m = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - m) * (t - m)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Some(1.0 - ss_res / ss_tot)
}

/// Per-label MSE, MAE, PCC and R² across subjects, plus the label average.
pub fn metrics(preds: &[PersonalityVector], truths: &[PersonalityVector], labels: &[String]) -> Result<MetricTable> {
    check_aligned(preds, truths)?;
    if preds.len() < 2 {
        return Err(EvalError::TooFewSubjects(preds.len()));
    }
    let k = preds[0].len();
    if labels.len() != k {
        return Err(EvalError::LengthMismatch(labels.len(), k));
    }
    let n = preds.len() as f64;
    let rows = (0..k)
        .map(|j| {
            let p: Vec<f64> = preds.iter().map(|v| v.scores[j]).collect();
            let t: Vec<f64> = truths.iter().map(|v| v.scores[j]).collect();
            MetricRow {
                label: labels[j].clone(),
                mse: p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n,
                mae: Some(p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / n),
                pcc: pearson(&p, &t),
                r2: r_squared(&p, &t),
            }
        })
        .collect();
    Ok(MetricTable::from_rows(None, preds[0].level, preds.len(), rows))
}

/// Constant prediction: per-label mean of the training truths.
pub fn baseline_predict(train_truths: &[PersonalityVector]) -> Result<PersonalityVector> {
    let first = train_truths.first().ok_or(EvalError::EmptySplit("train"))?;
    let mut sum = vec![0.0; first.len()];
    for t in train_truths {
        if t.level != first.level {
            return Err(EvalError::LevelMismatch(first.level, t.level));
        }
        if t.len() != sum.len() {
            return Err(EvalError::LengthMismatch(sum.len(), t.len()));
        }
        sum.iter_mut().zip(&t.scores).for_each(|(s, v)| *s += v);
    }
    let n = train_truths.len() as f64;
    Ok(PersonalityVector::new(first.level, sum.iter().map(|s| s / n).collect(), "baseline"))
}

/// The baseline vector copied once per test subject.
pub fn baseline_for(baseline: &PersonalityVector, subjects: &[PersonalityVector]) -> Vec<PersonalityVector> {
    subjects
        .iter()
        .map(|s| PersonalityVector::new(baseline.level, baseline.scores.clone(), s.subject.clone()))
        .collect()
}

/// Aggregates per-session predictions at any level to one trait profile per
/// participant and scores them against trait truths derived from nuances.
/// `truths` maps participant id to the nuance-level ground truth.
pub fn evaluate_cross_level(
    preds: &[PersonalityVector],
    truths: &BTreeMap<String, PersonalityVector>,
    key: &ScoringKey,
    order: Order,
    strategy: Strategy,
) -> Result<MetricTable> {
    let mut by_subject: BTreeMap<&str, Vec<PersonalityVector>> = BTreeMap::new();
    for p in preds {
        by_subject.entry(p.subject.as_str()).or_default().push(p.clone());
    }
    let mut agg = Vec::with_capacity(truths.len());
    let mut tr = Vec::with_capacity(truths.len());
    for (id, truth) in truths {
        let ps = by_subject
            .get(id.as_str())
            .ok_or_else(|| EvalError::MissingParticipant(id.clone()))?;
        agg.push(to_trait_level(ps, key, order, strategy)?);
        let mut t = key.to_traits(truth)?;
        t.subject = id.clone();
        tr.push(t);
    }
    metrics(&agg, &tr, &key.labels(Level::Trait))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Option<MeanSd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanSd { mean, sd })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub mse: MeanSd,
    pub mae: Option<MeanSd>,
    pub pcc: Option<MeanSd>,
    pub r2: Option<MeanSd>,
}

/// Per-fold tables with mean ± sd across the folds present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub level: Level,
    pub folds: Vec<MetricTable>,
    pub labels: Vec<SummaryRow>,
    pub mean: SummaryRow,
}

impl FoldSummary {
    /// Mean-of-folds view as a plain table, e.g. for [`improvement_report`].
    pub fn mean_table(&self, name: Option<String>) -> MetricTable {
        let row = |r: &SummaryRow| MetricRow {
            label: r.label.clone(),
            mse: r.mse.mean,
            mae: r.mae.map(|m| m.mean),
            pcc: r.pcc.map(|m| m.mean),
            r2: r.r2.map(|m| m.mean),
        };
        MetricTable {
            name,
            level: self.level,
            subjects: self.folds.iter().map(|f| f.subjects).sum(),
            labels: self.labels.iter().map(row).collect(),
            mean: row(&self.mean),
        }
    }
}

pub fn summarize_folds(folds: &[MetricTable]) -> Result<FoldSummary> {
    let first = folds.first().ok_or(EvalError::EmptySplit("fold"))?;
    for f in folds {
        if f.level != first.level {
            return Err(EvalError::LevelMismatch(first.level, f.level));
        }
        if f.labels.len() != first.labels.len() || f.labels.iter().zip(&first.labels).any(|(a, b)| a.label != b.label) {
            return Err(EvalError::LabelMismatch);
        }
    }
    let summarize = |pick: &dyn Fn(&MetricTable) -> &MetricRow| {
        let rows: Vec<&MetricRow> = folds.iter().map(pick).collect();
        let col = |g: &dyn Fn(&MetricRow) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter_map(|r| g(r)).collect();
            MeanSd::of(&v)
        };
        SummaryRow {
            label: rows[0].label.clone(),
            mse: col(&|r| Some(r.mse)).expect("non-empty"),
            mae: col(&|r| r.mae),
            pcc: col(&|r| r.pcc),
            r2: col(&|r| r.r2),
        }
    };
    let labels = (0..first.labels.len())
        .map(|j| summarize(&|t: &MetricTable| &t.labels[j]))
        .collect();
    Ok(FoldSummary {
        level: first.level,
        folds: folds.to_vec(),
        labels,
        mean: summarize(&|t: &MetricTable| &t.mean),
    })
}

// ---------------------------------------------------------------- improvement

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementCell {
    pub label: String,
    pub reference: f64,
    pub value: f64,
    /// `100 * (1 - value / reference)`.
    pub decrease_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub reference: Option<String>,
    pub compared: Option<String>,
    pub cells: Vec<ImprovementCell>,
    pub mean: ImprovementCell,
    /// Largest decrease over the per-label and mean cells.
    pub max: ImprovementCell,
}

/// Percent MSE decrease of `b` relative to `a`, per label and for the mean.
pub fn improvement_report(a: &MetricTable, b: &MetricTable) -> Result<ImprovementReport> {
    if a.labels.len() != b.labels.len() || a.labels.iter().zip(&b.labels).any(|(x, y)| x.label != y.label) {
        return Err(EvalError::LabelMismatch);
    }
    let cell = |x: &MetricRow, y: &MetricRow| -> Result<ImprovementCell> {
        if !(x.mse > 0.0) {
            return Err(EvalError::NonPositiveReference(x.label.clone()));
        }
        Ok(ImprovementCell {
            label: x.label.clone(),
            reference: x.mse,
            value: y.mse,
            decrease_pct: 100.0 * (1.0 - y.mse / x.mse),
        })
    };
    let cells = a
        .labels
        .iter()
        .zip(&b.labels)
        .map(|(x, y)| cell(x, y))
        .collect::<Result<Vec<_>>>()?;
    let mean = cell(&a.mean, &b.mean)?;
    let max = cells
        .iter()
        .chain(std::iter::once(&mean))
        .max_by(|p, q| p.decrease_pct.total_cmp(&q.decrease_pct))
        .expect("mean cell")
        .clone();
    Ok(ImprovementReport {
        reference: a.name.clone(),
        compared: b.name.clone(),
        cells,
        mean,
        max,
    })
}

/// Markdown with one MSE row per table and one decrease row per compared table.
pub fn improvement_markdown(reference: &MetricTable, compared: &[MetricTable]) -> Result<String> {
    let reports = compared
        .iter()
        .map(|b| improvement_report(reference, b))
        .collect::<Result<Vec<_>>>()?;
    let mut out = String::from("| Model |");
    for r in &reference.labels {
        let _ = write!(out, " {} |", r.label);
    }
    out.push_str(" Mean |\n|---|");
    for _ in 0..=reference.labels.len() {
        out.push_str("---|");
    }
    out.push('\n');
    let title = |t: &MetricTable, i: usize| t.name.clone().unwrap_or_else(|| format!("table {i}"));
    let mse_row = |out: &mut String, t: &MetricTable, name: String| {
        let _ = write!(out, "| {name} |");
        for r in t.labels.iter().chain(std::iter::once(&t.mean)) {
            let _ = write!(out, " {:.4} |", r.mse);
        }
        out.push('\n');
    };
    mse_row(&mut out, reference, title(reference, 0));
    for (i, (t, rep)) in compared.iter().zip(&reports).enumerate() {
        mse_row(&mut out, t, title(t, i + 1));
        let _ = write!(out, "| decrease |");
        for c in rep.cells.iter().chain(std::iter::once(&rep.mean)) {
            let _ = write!(out, " {:.2}% |", c.decrease_pct);
        }
        out.push('\n');
    }
    if let Some((i, best)) = reports
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.mean.decrease_pct.total_cmp(&b.1.mean.decrease_pct))
    {
        let _ = writeln!(
            out,
            "\nMax mean MSE decrease: {:.2}% ({})",
            best.mean.decrease_pct,
            title(&compared[i], i + 1)
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------- folds

/// Per-participant attributes used for balancing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub id: String,
    pub age: f64,
    pub gender: String,
    pub traits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionRef {
    pub session_id: String,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLink {
    pub session: SessionRef,
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Roster {
    pub participants: Vec<RosterEntry>,
    pub sessions: Vec<SessionLink>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub train_sessions: Vec<SessionRef>,
    pub val_sessions: Vec<SessionRef>,
    pub test_sessions: Vec<SessionRef>,
    /// Sessions whose participants fall in different splits.
    pub dropped: Vec<SessionRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub groups: Vec<Vec<String>>,
    pub objective: f64,
    pub folds: Vec<FoldSplit>,
}

impl FoldPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

struct Balance {
    trait_mean: Vec<f64>,
    age_mean: f64,
    age_sd: f64,
    gender_share: BTreeMap<String, f64>,
}

impl Balance {
    fn new(p: &[RosterEntry]) -> Self {
        let n = p.len() as f64;
        let k = p.first().map_or(0, |e| e.traits.len());
        let mut trait_mean = vec![0.0; k];
        for e in p {
            trait_mean.iter_mut().zip(&e.traits).for_each(|(m, t)| *m += t / n);
        }
        let age_mean = p.iter().map(|e| e.age).sum::<f64>() / n;
        let var = p.iter().map(|e| (e.age - age_mean).powi(2)).sum::<f64>() / n;
        let mut gender_share = BTreeMap::new();
        for e in p {
            *gender_share.entry(e.gender.clone()).or_insert(0.0) += 1.0 / n;
        }
        Self {
            trait_mean,
            age_mean,
            age_sd: if var > 0.0 { var.sqrt() } else { 1.0 },
            gender_share,
        }
    }

    /// Squared deviation of one group's trait means, standardized age mean and
    /// gender shares from the roster-wide values. Empty groups score 0.
    fn group_cost(&self, p: &[RosterEntry], members: &[usize]) -> f64 {
        if members.is_empty() {
            return 0.0;
        }
        let n = members.len() as f64;
        let mut cost = 0.0;
        for (j, mu) in self.trait_mean.iter().enumerate() {
            let m = members.iter().map(|&i| p[i].traits[j]).sum::<f64>() / n;
            cost += (m - mu).powi(2);
        }
        let age = members.iter().map(|&i| p[i].age).sum::<f64>() / n;
        cost += ((age - self.age_mean) / self.age_sd).powi(2);
        for (g, share) in &self.gender_share {
            let s = members.iter().filter(|&&i| &p[i].gender == g).count() as f64 / n;
            cost += (s - share).powi(2);
        }
        cost
    }
}

/// Balance objective of a partition given as participant-id groups.
pub fn balance_objective(roster: &Roster, groups: &[Vec<String>]) -> f64 {
    let index: BTreeMap<&str, usize> = roster
        .participants
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.as_str(), i))
        .collect();
    let bal = Balance::new(&roster.participants);
    groups
        .iter()
        .map(|g| {
            let members: Vec<usize> = g.iter().filter_map(|id| index.get(id.as_str()).copied()).collect();
            bal.group_cost(&roster.participants, &members)
        })
        .sum()
}

/// Participants shuffled and cut into `n_groups` near-equal groups.
pub fn random_partition(roster: &Roster, n_groups: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let mut ids: Vec<String> = roster.participants.iter().map(|e| e.id.clone()).collect();
    ids.shuffle(rng);
    let mut groups = vec![Vec::new(); n_groups];
    for (i, id) in ids.into_iter().enumerate() {
        groups[i % n_groups].push(id);
    }
    groups
}

/// Group-size bounds: 8% to 12% of participants, widened to the equal split
/// when that band holds no integer.
pub fn group_size_bounds(n: usize, n_folds: usize) -> (usize, usize) {
    let lo = ((0.08 * n as f64).ceil() as usize).min(n / n_folds).max(1);
    let hi = ((0.12 * n as f64).floor() as usize).max(n.div_ceil(n_folds));
    (lo, hi)
}

/// Connected components of the "shared a session" graph, as index lists.
fn session_components(roster: &Roster) -> Vec<Vec<usize>> {
    let n = roster.participants.len();
    let index: BTreeMap<&str, usize> = roster
        .participants
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.as_str(), i))
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for s in &roster.sessions {
        if let (Some(&a), Some(&b)) = (index.get(s.a.as_str()), index.get(s.b.as_str())) {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        comps.entry(r).or_default().push(i);
    }
    comps.into_values().collect()
}

/// Partitions participants into `n_folds` balanced groups and derives the
/// rotating train/validation/test splits. Participants who share sessions are
/// kept together when their component fits in one group.
pub fn make_folds(roster: &Roster, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    let p = &roster.participants;
    let n = p.len();
    if n_folds < 3 || n < n_folds {
        return Err(EvalError::TooFewParticipants {
            needed: n_folds.max(3),
            got: n,
        });
    }
    let (lo, hi) = group_size_bounds(n, n_folds);
    let bal = Balance::new(p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut units: Vec<Vec<usize>> = Vec::new();
    for c in session_components(roster) {
        if c.len() <= hi {
            units.push(c);
        } else {
            units.extend(c.into_iter().map(|i| vec![i]));
        }
    }
    units.shuffle(&mut rng);
    units.sort_by_key(|u| std::cmp::Reverse(u.len()));

    // greedy: fill the smallest group that has room, ties by balance cost
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_folds];
    let mut group_units: Vec<Vec<Vec<usize>>> = vec![Vec::new(); n_folds];
    let mut queue: std::collections::VecDeque<Vec<usize>> = units.into();
    while let Some(u) = queue.pop_front() {
        let best = (0..n_folds)
            .filter(|&g| groups[g].len() + u.len() <= hi)
            .min_by(|&a, &b| {
                let delta = |g: usize| {
                    let mut m = groups[g].clone();
                    m.extend(&u);
                    bal.group_cost(p, &m) - bal.group_cost(p, &groups[g])
                };
                groups[a].len().cmp(&groups[b].len()).then(delta(a).total_cmp(&delta(b)))
            });
        match best {
            Some(g) => {
                groups[g].extend(&u);
                group_units[g].push(u);
            }
            None => {
                for i in u.into_iter().rev() {
                    queue.push_front(vec![i]);
                }
            }
        }
    }

    // top up groups below the lower bound from the largest ones
    loop {
        let Some(small) = (0..n_folds).find(|&g| groups[g].len() < lo) else {
            break;
        };
        let big = (0..n_folds).max_by_key(|&g| groups[g].len()).expect("groups");
        let ui = (0..group_units[big].len())
            .min_by_key(|&i| group_units[big][i].len())
            .expect("non-empty group");
        let mut unit = group_units[big].swap_remove(ui);
        let moved = unit.pop().expect("non-empty unit");
        if !unit.is_empty() {
            for i in unit {
                group_units[big].push(vec![i]);
            }
        }
        groups[big].retain(|&i| i != moved);
        groups[small].push(moved);
        group_units[small].push(vec![moved]);
    }

    // local refinement: unit swaps and moves that lower the objective
    let cost = |members: &Vec<Vec<usize>>| {
        let flat: Vec<usize> = members.iter().flatten().copied().collect();
        bal.group_cost(p, &flat)
    };
    let size = |members: &Vec<Vec<usize>>| members.iter().map(Vec::len).sum::<usize>();
    for _pass in 0..100 {
        let mut improved = false;
        for g1 in 0..n_folds {
            for g2 in g1 + 1..n_folds {
                let base = cost(&group_units[g1]) + cost(&group_units[g2]);
                let mut best: Option<(f64, Option<usize>, Option<usize>)> = None;
                let n1 = group_units[g1].len();
                let n2 = group_units[g2].len();
                // (Some, Some) = swap, (Some, None) = move g1 -> g2, (None, Some) = move g2 -> g1
                let mut candidates: Vec<(Option<usize>, Option<usize>)> = Vec::new();
                for a in 0..n1 {
                    for b in 0..n2 {
                        candidates.push((Some(a), Some(b)));
                    }
                    candidates.push((Some(a), None));
                }
                for b in 0..n2 {
                    candidates.push((None, Some(b)));
                }
                for (a, b) in candidates {
                    let mut u1 = group_units[g1].clone();
                    let mut u2 = group_units[g2].clone();
                    let ua = a.map(|a| u1.swap_remove(a));
                    let ub = b.map(|b| u2.swap_remove(b));
                    if let Some(ua) = ua {
                        u2.push(ua);
                    }
                    if let Some(ub) = ub {
                        u1.push(ub);
                    }
                    let (s1, s2) = (size(&u1), size(&u2));
                    if s1 < lo || s1 > hi || s2 < lo || s2 > hi {
                        continue;
                    }
                    let c = cost(&u1) + cost(&u2);
                    if c < base - 1e-12 && best.is_none_or(|(bc, _, _)| c < bc) {
                        best = Some((c, a, b));
                    }
                }
                if let Some((_, a, b)) = best {
                    let ua = a.map(|a| group_units[g1].swap_remove(a));
                    let ub = b.map(|b| group_units[g2].swap_remove(b));
                    if let Some(ua) = ua {
                        group_units[g2].push(ua);
                    }
                    if let Some(ub) = ub {
                        group_units[g1].push(ub);
                    }
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }

    let groups: Vec<Vec<String>> = group_units
        .iter()
        .map(|units| {
            let mut ids: Vec<String> = units.iter().flatten().map(|&i| p[i].id.clone()).collect();
            ids.sort();
            ids
        })
        .collect();
    let objective = balance_objective(roster, &groups);
    let folds = (0..n_folds).map(|i| fold_split(roster, &groups, i)).collect();
    Ok(FoldPlan {
        n_folds,
        seed,
        groups,
        objective,
        folds,
    })
}

/// Fold `i`: group `i` tests, group `i + 1` validates, the rest trains.
pub fn fold_split(roster: &Roster, groups: &[Vec<String>], i: usize) -> FoldSplit {
    let k = groups.len();
    let set = |g: usize| groups[g].iter().cloned().collect::<BTreeSet<String>>();
    let test = set(i);
    let val = set((i + 1) % k);
    let train: BTreeSet<String> = (0..k)
        .filter(|&g| g != i && g != (i + 1) % k)
        .flat_map(|g| groups[g].iter().cloned())
        .collect();
    let mut split = FoldSplit {
        fold: i,
        train,
        val,
        test,
        train_sessions: Vec::new(),
        val_sessions: Vec::new(),
        test_sessions: Vec::new(),
        dropped: Vec::new(),
    };
    for s in &roster.sessions {
        let both = |set: &BTreeSet<String>| set.contains(&s.a) && set.contains(&s.b);
        let r = s.session.clone();
        if both(&split.train) {
            split.train_sessions.push(r);
        } else if both(&split.val) {
            split.val_sessions.push(r);
        } else if both(&split.test) {
            split.test_sessions.push(r);
        } else {
            split.dropped.push(r);
        }
    }
    split
}
