//! Experiment driver: metrics, validation grid search, multi-split reports, the task-count
//! sweep and last-layer transfer.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{self, MultiTaskDataset, SplitDataset, SplitSizes, TaskKind};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::objectives::{
    init_params, predict, Activation, DeepParams, Hyperparams, InitSpec, ModelParams, ObjectiveId,
};
use crate::optimizers::{train, write_history_csv, HistoryRow, OptimizerSpec, Schedule, TrainConfig};
use crate::seeds::{derive_seed_path, name_stream};
use crate::synthetic::{self, SyntheticSpec};
use crate::tensor::{sigmoid_scalar, Mat};

/// Classification decision threshold on `sigmoid(score)`.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Rmse,
    /// Percentage of misclassified instances.
    ErrorRate,
}

impl MetricKind {
    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Regression => MetricKind::Rmse,
            TaskKind::Binary => MetricKind::ErrorRate,
        }
    }
}

pub fn metric(preds: &[f64], y: &[f64], kind: MetricKind) -> Result<f64> {
    if preds.len() != y.len() || preds.is_empty() {
        return Err(Error::dim("metric", format!("{} predictions for {} targets", preds.len(), y.len())));
    }
    let n = preds.len() as f64;
    Ok(match kind {
        MetricKind::Rmse => (preds.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n).sqrt(),
        MetricKind::ErrorRate => {
            let wrong = preds
                .iter()
                .zip(y)
                .filter(|(p, t)| (sigmoid_scalar(**p) >= THRESHOLD) != (**t == 1.0))
                .count();
            100.0 * wrong as f64 / n
        }
    })
}

/// Macro-averaged per-class error (percent) of argmax over one-vs-all scores (N x C).
pub fn multiclass_error(scores: &Mat, labels: &[usize]) -> Result<f64> {
    if scores.rows() != labels.len() || scores.cols() == 0 {
        return Err(Error::dim("multiclass_error", format!("scores {:?}, {} labels", scores.shape(), labels.len())));
    }
    let c = scores.cols();
    let mut total = vec![0usize; c];
    let mut wrong = vec![0usize; c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::Validation(format!("label {l} outside 0..{c}")));
        }
        let row = scores.row(i);
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        total[l] += 1;
        if best != l {
            wrong[l] += 1;
        }
    }
    let present: Vec<f64> = (0..c)
        .filter(|&j| total[j] > 0)
        .map(|j| 100.0 * wrong[j] as f64 / total[j] as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// `stl_t − model_t`: positive entries are improvements.
pub fn per_task_reduction(model: &[f64], stl: &[f64]) -> Result<Vec<f64>> {
    if model.len() != stl.len() {
        return Err(Error::dim("per_task_reduction", format!("{} vs {} tasks", model.len(), stl.len())));
    }
    Ok(stl.iter().zip(model).map(|(s, m)| s - m).collect())
}

/// Mean and 95% half-width `1.96·sd/√n` (sample sd; zero for a single value).
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Per-task test metric of any model on every task of `ds`.
pub fn task_metrics(params: &ModelParams, ds: &MultiTaskDataset, hp: &Hyperparams) -> Result<Vec<f64>> {
    let kind = MetricKind::for_kind(ds.kind());
    ds.tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let scores = predict(params, &task.x, hp)?.col(t);
            metric(&scores, task.y.data(), kind)
        })
        .collect()
}

/// Headline number: macro per-class error for one-vs-all data, otherwise the task mean.
pub fn overall_metric(params: &ModelParams, ds: &MultiTaskDataset, hp: &Hyperparams) -> Result<f64> {
    if let (Some(classes), Some(first)) = (&ds.classes, ds.tasks.first()) {
        return multiclass_error(&predict(params, &first.x, hp)?, classes);
    }
    let m = task_metrics(params, ds, hp)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// `Σ|M|` over hard→easy entries divided by `Σ|M|` over easy→hard entries, rows being sources.
pub fn asymmetry_ratio(transfer: &Mat, groups: &[String]) -> Option<f64> {
    if transfer.rows() != groups.len() || transfer.cols() != groups.len() {
        return None;
    }
    let (mut he, mut eh) = (0.0, 0.0);
    for s in 0..groups.len() {
        for t in 0..groups.len() {
            match (groups[s].as_str(), groups[t].as_str()) {
                ("hard", "easy") => he += transfer.get(s, t).abs(),
                ("easy", "hard") => eh += transfer.get(s, t).abs(),
                _ => {}
            }
        }
    }
    let any_pair = groups.iter().any(|g| g == "easy") && groups.iter().any(|g| g == "hard");
    (any_pair && eh > 0.0).then(|| he / eh)
}

// ---------------------------------------------------------------------------------------------
// configuration

fn zero_list() -> Vec<f64> {
    vec![0.0]
}
fn one_k() -> Vec<usize> {
    vec![1]
}

/// Lists of values per hyperparameter; candidates are their Cartesian product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperGrid {
    #[serde(default = "one_k")]
    pub k: Vec<usize>,
    #[serde(default = "zero_list")]
    pub lambda: Vec<f64>,
    #[serde(default = "zero_list")]
    pub mu: Vec<f64>,
    #[serde(default = "zero_list")]
    pub l1_bases: Vec<f64>,
    #[serde(default = "zero_list")]
    pub alpha: Vec<f64>,
    #[serde(default = "zero_list")]
    pub gamma: Vec<f64>,
    #[serde(default = "zero_list")]
    pub delta: Vec<f64>,
    /// Empty means the schedule's own `base_lr`.
    #[serde(default)]
    pub base_lr: Vec<f64>,
    #[serde(default)]
    pub hidden_activation: Activation,
    #[serde(default)]
    pub b_nonnegative: bool,
}

impl Default for HyperGrid {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

/// One point of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub hp: Hyperparams,
    pub delta: f64,
    pub base_lr: f64,
}

impl HyperGrid {
    /// Candidates in nested order k, lambda, mu, l1_bases, alpha, gamma, delta, base_lr.
    pub fn candidates(&self, default_lr: f64) -> Vec<Candidate> {
        let lrs = if self.base_lr.is_empty() { vec![default_lr] } else { self.base_lr.clone() };
        let mut out = Vec::new();
        for &k in &self.k {
            for &lambda in &self.lambda {
                for &mu in &self.mu {
                    for &l1_bases in &self.l1_bases {
                        for &alpha in &self.alpha {
                            for &gamma in &self.gamma {
                                for &delta in &self.delta {
                                    for &base_lr in &lrs {
                                        out.push(Candidate {
                                            hp: Hyperparams {
                                                alpha,
                                                gamma,
                                                lambda,
                                                mu,
                                                l1_bases,
                                                k,
                                                hidden_activation: self.hidden_activation,
                                                b_nonnegative: self.b_nonnegative,
                                            },
                                            delta,
                                            base_lr,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn default_steps() -> usize {
    2500
}
fn default_batch() -> usize {
    100
}
fn default_init_std() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}

/// A model to fit together with how to train it and which grid to search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Report label; defaults to the objective name.
    #[serde(default)]
    pub name: Option<String>,
    pub objective: ObjectiveId,
    #[serde(default)]
    pub grid: HyperGrid,
    pub optimizer: OptimizerSpec,
    pub schedule: Schedule,
    #[serde(default = "default_steps")]
    pub max_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Hidden widths of deep models; the last one is the latent width `k`.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_true")]
    pub recon_bias: bool,
    /// Snapshot cadence in steps; default once per epoch.
    #[serde(default)]
    pub eval_every: Option<usize>,
}

impl ModelSpec {
    pub fn new(objective: ObjectiveId, optimizer: OptimizerSpec, schedule: Schedule) -> Self {
        ModelSpec {
            name: None,
            objective,
            grid: HyperGrid::default(),
            optimizer,
            schedule,
            max_steps: default_steps(),
            batch_size: default_batch(),
            init_std: default_init_std(),
            hidden: Vec::new(),
            recon_bias: true,
            eval_every: None,
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.objective.to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        let lists: [(&str, usize); 8] = [
            ("grid.k", g.k.len()),
            ("grid.lambda", g.lambda.len()),
            ("grid.mu", g.mu.len()),
            ("grid.l1_bases", g.l1_bases.len()),
            ("grid.alpha", g.alpha.len()),
            ("grid.gamma", g.gamma.len()),
            ("grid.delta", g.delta.len()),
            ("grid.base_lr", g.base_lr.len().max(1)),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, n)| *n == 0) {
            return Err(Error::config(*name, "grid lists must be non-empty"));
        }
        for c in self.grid.candidates(self.schedule.base_lr) {
            c.hp.validate()?;
            LossConfig::squared().with_delta(c.delta).validate().map_err(|e| Error::config("grid.delta", e.to_string()))?;
            Schedule { base_lr: c.base_lr, ..self.schedule.clone() }.validate()?;
        }
        self.optimizer.validate()?;
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("init_std", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        Ok(())
    }

    /// Latent width used to initialize: the last hidden width for deep models, else `k`.
    fn init_spec(&self, cand: &Candidate, d: usize, tasks: usize) -> InitSpec {
        let k = match self.objective {
            ObjectiveId::DeepAmtfl | ObjectiveId::Mtnn => self.hidden.last().copied().unwrap_or(cand.hp.k),
            _ => cand.hp.k,
        };
        InitSpec {
            objective: self.objective,
            d,
            tasks,
            k,
            hidden: self.hidden.clone(),
            recon_bias: self.recon_bias,
        }
    }
}

/// Where the data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Either one manifest re-split `n_splits` times by `split`, or one pre-partitioned
    /// manifest per split.
    Manifest {
        paths: Vec<PathBuf>,
        #[serde(default)]
        split: Option<SplitSizes>,
    },
}

fn default_splits() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataSource,
    pub models: Vec<ModelSpec>,
    #[serde(default = "default_splits")]
    pub n_splits: usize,
    #[serde(default)]
    pub seed: u64,
    /// Standardize features with train-split statistics.
    #[serde(default)]
    pub standardize: bool,
    /// Model label that per-task reductions are measured against; defaults to `stl` if present.
    #[serde(default)]
    pub baseline: Option<String>,
    /// Write learned parameters (transfer matrices included) with training histories per split.
    #[serde(default = "default_true")]
    pub dump_params: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::config("models", "at least one model is required"));
        }
        if self.n_splits == 0 {
            return Err(Error::config("n_splits", "must be >= 1"));
        }
        let mut labels: Vec<String> = Vec::new();
        for m in &self.models {
            m.validate()?;
            let l = m.label();
            if labels.contains(&l) {
                return Err(Error::config("models", format!("duplicate model name {l}")));
            }
            labels.push(l);
        }
        if let Some(b) = &self.baseline {
            if !labels.contains(b) {
                return Err(Error::config("baseline", format!("no model named {b}")));
            }
        }
        match &self.data {
            DataSource::Synthetic(s) => s.validate()?,
            DataSource::Manifest { paths, split } => {
                if paths.is_empty() {
                    return Err(Error::config("data.manifest.paths", "at least one manifest is required"));
                }
                if split.is_none() && paths.len() != self.n_splits {
                    return Err(Error::config(
                        "data.manifest.paths",
                        format!("{} pre-partitioned manifests for {} splits", paths.len(), self.n_splits),
                    ));
                }
                if split.is_some() && paths.len() != 1 {
                    return Err(Error::config("data.manifest.split", "re-splitting needs exactly one manifest"));
                }
            }
        }
        Ok(())
    }

    pub fn baseline_label(&self) -> Option<String> {
        self.baseline.clone().or_else(|| {
            self.models
                .iter()
                .map(|m| m.label())
                .find(|l| l == "stl")
        })
    }

    /// Every candidate of every model, for dry runs.
    pub fn resolved_grid(&self) -> Vec<(String, Vec<Candidate>)> {
        self.models
            .iter()
            .map(|m| (m.label(), m.grid.candidates(m.schedule.base_lr)))
            .collect()
    }
}

/// Builds split `index`: synthetic generation, a stored partition, or a seeded re-split.
pub fn load_split(cfg: &ExperimentConfig, index: usize) -> Result<SplitDataset> {
    let split = match &cfg.data {
        DataSource::Synthetic(spec) => synthetic::generate(spec, index)?.1,
        DataSource::Manifest { paths, split: Some(sizes) } => {
            let loaded = datasets::load(&paths[0])?;
            datasets::split(&loaded.full, sizes, derive_seed_path(cfg.seed, &[10, index as u64]))?
        }
        DataSource::Manifest { paths, split: None } => {
            let loaded = datasets::load(&paths[index])?;
            loaded.partition.ok_or_else(|| Error::Load {
                file: paths[index].clone(),
                line: 0,
                msg: "manifest has no stored partition; give data.manifest.split".into(),
            })?
        }
    };
    if cfg.standardize {
        Ok(datasets::standardize_split(&split)?.0)
    } else {
        Ok(split)
    }
}

// ---------------------------------------------------------------------------------------------
// training jobs

/// A finished training run on one candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedRun {
    pub candidate: usize,
    pub params: ModelParams,
    pub hp: Hyperparams,
    pub val_metric: f64,
    pub best_step: usize,
    pub history: Vec<HistoryRow>,
    pub seconds: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateLog {
    pub index: usize,
    pub candidate: Candidate,
    /// `None` when the run failed.
    pub val_metric: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn loss_for(ds: &MultiTaskDataset, delta: f64) -> LossConfig {
    let kind = match ds.kind() {
        TaskKind::Regression => LossKind::Squared,
        TaskKind::Binary => LossKind::Logistic,
    };
    LossConfig { kind, delta }
}

/// Trains one candidate on `split.train`, keeping the best-on-validation snapshot.
pub fn run_candidate(model: &ModelSpec, cand: &Candidate, index: usize, split: &SplitDataset, seed: u64) -> Result<TrainedRun> {
    let train_ds = &split.train;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_path(seed, &[0]));
    let init = init_params(&model.init_spec(cand, train_ds.d, train_ds.num_tasks()), model.init_std, &mut rng);
    let hp = cand.hp.clone();
    let cfg = TrainConfig {
        objective: model.objective,
        loss: loss_for(train_ds, cand.delta),
        hp: hp.clone(),
        optimizer: model.optimizer.clone(),
        schedule: Schedule {
            base_lr: cand.base_lr,
            ..model.schedule.clone()
        },
        max_steps: model.max_steps,
        batch_size: model.batch_size,
        seed: derive_seed_path(seed, &[1]),
        eval_every: model.eval_every,
        frozen: Vec::new(),
    };
    let val = &split.val;
    let validator = |p: &ModelParams| overall_metric(p, val, &hp);
    let start = Instant::now();
    let out = train(init, train_ds, Some(&validator), &cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let val_metric = match out.history.iter().filter_map(|r| r.val_metric).reduce(f64::min) {
        Some(v) => v,
        None => validator(&out.params)?,
    };
    Ok(TrainedRun {
        candidate: index,
        params: out.params,
        hp,
        val_metric,
        best_step: out.best_step,
        history: out.history,
        seconds,
        steps: model.max_steps,
    })
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub best: TrainedRun,
    pub log: Vec<CandidateLog>,
}

/// Trains every candidate, picks the lowest validation metric (first wins ties). Failed or
/// non-finite runs score +∞.
pub fn grid_search(model: &ModelSpec, split: &SplitDataset, seed: u64) -> Result<GridResult> {
    let cands = model.grid.candidates(model.schedule.base_lr);
    let runs: Vec<Result<TrainedRun>> = cands
        .par_iter()
        .enumerate()
        .map(|(i, c)| run_candidate(model, c, i, split, derive_seed_path(seed, &[i as u64])))
        .collect();
    let mut log = Vec::with_capacity(cands.len());
    let mut best: Option<TrainedRun> = None;
    for (i, (cand, run)) in cands.into_iter().zip(runs).enumerate() {
        match run {
            Ok(r) if r.val_metric.is_finite() => {
                log.push(CandidateLog {
                    index: i,
                    candidate: cand,
                    val_metric: Some(r.val_metric),
                    error: None,
                });
                if best.as_ref().is_none_or(|b| r.val_metric < b.val_metric) {
                    best = Some(r);
                }
            }
            Ok(r) => log.push(CandidateLog {
                index: i,
                candidate: cand,
                val_metric: None,
                error: Some(format!("validation metric is {}", r.val_metric)),
            }),
            Err(e) => log.push(CandidateLog {
                index: i,
                candidate: cand,
                val_metric: None,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some(best) => Ok(GridResult { best, log }),
        None => Err(Error::AllCandidatesDiverged {
            tried: log.len(),
            first: log.first().and_then(|c| c.error.clone()).unwrap_or_default(),
        }),
    }
}

// ---------------------------------------------------------------------------------------------
// reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let (mean, ci95) = mean_ci(values);
        Summary { mean, ci95 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: usize,
    pub chosen: Candidate,
    pub chosen_index: usize,
    pub val_metric: f64,
    pub best_step: usize,
    pub test_per_task: Vec<f64>,
    /// Task mean, or macro per-class error on one-vs-all data.
    pub test_overall: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asymmetry_ratio: Option<f64>,
    pub candidates: Vec<CandidateLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFailure {
    pub split: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub objective: ObjectiveId,
    pub parameter_count: Option<usize>,
    /// Over splits of the per-split overall metric.
    pub overall: Summary,
    /// Over splits of the per-split group mean.
    pub groups: Vec<GroupSummary>,
    pub per_task: Vec<Summary>,
    /// Baseline minus this model, per task, on split means.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction_vs_baseline: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asymmetry_ratio: Option<Summary>,
    pub splits: Vec<SplitResult>,
    pub failures: Vec<SplitFailure>,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub metric: MetricKind,
    pub decision_threshold: f64,
    pub n_splits: usize,
    pub task_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    pub models: Vec<ModelReport>,
}

impl ExperimentReport {
    pub fn model(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn failed(&self) -> bool {
        self.models.iter().any(|m| !m.failures.is_empty())
    }
}

/// Wall-clock numbers kept apart from the report so reruns compare byte-for-byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub model: String,
    pub split: usize,
    pub train_seconds: f64,
    pub seconds_per_step: f64,
}

/// A learned model as written to disk, readable by `export-transfer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDump {
    pub model: String,
    pub objective: ObjectiveId,
    pub split: usize,
    pub task_ids: Vec<String>,
    pub hp: Hyperparams,
    pub params: ModelParams,
}

pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub timings: Vec<Timing>,
    pub dumps: Vec<(ModelDump, Vec<HistoryRow>)>,
}

/// Runs grid search with test evaluation for every model on every split, then aggregates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let splits: Vec<SplitDataset> = (0..cfg.n_splits)
        .into_par_iter()
        .map(|s| load_split(cfg, s))
        .collect::<Result<_>>()?;
    let first = &splits[0].test;
    let task_ids = first.task_ids();
    let groups = first.groups.clone();
    let metric_kind = MetricKind::for_kind(first.kind());
    for s in &splits[1..] {
        if s.test.task_ids() != task_ids {
            return Err(Error::Validation("splits disagree on task ids".into()));
        }
    }

    // (split, model) jobs; candidates fan out inside grid_search
    let jobs: Vec<(usize, usize)> = (0..cfg.n_splits)
        .flat_map(|s| (0..cfg.models.len()).map(move |m| (s, m)))
        .collect();
    let results: Vec<Result<(TrainedRun, Vec<CandidateLog>)>> = jobs
        .par_iter()
        .map(|&(s, m)| {
            let seed = derive_seed_path(cfg.seed, &[s as u64, name_stream(&cfg.models[m].label())]);
            grid_search(&cfg.models[m], &splits[s], seed).map(|g| (g.best, g.log))
        })
        .collect();

    let mut per_model: Vec<(Vec<SplitResult>, Vec<SplitFailure>)> = vec![(Vec::new(), Vec::new()); cfg.models.len()];
    let mut timings = Vec::new();
    let mut dumps = Vec::new();
    let mut param_counts = vec![None; cfg.models.len()];
    for ((s, m), res) in jobs.into_iter().zip(results) {
        let label = cfg.models[m].label();
        match res.and_then(|(run, log)| {
            let test = &splits[s].test;
            let per_task = task_metrics(&run.params, test, &run.hp)?;
            let overall = overall_metric(&run.params, test, &run.hp)?;
            Ok((run, log, per_task, overall))
        }) {
            Ok((run, log, per_task, overall)) => {
                param_counts[m] = Some(run.params.num_parameters());
                let asym = match (&groups, run.params.transfer_matrix()) {
                    (Some(g), Some(tm)) => asymmetry_ratio(&tm, g),
                    _ => None,
                };
                timings.push(Timing {
                    model: label.clone(),
                    split: s,
                    train_seconds: run.seconds,
                    seconds_per_step: if run.steps > 0 { run.seconds / run.steps as f64 } else { 0.0 },
                });
                per_model[m].0.push(SplitResult {
                    split: s,
                    chosen: log[run.candidate].candidate.clone(),
                    chosen_index: run.candidate,
                    val_metric: run.val_metric,
                    best_step: run.best_step,
                    test_per_task: per_task,
                    test_overall: overall,
                    asymmetry_ratio: asym,
                    candidates: log,
                });
                if cfg.dump_params {
                    dumps.push((
                        ModelDump {
                            model: label,
                            objective: cfg.models[m].objective,
                            split: s,
                            task_ids: task_ids.clone(),
                            hp: run.hp.clone(),
                            params: run.params,
                        },
                        run.history,
                    ));
                }
            }
            Err(e) => per_model[m].1.push(SplitFailure {
                split: s,
                error: e.to_string(),
            }),
        }
    }

    let mut models = Vec::new();
    for (m, (splits_done, failures)) in per_model.into_iter().enumerate() {
        models.push(summarize(
            &cfg.models[m],
            splits_done,
            failures,
            param_counts[m],
            groups.as_deref(),
            task_ids.len(),
            cfg.n_splits,
        ));
    }
    let baseline = cfg.baseline_label();
    if let Some(b) = &baseline {
        let base = models.iter().find(|m| &m.name == b).map(task_means);
        if let Some(Some(base)) = base {
            for m in &mut models {
                if let Some(mine) = task_means(m) {
                    m.reduction_vs_baseline = per_task_reduction(&mine, &base).ok();
                }
            }
        }
    }
    Ok(ExperimentOutput {
        report: ExperimentReport {
            name: cfg.name.clone(),
            metric: metric_kind,
            decision_threshold: THRESHOLD,
            n_splits: cfg.n_splits,
            task_ids,
            groups,
            baseline,
            models,
        },
        timings,
        dumps,
    })
}

fn task_means(m: &ModelReport) -> Option<Vec<f64>> {
    (!m.splits.is_empty()).then(|| m.per_task.iter().map(|s| s.mean).collect())
}

/// Group mean of one split's per-task metrics.
pub fn group_mean(per_task: &[f64], groups: &[String], group: &str) -> Option<f64> {
    let vals: Vec<f64> = per_task
        .iter()
        .zip(groups)
        .filter(|(_, g)| *g == group)
        .map(|(v, _)| *v)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn distinct(groups: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for g in groups {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

fn summarize(
    spec: &ModelSpec,
    splits: Vec<SplitResult>,
    failures: Vec<SplitFailure>,
    parameter_count: Option<usize>,
    groups: Option<&[String]>,
    n_tasks: usize,
    n_splits: usize,
) -> ModelReport {
    let overall = Summary::of(&splits.iter().map(|s| s.test_overall).collect::<Vec<_>>());
    let per_task = (0..n_tasks)
        .map(|t| Summary::of(&splits.iter().map(|s| s.test_per_task[t]).collect::<Vec<_>>()))
        .collect();
    let group_summaries = groups
        .map(|g| {
            distinct(g)
                .into_iter()
                .map(|name| {
                    let vals: Vec<f64> = splits
                        .iter()
                        .filter_map(|s| group_mean(&s.test_per_task, g, &name))
                        .collect();
                    GroupSummary {
                        group: name,
                        summary: Summary::of(&vals),
                    }
                })
                .collect()
        })
        .unwrap_or_default();
    let ratios: Vec<f64> = splits.iter().filter_map(|s| s.asymmetry_ratio).collect();
    ModelReport {
        name: spec.label(),
        objective: spec.objective,
        parameter_count,
        overall,
        groups: group_summaries,
        per_task,
        reduction_vs_baseline: None,
        asymmetry_ratio: (!ratios.is_empty()).then(|| Summary::of(&ratios)),
        coverage: splits.len() as f64 / n_splits as f64,
        splits,
        failures,
    }
}

fn csv_io(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, e.into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `report.json`, `per_split.csv`, `summary.csv`, `reduction.csv`, `candidates.csv`,
/// `timings.json`, plus per-split parameter dumps under `models/`.
pub fn write_outputs(out: &ExperimentOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = &out.report;
    write_json(&dir.join("report.json"), report)?;
    write_json(&dir.join("timings.json"), &out.timings)?;
    let group_of = |t: usize| report.groups.as_ref().map(|g| g[t].clone()).unwrap_or_default();

    let path = dir.join("per_split.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_io(&path))?;
    w.write_record(["model", "split", "task", "group", "metric"]).map_err(csv_io(&path))?;
    for m in &report.models {
        for s in &m.splits {
            for (t, v) in s.test_per_task.iter().enumerate() {
                w.write_record([m.name.clone(), s.split.to_string(), report.task_ids[t].clone(), group_of(t), v.to_string()])
                    .map_err(csv_io(&path))?;
            }
            w.write_record([m.name.clone(), s.split.to_string(), "overall".into(), String::new(), s.test_overall.to_string()])
                .map_err(csv_io(&path))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_io(&path))?;
    w.write_record(["model", "group", "mean", "ci95", "coverage"]).map_err(csv_io(&path))?;
    for m in &report.models {
        let mut rows = vec![("all".to_string(), &m.overall)];
        rows.extend(m.groups.iter().map(|g| (g.group.clone(), &g.summary)));
        for (g, s) in rows {
            w.write_record([m.name.clone(), g, s.mean.to_string(), s.ci95.to_string(), m.coverage.to_string()])
                .map_err(csv_io(&path))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    if report.baseline.is_some() {
        let path = dir.join("reduction.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_io(&path))?;
        w.write_record(["model", "task", "group", "reduction"]).map_err(csv_io(&path))?;
        for m in &report.models {
            if let Some(r) = &m.reduction_vs_baseline {
                for (t, v) in r.iter().enumerate() {
                    w.write_record([m.name.clone(), report.task_ids[t].clone(), group_of(t), v.to_string()])
                        .map_err(csv_io(&path))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    let path = dir.join("candidates.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_io(&path))?;
    w.write_record(["model", "split", "index", "candidate", "val_metric", "error"]).map_err(csv_io(&path))?;
    for m in &report.models {
        for s in &m.splits {
            for c in &s.candidates {
                w.write_record([
                    m.name.clone(),
                    s.split.to_string(),
                    c.index.to_string(),
                    serde_json::to_string(&c.candidate)?,
                    c.val_metric.map(|v| v.to_string()).unwrap_or_default(),
                    c.error.clone().unwrap_or_default(),
                ])
                .map_err(csv_io(&path))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    for (dump, history) in &out.dumps {
        let sub = dir.join("models").join(&dump.model).join(format!("split{}", dump.split));
        write_dump(dump, history, &sub)?;
    }
    Ok(())
}

/// `model.json`, `history.csv` and CSVs of the interpretable matrices (`W`, `L`, `S`, `LS`, `A`,
/// `B`, `AS`).
pub fn write_dump(dump: &ModelDump, history: &[HistoryRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("model.json"), dump)?;
    write_history_csv(history, dir.join("history.csv"))?;
    let ids = &dump.task_ids;
    let mats: Vec<(&str, Mat, Option<&[String]>)> = match &dump.params {
        ModelParams::Linear { w } => vec![("W", w.clone(), Some(ids))],
        ModelParams::InterTask(p) => vec![("W", p.w.clone(), Some(ids)), ("B", p.b.clone(), Some(ids))],
        ModelParams::LatentFactor(p) => vec![
            ("L", p.l.clone(), None),
            ("S", p.s.clone(), Some(ids)),
            ("LS", p.l.dot(&p.s), Some(ids)),
        ],
        ModelParams::LatentInterTask(p) => vec![
            ("L", p.l.clone(), None),
            ("S", p.s.clone(), Some(ids)),
            ("LS", p.l.dot(&p.s), Some(ids)),
            ("B", p.b.clone(), Some(ids)),
        ],
        ModelParams::Amtfl(p) => vec![
            ("L", p.l.clone(), None),
            ("S", p.s.clone(), Some(ids)),
            ("LS", p.l.dot(&p.s), Some(ids)),
            ("A", p.a.clone(), None),
            ("AS", p.a.dot(&p.s), Some(ids)),
        ],
        ModelParams::Deep(p) => vec![("A", p.a.clone(), None), ("AS", p.a.dot(p.last()), Some(ids))],
    };
    for (name, m, header) in mats {
        let header: Vec<String> = match header {
            Some(h) => h.to_vec(),
            None => (0..m.cols()).map(|c| format!("c{c}")).collect(),
        };
        synthetic::write_matrix_csv(&m, Some(&header), &dir.join(format!("{name}.csv")))?;
    }
    Ok(())
}

/// Writes the transfer matrix with task ids labelling rows and columns.
pub fn write_transfer_csv(m: &Mat, ids: &[String], absolute: bool, path: &Path) -> Result<()> {
    if m.rows() != ids.len() || m.cols() != ids.len() {
        return Err(Error::dim("write_transfer_csv", format!("{:?} for {} tasks", m.shape(), ids.len())));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_io(path))?;
    let mut header = vec!["source".to_string()];
    header.extend(ids.iter().cloned());
    w.write_record(&header).map_err(csv_io(path))?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(m.row(i).iter().map(|&v| if absolute { v.abs() } else { v }.to_string()));
        w.write_record(&row).map_err(csv_io(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a labelled transfer CSV back into ids and matrix.
pub fn read_transfer_csv(path: &Path) -> Result<(Vec<String>, Mat)> {
    let load = |line: usize, msg: String| Error::Load {
        file: path.to_path_buf(),
        line,
        msg,
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_io(path))?;
    let header = r.headers().map_err(csv_io(path))?.clone();
    let ids: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut data = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| load(i + 2, e.to_string()))?;
        if rec.len() != ids.len() + 1 {
            return Err(load(i + 2, format!("expected {} fields, got {}", ids.len() + 1, rec.len())));
        }
        for f in rec.iter().skip(1) {
            data.push(f.parse::<f64>().map_err(|e| load(i + 2, format!("{f:?}: {e}")))?);
        }
    }
    let n = ids.len();
    Ok((ids, Mat::from_vec(data.len() / n.max(1), n, data)?))
}

// ---------------------------------------------------------------------------------------------
// scalability

fn default_t_list() -> Vec<usize> {
    vec![12, 24, 48, 96, 120]
}
fn default_repeats() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalabilityConfig {
    #[serde(default)]
    pub synthetic: SyntheticSpec,
    #[serde(default = "default_t_list")]
    pub t_list: Vec<usize>,
    /// Each model runs its first grid candidate.
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub split_index: usize,
    /// Timing repeats; the fastest is kept.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ScalabilityConfig {
    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        if self.t_list.is_empty() || self.t_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("t_list", "must be non-empty and strictly ascending"));
        }
        if let Some(t) = self.t_list.iter().find(|&&t| t < 2 || t % 2 != 0) {
            return Err(Error::config("t_list", format!("task counts must be even and >= 2, got {t}")));
        }
        if self.models.is_empty() {
            return Err(Error::config("models", "at least one model is required"));
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be >= 1"));
        }
        self.models.iter().try_for_each(ModelSpec::validate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityRow {
    pub tasks: usize,
    pub model: String,
    pub parameter_count: usize,
    pub test_metric: f64,
    pub steps: usize,
    pub wall_seconds: f64,
    pub seconds_per_step: f64,
}

/// AMTL: `W` plus the `T x T` graph.
pub fn amtl_parameter_count(d: usize, t: usize) -> usize {
    d * t + t * t
}

/// AMTFL: `L`, `S` and `A`.
pub fn amtfl_parameter_count(d: usize, k: usize, t: usize) -> usize {
    d * k + 2 * k * t
}

/// Runs every model at every task count with a fixed step budget, recording exact parameter
/// counts and the fastest of `repeats` timings.
pub fn scalability_sweep(cfg: &ScalabilityConfig) -> Result<Vec<ScalabilityRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for (ti, &t) in cfg.t_list.iter().enumerate() {
        let (_, split) = synthetic::generate_scaled(&cfg.synthetic, t, cfg.split_index, false)?;
        for model in &cfg.models {
            let cand = &model.grid.candidates(model.schedule.base_lr)[0];
            let seed = derive_seed_path(cfg.seed, &[ti as u64, name_stream(&model.label())]);
            let mut best: Option<TrainedRun> = None;
            for _ in 0..cfg.repeats {
                let run = run_candidate(model, cand, 0, &split, seed)?;
                if best.as_ref().is_none_or(|b| run.seconds < b.seconds) {
                    best = Some(run);
                }
            }
            let run = best.expect("repeats >= 1");
            let per_task = task_metrics(&run.params, &split.test, &run.hp)?;
            rows.push(ScalabilityRow {
                tasks: t,
                model: model.label(),
                parameter_count: run.params.num_parameters(),
                test_metric: per_task.iter().sum::<f64>() / per_task.len() as f64,
                steps: run.steps,
                wall_seconds: run.seconds,
                seconds_per_step: if run.steps > 0 { run.seconds / run.steps as f64 } else { 0.0 },
            });
        }
    }
    Ok(rows)
}

pub fn write_scalability_csv(rows: &[ScalabilityRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_io(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------------------------
// transfer learning

#[derive(Clone, Debug, PartialEq)]
pub struct TransferSpec {
    pub optimizer: OptimizerSpec,
    pub schedule: Schedule,
    pub max_steps: usize,
    pub batch_size: usize,
    /// ℓ1 on the new last layer.
    pub mu: f64,
    pub init_std: f64,
    pub seed: u64,
    pub hidden_activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferOutcome {
    pub params: DeepParams,
    pub metric: f64,
    pub history: Vec<HistoryRow>,
}

/// Keeps every pretrained layer fixed and trains a fresh last layer with one column per target
/// task; reports the metric on `eval` (the training set when `None`).
pub fn transfer_learn(
    pretrained: &DeepParams,
    target: &MultiTaskDataset,
    eval: Option<&MultiTaskDataset>,
    spec: &TransferSpec,
) -> Result<TransferOutcome> {
    if pretrained.layers.is_empty() || pretrained.layers[0].rows() != target.d {
        return Err(Error::dim(
            "transfer_learn",
            format!(
                "pretrained input width {} vs target d {}",
                pretrained.layers.first().map(|l| l.rows()).unwrap_or(0),
                target.d
            ),
        ));
    }
    let t = target.num_tasks();
    let k = pretrained.last().rows();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_path(spec.seed, &[0]));
    let fresh = init_params(
        &InitSpec {
            objective: ObjectiveId::Mtnn,
            d: k,
            tasks: t,
            k,
            hidden: vec![],
            recon_bias: false,
        },
        spec.init_std,
        &mut rng,
    );
    let ModelParams::Deep(fresh) = fresh else { unreachable!("deep init") };
    let mut params = pretrained.clone();
    let depth = params.layers.len();
    params.layers[depth - 1] = fresh.layers[1].clone();
    params.a = Mat::zeros(t, k);
    let init = ModelParams::Deep(params);
    let names = init.tensor_names();
    let last = format!("W{depth}");
    let frozen: Vec<String> = names.into_iter().filter(|n| *n != last).collect();
    let hp = Hyperparams {
        mu: spec.mu,
        k,
        hidden_activation: spec.hidden_activation,
        ..Hyperparams::default()
    };
    let cfg = TrainConfig {
        objective: ObjectiveId::Mtnn,
        loss: loss_for(target, 0.0),
        hp: hp.clone(),
        optimizer: spec.optimizer.clone(),
        schedule: spec.schedule.clone(),
        max_steps: spec.max_steps,
        batch_size: spec.batch_size,
        seed: derive_seed_path(spec.seed, &[1]),
        eval_every: None,
        frozen,
    };
    let out = train(init, target, None, &cfg)?;
    let metric = overall_metric(&out.params, eval.unwrap_or(target), &hp)?;
    let ModelParams::Deep(params) = out.params else { unreachable!("deep in, deep out") };
    Ok(TransferOutcome {
        params,
        metric,
        history: out.history,
    })
}

/// Resolves `path` against `base` unless it is absolute.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::TaskDataset;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn metric_examples() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(metric(&y, &y, MetricKind::Rmse).unwrap(), 0.0);
        let off: Vec<f64> = y.iter().map(|v| v + 1.0).collect();
        assert!((metric(&off, &y, MetricKind::Rmse).unwrap() - 1.0).abs() < 1e-15);
        let labels = [1.0, 0.0, 1.0];
        assert_eq!(metric(&[5.0, -5.0, 2.0], &labels, MetricKind::ErrorRate).unwrap(), 0.0);
        assert_eq!(metric(&[-5.0, 5.0, -2.0], &labels, MetricKind::ErrorRate).unwrap(), 100.0);
        // sigmoid(0) = 0.5 counts as positive
        assert_eq!(metric(&[0.0], &[1.0], MetricKind::ErrorRate).unwrap(), 0.0);
        assert!(metric(&[1.0], &[1.0, 2.0], MetricKind::Rmse).is_err());
    }

    #[test]
    fn multiclass_macro_error() {
        let scores = Mat::from_rows(&[vec![2.0, 0.0], vec![3.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        // class 0: both right; class 1: one of two wrong
        assert_eq!(multiclass_error(&scores, &[0, 0, 1, 1]).unwrap(), 25.0);
    }

    #[test]
    fn reduction_examples() {
        assert_eq!(per_task_reduction(&[1.0, 4.0], &[2.0, 3.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(per_task_reduction(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        let (m, s) = ([0.5, 1.5, 2.0], [1.0, 1.0, 3.0]);
        let r: f64 = per_task_reduction(&m, &s).unwrap().iter().sum();
        assert!((r - 3.0 * (s.iter().sum::<f64>() / 3.0 - m.iter().sum::<f64>() / 3.0)).abs() < 1e-12);
        assert!(per_task_reduction(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ci_conventions() {
        assert_eq!(mean_ci(&[3.0]), (3.0, 0.0));
        let (m, c) = mean_ci(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((c - 1.96 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn asymmetry_ratio_direction() {
        let g: Vec<String> = ["easy", "hard"].iter().map(|s| s.to_string()).collect();
        let m = Mat::from_rows(&[vec![9.0, 2.0], vec![-1.0, 9.0]]).unwrap();
        assert_eq!(asymmetry_ratio(&m, &g), Some(0.5));
        let solo: Vec<String> = vec!["easy".into(), "easy".into()];
        assert_eq!(asymmetry_ratio(&m, &solo), None);
    }

    #[test]
    fn grid_order_and_size() {
        let grid = HyperGrid {
            lambda: vec![0.1, 0.2],
            mu: vec![1.0, 2.0, 3.0],
            ..HyperGrid::default()
        };
        let c = grid.candidates(0.05);
        assert_eq!(c.len(), 6);
        assert_eq!((c[0].hp.lambda, c[0].hp.mu), (0.1, 1.0));
        assert_eq!((c[1].hp.lambda, c[1].hp.mu), (0.1, 2.0));
        assert_eq!(c[5].base_lr, 0.05);
    }

    fn toy_split(seed: u64) -> SplitDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = move || -> f64 { StandardNormal.sample(&mut rng) };
        let w = [1.0, -2.0, 0.5];
        let mut make = |n: usize| {
            let tasks = (0..2)
                .map(|t| {
                    let x = Mat::from_fn(n, 3, |_, _| gauss());
                    let y = Mat::from_fn(n, 1, |i, _| (0..3).map(|j| x.get(i, j) * w[j]).sum::<f64>() * (t + 1) as f64);
                    TaskDataset::new(format!("t{t}"), x, y, TaskKind::Regression).unwrap()
                })
                .collect();
            MultiTaskDataset::new("toy", tasks).unwrap()
        };
        SplitDataset {
            train: make(30),
            val: make(10),
            test: make(20),
        }
    }

    fn stl_spec() -> ModelSpec {
        ModelSpec {
            max_steps: 300,
            eval_every: Some(10),
            ..ModelSpec::new(ObjectiveId::Stl, OptimizerSpec::sgd(0.9), Schedule::constant(0.05))
        }
    }

    #[test]
    fn single_and_duplicate_candidates() {
        let split = toy_split(1);
        let g = grid_search(&stl_spec(), &split, 3).unwrap();
        assert_eq!(g.log.len(), 1);
        assert_eq!(g.best.candidate, 0);

        let dup = ModelSpec {
            grid: HyperGrid {
                lambda: vec![0.0, 0.0, 0.0],
                ..HyperGrid::default()
            },
            ..stl_spec()
        };
        // identical candidates still get their own seeds; equal scores resolve to the first
        let g = grid_search(&dup, &split, 3).unwrap();
        assert_eq!(g.log.len(), 3);
        let best_val = g.log.iter().filter_map(|c| c.val_metric).fold(f64::INFINITY, f64::min);
        let first = g.log.iter().position(|c| c.val_metric == Some(best_val)).unwrap();
        assert_eq!(g.best.candidate, first);
    }

    #[test]
    fn diverged_candidates_score_infinity() {
        let split = toy_split(2);
        let spec = ModelSpec {
            grid: HyperGrid {
                base_lr: vec![1e4, 0.05],
                ..HyperGrid::default()
            },
            ..stl_spec()
        };
        let g = grid_search(&spec, &split, 0).unwrap();
        assert!(g.log[0].val_metric.is_none() && g.log[0].error.is_some());
        assert_eq!(g.best.candidate, 1);

        let all_bad = ModelSpec {
            grid: HyperGrid {
                base_lr: vec![1e4],
                ..HyperGrid::default()
            },
            ..stl_spec()
        };
        assert!(matches!(grid_search(&all_bad, &split, 0), Err(Error::AllCandidatesDiverged { tried: 1, .. })));
    }

    #[test]
    fn stl_solves_noiseless_toy() {
        let split = toy_split(4);
        let g = grid_search(&stl_spec(), &split, 0).unwrap();
        let m = task_metrics(&g.best.params, &split.test, &g.best.hp).unwrap();
        assert!(m.iter().all(|&v| v < 0.05), "{m:?}");
    }

    #[test]
    fn parameter_count_formulas() {
        assert_eq!(amtl_parameter_count(30, 100), 13000);
        assert_eq!(amtfl_parameter_count(30, 6, 100), 1380);
        let ratio = |t| amtl_parameter_count(30, t) as f64 / amtfl_parameter_count(30, 6, t) as f64;
        assert!(ratio(120) > ratio(12));
        for t in [12, 24, 48, 96] {
            assert!(amtl_parameter_count(30, t) < amtl_parameter_count(30, t * 2));
            assert!(amtfl_parameter_count(30, 6, t) < amtfl_parameter_count(30, 6, t * 2));
        }
    }

    #[test]
    fn transfer_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mat::from_rows(&[vec![0.1, -2.5e-7], vec![1.0 / 3.0, 4.0]]).unwrap();
        let ids = vec!["a".to_string(), "b".to_string()];
        let p = dir.path().join("as.csv");
        write_transfer_csv(&m, &ids, false, &p).unwrap();
        let (ids2, m2) = read_transfer_csv(&p).unwrap();
        assert_eq!((ids2, m2), (ids.clone(), m.clone()));
        write_transfer_csv(&m, &ids, true, &p).unwrap();
        assert!(read_transfer_csv(&p).unwrap().1.data().iter().all(|&v| v >= 0.0));
    }
}
