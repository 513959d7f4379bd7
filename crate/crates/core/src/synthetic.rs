//! Synthetic easy/hard benchmark: sparse true bases, tasks built from pairs of bases, and
//! per-split Gaussian designs.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{MultiTaskDataset, SplitDataset, SplitTag, TaskDataset, TaskKind};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::tensor::Mat;

/// Where the group noise enters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// `w_t` itself is perturbed and targets are exact, `y = X w_t`.
    Parameter,
    /// `w_t` lies in the span of two bases, targets carry `N(0, σ²)` noise.
    #[default]
    Observation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "d30")]
    pub d: usize,
    #[serde(default = "k6")]
    pub k_true: usize,
    /// Zero-based basis indices available to easy tasks.
    #[serde(default = "easy_pool")]
    pub easy_pool: Vec<usize>,
    #[serde(default = "hard_pool")]
    pub hard_pool: Vec<usize>,
    #[serde(default = "two")]
    pub bases_per_task: usize,
    #[serde(default = "one")]
    pub sigma_easy: f64,
    #[serde(default = "sigma_hard")]
    pub sigma_hard: f64,
    /// Train / val / test rows per easy task.
    #[serde(default = "n_easy")]
    pub n_easy: [usize; 3],
    #[serde(default = "n_hard")]
    pub n_hard: [usize; 3],
    #[serde(default = "five")]
    pub n_splits: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseModel,
    /// Length of each basis' contiguous ±1 block.
    #[serde(default = "five")]
    pub support_len: usize,
    /// Std of the Gaussian fill outside the blocks.
    #[serde(default = "fill_std")]
    pub fill_std: f64,
    /// Magnitude range of the combination coefficients; signs are random.
    #[serde(default = "coef_range")]
    pub coef_range: [f64; 2],
    /// Whether test targets carry observation noise too.
    #[serde(default)]
    pub noisy_test: bool,
}

fn d30() -> usize {
    30
}
fn k6() -> usize {
    6
}
fn easy_pool() -> Vec<usize> {
    vec![0, 1, 2, 3]
}
fn hard_pool() -> Vec<usize> {
    vec![2, 3, 4, 5]
}
fn two() -> usize {
    2
}
fn one() -> f64 {
    1.0
}
fn sigma_hard() -> f64 {
    2.0
}
fn n_easy() -> [usize; 3] {
    [50, 50, 100]
}
fn n_hard() -> [usize; 3] {
    [25, 25, 100]
}
fn five() -> usize {
    5
}
fn fill_std() -> f64 {
    0.05
}
fn coef_range() -> [f64; 2] {
    [0.5, 1.5]
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k_true == 0 {
            return Err(Error::config("d", "d and k_true must be >= 1"));
        }
        for (name, pool) in [("easy_pool", &self.easy_pool), ("hard_pool", &self.hard_pool)] {
            if pool.len() < self.bases_per_task {
                return Err(Error::config(name, format!("needs at least {} bases", self.bases_per_task)));
            }
            if let Some(b) = pool.iter().find(|&&b| b >= self.k_true) {
                return Err(Error::config(name, format!("basis {b} outside 0..{}", self.k_true)));
            }
        }
        if self.bases_per_task == 0 {
            return Err(Error::config("bases_per_task", "must be >= 1"));
        }
        for (name, s) in [("sigma_easy", self.sigma_easy), ("sigma_hard", self.sigma_hard)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config(name, format!("must be finite and >= 0, got {s}")));
            }
        }
        for (name, n) in [("n_easy", self.n_easy), ("n_hard", self.n_hard)] {
            if n.contains(&0) {
                return Err(Error::config(name, "every part needs at least one row"));
            }
        }
        if self.n_splits == 0 {
            return Err(Error::config("n_splits", "must be >= 1"));
        }
        if self.support_len * self.k_true > self.d {
            return Err(Error::config("support_len", "basis blocks do not fit in d"));
        }
        if !(self.fill_std >= 0.0 && self.fill_std.is_finite()) {
            return Err(Error::config("fill_std", "must be finite and >= 0"));
        }
        let [lo, hi] = self.coef_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("coef_range", "need 0 < lo <= hi"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Easy,
    Hard,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Easy => "easy",
            Group::Hard => "hard",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTruth {
    pub id: String,
    pub group: Group,
    pub bases: Vec<usize>,
    pub coefs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGroundTruth {
    pub l_true: Mat,
    /// True task parameters, one column per task.
    pub w_true: Mat,
    pub tasks: Vec<TaskTruth>,
}

impl SyntheticGroundTruth {
    pub fn groups(&self) -> Vec<Group> {
        self.tasks.iter().map(|t| t.group).collect()
    }

    /// `w_t − Σ c l` per task; non-zero only under the parameter-noise model.
    pub fn parameter_noise(&self) -> Mat {
        Mat::from_fn(self.w_true.rows(), self.w_true.cols(), |j, t| {
            let task = &self.tasks[t];
            let clean: f64 = task.bases.iter().zip(&task.coefs).map(|(&b, c)| c * self.l_true.get(j, b)).sum();
            self.w_true.get(j, t) - clean
        })
    }
}

/// All `r`-subsets of `pool` in lexicographic order.
pub fn combinations(pool: &[usize], r: usize) -> Vec<Vec<usize>> {
    fn rec(pool: &[usize], r: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..pool.len() {
            cur.push(pool[i]);
            rec(pool, r, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(pool, r, 0, &mut Vec::new(), &mut out);
    out
}

fn true_bases(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Mat {
    let fill = Normal::new(0.0, spec.fill_std).expect("validated");
    let mut l = Mat::from_fn(spec.d, spec.k_true, |_, _| fill.sample(rng));
    for b in 0..spec.k_true {
        for r in 0..spec.support_len {
            let v = if r % 2 == 0 { 1.0 } else { -1.0 };
            l.set(b * spec.support_len + r, b, v);
        }
    }
    l
}

/// Basis subsets per group: enumerated while they last, sampled with replacement beyond that
/// or when `resample` is set.
fn assign(pool: &[usize], r: usize, count: usize, resample: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let all = combinations(pool, r);
    if !resample && count <= all.len() {
        return all[..count].to_vec();
    }
    (0..count).map(|_| all[rng.random_range(0..all.len())].clone()).collect()
}

fn ground_truth(spec: &SyntheticSpec, per_group: usize, resample: bool) -> SyntheticGroundTruth {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0));
    let l_true = true_bases(spec, &mut rng);
    let easy = assign(&spec.easy_pool, spec.bases_per_task, per_group, resample, &mut rng);
    let hard = assign(&spec.hard_pool, spec.bases_per_task, per_group, resample, &mut rng);
    let [lo, hi] = spec.coef_range;
    let mut tasks = Vec::new();
    let mut cols = Vec::new();
    for (group, sets) in [(Group::Easy, easy), (Group::Hard, hard)] {
        let sigma = match group {
            Group::Easy => spec.sigma_easy,
            Group::Hard => spec.sigma_hard,
        };
        for (i, bases) in sets.into_iter().enumerate() {
            let coefs: Vec<f64> = bases
                .iter()
                .map(|_| {
                    let m = if lo == hi { lo } else { rng.random_range(lo..hi) };
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            let mut w: Vec<f64> = (0..spec.d)
                .map(|j| bases.iter().zip(&coefs).map(|(&b, c)| c * l_true.get(j, b)).sum())
                .collect();
            if spec.noise == NoiseModel::Parameter {
                for v in &mut w {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += sigma * e;
                }
            }
            cols.push(w);
            tasks.push(TaskTruth {
                id: format!("{}{i}", group.as_str()),
                group,
                bases,
                coefs,
            });
        }
    }
    let w_true = Mat::from_fn(spec.d, cols.len(), |j, t| cols[t][j]);
    SyntheticGroundTruth { l_true, w_true, tasks }
}

fn materialize(spec: &SyntheticSpec, truth: &SyntheticGroundTruth, split_index: usize) -> Result<SplitDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1 + split_index as u64));
    let mut parts: [Vec<TaskDataset>; 3] = Default::default();
    for (t, task) in truth.tasks.iter().enumerate() {
        let (sizes, sigma) = match task.group {
            Group::Easy => (spec.n_easy, spec.sigma_easy),
            Group::Hard => (spec.n_hard, spec.sigma_hard),
        };
        let w = Mat::column(&truth.w_true.col(t));
        for (p, &n) in sizes.iter().enumerate() {
            let x = Mat::from_fn(n, spec.d, |_, _| StandardNormal.sample(&mut rng));
            let mut y = x.dot(&w);
            let noisy = spec.noise == NoiseModel::Observation && (p < 2 || spec.noisy_test);
            if noisy {
                for v in y.data_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += sigma * e;
                }
            }
            parts[p].push(TaskDataset::new(task.id.clone(), x, y, TaskKind::Regression)?);
        }
    }
    let groups: Vec<String> = truth.tasks.iter().map(|t| t.group.as_str().to_string()).collect();
    let [train, val, test] = parts;
    let build = |tasks: Vec<TaskDataset>, tag: SplitTag| -> Result<MultiTaskDataset> {
        let mut ds = MultiTaskDataset::new(format!("synthetic-split{split_index}"), tasks)?.with_groups(groups.clone())?;
        ds.split = tag;
        Ok(ds)
    };
    Ok(SplitDataset {
        train: build(train, SplitTag::Train)?,
        val: build(val, SplitTag::Val)?,
        test: build(test, SplitTag::Test)?,
    })
}

/// The easy/hard benchmark: one task per basis pair in each pool. Ground truth depends on the
/// seed only; designs and noise on `(seed, split_index)`.
pub fn generate(spec: &SyntheticSpec, split_index: usize) -> Result<(SyntheticGroundTruth, SplitDataset)> {
    spec.validate()?;
    let per_group = combinations(&spec.easy_pool, spec.bases_per_task)
        .len()
        .min(combinations(&spec.hard_pool, spec.bases_per_task).len());
    let truth = ground_truth(spec, per_group, false);
    let split = materialize(spec, &truth, split_index)?;
    Ok((truth, split))
}

/// `t_total / 2` easy and `t_total / 2` hard tasks, sampling basis subsets with replacement once
/// the enumeration runs out (or always, with `resample`).
pub fn generate_scaled(
    spec: &SyntheticSpec,
    t_total: usize,
    split_index: usize,
    resample: bool,
) -> Result<(SyntheticGroundTruth, SplitDataset)> {
    spec.validate()?;
    if t_total < 2 || !t_total.is_multiple_of(2) {
        return Err(Error::config("t_total", format!("must be even and >= 2, got {t_total}")));
    }
    let truth = ground_truth(spec, t_total / 2, resample);
    let split = materialize(spec, &truth, split_index)?;
    Ok((truth, split))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, e.into())
}

pub(crate) fn write_matrix_csv(m: &Mat, header: Option<&[String]>, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_path(path).map_err(csv_err(path))?;
    if let Some(h) = header {
        w.write_record(h).map_err(csv_err(path))?;
    }
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string())).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `L_true.csv`, `W_true.csv` (task ids as header) and `assignments.csv`.
pub fn write_ground_truth(truth: &SyntheticGroundTruth, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let basis_names: Vec<String> = (0..truth.l_true.cols()).map(|b| format!("l{b}")).collect();
    write_matrix_csv(&truth.l_true, Some(&basis_names), &dir.join("L_true.csv"))?;
    let ids: Vec<String> = truth.tasks.iter().map(|t| t.id.clone()).collect();
    write_matrix_csv(&truth.w_true, Some(&ids), &dir.join("W_true.csv"))?;

    let path = dir.join("assignments.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["task", "group", "bases", "coefs"]).map_err(csv_err(&path))?;
    for t in &truth.tasks {
        let bases: Vec<String> = t.bases.iter().map(|b| b.to_string()).collect();
        let coefs: Vec<String> = t.coefs.iter().map(|c| c.to_string()).collect();
        w.write_record([t.id.as_str(), t.group.as_str(), &bases.join(" "), &coefs.join(" ")])
            .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
