//! Multi-task datasets: in-memory types, the manifest + per-task CSV format, splitting,
//! standardization and one-vs-all expansion.
//!
//! A manifest is a JSON file
//!
//! ```json
//! { "name": "school", "kind": "regression", "d": 27,
//!   "tasks": [ { "id": "s0", "file": "s0.csv" }, { "id": "s1", "file": "s1.csv" } ] }
//! ```
//!
//! Each task file is a headerless CSV whose column 0 is the target followed by `d` feature
//! columns. Two optional extensions are understood:
//!
//! * `"group"` and `"partition": [n_train, n_val, n_test]` per task. With a partition the rows
//!   are stored train first, then validation, then test.
//! * a `"multiclass": { "file", "classes", "partition"? }` block instead of `tasks`, holding one
//!   CSV whose column 0 is an integer class label. It is expanded one-vs-all at load.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::check_binary;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub id: String,
    pub x: Mat,
    pub y: Mat,
    pub kind: TaskKind,
}

impl TaskDataset {
    pub fn new(id: impl Into<String>, x: Mat, y: Mat, kind: TaskKind) -> Result<Self> {
        let id = id.into();
        if y.cols() != 1 || y.rows() != x.rows() {
            return Err(Error::dim(
                "TaskDataset::new",
                format!("task {id}: X {:?} with y {:?}", x.shape(), y.shape()),
            ));
        }
        if x.rows() == 0 {
            return Err(Error::Validation(format!("task {id} has no instances")));
        }
        if kind == TaskKind::Binary {
            check_binary(y.data()).map_err(|e| Error::Validation(format!("task {id}: {e}")))?;
        }
        Ok(TaskDataset { id, x, y, kind })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    fn subset(&self, idx: &[usize]) -> TaskDataset {
        TaskDataset {
            id: self.id.clone(),
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            kind: self.kind,
        }
    }
}

/// T tasks sharing feature dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskDataset {
    pub name: String,
    pub d: usize,
    pub tasks: Vec<TaskDataset>,
    pub split: SplitTag,
    /// Group label per task (e.g. `easy` / `hard` on synthetic data).
    pub groups: Option<Vec<String>>,
    /// Class label per instance when every task is a one-vs-all view of the same rows.
    pub classes: Option<Vec<usize>>,
    pub standardized: bool,
}

impl MultiTaskDataset {
    pub fn new(name: impl Into<String>, tasks: Vec<TaskDataset>) -> Result<Self> {
        let name = name.into();
        let d = tasks.first().map(|t| t.x.cols()).ok_or_else(|| {
            Error::Validation(format!("dataset {name} has no tasks"))
        })?;
        if let Some(bad) = tasks.iter().find(|t| t.x.cols() != d) {
            return Err(Error::Validation(format!(
                "task {} has {} features, expected {d}",
                bad.id,
                bad.x.cols()
            )));
        }
        Ok(MultiTaskDataset {
            name,
            d,
            tasks,
            split: SplitTag::Full,
            groups: None,
            classes: None,
            standardized: false,
        })
    }

    pub fn with_groups(mut self, groups: Vec<String>) -> Result<Self> {
        if groups.len() != self.tasks.len() {
            return Err(Error::Validation(format!(
                "{} group labels for {} tasks",
                groups.len(),
                self.tasks.len()
            )));
        }
        self.groups = Some(groups);
        Ok(self)
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn kind(&self) -> TaskKind {
        self.tasks[0].kind
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.id.clone()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(TaskDataset::n).collect()
    }

    fn with_tasks(&self, tasks: Vec<TaskDataset>, split: SplitTag, classes: Option<Vec<usize>>) -> Self {
        MultiTaskDataset {
            name: self.name.clone(),
            d: self.d,
            tasks,
            split,
            groups: self.groups.clone(),
            classes,
            standardized: self.standardized,
        }
    }
}

/// Train / validation / test views of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: MultiTaskDataset,
    pub val: MultiTaskDataset,
    pub test: MultiTaskDataset,
}

/// How many instances go to each part of a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSizes {
    /// Fractions of each task's instances (normalized); rounding remainder goes to test.
    Ratios([f64; 3]),
    /// Exact per-task counts; instances beyond their sum are dropped.
    Counts([usize; 3]),
}

impl SplitSizes {
    fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let c = match self {
            SplitSizes::Ratios(r) => {
                if r.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return Err(Error::Validation(format!("split ratios must be positive: {r:?}")));
                }
                let total: f64 = r.iter().sum();
                let train = ((r[0] / total) * n as f64).floor() as usize;
                let val = ((r[1] / total) * n as f64).floor() as usize;
                [train, val, n.saturating_sub(train + val)]
            }
            SplitSizes::Counts(c) => {
                if c.iter().sum::<usize>() > n {
                    return Err(Error::Validation(format!(
                        "split counts {c:?} exceed {n} instances"
                    )));
                }
                *c
            }
        };
        if c.contains(&0) {
            return Err(Error::Validation(format!(
                "{n} instances are too few for split {self:?}"
            )));
        }
        Ok(c)
    }
}

fn partition(idx: &[usize], counts: [usize; 3]) -> [Vec<usize>; 3] {
    let a = counts[0];
    let b = a + counts[1];
    let c = b + counts[2];
    [idx[..a].to_vec(), idx[a..b].to_vec(), idx[b..c].to_vec()]
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Disjoint per-task train/val/test partition, shuffled deterministically by `seed`.
///
/// One-vs-all datasets are split once over their shared rows so all tasks keep the same
/// instances.
pub fn split(dataset: &MultiTaskDataset, sizes: &SplitSizes, seed: u64) -> Result<SplitDataset> {
    let mut parts: [Vec<TaskDataset>; 3] = Default::default();
    let mut class_parts: Option<[Vec<usize>; 3]> = None;
    if let Some(classes) = &dataset.classes {
        let n = classes.len();
        let counts = sizes.counts(n).map_err(|e| Error::Validation(format!("{}: {e}", dataset.name)))?;
        let idx = partition(&shuffled(n, seed), counts);
        for task in &dataset.tasks {
            for (p, i) in parts.iter_mut().zip(&idx) {
                p.push(task.subset(i));
            }
        }
        class_parts = Some(idx.map(|i| i.iter().map(|&r| classes[r]).collect()));
    } else {
        for (t, task) in dataset.tasks.iter().enumerate() {
            let counts = sizes
                .counts(task.n())
                .map_err(|e| Error::Validation(format!("task {}: {e}", task.id)))?;
            let idx = partition(&shuffled(task.n(), seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)), counts);
            for (p, i) in parts.iter_mut().zip(&idx) {
                p.push(task.subset(i));
            }
        }
    }
    let [train, val, test] = parts;
    let [ctr, cva, cte] = match class_parts {
        Some([a, b, c]) => [Some(a), Some(b), Some(c)],
        None => [None, None, None],
    };
    Ok(SplitDataset {
        train: dataset.with_tasks(train, SplitTag::Train, ctr),
        val: dataset.with_tasks(val, SplitTag::Val, cva),
        test: dataset.with_tasks(test, SplitTag::Test, cte),
    })
}

/// Expands a C-class problem into C binary tasks over the same rows.
pub fn one_vs_all(
    name: impl Into<String>,
    x: &Mat,
    labels: &[usize],
    n_classes: usize,
) -> Result<MultiTaskDataset> {
    if labels.len() != x.rows() {
        return Err(Error::dim(
            "one_vs_all",
            format!("{} labels for {} rows", labels.len(), x.rows()),
        ));
    }
    if let Some(i) = labels.iter().position(|&c| c >= n_classes) {
        return Err(Error::Validation(format!(
            "label {} at row {i} is outside 0..{n_classes}",
            labels[i]
        )));
    }
    let tasks = (0..n_classes)
        .map(|c| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { 0.0 }).collect();
            TaskDataset::new(format!("class_{c}"), x.clone(), Mat::column(&y), TaskKind::Binary)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = MultiTaskDataset::new(name, tasks)?;
    ds.classes = Some(labels.to_vec());
    Ok(ds)
}

/// Per-feature affine map fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Pools every task's training rows. Zero-variance features get `std = 1` so they end up
    /// centered at zero.
    pub fn fit(train: &MultiTaskDataset) -> Result<Self> {
        let d = train.d;
        let n: usize = train.tasks.iter().map(TaskDataset::n).sum();
        if n == 0 {
            return Err(Error::Validation("standardize: empty training set".into()));
        }
        let mut mean = vec![0.0; d];
        for t in &train.tasks {
            for i in 0..t.n() {
                for (m, v) in mean.iter_mut().zip(t.x.row(i)) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for t in &train.tasks {
            for i in 0..t.n() {
                for ((s, v), m) in var.iter_mut().zip(t.x.row(i)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, ds: &MultiTaskDataset) -> Result<MultiTaskDataset> {
        if ds.standardized {
            return Err(Error::Validation(format!(
                "{} ({:?}) is already standardized",
                ds.name, ds.split
            )));
        }
        if ds.d != self.mean.len() {
            return Err(Error::dim("standardize", format!("d={} vs {}", ds.d, self.mean.len())));
        }
        let tasks = ds
            .tasks
            .iter()
            .map(|t| TaskDataset {
                x: Mat::from_fn(t.x.rows(), t.x.cols(), |i, j| {
                    (t.x.get(i, j) - self.mean[j]) / self.std[j]
                }),
                ..t.clone()
            })
            .collect();
        let mut out = ds.with_tasks(tasks, ds.split, ds.classes.clone());
        out.standardized = true;
        Ok(out)
    }
}

/// Fits on `train` and transforms it and every dataset in `others` exactly once.
pub fn standardize(
    train: &MultiTaskDataset,
    others: &[&MultiTaskDataset],
) -> Result<(MultiTaskDataset, Vec<MultiTaskDataset>, Standardizer)> {
    let st = Standardizer::fit(train)?;
    let tr = st.apply(train)?;
    let rest = others.iter().map(|o| st.apply(o)).collect::<Result<Vec<_>>>()?;
    Ok((tr, rest, st))
}

pub fn standardize_split(split: &SplitDataset) -> Result<(SplitDataset, Standardizer)> {
    let (train, mut rest, st) = standardize(&split.train, &[&split.val, &split.test])?;
    let test = rest.pop().expect("two others");
    let val = rest.pop().expect("two others");
    Ok((SplitDataset { train, val, test }, st))
}

// ---------------------------------------------------------------------------------------------
// On-disk format

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestKind {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub id: String,
    pub file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MulticlassSource {
    pub file: PathBuf,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub kind: ManifestKind,
    pub d: usize,
    #[serde(default)]
    pub tasks: Vec<ManifestTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiclass: Option<MulticlassSource>,
}

/// A manifest with its tasks loaded, optionally with a stored partition.
#[derive(Clone, Debug)]
pub struct LoadedManifest {
    pub full: MultiTaskDataset,
    pub partition: Option<SplitDataset>,
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Load {
        file: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Reads a headerless numeric CSV, requiring exactly `width` columns per row.
fn read_csv(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Load {
                file: path.to_path_buf(),
                line: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Load {
            file: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        if rec.len() != width {
            return Err(Error::Load {
                file: path.to_path_buf(),
                line,
                msg: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, field)| {
                field
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Load {
                        file: path.to_path_buf(),
                        line,
                        msg: format!("column {c}: `{field}` is not a finite number"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Load {
            file: path.to_path_buf(),
            line: 0,
            msg: "file has no rows".into(),
        });
    }
    Ok(rows)
}

fn split_xy(rows: &[Vec<f64>], d: usize) -> (Mat, Vec<f64>) {
    let y: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let x = Mat::from_fn(rows.len(), d, |i, j| rows[i][j + 1]);
    (x, y)
}

fn check_partition(p: [usize; 3], n: usize, what: &str) -> Result<()> {
    if p.iter().sum::<usize>() != n || p.contains(&0) {
        return Err(Error::Validation(format!(
            "{what}: partition {p:?} does not cover its {n} rows"
        )));
    }
    Ok(())
}

fn ranges(p: [usize; 3]) -> [Vec<usize>; 3] {
    partition(&(0..p.iter().sum()).collect::<Vec<_>>(), p)
}

/// Loads a manifest and its task files (resolved relative to the manifest).
pub fn load(path: impl AsRef<Path>) -> Result<LoadedManifest> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let d = manifest.d;

    if let Some(mc) = &manifest.multiclass {
        let file = base.join(&mc.file);
        let rows = read_csv(&file, d + 1)?;
        let (x, raw) = split_xy(&rows, d);
        let labels = raw
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) < mc.classes {
                    Ok(v as usize)
                } else {
                    Err(Error::Load {
                        file: file.clone(),
                        line: i + 1,
                        msg: format!("class label {v} outside 0..{}", mc.classes),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let full = one_vs_all(&manifest.name, &x, &labels, mc.classes)?;
        let partition = match mc.partition {
            Some(p) => {
                check_partition(p, labels.len(), &file.display().to_string())?;
                let [a, b, c] = ranges(p);
                let view = |idx: &[usize], tag| {
                    let tasks = full.tasks.iter().map(|t| t.subset(idx)).collect();
                    full.with_tasks(tasks, tag, Some(idx.iter().map(|&i| labels[i]).collect()))
                };
                Some(SplitDataset {
                    train: view(&a, SplitTag::Train),
                    val: view(&b, SplitTag::Val),
                    test: view(&c, SplitTag::Test),
                })
            }
            None => None,
        };
        return Ok(LoadedManifest { full, partition });
    }

    if manifest.tasks.is_empty() {
        return Err(Error::Load {
            file: path.to_path_buf(),
            line: 0,
            msg: "manifest lists no tasks".into(),
        });
    }
    let kind = match manifest.kind {
        ManifestKind::Regression => TaskKind::Regression,
        ManifestKind::Classification => TaskKind::Binary,
    };
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for mt in &manifest.tasks {
        let file = base.join(&mt.file);
        let rows = read_csv(&file, d + 1).map_err(|e| match e {
            Error::Load { file, line, msg } => Error::Load {
                file,
                line,
                msg: format!("task {}: {msg}", mt.id),
            },
            other => other,
        })?;
        let (x, y) = split_xy(&rows, d);
        tasks.push(
            TaskDataset::new(mt.id.clone(), x, Mat::column(&y), kind)
                .map_err(|e| Error::Load { file: file.clone(), line: 0, msg: e.to_string() })?,
        );
    }
    let mut full = MultiTaskDataset::new(&manifest.name, tasks)?;
    if manifest.tasks.iter().all(|t| t.group.is_some()) {
        full = full.with_groups(manifest.tasks.iter().map(|t| t.group.clone().unwrap()).collect())?;
    }
    let partition = if manifest.tasks.iter().all(|t| t.partition.is_some()) {
        let mut parts: [Vec<TaskDataset>; 3] = Default::default();
        for (mt, task) in manifest.tasks.iter().zip(&full.tasks) {
            let p = mt.partition.unwrap();
            check_partition(p, task.n(), &format!("task {}", mt.id))?;
            for (dst, idx) in parts.iter_mut().zip(ranges(p)) {
                dst.push(task.subset(&idx));
            }
        }
        let [a, b, c] = parts;
        Some(SplitDataset {
            train: full.with_tasks(a, SplitTag::Train, None),
            val: full.with_tasks(b, SplitTag::Val, None),
            test: full.with_tasks(c, SplitTag::Test, None),
        })
    } else {
        None
    };
    Ok(LoadedManifest { full, partition })
}

/// Loads every task named by a manifest, validating shapes and labels.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<MultiTaskDataset> {
    load(path).map(|m| m.full)
}

fn write_rows(path: &Path, x: &Mat, y: &[f64]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for i in 0..x.rows() {
        let mut rec = Vec::with_capacity(x.cols() + 1);
        rec.push(y[i].to_string());
        rec.extend(x.row(i).iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn manifest_kind(kind: TaskKind) -> ManifestKind {
    match kind {
        TaskKind::Regression => ManifestKind::Regression,
        TaskKind::Binary => ManifestKind::Classification,
    }
}

fn write_json(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn task_file(id: &str) -> PathBuf {
    PathBuf::from(format!("task_{id}.csv"))
}

/// Writes `ds` as `dir/manifest.json` plus one CSV per task; returns the manifest path.
///
/// Floats use Rust's shortest round-trip representation, so reloading is exact.
pub fn write_manifest(ds: &MultiTaskDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tasks = Vec::new();
    for (t, task) in ds.tasks.iter().enumerate() {
        let file = task_file(&task.id);
        write_rows(&dir.join(&file), &task.x, task.y.data())?;
        tasks.push(ManifestTask {
            id: task.id.clone(),
            file,
            group: ds.groups.as_ref().map(|g| g[t].clone()),
            partition: None,
        });
    }
    let path = dir.join("manifest.json");
    write_json(
        &path,
        &Manifest {
            name: ds.name.clone(),
            kind: manifest_kind(ds.kind()),
            d: ds.d,
            tasks,
            multiclass: None,
        },
    )?;
    Ok(path)
}

/// Writes a split with its partition recorded per task (train rows, then val, then test).
pub fn write_partitioned(split: &SplitDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let full = &split.train;
    let mut tasks = Vec::new();
    for (t, ((a, b), c)) in split
        .train
        .tasks
        .iter()
        .zip(&split.val.tasks)
        .zip(&split.test.tasks)
        .enumerate()
    {
        let x = Mat::vstack(&[&a.x, &b.x, &c.x])?;
        let y = Mat::vstack(&[&a.y, &b.y, &c.y])?;
        let file = task_file(&a.id);
        write_rows(&dir.join(&file), &x, y.data())?;
        tasks.push(ManifestTask {
            id: a.id.clone(),
            file,
            group: full.groups.as_ref().map(|g| g[t].clone()),
            partition: Some([a.n(), b.n(), c.n()]),
        });
    }
    let path = dir.join("manifest.json");
    write_json(
        &path,
        &Manifest {
            name: full.name.clone(),
            kind: manifest_kind(full.kind()),
            d: full.d,
            tasks,
            multiclass: None,
        },
    )?;
    Ok(path)
}
