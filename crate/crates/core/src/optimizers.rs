//! First-order optimizers with their step schedules, plus the mini-batch training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::MultiTaskDataset;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::objectives::{evaluate, project, task_refs, Gradients, Hyperparams, ModelParams, ObjectiveId, TaskRef};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    /// SGD momentum.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// RMSProp accumulator decay.
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_rho() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerSpec {
            kind,
            momentum: default_momentum(),
            rho: default_rho(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerSpec {
            momentum,
            ..Self::new(OptimizerKind::Sgd)
        }
    }

    pub fn rmsprop() -> Self {
        Self::new(OptimizerKind::Rmsprop)
    }

    pub fn adam() -> Self {
        Self::new(OptimizerKind::Adam)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &'static str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(name, format!("must lie in [0, 1), got {v}")))
            }
        };
        unit("momentum", self.momentum)?;
        unit("rho", self.rho)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("eps", "must be positive"));
        }
        Ok(())
    }
}

/// Per-tensor buffers for one optimizer. `first` holds momentum or Adam's first moment, `second`
/// the squared-gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub spec: OptimizerSpec,
    pub first: Vec<Mat>,
    pub second: Vec<Mat>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(spec: OptimizerSpec, params: &ModelParams) -> Self {
        let zeros: Vec<Mat> = params.tensors().iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect();
        OptimizerState {
            spec,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    /// One update of every tensor not marked in `frozen`. Projection is the caller's business.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64, frozen: &[bool]) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
        }
        let gs = grads.tensors();
        let mut ps = params.tensors_mut();
        if gs.len() != ps.len() || ps.len() != self.first.len() {
            return Err(Error::dim("optimizer step", "parameter/gradient tensor count differs"));
        }
        for (i, (p, g)) in ps.iter().zip(&gs).enumerate() {
            if !p.same_shape(g) || !p.same_shape(&self.first[i]) {
                return Err(Error::dim(
                    "optimizer step",
                    format!("tensor {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.steps += 1;
        let spec = &self.spec;
        let t = self.steps as i32;
        for (i, (p, g)) in ps.iter_mut().zip(gs).enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let (p, g) = (p.data_mut(), g.data());
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            match spec.kind {
                OptimizerKind::Sgd => {
                    for j in 0..p.len() {
                        m[j] = spec.momentum * m[j] + g[j];
                        p[j] -= lr * m[j];
                    }
                }
                OptimizerKind::Rmsprop => {
                    for j in 0..p.len() {
                        v[j] = spec.rho * v[j] + (1.0 - spec.rho) * g[j] * g[j];
                        p[j] -= lr * g[j] / (v[j].sqrt() + spec.eps);
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - spec.beta1.powi(t);
                    let c2 = 1.0 - spec.beta2.powi(t);
                    for j in 0..p.len() {
                        m[j] = spec.beta1 * m[j] + (1.0 - spec.beta1) * g[j];
                        v[j] = spec.beta2 * v[j] + (1.0 - spec.beta2) * g[j] * g[j];
                        p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + spec.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Step-decay learning rate plus the linear warm-up of `alpha` and `gamma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    /// Decay period in steps; ignored when `milestones` is non-empty.
    #[serde(default)]
    pub decay_every: Option<usize>,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default)]
    pub ramp_steps: usize,
}

fn default_decay_factor() -> f64 {
    1.0
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Schedule {
            base_lr: lr,
            decay_factor: 1.0,
            decay_every: None,
            milestones: Vec::new(),
            ramp_steps: 0,
        }
    }

    pub fn step_decay(base_lr: f64, factor: f64, every: usize) -> Self {
        Schedule {
            decay_factor: factor,
            decay_every: Some(every),
            ..Self::constant(base_lr)
        }
    }

    pub fn with_ramp(mut self, steps: usize) -> Self {
        self.ramp_steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", format!("must be positive, got {}", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay_factor", format!("must lie in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_every == Some(0) {
            return Err(Error::config("decay_every", "must be >= 1"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("milestones", "must be strictly increasing"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let decays = if !self.milestones.is_empty() {
            self.milestones.iter().filter(|&&m| step >= m).count()
        } else {
            match self.decay_every {
                Some(every) => step / every,
                None => 0,
            }
        };
        self.base_lr * self.decay_factor.powi(decays as i32)
    }

    /// Linear interpolation from 0 to `target` over `ramp_steps`, then flat.
    pub fn ramp_at(&self, step: usize, target: f64) -> f64 {
        if self.ramp_steps == 0 || step >= self.ramp_steps {
            target
        } else {
            target * step as f64 / self.ramp_steps as f64
        }
    }
}

/// Everything the training loop needs besides the data and the starting point.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: ObjectiveId,
    pub loss: LossConfig,
    pub hp: Hyperparams,
    pub optimizer: OptimizerSpec,
    pub schedule: Schedule,
    pub max_steps: usize,
    /// Rows drawn per task per step, clamped to each task's size.
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between snapshots; `None` means once per epoch.
    pub eval_every: Option<usize>,
    /// Tensor names (see [`ModelParams::tensor_names`]) that receive no updates.
    pub frozen: Vec<String>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.hp.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::config("eval_every", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub train_objective: f64,
    /// Empty in CSV when no validator was given.
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Best-on-validation snapshot, or the final parameters without a validator.
    pub params: ModelParams,
    pub final_params: ModelParams,
    pub best_step: usize,
    pub history: Vec<HistoryRow>,
}

pub fn write_history_csv(history: &[HistoryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for row in history {
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Validation score of a parameter set; lower is better.
pub type Validator<'a> = dyn Fn(&ModelParams) -> Result<f64> + 'a;

struct Batcher {
    order: Vec<Vec<usize>>,
    cursor: Vec<usize>,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let order = sizes
            .iter()
            .map(|&n| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                idx
            })
            .collect();
        Batcher {
            order,
            cursor: vec![0; sizes.len()],
            rng,
        }
    }

    /// Next `b` indices of task `t`, reshuffling when the pass runs out.
    fn next(&mut self, t: usize, b: usize) -> Vec<usize> {
        let n = self.order[t].len();
        if b >= n {
            return (0..n).collect();
        }
        if self.cursor[t] + b > n {
            self.order[t].shuffle(&mut self.rng);
            self.cursor[t] = 0;
        }
        let c = self.cursor[t];
        self.cursor[t] += b;
        self.order[t][c..c + b].to_vec()
    }
}

fn frozen_mask(params: &ModelParams, frozen: &[String]) -> Result<Vec<bool>> {
    let names = params.tensor_names();
    if let Some(bad) = frozen.iter().find(|f| !names.contains(f)) {
        return Err(Error::config("frozen", format!("no tensor named {bad} (have {})", names.join(", "))));
    }
    Ok(names.iter().map(|n| frozen.contains(n)).collect())
}

/// Mini-batch training on per-task batches. The learning rate follows `cfg.schedule` and the
/// transfer weights ramp up over `ramp_steps`. Deterministic for a fixed `cfg.seed`.
pub fn train(
    init: ModelParams,
    data: &MultiTaskDataset,
    validator: Option<&Validator<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mask = frozen_mask(&init, &cfg.frozen)?;
    let sizes = data.sizes();
    let batch: Vec<usize> = sizes.iter().map(|&n| cfg.batch_size.min(n)).collect();
    let full_batch = batch.iter().zip(&sizes).all(|(b, n)| b == n);
    let epoch = sizes
        .iter()
        .zip(&batch)
        .map(|(n, b)| n.div_ceil(*b))
        .max()
        .unwrap_or(1);
    let every = cfg.eval_every.unwrap_or(epoch);
    let full = task_refs(data);

    let mut params = init;
    project(&mut params, &cfg.hp);
    let mut state = OptimizerState::new(cfg.optimizer.clone(), &params);
    let mut batcher = Batcher::new(&sizes, cfg.seed);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for step in 0..cfg.max_steps {
        let hp = ramped(cfg, step);
        let lr = cfg.schedule.lr_at(step);
        let (value, grads) = if full_batch {
            evaluate(cfg.objective, &params, &full, &cfg.loss, &hp, true)?
        } else {
            let rows: Vec<(Mat, Mat)> = data
                .tasks
                .iter()
                .enumerate()
                .map(|(t, task)| {
                    let idx = batcher.next(t, batch[t]);
                    (task.x.select_rows(&idx), task.y.select_rows(&idx))
                })
                .collect();
            let refs: Vec<TaskRef<'_>> = rows
                .iter()
                .zip(&sizes)
                .map(|((x, y), &n)| TaskRef { x, y, imbalance_n: n })
                .collect();
            evaluate(cfg.objective, &params, &refs, &cfg.loss, &hp, true)?
        };
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                msg: format!("objective is {value}"),
            });
        }
        let grads = grads.expect("gradient requested");
        state.step(&mut params, &grads, lr, &mask)?;
        project(&mut params, &cfg.hp);
        if params.tensors().iter().any(|m| !m.is_finite()) {
            return Err(Error::Diverged {
                step,
                msg: "parameters became non-finite".into(),
            });
        }

        let done = step + 1;
        if done % every == 0 || done == cfg.max_steps {
            let snapshot_hp = ramped(cfg, done);
            let (train_objective, _) = evaluate(cfg.objective, &params, &full, &cfg.loss, &snapshot_hp, false)?;
            if !train_objective.is_finite() {
                return Err(Error::Diverged {
                    step,
                    msg: format!("training objective is {train_objective}"),
                });
            }
            let val_metric = match validator {
                Some(v) => Some(v(&params)?),
                None => None,
            };
            if let Some(m) = val_metric {
                let better = match &best {
                    None => true,
                    Some((b, _, _)) => m < *b || (b.is_nan() && !m.is_nan()),
                };
                if better {
                    best = Some((m, done, params.clone()));
                }
            }
            history.push(HistoryRow {
                step: done,
                lr,
                alpha: snapshot_hp.alpha,
                gamma: snapshot_hp.gamma,
                train_objective,
                val_metric,
            });
        }
    }

    let (params_out, best_step) = match best {
        Some((_, s, p)) => (p, s),
        None => (params.clone(), cfg.max_steps),
    };
    Ok(TrainOutcome {
        params: params_out,
        final_params: params,
        best_step,
        history,
    })
}

fn ramped(cfg: &TrainConfig, step: usize) -> Hyperparams {
    Hyperparams {
        alpha: cfg.schedule.ramp_at(step, cfg.hp.alpha),
        gamma: cfg.schedule.ramp_at(step, cfg.hp.gamma),
        ..cfg.hp.clone()
    }
}

/// Writes history rows to any sink; handy for printing.
pub fn write_history<W: Write>(history: &[HistoryRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for row in history {
        w.serialize(row).map_err(|e| Error::Validation(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Validation(e.to_string()))
}
