//! Multi-task objectives and their exact gradients.
//!
//! Every model writes task parameters as columns of a `d x T` matrix, either directly (`W`),
//! factorized through shared bases (`W = LS`), or as the last layer of a feedforward stack on top
//! of learned features `Z`. The asymmetric models weight task `t`'s loss by `1 + α‖r_t‖₁` where
//! `r_t` is the task's outgoing-transfer row (`B` for inter-task transfer, `A` for task-to-feature
//! transfer), so tasks with high loss are pushed toward sparse outgoing transfer.
//!
//! Nonsmooth points use fixed subgradients: ReLU has derivative 0 at exactly 0 and `|x|` has
//! derivative `sign(x)` with `sign(0) = 0`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::MultiTaskDataset;
use crate::error::{Error, Result};
use crate::losses::{score_loss, LossConfig};
use crate::tensor::{frobenius_norm_sq, l1_norm, sign, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn apply_mat(self, m: &Mat) -> Mat {
        match self {
            Activation::Relu => m.map(|x| x.max(0.0)),
            Activation::Identity => m.clone(),
        }
    }
}

fn default_k() -> usize {
    1
}

/// Regularization weights and structural switches shared by all objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    /// Loss-weighted sparsity on outgoing transfer rows.
    #[serde(default)]
    pub alpha: f64,
    /// Weight of the reconstruction / inter-task penalty.
    #[serde(default)]
    pub gamma: f64,
    /// ℓ2 weight decay on bases / hidden layers / `W`.
    #[serde(default)]
    pub lambda: f64,
    /// ℓ1 on combination coefficients `S` (or the last layer).
    #[serde(default)]
    pub mu: f64,
    /// Optional ℓ1 on the bases `L` (first layer for deep models).
    #[serde(default)]
    pub l1_bases: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub hidden_activation: Activation,
    #[serde(default)]
    pub b_nonnegative: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha: 0.0,
            gamma: 0.0,
            lambda: 0.0,
            mu: 0.0,
            l1_bases: 0.0,
            k: 1,
            hidden_activation: Activation::Relu,
            b_nonnegative: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("l1_bases", self.l1_bases),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.k == 0 {
            return Err(Error::config("k", "latent dimension must be >= 1"));
        }
        Ok(())
    }
}

/// Shared bases `L` (d x k) and per-task coefficients `S` (k x T).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentFactorParams {
    pub l: Mat,
    pub s: Mat,
}

/// Task parameters `W` (d x T) with inter-task transfer graph `B` (T x T, zero diagonal).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterTaskParams {
    pub w: Mat,
    pub b: Mat,
}

/// Factorized parameters `LS` combined with an inter-task transfer graph `B`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentInterTaskParams {
    pub l: Mat,
    pub s: Mat,
    pub b: Mat,
}

/// One-hidden-layer network `Z = act(XL)`, outputs `ZS`, task-to-feature transfer `A` (T x k).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmtflParams {
    pub l: Mat,
    pub s: Mat,
    pub a: Mat,
}

/// Feedforward stack `W^(1) .. W^(L)` with a bias row per hidden layer, the feedback matrix `A`
/// (T x k, k = width of the last hidden layer) and an optional bias on the reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepParams {
    pub layers: Vec<Mat>,
    pub biases: Vec<Mat>,
    pub a: Mat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon_bias: Option<Mat>,
}

impl DeepParams {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn last(&self) -> &Mat {
        self.layers.last().expect("validated depth")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelParams {
    Linear { w: Mat },
    LatentFactor(LatentFactorParams),
    InterTask(InterTaskParams),
    LatentInterTask(LatentInterTaskParams),
    Amtfl(AmtflParams),
    Deep(DeepParams),
}

/// Gradients share the layout of the parameters they differentiate.
pub type Gradients = ModelParams;

impl ModelParams {
    /// Trainable matrices in a fixed order.
    pub fn tensors(&self) -> Vec<&Mat> {
        match self {
            ModelParams::Linear { w } => vec![w],
            ModelParams::LatentFactor(p) => vec![&p.l, &p.s],
            ModelParams::InterTask(p) => vec![&p.w, &p.b],
            ModelParams::LatentInterTask(p) => vec![&p.l, &p.s, &p.b],
            ModelParams::Amtfl(p) => vec![&p.l, &p.s, &p.a],
            ModelParams::Deep(p) => {
                let mut v: Vec<&Mat> = p.layers.iter().chain(&p.biases).collect();
                v.push(&p.a);
                v.extend(p.recon_bias.as_ref());
                v
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        match self {
            ModelParams::Linear { w } => vec![w],
            ModelParams::LatentFactor(p) => vec![&mut p.l, &mut p.s],
            ModelParams::InterTask(p) => vec![&mut p.w, &mut p.b],
            ModelParams::LatentInterTask(p) => vec![&mut p.l, &mut p.s, &mut p.b],
            ModelParams::Amtfl(p) => vec![&mut p.l, &mut p.s, &mut p.a],
            ModelParams::Deep(p) => {
                let mut v: Vec<&mut Mat> = p.layers.iter_mut().chain(p.biases.iter_mut()).collect();
                v.push(&mut p.a);
                v.extend(p.recon_bias.as_mut());
                v
            }
        }
    }

    /// Names matching [`ModelParams::tensors`], used for dumps.
    pub fn tensor_names(&self) -> Vec<String> {
        match self {
            ModelParams::Linear { .. } => vec!["W".into()],
            ModelParams::LatentFactor(_) => vec!["L".into(), "S".into()],
            ModelParams::InterTask(_) => vec!["W".into(), "B".into()],
            ModelParams::LatentInterTask(_) => vec!["L".into(), "S".into(), "B".into()],
            ModelParams::Amtfl(_) => vec!["L".into(), "S".into(), "A".into()],
            ModelParams::Deep(p) => {
                let mut v: Vec<String> = (1..=p.layers.len()).map(|l| format!("W{l}")).collect();
                v.extend((1..=p.biases.len()).map(|l| format!("b{l}")));
                v.push("A".into());
                if p.recon_bias.is_some() {
                    v.push("b_recon".into());
                }
                v
            }
        }
    }

    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for m in z.tensors_mut() {
            m.fill(0.0);
        }
        z
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|m| m.rows() * m.cols()).sum()
    }

    /// Task parameter matrix for linear / factorized models (`W` or `LS`).
    pub fn task_matrix(&self) -> Option<Mat> {
        match self {
            ModelParams::Linear { w } => Some(w.clone()),
            ModelParams::InterTask(p) => Some(p.w.clone()),
            ModelParams::LatentFactor(LatentFactorParams { l, s })
            | ModelParams::LatentInterTask(LatentInterTaskParams { l, s, .. })
            | ModelParams::Amtfl(AmtflParams { l, s, .. }) => Some(l.dot(s)),
            ModelParams::Deep(_) => None,
        }
    }

    /// Transfer graph `B` for inter-task models, `AS` for feature-transfer models.
    pub fn transfer_matrix(&self) -> Option<Mat> {
        match self {
            ModelParams::InterTask(p) => Some(p.b.clone()),
            ModelParams::LatentInterTask(p) => Some(p.b.clone()),
            ModelParams::Amtfl(p) => Some(p.a.dot(&p.s)),
            ModelParams::Deep(p) => Some(p.a.dot(p.last())),
            _ => None,
        }
    }
}

/// Which objective to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveId {
    /// Independent linear models with ℓ2 decay.
    Stl,
    /// Shared latent bases with sparse coefficients.
    Gomtl,
    /// Inter-task asymmetric transfer on `W`.
    Amtl,
    /// Inter-task transfer on factorized `LS`.
    AmtlGomtl,
    /// Shallow asymmetric task-to-feature transfer.
    Amtfl,
    /// Asymmetric feature transfer at the penultimate layer of a deep stack.
    DeepAmtfl,
    /// Deep stack with balanced per-task losses and no transfer terms.
    Mtnn,
}

impl ObjectiveId {
    pub const ALL: [ObjectiveId; 7] = [
        ObjectiveId::Stl,
        ObjectiveId::Gomtl,
        ObjectiveId::Amtl,
        ObjectiveId::AmtlGomtl,
        ObjectiveId::Amtfl,
        ObjectiveId::DeepAmtfl,
        ObjectiveId::Mtnn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveId::Stl => "stl",
            ObjectiveId::Gomtl => "gomtl",
            ObjectiveId::Amtl => "amtl",
            ObjectiveId::AmtlGomtl => "amtl_gomtl",
            ObjectiveId::Amtfl => "amtfl",
            ObjectiveId::DeepAmtfl => "deep_amtfl",
            ObjectiveId::Mtnn => "mtnn",
        }
    }
}

impl fmt::Display for ObjectiveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveId::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::UnknownObjective(s.to_string()))
    }
}

/// A task's rows as seen by an objective. `imbalance_n` feeds the `δ/√N_t` term and stays the
/// full training size when the rows are a mini-batch.
#[derive(Clone, Copy, Debug)]
pub struct TaskRef<'a> {
    pub x: &'a Mat,
    pub y: &'a Mat,
    pub imbalance_n: usize,
}

pub fn task_refs(data: &MultiTaskDataset) -> Vec<TaskRef<'_>> {
    data.tasks
        .iter()
        .map(|t| TaskRef {
            x: &t.x,
            y: &t.y,
            imbalance_n: t.n(),
        })
        .collect()
}

// ---------------------------------------------------------------------------------------------
// validation

fn expect_shape(what: &str, m: &Mat, shape: (usize, usize)) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::dim(
            "objective",
            format!("{what} is {:?}, expected {shape:?}", m.shape()),
        ));
    }
    Ok(())
}

fn check_tasks(tasks: &[TaskRef<'_>], d: usize) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Validation("no tasks".into()));
    }
    for (t, task) in tasks.iter().enumerate() {
        if task.x.cols() != d || task.y.cols() != 1 || task.y.rows() != task.x.rows() {
            return Err(Error::dim(
                "objective",
                format!("task {t}: X {:?}, y {:?}, expected d={d}", task.x.shape(), task.y.shape()),
            ));
        }
        if task.x.rows() == 0 {
            return Err(Error::Validation(format!("task {t} has no instances")));
        }
    }
    Ok(())
}

fn check_transfer_graph(b: &Mat, t: usize, nonneg: bool) -> Result<()> {
    expect_shape("B", b, (t, t))?;
    if let Some(i) = (0..t).find(|&i| b.get(i, i) != 0.0) {
        return Err(Error::Validation(format!("B[{i},{i}] = {} must be 0", b.get(i, i))));
    }
    if nonneg {
        if let Some(pos) = b.data().iter().position(|&v| v < 0.0) {
            return Err(Error::Validation(format!(
                "B[{},{}] is negative under the nonnegativity constraint",
                pos / t,
                pos % t
            )));
        }
    }
    Ok(())
}

fn check_deep(p: &DeepParams, d: usize, t: usize) -> Result<usize> {
    let depth = p.layers.len();
    if depth < 2 {
        return Err(Error::Validation(format!(
            "deep model needs at least 2 layers, got {depth}"
        )));
    }
    if p.biases.len() != depth - 1 {
        return Err(Error::Validation(format!(
            "{} hidden biases for {} hidden layers",
            p.biases.len(),
            depth - 1
        )));
    }
    let mut width = d;
    for (l, w) in p.layers.iter().enumerate() {
        if w.rows() != width {
            return Err(Error::dim(
                "objective",
                format!("layer {} has {} inputs, expected {width}", l + 1, w.rows()),
            ));
        }
        if l + 1 < depth {
            expect_shape(&format!("bias {}", l + 1), &p.biases[l], (1, w.cols()))?;
        }
        width = w.cols();
    }
    if width != t {
        return Err(Error::dim(
            "objective",
            format!("last layer has {width} outputs for {t} tasks"),
        ));
    }
    let k = p.layers[depth - 1].rows();
    expect_shape("A", &p.a, (t, k))?;
    if let Some(b) = &p.recon_bias {
        expect_shape("reconstruction bias", b, (1, k))?;
    }
    Ok(k)
}

// ---------------------------------------------------------------------------------------------
// shared pieces

fn row_l1(m: &Mat, i: usize) -> f64 {
    l1_norm(m.row(i))
}

/// Adds `scale * sign(m)` to `g`.
fn add_sign(g: &mut Mat, m: &Mat, scale: f64) {
    if scale == 0.0 {
        return;
    }
    for (gi, v) in g.data_mut().iter_mut().zip(m.data()) {
        *gi += scale * sign(*v);
    }
}

/// Adds `scale * sign(m[row, :])` to `g[row, :]`.
fn add_row_sign(g: &mut Mat, m: &Mat, row: usize, scale: f64) {
    if scale == 0.0 {
        return;
    }
    let cols = m.cols();
    for j in 0..cols {
        let v = g.get(row, j) + scale * sign(m.get(row, j));
        g.set(row, j, v);
    }
}

/// Scores `X w_t` for column `t` of `w`.
fn column_scores(x: &Mat, w: &Mat, t: usize) -> Vec<f64> {
    let d = x.cols();
    (0..x.rows())
        .map(|i| {
            let row = x.row(i);
            (0..d).map(|j| row[j] * w.get(j, t)).sum()
        })
        .collect()
}

/// `g[:, t] += c * Xᵀ r`.
fn add_column_grad(g: &mut Mat, x: &Mat, r: &[f64], t: usize, c: f64) {
    for (i, &ri) in r.iter().enumerate() {
        let coef = c * ri;
        if coef == 0.0 {
            continue;
        }
        for (j, xv) in x.row(i).iter().enumerate() {
            let v = g.get(j, t) + coef * xv;
            g.set(j, t, v);
        }
    }
}

/// Per-task losses of linear task columns `w` (d x T), accumulating `Σ c_t ∂ℓ_t/∂W` into `grad`.
fn linear_losses(
    w: &Mat,
    tasks: &[TaskRef<'_>],
    cfg: &LossConfig,
    weights: &[f64],
    mut grad: Option<&mut Mat>,
) -> Vec<f64> {
    let mut losses = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let scores = column_scores(task.x, w, t);
        let mut g = vec![0.0; scores.len()];
        let want = grad.is_some();
        let l = score_loss(
            &scores,
            task.y.data(),
            cfg,
            task.imbalance_n,
            if want { Some(&mut g) } else { None },
        );
        if let Some(gw) = grad.as_deref_mut() {
            add_column_grad(gw, task.x, &g, t, weights[t]);
        }
        losses.push(l);
    }
    losses
}

/// `γ‖W − WB‖²` with optional gradients with respect to `W` and `B`.
fn intertask_penalty(w: &Mat, b: &Mat, gamma: f64, grads: Option<(&mut Mat, &mut Mat)>) -> f64 {
    if gamma == 0.0 {
        return 0.0;
    }
    let diff = w.sub(&w.dot(b));
    if let Some((gw, gb)) = grads {
        // ∂/∂W = 2γ (D − D Bᵀ), ∂/∂B = −2γ Wᵀ D
        gw.axpy(2.0 * gamma, &diff.sub(&diff.dot_t(b)));
        gb.axpy(-2.0 * gamma, &w.t_dot(&diff));
    }
    gamma * frobenius_norm_sq(&diff)
}

fn zero_diagonal(m: &mut Mat) {
    for i in 0..m.rows().min(m.cols()) {
        m.set(i, i, 0.0);
    }
}

fn outgoing_weights(transfer: Option<&Mat>, alpha: f64, t: usize) -> Vec<f64> {
    match transfer {
        Some(r) if alpha != 0.0 => (0..t).map(|i| 1.0 + alpha * row_l1(r, i)).collect(),
        _ => vec![1.0; t],
    }
}

/// Adds `α ℓ_t sign(r_t)` to each transfer row gradient.
fn add_outgoing_grad(g: &mut Mat, transfer: &Mat, losses: &[f64], alpha: f64) {
    for (t, &l) in losses.iter().enumerate() {
        add_row_sign(g, transfer, t, alpha * l);
    }
}

fn weighted_sum(weights: &[f64], losses: &[f64]) -> f64 {
    weights.iter().zip(losses).map(|(c, l)| c * l).sum()
}

// ---------------------------------------------------------------------------------------------
// objective families

fn stl(w: &Mat, tasks: &[TaskRef<'_>], cfg: &LossConfig, lambda: f64, want: bool) -> (f64, Option<Mat>) {
    let t = tasks.len();
    let mut g = want.then(|| Mat::zeros(w.rows(), w.cols()));
    let losses = linear_losses(w, tasks, cfg, &vec![1.0; t], g.as_mut());
    if let Some(g) = g.as_mut() {
        g.axpy(2.0 * lambda, w);
    }
    (losses.iter().sum::<f64>() + lambda * frobenius_norm_sq(w), g)
}

fn amtl(
    w: &Mat,
    b: &Mat,
    tasks: &[TaskRef<'_>],
    cfg: &LossConfig,
    hp: &Hyperparams,
    want: bool,
) -> (f64, Option<(Mat, Mat)>) {
    let t = tasks.len();
    let weights = outgoing_weights(Some(b), hp.alpha, t);
    let mut gw = want.then(|| Mat::zeros(w.rows(), w.cols()));
    let losses = linear_losses(w, tasks, cfg, &weights, gw.as_mut());
    let mut value = weighted_sum(&weights, &losses);
    match gw {
        Some(mut gw) => {
            let mut gb = Mat::zeros(t, t);
            value += intertask_penalty(w, b, hp.gamma, Some((&mut gw, &mut gb)));
            add_outgoing_grad(&mut gb, b, &losses, hp.alpha);
            zero_diagonal(&mut gb);
            (value, Some((gw, gb)))
        }
        None => (value + intertask_penalty(w, b, hp.gamma, None), None),
    }
}

/// Factorized linear objective; `b = None` is GO-MTL, `Some` adds inter-task transfer on `LS`.
fn factorized(
    l: &Mat,
    s: &Mat,
    b: Option<&Mat>,
    tasks: &[TaskRef<'_>],
    cfg: &LossConfig,
    hp: &Hyperparams,
    want: bool,
) -> (f64, Option<(Mat, Mat, Option<Mat>)>) {
    let t = tasks.len();
    let w = l.dot(s);
    let weights = outgoing_weights(b, hp.alpha, t);
    let mut gw = want.then(|| Mat::zeros(w.rows(), w.cols()));
    let losses = linear_losses(&w, tasks, cfg, &weights, gw.as_mut());
    let mut value = weighted_sum(&weights, &losses)
        + hp.mu * s.l1()
        + hp.lambda * frobenius_norm_sq(l)
        + hp.l1_bases * l.l1();
    let mut gb = None;
    if let Some(b) = b {
        match gw.as_mut() {
            Some(gw) => {
                let mut g = Mat::zeros(t, t);
                value += intertask_penalty(&w, b, hp.gamma, Some((gw, &mut g)));
                add_outgoing_grad(&mut g, b, &losses, hp.alpha);
                zero_diagonal(&mut g);
                gb = Some(g);
            }
            None => value += intertask_penalty(&w, b, hp.gamma, None),
        }
    }
    let grads = gw.map(|gw| {
        let mut gl = gw.dot_t(s);
        gl.axpy(2.0 * hp.lambda, l);
        add_sign(&mut gl, l, hp.l1_bases);
        let mut gs = l.t_dot(&gw);
        add_sign(&mut gs, s, hp.mu);
        (gl, gs, gb)
    });
    (value, grads)
}

/// Shallow asymmetric feature transfer.
fn amtfl(
    p: &AmtflParams,
    tasks: &[TaskRef<'_>],
    cfg: &LossConfig,
    hp: &Hyperparams,
    want: bool,
) -> (f64, Option<AmtflParams>) {
    let act = hp.hidden_activation;
    let (l, s, a) = (&p.l, &p.s, &p.a);
    let t_count = tasks.len();
    let k = l.cols();
    let weights = outgoing_weights(Some(a), hp.alpha, t_count);
    // Q = Z S A evaluated as Z (S A) to stay linear in T.
    let m = s.dot(a);

    let mut gl = Mat::zeros(l.rows(), k);
    let mut gs = Mat::zeros(k, t_count);
    let mut gm = Mat::zeros(k, k);
    let mut losses = Vec::with_capacity(t_count);
    let mut recon = 0.0;

    for (t, task) in tasks.iter().enumerate() {
        let pre = task.x.dot(l);
        let z = act.apply_mat(&pre);
        let scores = column_scores(&z, s, t);
        let mut g = vec![0.0; scores.len()];
        let loss = score_loss(&scores, task.y.data(), cfg, task.imbalance_n, want.then_some(&mut g[..]));
        losses.push(loss);

        let q = z.dot(&m);
        let r = z.zip_map(&q, |zv, qv| zv - act.apply(qv));
        if hp.gamma != 0.0 {
            recon += frobenius_norm_sq(&r);
        }
        if !want {
            continue;
        }
        let mut gz = Mat::zeros(z.rows(), k);
        if hp.gamma != 0.0 {
            let gq = r.zip_map(&q, |rv, qv| -2.0 * hp.gamma * rv * act.derivative(qv));
            gm.axpy(1.0, &z.t_dot(&gq));
            gz.axpy(2.0 * hp.gamma, &r);
            gz.axpy(1.0, &gq.dot_t(&m));
        }
        let c = weights[t];
        add_column_grad(&mut gs, &z, &g, t, c);
        for (i, &gi) in g.iter().enumerate() {
            let coef = c * gi;
            for j in 0..k {
                let v = gz.get(i, j) + coef * s.get(j, t);
                gz.set(i, j, v);
            }
        }
        let gp = gz.zip_map(&pre, |gv, pv| gv * act.derivative(pv));
        gl.axpy(1.0, &task.x.t_dot(&gp));
    }

    let value = weighted_sum(&weights, &losses)
        + hp.mu * s.l1()
        + hp.gamma * recon
        + hp.lambda * frobenius_norm_sq(l)
        + hp.l1_bases * l.l1();
    if !want {
        return (value, None);
    }
    gs.axpy(1.0, &gm.dot_t(a));
    add_sign(&mut gs, s, hp.mu);
    let mut ga = s.t_dot(&gm);
    add_outgoing_grad(&mut ga, a, &losses, hp.alpha);
    gl.axpy(2.0 * hp.lambda, l);
    add_sign(&mut gl, l, hp.l1_bases);
    (value, Some(AmtflParams { l: gl, s: gs, a: ga }))
}

struct Forward {
    /// Pre-activations of each hidden layer.
    pre: Vec<Mat>,
    /// Inputs of each layer: `X`, then hidden activations; the last entry is `Z`.
    inputs: Vec<Mat>,
}

fn deep_forward(p: &DeepParams, x: &Mat, act: Activation) -> Forward {
    let hidden = p.layers.len() - 1;
    let mut pre = Vec::with_capacity(hidden);
    let mut inputs = Vec::with_capacity(hidden + 1);
    inputs.push(x.clone());
    for l in 0..hidden {
        let pl = inputs[l].dot(&p.layers[l]).add_row_broadcast(&p.biases[l]);
        inputs.push(act.apply_mat(&pl));
        pre.push(pl);
    }
    Forward { pre, inputs }
}

fn deep(
    p: &DeepParams,
    tasks: &[TaskRef<'_>],
    cfg: &LossConfig,
    hp: &Hyperparams,
    want: bool,
) -> (f64, Option<DeepParams>) {
    let act = hp.hidden_activation;
    let depth = p.layers.len();
    let hidden = depth - 1;
    let last = &p.layers[hidden];
    let k = last.rows();
    let t_count = tasks.len();
    let weights = outgoing_weights(Some(&p.a), hp.alpha, t_count);
    let m = last.dot(&p.a);

    let mut grads = want.then(|| {
        let mut g = p.clone();
        for m in g.layers.iter_mut().chain(g.biases.iter_mut()) {
            m.fill(0.0);
        }
        g.a.fill(0.0);
        if let Some(b) = g.recon_bias.as_mut() {
            b.fill(0.0);
        }
        g
    });
    let mut gm = Mat::zeros(k, k);
    let mut losses = Vec::with_capacity(t_count);
    let mut recon = 0.0;

    for (t, task) in tasks.iter().enumerate() {
        let fwd = deep_forward(p, task.x, act);
        let z = &fwd.inputs[hidden];
        let scores = column_scores(z, last, t);
        let mut g = vec![0.0; scores.len()];
        losses.push(score_loss(&scores, task.y.data(), cfg, task.imbalance_n, want.then_some(&mut g[..])));

        let mut q = z.dot(&m);
        if let Some(b) = &p.recon_bias {
            q = q.add_row_broadcast(b);
        }
        // R = σ(Z W^(L) A + b) − Z
        let r = q.zip_map(z, |qv, zv| act.apply(qv) - zv);
        if hp.gamma != 0.0 {
            recon += frobenius_norm_sq(&r);
        }
        let Some(gp) = grads.as_mut() else { continue };

        let mut gz = Mat::zeros(z.rows(), k);
        if hp.gamma != 0.0 {
            let gq = r.zip_map(&q, |rv, qv| 2.0 * hp.gamma * rv * act.derivative(qv));
            gm.axpy(1.0, &z.t_dot(&gq));
            if let Some(gb) = gp.recon_bias.as_mut() {
                gb.axpy(1.0, &gq.sum_rows());
            }
            gz.axpy(-2.0 * hp.gamma, &r);
            gz.axpy(1.0, &gq.dot_t(&m));
        }
        let c = weights[t];
        add_column_grad(&mut gp.layers[hidden], z, &g, t, c);
        for (i, &gi) in g.iter().enumerate() {
            let coef = c * gi;
            for j in 0..k {
                let v = gz.get(i, j) + coef * last.get(j, t);
                gz.set(i, j, v);
            }
        }
        let mut gh = gz;
        for l in (0..hidden).rev() {
            let gpre = gh.zip_map(&fwd.pre[l], |gv, pv| gv * act.derivative(pv));
            gp.layers[l].axpy(1.0, &fwd.inputs[l].t_dot(&gpre));
            gp.biases[l].axpy(1.0, &gpre.sum_rows());
            if l > 0 {
                gh = gpre.dot_t(&p.layers[l]);
            }
        }
    }

    let decay: f64 = p.layers[..hidden].iter().map(frobenius_norm_sq).sum();
    let value = weighted_sum(&weights, &losses)
        + hp.mu * last.l1()
        + hp.gamma * recon
        + hp.lambda * decay
        + hp.l1_bases * p.layers[0].l1();
    let Some(mut gp) = grads else {
        return (value, None);
    };
    gp.layers[hidden].axpy(1.0, &gm.dot_t(&p.a));
    add_sign(&mut gp.layers[hidden], last, hp.mu);
    gp.a.axpy(1.0, &last.t_dot(&gm));
    let a_copy = p.a.clone();
    add_outgoing_grad(&mut gp.a, &a_copy, &losses, hp.alpha);
    for l in 0..hidden {
        gp.layers[l].axpy(2.0 * hp.lambda, &p.layers[l]);
    }
    add_sign(&mut gp.layers[0], &p.layers[0], hp.l1_bases);
    (value, Some(gp))
}

// ---------------------------------------------------------------------------------------------
// public entry points

/// Objective value and (optionally) gradient for any objective / parameter pairing.
pub fn evaluate(
    objective: ObjectiveId,
    params: &ModelParams,
    tasks: &[TaskRef<'_>],
    cfg: &LossConfig,
    hp: &Hyperparams,
    want_grad: bool,
) -> Result<(f64, Option<Gradients>)> {
    cfg.validate()?;
    hp.validate()?;
    let t = tasks.len();
    let d = tasks.first().map(|x| x.x.cols()).unwrap_or(0);
    check_tasks(tasks, d)?;
    let mismatch = || {
        Error::Validation(format!(
            "objective {objective} cannot evaluate {} parameters",
            variant_name(params)
        ))
    };
    match (objective, params) {
        (ObjectiveId::Stl, ModelParams::Linear { w }) => {
            expect_shape("W", w, (d, t))?;
            let (v, g) = stl(w, tasks, cfg, hp.lambda, want_grad);
            Ok((v, g.map(|w| ModelParams::Linear { w })))
        }
        (ObjectiveId::Amtl, ModelParams::InterTask(p)) => {
            expect_shape("W", &p.w, (d, t))?;
            check_transfer_graph(&p.b, t, hp.b_nonnegative)?;
            let (v, g) = amtl(&p.w, &p.b, tasks, cfg, hp, want_grad);
            Ok((v, g.map(|(w, b)| ModelParams::InterTask(InterTaskParams { w, b }))))
        }
        (ObjectiveId::Gomtl, ModelParams::LatentFactor(p)) => {
            let k = p.l.cols();
            expect_shape("L", &p.l, (d, k))?;
            expect_shape("S", &p.s, (k, t))?;
            let (v, g) = factorized(&p.l, &p.s, None, tasks, cfg, hp, want_grad);
            Ok((v, g.map(|(l, s, _)| ModelParams::LatentFactor(LatentFactorParams { l, s }))))
        }
        (ObjectiveId::AmtlGomtl, ModelParams::LatentInterTask(p)) => {
            let k = p.l.cols();
            expect_shape("L", &p.l, (d, k))?;
            expect_shape("S", &p.s, (k, t))?;
            check_transfer_graph(&p.b, t, hp.b_nonnegative)?;
            let (v, g) = factorized(&p.l, &p.s, Some(&p.b), tasks, cfg, hp, want_grad);
            Ok((
                v,
                g.map(|(l, s, b)| {
                    ModelParams::LatentInterTask(LatentInterTaskParams {
                        l,
                        s,
                        b: b.expect("transfer gradient"),
                    })
                }),
            ))
        }
        (ObjectiveId::Amtfl, ModelParams::Amtfl(p)) => {
            let k = p.l.cols();
            expect_shape("L", &p.l, (d, k))?;
            expect_shape("S", &p.s, (k, t))?;
            expect_shape("A", &p.a, (t, k))?;
            let (v, g) = amtfl(p, tasks, cfg, hp, want_grad);
            Ok((v, g.map(ModelParams::Amtfl)))
        }
        (ObjectiveId::DeepAmtfl, ModelParams::Deep(p)) => {
            check_deep(p, d, t)?;
            let (v, g) = deep(p, tasks, cfg, hp, want_grad);
            Ok((v, g.map(ModelParams::Deep)))
        }
        (ObjectiveId::Mtnn, ModelParams::Deep(p)) => {
            check_deep(p, d, t)?;
            let hp = Hyperparams {
                alpha: 0.0,
                gamma: 0.0,
                ..hp.clone()
            };
            let (v, g) = deep(p, tasks, cfg, &hp, want_grad);
            Ok((v, g.map(ModelParams::Deep)))
        }
        _ => Err(mismatch()),
    }
}

fn variant_name(p: &ModelParams) -> &'static str {
    match p {
        ModelParams::Linear { .. } => "linear",
        ModelParams::LatentFactor(_) => "latent-factor",
        ModelParams::InterTask(_) => "inter-task",
        ModelParams::LatentInterTask(_) => "latent inter-task",
        ModelParams::Amtfl(_) => "feature-transfer",
        ModelParams::Deep(_) => "deep",
    }
}

pub fn objective(
    objective: ObjectiveId,
    params: &ModelParams,
    data: &MultiTaskDataset,
    cfg: &LossConfig,
    hp: &Hyperparams,
) -> Result<f64> {
    evaluate(objective, params, &task_refs(data), cfg, hp, false).map(|(v, _)| v)
}

/// Exact (sub)gradient of `objective` at `params`.
pub fn gradient(
    objective: ObjectiveId,
    params: &ModelParams,
    data: &MultiTaskDataset,
    cfg: &LossConfig,
    hp: &Hyperparams,
) -> Result<Gradients> {
    evaluate(objective, params, &task_refs(data), cfg, hp, true)
        .map(|(_, g)| g.expect("gradient requested"))
}

/// `Σ_t 𝓛(w_t) + λ‖W‖²` with no coupling between tasks.
pub fn eval_stl(w: &Mat, data: &MultiTaskDataset, cfg: &LossConfig, lambda: f64) -> Result<f64> {
    let hp = Hyperparams {
        lambda,
        ..Hyperparams::default()
    };
    objective(ObjectiveId::Stl, &ModelParams::Linear { w: w.clone() }, data, cfg, &hp)
}

pub fn eval_gomtl(p: &LatentFactorParams, data: &MultiTaskDataset, cfg: &LossConfig, hp: &Hyperparams) -> Result<f64> {
    objective(ObjectiveId::Gomtl, &ModelParams::LatentFactor(p.clone()), data, cfg, hp)
}

pub fn eval_amtl(p: &InterTaskParams, data: &MultiTaskDataset, cfg: &LossConfig, hp: &Hyperparams) -> Result<f64> {
    objective(ObjectiveId::Amtl, &ModelParams::InterTask(p.clone()), data, cfg, hp)
}

pub fn eval_amtl_gomtl(
    p: &LatentInterTaskParams,
    data: &MultiTaskDataset,
    cfg: &LossConfig,
    hp: &Hyperparams,
) -> Result<f64> {
    objective(ObjectiveId::AmtlGomtl, &ModelParams::LatentInterTask(p.clone()), data, cfg, hp)
}

pub fn eval_amtfl(p: &AmtflParams, data: &MultiTaskDataset, cfg: &LossConfig, hp: &Hyperparams) -> Result<f64> {
    objective(ObjectiveId::Amtfl, &ModelParams::Amtfl(p.clone()), data, cfg, hp)
}

pub fn eval_deep_amtfl(p: &DeepParams, data: &MultiTaskDataset, cfg: &LossConfig, hp: &Hyperparams) -> Result<f64> {
    objective(ObjectiveId::DeepAmtfl, &ModelParams::Deep(p.clone()), data, cfg, hp)
}

/// Deep objective without transfer terms (`α = γ = 0`).
pub fn eval_mtnn(p: &DeepParams, data: &MultiTaskDataset, cfg: &LossConfig, hp: &Hyperparams) -> Result<f64> {
    objective(ObjectiveId::Mtnn, &ModelParams::Deep(p.clone()), data, cfg, hp)
}

/// Feature parameterizations accepted by [`forward_features`].
#[derive(Clone, Copy, Debug)]
pub enum FeatureParams<'a> {
    Shallow(&'a AmtflParams),
    Deep(&'a DeepParams),
}

/// Latent features `Z`: `act(XL)` for the shallow model, the last hidden layer for deep stacks.
pub fn forward_features(x: &Mat, params: FeatureParams<'_>, hp: &Hyperparams) -> Result<Mat> {
    match params {
        FeatureParams::Shallow(p) => {
            let pre = x.matmul(&p.l)?;
            Ok(hp.hidden_activation.apply_mat(&pre))
        }
        FeatureParams::Deep(p) => {
            check_deep(p, x.cols(), p.last().cols())?;
            let mut fwd = deep_forward(p, x, hp.hidden_activation);
            Ok(fwd.inputs.pop().expect("non-empty"))
        }
    }
}

/// Raw scores (N x T) for every task on shared rows `x`.
pub fn predict(params: &ModelParams, x: &Mat, hp: &Hyperparams) -> Result<Mat> {
    match params {
        ModelParams::Linear { w } => x.matmul(w),
        ModelParams::InterTask(p) => x.matmul(&p.w),
        ModelParams::LatentFactor(LatentFactorParams { l, s })
        | ModelParams::LatentInterTask(LatentInterTaskParams { l, s, .. }) => x.matmul(&l.matmul(s)?),
        ModelParams::Amtfl(p) => forward_features(x, FeatureParams::Shallow(p), hp)?.matmul(&p.s),
        ModelParams::Deep(p) => forward_features(x, FeatureParams::Deep(p), hp)?.matmul(p.last()),
    }
}

/// Scores of task `t` only, on that task's own rows.
pub fn predict_task(params: &ModelParams, x: &Mat, t: usize, hp: &Hyperparams) -> Result<Vec<f64>> {
    let all = predict(params, x, hp)?;
    if t >= all.cols() {
        return Err(Error::dim("predict_task", format!("task {t} of {}", all.cols())));
    }
    Ok(all.col(t))
}

/// Implicit task-to-task transfer `AS`; entry `(s, t)` is transfer from task `s` to task `t`.
pub fn effective_transfer_matrix(a: &Mat, s: &Mat) -> Result<Mat> {
    a.matmul(s)
}

/// What to initialize: which parameterization plus the widths it needs.
#[derive(Clone, Debug, PartialEq)]
pub struct InitSpec {
    pub objective: ObjectiveId,
    pub d: usize,
    pub tasks: usize,
    pub k: usize,
    /// Hidden widths of deep models; empty means one hidden layer of width `k`.
    pub hidden: Vec<usize>,
    pub recon_bias: bool,
}

/// Gaussian initialization with the given standard deviation; biases and transfer graphs start
/// at zero apart from `A`, which is drawn like the weights.
pub fn init_params(spec: &InitSpec, std: f64, rng: &mut impl Rng) -> ModelParams {
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut draw = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| normal.sample(rng));
    let (d, t, k) = (spec.d, spec.tasks, spec.k);
    match spec.objective {
        ObjectiveId::Stl => ModelParams::Linear { w: draw(d, t) },
        ObjectiveId::Amtl => ModelParams::InterTask(InterTaskParams {
            w: draw(d, t),
            b: Mat::zeros(t, t),
        }),
        ObjectiveId::Gomtl => ModelParams::LatentFactor(LatentFactorParams {
            l: draw(d, k),
            s: draw(k, t),
        }),
        ObjectiveId::AmtlGomtl => ModelParams::LatentInterTask(LatentInterTaskParams {
            l: draw(d, k),
            s: draw(k, t),
            b: Mat::zeros(t, t),
        }),
        ObjectiveId::Amtfl => ModelParams::Amtfl(AmtflParams {
            l: draw(d, k),
            s: draw(k, t),
            a: draw(t, k),
        }),
        ObjectiveId::DeepAmtfl | ObjectiveId::Mtnn => {
            let hidden = if spec.hidden.is_empty() { vec![k] } else { spec.hidden.clone() };
            let mut layers = Vec::new();
            let mut biases = Vec::new();
            let mut width = d;
            for &h in &hidden {
                layers.push(draw(width, h));
                biases.push(Mat::zeros(1, h));
                width = h;
            }
            layers.push(draw(width, t));
            ModelParams::Deep(DeepParams {
                layers,
                biases,
                a: draw(t, width),
                recon_bias: spec.recon_bias.then(|| Mat::zeros(1, width)),
            })
        }
    }
}

/// Restores structural constraints after an update: zero diagonal on `B`, and `B ≥ 0` when asked.
pub fn project(params: &mut ModelParams, hp: &Hyperparams) {
    let b = match params {
        ModelParams::InterTask(p) => &mut p.b,
        ModelParams::LatentInterTask(p) => &mut p.b,
        _ => return,
    };
    zero_diagonal(b);
    if hp.b_nonnegative {
        b.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    }
}
