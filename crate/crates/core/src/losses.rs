//! Per-task losses. Each loss is a per-instance mean plus the imbalance term `delta / sqrt(N_t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid_scalar, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    Logistic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default)]
    pub delta: f64,
}

impl LossConfig {
    pub fn squared() -> Self {
        LossConfig {
            kind: LossKind::Squared,
            delta: 0.0,
        }
    }

    pub fn logistic() -> Self {
        LossConfig {
            kind: LossKind::Logistic,
            delta: 0.0,
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.delta.is_finite() || self.delta < 0.0 {
            return Err(Error::Validation(format!(
                "delta must be finite and non-negative, got {}",
                self.delta
            )));
        }
        Ok(())
    }

    /// The additive imbalance term for a task with `n` training instances.
    pub fn imbalance(&self, n: usize) -> f64 {
        if self.delta == 0.0 {
            0.0
        } else {
            self.delta / (n as f64).sqrt()
        }
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Loss of raw scores against targets plus its gradient with respect to the scores.
///
/// `imbalance_n` is the instance count used in the `delta` term; during mini-batch training it is
/// the task's full training size rather than the batch size.
pub(crate) fn score_loss(
    scores: &[f64],
    y: &[f64],
    cfg: &LossConfig,
    imbalance_n: usize,
    grad: Option<&mut [f64]>,
) -> f64 {
    debug_assert_eq!(scores.len(), y.len());
    let n = scores.len() as f64;
    let mut total = 0.0;
    match cfg.kind {
        LossKind::Squared => {
            for (s, t) in scores.iter().zip(y) {
                let r = t - s;
                total += r * r;
            }
            if let Some(g) = grad {
                for ((gi, s), t) in g.iter_mut().zip(scores).zip(y) {
                    *gi = -2.0 * (t - s) / n;
                }
            }
        }
        LossKind::Logistic => {
            // -[y log σ(s) + (1-y) log(1-σ(s))] = softplus(s) - y s
            for (s, t) in scores.iter().zip(y) {
                total += softplus(*s) - t * s;
            }
            if let Some(g) = grad {
                for ((gi, s), t) in g.iter_mut().zip(scores).zip(y) {
                    *gi = (sigmoid_scalar(*s) - t) / n;
                }
            }
        }
    }
    total / n + cfg.imbalance(imbalance_n)
}

fn check_shapes(op: &'static str, w: &Mat, x: &Mat, y: &Mat) -> Result<()> {
    if w.cols() != 1 || y.cols() != 1 || x.cols() != w.rows() || x.rows() != y.rows() {
        return Err(Error::dim(
            op,
            format!("w {:?}, X {:?}, y {:?}", w.shape(), x.shape(), y.shape()),
        ));
    }
    if x.rows() == 0 {
        return Err(Error::Validation(format!("{op}: task has no instances")));
    }
    Ok(())
}

/// `(1/N)‖y − Xw‖² + δ/√N`.
pub fn squared_loss(w: &Mat, x: &Mat, y: &Mat, cfg: &LossConfig) -> Result<f64> {
    check_shapes("squared_loss", w, x, y)?;
    let scores = x.dot(w);
    let cfg = LossConfig {
        kind: LossKind::Squared,
        ..*cfg
    };
    Ok(score_loss(scores.data(), y.data(), &cfg, x.rows(), None))
}

/// Mean negative log-likelihood of binary labels under `σ(Xw)`, plus `δ/√N`.
pub fn logistic_loss(w: &Mat, x: &Mat, y: &Mat, cfg: &LossConfig) -> Result<f64> {
    check_shapes("logistic_loss", w, x, y)?;
    check_binary(y.data())?;
    let scores = x.dot(w);
    let cfg = LossConfig {
        kind: LossKind::Logistic,
        ..*cfg
    };
    Ok(score_loss(scores.data(), y.data(), &cfg, x.rows(), None))
}

pub(crate) fn check_binary(y: &[f64]) -> Result<()> {
    if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!(
            "label {} at row {i} is not binary",
            y[i]
        )));
    }
    Ok(())
}
