//! Parameter update rules for one block `beta`.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use thiserror::Error;

/// Number of ridge escalations tried after the plain solve fails.
pub const MAX_RIDGE_ESCALATIONS: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("information matrix is singular even after ridge escalation")]
    Singular,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherConfig {
    pub lr: f64,
    /// Scale the step by `lr / t^(1/4)`.
    pub adjust: bool,
    /// Base ridge, as a multiple of the mean diagonal of the information.
    pub ridge: f64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            adjust: true,
            ridge: 1e-8,
        }
    }
}

impl FisherConfig {
    /// Step multiplier at outer iteration `t >= 1`.
    pub fn step_scale(&self, t: u64) -> f64 {
        if self.adjust {
            self.lr / (t as f64).powf(0.25)
        } else {
            1.0
        }
    }
}

/// Result of one Fisher scoring step.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherStep {
    pub beta: Array1<f64>,
    /// How many ridge escalations the solve needed (0 = plain solve).
    pub ridge_escalations: u32,
}

/// `beta + s * I^{-1} U` with `s = lr / t^(1/4)` when adjusting, else 1.
///
/// The system is solved by Cholesky factorisation. If that fails, a ridge
/// `ridge * mean(diag I)` is added to the diagonal and grown tenfold up to
/// [`MAX_RIDGE_ESCALATIONS`] times.
pub fn fisher_step(
    beta: &Array1<f64>,
    score: &Array1<f64>,
    information: &Array2<f64>,
    t: u64,
    cfg: &FisherConfig,
) -> Result<FisherStep, OptimizerError> {
    let k = beta.len();
    if score.len() != k || information.dim() != (k, k) {
        return Err(OptimizerError::Dimension(format!(
            "beta {k}, score {}, information {:?}",
            score.len(),
            information.dim()
        )));
    }
    let (direction, ridge_escalations) = solve_spd(information, score, cfg.ridge)?;
    let scale = cfg.step_scale(t.max(1));
    let mut next = beta.clone();
    for (b, dir) in next.iter_mut().zip(direction.iter()) {
        *b += scale * dir;
    }
    Ok(FisherStep {
        beta: next,
        ridge_escalations,
    })
}

/// Solves `I x = U`, escalating a diagonal ridge on failure.
pub fn solve_spd(
    information: &Array2<f64>,
    rhs: &Array1<f64>,
    ridge: f64,
) -> Result<(Vec<f64>, u32), OptimizerError> {
    let k = rhs.len();
    let base = DMatrix::from_fn(k, k, |r, c| information[[r, c]]);
    let b = DVector::from_iterator(k, rhs.iter().copied());
    if let Some(x) = cholesky_solve(base.clone(), &b) {
        return Ok((x, 0));
    }
    let mean_diag = if k == 0 { 0.0 } else { base.diagonal().mean() };
    if !(mean_diag.is_finite() && mean_diag > 0.0) {
        return Err(OptimizerError::Singular);
    }
    let mut lambda = ridge * mean_diag;
    for escalation in 1..=MAX_RIDGE_ESCALATIONS {
        let mut m = base.clone();
        for d in 0..k {
            m[(d, d)] += lambda;
        }
        if let Some(x) = cholesky_solve(m, &b) {
            return Ok((x, escalation));
        }
        lambda *= 10.0;
    }
    Err(OptimizerError::Singular)
}

fn cholesky_solve(m: DMatrix<f64>, b: &DVector<f64>) -> Option<Vec<f64>> {
    let chol = m.cholesky()?;
    let x = chol.solve(b);
    x.iter()
        .all(|v| v.is_finite())
        .then(|| x.iter().copied().collect())
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Array1<f64>,
    pub v: Array1<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: Array1::zeros(len),
            v: Array1::zeros(len),
            t: 0,
        }
    }
}

/// One Adam step on `theta` for gradient `grad` (of the quantity being
/// minimised). Note the denominator is `sqrt(v_hat + eps)`.
pub fn adam_step(
    theta: &Array1<f64>,
    grad: &Array1<f64>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Array1<f64> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut out = theta.clone();
    for k in 0..theta.len() {
        let g = grad[k];
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        out[k] -= cfg.step_size * m_hat / (v_hat + cfg.eps).sqrt();
    }
    out
}

/// Reduce-on-plateau rule for Adam's step size, driven by the overall loss.
///
/// A loss counts as an improvement when it beats the best seen so far by a
/// relative margin of `threshold`; after more than `patience` iterations
/// without one the step size is multiplied by `factor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: u32,
    pub threshold: f64,
    pub(crate) best: f64,
    pub(crate) bad_iterations: u32,
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        Self::new(0.1, 10)
    }
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: u32) -> Self {
        Self {
            factor,
            patience,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad_iterations: 0,
        }
    }

    /// Feeds one loss value; returns the (possibly reduced) step size.
    pub fn observe(&mut self, loss: f64, step_size: f64) -> f64 {
        let improved = if self.best.is_finite() {
            loss < self.best - self.threshold * self.best.abs()
        } else {
            loss < self.best
        };
        if improved {
            self.best = loss;
            self.bad_iterations = 0;
            return step_size;
        }
        self.bad_iterations += 1;
        if self.bad_iterations > self.patience {
            self.bad_iterations = 0;
            step_size * self.factor
        } else {
            step_size
        }
    }
}

/// `|new - old| / (|new| + 0.1)`.
pub fn relative_loss_change(old: f64, new: f64) -> f64 {
    (new - old).abs() / (new.abs() + 0.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceConfig {
    pub epsilon: f64,
    pub maxit: u64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            maxit: 100,
        }
    }
}
