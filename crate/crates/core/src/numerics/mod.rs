//! Dense kernels shared by both branches: row softmax, row normalization,
//! clamped cross-entropy, Adam, and central-difference gradient checking.
//!
//! Everything here is a pure function of its arguments.

mod matrix;

pub use matrix::{dot, norm, Matrix};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_FLOOR, 1]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance used when checking that a prediction row lies on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// In-place max-subtracted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(Error::InvalidInput(
            "softmax input contains non-finite entries".into(),
        ));
    }
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    normalize_rows_in_place(&mut out)?;
    Ok(out)
}

pub(crate) fn normalize_rows_in_place(m: &mut Matrix) -> Result<()> {
    for i in 0..m.rows() {
        normalize_in_place(m.row_mut(i)).map_err(|_| Error::DegenerateRow { row: i })?;
    }
    Ok(())
}

pub(crate) fn normalize_in_place(row: &mut [f64]) -> Result<f64> {
    let n = norm(row);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateRow { row: 0 });
    }
    for v in row.iter_mut() {
        *v /= n;
    }
    Ok(n)
}

/// Cross-entropy target: a class index or a full target distribution.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Class(usize),
    Distribution(&'a [f64]),
}

impl From<usize> for Target<'_> {
    fn from(c: usize) -> Self {
        Target::Class(c)
    }
}

impl<'a> From<&'a [f64]> for Target<'a> {
    fn from(d: &'a [f64]) -> Self {
        Target::Distribution(d)
    }
}

pub fn cross_entropy<'a>(pred: &[f64], target: impl Into<Target<'a>>) -> Result<f64> {
    let sum: f64 = pred.iter().sum();
    if !sum.is_finite() || (sum - 1.0).abs() > SIMPLEX_TOL || pred.iter().any(|&p| p < -SIMPLEX_TOL)
    {
        return Err(Error::InvalidDistribution { sum });
    }
    let nll = |p: f64| -p.clamp(PROB_FLOOR, 1.0).ln();
    match target.into() {
        Target::Class(c) => {
            let p = *pred.get(c).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "target class {c} out of range for {} classes",
                    pred.len()
                ))
            })?;
            Ok(nll(p))
        }
        Target::Distribution(t) => {
            if t.len() != pred.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} classes", pred.len()),
                    actual: format!("{} classes", t.len()),
                });
            }
            Ok(t.iter()
                .zip(pred)
                .map(|(&w, &p)| if w == 0.0 { 0.0 } else { w * nll(p) })
                .sum())
        }
    }
}

/// Derivative of the clamped negative log-likelihood with respect to `p`.
#[inline]
pub(crate) fn nll_grad(p: f64) -> f64 {
    if p > PROB_FLOOR {
        -1.0 / p
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameters", param.len()),
            actual: format!(
                "grad {}, state {}/{}",
                grad.len(),
                state.m.len(),
                state.v.len()
            ),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Compares the analytic gradient returned by `loss_fn` at `params` with
/// central differences, coordinate by coordinate.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(
    mut loss_fn: F,
    params: &[f64],
    h: f64,
    tol: f64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    assert_eq!(
        analytic.len(),
        params.len(),
        "gradient length must match parameters"
    );
    let mut x = params.to_vec();
    let mut worst = (0.0f64, 0usize);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let (plus, _) = loss_fn(&x);
        x[i] = orig - h;
        let (minus, _) = loss_fn(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > worst.0 || rel.is_nan() {
            worst = (if rel.is_nan() { f64::INFINITY } else { rel }, i);
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        passed: worst.0 < tol,
    }
}
