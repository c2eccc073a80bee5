//! Competing inverse-weight constructions: plain inversion, fixed and
//! adaptive truncation, Platt scaling, and dropping of extreme rows.

use crate::data::{Dataset, ScoreTable};
use crate::error::{Error, Result};

/// Default threshold for fixed truncation and dropping.
pub const DEFAULT_TRIM: f64 = 0.01;
/// Default grid resolution for adaptive truncation.
pub const DEFAULT_GRID_STEP: f64 = 0.001;
/// Default ridge penalty for Platt scaling.
pub const DEFAULT_PLATT_RIDGE: f64 = 1e-6;
/// Logits are clamped to this magnitude before Platt scaling.
pub const LOGIT_CLAMP: f64 = 36.0;

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrimMode {
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrimSpec {
    pub mode: TrimMode,
    pub c: f64,
    pub grid_step: f64,
}

fn check_threshold(c: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&c) {
        return Err(Error::range_msg(format!("threshold {c} is outside [0, 0.5]")));
    }
    Ok(())
}

/// Elementwise `1 / pi`.
pub fn invert_weights(scores: &ScoreTable, level: u32) -> Result<Vec<f64>> {
    scores
        .get(level)?
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if p > 0.0 {
                Ok(1.0 / p)
            } else {
                Err(Error::Domain(format!(
                    "cannot invert zero score pi{level} at row {}",
                    i + 1
                )))
            }
        })
        .collect()
}

fn clamp_inverse(p: f64, c: f64) -> f64 {
    1.0 / p.clamp(c, 1.0 - c)
}

/// Elementwise `1 / clamp(pi, c, 1 - c)`.
pub fn trim_fixed(scores: &ScoreTable, level: u32, c: f64) -> Result<Vec<f64>> {
    check_threshold(c)?;
    let pi = scores.get(level)?;
    if c == 0.0 {
        return invert_weights(scores, level);
    }
    Ok(pi.iter().map(|&p| clamp_inverse(p, c)).collect())
}

/// Result of the adaptive truncation search.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveTrim {
    pub spec: TrimSpec,
    pub criterion: f64,
    pub alpha1: Vec<f64>,
    pub alpha0: Vec<f64>,
}

/// Empirical risk of the truncated Riesz-representer estimate
/// `alpha_c(a, w) = (2a - 1) / clamp(pi(a | w), c, 1 - c)`:
/// `sum_i alpha_c(A_i, W_i)^2 - 2 {alpha_c(1, W_i) - alpha_c(0, W_i)}`.
pub fn adaptive_trim_criterion(treatment: &[u32], pi1: &[f64], pi0: &[f64], c: f64) -> f64 {
    treatment
        .iter()
        .zip(pi1.iter().zip(pi0))
        .map(|(&a, (&p1, &p0))| {
            let inv1 = 1.0 / p1.clamp(c, 1.0 - c);
            let inv0 = 1.0 / p0.clamp(c, 1.0 - c);
            let own = if a == 1 { inv1 } else { inv0 };
            own * own - 2.0 * (inv1 + inv0)
        })
        .sum()
}

/// Candidate thresholds `0, step, 2 step, ...` up to and including 0.5.
pub fn trim_grid(grid_step: f64) -> Result<Vec<f64>> {
    if !(grid_step.is_finite() && grid_step > 0.0 && grid_step <= 0.5) {
        return Err(Error::range_msg(format!(
            "grid step {grid_step} must lie in (0, 0.5]"
        )));
    }
    let steps = (0.5 / grid_step + 1e-9).floor() as usize;
    Ok((0..=steps).map(|k| (k as f64 * grid_step).min(0.5)).collect())
}

/// Choose the truncation threshold minimising [`adaptive_trim_criterion`]
/// over a grid on `[0, 0.5]`. Non-finite criterion values are skipped and
/// ties go to the smallest threshold.
pub fn trim_adaptive(data: &Dataset, scores: &ScoreTable, grid_step: f64) -> Result<AdaptiveTrim> {
    if !data.is_binary() || !scores.is_complementary() {
        return Err(Error::Precondition(
            "adaptive truncation needs binary treatment and complementary scores".into(),
        ));
    }
    if data.n() != scores.n() {
        return Err(Error::Shape("dataset and scores differ in row count".into()));
    }
    let pi1 = scores.get(1)?;
    let pi0 = scores.get(0)?;
    let mut best: Option<(f64, f64)> = None;
    for c in trim_grid(grid_step)? {
        let value = adaptive_trim_criterion(data.treatment(), pi1, pi0, c);
        if !value.is_finite() {
            continue;
        }
        if best.is_none_or(|(_, v)| value < v) {
            best = Some((c, value));
        }
    }
    let (c, criterion) = best.ok_or_else(|| {
        Error::Domain("adaptive truncation criterion is non-finite on the whole grid".into())
    })?;
    Ok(AdaptiveTrim {
        spec: TrimSpec {
            mode: TrimMode::Adaptive,
            c,
            grid_step,
        },
        criterion,
        alpha1: pi1.iter().map(|&p| clamp_inverse(p, c)).collect(),
        alpha0: pi0.iter().map(|&p| clamp_inverse(p, c)).collect(),
    })
}

/// Logistic recalibration `P(A = a0 | pi) = sigmoid(intercept + slope * logit(pi))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlattModel {
    pub intercept: f64,
    pub slope: f64,
    pub ridge: f64,
}

impl PlattModel {
    pub fn predict(&self, p: f64) -> f64 {
        sigmoid(self.intercept + self.slope * clamped_logit(p))
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn clamped_logit(p: f64) -> f64 {
    logit(p).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Penalised Newton-Raphson for a two-parameter logistic model. The
/// objective is the negative log-likelihood plus `ridge * slope^2`; the
/// intercept is not penalised.
fn fit_platt(x: &[f64], y: &[f64], ridge: f64) -> Result<(f64, f64)> {
    let (mut a, mut b) = (0.0_f64, 0.0_f64);
    for _ in 0..NEWTON_MAX_ITER {
        let (mut g0, mut g1) = (0.0, 2.0 * ridge * b);
        let (mut h00, mut h01, mut h11) = (0.0, 0.0, 2.0 * ridge);
        for (&xi, &yi) in x.iter().zip(y) {
            let p = sigmoid(a + b * xi);
            let r = p - yi;
            let v = p * (1.0 - p);
            g0 += r;
            g1 += r * xi;
            h00 += v;
            h01 += v * xi;
            h11 += v * xi * xi;
        }
        if g0.hypot(g1) <= NEWTON_TOL {
            return Ok((a, b));
        }
        let det = h00 * h11 - h01 * h01;
        let da = (h11 * g0 - h01 * g1) / det;
        let db = (h00 * g1 - h01 * g0) / det;
        if !(da.is_finite() && db.is_finite()) {
            return Err(Error::Convergence("Platt scaling: non-finite Newton step".into()));
        }
        a -= da;
        b -= db;
        // Gradient norm can stall slightly above the tolerance from rounding
        // in the sums; a vanishing step means we are there.
        if da.hypot(db) <= 1e-14 * (1.0 + a.hypot(b)) {
            return Ok((a, b));
        }
    }
    Err(Error::Convergence(format!(
        "Platt scaling: no convergence in {NEWTON_MAX_ITER} Newton iterations"
    )))
}

/// Every positive lies strictly on one side of every negative.
fn completely_separated(x: &[f64], y: &[f64]) -> bool {
    let range = |label: f64| {
        x.iter()
            .zip(y)
            .filter(|(_, &v)| v == label)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&xi, _)| {
                (lo.min(xi), hi.max(xi))
            })
    };
    let (lo1, hi1) = range(1.0);
    let (lo0, hi0) = range(0.0);
    hi0 < lo1 || hi1 < lo0
}

/// Fit Platt scaling for `level` and return inverse weights of the fitted
/// probabilities, truncated below by the smallest fitted probability among
/// rows with `A = level`.
pub fn platt_calibrate(
    data: &Dataset,
    scores: &ScoreTable,
    level: u32,
    ridge: f64,
) -> Result<(PlattModel, Vec<f64>)> {
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::range_msg(format!("ridge {ridge} must be nonnegative")));
    }
    if data.n() != scores.n() {
        return Err(Error::Shape("dataset and scores differ in row count".into()));
    }
    let pi = scores.get(level)?;
    let y: Vec<f64> = data
        .treatment()
        .iter()
        .map(|&a| if a == level { 1.0 } else { 0.0 })
        .collect();
    let in_arm = data.arm_size(level);
    if in_arm == 0 || in_arm == data.n() {
        return Err(Error::Precondition(format!(
            "Platt scaling needs rows both with and without treatment {level}"
        )));
    }
    let x: Vec<f64> = pi.iter().map(|&p| clamped_logit(p)).collect();
    if ridge == 0.0 && completely_separated(&x, &y) {
        return Err(Error::Convergence(
            "Platt scaling: classes are separated by the score, so the unpenalised MLE diverges"
                .into(),
        ));
    }
    let (intercept, slope) = fit_platt(&x, &y, ridge)?;
    let model = PlattModel {
        intercept,
        slope,
        ridge,
    };
    let fitted: Vec<f64> = x.iter().map(|&t| sigmoid(intercept + slope * t)).collect();
    let floor = fitted
        .iter()
        .zip(data.treatment())
        .filter(|(_, &a)| a == level)
        .map(|(&p, _)| p)
        .fold(f64::INFINITY, f64::min);
    let weights = fitted.iter().map(|&p| 1.0 / p.max(floor)).collect();
    Ok((model, weights))
}

/// `true` for rows whose treated score lies in `[c, 1 - c]`.
pub fn dropping_mask(scores: &ScoreTable, c: f64) -> Result<Vec<bool>> {
    check_threshold(c)?;
    Ok(scores
        .get(1)?
        .iter()
        .map(|&p| p >= c && p <= 1.0 - c)
        .collect())
}
