//! Average-treatment-effect estimators that accept any inverse-weight
//! construction: IPW, AIPW and TMLE, with plug-in influence-function
//! standard errors and Wald intervals.

use std::fmt;
use std::io::BufRead;

use crate::baseline::{logit, sigmoid};
use crate::data::{fmt_real, Dataset};
use crate::error::{Error, Result};
use crate::nuisance::PotentialOutcomes;

/// Standard normal 0.975 quantile.
pub const Z_975: f64 = 1.959963984540054;

const TMLE_TOL: f64 = 1e-10;
const TMLE_MAX_ITER: usize = 50;
/// Scaled outcome predictions are kept inside `[TMLE_CLAMP, 1 - TMLE_CLAMP]`.
pub const TMLE_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub method: String,
    pub psi: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub n: usize,
    pub eif_mean: f64,
}

impl fmt::Display for EstimateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "method={}", self.method)?;
        writeln!(f, "psi={}", fmt_real(self.psi))?;
        writeln!(f, "se={}", fmt_real(self.se))?;
        writeln!(f, "ci_lower={}", fmt_real(self.ci_lower))?;
        writeln!(f, "ci_upper={}", fmt_real(self.ci_upper))?;
        writeln!(f, "n={}", self.n)?;
        writeln!(f, "eif_mean={}", fmt_real(self.eif_mean))
    }
}

impl EstimateReport {
    /// Parse the `name=value` report format produced by `Display`.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut method = None;
        let mut reals = [None; 5];
        let mut n = None;
        const REALS: [&str; 5] = ["psi", "se", "ci_lower", "ci_upper", "eif_mean"];
        for (k, line) in reader.lines().enumerate() {
            let row = k + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                row,
                msg: format!("expected name=value, got `{line}`"),
            })?;
            match key {
                "method" => method = Some(value.to_owned()),
                "n" => {
                    n = Some(value.parse::<usize>().map_err(|_| Error::Parse {
                        row,
                        msg: format!("n = `{value}` is not a count"),
                    })?)
                }
                _ => {
                    let j = REALS.iter().position(|r| *r == key).ok_or_else(|| Error::Parse {
                        row,
                        msg: format!("unknown field `{key}`"),
                    })?;
                    let v: f64 = value.parse().map_err(|_| Error::Parse {
                        row,
                        msg: format!("{key} = `{value}` is not a number"),
                    })?;
                    reals[j] = Some(v);
                }
            }
        }
        let get = |j: usize| reals[j].ok_or_else(|| Error::MissingColumn(REALS[j].to_owned()));
        Ok(EstimateReport {
            method: method.ok_or_else(|| Error::MissingColumn("method".into()))?,
            psi: get(0)?,
            se: get(1)?,
            ci_lower: get(2)?,
            ci_upper: get(3)?,
            n: n.ok_or_else(|| Error::MissingColumn("n".into()))?,
            eif_mean: get(4)?,
        })
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lower <= truth && truth <= self.ci_upper
    }
}

/// Estimated influence-function values, one per row used.
#[derive(Debug, Clone, PartialEq)]
pub struct EifValues(pub Vec<f64>);

/// Sample standard deviation (denominator `n - 1`) of the influence values
/// and the Wald interval `psi -/+ z * se / sqrt(n)`.
pub fn eif_variance_ci(eif: &EifValues, psi: f64) -> Result<(f64, f64, f64)> {
    let n = eif.0.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 influence values, got {n}"
        )));
    }
    let mean = eif.0.iter().sum::<f64>() / n as f64;
    let var = eif.0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = var.sqrt();
    let half = Z_975 * se / (n as f64).sqrt();
    Ok((se, psi - half, psi + half))
}

fn report(method: &str, psi: f64, eif: EifValues) -> Result<EstimateReport> {
    let n = eif.0.len();
    let (se, ci_lower, ci_upper) = eif_variance_ci(&eif, psi)?;
    let eif_mean = eif.0.iter().sum::<f64>() / n as f64;
    Ok(EstimateReport {
        method: method.to_owned(),
        psi,
        se,
        ci_lower,
        ci_upper,
        n,
        eif_mean,
    })
}

/// `delta(a) = 1(a = 1) - 1(a = 0)`.
fn delta(a: u32) -> f64 {
    if a == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Rows kept after masking, after checking lengths, binary treatment and
/// that both arms survive.
fn active_rows(
    data: &Dataset,
    alpha1: &[f64],
    alpha0: &[f64],
    mask: Option<&[bool]>,
) -> Result<Vec<usize>> {
    let n = data.n();
    if alpha1.len() != n || alpha0.len() != n || mask.is_some_and(|m| m.len() != n) {
        return Err(Error::Shape(format!("weights and mask must have {n} entries")));
    }
    if !data.is_binary() {
        return Err(Error::Precondition("ATE estimators need binary treatment".into()));
    }
    if let Some(i) = alpha1.iter().chain(alpha0).position(|w| !w.is_finite()) {
        return Err(Error::Domain(format!("non-finite weight at position {}", i % n + 1)));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask.is_none_or(|m| m[i])).collect();
    for level in [0, 1] {
        if !rows.iter().any(|&i| data.treatment()[i] == level) {
            return Err(Error::EmptyArm(format!("no rows with treatment {level} after masking")));
        }
    }
    Ok(rows)
}

fn own_weight(a: u32, i: usize, alpha1: &[f64], alpha0: &[f64]) -> f64 {
    if a == 1 {
        alpha1[i]
    } else {
        alpha0[i]
    }
}

/// Augmented IPW estimate over the (optionally masked) rows:
/// mean of `mu(1,W) - mu(0,W) + delta(A) alpha(A|W) (Y - mu(A,W))`.
pub fn aipw_ate(
    data: &Dataset,
    mu: &PotentialOutcomes,
    alpha1: &[f64],
    alpha0: &[f64],
    mask: Option<&[bool]>,
) -> Result<EstimateReport> {
    aipw_ate_labeled("aipw", data, mu, alpha1, alpha0, mask)
}

pub fn aipw_ate_labeled(
    method: &str,
    data: &Dataset,
    mu: &PotentialOutcomes,
    alpha1: &[f64],
    alpha0: &[f64],
    mask: Option<&[bool]>,
) -> Result<EstimateReport> {
    if mu.n() != data.n() {
        return Err(Error::Shape("outcome predictions and dataset differ in length".into()));
    }
    let rows = active_rows(data, alpha1, alpha0, mask)?;
    let terms: Vec<f64> = rows
        .iter()
        .map(|&i| {
            let a = data.treatment()[i];
            let resid = data.outcome()[i] - mu.at(i, a);
            mu.mu1[i] - mu.mu0[i] + delta(a) * own_weight(a, i, alpha1, alpha0) * resid
        })
        .collect();
    let psi = terms.iter().sum::<f64>() / terms.len() as f64;
    let eif = EifValues(terms.iter().map(|t| t - psi).collect());
    report(method, psi, eif)
}

/// Horvitz-Thompson difference of weighted means.
pub fn ipw_ate(
    data: &Dataset,
    alpha1: &[f64],
    alpha0: &[f64],
    mask: Option<&[bool]>,
) -> Result<EstimateReport> {
    ipw_ate_labeled("ipw", data, alpha1, alpha0, mask)
}

pub fn ipw_ate_labeled(
    method: &str,
    data: &Dataset,
    alpha1: &[f64],
    alpha0: &[f64],
    mask: Option<&[bool]>,
) -> Result<EstimateReport> {
    let rows = active_rows(data, alpha1, alpha0, mask)?;
    let terms: Vec<f64> = rows
        .iter()
        .map(|&i| {
            let a = data.treatment()[i];
            delta(a) * own_weight(a, i, alpha1, alpha0) * data.outcome()[i]
        })
        .collect();
    let psi = terms.iter().sum::<f64>() / terms.len() as f64;
    let eif = EifValues(terms.iter().map(|t| t - psi).collect());
    report(method, psi, eif)
}

/// TMLE output together with the fluctuation diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TmleEstimate {
    pub report: EstimateReport,
    pub epsilon: f64,
    /// Mean of `H(A,W) (Y_scaled - mu_star(A,W))` after fluctuation.
    pub score: f64,
    pub iterations: usize,
}

/// Targeted maximum likelihood with a logistic fluctuation along the clever
/// covariate `H(A,W) = delta(A) alpha(A|W)`.
///
/// The outcome is rescaled to `[0, 1]` by its sample range, scaled initial
/// predictions are clamped to `[1e-6, 1 - 1e-6]`, and the fluctuation
/// parameter solves the quasi-binomial score equation by Newton steps
/// safeguarded with bisection.
pub fn tmle_ate(
    data: &Dataset,
    mu: &PotentialOutcomes,
    alpha1: &[f64],
    alpha0: &[f64],
) -> Result<TmleEstimate> {
    tmle_ate_labeled("tmle", data, mu, alpha1, alpha0)
}

pub fn tmle_ate_labeled(
    method: &str,
    data: &Dataset,
    mu: &PotentialOutcomes,
    alpha1: &[f64],
    alpha0: &[f64],
) -> Result<TmleEstimate> {
    if mu.n() != data.n() {
        return Err(Error::Shape("outcome predictions and dataset differ in length".into()));
    }
    let rows = active_rows(data, alpha1, alpha0, None)?;
    let n = rows.len();
    let y = data.outcome();
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range == 0.0 {
        return Ok(TmleEstimate {
            report: EstimateReport {
                method: method.to_owned(),
                psi: 0.0,
                se: 0.0,
                ci_lower: 0.0,
                ci_upper: 0.0,
                n,
                eif_mean: 0.0,
            },
            epsilon: 0.0,
            score: 0.0,
            iterations: 0,
        });
    }
    let scale = |v: f64| ((v - lo) / range).clamp(TMLE_CLAMP, 1.0 - TMLE_CLAMP);
    let ys: Vec<f64> = y.iter().map(|&v| (v - lo) / range).collect();
    let off1: Vec<f64> = mu.mu1.iter().map(|&m| logit(scale(m))).collect();
    let off0: Vec<f64> = mu.mu0.iter().map(|&m| logit(scale(m))).collect();
    let h_obs: Vec<f64> = (0..n)
        .map(|i| {
            let a = data.treatment()[i];
            delta(a) * own_weight(a, i, alpha1, alpha0)
        })
        .collect();
    let off_obs: Vec<f64> = (0..n)
        .map(|i| if data.treatment()[i] == 1 { off1[i] } else { off0[i] })
        .collect();

    let score_at = |eps: f64| -> (f64, f64) {
        let mut s = 0.0;
        let mut info = 0.0;
        for i in 0..n {
            let p = sigmoid(off_obs[i] + eps * h_obs[i]);
            s += h_obs[i] * (ys[i] - p);
            info += h_obs[i] * h_obs[i] * p * (1.0 - p);
        }
        (s / n as f64, info / n as f64)
    };

    // The score is nonincreasing in eps, so a sign bracket [lo_eps, hi_eps]
    // around the root is kept and Newton steps leaving it are replaced by
    // bisection.
    let mut eps = 0.0;
    let (mut lo_eps, mut hi_eps) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut iterations = 0;
    let (mut score, mut info) = score_at(eps);
    while score.abs() > TMLE_TOL {
        if iterations == TMLE_MAX_ITER {
            return Err(Error::Convergence(format!(
                "TMLE fluctuation: score {score:e} after {TMLE_MAX_ITER} Newton iterations"
            )));
        }
        iterations += 1;
        if score > 0.0 {
            lo_eps = eps;
        } else {
            hi_eps = eps;
        }
        let newton = eps + score / info;
        eps = if newton.is_finite() && newton > lo_eps && newton < hi_eps {
            newton
        } else if lo_eps.is_finite() && hi_eps.is_finite() {
            0.5 * (lo_eps + hi_eps)
        } else if score > 0.0 {
            eps + eps.abs().max(1.0)
        } else {
            eps - eps.abs().max(1.0)
        };
        if lo_eps.is_finite() && hi_eps.is_finite() && hi_eps - lo_eps <= f64::EPSILON * eps.abs() {
            return Err(Error::Convergence(format!(
                "TMLE fluctuation: bracket collapsed with score {score:e}"
            )));
        }
        (score, info) = score_at(eps);
    }

    let star1: Vec<f64> = (0..n).map(|i| lo + range * sigmoid(off1[i] + eps * alpha1[i])).collect();
    let star0: Vec<f64> = (0..n).map(|i| lo + range * sigmoid(off0[i] - eps * alpha0[i])).collect();
    let psi = (0..n).map(|i| star1[i] - star0[i]).sum::<f64>() / n as f64;
    let eif = EifValues(
        (0..n)
            .map(|i| {
                let a = data.treatment()[i];
                let fitted = if a == 1 { star1[i] } else { star0[i] };
                h_obs[i] * (y[i] - fitted) + star1[i] - star0[i] - psi
            })
            .collect(),
    );
    Ok(TmleEstimate {
        report: report(method, psi, eif)?,
        epsilon: eps,
        score,
        iterations,
    })
}
