//! Cross-fitted nuisance learners: logistic regression for the propensity
//! score and least squares for the outcome regression, both on a
//! polynomial basis of the covariates.
//!
//! Row `i` is always predicted by a model trained without fold `j(i)`. With
//! a single fold there is nothing to hold out and the model is fit in-sample.

use nalgebra::{DMatrix, DVector};

use crate::baseline::sigmoid;
use crate::data::{Dataset, FoldAssignment, ScoreTable};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

pub const RIDGE: f64 = 1e-8;
const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Logistic,
    Gaussian,
}

/// Generalised linear model on an expanded feature vector. The first
/// coefficient is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub coefficients: Vec<f64>,
    pub family: Family,
    pub basis_degree: usize,
}

impl LinearModel {
    /// Prediction on the response scale for already-expanded features.
    pub fn predict(&self, features: &[f64]) -> f64 {
        let eta = self.coefficients[0]
            + self.coefficients[1..]
                .iter()
                .zip(features)
                .map(|(b, x)| b * x)
                .sum::<f64>();
        match self.family {
            Family::Logistic => sigmoid(eta),
            Family::Gaussian => eta,
        }
    }
}

/// Degree 1: `w`. Degree 2: `w`, then squares, then pairwise products
/// `w_j w_k` for `j < k` in index order.
pub fn basis_expand(w: &[f64], degree: usize) -> Result<Vec<f64>> {
    match degree {
        1 => Ok(w.to_vec()),
        2 => {
            let d = w.len();
            let mut out = Vec::with_capacity(2 * d + d * (d.saturating_sub(1)) / 2);
            out.extend_from_slice(w);
            out.extend(w.iter().map(|v| v * v));
            for j in 0..d {
                for k in j + 1..d {
                    out.push(w[j] * w[k]);
                }
            }
            Ok(out)
        }
        _ => Err(Error::range_msg(format!("basis degree {degree} is not 1 or 2"))),
    }
}

/// Which covariates enter the propensity model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PropensityFeatures {
    #[default]
    All,
    /// Intercept plus the first covariate only; a deliberately misspecified
    /// model.
    FirstCovariate,
}

fn design_row(w: &[f64], degree: usize, features: PropensityFeatures) -> Result<Vec<f64>> {
    match features {
        PropensityFeatures::All => basis_expand(w, degree),
        PropensityFeatures::FirstCovariate => basis_expand(&w[..1], degree),
    }
}

fn solve_spd(h: DMatrix<f64>, g: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    h.cholesky()
        .map(|c| c.solve(g))
        .ok_or_else(|| Error::Convergence(format!("{what}: Hessian is not positive definite")))
}

fn with_intercept(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let p = rows.first().map_or(0, Vec::len) + 1;
    DMatrix::from_fn(rows.len(), p, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] })
}

fn penalty(p: usize, ridge: f64) -> DVector<f64> {
    DVector::from_fn(p, |j, _| if j == 0 { 0.0 } else { ridge })
}

fn logistic_objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, pen: &DVector<f64>) -> f64 {
    let eta = x * beta;
    let nll: f64 = eta
        .iter()
        .zip(y.iter())
        .map(|(&e, &yi)| {
            // log(1 + exp(e)) - y e, evaluated stably
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            softplus - yi * e
        })
        .sum();
    nll + beta.iter().zip(pen.iter()).map(|(b, l)| l * b * b).sum::<f64>()
}

/// Ridge-penalised logistic regression by damped Newton-Raphson. The
/// intercept is not penalised, so the fitted probabilities satisfy the
/// score equation `sum(y - p) = 0`.
pub fn fit_logistic(rows: &[Vec<f64>], y: &[f64], ridge: f64, basis_degree: usize) -> Result<LinearModel> {
    let x = with_intercept(rows);
    let yv = DVector::from_column_slice(y);
    let p = x.ncols();
    let pen = penalty(p, ridge);
    let mut beta = DVector::zeros(p);
    let mut objective = logistic_objective(&x, &yv, &beta, &pen);
    for _ in 0..NEWTON_MAX_ITER {
        let eta = &x * &beta;
        let mu = eta.map(sigmoid);
        let v = mu.map(|m| m * (1.0 - m));
        let grad = x.transpose() * (&mu - &yv) + 2.0 * pen.component_mul(&beta);
        if grad.amax() <= NEWTON_TOL {
            return Ok(LinearModel {
                coefficients: beta.as_slice().to_vec(),
                family: Family::Logistic,
                basis_degree,
            });
        }
        let mut xv = x.clone();
        for (i, mut row) in xv.row_iter_mut().enumerate() {
            row *= v[i];
        }
        let mut hess = x.transpose() * xv;
        for j in 0..p {
            hess[(j, j)] += 2.0 * pen[j];
        }
        let step = solve_spd(hess, &grad, "logistic regression")?;
        if step.iter().any(|s| !s.is_finite()) {
            return Err(Error::Convergence("logistic regression: non-finite Newton step".into()));
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &beta - t * &step;
            let obj = logistic_objective(&x, &yv, &candidate, &pen);
            if obj.is_finite() && obj <= objective {
                beta = candidate;
                objective = obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || t * step.amax() <= 1e-15 * (1.0 + beta.amax()) {
            // No further decrease is representable.
            return Ok(LinearModel {
                coefficients: beta.as_slice().to_vec(),
                family: Family::Logistic,
                basis_degree,
            });
        }
    }
    Err(Error::Convergence(format!(
        "logistic regression: no convergence in {NEWTON_MAX_ITER} Newton iterations"
    )))
}

/// Ridge-penalised least squares via the normal equations (intercept not
/// penalised).
pub fn fit_least_squares(rows: &[Vec<f64>], y: &[f64], ridge: f64, basis_degree: usize) -> Result<LinearModel> {
    let x = with_intercept(rows);
    let p = x.ncols();
    let mut gram = x.transpose() * &x;
    for j in 1..p {
        gram[(j, j)] += ridge;
    }
    // A tiny relative jitter keeps Cholesky usable for exactly collinear
    // designs such as constant covariates.
    let scale = (0..p).map(|j| gram[(j, j)]).fold(0.0_f64, f64::max);
    for j in 1..p {
        gram[(j, j)] += 1e-14 * scale;
    }
    let rhs = x.transpose() * DVector::from_column_slice(y);
    let beta = solve_spd(gram, &rhs, "least squares")?;
    Ok(LinearModel {
        coefficients: beta.as_slice().to_vec(),
        family: Family::Gaussian,
        basis_degree,
    })
}

fn training_rows(folds: &FoldAssignment, s: usize) -> Vec<usize> {
    if folds.folds() == 1 {
        return (0..folds.n()).collect();
    }
    (0..folds.n()).filter(|&i| folds.fold_of()[i] != s).collect()
}

fn check_folds(data: &Dataset, folds: &FoldAssignment) -> Result<()> {
    if data.n() != folds.n() {
        return Err(Error::Shape(format!(
            "dataset has {} rows, fold assignment {}",
            data.n(),
            folds.n()
        )));
    }
    Ok(())
}

/// Cross-fitted logistic propensity scores. Binary data yield a
/// complementary table (`pi0 = 1 - pi1`); other treatment sets are fit one
/// level against the rest.
pub fn fit_propensity_crossfit(
    data: &Dataset,
    folds: &FoldAssignment,
    basis_degree: usize,
) -> Result<ScoreTable> {
    fit_propensity_crossfit_with(data, folds, basis_degree, PropensityFeatures::All)
}

pub fn fit_propensity_crossfit_with(
    data: &Dataset,
    folds: &FoldAssignment,
    basis_degree: usize,
    features: PropensityFeatures,
) -> Result<ScoreTable> {
    check_folds(data, folds)?;
    let design: Vec<Vec<f64>> = (0..data.n())
        .map(|i| design_row(data.row(i), basis_degree, features))
        .collect::<Result<_>>()?;
    let fit_level = |level: u32| -> Result<Vec<f64>> {
        let y: Vec<f64> = data
            .treatment()
            .iter()
            .map(|&a| if a == level { 1.0 } else { 0.0 })
            .collect();
        let mut out = vec![0.0; data.n()];
        for s in 1..=folds.folds() {
            let train = training_rows(folds, s);
            let positives = train.iter().filter(|&&i| y[i] == 1.0).count();
            if positives == 0 || positives == train.len() {
                return Err(Error::EmptyArm(format!(
                    "training data for fold {s} contains a single treatment class for level {level}"
                )));
            }
            let rows: Vec<Vec<f64>> = train.iter().map(|&i| design[i].clone()).collect();
            let ys: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let model = fit_logistic(&rows, &ys, RIDGE, basis_degree)?;
            for i in folds.members(s) {
                out[i] = model.predict(&design[i]);
            }
        }
        Ok(out)
    };
    if data.is_binary() {
        ScoreTable::from_treated(folds.clone(), fit_level(1)?)
    } else {
        let scores: BTreeMap<u32, Vec<f64>> = data
            .levels()
            .iter()
            .map(|&l| fit_level(l).map(|s| (l, s)))
            .collect::<Result<_>>()?;
        ScoreTable::new(folds.clone(), scores)
    }
}

/// Out-of-fold outcome-regression predictions under control and treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomes {
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
}

impl PotentialOutcomes {
    pub fn n(&self) -> usize {
        self.mu0.len()
    }

    /// `mu(a, W_i)` for a binary label.
    pub fn at(&self, i: usize, a: u32) -> f64 {
        if a == 1 {
            self.mu1[i]
        } else {
            self.mu0[i]
        }
    }
}

fn outcome_row(basis: &[f64], treated: bool) -> Vec<f64> {
    let t = if treated { 1.0 } else { 0.0 };
    let mut row = Vec::with_capacity(2 * basis.len() + 1);
    row.extend_from_slice(basis);
    row.push(t);
    row.extend(basis.iter().map(|b| t * b));
    row
}

/// Cross-fitted least squares of `Y` on `(basis(W), A, A * basis(W))`,
/// predicted at both arms out of fold.
pub fn fit_outcome_crossfit(
    data: &Dataset,
    folds: &FoldAssignment,
    basis_degree: usize,
) -> Result<PotentialOutcomes> {
    check_folds(data, folds)?;
    if !data.is_binary() {
        return Err(Error::Precondition("outcome regression needs binary treatment".into()));
    }
    let basis: Vec<Vec<f64>> = (0..data.n())
        .map(|i| basis_expand(data.row(i), basis_degree))
        .collect::<Result<_>>()?;
    let mut mu0 = vec![0.0; data.n()];
    let mut mu1 = vec![0.0; data.n()];
    for s in 1..=folds.folds() {
        let train = training_rows(folds, s);
        let treated = train.iter().filter(|&&i| data.treatment()[i] == 1).count();
        if treated == 0 || treated == train.len() {
            return Err(Error::EmptyArm(format!(
                "training data for fold {s} lacks one of the treatment arms"
            )));
        }
        let rows: Vec<Vec<f64>> = train
            .iter()
            .map(|&i| outcome_row(&basis[i], data.treatment()[i] == 1))
            .collect();
        let ys: Vec<f64> = train.iter().map(|&i| data.outcome()[i]).collect();
        let model = fit_least_squares(&rows, &ys, RIDGE, basis_degree)?;
        for i in folds.members(s) {
            mu0[i] = model.predict(&outcome_row(&basis[i], false));
            mu1[i] = model.predict(&outcome_row(&basis[i], true));
        }
    }
    Ok(PotentialOutcomes { mu0, mu1 })
}
