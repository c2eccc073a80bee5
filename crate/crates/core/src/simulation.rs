//! Synthetic data with a tunable overlap knob and a parallel Monte Carlo
//! runner over the weight-construction roster.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::baseline::{
    dropping_mask, invert_weights, platt_calibrate, sigmoid, trim_adaptive, trim_fixed,
    DEFAULT_GRID_STEP, DEFAULT_PLATT_RIDGE, DEFAULT_TRIM,
};
use crate::calibration::calibrate_binary;
use crate::data::{assign_folds, fmt_real, Dataset, ScoreTable};
use crate::diagnostics::{chi2_cal_error_oracle, weight_mse_oracle};
use crate::error::{Error, Result};
use crate::estimators::{aipw_ate_labeled, ipw_ate_labeled, tmle_ate_labeled, EstimateReport};
use crate::nuisance::{
    fit_outcome_crossfit, fit_propensity_crossfit_with, PotentialOutcomes, PropensityFeatures,
};

pub const MIN_N: usize = 50;
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct DgpConfig {
    pub n: usize,
    pub d: usize,
    pub overlap_gamma: f64,
    pub noise_sd: f64,
    pub seed: u64,
    pub dgp_id: String,
}

impl DgpConfig {
    pub fn good_overlap(n: usize, seed: u64) -> Self {
        DgpConfig {
            n,
            d: 4,
            overlap_gamma: 1.0,
            noise_sd: 1.0,
            seed,
            dgp_id: "good-overlap".into(),
        }
    }

    pub fn limited_overlap(n: usize, seed: u64) -> Self {
        DgpConfig {
            overlap_gamma: 3.0,
            dgp_id: "limited-overlap".into(),
            ..Self::good_overlap(n, seed)
        }
    }

    /// Look up a named configuration (`good-overlap` or `limited-overlap`).
    pub fn named(name: &str, n: usize, seed: u64) -> Result<Self> {
        match name {
            "good-overlap" => Ok(Self::good_overlap(n, seed)),
            "limited-overlap" => Ok(Self::limited_overlap(n, seed)),
            _ => Err(Error::range_msg(format!(
                "unknown DGP `{name}` (expected good-overlap or limited-overlap)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_N {
            return Err(Error::range_msg(format!("n = {} is below {MIN_N}", self.n)));
        }
        if self.d < 3 {
            return Err(Error::range_msg(format!("d = {} but the DGP uses 3 covariates", self.d)));
        }
        if !(self.overlap_gamma.is_finite() && self.overlap_gamma > 0.0) {
            return Err(Error::range_msg("overlap_gamma must be positive"));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::range_msg("noise_sd must be nonnegative"));
        }
        Ok(())
    }

    /// True treatment probability at `w`.
    pub fn propensity(&self, w: &[f64]) -> f64 {
        sigmoid(self.overlap_gamma * (w[0] + 0.5 * w[1] - 0.5 * w[2]))
    }
}

/// Noise-free outcome regression of the DGP.
pub fn outcome_mean(w: &[f64], a: u32) -> f64 {
    w[0] + w[1] * w[1] + a as f64 * (1.0 + w[0])
}

/// A generated dataset with its oracle quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub rep_index: u64,
    pub data: Dataset,
    /// True `P(A = 1 | W_i)`.
    pub pi1: Vec<f64>,
    /// Conditional effects `mu(1, W_i) - mu(0, W_i)`.
    pub tau: Vec<f64>,
    /// Seed for the replicate's fold assignment.
    pub fold_seed: u64,
}

impl Replicate {
    /// True propensity of `level` for every row.
    pub fn true_propensity(&self, level: u32) -> Vec<f64> {
        if level == 1 {
            self.pi1.clone()
        } else {
            self.pi1.iter().map(|p| 1.0 - p).collect()
        }
    }
}

fn replicate_rng(seed: u64, rep_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep_index);
    rng
}

pub fn generate_replicate(cfg: &DgpConfig, rep_index: u64) -> Result<Replicate> {
    cfg.validate()?;
    let mut rng = replicate_rng(cfg.seed, rep_index);
    let mut rows = Vec::with_capacity(cfg.n);
    let mut treatment = Vec::with_capacity(cfg.n);
    let mut outcome = Vec::with_capacity(cfg.n);
    let mut pi1 = Vec::with_capacity(cfg.n);
    let mut tau = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let w: Vec<f64> = (0..cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = cfg.propensity(&w);
        let a = u32::from(rng.random::<f64>() < p);
        let eps: f64 = rng.sample(StandardNormal);
        outcome.push(outcome_mean(&w, a) + cfg.noise_sd * eps);
        treatment.push(a);
        pi1.push(p);
        tau.push(outcome_mean(&w, 1) - outcome_mean(&w, 0));
        rows.push(w);
    }
    let fold_seed = rng.next_u64();
    Ok(Replicate {
        rep_index,
        data: Dataset::from_rows(&rows, treatment, outcome)?,
        pi1,
        tau,
        fold_seed,
    })
}

/// Sample average of the conditional effects of a replicate.
pub fn true_ate(replicate: &Replicate) -> f64 {
    replicate.tau.iter().sum::<f64>() / replicate.tau.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Inversion,
    TrimFixed,
    TrimAdaptive,
    Platt,
    IcAipw,
    Tmle,
    IcTmle,
    Dropping,
    IpwIc,
    IpwNaive,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Inversion,
        Method::TrimFixed,
        Method::TrimAdaptive,
        Method::Platt,
        Method::IcAipw,
        Method::Tmle,
        Method::IcTmle,
        Method::Dropping,
        Method::IpwIc,
        Method::IpwNaive,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Inversion => "inversion",
            Method::TrimFixed => "trim_fixed",
            Method::TrimAdaptive => "trim_adaptive",
            Method::Platt => "platt",
            Method::IcAipw => "ic_aipw",
            Method::Tmle => "tmle",
            Method::IcTmle => "ic_tmle",
            Method::Dropping => "dropping",
            Method::IpwIc => "ipw_ic",
            Method::IpwNaive => "ipw_naive",
        }
    }

    pub fn parse_list(list: &str) -> Result<Vec<Method>> {
        let mut out: Vec<Method> = Vec::new();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let m: Method = item.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::EmptyInput("method list".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::range_msg(format!("unknown method `{s}`")))
    }
}

/// Nuisance and weight settings shared by every replicate of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub folds: usize,
    pub propensity_degree: usize,
    pub propensity_features: PropensityFeatures,
    pub outcome_degree: usize,
    pub min_segment: f64,
    pub trim_c: f64,
    pub drop_c: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            folds: 10,
            propensity_degree: 1,
            propensity_features: PropensityFeatures::All,
            outcome_degree: 2,
            min_segment: 0.0,
            trim_c: DEFAULT_TRIM,
            drop_c: DEFAULT_TRIM,
        }
    }
}

/// Cross-fitted nuisances of one replicate.
#[derive(Debug, Clone)]
pub struct Nuisances {
    pub scores: ScoreTable,
    pub mu: PotentialOutcomes,
}

pub fn fit_nuisances(replicate: &Replicate, study: &StudyConfig) -> Result<Nuisances> {
    let data = &replicate.data;
    let folds = assign_folds(data.n(), study.folds, replicate.fold_seed)?;
    let scores = fit_propensity_crossfit_with(
        data,
        &folds,
        study.propensity_degree,
        study.propensity_features,
    )?;
    let mu = fit_outcome_crossfit(data, &folds, study.outcome_degree)?;
    Ok(Nuisances { scores, mu })
}

/// One method's estimate on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct RepEstimate {
    pub report: EstimateReport,
    /// Post-fluctuation mean score for the TMLE methods.
    pub tmle_score: Option<f64>,
}

fn estimate_method(
    method: Method,
    data: &Dataset,
    nuis: &Nuisances,
    ic: &Result<(Vec<f64>, Vec<f64>)>,
    study: &StudyConfig,
) -> Result<RepEstimate> {
    let scores = &nuis.scores;
    let mu = &nuis.mu;
    let ic = || -> Result<(&[f64], &[f64])> {
        match ic {
            Ok((a1, a0)) => Ok((a1, a0)),
            Err(e) => Err(Error::Precondition(format!("isotonic calibration failed: {e}"))),
        }
    };
    let plain = |report| Ok(RepEstimate { report, tmle_score: None });
    let label = method.label();
    match method {
        Method::Inversion | Method::IpwNaive | Method::Tmle => {
            let a1 = invert_weights(scores, 1)?;
            let a0 = invert_weights(scores, 0)?;
            match method {
                Method::Inversion => plain(aipw_ate_labeled(label, data, mu, &a1, &a0, None)?),
                Method::IpwNaive => plain(ipw_ate_labeled(label, data, &a1, &a0, None)?),
                _ => {
                    let t = tmle_ate_labeled(label, data, mu, &a1, &a0)?;
                    Ok(RepEstimate {
                        report: t.report,
                        tmle_score: Some(t.score),
                    })
                }
            }
        }
        Method::TrimFixed => {
            let a1 = trim_fixed(scores, 1, study.trim_c)?;
            let a0 = trim_fixed(scores, 0, study.trim_c)?;
            plain(aipw_ate_labeled(label, data, mu, &a1, &a0, None)?)
        }
        Method::TrimAdaptive => {
            let t = trim_adaptive(data, scores, DEFAULT_GRID_STEP)?;
            plain(aipw_ate_labeled(label, data, mu, &t.alpha1, &t.alpha0, None)?)
        }
        Method::Platt => {
            let (_, a1) = platt_calibrate(data, scores, 1, DEFAULT_PLATT_RIDGE)?;
            let (_, a0) = platt_calibrate(data, scores, 0, DEFAULT_PLATT_RIDGE)?;
            plain(aipw_ate_labeled(label, data, mu, &a1, &a0, None)?)
        }
        Method::IcAipw => {
            let (a1, a0) = ic()?;
            plain(aipw_ate_labeled(label, data, mu, a1, a0, None)?)
        }
        Method::IpwIc => {
            let (a1, a0) = ic()?;
            plain(ipw_ate_labeled(label, data, a1, a0, None)?)
        }
        Method::IcTmle => {
            let (a1, a0) = ic()?;
            let t = tmle_ate_labeled(label, data, mu, a1, a0)?;
            Ok(RepEstimate {
                report: t.report,
                tmle_score: Some(t.score),
            })
        }
        Method::Dropping => {
            let mask = dropping_mask(scores, study.drop_c)?;
            let a1 = invert_weights(scores, 1)?;
            let a0 = invert_weights(scores, 0)?;
            plain(aipw_ate_labeled(label, data, mu, &a1, &a0, Some(&mask))?)
        }
    }
}

/// Outcome of every requested method on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub rep_index: u64,
    pub tau: f64,
    /// One entry per requested method, in request order. Failures keep the
    /// error message.
    pub estimates: Vec<(Method, std::result::Result<RepEstimate, String>)>,
}

pub fn run_replicate(
    cfg: &DgpConfig,
    study: &StudyConfig,
    methods: &[Method],
    rep_index: u64,
) -> Result<ReplicateRecord> {
    let replicate = generate_replicate(cfg, rep_index)?;
    let tau = true_ate(&replicate);
    let estimates = match fit_nuisances(&replicate, study) {
        Ok(nuis) => {
            let ic = calibrate_binary(&replicate.data, &nuis.scores, study.min_segment)
                .map(|(w1, w0)| (w1.alpha, w0.alpha));
            methods
                .iter()
                .map(|&m| {
                    let r = estimate_method(m, &replicate.data, &nuis, &ic, study);
                    (m, r.map_err(|e| e.to_string()))
                })
                .collect()
        }
        Err(e) => {
            let msg = format!("nuisance fit failed: {e}");
            methods.iter().map(|&m| (m, Err(msg.clone()))).collect()
        }
    };
    Ok(ReplicateRecord {
        rep_index,
        tau,
        estimates,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub bias: f64,
    pub se: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub reps_ok: usize,
    pub reps_failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub reps: usize,
    pub methods: Vec<MethodSummary>,
    pub records: Vec<ReplicateRecord>,
}

impl McResult {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == method)
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "method,bias,se,rmse,coverage,reps_ok,reps_failed")?;
        for s in &self.methods {
            writeln!(
                writer,
                "{},{},{},{},{},{},{}",
                s.method,
                fmt_real(s.bias),
                fmt_real(s.se),
                fmt_real(s.rmse),
                fmt_real(s.coverage),
                s.reps_ok,
                s.reps_failed
            )?;
        }
        Ok(())
    }
}

fn summarize(method: Method, records: &[ReplicateRecord]) -> Result<MethodSummary> {
    let total = records.len();
    let mut errors = Vec::new();
    let mut covered = 0usize;
    let mut failed = 0usize;
    for rec in records {
        let (_, outcome) = rec
            .estimates
            .iter()
            .find(|(m, _)| *m == method)
            .expect("every record carries every requested method");
        match outcome {
            Ok(est) => {
                errors.push(est.report.psi - rec.tau);
                covered += usize::from(est.report.covers(rec.tau));
            }
            Err(_) => failed += 1,
        }
    }
    if failed as f64 > MAX_FAILURE_RATE * total as f64 {
        return Err(Error::TooManyFailures {
            method: method.label().into(),
            failed,
            total,
        });
    }
    let ok = errors.len();
    if ok == 0 {
        return Err(Error::InsufficientData(format!("no successful replicates for {method}")));
    }
    let bias = errors.iter().sum::<f64>() / ok as f64;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / ok as f64).sqrt();
    let se = (rmse * rmse - bias * bias).max(0.0).sqrt();
    Ok(MethodSummary {
        method,
        bias,
        se,
        rmse,
        coverage: covered as f64 / ok as f64,
        reps_ok: ok,
        reps_failed: failed,
    })
}

/// Run `reps` replicates in parallel and aggregate each method's bias,
/// standard error, RMSE and 95% interval coverage against the per-replicate
/// sample ATE.
pub fn monte_carlo_run(
    cfg: &DgpConfig,
    study: &StudyConfig,
    reps: usize,
    methods: &[Method],
) -> Result<McResult> {
    if reps < 2 {
        return Err(Error::range_msg(format!("need at least 2 replicates, got {reps}")));
    }
    if methods.is_empty() {
        return Err(Error::EmptyInput("method list".into()));
    }
    if study.folds == 0 || study.folds > cfg.n {
        return Err(Error::InvalidFoldCount {
            folds: study.folds,
            n: cfg.n,
        });
    }
    cfg.validate()?;
    let records: Vec<ReplicateRecord> = (0..reps as u64)
        .into_par_iter()
        .map(|r| run_replicate(cfg, study, methods, r))
        .collect::<Result<_>>()?;
    let summaries = methods
        .iter()
        .map(|&m| summarize(m, &records))
        .collect::<Result<_>>()?;
    Ok(McResult {
        reps,
        methods: summaries,
        records,
    })
}

/// Oracle calibration error and weight RMSE of several weight
/// constructions on one replicate, for the treated level.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightOracleReport {
    pub cal_ic: f64,
    pub mse_ic: f64,
    pub mse_inversion: f64,
    /// `(c, rmse)` for each requested fixed truncation level.
    pub mse_trim: Vec<(f64, f64)>,
}

pub fn weight_oracles(
    cfg: &DgpConfig,
    study: &StudyConfig,
    rep_index: u64,
    trim_levels: &[f64],
) -> Result<WeightOracleReport> {
    let replicate = generate_replicate(cfg, rep_index)?;
    let data = &replicate.data;
    let folds = assign_folds(data.n(), study.folds, replicate.fold_seed)?;
    let scores = fit_propensity_crossfit_with(
        data,
        &folds,
        study.propensity_degree,
        study.propensity_features,
    )?;
    let (w1, _) = calibrate_binary(data, &scores, study.min_segment)?;
    let pi1 = &replicate.pi1;
    let a = data.treatment();
    let mse_trim = trim_levels
        .iter()
        .map(|&c| Ok((c, weight_mse_oracle(&trim_fixed(&scores, 1, c)?, pi1, a, 1)?)))
        .collect::<Result<_>>()?;
    Ok(WeightOracleReport {
        cal_ic: chi2_cal_error_oracle(&w1.alpha, pi1)?,
        mse_ic: weight_mse_oracle(&w1.alpha, pi1, a, 1)?,
        mse_inversion: weight_mse_oracle(&invert_weights(&scores, 1)?, pi1, a, 1)?,
        mse_trim,
    })
}
