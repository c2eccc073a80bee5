//! Command-line front end: `calibrate`, `estimate`, `simulate`, `diagnose`.
//!
//! Exit codes: 0 on success, 1 when a computation fails, 2 for usage and
//! input-validation errors.

use std::ffi::OsString;
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baseline::{
    dropping_mask, invert_weights, platt_calibrate, trim_adaptive, trim_fixed, DEFAULT_GRID_STEP,
    DEFAULT_PLATT_RIDGE, DEFAULT_TRIM,
};
use crate::calibration::{
    calibrate_binary, calibrate_weights, read_weights, write_weights, CalibratedWeights,
};
use crate::data::{assign_folds, load_dataset, load_scores, Dataset, FoldAssignment, ScoreTable};
use crate::diagnostics::{balance_report, boundary_count, chi2_cal_error_oracle, weight_mse_oracle};
use crate::error::{Error, Result};
use crate::estimators::{aipw_ate_labeled, ipw_ate_labeled, tmle_ate_labeled, EstimateReport};
use crate::nuisance::{fit_outcome_crossfit, fit_propensity_crossfit_with, PropensityFeatures};
use crate::simulation::{monte_carlo_run, DgpConfig, Method, StudyConfig};

const FORMATS: &str = "\
File formats (CSV with a header row, reals in decimal or scientific notation):
  dataset   covariate columns in any order plus the treatment and outcome
            columns named by --treatment-col / --outcome-col (default a, y)
  scores    optional `fold` column (1-based) and one `pi<level>` column per
            treatment level, rows aligned with the dataset
  weights   one `alpha<level>_star` column per level, rows aligned with the
            dataset
  balance   level_value,count,stabilized_mean,deviation followed by a
            `# level=.. level_sets=.. excluded=.. max_abs_deviation=..` line
  report    name=value lines: method, psi, se, ci_lower, ci_upper, n, eif_mean
  results   method,bias,se,rmse,coverage,reps_ok,reps_failed
Reals are written with 17 significant digits.";

#[derive(Debug, Parser)]
#[command(
    name = "icipw",
    version,
    about = "Isotonic-calibrated inverse probability weighting",
    after_long_help = FORMATS
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate propensity scores into stabilized inverse weights.
    #[command(after_long_help = FORMATS)]
    Calibrate(CalibrateArgs),
    /// Estimate the average treatment effect with a chosen weighting scheme.
    #[command(after_long_help = FORMATS)]
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study on a synthetic data-generating process.
    #[command(after_long_help = FORMATS)]
    Simulate(SimulateArgs),
    /// Report level-set balance, boundary rows and oracle errors.
    #[command(after_long_help = FORMATS)]
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "a")]
    pub treatment_col: String,
    #[arg(long, default_value = "y")]
    pub outcome_col: String,
}

#[derive(Debug, Args)]
pub struct MinSegmentArg {
    /// Minimum number of rows per constant block of the calibration map.
    /// Passing the flag without a value uses 10.
    #[arg(
        long,
        num_args = 0..=1,
        default_value_t = 0.0,
        default_missing_value = "10",
        value_parser = nonnegative
    )]
    pub min_segment: f64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Scores CSV with out-of-fold propensity scores.
    #[arg(long, conflicts_with = "fit_scores", required_unless_present = "fit_scores")]
    pub scores: Option<PathBuf>,
    /// Fit cross-fitted logistic propensity scores instead of reading them.
    #[arg(long, requires = "folds")]
    pub fit_scores: bool,
    /// Number of cross-fitting folds for --fit-scores.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub folds: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Basis degree (1 or 2) of the propensity model for --fit-scores.
    #[arg(long, default_value_t = 1)]
    pub propensity_degree: usize,
    /// Treatment levels to calibrate; repeatable. Defaults to every level.
    #[arg(long = "level")]
    pub levels: Vec<u32>,
    #[command(flatten)]
    pub min_segment: MinSegmentArg,
    /// Output weights CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Output balance CSV; defaults to `<out>.balance.csv`.
    #[arg(long)]
    pub balance_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorKind {
    Aipw,
    Ipw,
    Tmle,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Aipw => "aipw",
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::Tmle => "tmle",
        })
    }
}

/// Weight construction selected by `--weights`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightSpec {
    Ic,
    Invert,
    Trim(f64),
    TrimAdaptive,
    Platt,
    Drop(f64),
}

impl FromStr for WeightSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let threshold = |v: &str| -> std::result::Result<f64, String> {
            let c: f64 = v.parse().map_err(|_| format!("`{v}` is not a number"))?;
            if (0.0..=0.5).contains(&c) {
                Ok(c)
            } else {
                Err(format!("threshold {c} is outside [0, 0.5]"))
            }
        };
        match s {
            "ic" => Ok(WeightSpec::Ic),
            "invert" => Ok(WeightSpec::Invert),
            "trim-adaptive" => Ok(WeightSpec::TrimAdaptive),
            "platt" => Ok(WeightSpec::Platt),
            _ => {
                if let Some(v) = s.strip_prefix("trim:") {
                    threshold(v).map(WeightSpec::Trim)
                } else if let Some(v) = s.strip_prefix("drop:") {
                    threshold(v).map(WeightSpec::Drop)
                } else {
                    Err(format!(
                        "unknown weights `{s}` (expected ic, invert, trim:<c>, trim-adaptive, platt or drop:<c>)"
                    ))
                }
            }
        }
    }
}

impl fmt::Display for WeightSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightSpec::Ic => f.write_str("ic"),
            WeightSpec::Invert => f.write_str("invert"),
            WeightSpec::Trim(c) => write!(f, "trim:{c}"),
            WeightSpec::TrimAdaptive => f.write_str("trim-adaptive"),
            WeightSpec::Platt => f.write_str("platt"),
            WeightSpec::Drop(c) => write!(f, "drop:{c}"),
        }
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub method: EstimatorKind,
    /// ic, invert, trim:<c>, trim-adaptive, platt or drop:<c>.
    #[arg(long)]
    pub weights: WeightSpec,
    /// Scores CSV; when absent, cross-fitted logistic scores are fitted.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Cross-fitting folds, used unless the scores file has a fold column.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub folds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub propensity_degree: usize,
    #[arg(long, default_value_t = 2)]
    pub outcome_degree: usize,
    #[command(flatten)]
    pub min_segment: MinSegmentArg,
    /// Output report; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DgpName {
    GoodOverlap,
    LimitedOverlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureSet {
    All,
    /// Intercept and first covariate only.
    First,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub dgp: DgpName,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub reps: usize,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated subset of: inversion, trim_fixed, trim_adaptive,
    /// platt, ic_aipw, tmle, ic_tmle, dropping, ipw_ic, ipw_naive.
    #[arg(
        long,
        default_value = "inversion,trim_fixed,trim_adaptive,platt,ic_aipw,tmle,ic_tmle,dropping,ipw_ic,ipw_naive"
    )]
    pub methods: String,
    #[arg(long, default_value_t = 4)]
    pub d: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sd: f64,
    #[arg(long, default_value_t = 1)]
    pub propensity_degree: usize,
    #[arg(long, value_enum, default_value_t = FeatureSet::All)]
    pub propensity_features: FeatureSet,
    #[arg(long, default_value_t = 2)]
    pub outcome_degree: usize,
    #[command(flatten)]
    pub min_segment: MinSegmentArg,
    /// Threshold for trim_fixed.
    #[arg(long, default_value_t = DEFAULT_TRIM)]
    pub trim: f64,
    /// Threshold for dropping.
    #[arg(long, default_value_t = DEFAULT_TRIM)]
    pub drop: f64,
    /// Output results CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Scores CSV; weights are calibrated from it unless --weights-file is given.
    #[arg(long, required_unless_present = "weights_file")]
    pub scores: Option<PathBuf>,
    /// Weights CSV to diagnose instead of freshly calibrated weights.
    #[arg(long)]
    pub weights_file: Option<PathBuf>,
    /// Treatment level whose weights are diagnosed.
    #[arg(long, default_value_t = 1)]
    pub level: u32,
    /// CSV with the true propensity of --level in a `pi<level>` column.
    #[arg(long)]
    pub pi0_file: Option<PathBuf>,
    #[command(flatten)]
    pub min_segment: MinSegmentArg,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn nonnegative(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(format!("`{s}` is not a nonnegative number")),
    }
}

/// Parse arguments, run the subcommand and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Calibrate(a) => cmd_calibrate(&a),
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load(args: &DataArgs) -> Result<Dataset> {
    load_dataset(&args.data, &args.treatment_col, &args.outcome_col)
}

fn fold_count(folds: u64, n: usize) -> Result<usize> {
    let j = usize::try_from(folds).unwrap_or(usize::MAX);
    if j > n {
        return Err(Error::InvalidFoldCount { folds: j, n });
    }
    Ok(j)
}

/// IC weights for each requested level, using the single-fit shortcut when
/// the treatment is binary and the scores are complementary.
fn ic_weights(
    data: &Dataset,
    scores: &ScoreTable,
    levels: &[u32],
    min_segment: f64,
) -> Result<Vec<CalibratedWeights>> {
    let mut sorted = levels.to_vec();
    sorted.sort_unstable();
    if data.is_binary() && scores.is_complementary() && sorted == [0, 1] {
        let (w1, w0) = calibrate_binary(data, scores, min_segment)?;
        return Ok(levels
            .iter()
            .map(|&l| if l == 1 { w1.clone() } else { w0.clone() })
            .collect());
    }
    levels
        .iter()
        .map(|&l| calibrate_weights(data, scores, l, min_segment))
        .collect()
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let data = load(&args.data)?;
    let scores = match (&args.scores, args.folds) {
        (Some(path), _) => load_scores(path, data.n(), None, &[])?,
        (None, Some(j)) => {
            let folds = assign_folds(data.n(), fold_count(j, data.n())?, args.seed)?;
            fit_propensity_crossfit_with(&data, &folds, args.propensity_degree, PropensityFeatures::All)?
        }
        (None, None) => return Err(Error::Precondition("need --scores or --fit-scores".into())),
    };
    let levels: Vec<u32> = if args.levels.is_empty() {
        data.levels().iter().rev().copied().collect()
    } else {
        args.levels.clone()
    };
    let weights = ic_weights(&data, &scores, &levels, args.min_segment.min_segment)?;

    let mut out = create(&args.out)?;
    write_weights(&mut out, &weights.iter().collect::<Vec<_>>())?;
    out.flush()?;

    let balance_path = args.balance_out.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".balance.csv");
        PathBuf::from(p)
    });
    let mut bal = create(&balance_path)?;
    for w in &weights {
        balance_report(&data, &w.alpha, w.level, Some(&w.truncated))?.write_csv(&mut bal)?;
    }
    bal.flush()?;
    Ok(())
}

struct WeightSet {
    alpha1: Vec<f64>,
    alpha0: Vec<f64>,
    mask: Option<Vec<bool>>,
}

fn build_weights(
    spec: WeightSpec,
    data: &Dataset,
    scores: &ScoreTable,
    min_segment: f64,
) -> Result<WeightSet> {
    let plain = |alpha1, alpha0| WeightSet {
        alpha1,
        alpha0,
        mask: None,
    };
    Ok(match spec {
        WeightSpec::Ic => {
            let mut w = ic_weights(data, scores, &[1, 0], min_segment)?;
            let w0 = w.pop().expect("two levels").alpha;
            let w1 = w.pop().expect("two levels").alpha;
            plain(w1, w0)
        }
        WeightSpec::Invert => plain(invert_weights(scores, 1)?, invert_weights(scores, 0)?),
        WeightSpec::Trim(c) => plain(trim_fixed(scores, 1, c)?, trim_fixed(scores, 0, c)?),
        WeightSpec::TrimAdaptive => {
            let t = trim_adaptive(data, scores, DEFAULT_GRID_STEP)?;
            plain(t.alpha1, t.alpha0)
        }
        WeightSpec::Platt => plain(
            platt_calibrate(data, scores, 1, DEFAULT_PLATT_RIDGE)?.1,
            platt_calibrate(data, scores, 0, DEFAULT_PLATT_RIDGE)?.1,
        ),
        WeightSpec::Drop(c) => WeightSet {
            alpha1: invert_weights(scores, 1)?,
            alpha0: invert_weights(scores, 0)?,
            mask: Some(dropping_mask(scores, c)?),
        },
    })
}

pub fn estimate(args: &EstimateArgs, data: &Dataset) -> Result<EstimateReport> {
    let (scores, folds): (ScoreTable, FoldAssignment) = match &args.scores {
        Some(path) => {
            let scores = load_scores(path, data.n(), None, &[])?;
            let folds = scores.folds().clone();
            (scores, folds)
        }
        None => {
            let folds = assign_folds(data.n(), fold_count(args.folds, data.n())?, args.seed)?;
            let scores = fit_propensity_crossfit_with(
                data,
                &folds,
                args.propensity_degree,
                PropensityFeatures::All,
            )?;
            (scores, folds)
        }
    };
    let w = build_weights(args.weights, data, &scores, args.min_segment.min_segment)?;
    let label = format!("{}+{}", args.method, args.weights);
    let mask = w.mask.as_deref();
    match args.method {
        EstimatorKind::Ipw => ipw_ate_labeled(&label, data, &w.alpha1, &w.alpha0, mask),
        EstimatorKind::Aipw => {
            let mu = fit_outcome_crossfit(data, &folds, args.outcome_degree)?;
            aipw_ate_labeled(&label, data, &mu, &w.alpha1, &w.alpha0, mask)
        }
        EstimatorKind::Tmle => {
            if mask.is_some() {
                return Err(Error::Precondition(
                    "tmle does not support dropping; use aipw or ipw with drop:<c>".into(),
                ));
            }
            let mu = fit_outcome_crossfit(data, &folds, args.outcome_degree)?;
            Ok(tmle_ate_labeled(&label, data, &mu, &w.alpha1, &w.alpha0)?.report)
        }
    }
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    let data = load(&args.data)?;
    let report = estimate(args, &data)?;
    let mut out = output(args.out.as_deref())?;
    write!(out, "{report}")?;
    out.flush()?;
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = match args.dgp {
        DgpName::GoodOverlap => DgpConfig::good_overlap(args.n, args.seed),
        DgpName::LimitedOverlap => DgpConfig::limited_overlap(args.n, args.seed),
    };
    cfg.d = args.d;
    cfg.noise_sd = args.noise_sd;
    let study = StudyConfig {
        folds: args.folds,
        propensity_degree: args.propensity_degree,
        propensity_features: match args.propensity_features {
            FeatureSet::All => PropensityFeatures::All,
            FeatureSet::First => PropensityFeatures::FirstCovariate,
        },
        outcome_degree: args.outcome_degree,
        min_segment: args.min_segment.min_segment,
        trim_c: args.trim,
        drop_c: args.drop,
    };
    let methods = Method::parse_list(&args.methods)?;
    let result = monte_carlo_run(&cfg, &study, args.reps, &methods)?;
    let mut out = create(&args.out)?;
    result.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let data = load(&args.data)?;
    let level = args.level;
    let scores = args
        .scores
        .as_ref()
        .map(|p| load_scores(p, data.n(), None, &[]))
        .transpose()?;
    let (alpha, exclude) = match (&args.weights_file, &scores) {
        (Some(path), _) => {
            let alpha = read_weights(File::open(path)?, level)?;
            if alpha.len() != data.n() {
                return Err(Error::Shape(format!(
                    "weights file has {} rows, dataset has {}",
                    alpha.len(),
                    data.n()
                )));
            }
            (alpha, None)
        }
        (None, Some(scores)) => {
            let w = ic_weights(&data, scores, &[level], args.min_segment.min_segment)?
                .pop()
                .expect("one level");
            (w.alpha, Some(w.truncated))
        }
        (None, None) => {
            return Err(Error::Precondition("need --scores or --weights-file".into()));
        }
    };
    let mut out = output(args.out.as_deref())?;
    balance_report(&data, &alpha, level, exclude.as_deref())?.write_csv(&mut out)?;
    if let Some(scores) = &scores {
        writeln!(out, "# boundary_count={}", boundary_count(scores, data.treatment(), level)?)?;
    }
    if let Some(path) = &args.pi0_file {
        let truth = load_scores(path, data.n(), None, &[level])?;
        let pi = truth.get(level)?;
        writeln!(
            out,
            "# cal_error={}",
            crate::data::fmt_real(chi2_cal_error_oracle(&alpha, pi)?)
        )?;
        writeln!(
            out,
            "# weight_rmse={}",
            crate::data::fmt_real(weight_mse_oracle(&alpha, pi, data.treatment(), level)?)
        )?;
    }
    out.flush()?;
    Ok(())
}
