//! Balance, calibration and overlap diagnostics for a weight sequence.

use std::collections::BTreeMap;
use std::io::Write;

use crate::data::{fmt_real, Dataset, ScoreTable};
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceRow {
    pub level_value: f64,
    pub count: usize,
    /// `(1 / count) * sum of 1(A = level) * alpha` over the level set.
    pub stabilized_mean: f64,
    pub deviation: f64,
    /// Number of rows in the level set with `A = level`.
    pub own_arm: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub level: u32,
    pub rows: Vec<BalanceRow>,
    pub max_abs_deviation: f64,
    /// Rows left out of every level set by the caller's exclusion mask.
    pub excluded: usize,
}

impl BalanceReport {
    /// Largest deviation among level sets that contain at least one row of
    /// the calibrated arm.
    pub fn max_abs_deviation_own_arm(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.own_arm > 0)
            .map(|r| r.deviation.abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "level_value,count,stabilized_mean,deviation")?;
        for r in &self.rows {
            writeln!(
                writer,
                "{},{},{},{}",
                fmt_real(r.level_value),
                r.count,
                fmt_real(r.stabilized_mean),
                fmt_real(r.deviation)
            )?;
        }
        writeln!(
            writer,
            "# level={} level_sets={} excluded={} max_abs_deviation={}",
            self.level,
            self.rows.len(),
            self.excluded,
            fmt_real(self.max_abs_deviation)
        )?;
        Ok(())
    }
}

/// Group rows by exact weight value and report how far each level set is
/// from the stabilization identity `mean(1(A = level) * alpha) = 1`.
///
/// Rows flagged in `exclude` (typically truncated boundary rows) are counted
/// but not assigned to any level set.
pub fn balance_report(
    data: &Dataset,
    alpha: &[f64],
    level: u32,
    exclude: Option<&[bool]>,
) -> Result<BalanceReport> {
    let n = data.n();
    if alpha.len() != n || exclude.is_some_and(|m| m.len() != n) {
        return Err(Error::Shape(format!("weights and mask must have {n} entries")));
    }
    let mut groups: BTreeMap<u64, (f64, usize, f64, usize)> = BTreeMap::new();
    let mut excluded = 0;
    for i in 0..n {
        if exclude.is_some_and(|m| m[i]) {
            excluded += 1;
            continue;
        }
        let own = data.treatment()[i] == level;
        let entry = groups.entry(order_key(alpha[i])).or_insert((alpha[i], 0, 0.0, 0));
        entry.1 += 1;
        if own {
            entry.2 += alpha[i];
            entry.3 += 1;
        }
    }
    let rows: Vec<BalanceRow> = groups
        .into_values()
        .map(|(value, count, sum, own_arm)| {
            let stabilized_mean = sum / count as f64;
            BalanceRow {
                level_value: value,
                count,
                stabilized_mean,
                deviation: stabilized_mean - 1.0,
                own_arm,
            }
        })
        .collect();
    let max_abs_deviation = rows.iter().map(|r| r.deviation.abs()).fold(0.0, f64::max);
    Ok(BalanceReport {
        level,
        rows,
        max_abs_deviation,
        excluded,
    })
}

/// Map a float to a key whose unsigned order matches `total_cmp`.
fn order_key(x: f64) -> u64 {
    let bits = x.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

fn check_lengths(alpha: &[f64], pi0_true: &[f64]) -> Result<()> {
    if alpha.len() != pi0_true.len() {
        return Err(Error::Shape(format!(
            "{} weights but {} true propensities",
            alpha.len(),
            pi0_true.len()
        )));
    }
    if alpha.is_empty() {
        return Err(Error::EmptyInput("no weights".into()));
    }
    Ok(())
}

fn cal_error_by_group(alpha: &[f64], pi0_true: &[f64], group: &[u64]) -> f64 {
    let mut sums: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (&g, &p) in group.iter().zip(pi0_true) {
        let e = sums.entry(g).or_insert((0.0, 0));
        e.0 += p;
        e.1 += 1;
    }
    let n = alpha.len() as f64;
    alpha
        .iter()
        .zip(group)
        .map(|(&a, g)| {
            let (s, c) = sums[g];
            (s / c as f64 * a - 1.0).powi(2)
        })
        .sum::<f64>()
        / n
}

/// Plug-in chi-squared calibration error with level sets taken as exact
/// weight values. Needs the true propensities, so it is for simulations.
pub fn chi2_cal_error_oracle(alpha: &[f64], pi0_true: &[f64]) -> Result<f64> {
    check_lengths(alpha, pi0_true)?;
    let keys: Vec<u64> = alpha.iter().map(|&a| order_key(a)).collect();
    Ok(cal_error_by_group(alpha, pi0_true, &keys))
}

/// As [`chi2_cal_error_oracle`] but grouping weights into `bins` quantile
/// bins first, for continuous-valued weights. Equal weights share a bin.
pub fn chi2_cal_error_oracle_binned(alpha: &[f64], pi0_true: &[f64], bins: usize) -> Result<f64> {
    check_lengths(alpha, pi0_true)?;
    if bins == 0 {
        return Err(Error::range_msg("bin count must be positive"));
    }
    let n = alpha.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| alpha[i].total_cmp(&alpha[j]));
    let mut bin = vec![0u64; n];
    let mut first = 0;
    for r in 0..n {
        if r > 0 && alpha[order[r]].total_cmp(&alpha[order[r - 1]]).is_ne() {
            first = r;
        }
        bin[order[r]] = (first * bins / n) as u64;
    }
    Ok(cal_error_by_group(alpha, pi0_true, &bin))
}

/// Root mean squared error of weights for `level` against the true inverse
/// propensity `1 / pi0_true`, averaged over all rows. `treatment` and
/// `level` are only checked for consistency with the weights.
pub fn weight_mse_oracle(alpha: &[f64], pi0_true: &[f64], treatment: &[u32], level: u32) -> Result<f64> {
    check_lengths(alpha, pi0_true)?;
    if treatment.len() != alpha.len() {
        return Err(Error::Shape("treatment and weights differ in length".into()));
    }
    if !treatment.contains(&level) {
        return Err(Error::EmptyArm(format!("no rows with treatment {level}")));
    }
    if let Some(i) = pi0_true.iter().position(|&p| p == 0.0) {
        return Err(Error::Domain(format!("true propensity is zero at row {}", i + 1)));
    }
    let sum: f64 = alpha
        .iter()
        .zip(pi0_true)
        .map(|(&w, &p)| (w - 1.0 / p).powi(2))
        .sum();
    Ok((sum / alpha.len() as f64).sqrt())
}

/// Rows outside `level` whose score is strictly below every score of the
/// `level` arm.
pub fn boundary_count(scores: &ScoreTable, treatment: &[u32], level: u32) -> Result<usize> {
    let pi = scores.get(level)?;
    if treatment.len() != pi.len() {
        return Err(Error::Shape("treatment and scores differ in length".into()));
    }
    let floor = pi
        .iter()
        .zip(treatment)
        .filter(|(_, &a)| a == level)
        .map(|(&p, _)| p)
        .fold(f64::INFINITY, f64::min);
    if floor == f64::INFINITY {
        return Err(Error::EmptyArm(format!("no rows with treatment {level}")));
    }
    Ok(pi
        .iter()
        .zip(treatment)
        .filter(|(&p, &a)| a != level && p < floor)
        .count())
}
