//! Isotonic calibration of cross-fitted propensity scores into stabilized
//! inverse propensity weights.
//!
//! The calibrated propensity `g` is a single isotonic regression of the
//! treatment indicator `1(A = a0)` on the pooled out-of-fold scores. The
//! weight map is `x -> 1 / max(c, g(x))`, where `c` is the smallest value of
//! `g` over rows with `A = a0`. Rows of the calibrated arm are never affected
//! by the truncation at `c`; it only keeps boundary rows of the other arms
//! (where `g` is zero) finite.
//!
//! Within every level set of the resulting weights that contains a row of
//! the calibrated arm, `mean(1(A = a0) * alpha) = 1` holds exactly.

use std::io::{Read, Write};

use crate::data::{fmt_real, parse_real, Dataset, ScoreTable, COMPLEMENT_TOL};
use crate::error::{Error, Result};
use crate::isotonic::{pava_fit, StepFunction, WeightedPoints};

/// Minimum segment weight used when the constraint is switched on without an
/// explicit value.
pub const DEFAULT_MIN_SEGMENT: f64 = 10.0;

/// Reusable calibrated weight map for one treatment level.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibrator {
    g: StepFunction,
    reflected: bool,
    c: f64,
    level: u32,
}

impl Calibrator {
    /// Calibrated propensity at score `x`.
    ///
    /// For a calibrator derived through the binary shortcut this is
    /// `1 - g1(1 - x)`, with `g1` the fit for the other level. `1 - x` is
    /// nudged up by the complementarity tolerance so that a score whose
    /// complement lands on a knot of `g1` up to rounding picks that knot's
    /// block.
    pub fn propensity(&self, x: f64) -> f64 {
        if self.reflected {
            1.0 - self.g.value_at(1.0 - x + COMPLEMENT_TOL)
        } else {
            self.g.value_at(x)
        }
    }

    /// Truncated inverse weight `1 / max(c, g(x))`.
    pub fn weight(&self, x: f64) -> f64 {
        1.0 / self.c.max(self.propensity(x))
    }

    /// Inverse weight without boundary truncation; infinite where `g(x) = 0`.
    pub fn untruncated_weight(&self, x: f64) -> f64 {
        1.0 / self.propensity(x)
    }

    /// The fitted isotonic step function (of the reflected level when
    /// [`Calibrator::is_reflected`]).
    pub fn step(&self) -> &StepFunction {
        &self.g
    }

    pub fn is_reflected(&self) -> bool {
        self.reflected
    }

    /// Truncation level.
    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn level(&self) -> u32 {
        self.level
    }
}

/// Per-row calibrated weights for one level, together with their calibrator.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedWeights {
    pub alpha: Vec<f64>,
    pub level: u32,
    pub calibrator: Calibrator,
    /// Rows whose untruncated calibrated propensity fell below `c`.
    pub truncated: Vec<bool>,
}

impl CalibratedWeights {
    pub fn truncated_count(&self) -> usize {
        self.truncated.iter().filter(|&&t| t).count()
    }
}

fn arm_indicator(data: &Dataset, level: u32) -> Vec<f64> {
    data.treatment()
        .iter()
        .map(|&a| if a == level { 1.0 } else { 0.0 })
        .collect()
}

fn check_rows(data: &Dataset, scores: &ScoreTable) -> Result<()> {
    if data.n() != scores.n() {
        return Err(Error::Shape(format!(
            "dataset has {} rows, scores have {}",
            data.n(),
            scores.n()
        )));
    }
    Ok(())
}

fn truncation_level(calibrator_g: impl Fn(usize) -> f64, data: &Dataset, level: u32) -> Result<f64> {
    data.treatment()
        .iter()
        .enumerate()
        .filter(|(_, &a)| a == level)
        .map(|(i, _)| calibrator_g(i))
        .reduce(f64::min)
        .ok_or_else(|| Error::EmptyArm(format!("no rows with treatment {level}")))
}

fn finish(calibrator: Calibrator, pi: &[f64]) -> CalibratedWeights {
    let alpha = pi.iter().map(|&x| calibrator.weight(x)).collect();
    let truncated = pi
        .iter()
        .map(|&x| calibrator.propensity(x) < calibrator.c)
        .collect();
    CalibratedWeights {
        alpha,
        level: calibrator.level,
        calibrator,
        truncated,
    }
}

/// Calibrate the scores of one treatment level into stabilized inverse
/// weights. `min_segment_weight = 0` disables the block-size constraint.
pub fn calibrate_weights(
    data: &Dataset,
    scores: &ScoreTable,
    level: u32,
    min_segment_weight: f64,
) -> Result<CalibratedWeights> {
    check_rows(data, scores)?;
    let pi = scores.get(level)?;
    if data.arm_size(level) == 0 {
        return Err(Error::EmptyArm(format!("no rows with treatment {level}")));
    }
    let points = WeightedPoints::unit(pi.to_vec(), arm_indicator(data, level))?;
    let g = pava_fit(&points, min_segment_weight)?;
    let c = truncation_level(|i| g.value_at(pi[i]), data, level)?;
    let calibrator = Calibrator {
        g,
        reflected: false,
        c,
        level,
    };
    Ok(finish(calibrator, pi))
}

/// Binary-treatment calibration with a single isotonic fit.
///
/// Fits `g1` on `(pi1, 1(A = 1))` and uses `g0(x) = 1 - g1(1 - x)` for the
/// control level. Requires complementary scores. Returns the weights for
/// levels 1 and 0, in that order.
pub fn calibrate_binary(
    data: &Dataset,
    scores: &ScoreTable,
    min_segment_weight: f64,
) -> Result<(CalibratedWeights, CalibratedWeights)> {
    check_rows(data, scores)?;
    if !data.is_binary() {
        return Err(Error::Precondition(
            "binary shortcut needs treatment labels in {0, 1}".into(),
        ));
    }
    if !scores.is_complementary() {
        return Err(Error::Precondition(
            "binary shortcut needs complementary scores (pi0 = 1 - pi1); calibrate each level separately"
                .into(),
        ));
    }
    let treated = calibrate_weights(data, scores, 1, min_segment_weight)?;
    let pi1 = scores.get(1)?;
    if data.arm_size(0) == 0 {
        return Err(Error::EmptyArm("no rows with treatment 0".into()));
    }

    // The control fit at row i is 1 - g1(pi1_i); evaluating through pi1
    // directly avoids re-rounding 1 - (1 - pi1_i).
    let g1 = &treated.calibrator.g;
    let g0_at = |i: usize| 1.0 - g1.value_at(pi1[i]);
    let c0 = truncation_level(g0_at, data, 0)?;
    let calibrator = Calibrator {
        g: g1.clone(),
        reflected: true,
        c: c0,
        level: 0,
    };
    let alpha = (0..data.n()).map(|i| 1.0 / c0.max(g0_at(i))).collect();
    let truncated = (0..data.n()).map(|i| g0_at(i) < c0).collect();
    let control = CalibratedWeights {
        alpha,
        level: 0,
        calibrator,
        truncated,
    };
    Ok((treated, control))
}

/// Apply a fitted calibrator to new scores.
pub fn apply_calibrator(cal: &Calibrator, new_scores: &[f64]) -> Result<Vec<f64>> {
    new_scores
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if (0.0..=1.0).contains(&x) {
                Ok(cal.weight(x))
            } else {
                Err(Error::range(i + 1, format!("score {x} is outside [0, 1]")))
            }
        })
        .collect()
}

/// Write weights CSV with one `alpha<level>_star` column per entry.
pub fn write_weights<W: Write>(writer: W, weights: &[&CalibratedWeights]) -> Result<()> {
    let columns: Vec<(u32, &[f64])> = weights.iter().map(|w| (w.level, w.alpha.as_slice())).collect();
    write_weight_columns(writer, &columns)
}

/// Write arbitrary per-level weight columns in the weights CSV layout.
pub fn write_weight_columns<W: Write>(writer: W, columns: &[(u32, &[f64])]) -> Result<()> {
    let n = columns.first().map_or(0, |(_, c)| c.len());
    if columns.iter().any(|(_, c)| c.len() != n) {
        return Err(Error::Shape("weight columns differ in length".into()));
    }
    let mut wtr = csv::Writer::from_writer(writer);
    let header: Vec<String> = columns.iter().map(|(l, _)| format!("alpha{l}_star")).collect();
    wtr.write_record(&header)?;
    for i in 0..n {
        wtr.write_record(columns.iter().map(|(_, c)| fmt_real(c[i])))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read the `alpha<level>_star` column of a weights CSV.
pub fn read_weights<R: Read>(reader: R, level: u32) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let name = format!("alpha{level}_star");
    let header = rdr.headers()?.clone();
    if header.is_empty() {
        return Err(Error::EmptyInput("weights file has no header row".into()));
    }
    let j = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn(name.clone()))?;
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        let field = rec.get(j).ok_or_else(|| Error::Parse {
            row,
            msg: format!("missing `{name}` field"),
        })?;
        out.push(parse_real(field, row, &name)?);
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("weights file has no data rows".into()));
    }
    Ok(out)
}
