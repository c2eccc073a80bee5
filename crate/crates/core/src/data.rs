//! Observed data `(W, A, Y)`, fold bookkeeping, and CSV ingestion of datasets
//! and user-supplied propensity scores.
//!
//! CSV is the only interchange format. Reals are written with 17 significant
//! digits so that a write/read cycle is bit-exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Tolerance for treating `pi1 + pi0 = 1` as exact complementarity.
pub const COMPLEMENT_TOL: f64 = 1e-9;

/// Render a real with 17 significant digits.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn parse_real(field: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        row,
        msg: format!("column `{column}`: `{field}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            msg: format!("column `{column}`: non-finite value `{field}`"),
        });
    }
    Ok(v)
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

fn read_header<R: Read>(rdr: &mut csv::Reader<R>, what: &str) -> Result<Vec<String>> {
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::EmptyInput(format!("{what} has no header row")));
    }
    Ok(header)
}

fn column_index(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn(name.to_owned()))
}

/// Observed data: covariates `W` (row-major, `n x d`), treatment labels `A`
/// and outcomes `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariate_names: Vec<String>,
    covariates: Vec<f64>,
    d: usize,
    treatment: Vec<u32>,
    outcome: Vec<f64>,
    levels: BTreeSet<u32>,
}

impl Dataset {
    /// Build a dataset from row-major covariates.
    pub fn new(
        covariate_names: Vec<String>,
        covariates: Vec<f64>,
        treatment: Vec<u32>,
        outcome: Vec<f64>,
    ) -> Result<Self> {
        let n = treatment.len();
        let d = covariate_names.len();
        if n == 0 {
            return Err(Error::EmptyInput("dataset has no rows".into()));
        }
        if d == 0 {
            return Err(Error::Shape("dataset needs at least one covariate".into()));
        }
        if outcome.len() != n || covariates.len() != n * d {
            return Err(Error::Shape(format!(
                "expected {n} outcomes and {} covariate entries, got {} and {}",
                n * d,
                outcome.len(),
                covariates.len()
            )));
        }
        if let Some(i) = covariates.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite covariate at row {}", i / d + 1)));
        }
        if let Some(i) = outcome.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite outcome at row {}", i + 1)));
        }
        let mut levels: BTreeSet<u32> = treatment.iter().copied().collect();
        levels.insert(0);
        levels.insert(1);
        Ok(Dataset {
            covariate_names,
            covariates,
            d,
            treatment,
            outcome,
            levels,
        })
    }

    /// Convenience constructor with generated covariate names `w1..wd`.
    pub fn from_rows(rows: &[Vec<f64>], treatment: Vec<u32>, outcome: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged covariate rows".into()));
        }
        let names = (1..=d).map(|j| format!("w{j}")).collect();
        Dataset::new(names, rows.concat(), treatment, outcome)
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.d..(i + 1) * self.d]
    }

    pub fn treatment(&self) -> &[u32] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    /// The treatment set: observed labels together with `{0, 1}`.
    pub fn levels(&self) -> &BTreeSet<u32> {
        &self.levels
    }

    pub fn is_binary(&self) -> bool {
        self.treatment.iter().all(|&a| a <= 1)
    }

    /// Number of rows with `A = level`.
    pub fn arm_size(&self, level: u32) -> usize {
        self.treatment.iter().filter(|&&a| a == level).count()
    }

    /// Parse a dataset from CSV. Every column other than the treatment and
    /// outcome columns is a covariate, kept in header order.
    pub fn from_csv_reader<R: Read>(
        reader: R,
        treatment_column: &str,
        outcome_column: &str,
    ) -> Result<Self> {
        let mut rdr = csv_reader(reader);
        let header = read_header(&mut rdr, "dataset")?;
        let a_idx = column_index(&header, treatment_column)?;
        let y_idx = column_index(&header, outcome_column)?;
        let cov_idx: Vec<usize> = (0..header.len()).filter(|&j| j != a_idx && j != y_idx).collect();
        let names = cov_idx.iter().map(|&j| header[j].clone()).collect();

        let mut covariates = Vec::new();
        let mut treatment = Vec::new();
        let mut outcome = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let row = k + 1;
            let rec = rec.map_err(|e| Error::Parse {
                row,
                msg: e.to_string(),
            })?;
            if rec.len() != header.len() {
                return Err(Error::Parse {
                    row,
                    msg: format!("expected {} fields, found {}", header.len(), rec.len()),
                });
            }
            for &j in &cov_idx {
                covariates.push(parse_real(&rec[j], row, &header[j])?);
            }
            let a = rec[a_idx].parse::<u32>().map_err(|_| Error::Parse {
                row,
                msg: format!(
                    "treatment `{}` is not a nonnegative integer label",
                    &rec[a_idx]
                ),
            })?;
            treatment.push(a);
            outcome.push(parse_real(&rec[y_idx], row, outcome_column)?);
        }
        if treatment.is_empty() {
            return Err(Error::EmptyInput("dataset has no data rows".into()));
        }
        if cov_idx.is_empty() {
            return Err(Error::Shape("dataset has no covariate columns".into()));
        }
        Dataset::new(names, covariates, treatment, outcome)
    }

    /// Write the dataset as CSV with header `w1,...,wd,<a>,<y>`.
    pub fn write_csv<W: Write>(
        &self,
        writer: W,
        treatment_column: &str,
        outcome_column: &str,
    ) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.covariate_names.iter().map(String::as_str).collect();
        header.push(treatment_column);
        header.push(outcome_column);
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.row(i).iter().map(|&v| fmt_real(v)).collect();
            rec.push(self.treatment[i].to_string());
            rec.push(fmt_real(self.outcome[i]));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Load a dataset CSV from disk.
pub fn load_dataset(
    path: impl AsRef<Path>,
    treatment_column: &str,
    outcome_column: &str,
) -> Result<Dataset> {
    let file = File::open(path)?;
    Dataset::from_csv_reader(file, treatment_column, outcome_column)
}

pub fn write_dataset(
    data: &Dataset,
    path: impl AsRef<Path>,
    treatment_column: &str,
    outcome_column: &str,
) -> Result<()> {
    let file = File::create(path)?;
    data.write_csv(file, treatment_column, outcome_column)
}

/// Cross-fitting partition: `fold_of[i]` in `1..=folds` for every row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    folds: usize,
}

impl FoldAssignment {
    /// Wrap explicit labels; every fold in `1..=folds` must be non-empty.
    pub fn from_labels(fold_of: Vec<usize>) -> Result<Self> {
        if fold_of.is_empty() {
            return Err(Error::EmptyInput("fold labels are empty".into()));
        }
        if let Some(i) = fold_of.iter().position(|&f| f == 0) {
            return Err(Error::range(i + 1, "fold labels start at 1"));
        }
        let folds = *fold_of.iter().max().expect("non-empty");
        let mut seen = vec![false; folds];
        for &f in &fold_of {
            seen[f - 1] = true;
        }
        if let Some(f) = seen.iter().position(|s| !s) {
            return Err(Error::Shape(format!("fold {} has no rows", f + 1)));
        }
        Ok(FoldAssignment { fold_of, folds })
    }

    /// All rows in one fold.
    pub fn single(n: usize) -> Self {
        FoldAssignment {
            fold_of: vec![1; n],
            folds: 1,
        }
    }

    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    /// Row indices belonging to fold `s` (1-based).
    pub fn members(&self, s: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] == s).collect()
    }
}

/// Seeded random partition of `n` rows into `folds` contiguous blocks of a
/// uniform permutation. Block sizes differ by at most one.
pub fn assign_folds(n: usize, folds: usize, seed: u64) -> Result<FoldAssignment> {
    if folds < 1 || folds > n {
        return Err(Error::InvalidFoldCount { folds, n });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);

    let base = n / folds;
    let extra = n % folds;
    let mut fold_of = vec![0; n];
    let mut pos = 0;
    for s in 0..folds {
        let size = base + usize::from(s < extra);
        for &row in &perm[pos..pos + size] {
            fold_of[row] = s + 1;
        }
        pos += size;
    }
    Ok(FoldAssignment { fold_of, folds })
}

/// Out-of-fold propensity estimates `pi_{n,j(i)}(a | W_i)` per treatment level.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    folds: FoldAssignment,
    scores: BTreeMap<u32, Vec<f64>>,
    complementary: bool,
}

impl ScoreTable {
    pub fn new(folds: FoldAssignment, scores: BTreeMap<u32, Vec<f64>>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput("score table has no levels".into()));
        }
        let n = folds.n();
        for (level, col) in &scores {
            if col.len() != n {
                return Err(Error::Shape(format!(
                    "scores for level {level} have {} rows, expected {n}",
                    col.len()
                )));
            }
            if let Some(i) = col.iter().position(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::range(
                    i + 1,
                    format!("pi{level} = {} is outside [0, 1]", col[i]),
                ));
            }
        }
        let complementary = match (scores.get(&1), scores.get(&0)) {
            (Some(p1), Some(p0)) => p1
                .iter()
                .zip(p0)
                .all(|(a, b)| (a + b - 1.0).abs() <= COMPLEMENT_TOL),
            _ => false,
        };
        Ok(ScoreTable {
            folds,
            scores,
            complementary,
        })
    }

    /// Binary table with `pi0 = 1 - pi1`.
    pub fn from_treated(folds: FoldAssignment, pi1: Vec<f64>) -> Result<Self> {
        let pi0 = pi1.iter().map(|p| 1.0 - p).collect();
        ScoreTable::new(folds, BTreeMap::from([(0, pi0), (1, pi1)]))
    }

    pub fn n(&self) -> usize {
        self.folds.n()
    }

    pub fn folds(&self) -> &FoldAssignment {
        &self.folds
    }

    pub fn levels(&self) -> impl Iterator<Item = u32> + '_ {
        self.scores.keys().copied()
    }

    pub fn get(&self, level: u32) -> Result<&[f64]> {
        self.scores
            .get(&level)
            .map(Vec::as_slice)
            .ok_or(Error::MissingLevel(level))
    }

    /// True when levels 0 and 1 are both present and sum to one row-wise.
    pub fn is_complementary(&self) -> bool {
        self.complementary
    }

    /// Parse a scores CSV with per-level columns `pi<level>` and an optional
    /// `fold` column. When `levels` is empty every `pi<k>` column is read.
    /// A fold column in the file takes precedence over `folds`; without
    /// either, all rows are placed in a single fold.
    pub fn from_csv_reader<R: Read>(
        reader: R,
        expected_rows: Option<usize>,
        folds: Option<&FoldAssignment>,
        levels: &[u32],
    ) -> Result<Self> {
        let mut rdr = csv_reader(reader);
        let header = read_header(&mut rdr, "scores")?;
        let fold_idx = header.iter().position(|h| h == "fold");
        let level_cols: Vec<(u32, usize)> = if levels.is_empty() {
            header
                .iter()
                .enumerate()
                .filter_map(|(j, h)| {
                    h.strip_prefix("pi")
                        .and_then(|s| s.parse::<u32>().ok())
                        .map(|l| (l, j))
                })
                .collect()
        } else {
            levels
                .iter()
                .map(|&l| column_index(&header, &format!("pi{l}")).map(|j| (l, j)))
                .collect::<Result<_>>()?
        };
        if level_cols.is_empty() {
            return Err(Error::MissingColumn("pi<level>".into()));
        }

        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); level_cols.len()];
        let mut fold_labels = Vec::new();
        let mut rows = 0;
        for (k, rec) in rdr.records().enumerate() {
            let row = k + 1;
            let rec = rec.map_err(|e| Error::Parse {
                row,
                msg: e.to_string(),
            })?;
            if rec.len() != header.len() {
                return Err(Error::Parse {
                    row,
                    msg: format!("expected {} fields, found {}", header.len(), rec.len()),
                });
            }
            for (col, &(level, j)) in cols.iter_mut().zip(&level_cols) {
                let p = parse_real(&rec[j], row, &header[j])?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::range(row, format!("pi{level} = {p} is outside [0, 1]")));
                }
                col.push(p);
            }
            if let Some(j) = fold_idx {
                let f = rec[j].parse::<usize>().map_err(|_| Error::Parse {
                    row,
                    msg: format!("fold `{}` is not a positive integer", &rec[j]),
                })?;
                fold_labels.push(f);
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::EmptyInput("scores file has no data rows".into()));
        }
        if let Some(expected) = expected_rows {
            if rows != expected {
                return Err(Error::Shape(format!(
                    "scores file has {rows} rows, dataset has {expected}"
                )));
            }
        }
        let folds = match (fold_idx, folds) {
            (Some(_), _) => FoldAssignment::from_labels(fold_labels)?,
            (None, Some(f)) => {
                if f.n() != rows {
                    return Err(Error::Shape(format!(
                        "fold assignment covers {} rows, scores file has {rows}",
                        f.n()
                    )));
                }
                f.clone()
            }
            (None, None) => FoldAssignment::single(rows),
        };
        let scores = level_cols.iter().map(|&(l, _)| l).zip(cols).collect();
        ScoreTable::new(folds, scores)
    }

    /// Write `fold,pi<l>...` with levels in descending order (`fold,pi1,pi0`).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let levels: Vec<u32> = self.scores.keys().rev().copied().collect();
        let mut header = vec!["fold".to_owned()];
        header.extend(levels.iter().map(|l| format!("pi{l}")));
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.folds.fold_of[i].to_string()];
            rec.extend(levels.iter().map(|l| fmt_real(self.scores[l][i])));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Load a scores CSV aligned 1:1 with a dataset of `expected_rows` rows.
pub fn load_scores(
    path: impl AsRef<Path>,
    expected_rows: usize,
    folds: Option<&FoldAssignment>,
    levels: &[u32],
) -> Result<ScoreTable> {
    let file = File::open(path)?;
    ScoreTable::from_csv_reader(file, Some(expected_rows), folds, levels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset> {
        Dataset::from_csv_reader(text.as_bytes(), "a", "y")
    }

    #[test]
    fn parses_small_dataset() {
        let d = parse("w1,w2,a,y\n0.1,2,1,3.5\n-1e-3,0,0,1\n4,5,1,-2\n").unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.d(), 2);
        assert_eq!(d.row(1), &[-1e-3, 0.0]);
        assert_eq!(d.treatment(), &[1, 0, 1]);
        assert_eq!(d.covariate_names(), &["w1", "w2"]);
    }

    #[test]
    fn covariates_follow_header_order_around_a_and_y() {
        let d = parse("a,z,y,b\n1,2,3,4\n").unwrap();
        assert_eq!(d.covariate_names(), &["z", "b"]);
        assert_eq!(d.row(0), &[2.0, 4.0]);
    }

    #[test]
    fn multilevel_treatment_is_accepted() {
        let d = parse("w1,a,y\n0,0,1\n1,1,1\n2,2,1\n").unwrap();
        assert_eq!(d.levels().iter().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(!d.is_binary());
    }

    #[test]
    fn bad_outcome_cites_row() {
        let text = "w1,a,y\n1,0,1\n1,0,1\n1,0,1\n1,0,1\n1,1,abc\n";
        match parse(text) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_nan_missing_columns_and_empty() {
        assert!(matches!(parse("w1,a,y\nNaN,1,1\n"), Err(Error::Parse { row: 1, .. })));
        assert!(matches!(parse("w1,a,y\n,1,1\n"), Err(Error::Parse { row: 1, .. })));
        assert!(matches!(parse("w1,y\n1,1\n"), Err(Error::MissingColumn(c)) if c == "a"));
        assert!(matches!(parse(""), Err(Error::EmptyInput(_))));
        assert!(matches!(parse("w1,a,y\n"), Err(Error::EmptyInput(_))));
        assert!(matches!(parse("w1,a,y\n1,-1,1\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse("a,y\n1,1\n"), Err(Error::Shape(_))));
    }

    #[test]
    fn fold_sizes() {
        let f = assign_folds(10, 5, 7).unwrap();
        for s in 1..=5 {
            assert_eq!(f.members(s).len(), 2);
        }
        let f = assign_folds(7, 3, 7).unwrap();
        let mut sizes: Vec<usize> = (1..=3).map(|s| f.members(s).len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 3]);
        assert_eq!(assign_folds(7, 3, 99).unwrap(), assign_folds(7, 3, 99).unwrap());
        assert_ne!(assign_folds(100, 3, 1).unwrap(), assign_folds(100, 3, 2).unwrap());
    }

    #[test]
    fn invalid_fold_counts() {
        assert!(matches!(assign_folds(3, 4, 0), Err(Error::InvalidFoldCount { .. })));
        assert!(matches!(assign_folds(3, 0, 0), Err(Error::InvalidFoldCount { .. })));
        assert!(assign_folds(3, 3, 0).is_ok());
    }

    #[test]
    fn scores_complementary_flag() {
        let t = ScoreTable::from_csv_reader(
            "fold,pi1,pi0\n1,0.2,0.8\n2,0.8,0.2\n".as_bytes(),
            Some(2),
            None,
            &[1, 0],
        )
        .unwrap();
        assert!(t.is_complementary());
        assert_eq!(t.folds().folds(), 2);

        let t = ScoreTable::from_csv_reader(
            "pi1,pi0\n0.2,0.7\n0.8,0.2\n".as_bytes(),
            Some(2),
            None,
            &[1, 0],
        )
        .unwrap();
        assert!(!t.is_complementary());
    }

    #[test]
    fn score_range_and_shape_errors() {
        let err = ScoreTable::from_csv_reader(
            "pi1\n0.1\n0.2\n1.2\n".as_bytes(),
            None,
            None,
            &[1],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Range { row: Some(3), .. }));
        let err =
            ScoreTable::from_csv_reader("pi1\n0.1\n".as_bytes(), Some(2), None, &[1]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let err =
            ScoreTable::from_csv_reader("pi1\n0.1\n".as_bytes(), Some(1), None, &[0]).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "pi0"));
    }

    #[test]
    fn partial_levels() {
        let t = ScoreTable::from_csv_reader("pi1\n0.1\n0.5\n".as_bytes(), Some(2), None, &[1])
            .unwrap();
        assert_eq!(t.levels().collect::<Vec<_>>(), vec![1]);
        assert!(t.get(0).is_err());
        assert!(!t.is_complementary());
    }

    #[test]
    fn external_folds_are_used_without_fold_column() {
        let f = FoldAssignment::from_labels(vec![2, 1, 2]).unwrap();
        let t = ScoreTable::from_csv_reader("pi1\n0.1\n0.5\n0.3\n".as_bytes(), Some(3), Some(&f), &[])
            .unwrap();
        assert_eq!(t.folds(), &f);
        assert!(FoldAssignment::from_labels(vec![1, 3]).is_err());
    }
}
