//! Weighted isotonic and antitonic least-squares regression.
//!
//! [`pava_fit`] is a stack-based pool-adjacent-violators pass over points
//! sorted by `x`, so the work after sorting is linear in the number of
//! points. Exact ties in `x` are pooled into one weighted point first, which
//! makes the fitted step function unique.
//!
//! An optional minimum block weight emulates a constrained monotone fit:
//! after PAVA, any block lighter than the minimum is merged with the
//! neighbour whose pooled mean costs the least squared error, preferring the
//! left neighbour on ties. Merging adjacent blocks of a monotone sequence
//! keeps it monotone.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Largest input accepted by [`brute_force_isotonic`].
pub const BRUTE_FORCE_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Increasing,
    Decreasing,
}

/// Right-continuous piecewise-constant monotone function.
///
/// `values[k]` holds on `[knots[k], knots[k + 1])`. Inputs below the first
/// knot take `values[0]`, inputs at or above the last knot take the last
/// value.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    knots: Vec<f64>,
    values: Vec<f64>,
    direction: Direction,
}

impl StepFunction {
    pub fn new(knots: Vec<f64>, values: Vec<f64>, direction: Direction) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::EmptyInput("step function needs at least one knot".into()));
        }
        if knots.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} knots but {} values",
                knots.len(),
                values.len()
            )));
        }
        if knots.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::Domain("knots and values must be finite".into()));
        }
        if knots.windows(2).any(|k| k[0] >= k[1]) {
            return Err(Error::Domain("knots must be strictly increasing".into()));
        }
        let monotone = match direction {
            Direction::Increasing => values.windows(2).all(|v| v[0] <= v[1]),
            Direction::Decreasing => values.windows(2).all(|v| v[0] >= v[1]),
        };
        if !monotone {
            return Err(Error::Domain(format!("values are not {direction:?}")));
        }
        Ok(StepFunction {
            knots,
            values,
            direction,
        })
    }

    /// Constant function with a single block.
    pub fn constant(knot: f64, value: f64, direction: Direction) -> Result<Self> {
        StepFunction::new(vec![knot], vec![value], direction)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn left_value(&self) -> f64 {
        self.values[0]
    }

    pub fn blocks(&self) -> usize {
        self.values.len()
    }

    /// Index of the block containing `x` (clamped to the boundary blocks).
    pub fn block_index(&self, x: f64) -> usize {
        self.knots.partition_point(|&k| k <= x).saturating_sub(1)
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::Domain(format!("cannot evaluate step function at {x}")));
        }
        Ok(self.value_at(x))
    }

    /// Evaluation without the finiteness check; NaN maps to the first block.
    pub(crate) fn value_at(&self, x: f64) -> f64 {
        self.values[self.block_index(x)]
    }
}

/// Step-function evaluation with boundary clamping.
pub fn step_eval(f: &StepFunction, x: f64) -> Result<f64> {
    f.eval(x)
}

/// Regression input: abscissae, responses and strictly positive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPoints {
    x: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl WeightedPoints {
    pub fn new(x: Vec<f64>, y: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.len() != w.len() {
            return Err(Error::Shape(format!(
                "x, y, w lengths differ: {}, {}, {}",
                x.len(),
                y.len(),
                w.len()
            )));
        }
        if x.is_empty() {
            return Err(Error::EmptyInput("no points to fit".into()));
        }
        if let Some(i) = x.iter().zip(&y).position(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(Error::Domain(format!("non-finite x or y at point {}", i + 1)));
        }
        if let Some(i) = w.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Domain(format!("weight {} at point {} is not positive", w[i], i + 1)));
        }
        Ok(WeightedPoints { x, y, w })
    }

    /// Unit weights.
    pub fn unit(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let w = vec![1.0; x.len()];
        WeightedPoints::new(x, y, w)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    fn negated(&self) -> WeightedPoints {
        WeightedPoints {
            x: self.x.clone(),
            y: self.y.iter().map(|v| -v).collect(),
            w: self.w.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    start: f64,
    weight: f64,
    weighted_sum: f64,
    min_y: f64,
    max_y: f64,
}

impl Block {
    fn new(start: f64, w: f64, y: f64) -> Self {
        Block {
            start,
            weight: w,
            weighted_sum: w * y,
            min_y: y,
            max_y: y,
        }
    }

    /// Weighted mean of the members; exact when all members share one value.
    fn mean(&self) -> f64 {
        if self.min_y == self.max_y {
            self.min_y
        } else {
            self.weighted_sum / self.weight
        }
    }

    fn absorb(&mut self, other: &Block) {
        self.weight += other.weight;
        self.weighted_sum += other.weighted_sum;
        self.min_y = self.min_y.min(other.min_y);
        self.max_y = self.max_y.max(other.max_y);
    }
}

/// Sort by `x` and pool exact ties into single weighted points.
fn sorted_tie_groups(points: &WeightedPoints) -> Vec<Block> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points.x[a].total_cmp(&points.x[b]));
    let mut groups: Vec<Block> = Vec::with_capacity(order.len());
    for i in order {
        let b = Block::new(points.x[i], points.w[i], points.y[i]);
        match groups.last_mut() {
            Some(last) if last.start == b.start => last.absorb(&b),
            _ => groups.push(b),
        }
    }
    groups
}

fn pool_adjacent_violators(groups: Vec<Block>) -> Vec<Block> {
    let mut stack: Vec<Block> = Vec::with_capacity(groups.len());
    for g in groups {
        stack.push(g);
        while stack.len() >= 2 {
            let k = stack.len();
            let top = stack[k - 1];
            let below = &mut stack[k - 2];
            if below.mean() < top.mean() {
                break;
            }
            below.absorb(&top);
            stack.pop();
        }
    }
    stack
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapKey {
    weight: f64,
    index: usize,
}

impl Eq for HeapKey {}

impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.weight
            .total_cmp(&other.weight)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn merge_cost(a: &Block, b: &Block) -> f64 {
    let diff = a.mean() - b.mean();
    a.weight * b.weight / (a.weight + b.weight) * diff * diff
}

/// Merge blocks lighter than `min_weight` into their cheaper neighbour,
/// lightest block first (leftmost on equal weight).
fn enforce_min_weight(blocks: Vec<Block>, min_weight: f64) -> Vec<Block> {
    let k = blocks.len();
    if min_weight <= 0.0 || k < 2 {
        return blocks;
    }
    let mut blocks = blocks;
    let mut alive = vec![true; k];
    let mut prev: Vec<Option<usize>> = (0..k).map(|i| i.checked_sub(1)).collect();
    let mut next: Vec<Option<usize>> = (0..k).map(|i| (i + 1 < k).then_some(i + 1)).collect();
    let mut heap: BinaryHeap<Reverse<HeapKey>> = blocks
        .iter()
        .enumerate()
        .map(|(index, b)| Reverse(HeapKey { weight: b.weight, index }))
        .collect();
    let mut remaining = k;

    while let Some(Reverse(key)) = heap.pop() {
        let i = key.index;
        if !alive[i] || blocks[i].weight != key.weight {
            continue;
        }
        if key.weight >= min_weight || remaining == 1 {
            break;
        }
        let left_cost = prev[i].map(|p| merge_cost(&blocks[p], &blocks[i]));
        let right_cost = next[i].map(|q| merge_cost(&blocks[i], &blocks[q]));
        // (kept, removed): the left block of the pair survives.
        let (kept, removed) = match (left_cost, right_cost) {
            (Some(l), Some(r)) if l <= r => (prev[i].unwrap(), i),
            (Some(_), Some(_)) | (None, Some(_)) => (i, next[i].unwrap()),
            (Some(_), None) => (prev[i].unwrap(), i),
            (None, None) => break,
        };
        let absorbed = blocks[removed];
        blocks[kept].absorb(&absorbed);
        alive[removed] = false;
        next[kept] = next[removed];
        if let Some(q) = next[removed] {
            prev[q] = Some(kept);
        }
        remaining -= 1;
        heap.push(Reverse(HeapKey {
            weight: blocks[kept].weight,
            index: kept,
        }));
    }
    blocks
        .into_iter()
        .zip(alive)
        .filter_map(|(b, a)| a.then_some(b))
        .collect()
}

fn to_step(blocks: &[Block], direction: Direction) -> Result<StepFunction> {
    let knots = blocks.iter().map(|b| b.start).collect();
    let values = blocks.iter().map(Block::mean).collect();
    StepFunction::new(knots, values, direction)
}

fn check_min_weight(min_segment_weight: f64) -> Result<()> {
    if !(min_segment_weight.is_finite() && min_segment_weight >= 0.0) {
        return Err(Error::range_msg(format!(
            "minimum segment weight {min_segment_weight} must be a nonnegative real"
        )));
    }
    Ok(())
}

/// Weighted least-squares nondecreasing fit.
///
/// `min_segment_weight = 0` gives the plain PAVA solution.
pub fn pava_fit(points: &WeightedPoints, min_segment_weight: f64) -> Result<StepFunction> {
    check_min_weight(min_segment_weight)?;
    let blocks = pool_adjacent_violators(sorted_tie_groups(points));
    let blocks = enforce_min_weight(blocks, min_segment_weight);
    to_step(&blocks, Direction::Increasing)
}

/// Weighted least-squares nonincreasing fit, computed as the negated
/// isotonic fit of `-y`.
pub fn antitonic_fit(points: &WeightedPoints, min_segment_weight: f64) -> Result<StepFunction> {
    let neg = pava_fit(&points.negated(), min_segment_weight)?;
    let values = neg.values.iter().map(|v| -v).collect();
    StepFunction::new(neg.knots, values, Direction::Decreasing)
}

/// Fit in the requested direction.
pub fn monotone_fit(
    points: &WeightedPoints,
    direction: Direction,
    min_segment_weight: f64,
) -> Result<StepFunction> {
    match direction {
        Direction::Increasing => pava_fit(points, min_segment_weight),
        Direction::Decreasing => antitonic_fit(points, min_segment_weight),
    }
}

/// Values of `f` at each point's `x`, in input order.
pub fn fitted_values(f: &StepFunction, points: &WeightedPoints) -> Vec<f64> {
    points.x.iter().map(|&x| f.value_at(x)).collect()
}

/// Exhaustive search over contiguous partitions; a test oracle for
/// [`pava_fit`]. Only usable for at most [`BRUTE_FORCE_LIMIT`] points.
pub fn brute_force_isotonic(points: &WeightedPoints) -> Result<StepFunction> {
    brute_force_fit(points, Direction::Increasing)
}

/// [`brute_force_isotonic`] in either direction.
pub fn brute_force_fit(points: &WeightedPoints, direction: Direction) -> Result<StepFunction> {
    if points.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::SizeLimit {
            size: points.len(),
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let groups = sorted_tie_groups(points);
    let m = groups.len();
    let mut best: Option<(f64, Vec<Block>)> = None;
    for mask in 0u32..(1 << (m - 1)) {
        // Bit k set: a block boundary between groups k and k + 1.
        let mut blocks: Vec<Block> = Vec::new();
        for (k, g) in groups.iter().enumerate() {
            let starts_new = k == 0 || mask & (1 << (k - 1)) != 0;
            if starts_new {
                blocks.push(*g);
            } else {
                blocks.last_mut().expect("first group opens a block").absorb(g);
            }
        }
        let monotone = blocks.windows(2).all(|b| match direction {
            Direction::Increasing => b[0].mean() <= b[1].mean(),
            Direction::Decreasing => b[0].mean() >= b[1].mean(),
        });
        if !monotone {
            continue;
        }
        let mut sse = 0.0;
        let mut bi = 0;
        for (k, g) in groups.iter().enumerate() {
            if k > 0 && mask & (1 << (k - 1)) != 0 {
                bi += 1;
            }
            let r = g.mean() - blocks[bi].mean();
            sse += g.weight * r * r;
        }
        if best.as_ref().is_none_or(|(s, _)| sse < *s) {
            best = Some((sse, blocks));
        }
    }
    let (_, blocks) = best.expect("the single-block partition is always monotone");
    to_step(&blocks, direction)
}
