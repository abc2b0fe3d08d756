//! B-spline bases on `[0, 1]`, difference penalties and interaction helpers.
//!
//! Knot vectors are clamped: the boundary knots 0 and 1 are repeated
//! `degree + 1` times, so with `k` distinct knots there are `k + d - 1`
//! basis functions.

use serde::{Deserialize, Serialize};

use crate::error::{QspecError, Result};

/// How many distinct knots to place on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "KnotRuleRepr", into = "KnotRuleRepr")]
pub enum KnotRule {
    /// Explicit number of knots, boundaries included.
    Count(usize),
    /// `ceil(sqrt(n))` knots for `n` observations.
    SqrtN,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KnotRuleRepr {
    Count(usize),
    Name(String),
}

impl TryFrom<KnotRuleRepr> for KnotRule {
    type Error = String;
    fn try_from(value: KnotRuleRepr) -> std::result::Result<Self, String> {
        match value {
            KnotRuleRepr::Count(c) => Ok(KnotRule::Count(c)),
            KnotRuleRepr::Name(s) if s == "sqrt-n" => Ok(KnotRule::SqrtN),
            KnotRuleRepr::Name(s) => Err(format!("unknown knot rule {s:?} (expected a count or \"sqrt-n\")")),
        }
    }
}

impl From<KnotRule> for KnotRuleRepr {
    fn from(rule: KnotRule) -> Self {
        match rule {
            KnotRule::Count(c) => KnotRuleRepr::Count(c),
            KnotRule::SqrtN => KnotRuleRepr::Name("sqrt-n".into()),
        }
    }
}

/// Distinct knots `0 = t_1 < ... < t_k = 1` plus the spline degree.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    knots: Vec<f64>,
    degree: usize,
    // clamped vector: knots with each endpoint repeated `degree` extra times
    full: Vec<f64>,
}

impl KnotVector {
    pub fn new(knots: Vec<f64>, degree: usize) -> Result<Self> {
        if knots.len() < 2 {
            return Err(QspecError::InvalidConfig(format!(
                "a knot vector needs at least 2 knots, got {}",
                knots.len()
            )));
        }
        if knots[0] != 0.0 || knots[knots.len() - 1] != 1.0 {
            return Err(QspecError::InvalidConfig("boundary knots must be 0 and 1".into()));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(QspecError::InvalidConfig("knots must be strictly increasing".into()));
        }
        if degree > 3 {
            return Err(QspecError::InvalidConfig(format!("spline degree {degree} is not in 0..=3")));
        }
        let mut full = vec![0.0; degree];
        full.extend_from_slice(&knots);
        full.extend(std::iter::repeat_n(1.0, degree));
        Ok(KnotVector { knots, degree, full })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of basis functions, `k + d - 1`.
    pub fn n_basis(&self) -> usize {
        self.knots.len() + self.degree - 1
    }

    fn span(&self, x: f64) -> usize {
        let d = self.degree;
        let m = self.n_basis();
        if x >= self.full[m] {
            return m - 1;
        }
        // last index s in [d, m-1] with full[s] <= x
        let (mut lo, mut hi) = (d, m);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.full[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Writes the `degree + 1` possibly nonzero basis values at `x` into
    /// `out` and returns the index of the first one.
    pub fn eval_local(&self, x: f64, out: &mut [f64]) -> Result<usize> {
        if !(0.0..=1.0).contains(&x) {
            return Err(QspecError::Domain(format!(
                "spline input {x} lies outside [0, 1]"
            )));
        }
        let d = self.degree;
        let u = &self.full;
        let s = self.span(x);
        let mut left = [0.0f64; 4];
        let mut right = [0.0f64; 4];
        out[0] = 1.0;
        for j in 1..=d {
            left[j] = x - u[s + 1 - j];
            right[j] = u[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        Ok(s - d)
    }
}

/// Builds uniform knots on `[0, 1]` for a sample of `n_obs` points.
pub fn make_knots(n_obs: usize, degree: usize, rule: KnotRule) -> Result<KnotVector> {
    if n_obs < degree + 2 {
        return Err(QspecError::InvalidConfig(format!(
            "{n_obs} observations are too few for a degree-{degree} spline"
        )));
    }
    let count = match rule {
        KnotRule::Count(c) => c,
        KnotRule::SqrtN => (n_obs as f64).sqrt().ceil() as usize,
    };
    if count < 2 {
        return Err(QspecError::InvalidConfig(format!(
            "knot count {count} is below the minimum of 2"
        )));
    }
    let knots = (0..count)
        .map(|i| {
            if i + 1 == count {
                1.0
            } else {
                i as f64 / (count - 1) as f64
            }
        })
        .collect();
    KnotVector::new(knots, degree)
}

/// Dense basis values, one row per evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl BasisMatrix {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(QspecError::Shape(format!(
                "{} values for a {rows} x {cols} basis",
                data.len()
            )));
        }
        Ok(BasisMatrix { rows, cols, data })
    }

    /// A single all-ones column.
    pub fn ones(rows: usize) -> Self {
        BasisMatrix {
            rows,
            cols: 1,
            data: vec![1.0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Evaluates every basis function at every `x`.
pub fn eval_basis(x: &[f64], knots: &KnotVector) -> Result<BasisMatrix> {
    let m = knots.n_basis();
    let d = knots.degree();
    let mut data = vec![0.0; x.len() * m];
    let mut local = [0.0; 4];
    for (i, &xi) in x.iter().enumerate() {
        let first = knots.eval_local(xi, &mut local)?;
        data[i * m + first..i * m + first + d + 1].copy_from_slice(&local[..=d]);
    }
    Ok(BasisMatrix { rows: x.len(), cols: m, data })
}

/// Row-wise Kronecker product; column `(j1, j2, ...)` sits at the
/// row-major multi-index position.
pub fn tensor_basis(bases: &[BasisMatrix]) -> Result<BasisMatrix> {
    let Some(first) = bases.first() else {
        return Err(QspecError::InvalidConfig("tensor basis needs at least one margin".into()));
    };
    let rows = first.rows;
    if let Some(bad) = bases.iter().find(|b| b.rows != rows) {
        return Err(QspecError::Shape(format!(
            "tensor margins have {} and {} rows",
            rows, bad.rows
        )));
    }
    let mut acc = first.clone();
    for b in &bases[1..] {
        let cols = acc.cols * b.cols;
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &a in acc.row(i) {
                data.extend(b.row(i).iter().map(|v| a * v));
            }
        }
        acc = BasisMatrix { rows, cols, data };
    }
    Ok(acc)
}

/// Matrix of `order`-th differences, `(m - order) x m`, row-major.
pub fn difference_matrix(m: usize, order: usize) -> Result<Vec<Vec<f64>>> {
    if order >= m {
        return Err(QspecError::InvalidConfig(format!(
            "penalty order {order} needs more than {m} basis functions"
        )));
    }
    let mut rows: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let mut r = vec![0.0; m];
            r[i] = 1.0;
            r
        })
        .collect();
    for _ in 0..order {
        rows = rows.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect()).collect();
    }
    Ok(rows)
}

/// Named scalar functions usable as covariate transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    Identity,
    Sin,
    Cos,
    Exp,
    Log,
    Square,
    Cube,
}

impl Transform {
    pub fn name(self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::Sin => "sin",
            Transform::Cos => "cos",
            Transform::Exp => "exp",
            Transform::Log => "log",
            Transform::Square => "square",
            Transform::Cube => "cube",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Sin => x.sin(),
            Transform::Cos => x.cos(),
            Transform::Exp => x.exp(),
            Transform::Log => x.ln(),
            Transform::Square => x * x,
            Transform::Cube => x * x * x,
        }
    }
}

/// `prod_{j in subset} f_j(x_j)`. `transforms[k]` applies to `subset[k]`;
/// an empty `transforms` means identity everywhere.
pub fn product_interaction(transforms: &[Transform], subset: &[usize], x: &[f64]) -> Result<f64> {
    if subset.is_empty() {
        return Err(QspecError::InvalidConfig("product interaction needs at least one covariate".into()));
    }
    if !transforms.is_empty() && transforms.len() != subset.len() {
        return Err(QspecError::InvalidConfig(format!(
            "{} transforms for {} interacting covariates",
            transforms.len(),
            subset.len()
        )));
    }
    let mut prod = 1.0;
    for (k, &j) in subset.iter().enumerate() {
        let v = *x.get(j).ok_or_else(|| {
            QspecError::Shape(format!("covariate index {j} out of range for a row of {}", x.len()))
        })?;
        let f = transforms.get(k).copied().unwrap_or(Transform::Identity);
        prod *= f.apply(v);
    }
    Ok(prod)
}

/// Min-max scaling fitted once and reused on resamples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: &[f64]) -> Result<Self> {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(min.is_finite() && max.is_finite()) || !(max > min) {
            return Err(QspecError::Domain(
                "spline input is constant or non-finite and cannot be scaled".into(),
            ));
        }
        Ok(MinMax { min, max })
    }

    pub fn apply(&self, x: f64) -> f64 {
        let s = (x - self.min) / (self.max - self.min);
        // the endpoints map exactly; guard against rounding just past them
        if x == self.max {
            1.0
        } else {
            s
        }
    }
}
