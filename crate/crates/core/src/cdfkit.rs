//! Empirical and model-implied CDFs.
//!
//! The conditional CDF of a fitted process at `x` is the step function
//! `F(y | x) = #{j : q_(j)(x) <= y} / m` over the `m` sorted grid
//! predictions, i.e. a left Riemann sum of the quantile integral with mass 0
//! below and 1 above all predictions. Its generalized inverse picks order
//! statistics, which doubles as the monotone rearrangement of crossing
//! quantile curves.

use crate::data::Dataset;
use crate::error::{QspecError, Result};
use crate::par::{self, Parallelism};
use crate::qreg::QuantileProcess;
use crate::specdsl::ModelMatrix;

fn count_le(sorted: &[f64], y: f64) -> usize {
    sorted.partition_point(|q| *q <= y)
}

fn order_statistic(sorted: &[f64], u: f64) -> f64 {
    let m = sorted.len();
    let k = ((u * m as f64).ceil() as usize).clamp(1, m);
    sorted[k - 1]
}

/// Componentwise `a <= b`.
pub fn dominated(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y)
}

fn sorted_predictions(proc: &QuantileProcess, x: &[f64]) -> Result<Vec<f64>> {
    let builder = proc.builder();
    let mut preds = Vec::with_capacity(proc.grid().len());
    for (j, &tau) in proc.grid().levels().iter().enumerate() {
        let row = builder.row(x, tau)?;
        preds.push(row.iter().zip(proc.coef(j)).map(|(a, b)| a * b).sum());
    }
    preds.sort_by(f64::total_cmp);
    Ok(preds)
}

/// `(1/n) sum_i 1{Y_i <= y} 1{X_i <= x}`.
pub fn ecdf_eval(data: &Dataset, y: f64, x: &[f64]) -> Result<f64> {
    if x.len() != data.k() {
        return Err(QspecError::Shape(format!(
            "query has {} covariates, data has {}",
            x.len(),
            data.k()
        )));
    }
    let hits = (0..data.n())
        .filter(|&i| data.y()[i] <= y && dominated(data.row(i), x))
        .count();
    Ok(hits as f64 / data.n() as f64)
}

/// Conditional CDF of a fitted process at an arbitrary covariate point.
pub fn conditional_cdf(proc: &QuantileProcess, x: &[f64], y: f64) -> Result<f64> {
    let preds = sorted_predictions(proc, x)?;
    Ok(count_le(&preds, y) as f64 / preds.len() as f64)
}

/// Generalized inverse: the `ceil(u m)`-th smallest grid prediction at `x`.
pub fn inverse_sample(proc: &QuantileProcess, x: &[f64], u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(QspecError::Domain(format!("uniform draw {u} is not in (0, 1)")));
    }
    Ok(order_statistic(&sorted_predictions(proc, x)?, u))
}

/// `(1/n) sum_i 1{X_i <= x} F(y | X_i)` over the rows of `data`.
pub fn model_joint_cdf(proc: &QuantileProcess, data: &Dataset, y: f64, x: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..data.n() {
        if dominated(data.row(i), x) {
            total += conditional_cdf(proc, data.row(i), y)?;
        }
    }
    Ok(total / data.n() as f64)
}

/// Conditional CDFs at a fixed set of covariate rows, with the sorted
/// predictions cached per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalCdf {
    m: usize,
    sorted: Vec<Vec<f64>>,
}

impl ConditionalCdf {
    /// Caches predictions of `proc` at every row of `mm`.
    pub fn new(proc: &QuantileProcess, mm: &ModelMatrix) -> Self {
        let sorted = proc
            .predictions(mm)
            .into_iter()
            .map(|mut p| {
                p.sort_by(f64::total_cmp);
                p
            })
            .collect();
        ConditionalCdf {
            m: proc.grid().len(),
            sorted,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.sorted.len()
    }

    pub fn sorted_row(&self, i: usize) -> &[f64] {
        &self.sorted[i]
    }

    /// `F(y | X_i)`.
    pub fn eval(&self, i: usize, y: f64) -> f64 {
        count_le(&self.sorted[i], y) as f64 / self.m as f64
    }

    /// Generalized inverse at row `i`; `u` is clamped into the grid range.
    pub fn inverse(&self, i: usize, u: f64) -> f64 {
        order_statistic(&self.sorted[i], u)
    }
}

/// Sample points `(Y_i, X_i)` with the dominance sets
/// `{l : X_l <= X_i}` precomputed once.
#[derive(Debug, Clone)]
pub struct SamplePoints<'a> {
    data: &'a Dataset,
    below: Vec<Vec<u32>>,
}

impl<'a> SamplePoints<'a> {
    pub fn new(data: &'a Dataset, mode: Parallelism) -> Self {
        let n = data.n();
        let below = par::map_range(n, mode, |i| {
            let xi = data.row(i);
            (0..n)
                .filter(|&l| dominated(data.row(l), xi))
                .map(|l| l as u32)
                .collect()
        });
        SamplePoints { data, below }
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn dominated_by(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.below[i].iter().map(|&l| l as usize)
    }
}

/// A joint CDF estimate that can be evaluated at the sample points.
pub trait JointCdf: Sync {
    fn at_points(&self, pts: &SamplePoints<'_>, mode: Parallelism) -> Vec<f64>;
}

/// The empirical joint CDF of the sample itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmpiricalJointCdf;

impl JointCdf for EmpiricalJointCdf {
    fn at_points(&self, pts: &SamplePoints<'_>, mode: Parallelism) -> Vec<f64> {
        let y = pts.data().y();
        let n = pts.n() as f64;
        par::map_range(pts.n(), mode, |i| {
            pts.dominated_by(i).filter(|&l| y[l] <= y[i]).count() as f64 / n
        })
    }
}

/// Model joint CDF whose conditional part is cached on the sample rows.
#[derive(Debug, Clone, Copy)]
pub struct ModelJointCdf<'a> {
    cond: &'a ConditionalCdf,
}

impl<'a> ModelJointCdf<'a> {
    /// `cond` must be built on the same rows as the sample points.
    pub fn new(cond: &'a ConditionalCdf) -> Self {
        ModelJointCdf { cond }
    }
}

impl JointCdf for ModelJointCdf<'_> {
    fn at_points(&self, pts: &SamplePoints<'_>, mode: Parallelism) -> Vec<f64> {
        assert_eq!(self.cond.n_rows(), pts.n(), "conditional CDF rows must match the sample");
        let y = pts.data().y();
        let n = pts.n() as f64;
        par::map_range(pts.n(), mode, |i| {
            let mut s = 0.0;
            for l in pts.dominated_by(i) {
                s += self.cond.eval(l, y[i]);
            }
            s / n
        })
    }
}
