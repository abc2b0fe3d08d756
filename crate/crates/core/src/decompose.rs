//! Machado–Mata counterfactual decomposition of a between-group gap in
//! conditional quantiles into explained (covariate) and unexplained
//! (coefficient) parts.
//!
//! With groups A and B, fitted coefficients `theta_A(tau)`, `theta_B(tau)`
//! and covariate rows drawn with replacement from each group,
//!
//! ```text
//! gap = mean_b (P(X_A^b) - P(X_B^b))' theta_A + mean_b (theta_A - theta_B)' P(X_B^b)
//!       \__________ explained __________/      \_________ unexplained _________/
//! ```
//!
//! Gaps are reported in the units of the response, A minus B.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{QspecError, Result};
use crate::linalg::pairwise_sum;
use crate::par;
use crate::qreg::{fit_process_mm, FitConfig, TauGrid};
use crate::rng::{purpose, StreamKey};
use crate::specdsl::{DesignBuilder, PiecewiseSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmRow {
    pub tau: f64,
    /// Difference of the unconditional empirical tau-quantiles of Y.
    pub raw_gap: f64,
    pub mm_gap: f64,
    pub explained: f64,
    pub unexplained: f64,
    /// `100 * explained / mm_gap`; NaN when the gap is exactly zero.
    pub pct_explained: f64,
    pub pct_unexplained: f64,
    /// `raw_gap - mm_gap`.
    pub residual: f64,
    /// Mean fitted B-group quantile over the draws; the denominator of the
    /// optional percent-of-baseline columns.
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmResult {
    pub rows: Vec<MmRow>,
    pub draws: usize,
    pub seed: u64,
}

impl MmResult {
    pub const CSV_HEADER: &'static str =
        "tau,raw_gap,mm_gap,explained,unexplained,pct_explained,pct_unexplained,residual";

    /// Rows of the results table. With `percent_of_baseline` the gap columns
    /// are divided by the B-group baseline and multiplied by 100.
    pub fn csv_rows(&self, percent_of_baseline: bool) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                let k = if percent_of_baseline { 100.0 / r.baseline } else { 1.0 };
                format!(
                    "{},{},{},{},{},{},{},{}",
                    r.tau,
                    r.raw_gap * k,
                    r.mm_gap * k,
                    r.explained * k,
                    r.unexplained * k,
                    r.pct_explained,
                    r.pct_unexplained,
                    r.residual * k
                )
            })
            .collect()
    }
}

/// Decomposition settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmConfig {
    pub taus: Vec<f64>,
    /// Number of covariate draws per group.
    pub draws: usize,
    pub seed: u64,
    pub fit: FitConfig,
}

impl MmConfig {
    pub fn new(taus: Vec<f64>, draws: usize, seed: u64) -> Self {
        MmConfig {
            taus,
            draws,
            seed,
            fit: FitConfig::default(),
        }
    }
}

fn empirical_quantile(sorted: &[f64], tau: f64) -> f64 {
    let n = sorted.len();
    let k = ((tau * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

fn pool(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    if a.covariate_names() != b.covariate_names() {
        return Err(QspecError::Shape("groups have different covariates".into()));
    }
    let y: Vec<f64> = a.y().iter().chain(b.y()).copied().collect();
    let x: Vec<f64> = a.rows().chain(b.rows()).flatten().copied().collect();
    Dataset::new(a.response_name(), a.covariate_names().to_vec(), y, x)
}

fn group_error(group: &str, e: QspecError) -> QspecError {
    QspecError::Group {
        group: group.to_string(),
        source: Box::new(e),
    }
}

/// Decomposes the A minus B gap at every level in `config.taus`. Scalings
/// and knots are fixed on the pooled sample so both groups share one basis.
pub fn mm_decompose(a: &Dataset, b: &Dataset, spec: &PiecewiseSpec, config: &MmConfig) -> Result<MmResult> {
    if config.draws == 0 {
        return Err(QspecError::InvalidConfig("draws must be positive".into()));
    }
    let grid = TauGrid::new(config.taus.clone())?;
    let pooled = pool(a, b)?;
    let builder = Arc::new(DesignBuilder::new(spec, &pooled)?);
    let mm_a = builder.model_matrix(a).map_err(|e| group_error("A", e))?;
    let mm_b = builder.model_matrix(b).map_err(|e| group_error("B", e))?;
    let proc_a = fit_process_mm(&mm_a, a.y(), builder.clone(), &grid, &config.fit).map_err(|e| group_error("A", e))?;
    let proc_b = fit_process_mm(&mm_b, b.y(), builder.clone(), &grid, &config.fit).map_err(|e| group_error("B", e))?;

    let root = StreamKey::new(config.seed);
    let draw = |group: u64, n: usize| -> Vec<usize> {
        let mut rng = root.child(group).rng();
        (0..config.draws).map(|_| rng.random_range(0..n)).collect()
    };
    let rows_a = draw(purpose::GROUP_A, a.n());
    let rows_b = draw(purpose::GROUP_B, b.n());

    let mut ya = a.y().to_vec();
    ya.sort_by(f64::total_cmp);
    let mut yb = b.y().to_vec();
    yb.sort_by(f64::total_cmp);

    let rows = par::map_range(grid.len(), config.fit.parallelism, |j| {
        let tau = grid.levels()[j];
        let seg = proc_a.segment_of(j);
        let (xa, xb) = (mm_a.segment(seg), mm_b.segment(seg));
        let (ta, tb) = (proc_a.coef(j), proc_b.coef(j));
        let mut explained = Vec::with_capacity(config.draws);
        let mut unexplained = Vec::with_capacity(config.draws);
        let mut baseline = Vec::with_capacity(config.draws);
        for (&ia, &ib) in rows_a.iter().zip(&rows_b) {
            let b_under_a = xb.row_dot(ib, ta);
            let b_under_b = xb.row_dot(ib, tb);
            explained.push(xa.row_dot(ia, ta) - b_under_a);
            unexplained.push(b_under_a - b_under_b);
            baseline.push(b_under_b);
        }
        let d = config.draws as f64;
        let explained = pairwise_sum(&explained) / d;
        let unexplained = pairwise_sum(&unexplained) / d;
        let mm_gap = explained + unexplained;
        let raw_gap = empirical_quantile(&ya, tau) - empirical_quantile(&yb, tau);
        let pct = |v: f64| if mm_gap == 0.0 { f64::NAN } else { 100.0 * v / mm_gap };
        MmRow {
            tau,
            raw_gap,
            mm_gap,
            explained,
            unexplained,
            pct_explained: pct(explained),
            pct_unexplained: pct(unexplained),
            residual: raw_gap - mm_gap,
            baseline: pairwise_sum(&baseline) / d,
        }
    });
    Ok(MmResult {
        rows,
        draws: config.draws,
        seed: config.seed,
    })
}

/// Removes the effect of dummy (indicator) columns from the response by
/// least squares on `[1, D]`, keeping the overall mean. Returns the
/// adjusted response.
pub fn residualize_on_dummies(y: &[f64], dummies: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = y.len();
    if let Some(bad) = dummies.iter().find(|d| d.len() != n) {
        return Err(QspecError::Shape(format!("dummy column of length {} for {n} rows", bad.len())));
    }
    let p = dummies.len() + 1;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| std::iter::once(1.0).chain(dummies.iter().map(|d| d[i])).collect())
        .collect();
    let x = crate::linalg::Csr::from_dense_rows(p, &rows);
    let g = x.weighted_gram(&vec![1.0; n]);
    let dependent = crate::linalg::dependent_columns(&g, 1e-11);
    if !dependent.is_empty() {
        return Err(QspecError::SingularDesign {
            columns: dependent
                .iter()
                .map(|&j| if j == 0 { "(intercept)".to_string() } else { format!("dummy {}", j - 1) })
                .collect(),
        });
    }
    let beta = crate::linalg::spd_solve(g, &x.tmul_vec(y))?;
    let fitted = x.mul_vec(&beta);
    let mean = pairwise_sum(y) / n as f64;
    Ok(y.iter().zip(&fitted).map(|(yi, fi)| yi - fi + mean).collect())
}
