//! Check-loss quantile regression on a grid of quantile levels.
//!
//! Each level is an independent linear program. Penalty rows `2 lambda D`
//! enter as pseudo-observations with response 0 at level 0.5, which adds
//! `lambda * |D theta|_1` to the objective.

mod ipm;
mod simplex;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{QspecError, Result};
use crate::linalg::{dependent_columns, Csr};
use crate::par::{self, Parallelism};
use crate::rng::{purpose, StreamKey};
use crate::specdsl::{DesignBuilder, ModelMatrix, PiecewiseSpec};

/// `u (tau - 1{u < 0})`.
pub fn check_loss(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// Strictly increasing quantile levels in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TauGrid {
    levels: Vec<f64>,
}

impl TauGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(QspecError::InvalidConfig("tau grid is empty".into()));
        }
        if let Some(t) = levels.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(QspecError::Domain(format!("grid level {t} is not in (0, 1)")));
        }
        if levels.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(QspecError::InvalidConfig("grid levels must be strictly increasing".into()));
        }
        Ok(TauGrid { levels })
    }

    /// `from, from + step, ...` up to `to` inclusive. Levels are rounded to
    /// nine decimals so that `0.1:0.9:0.1` yields exactly the literals.
    pub fn range(from: f64, to: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(to >= from) {
            return Err(QspecError::InvalidConfig(format!(
                "bad tau range {from}:{to}:{step}"
            )));
        }
        let count = ((to - from) / step + 1e-9).floor() as usize + 1;
        let levels = (0..count)
            .map(|j| ((from + j as f64 * step) * 1e9).round() / 1e9)
            .collect();
        TauGrid::new(levels)
    }

    /// `{0.01, ..., 0.99}`.
    pub fn fine() -> Self {
        TauGrid::range(0.01, 0.99, 0.01).expect("valid grid")
    }

    /// `{0.1, ..., 0.9}`.
    pub fn deciles() -> Self {
        TauGrid::range(0.1, 0.9, 0.1).expect("valid grid")
    }

    /// `{0.02, 0.04, ..., 0.98}`.
    pub fn even_percentiles() -> Self {
        TauGrid::range(0.02, 0.98, 0.02).expect("valid grid")
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Trimming constant: every level lies in `[eps, 1 - eps]`.
    pub fn epsilon(&self) -> f64 {
        self.levels[0].min(1.0 - self.levels[self.levels.len() - 1])
    }
}

impl std::str::FromStr for TauGrid {
    type Err = QspecError;
    /// `a:b:step` or a comma-separated list.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || QspecError::InvalidConfig(format!("cannot read tau grid {s:?}"));
        if s.contains(':') {
            let parts: Vec<f64> = s
                .split(':')
                .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            if parts.len() != 3 {
                return Err(bad());
            }
            TauGrid::range(parts[0], parts[1], parts[2])
        } else {
            let levels = s
                .split(',')
                .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            TauGrid::new(levels)
        }
    }
}

impl TryFrom<Vec<f64>> for TauGrid {
    type Error = QspecError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        TauGrid::new(v)
    }
}

impl From<TauGrid> for Vec<f64> {
    fn from(g: TauGrid) -> Vec<f64> {
        g.levels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    /// Simplex when `rows * columns < 5000`, interior point otherwise.
    #[default]
    Auto,
    InteriorPoint,
    Simplex,
}

/// Solver settings. Smoothing parameters live on the spline terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Relative duality gap at which the interior point method stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub solver: Solver,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            tolerance: 1e-10,
            max_iterations: 200,
            solver: Solver::Auto,
            parallelism: Parallelism::Parallel,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(QspecError::InvalidConfig("solver tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(QspecError::InvalidConfig("max_iterations must be positive".into()));
        }
        Ok(())
    }

    pub fn sequential(mut self) -> Self {
        self.parallelism = Parallelism::Sequential;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverUsed {
    InteriorPoint,
    Simplex,
    /// Slopes from the median fit, intercept from residual order statistics.
    LocationShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub tau: f64,
    pub solver: SolverUsed,
    pub iterations: usize,
    pub objective: f64,
}

/// Compact LP for one segment: active columns only, penalty rows appended.
#[derive(Debug, Clone)]
struct SegmentProblem {
    active: Vec<usize>,
    x: Csr,
    n_data: usize,
}

impl SegmentProblem {
    fn build(builder: &DesignBuilder, mm: &ModelMatrix, seg: usize) -> Result<Self> {
        let active = builder.active_columns(seg);
        let x = mm.segment(seg).select_cols(&active);
        let n_data = x.rows();
        if n_data <= active.len() {
            return Err(QspecError::InvalidConfig(format!(
                "{n_data} observations for {} coefficients",
                active.len()
            )));
        }
        let pen = builder.penalty_rows(seg).select_cols(&active);
        let mut doubled = Csr::new(active.len());
        for i in 0..pen.rows() {
            let (idx, val) = pen.row(i);
            doubled.push_row(idx.iter().zip(val).map(|(&j, &v)| (j, 2.0 * v)));
        }
        let x = x.vstack(&doubled)?;
        let g = x.weighted_gram(&vec![1.0; x.rows()]);
        let dependent = dependent_columns(&g, 1e-11);
        if !dependent.is_empty() {
            let names = builder.column_names();
            return Err(QspecError::SingularDesign {
                columns: dependent.iter().map(|&k| names[active[k]].clone()).collect(),
            });
        }
        Ok(SegmentProblem { active, x, n_data })
    }

    fn rhs(&self, y: &[f64]) -> Vec<f64> {
        let mut v = y.to_vec();
        v.resize(self.x.rows(), 0.0);
        v
    }

    fn taus(&self, tau: f64) -> Vec<f64> {
        let mut t = vec![tau; self.n_data];
        t.resize(self.x.rows(), 0.5);
        t
    }

    fn simplex(&self, y: &[f64], tau: &[f64]) -> Result<simplex::SimplexOutput> {
        let ls = least_squares(&self.x, y)?;
        let fitted = self.x.mul_vec(&ls);
        let start: Vec<bool> = y.iter().zip(&fitted).map(|(y, f)| y - f > 0.0).collect();
        simplex::solve(&self.x, y, tau, &start, 50 * (self.x.rows() + self.active.len()) + 1000)
    }

    fn solve(&self, y: &[f64], tau: f64, config: &FitConfig) -> Result<(Vec<f64>, FitDiagnostics)> {
        let yy = self.rhs(y);
        let tt = self.taus(tau);
        let p = self.active.len();
        let use_simplex = match config.solver {
            Solver::Simplex => true,
            Solver::InteriorPoint => false,
            Solver::Auto => self.x.rows() * p < 5000,
        };
        let (theta, iterations, solver) = if use_simplex {
            let out = self.simplex(&yy, &tt)?;
            (out.theta, out.iterations, SolverUsed::Simplex)
        } else {
            match ipm::solve(&self.x, &yy, &tt, config.tolerance, config.max_iterations) {
                Ok(out) => {
                    let theta = polish(&self.x, &yy, &tt, out.theta);
                    (theta, out.iterations, SolverUsed::InteriorPoint)
                }
                Err(e) if config.solver == Solver::Auto => {
                    log::debug!("interior point failed at tau = {tau} ({e}); retrying with simplex");
                    let out = self.simplex(&yy, &tt)?;
                    (out.theta, out.iterations, SolverUsed::Simplex)
                }
                Err(e) => return Err(e),
            }
        };
        if let Some(bad) = theta.iter().find(|v| !v.is_finite()) {
            return Err(QspecError::Domain(format!("solver produced a non-finite coefficient {bad}")));
        }
        let objective = objective(&self.x, &yy, &tt, &theta);
        Ok((
            theta,
            FitDiagnostics {
                tau,
                solver,
                iterations,
                objective,
            },
        ))
    }
}

fn objective(x: &Csr, y: &[f64], tau: &[f64], theta: &[f64]) -> f64 {
    (0..x.rows()).map(|i| check_loss(y[i] - x.row_dot(i, theta), tau[i])).sum()
}

fn least_squares(x: &Csr, y: &[f64]) -> Result<Vec<f64>> {
    let g = x.weighted_gram(&vec![1.0; x.rows()]);
    crate::linalg::spd_solve(g, &x.tmul_vec(y))
}

/// Snaps an interior solution to the vertex through the `p` observations
/// with the smallest residuals when that does not worsen the objective.
fn polish(x: &Csr, y: &[f64], tau: &[f64], theta: Vec<f64>) -> Vec<f64> {
    let p = x.cols();
    let resid: Vec<f64> = (0..x.rows()).map(|i| (y[i] - x.row_dot(i, &theta)).abs()).collect();
    let mut order: Vec<usize> = (0..x.rows()).collect();
    order.sort_by(|&a, &b| resid[a].total_cmp(&resid[b]).then(a.cmp(&b)));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut chosen = Vec::with_capacity(p);
    for &i in &order {
        if chosen.len() == p {
            break;
        }
        let mut v = vec![0.0; p];
        let (idx, val) = x.row(i);
        for (&j, &a) in idx.iter().zip(val) {
            v[j] = a;
        }
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        for q in &basis {
            let d: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (vk, qk) in v.iter_mut().zip(q) {
                *vk -= d * qk;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 * norm0 {
            basis.push(v.iter().map(|a| a / norm).collect());
            chosen.push(i);
        }
    }
    if chosen.len() < p {
        return theta;
    }
    let mut m = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for (r, &i) in chosen.iter().enumerate() {
        let (idx, val) = x.row(i);
        for (&j, &a) in idx.iter().zip(val) {
            m[(r, j)] = a;
        }
        rhs[r] = y[i];
    }
    let Some(sol) = m.lu().solve(&rhs) else {
        return theta;
    };
    let vertex: Vec<f64> = sol.iter().copied().collect();
    let before = objective(x, y, tau, &theta);
    let after = objective(x, y, tau, &vertex);
    if vertex.iter().all(|v| v.is_finite()) && after <= before + 1e-9 * (1.0 + before.abs()) {
        vertex
    } else {
        theta
    }
}

/// Fitted coefficient functions on a grid, in the builder's union layout.
#[derive(Debug, Clone)]
pub struct QuantileProcess {
    grid: TauGrid,
    coef: Vec<Vec<f64>>,
    segments: Vec<usize>,
    builder: Arc<DesignBuilder>,
    diagnostics: Vec<FitDiagnostics>,
}

impl QuantileProcess {
    /// Assembles a process from known coefficients (one row per level).
    pub fn from_parts(builder: Arc<DesignBuilder>, grid: TauGrid, coef: Vec<Vec<f64>>) -> Result<Self> {
        if coef.len() != grid.len() || coef.iter().any(|c| c.len() != builder.n_columns()) {
            return Err(QspecError::Shape(format!(
                "coefficients must be {} x {}",
                grid.len(),
                builder.n_columns()
            )));
        }
        let segments = grid
            .levels()
            .iter()
            .map(|&t| builder.segment_index(t))
            .collect::<Result<Vec<_>>>()?;
        let diagnostics = Vec::new();
        Ok(QuantileProcess {
            grid,
            coef,
            segments,
            builder,
            diagnostics,
        })
    }

    pub fn grid(&self) -> &TauGrid {
        &self.grid
    }

    /// Coefficient row for grid level `j`.
    pub fn coef(&self, j: usize) -> &[f64] {
        &self.coef[j]
    }

    pub fn coefficients(&self) -> &[Vec<f64>] {
        &self.coef
    }

    pub fn builder(&self) -> &Arc<DesignBuilder> {
        &self.builder
    }

    pub fn segment_of(&self, j: usize) -> usize {
        self.segments[j]
    }

    pub fn diagnostics(&self) -> &[FitDiagnostics] {
        &self.diagnostics
    }

    /// Unsorted predictions `P(x_i, tau_j)' theta(tau_j)` for every row.
    pub fn predictions(&self, mm: &ModelMatrix) -> Vec<Vec<f64>> {
        (0..mm.n_rows())
            .map(|i| {
                (0..self.grid.len())
                    .map(|j| mm.segment(self.segments[j]).row_dot(i, &self.coef[j]))
                    .collect()
            })
            .collect()
    }
}

/// Per-segment problems shared by all levels of one fit.
struct Prepared {
    problems: Vec<Option<SegmentProblem>>,
}

impl Prepared {
    fn new(builder: &DesignBuilder, mm: &ModelMatrix, segments: &[usize]) -> Result<Self> {
        let mut problems: Vec<Option<SegmentProblem>> = vec![None; builder.n_segments()];
        for &s in segments {
            if problems[s].is_none() {
                problems[s] = Some(SegmentProblem::build(builder, mm, s)?);
            }
        }
        Ok(Prepared { problems })
    }

    fn solve_full(&self, builder: &DesignBuilder, seg: usize, y: &[f64], tau: f64, config: &FitConfig) -> Result<(Vec<f64>, FitDiagnostics)> {
        let prob = self.problems[seg].as_ref().expect("segment prepared");
        let (theta, diag) = prob.solve(y, tau, config).map_err(|e| e.at_tau(tau))?;
        let mut full = vec![0.0; builder.n_columns()];
        for (k, &j) in prob.active.iter().enumerate() {
            full[j] = theta[k];
        }
        Ok((full, diag))
    }
}

/// Minimizer of the penalized check loss at one level.
pub fn fit_tau(data: &Dataset, builder: &DesignBuilder, tau: f64, config: &FitConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let seg = builder.segment_index(tau)?;
    let mm = builder.model_matrix(data)?;
    let prepared = Prepared::new(builder, &mm, &[seg])?;
    Ok(prepared.solve_full(builder, seg, data.y(), tau, config)?.0)
}

/// Independent fits at every grid level.
pub fn fit_process(data: &Dataset, builder: Arc<DesignBuilder>, grid: &TauGrid, config: &FitConfig) -> Result<QuantileProcess> {
    let mm = builder.model_matrix(data)?;
    fit_process_mm(&mm, data.y(), builder, grid, config)
}

/// As [`fit_process`] but on already materialized design rows.
pub fn fit_process_mm(
    mm: &ModelMatrix,
    y: &[f64],
    builder: Arc<DesignBuilder>,
    grid: &TauGrid,
    config: &FitConfig,
) -> Result<QuantileProcess> {
    config.validate()?;
    if y.len() != mm.n_rows() {
        return Err(QspecError::Shape(format!(
            "{} responses for {} design rows",
            y.len(),
            mm.n_rows()
        )));
    }
    let segments = grid
        .levels()
        .iter()
        .map(|&t| builder.segment_index(t))
        .collect::<Result<Vec<_>>>()?;
    if builder.spec().location_shift {
        return fit_location_shift(mm, y, builder, grid, segments, config);
    }
    let prepared = Prepared::new(&builder, mm, &segments)?;
    let fits = par::try_map_range(grid.len(), config.parallelism, |j| {
        prepared.solve_full(&builder, segments[j], y, grid.levels()[j], config)
    })?;
    let (coef, diagnostics) = fits.into_iter().unzip();
    Ok(QuantileProcess {
        grid: grid.clone(),
        coef,
        segments,
        builder,
        diagnostics,
    })
}

/// Location-shift fit: slopes from the median regression; the intercept at
/// level `tau` is the `ceil(n tau)`-th smallest residual of the slope part.
fn fit_location_shift(
    mm: &ModelMatrix,
    y: &[f64],
    builder: Arc<DesignBuilder>,
    grid: &TauGrid,
    segments: Vec<usize>,
    config: &FitConfig,
) -> Result<QuantileProcess> {
    let prepared = Prepared::new(&builder, mm, &[0])?;
    let (mut slopes, median_diag) = prepared.solve_full(&builder, 0, y, 0.5, config)?;
    slopes[0] = 0.0;
    let design = mm.segment(0);
    let mut resid: Vec<f64> = (0..y.len()).map(|i| y[i] - design.row_dot(i, &slopes)).collect();
    resid.sort_by(f64::total_cmp);
    let n = resid.len();
    let mut coef = Vec::with_capacity(grid.len());
    let mut diagnostics = Vec::with_capacity(grid.len());
    for &tau in grid.levels() {
        let k = ((n as f64 * tau).ceil() as usize).clamp(1, n);
        let mut row = slopes.clone();
        row[0] = resid[k - 1];
        let obj = (0..n).map(|i| check_loss(y[i] - design.row_dot(i, &row), tau)).sum();
        coef.push(row);
        diagnostics.push(FitDiagnostics {
            tau,
            solver: SolverUsed::LocationShift,
            iterations: median_diag.iterations,
            objective: obj,
        });
    }
    Ok(QuantileProcess {
        grid: grid.clone(),
        coef,
        segments,
        builder,
        diagnostics,
    })
}

/// Outcome of cross-validated smoothing parameter selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    /// Held-out check loss per candidate, in ladder order.
    pub scores: Vec<(f64, f64)>,
}

/// Chooses a common smoothing parameter from `ladder` by `folds`-fold
/// cross-validated check loss summed over the grid.
pub fn select_lambda(
    data: &Dataset,
    spec: &PiecewiseSpec,
    grid: &TauGrid,
    ladder: &[f64],
    folds: usize,
    seed: u64,
    config: &FitConfig,
) -> Result<LambdaSelection> {
    if ladder.is_empty() || folds < 2 || folds > data.n() {
        return Err(QspecError::InvalidConfig(format!(
            "need a nonempty lambda ladder and 2 <= folds <= n (got {} candidates, {folds} folds)",
            ladder.len()
        )));
    }
    let mut perm: Vec<usize> = (0..data.n()).collect();
    perm.shuffle(&mut StreamKey::new(seed).child(purpose::FOLDS).rng());
    let fold_of: Vec<usize> = {
        let mut f = vec![0; data.n()];
        for (pos, &i) in perm.iter().enumerate() {
            f[i] = pos % folds;
        }
        f
    };
    let mut scores = Vec::with_capacity(ladder.len());
    for &lambda in ladder {
        let builder = Arc::new(DesignBuilder::new(&spec.with_lambda(lambda), data)?);
        let mm = builder.model_matrix(data)?;
        let mut loss = 0.0;
        for k in 0..folds {
            let train: Vec<usize> = (0..data.n()).filter(|&i| fold_of[i] != k).collect();
            let test: Vec<usize> = (0..data.n()).filter(|&i| fold_of[i] == k).collect();
            let y_train: Vec<f64> = train.iter().map(|&i| data.y()[i]).collect();
            let proc = fit_process_mm(&mm.select_rows(&train), &y_train, builder.clone(), grid, config)?;
            let test_mm = mm.select_rows(&test);
            let preds = proc.predictions(&test_mm);
            for (r, &i) in test.iter().enumerate() {
                for (j, &tau) in grid.levels().iter().enumerate() {
                    loss += check_loss(data.y()[i] - preds[r][j], tau);
                }
            }
        }
        scores.push((lambda, loss));
    }
    let best = scores
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|s| s.0)
        .expect("nonempty ladder");
    Ok(LambdaSelection { lambda: best, scores })
}
