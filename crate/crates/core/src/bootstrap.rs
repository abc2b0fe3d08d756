//! Semi-parametric bootstrap by inverse-transform sampling from the fitted
//! null model.
//!
//! Replicate `b`: resample covariate rows with replacement, draw
//! `Y_bi = F^{-1}(U_bi | X_bi)` from the original null fit, refit every
//! model the statistic uses on the synthetic sample and recompute the
//! statistic. Random streams are keyed by `(seed, b)`, so results do not
//! depend on scheduling or thread count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cdfkit::ConditionalCdf;
use crate::data::Dataset;
use crate::error::{QspecError, Result};
use crate::par::{self, Parallelism};
use crate::qreg::{FitConfig, TauGrid};
use crate::rng::{purpose, StreamKey};
use crate::specdsl::PiecewiseSpec;
use crate::stats::{StatisticKind, StatisticSetup, TestStatistic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Significance levels for critical values, e.g. `[0.01, 0.05, 0.1]`.
    pub levels: Vec<f64>,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 500,
            seed: 0,
            levels: vec![0.01, 0.05, 0.10],
            parallelism: Parallelism::Parallel,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(QspecError::InvalidConfig("bootstrap needs at least one replicate".into()));
        }
        if let Some(q) = self.levels.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
            return Err(QspecError::InvalidConfig(format!("level {q} is not in (0, 1)")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalValue {
    pub level: f64,
    pub value: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub statistic: TestStatistic,
    /// Successful replicate statistics, ascending.
    pub replicates: Vec<f64>,
    pub critical_values: Vec<CriticalValue>,
    pub p_value: f64,
    /// Replicates skipped because a refit failed.
    pub failed: usize,
}

impl BootstrapResult {
    pub fn observed(&self) -> f64 {
        self.statistic.value
    }

    pub fn rejects_at(&self, level: f64) -> Option<bool> {
        self.critical_values
            .iter()
            .find(|c| c.level == level)
            .map(|c| c.reject)
    }
}

/// Replicate value at 1-based index `ceil((1 - q) B)` of the sorted sample.
pub fn critical_value(sorted: &[f64], q: f64) -> f64 {
    let b = sorted.len();
    let k = (((1.0 - q) * b as f64 - 1e-9).ceil() as usize).clamp(1, b);
    sorted[k - 1]
}

/// `(1 + #{S_b >= S_obs}) / (B + 1)`.
pub fn p_value(replicates: &[f64], observed: f64) -> f64 {
    let exceed = replicates.iter().filter(|s| **s >= observed).count();
    (1 + exceed) as f64 / (replicates.len() + 1) as f64
}

/// Runs the bootstrap for the statistic `kind` of the null specification.
pub fn run_bootstrap(
    data: &Dataset,
    null: &PiecewiseSpec,
    kind: StatisticKind,
    flexible: Option<&PiecewiseSpec>,
    grid: &TauGrid,
    fit: &FitConfig,
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    let setup = StatisticSetup::new(kind, data, null, flexible, grid.clone(), fit.clone())?;
    run_with_setup(&setup, data, config)
}

/// Bootstrap with a prepared setup.
pub fn run_with_setup(setup: &StatisticSetup, data: &Dataset, config: &BootstrapConfig) -> Result<BootstrapResult> {
    config.validate()?;
    let observed = setup.evaluate(data, None)?;
    let cond = ConditionalCdf::new(&observed.null_process, setup.null_model_matrix());
    let n = data.n();
    let root = StreamKey::new(config.seed).child(purpose::BOOTSTRAP);

    let outcomes = par::map_range(config.replicates, config.parallelism, |b| {
        let key = root.child(b as u64);
        let mut row_rng = key.child(purpose::ROW_INDICES).rng();
        let rows: Vec<usize> = (0..n).map(|_| row_rng.random_range(0..n)).collect();
        let mut u_rng = key.child(purpose::UNIFORMS).rng();
        let y: Vec<f64> = rows
            .iter()
            .map(|&i| {
                let u: f64 = u_rng.random();
                cond.inverse(i, u)
            })
            .collect();
        let sample = data.select_rows(&rows).with_response(y)?;
        setup.evaluate(&sample, Some(&rows)).map(|e| e.statistic.value)
    });

    let mut values = Vec::with_capacity(config.replicates);
    let mut failed = 0;
    let mut first_failure = None;
    for (b, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => values.push(v),
            Err(e) => {
                failed += 1;
                log::warn!("bootstrap replicate {b} failed: {e}");
                first_failure.get_or_insert_with(|| format!("replicate {b}: {e}"));
            }
        }
    }
    if failed * 20 > config.replicates || values.is_empty() {
        return Err(QspecError::TooManyFailures {
            failed,
            total: config.replicates,
            first: first_failure.unwrap_or_default(),
        });
    }
    values.sort_by(f64::total_cmp);
    let obs = observed.statistic.value;
    let critical_values = config
        .levels
        .iter()
        .map(|&level| {
            let value = critical_value(&values, level);
            CriticalValue {
                level,
                value,
                reject: obs > value,
            }
        })
        .collect();
    Ok(BootstrapResult {
        p_value: p_value(&values, obs),
        statistic: observed.statistic,
        replicates: values,
        critical_values,
        failed,
    })
}
