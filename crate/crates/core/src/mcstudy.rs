//! Data generating processes and Monte Carlo size/power experiments.

use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::KnotRule;
use crate::bootstrap::{run_bootstrap, BootstrapConfig};
use crate::data::Dataset;
use crate::error::{QspecError, Result};
use crate::par::{self, Parallelism};
use crate::qreg::{FitConfig, TauGrid};
use crate::rng::{purpose, StreamKey};
use crate::specdsl::{Otherwise, PiecewiseSpec, Segment, TauInterval, TermSpec};
use crate::stats::{default_flexible_spec, StatisticKind};

/// A data generating process and sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub id: u8,
    pub n: usize,
    /// Heteroscedasticity parameter of process 9.
    #[serde(default)]
    pub gamma: f64,
}

impl DgpSpec {
    pub fn new(id: u8, n: usize) -> Result<Self> {
        let s = DgpSpec { id, n, gamma: 0.0 };
        s.validate()?;
        Ok(s)
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=17).contains(&self.id) {
            return Err(QspecError::config("dgp", format!("unsupported process {} (expected 1..=17)", self.id)));
        }
        if self.n < 30 {
            return Err(QspecError::config("n", format!("sample size {} is below 30", self.n)));
        }
        if !self.gamma.is_finite() {
            return Err(QspecError::config("gamma", "gamma must be finite"));
        }
        Ok(())
    }

    pub fn covariate_names(&self) -> Vec<String> {
        let names: &[&str] = match self.id {
            1..=3 => &["x0"],
            4..=8 | 13 | 14 => &["x1", "x2"],
            9 => &["x2", "x3"],
            10..=12 => &["x3"],
            15 => &["x3", "x4"],
            16 => &["x2", "x5", "u"],
            _ => &["x1", "x2", "x3"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `SN(location, scale, shape)` via `delta |U0| + sqrt(1 - delta^2) U1`.
fn skew_normal(rng: &mut ChaCha8Rng, location: f64, scale: f64, shape: f64) -> f64 {
    let delta = shape / (1.0 + shape * shape).sqrt();
    let u0 = normal(rng).abs();
    let u1 = normal(rng);
    location + scale * (delta * u0 + (1.0 - delta * delta).sqrt() * u1)
}

/// Symmetric chi-square(2) mixture with unit second moment.
fn chi_mixture(rng: &mut ChaCha8Rng) -> f64 {
    let chi: f64 = ChiSquared::new(2.0).expect("valid").sample(rng);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    sign * chi / 8f64.sqrt()
}

/// Draws one i.i.d. sample of the process.
pub fn draw_dgp(spec: &DgpSpec, key: StreamKey) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = key.rng();
    let rng = &mut rng;
    let std_normal = Normal::new(0.0, 1.0).expect("valid");
    let k = spec.covariate_names().len();
    let mut x = Vec::with_capacity(spec.n * k);
    let mut y = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let (row, yi): (Vec<f64>, f64) = match spec.id {
            1..=3 => {
                let x0: f64 = rng.random_range(0.0..2.0 * PI);
                let u = normal(rng);
                let yi = match spec.id {
                    1 => x0 / 4.0 + 1.0 + u,
                    2 => x0 / 4.0 + 1.0 + u * x0,
                    _ => x0 * x0 / 4.0 + 1.0 + u * x0 * x0,
                };
                (vec![x0], yi)
            }
            4..=8 => {
                let x1 = f64::from(u8::from(rng.random::<bool>()));
                let x2 = normal(rng);
                let base = x1 + x2;
                let yi = match spec.id {
                    4 => base + normal(rng),
                    5 => base + chi_mixture(rng),
                    6 => base + (0.5 + x1) * normal(rng),
                    7 => base + (0.5 + x1 + x2 * x2).sqrt() * normal(rng),
                    _ => base + 0.2 * (0.5 + x1 + x2 * x2).powf(1.5) * normal(rng),
                };
                (vec![x1, x2], yi)
            }
            9 => {
                let x2 = normal(rng);
                let x3: f64 = rng.random();
                let yi = x3 + (1.0 + spec.gamma * x2) * normal(rng);
                (vec![x2, x3], yi)
            }
            10 => {
                let x3: f64 = rng.random();
                let t: f64 = loop {
                    let t: f64 = rng.random();
                    if t > 0.0 {
                        break t;
                    }
                };
                let z = std_normal.inverse_cdf(t);
                let yi = if t >= 0.5 {
                    x3 * x3 / 4.0 + 1.0 + z * x3 * x3 / 2.0
                } else {
                    -x3 * x3 / 4.0 + 1.0 + z * x3
                };
                (vec![x3], yi)
            }
            11 => {
                let x3: f64 = rng.random();
                let w = 0.1f64.sqrt() * normal(rng);
                (vec![x3], (-PI / 2.0 + x3.powi(3)).sin() + w)
            }
            12 => {
                let x3: f64 = rng.random();
                (vec![x3], (x3 + chi_mixture(rng)).exp())
            }
            13 => {
                let x1: f64 = rng.random_range(-4.0..4.0);
                let x2 = 5.0 + normal(rng);
                (vec![x1, x2], 7.0 * (x1 * x2).sin() + x1)
            }
            14 => {
                let x1: f64 = rng.random_range(-4.0..4.0);
                let x2 = 5.0 + normal(rng);
                let z1 = skew_normal(rng, x1 + x2 * x2, 2.0 + (2.0 * x1).sin(), x1 / 4.0);
                (vec![x1, x2], (x1 * x2).sin() + x1 * x2 * x2 + z1)
            }
            15 => {
                let x3: f64 = rng.random();
                let x4: f64 = rng.random();
                let yi = 1.0 + 2.0 * x3 + 4.0 * x4 + 70.0 * (x3 * x4).cos() + normal(rng);
                (vec![x3, x4], yi)
            }
            16 => {
                let x2 = 5.0 + normal(rng);
                let x5: f64 = rng.random_range(-10.0..10.0);
                let u = normal(rng);
                let z1 = skew_normal(rng, x2 + x5 * x5, 2.0 + (2.0 * x2).sin(), x2 / 4.0);
                (vec![x2, x5, u], x2 * x2 * x5 + x2 * u + (x2 * u).cos() + z1)
            }
            _ => {
                let x1: f64 = rng.random_range(-4.0..4.0);
                let x2 = 5.0 + normal(rng);
                let x3: f64 = rng.random();
                let z2 = skew_normal(rng, x2 + x3 * x3, 5.0 + x1.sin() * x3, x3);
                (vec![x1, x2, x3], x1 + x2.sin() * x3 + z2)
            }
        };
        x.extend(row);
        y.push(yi);
    }
    Dataset::new("y", spec.covariate_names(), y, x)
}

fn interval(s: &str) -> TauInterval {
    s.parse().expect("static interval")
}

fn piecewise(response: &str, segments: Vec<(&str, Vec<TermSpec>)>, otherwise: Vec<TermSpec>) -> PiecewiseSpec {
    PiecewiseSpec {
        response: response.into(),
        intercept: true,
        location_shift: false,
        segments: segments
            .into_iter()
            .map(|(tau, terms)| Segment {
                tau: interval(tau),
                terms,
            })
            .collect(),
        otherwise: Some(Otherwise { terms: otherwise }),
    }
    .normalize()
    .expect("static specification")
}

/// Cubic P-spline settings of the interaction study: 5 knots, second-order
/// penalty, lambda 1.
fn s(c: &str) -> TermSpec {
    TermSpec::spline(c, KnotRule::Count(5), 3, 1.0, 2)
}

fn ti(a: &str, b: &str) -> TermSpec {
    TermSpec::tensor(&[a, b], KnotRule::Count(5), 3, 1.0, 2)
}

/// Names accepted by [`named_spec`].
pub const SPEC_NAMES: &[&str] = &[
    "linear", "linear-ls", "linear-lss", "quadratic", "b1", "b2", "b3", "b4", "b5", "b6", "t1", "t2", "t3", "t4",
    "t5", "dgp1-true", "dgp2-true", "dgp3-true", "dgp4-true", "dgp5-true", "dgp6-true", "dgp9-true", "dgp10-true",
    "dgp11-true", "dgp12-true",
];

/// Built-in specification `name` over the given covariates (in order).
/// `b*` use the first two covariates and `t*` the first three.
pub fn named_spec(name: &str, covariates: &[String]) -> Result<PiecewiseSpec> {
    let name = name.to_ascii_lowercase();
    let need = |k: usize| -> Result<()> {
        if covariates.len() < k {
            Err(QspecError::config("null-spec", format!("{name} needs {k} covariates, got {}", covariates.len())))
        } else {
            Ok(())
        }
    };
    let linear: Vec<TermSpec> = covariates.iter().map(|c| TermSpec::linear(c)).collect();
    let uniform = |terms| PiecewiseSpec::uniform("y", terms);
    let spec = match name.as_str() {
        "linear" | "linear-lss" | "dgp1-true" | "dgp2-true" | "dgp6-true" | "dgp9-true" => uniform(linear),
        "linear-ls" | "dgp4-true" | "dgp5-true" => {
            let mut s = uniform(linear);
            s.location_shift = true;
            s
        }
        "quadratic" | "dgp3-true" => uniform(covariates.iter().map(|c| TermSpec::power(c, 2.0)).collect()),
        "dgp10-true" => {
            need(1)?;
            let c = &covariates[0];
            piecewise(
                "y",
                vec![("[0.5, 1]", vec![TermSpec::power(c, 2.0)])],
                vec![TermSpec::linear(c), TermSpec::power(c, 2.0)],
            )
        }
        "dgp11-true" => {
            need(1)?;
            uniform(vec![TermSpec::Transform {
                covariate: covariates[0].clone(),
                functions: vec![crate::basis::Transform::Cube, crate::basis::Transform::Cos],
            }])
        }
        "dgp12-true" => {
            need(1)?;
            uniform(vec![TermSpec::Transform {
                covariate: covariates[0].clone(),
                functions: vec![crate::basis::Transform::Exp],
            }])
        }
        b if b.starts_with('b') && b.len() == 2 => {
            need(2)?;
            let (a, c) = (covariates[0].as_str(), covariates[1].as_str());
            let main = vec![s(a), s(c)];
            let full = vec![s(a), s(c), ti(a, c)];
            match b {
                "b1" => uniform(vec![s(a)]),
                "b2" => uniform(main),
                "b3" => uniform(full),
                "b4" => piecewise("y", vec![("(0.25, 0.75)", main)], full),
                "b5" => piecewise("y", vec![("(0.25, 1]", main)], full),
                "b6" => piecewise("y", vec![("[0, 0.75)", main)], full),
                _ => return Err(unknown_spec(&name)),
            }
        }
        t if t.starts_with('t') && t.len() == 2 => {
            need(3)?;
            let (a, b, c) = (covariates[0].as_str(), covariates[1].as_str(), covariates[2].as_str());
            let main = vec![s(a), s(b), s(c)];
            let mut full = main.clone();
            full.push(ti(a, b));
            full.push(ti(b, c));
            match t {
                "t1" => uniform(main),
                "t2" => uniform(full),
                "t3" => piecewise("y", vec![("(0.25, 0.75)", main)], full),
                "t4" => piecewise("y", vec![("(0.25, 1]", main)], full),
                "t5" => piecewise("y", vec![("[0, 0.75)", main)], full),
                _ => return Err(unknown_spec(&name)),
            }
        }
        _ => return Err(unknown_spec(&name)),
    };
    spec.normalize()
}

fn unknown_spec(name: &str) -> QspecError {
    QspecError::config("null-spec", format!("unknown specification {name:?}; known: {}", SPEC_NAMES.join(", ")))
}

/// Settings of one Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub dgp: DgpSpec,
    /// Label for reports.
    pub spec_name: String,
    pub null: PiecewiseSpec,
    /// Flexible model for `cmstar`; the default rule applies when `None`.
    pub flexible: Option<PiecewiseSpec>,
    pub statistic: StatisticKind,
    pub reps: usize,
    pub bootstrap: usize,
    pub levels: Vec<f64>,
    pub grid: TauGrid,
    pub seed: u64,
    pub fit: FitConfig,
    /// Parallelism over repetitions; bootstraps and fits inside a
    /// repetition follow `fit.parallelism`.
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl McConfig {
    /// Desk-scale defaults: 200 repetitions, 200 bootstrap replicates, 5%
    /// level. The grid is `0.02..0.98` for `cms` and `0.01..0.99` otherwise.
    pub fn desk(dgp: DgpSpec, spec_name: &str, statistic: StatisticKind, seed: u64) -> Result<Self> {
        let null = named_spec(spec_name, &dgp.covariate_names())?;
        let grid = match statistic {
            StatisticKind::CmS => TauGrid::even_percentiles(),
            _ => TauGrid::fine(),
        };
        Ok(McConfig {
            dgp,
            spec_name: spec_name.to_string(),
            null,
            flexible: None,
            statistic,
            reps: 200,
            bootstrap: 200,
            levels: vec![0.05],
            grid,
            seed,
            fit: FitConfig::default(),
            parallelism: Parallelism::Parallel,
        })
    }

    /// The published scale: 701 repetitions with 500 bootstrap replicates.
    pub fn full_scale(mut self) -> Self {
        self.reps = 701;
        self.bootstrap = 500;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRate {
    pub level: f64,
    pub rejection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub dgp: u8,
    pub gamma: f64,
    pub spec: String,
    pub n: usize,
    pub statistic: StatisticKind,
    pub reps: usize,
    pub bootstrap: usize,
    pub seed: u64,
    pub rates: Vec<LevelRate>,
    /// Per completed repetition, in repetition order.
    pub p_values: Vec<f64>,
    pub observed: Vec<f64>,
    pub failed: usize,
    pub wall_time_secs: f64,
}

impl McResult {
    pub fn rate(&self, level: f64) -> Option<f64> {
        self.rates.iter().find(|r| r.level == level).map(|r| r.rejection_rate)
    }

    /// Header of the flat results table.
    pub const CSV_HEADER: &'static str = "dgp,spec,n,level,statistic,reps,rejection_rate,wall_time";

    pub fn csv_rows(&self) -> Vec<String> {
        self.rates
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{},{:.3}",
                    self.dgp,
                    self.spec,
                    self.n,
                    r.level,
                    self.statistic.name(),
                    self.reps - self.failed,
                    r.rejection_rate,
                    self.wall_time_secs
                )
            })
            .collect()
    }
}

/// Rejection frequencies of the bootstrap test over independent samples.
pub fn run_mc(config: &McConfig) -> Result<McResult> {
    config.dgp.validate()?;
    if config.reps == 0 {
        return Err(QspecError::InvalidConfig("reps must be positive".into()));
    }
    let start = Instant::now();
    let root = StreamKey::new(config.seed);
    let outcomes = par::map_range(config.reps, config.parallelism, |r| {
        let key = root.child(r as u64);
        let data = draw_dgp(&config.dgp, key.child(purpose::DATA))?;
        let flexible = match (config.statistic, &config.flexible) {
            (StatisticKind::CmStar, None) => Some(default_flexible_spec(&data)),
            (_, f) => f.clone(),
        };
        let bcfg = BootstrapConfig {
            replicates: config.bootstrap,
            seed: key.child(purpose::BOOTSTRAP).raw(),
            levels: config.levels.clone(),
            parallelism: config.fit.parallelism,
        };
        run_bootstrap(&data, &config.null, config.statistic, flexible.as_ref(), &config.grid, &config.fit, &bcfg)
    });
    let mut failed = 0;
    let mut first = None;
    let mut p_values = Vec::new();
    let mut observed = Vec::new();
    let mut rejections = vec![0usize; config.levels.len()];
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(res) => {
                p_values.push(res.p_value);
                observed.push(res.observed());
                for (k, cv) in res.critical_values.iter().enumerate() {
                    rejections[k] += usize::from(cv.reject);
                }
            }
            Err(e) => {
                failed += 1;
                log::warn!("repetition {r} failed: {e}");
                first.get_or_insert_with(|| format!("repetition {r}: {e}"));
            }
        }
    }
    if failed * 20 > config.reps {
        return Err(QspecError::TooManyFailures {
            failed,
            total: config.reps,
            first: first.unwrap_or_default(),
        });
    }
    let done = (config.reps - failed) as f64;
    Ok(McResult {
        dgp: config.dgp.id,
        gamma: config.dgp.gamma,
        spec: config.spec_name.clone(),
        n: config.dgp.n,
        statistic: config.statistic,
        reps: config.reps,
        bootstrap: config.bootstrap,
        seed: config.seed,
        rates: config
            .levels
            .iter()
            .zip(&rejections)
            .map(|(&level, &k)| LevelRate {
                level,
                rejection_rate: k as f64 / done,
            })
            .collect(),
        p_values,
        observed,
        failed,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// One-sample Kolmogorov–Smirnov test against U(0, 1): returns the
/// statistic `D` and its asymptotic p-value with Stephens' small-sample
/// correction.
pub fn ks_uniform(sample: &[f64]) -> (f64, f64) {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0f64, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    (d, kolmogorov_q(lambda))
}

/// `P(K > lambda)` for the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
