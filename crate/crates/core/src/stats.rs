//! Cramér–von Mises and Kolmogorov–Smirnov distances between joint CDFs,
//! and the end-to-end evaluation of a statistic on a sample.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::KnotRule;
use crate::cdfkit::{ConditionalCdf, EmpiricalJointCdf, JointCdf, ModelJointCdf, SamplePoints};
use crate::data::Dataset;
use crate::error::{QspecError, Result};
use crate::linalg::pairwise_sum;
use crate::par::Parallelism;
use crate::qreg::{fit_process_mm, FitConfig, QuantileProcess, TauGrid};
use crate::specdsl::{DesignBuilder, ModelMatrix, PiecewiseSpec, TermSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatisticKind {
    /// Empirical joint CDF against the null model.
    Cm,
    /// Empirical joint CDF against a semi-parametric spline null model.
    CmS,
    /// Flexible spline model against the null model.
    CmStar,
    /// Sup-distance between the empirical joint CDF and the null model.
    Ks,
}

impl StatisticKind {
    pub fn name(self) -> &'static str {
        match self {
            StatisticKind::Cm => "cm",
            StatisticKind::CmS => "cms",
            StatisticKind::CmStar => "cmstar",
            StatisticKind::Ks => "ks",
        }
    }
}

impl std::str::FromStr for StatisticKind {
    type Err = QspecError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cm" => Ok(StatisticKind::Cm),
            "cms" => Ok(StatisticKind::CmS),
            "cmstar" => Ok(StatisticKind::CmStar),
            "ks" => Ok(StatisticKind::Ks),
            _ => Err(QspecError::InvalidConfig(format!(
                "unknown statistic {s:?} (expected cm, cms, cmstar or ks)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestStatistic {
    pub kind: StatisticKind,
    pub value: f64,
    pub n: usize,
    /// `n * (F_u - F_r)^2` at each sample point; their mean is `value` for
    /// the CM family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contributions: Option<Vec<f64>>,
}

fn differences(pts: &SamplePoints<'_>, unrestricted: &dyn JointCdf, restricted: &dyn JointCdf, mode: Parallelism) -> Vec<f64> {
    let a = unrestricted.at_points(pts, mode);
    let b = restricted.at_points(pts, mode);
    a.iter().zip(&b).map(|(u, r)| u - r).collect()
}

/// `sum_i (F_u(Y_i, X_i) - F_r(Y_i, X_i))^2`, the squared scaled distance
/// integrated against the empirical measure.
pub fn cm_from_differences(kind: StatisticKind, diffs: &[f64]) -> TestStatistic {
    let n = diffs.len();
    let contributions: Vec<f64> = diffs.iter().map(|d| n as f64 * d * d).collect();
    let sq: Vec<f64> = diffs.iter().map(|d| d * d).collect();
    TestStatistic {
        kind,
        value: pairwise_sum(&sq),
        n,
        contributions: Some(contributions),
    }
}

/// `sqrt(n) max_i |F_u - F_r|`.
pub fn ks_from_differences(diffs: &[f64]) -> TestStatistic {
    let n = diffs.len();
    let max = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    TestStatistic {
        kind: StatisticKind::Ks,
        value: (n as f64).sqrt() * max,
        n,
        contributions: None,
    }
}

pub fn cm_statistic(
    kind: StatisticKind,
    pts: &SamplePoints<'_>,
    unrestricted: &dyn JointCdf,
    restricted: &dyn JointCdf,
    mode: Parallelism,
) -> TestStatistic {
    cm_from_differences(kind, &differences(pts, unrestricted, restricted, mode))
}

pub fn ks_statistic(
    pts: &SamplePoints<'_>,
    unrestricted: &dyn JointCdf,
    restricted: &dyn JointCdf,
    mode: Parallelism,
) -> TestStatistic {
    ks_from_differences(&differences(pts, unrestricted, restricted, mode))
}

/// Flexible comparison model: a quadratic spline with `ceil(sqrt(n))`
/// knots, lambda 1 and a second-order penalty for every covariate with more
/// than two distinct values, and a linear term for the others.
pub fn default_flexible_spec(data: &Dataset) -> PiecewiseSpec {
    let terms = data
        .covariate_names()
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut values = data.column(j);
            values.sort_by(f64::total_cmp);
            values.dedup();
            if values.len() <= 2 {
                TermSpec::linear(name)
            } else {
                TermSpec::spline(name, KnotRule::SqrtN, 2, 1.0, 2)
            }
        })
        .collect();
    PiecewiseSpec::uniform(data.response_name(), terms)
}

/// Everything needed to evaluate one statistic on the original sample or
/// on a row-resample of it. Builders (scalings, knots) are fixed on the
/// original sample.
#[derive(Debug, Clone)]
pub struct StatisticSetup {
    pub kind: StatisticKind,
    pub grid: TauGrid,
    pub fit: FitConfig,
    null_builder: Arc<DesignBuilder>,
    null_mm: ModelMatrix,
    flexible: Option<(Arc<DesignBuilder>, ModelMatrix)>,
}

/// Result of evaluating a statistic on one sample.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub statistic: TestStatistic,
    pub null_process: QuantileProcess,
    pub flexible_process: Option<QuantileProcess>,
}

impl StatisticSetup {
    pub fn new(
        kind: StatisticKind,
        data: &Dataset,
        null: &PiecewiseSpec,
        flexible: Option<&PiecewiseSpec>,
        grid: TauGrid,
        fit: FitConfig,
    ) -> Result<Self> {
        let null_builder = Arc::new(DesignBuilder::new(null, data)?);
        if kind == StatisticKind::CmS && !null_builder.spec().has_penalized_terms() {
            return Err(QspecError::config(
                "statistic",
                "cms needs a null specification with at least one spline or tensor term",
            ));
        }
        let flexible = match (kind, flexible) {
            (StatisticKind::CmStar, Some(spec)) => {
                let b = Arc::new(DesignBuilder::new(spec, data)?);
                let mm = b.model_matrix(data)?;
                Some((b, mm))
            }
            (StatisticKind::CmStar, None) => {
                return Err(QspecError::config(
                    "statistic",
                    "cmstar needs a flexible spline specification",
                ))
            }
            _ => None,
        };
        let null_mm = null_builder.model_matrix(data)?;
        Ok(StatisticSetup {
            kind,
            grid,
            fit,
            null_builder,
            null_mm,
            flexible,
        })
    }

    pub fn null_builder(&self) -> &Arc<DesignBuilder> {
        &self.null_builder
    }

    pub fn null_model_matrix(&self) -> &ModelMatrix {
        &self.null_mm
    }

    /// Evaluates on `data`, whose covariate rows are the original rows
    /// `rows` (identity when `None`).
    pub fn evaluate(&self, data: &Dataset, rows: Option<&[usize]>) -> Result<Evaluation> {
        let mode = self.fit.parallelism;
        let null_mm = match rows {
            Some(r) => self.null_mm.select_rows(r),
            None => self.null_mm.clone(),
        };
        let null_process = fit_process_mm(&null_mm, data.y(), self.null_builder.clone(), &self.grid, &self.fit)?;
        let null_cond = ConditionalCdf::new(&null_process, &null_mm);
        let pts = SamplePoints::new(data, mode);
        let null_joint = ModelJointCdf::new(&null_cond);
        let (statistic, flexible_process) = match self.kind {
            StatisticKind::Cm | StatisticKind::CmS => (
                cm_statistic(self.kind, &pts, &EmpiricalJointCdf, &null_joint, mode),
                None,
            ),
            StatisticKind::Ks => (ks_statistic(&pts, &EmpiricalJointCdf, &null_joint, mode), None),
            StatisticKind::CmStar => {
                let (fb, fmm) = self.flexible.as_ref().expect("checked in new");
                let fmm = match rows {
                    Some(r) => fmm.select_rows(r),
                    None => fmm.clone(),
                };
                let flex = fit_process_mm(&fmm, data.y(), fb.clone(), &self.grid, &self.fit)?;
                let flex_cond = ConditionalCdf::new(&flex, &fmm);
                let stat = cm_statistic(self.kind, &pts, &ModelJointCdf::new(&flex_cond), &null_joint, mode);
                (stat, Some(flex))
            }
        };
        Ok(Evaluation {
            statistic,
            null_process,
            flexible_process,
        })
    }
}
