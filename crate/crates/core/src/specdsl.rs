//! Piecewise-in-tau model specifications and design matrix materialization.
//!
//! A specification is a TOML document:
//!
//! ```toml
//! response = "y"
//! intercept = true
//!
//! [[segments]]
//! tau = "[0.1, 0.9]"
//! terms = [{ kind = "linear", covariate = "x" }]
//!
//! [otherwise]
//! terms = [{ kind = "power", covariate = "x", exponent = 2.0 }]
//! ```
//!
//! Segment intervals use bracket notation for their endpoints. The optional
//! `otherwise` block fills every gap left in `(0, 1)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::basis::{self, KnotRule, KnotVector, MinMax, Transform};
use crate::data::Dataset;
use crate::error::{QspecError, Result};
use crate::linalg::Csr;

/// One additive component of the transformation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TermSpec {
    Linear {
        covariate: String,
    },
    Power {
        covariate: String,
        exponent: f64,
    },
    /// Chain of registered functions applied left to right.
    Transform {
        covariate: String,
        functions: Vec<Transform>,
    },
    /// `prod_j f_j(x_j)` as a single linear column.
    Product {
        covariates: Vec<String>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        transforms: Vec<Transform>,
    },
    /// Univariate penalized B-spline in one covariate or in a product
    /// interaction of several.
    Spline {
        covariates: Vec<String>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        transforms: Vec<Transform>,
        knots: KnotRule,
        degree: usize,
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_order")]
        penalty_order: usize,
    },
    /// Tensor-product interaction excluding the marginal main effects.
    Tensor {
        covariates: Vec<String>,
        knots: KnotRule,
        degree: usize,
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_order")]
        penalty_order: usize,
    },
}

fn default_lambda() -> f64 {
    1.0
}

fn default_order() -> usize {
    2
}

fn default_true() -> bool {
    true
}

impl TermSpec {
    pub fn linear(covariate: &str) -> Self {
        TermSpec::Linear {
            covariate: covariate.into(),
        }
    }

    pub fn power(covariate: &str, exponent: f64) -> Self {
        TermSpec::Power {
            covariate: covariate.into(),
            exponent,
        }
    }

    pub fn spline(covariate: &str, knots: KnotRule, degree: usize, lambda: f64, penalty_order: usize) -> Self {
        TermSpec::Spline {
            covariates: vec![covariate.into()],
            transforms: Vec::new(),
            knots,
            degree,
            lambda,
            penalty_order,
        }
    }

    pub fn tensor(covariates: &[&str], knots: KnotRule, degree: usize, lambda: f64, penalty_order: usize) -> Self {
        TermSpec::Tensor {
            covariates: covariates.iter().map(|c| c.to_string()).collect(),
            knots,
            degree,
            lambda,
            penalty_order,
        }
    }

    pub fn covariates(&self) -> Vec<&str> {
        match self {
            TermSpec::Linear { covariate }
            | TermSpec::Power { covariate, .. }
            | TermSpec::Transform { covariate, .. } => vec![covariate.as_str()],
            TermSpec::Product { covariates, .. }
            | TermSpec::Spline { covariates, .. }
            | TermSpec::Tensor { covariates, .. } => covariates.iter().map(String::as_str).collect(),
        }
    }

    pub fn is_penalized(&self) -> bool {
        matches!(self, TermSpec::Spline { .. } | TermSpec::Tensor { .. })
    }

    /// Copy with every smoothing parameter replaced.
    pub fn with_lambda(&self, value: f64) -> Self {
        let mut t = self.clone();
        if let TermSpec::Spline { lambda, .. } | TermSpec::Tensor { lambda, .. } = &mut t {
            *lambda = value;
        }
        t
    }

    fn validate(&self, location: &str) -> Result<()> {
        let err = |m: String| Err(QspecError::config(location, m));
        match self {
            TermSpec::Power { exponent, .. } if !exponent.is_finite() => err(format!("power exponent {exponent} is not finite")),
            TermSpec::Transform { functions, .. } if functions.is_empty() => err("transform chain is empty".into()),
            TermSpec::Product { covariates, transforms } | TermSpec::Spline { covariates, transforms, .. }
                if covariates.is_empty() || (!transforms.is_empty() && transforms.len() != covariates.len()) =>
            {
                err(format!(
                    "{} covariates with {} transforms",
                    covariates.len(),
                    transforms.len()
                ))
            }
            TermSpec::Tensor { covariates, .. } if covariates.len() < 2 => {
                err("a tensor interaction needs at least two covariates".into())
            }
            TermSpec::Spline { degree, lambda, .. } | TermSpec::Tensor { degree, lambda, .. } => {
                if *degree > 3 {
                    err(format!("spline degree {degree} is not in 0..=3"))
                } else if !(*lambda >= 0.0) || !lambda.is_finite() {
                    err(format!("penalty lambda {lambda} must be a finite nonnegative number"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// An interval of quantile levels with explicit endpoint ownership.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TauInterval {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl TauInterval {
    pub fn new(lo: f64, hi: f64, lo_closed: bool, hi_closed: bool) -> std::result::Result<Self, String> {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
            return Err(format!("interval endpoints {lo}, {hi} must lie in [0, 1]"));
        }
        if lo > hi || (lo == hi && !(lo_closed && hi_closed)) {
            return Err(format!("interval from {lo} to {hi} is empty"));
        }
        Ok(TauInterval { lo, hi, lo_closed, hi_closed })
    }

    pub fn contains(&self, tau: f64) -> bool {
        let above = tau > self.lo || (self.lo_closed && tau == self.lo);
        let below = tau < self.hi || (self.hi_closed && tau == self.hi);
        above && below
    }
}

impl fmt::Display for TauInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}, {}{}",
            if self.lo_closed { '[' } else { '(' },
            self.lo,
            self.hi,
            if self.hi_closed { ']' } else { ')' }
        )
    }
}

impl FromStr for TauInterval {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        let bad = || format!("cannot read tau interval {s:?}; expected e.g. \"[0.1, 0.9)\"");
        let lo_closed = match s.chars().next() {
            Some('[') => true,
            Some('(') => false,
            _ => return Err(bad()),
        };
        let hi_closed = match s.chars().last() {
            Some(']') => true,
            Some(')') => false,
            _ => return Err(bad()),
        };
        let inner = &s[1..s.len() - 1];
        let (a, b) = inner.split_once(',').ok_or_else(bad)?;
        let lo: f64 = a.trim().parse().map_err(|_| bad())?;
        let hi: f64 = b.trim().parse().map_err(|_| bad())?;
        TauInterval::new(lo, hi, lo_closed, hi_closed)
    }
}

impl TryFrom<String> for TauInterval {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<TauInterval> for String {
    fn from(i: TauInterval) -> String {
        i.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub tau: TauInterval,
    pub terms: Vec<TermSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Otherwise {
    pub terms: Vec<TermSpec>,
}

/// A validated specification whose segments partition `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseSpec {
    pub response: String,
    #[serde(default = "default_true")]
    pub intercept: bool,
    /// Fit slopes once at the median and let only the intercept vary in tau.
    #[serde(default)]
    pub location_shift: bool,
    pub segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub otherwise: Option<Otherwise>,
}

impl PiecewiseSpec {
    /// Single-segment specification valid for every tau.
    pub fn uniform(response: &str, terms: Vec<TermSpec>) -> Self {
        PiecewiseSpec {
            response: response.into(),
            intercept: true,
            location_shift: false,
            segments: vec![Segment {
                tau: TauInterval::new(0.0, 1.0, true, true).expect("valid interval"),
                terms,
            }],
            otherwise: None,
        }
    }

    /// Sorts segments, fills gaps from `otherwise` and checks the partition.
    pub fn normalize(mut self) -> Result<Self> {
        if self.segments.is_empty() && self.otherwise.is_none() {
            return Err(QspecError::config("segments", "at least one segment is required"));
        }
        for (s, seg) in self.segments.iter().enumerate() {
            if seg.terms.is_empty() && !self.intercept {
                return Err(QspecError::config(format!("segments[{s}]"), "term list is empty"));
            }
            for (t, term) in seg.terms.iter().enumerate() {
                term.validate(&format!("segments[{s}].terms[{t}]"))?;
            }
        }
        if let Some(o) = &self.otherwise {
            for (t, term) in o.terms.iter().enumerate() {
                term.validate(&format!("otherwise.terms[{t}]"))?;
            }
        }
        self.segments.sort_by(|a, b| {
            a.tau
                .lo
                .total_cmp(&b.tau.lo)
                .then(b.tau.lo_closed.cmp(&a.tau.lo_closed))
        });
        let mut filled = Vec::new();
        let mut gaps = Vec::new();
        // `cursor` is the right end of the covered region, `covered` whether
        // the cursor point itself is covered. Tau = 0 is outside the domain.
        let (mut cursor, mut covered) = (0.0f64, true);
        for (s, seg) in self.segments.iter().enumerate() {
            let i = seg.tau;
            let overlaps = i.lo < cursor || (i.lo == cursor && cursor > 0.0 && covered && i.lo_closed);
            if overlaps {
                return Err(QspecError::config(
                    format!("segments[{s}]"),
                    format!("interval {i} overlaps an earlier segment"),
                ));
            }
            if i.lo > cursor {
                gaps.push(TauInterval::new(cursor, i.lo, !covered, !i.lo_closed).expect("nonempty gap"));
            } else if !covered && !i.lo_closed {
                gaps.push(TauInterval::new(cursor, cursor, true, true).expect("point gap"));
            }
            filled.push(seg.clone());
            cursor = i.hi;
            covered = i.hi_closed;
        }
        if cursor < 1.0 {
            gaps.push(TauInterval::new(cursor, 1.0, !covered, true).expect("nonempty gap"));
        }
        if !gaps.is_empty() {
            let Some(other) = &self.otherwise else {
                let list: Vec<String> = gaps.iter().map(|g| g.to_string()).collect();
                return Err(QspecError::config(
                    "segments",
                    format!("tau levels {} are not covered and no [otherwise] block is given", list.join(", ")),
                ));
            };
            for g in gaps {
                filled.push(Segment {
                    tau: g,
                    terms: other.terms.clone(),
                });
            }
            filled.sort_by(|a, b| a.tau.lo.total_cmp(&b.tau.lo).then(b.tau.lo_closed.cmp(&a.tau.lo_closed)));
        }
        self.segments = filled;
        self.otherwise = None;
        if self.location_shift && (self.segments.len() != 1 || !self.intercept) {
            return Err(QspecError::config(
                "location_shift",
                "a location-shift model needs a single segment and an intercept",
            ));
        }
        Ok(self)
    }

    /// Checks every covariate name against a data header.
    pub fn check_covariates(&self, header: &[String]) -> Result<()> {
        for (s, seg) in self.segments.iter().enumerate() {
            for (t, term) in seg.terms.iter().enumerate() {
                for c in term.covariates() {
                    if !header.iter().any(|h| h == c) {
                        return Err(QspecError::config(
                            format!("segments[{s}].terms[{t}]"),
                            format!("unknown covariate {c:?}"),
                        ));
                    }
                }
            }
        }
        if !header.iter().any(|h| *h == self.response) {
            return Err(QspecError::config("response", format!("unknown column {:?}", self.response)));
        }
        Ok(())
    }

    /// Distinct covariate names in first-use order.
    pub fn covariates(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for seg in &self.segments {
            for term in &seg.terms {
                for c in term.covariates() {
                    if !out.iter().any(|o| o == c) {
                        out.push(c.to_string());
                    }
                }
            }
        }
        out
    }

    pub fn segment_index(&self, tau: f64) -> Result<usize> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(QspecError::Domain(format!("tau = {tau} is not in (0, 1)")));
        }
        self.segments
            .iter()
            .position(|s| s.tau.contains(tau))
            .ok_or_else(|| QspecError::Domain(format!("tau = {tau} is not covered by the specification")))
    }

    pub fn has_penalized_terms(&self) -> bool {
        self.segments.iter().any(|s| s.terms.iter().any(TermSpec::is_penalized))
    }

    /// Copy with every smoothing parameter set to `lambda`.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut s = self.clone();
        for seg in &mut s.segments {
            for t in &mut seg.terms {
                *t = t.with_lambda(lambda);
            }
        }
        s
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("specification serializes")
    }
}

/// Parses and validates a specification document against a data header.
pub fn parse_spec(text: &str, header: &[String]) -> Result<PiecewiseSpec> {
    let raw: PiecewiseSpec = toml::from_str(text).map_err(|e| {
        let location = match e.span() {
            Some(span) => {
                let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                format!("line {line}")
            }
            None => "document".to_string(),
        };
        QspecError::config(location, e.message().to_string())
    })?;
    let spec = raw.normalize()?;
    spec.check_covariates(header)?;
    Ok(spec)
}

#[derive(Debug, Clone)]
enum Block {
    Linear(usize),
    Power(usize, f64),
    Transform(usize, Vec<Transform>),
    Product(Vec<usize>, Vec<Transform>),
    Spline {
        inputs: Vec<usize>,
        transforms: Vec<Transform>,
        scale: MinMax,
        knots: KnotVector,
        drop_first: bool,
    },
    Tensor {
        covs: Vec<usize>,
        scales: Vec<MinMax>,
        knots: Vec<KnotVector>,
        // full multi-index column -> kept column (usize::MAX if dropped)
        keep: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct BlockLayout {
    block: Block,
    offset: usize,
    width: usize,
    // penalty rows over the block's own columns, already scaled by lambda
    penalty: Vec<Vec<(usize, f64)>>,
}

/// A specification bound to a dataset's column layout, with spline
/// scalings and knots fitted on that dataset.
///
/// Columns form the union over segments: intercept first, then each
/// distinct term once. Columns of terms absent from a segment are zero there.
#[derive(Debug, Clone)]
pub struct DesignBuilder {
    spec: PiecewiseSpec,
    covariate_names: Vec<String>,
    blocks: Vec<BlockLayout>,
    segment_blocks: Vec<Vec<usize>>,
    p: usize,
    column_names: Vec<String>,
}

impl DesignBuilder {
    pub fn new(spec: &PiecewiseSpec, data: &Dataset) -> Result<Self> {
        let spec = spec.clone().normalize()?;
        let mut header: Vec<String> = data.covariate_names().to_vec();
        header.push(data.response_name().to_string());
        spec.check_covariates(&header)?;
        let resolve = |name: &str| -> Result<usize> {
            data.covariate_index(name).ok_or_else(|| {
                QspecError::config("terms", format!("covariate {name:?} is not a covariate of the dataset"))
            })
        };
        let mut unique: Vec<TermSpec> = Vec::new();
        let mut segment_blocks = Vec::new();
        for seg in &spec.segments {
            let mut ids = Vec::new();
            for term in &seg.terms {
                let id = match unique.iter().position(|u| u == term) {
                    Some(id) => id,
                    None => {
                        unique.push(term.clone());
                        unique.len() - 1
                    }
                };
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
            segment_blocks.push(ids);
        }

        let n = data.n();
        let mut column_names = Vec::new();
        let mut offset = 0;
        if spec.intercept {
            column_names.push("(intercept)".to_string());
            offset = 1;
        }
        let mut blocks = Vec::new();
        for (b, term) in unique.iter().enumerate() {
            let location = format!("term {b} ({})", term_label(term));
            let (block, names, penalty) = match term {
                TermSpec::Linear { covariate } => (Block::Linear(resolve(covariate)?), vec![covariate.clone()], vec![]),
                TermSpec::Power { covariate, exponent } => (
                    Block::Power(resolve(covariate)?, *exponent),
                    vec![format!("{covariate}^{exponent}")],
                    vec![],
                ),
                TermSpec::Transform { covariate, functions } => (
                    Block::Transform(resolve(covariate)?, functions.clone()),
                    vec![term_label(term)],
                    vec![],
                ),
                TermSpec::Product { covariates, transforms } => {
                    let idx = covariates.iter().map(|c| resolve(c)).collect::<Result<Vec<_>>>()?;
                    (Block::Product(idx, transforms.clone()), vec![term_label(term)], vec![])
                }
                TermSpec::Spline {
                    covariates,
                    transforms,
                    knots,
                    degree,
                    lambda,
                    penalty_order,
                } => {
                    let inputs = covariates.iter().map(|c| resolve(c)).collect::<Result<Vec<_>>>()?;
                    let values = (0..n)
                        .map(|i| basis::product_interaction(transforms, &inputs, data.row(i)))
                        .collect::<Result<Vec<_>>>()?;
                    let scale = MinMax::fit(&values).map_err(|e| QspecError::config(&location, e.to_string()))?;
                    let kv = basis::make_knots(n, *degree, *knots).map_err(|e| QspecError::config(&location, e.to_string()))?;
                    let m = kv.n_basis();
                    let drop_first = spec.intercept;
                    let d = basis::difference_matrix(m, *penalty_order)
                        .map_err(|e| QspecError::config(&location, e.to_string()))?;
                    let shift = usize::from(drop_first);
                    let penalty = if *lambda > 0.0 {
                        sparse_penalty(&d, |j| j.checked_sub(shift), *lambda)
                    } else {
                        vec![]
                    };
                    let label = term_label(term);
                    let names = (shift..m).map(|j| format!("{label}[{j}]")).collect();
                    (
                        Block::Spline {
                            inputs,
                            transforms: transforms.clone(),
                            scale,
                            knots: kv,
                            drop_first,
                        },
                        names,
                        penalty,
                    )
                }
                TermSpec::Tensor {
                    covariates,
                    knots,
                    degree,
                    lambda,
                    penalty_order,
                } => {
                    let covs = covariates.iter().map(|c| resolve(c)).collect::<Result<Vec<_>>>()?;
                    let mut scales = Vec::new();
                    let mut kvs = Vec::new();
                    for &c in &covs {
                        scales.push(MinMax::fit(&data.column(c)).map_err(|e| QspecError::config(&location, e.to_string()))?);
                        kvs.push(basis::make_knots(n, *degree, *knots).map_err(|e| QspecError::config(&location, e.to_string()))?);
                    }
                    let dims: Vec<usize> = kvs.iter().map(KnotVector::n_basis).collect();
                    let total: usize = dims.iter().product();
                    let drop = spec.intercept;
                    let mut keep = vec![usize::MAX; total];
                    let mut names = Vec::new();
                    let label = term_label(term);
                    let mut kept = 0;
                    for (flat, slot) in keep.iter_mut().enumerate() {
                        let multi = unflatten(flat, &dims);
                        if drop && multi.contains(&0) {
                            continue;
                        }
                        *slot = kept;
                        kept += 1;
                        let parts: Vec<String> = multi.iter().map(|j| j.to_string()).collect();
                        names.push(format!("{label}[{}]", parts.join(",")));
                    }
                    let mut penalty = Vec::new();
                    if *lambda > 0.0 {
                        for (k, &mk) in dims.iter().enumerate() {
                            let d = basis::difference_matrix(mk, *penalty_order)
                                .map_err(|e| QspecError::config(&location, e.to_string()))?;
                            // one difference row per (difference index, other margins)
                            for flat in 0..total {
                                let multi = unflatten(flat, &dims);
                                if multi[k] != 0 {
                                    continue;
                                }
                                for drow in &d {
                                    let mut row = Vec::new();
                                    for (jk, &coef) in drow.iter().enumerate() {
                                        if coef == 0.0 {
                                            continue;
                                        }
                                        let mut mm = multi.clone();
                                        mm[k] = jk;
                                        let col = keep[flatten(&mm, &dims)];
                                        if col != usize::MAX {
                                            row.push((col, lambda * coef));
                                        }
                                    }
                                    if !row.is_empty() {
                                        penalty.push(row);
                                    }
                                }
                            }
                        }
                    }
                    (
                        Block::Tensor {
                            covs,
                            scales,
                            knots: kvs,
                            keep,
                        },
                        names,
                        penalty,
                    )
                }
            };
            let width = names.len();
            if width == 0 {
                return Err(QspecError::config(location, "term contributes no columns"));
            }
            column_names.extend(names);
            blocks.push(BlockLayout {
                block,
                offset,
                width,
                penalty,
            });
            offset += width;
        }
        Ok(DesignBuilder {
            spec,
            covariate_names: data.covariate_names().to_vec(),
            blocks,
            segment_blocks,
            p: offset,
            column_names,
        })
    }

    pub fn spec(&self) -> &PiecewiseSpec {
        &self.spec
    }

    /// Total number of columns in the union layout.
    pub fn n_columns(&self) -> usize {
        self.p
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn n_segments(&self) -> usize {
        self.spec.segments.len()
    }

    pub fn segment_index(&self, tau: f64) -> Result<usize> {
        self.spec.segment_index(tau)
    }

    /// Columns that can be nonzero in segment `seg`, ascending.
    pub fn active_columns(&self, seg: usize) -> Vec<usize> {
        let mut cols = Vec::new();
        if self.spec.intercept {
            cols.push(0);
        }
        for &b in &self.segment_blocks[seg] {
            let l = &self.blocks[b];
            cols.extend(l.offset..l.offset + l.width);
        }
        cols.sort_unstable();
        cols
    }

    /// Penalty rows for segment `seg` in the union layout (lambda applied).
    pub fn penalty_rows(&self, seg: usize) -> Csr {
        let mut out = Csr::new(self.p);
        for &b in &self.segment_blocks[seg] {
            let l = &self.blocks[b];
            for row in &l.penalty {
                out.push_row(row.iter().map(|&(j, v)| (l.offset + j, v)));
            }
        }
        out
    }

    fn check_layout(&self, data: &Dataset) -> Result<()> {
        if data.covariate_names() != self.covariate_names.as_slice() {
            return Err(QspecError::Shape(format!(
                "dataset columns {:?} differ from the columns {:?} the design was built for",
                data.covariate_names(),
                self.covariate_names
            )));
        }
        Ok(())
    }

    fn push_row(&self, seg: usize, x: &[f64], out: &mut Vec<(usize, f64)>) -> Result<()> {
        out.clear();
        if self.spec.intercept {
            out.push((0, 1.0));
        }
        let mut local = [0.0; 4];
        for &b in &self.segment_blocks[seg] {
            let l = &self.blocks[b];
            match &l.block {
                Block::Linear(j) => out.push((l.offset, x[*j])),
                Block::Power(j, e) => out.push((l.offset, x[*j].powf(*e))),
                Block::Transform(j, fs) => out.push((l.offset, fs.iter().fold(x[*j], |v, f| f.apply(v)))),
                Block::Product(js, fs) => out.push((l.offset, basis::product_interaction(fs, js, x)?)),
                Block::Spline {
                    inputs,
                    transforms,
                    scale,
                    knots,
                    drop_first,
                } => {
                    let v = scale.apply(basis::product_interaction(transforms, inputs, x)?);
                    let first = knots.eval_local(v, &mut local)?;
                    for (k, &val) in local[..=knots.degree()].iter().enumerate() {
                        let j = first + k;
                        if *drop_first && j == 0 {
                            continue;
                        }
                        out.push((l.offset + j - usize::from(*drop_first), val));
                    }
                }
                Block::Tensor { covs, scales, knots, keep } => {
                    let dims: Vec<usize> = knots.iter().map(KnotVector::n_basis).collect();
                    // start from the single entry (flat 0, value 1) and expand margin by margin
                    let mut acc: Vec<(usize, f64)> = vec![(0, 1.0)];
                    for (k, kv) in knots.iter().enumerate() {
                        let first = kv.eval_local(scales[k].apply(x[covs[k]]), &mut local)?;
                        let mut next = Vec::with_capacity(acc.len() * (kv.degree() + 1));
                        for &(flat, a) in &acc {
                            for (t, &v) in local[..=kv.degree()].iter().enumerate() {
                                next.push((flat * dims[k] + first + t, a * v));
                            }
                        }
                        acc = next;
                    }
                    for (flat, v) in acc {
                        let col = keep[flat];
                        if col != usize::MAX {
                            out.push((l.offset + col, v));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Sparse design rows for every segment, in the union layout.
    pub fn model_matrix(&self, data: &Dataset) -> Result<ModelMatrix> {
        self.check_layout(data)?;
        let mut segments = Vec::with_capacity(self.n_segments());
        let mut buf = Vec::new();
        for seg in 0..self.n_segments() {
            let mut m = Csr::new(self.p);
            for i in 0..data.n() {
                self.push_row(seg, data.row(i), &mut buf)?;
                m.push_row(buf.iter().copied());
            }
            segments.push(m);
        }
        Ok(ModelMatrix { segments })
    }

    /// Transformation vector `P(x, tau)` for one covariate point.
    pub fn row(&self, x: &[f64], tau: f64) -> Result<Vec<f64>> {
        let seg = self.segment_index(tau)?;
        let mut buf = Vec::new();
        self.push_row(seg, x, &mut buf)?;
        let mut out = vec![0.0; self.p];
        for (j, v) in buf {
            out[j] += v;
        }
        Ok(out)
    }

    /// Dense `n x p` matrix of `P(x_i, tau)` with inactive columns zero.
    pub fn design_matrix(&self, data: &Dataset, tau: f64) -> Result<Vec<Vec<f64>>> {
        self.check_layout(data)?;
        let seg = self.segment_index(tau)?;
        let mut buf = Vec::new();
        let mut rows = Vec::with_capacity(data.n());
        for i in 0..data.n() {
            self.push_row(seg, data.row(i), &mut buf)?;
            let mut r = vec![0.0; self.p];
            for &(j, v) in &buf {
                r[j] += v;
            }
            rows.push(r);
        }
        Ok(rows)
    }
}

/// Materialized design rows, one sparse matrix per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrix {
    segments: Vec<Csr>,
}

impl ModelMatrix {
    pub fn segment(&self, seg: usize) -> &Csr {
        &self.segments[seg]
    }

    pub fn n_rows(&self) -> usize {
        self.segments.first().map_or(0, Csr::rows)
    }

    pub fn select_rows(&self, rows: &[usize]) -> ModelMatrix {
        ModelMatrix {
            segments: self.segments.iter().map(|m| m.select_rows(rows)).collect(),
        }
    }
}

fn sparse_penalty(d: &[Vec<f64>], map: impl Fn(usize) -> Option<usize>, lambda: f64) -> Vec<Vec<(usize, f64)>> {
    d.iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .filter_map(|(j, v)| map(j).map(|k| (k, lambda * v)))
                .collect::<Vec<_>>()
        })
        .filter(|r| !r.is_empty())
        .collect()
}

fn unflatten(mut flat: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for k in (0..dims.len()).rev() {
        out[k] = flat % dims[k];
        flat /= dims[k];
    }
    out
}

fn flatten(multi: &[usize], dims: &[usize]) -> usize {
    multi.iter().zip(dims).fold(0, |acc, (m, d)| acc * d + m)
}

fn term_label(term: &TermSpec) -> String {
    let names = |fs: &[Transform]| -> Vec<&'static str> { fs.iter().map(|f| f.name()).collect() };
    match term {
        TermSpec::Linear { covariate } => covariate.clone(),
        TermSpec::Power { covariate, exponent } => format!("{covariate}^{exponent}"),
        TermSpec::Transform { covariate, functions } => names(functions)
            .iter()
            .fold(covariate.clone(), |acc, f| format!("{f}({acc})")),
        TermSpec::Product { covariates, transforms } | TermSpec::Spline { covariates, transforms, .. } => {
            let parts: Vec<String> = covariates
                .iter()
                .enumerate()
                .map(|(k, c)| match transforms.get(k) {
                    Some(f) if *f != Transform::Identity => format!("{}({c})", f.name()),
                    _ => c.clone(),
                })
                .collect();
            match term {
                TermSpec::Spline { .. } => format!("s({})", parts.join("*")),
                _ => parts.join("*"),
            }
        }
        TermSpec::Tensor { covariates, .. } => format!("ti({})", covariates.join(",")),
    }
}
