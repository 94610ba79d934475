//! Flat parameter layout: maps the model's coefficient blocks onto one
//! ordered vector and resolves every linked prior expression to slot indices.
//!
//! Order: `latent` block `(1 + M)`; per continuous feature the outcome
//! intercept, class effect, residual scale, then the missingness block
//! `(1 + M + 1)`; per binary feature the intercept and class effect.

use std::collections::HashMap;
use thiserror::Error;

use crate::config::{validate_config, AffineExpr, ModelConfig, PriorList, PriorSpec, ValidationReport};

pub const LATENT_BLOCK: &str = "latent";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("parameter {param} references {referenced}, which is not declared before it")]
    ForwardReference { param: String, referenced: String },
    #[error("parameter {param} references unknown parameter {referenced}")]
    UnknownReference { param: String, referenced: String },
    #[error("parameter {param}: missing covariate prior for column {column}")]
    MissingCovariatePrior { param: String, column: usize },
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
    #[error("invalid configuration:\n{0}")]
    Invalid(ValidationReport),
}

impl LayoutError {
    pub fn path(&self) -> String {
        match self {
            LayoutError::ForwardReference { param, .. }
            | LayoutError::UnknownReference { param, .. }
            | LayoutError::MissingCovariatePrior { param, .. } => format!("parameter {param}"),
            LayoutError::DuplicateName(n) => format!("parameter {n}"),
            LayoutError::Invalid(_) => "config".into(),
        }
    }
}

/// Affine expression over slot indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkedExpr {
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

impl LinkedExpr {
    pub fn constant(c: f64) -> Self {
        LinkedExpr { constant: c, terms: Vec::new() }
    }

    #[inline]
    pub fn eval(&self, theta: &[f64]) -> f64 {
        self.terms.iter().fold(self.constant, |acc, &(i, c)| acc + c * theta[i])
    }

    /// Interval of values over a box of parameter ranges.
    fn range(&self, ranges: &[(f64, f64)]) -> (f64, f64) {
        let (mut lo, mut hi) = (self.constant, self.constant);
        for &(i, c) in &self.terms {
            if c == 0.0 {
                continue;
            }
            let (a, b) = ranges[i];
            if c > 0.0 {
                lo += c * a;
                hi += c * b;
            } else {
                lo += c * b;
                hi += c * a;
            }
        }
        (lo, hi)
    }

    fn minus(&self, other: &LinkedExpr) -> LinkedExpr {
        let mut terms = self.terms.clone();
        for &(i, c) in &other.terms {
            match terms.iter_mut().find(|(j, _)| *j == i) {
                Some(t) => t.1 -= c,
                None => terms.push((i, -c)),
            }
        }
        LinkedExpr { constant: self.constant - other.constant, terms }
    }
}

/// How a slot maps between constrained and unconstrained coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum Constraint {
    Unbounded,
    Lower(LinkedExpr),
    Upper(LinkedExpr),
    Interval(LinkedExpr, LinkedExpr),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintKind {
    Unbounded,
    Lower,
    Upper,
    Interval,
}

impl Constraint {
    pub fn kind(&self) -> ConstraintKind {
        match self {
            Constraint::Unbounded => ConstraintKind::Unbounded,
            Constraint::Lower(_) => ConstraintKind::Lower,
            Constraint::Upper(_) => ConstraintKind::Upper,
            Constraint::Interval(..) => ConstraintKind::Interval,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    pub mean: LinkedExpr,
    pub sd: f64,
    pub constraint: Constraint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContinuousBlock {
    pub intercept: usize,
    pub class_effect: usize,
    pub sigma: usize,
    /// Missingness intercept; covariate coefficients follow, then the class effect.
    pub miss_start: usize,
}

impl ContinuousBlock {
    pub fn miss_class(&self, m: usize) -> usize {
        self.miss_start + 1 + m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinaryBlock {
    pub intercept: usize,
    pub class_effect: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterLayout {
    slots: Vec<Slot>,
    names: Vec<String>,
    covariate_columns: Vec<String>,
    pub continuous: Vec<ContinuousBlock>,
    pub binary: Vec<BinaryBlock>,
}

impl ParameterLayout {
    pub fn dim(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Encoded covariate column count `M`.
    pub fn num_covariates(&self) -> usize {
        self.covariate_columns.len()
    }

    pub fn covariate_columns(&self) -> &[String] {
        &self.covariate_columns
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// `1 + M` latent regression coefficients start at slot 0.
    pub fn latent_len(&self) -> usize {
        1 + self.num_covariates()
    }
}

/// Expected dimension for `m` encoded covariates, `j` continuous and `k` binary features.
pub fn expected_dim(m: usize, j: usize, k: usize) -> usize {
    (1 + m) + j * (3 + (2 + m)) + k * 2
}

/// Validates the configuration and lays out its parameters.
pub fn build_layout(config: &ModelConfig) -> Result<ParameterLayout, LayoutError> {
    let report = validate_config(config);
    if !report.is_empty() {
        return Err(LayoutError::Invalid(report));
    }
    build_layout_unchecked(config)
}

struct Builder {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
    /// Every name the layout will contain, for forward-reference detection.
    all_names: HashMap<String, usize>,
}

impl Builder {
    fn resolve(&self, param: &str, e: &AffineExpr) -> Result<LinkedExpr, LayoutError> {
        let mut terms = Vec::with_capacity(e.terms.len());
        for t in &e.terms {
            match self.index.get(&t.param) {
                Some(&i) => terms.push((i, t.coef)),
                None if self.all_names.contains_key(&t.param) || t.param == param => {
                    return Err(LayoutError::ForwardReference {
                        param: param.to_string(),
                        referenced: t.param.clone(),
                    })
                }
                None => {
                    return Err(LayoutError::UnknownReference {
                        param: param.to_string(),
                        referenced: t.param.clone(),
                    })
                }
            }
        }
        Ok(LinkedExpr { constant: e.constant, terms })
    }

    fn push(&mut self, name: String, prior: &PriorSpec) -> Result<usize, LayoutError> {
        let mean = self.resolve(&name, &prior.mean)?;
        let lower = prior.lower.as_ref().map(|e| self.resolve(&name, e)).transpose()?;
        let upper = prior.upper.as_ref().map(|e| self.resolve(&name, e)).transpose()?;
        let constraint = match (lower, upper) {
            (None, None) => Constraint::Unbounded,
            (Some(l), None) => Constraint::Lower(l),
            (None, Some(u)) => Constraint::Upper(u),
            (Some(l), Some(u)) => Constraint::Interval(l, u),
        };
        let idx = self.slots.len();
        if self.index.insert(name.clone(), idx).is_some() {
            return Err(LayoutError::DuplicateName(name));
        }
        self.slots.push(Slot { name, mean, sd: prior.sd, constraint });
        Ok(idx)
    }

    fn push_list(&mut self, prefix: &str, columns: &[String], list: &PriorList) -> Result<(), LayoutError> {
        for (c, col) in columns.iter().enumerate() {
            let name = format!("{prefix}.{col}");
            let prior = list
                .get(c)
                .ok_or_else(|| LayoutError::MissingCovariatePrior { param: name.clone(), column: c })?;
            self.push(name, prior)?;
        }
        Ok(())
    }
}

/// Parameter names in layout order, without resolving priors.
pub fn parameter_names(config: &ModelConfig) -> Vec<String> {
    let cols = config.covariate_columns();
    let mut names = vec![format!("{LATENT_BLOCK}.intercept")];
    names.extend(cols.iter().map(|c| format!("{LATENT_BLOCK}.{c}")));
    for f in &config.continuous_features {
        names.push(format!("{}.intercept", f.name));
        names.push(format!("{}.class", f.name));
        names.push(format!("{}.sigma", f.name));
        names.push(format!("{}.miss.intercept", f.name));
        names.extend(cols.iter().map(|c| format!("{}.miss.{c}", f.name)));
        names.push(format!("{}.miss.class", f.name));
    }
    for f in &config.binary_features {
        names.push(format!("{}.intercept", f.name));
        names.push(format!("{}.class", f.name));
    }
    names
}

/// Lays out parameters assuming the structural checks already passed.
pub(crate) fn build_layout_unchecked(config: &ModelConfig) -> Result<ParameterLayout, LayoutError> {
    let cols = config.covariate_columns();
    let all_names = parameter_names(config).into_iter().enumerate().map(|(i, n)| (n, i)).collect();
    let mut b = Builder { slots: Vec::new(), index: HashMap::new(), all_names };

    b.push(format!("{LATENT_BLOCK}.intercept"), &config.latent_prior.intercept)?;
    b.push_list(LATENT_BLOCK, &cols, &config.latent_prior.covariates)?;

    let mut continuous = Vec::with_capacity(config.continuous_features.len());
    for f in &config.continuous_features {
        let intercept = b.push(format!("{}.intercept", f.name), &f.outcome_prior.intercept)?;
        let class_effect = b.push(format!("{}.class", f.name), &f.outcome_prior.class_effect)?;
        let sigma = b.push(format!("{}.sigma", f.name), &f.scale_prior)?;
        let mp = &f.missingness_prior;
        let miss_start = b.push(format!("{}.miss.intercept", f.name), &mp.intercept)?;
        b.push_list(&format!("{}.miss", f.name), &cols, &mp.covariates)?;
        b.push(format!("{}.miss.class", f.name), &mp.class_effect)?;
        continuous.push(ContinuousBlock { intercept, class_effect, sigma, miss_start });
    }

    let mut binary = Vec::with_capacity(config.binary_features.len());
    for f in &config.binary_features {
        let intercept = b.push(format!("{}.intercept", f.name), &f.prior.intercept)?;
        let class_effect = b.push(format!("{}.class", f.name), &f.prior.class_effect)?;
        binary.push(BinaryBlock { intercept, class_effect });
    }

    let names = b.slots.iter().map(|s| s.name.clone()).collect();
    Ok(ParameterLayout { slots: b.slots, names, covariate_columns: cols, continuous, binary })
}

/// Range of values each slot can take, propagated through linked bounds.
pub fn feasible_ranges(layout: &ParameterLayout) -> Vec<(f64, f64)> {
    let mut ranges: Vec<(f64, f64)> = Vec::with_capacity(layout.dim());
    for slot in layout.slots() {
        let r = match &slot.constraint {
            Constraint::Unbounded => (f64::NEG_INFINITY, f64::INFINITY),
            Constraint::Lower(l) => (l.range(&ranges).0, f64::INFINITY),
            Constraint::Upper(u) => (f64::NEG_INFINITY, u.range(&ranges).1),
            Constraint::Interval(l, u) => (l.range(&ranges).0, u.range(&ranges).1),
        };
        ranges.push(r);
    }
    ranges
}

/// Slots whose bound pair can be empty (or NaN) somewhere in the feasible region.
pub fn infeasible_bounds(layout: &ParameterLayout) -> Vec<(usize, String)> {
    let ranges = feasible_ranges(layout);
    let mut out = Vec::new();
    for (i, slot) in layout.slots().iter().enumerate() {
        if let Constraint::Interval(l, u) = &slot.constraint {
            let (gap_min, _) = u.minus(l).range(&ranges);
            if gap_min.is_nan() || gap_min <= 0.0 {
                out.push((i, format!("lower bound {l:?} is not strictly below upper bound {u:?} for all feasible values")));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::*;

    fn n01() -> PriorSpec {
        PriorSpec::normal(0.0, 1.0)
    }

    fn shaped(numeric: usize, j: usize, k: usize) -> ModelConfig {
        let cont = |i: usize| ContinuousFeatureSpec {
            name: format!("y{i}"),
            transform: Transform::None,
            standardize: true,
            zero_as_missing: false,
            rate_denominator: None,
            outcome_prior: ClassEffectPrior { intercept: n01(), class_effect: n01() },
            scale_prior: PriorSpec::truncated(1.0, 0.1, Some(0.0.into()), None),
            missingness_prior: MissingnessPrior {
                intercept: n01(),
                covariates: PriorList::Shared(n01()),
                class_effect: n01(),
            },
        };
        ModelConfig {
            covariates: (0..numeric).map(|i| CovariateSpec::numeric(format!("x{i}"), true)).collect(),
            continuous_features: (0..j).map(cont).collect(),
            binary_features: (0..k)
                .map(|i| BinaryFeatureSpec {
                    name: format!("w{i}"),
                    prior: ClassEffectPrior { intercept: n01(), class_effect: n01() },
                    code_list: None,
                })
                .collect(),
            latent_prior: RegressionPrior { intercept: n01(), covariates: PriorList::Shared(n01()) },
            sampler_defaults: SamplerDefaults::default(),
        }
    }

    #[test]
    fn asthma_shape_has_139_slots() {
        let cfg = ModelConfig::asthma_default();
        let layout = build_layout(&cfg).unwrap();
        assert_eq!(layout.num_covariates(), 10);
        // 11 latent + 8 * (3 outcome/scale + 12 missingness) + 4 * 2
        assert_eq!(layout.dim(), 11 + 8 * 15 + 8);
        assert_eq!(layout.dim(), expected_dim(10, 8, 4));
    }

    #[test]
    fn minimal_model_has_three_slots() {
        let layout = build_layout(&shaped(0, 0, 1)).unwrap();
        assert_eq!(layout.dim(), 3);
        assert_eq!(layout.names(), ["latent.intercept", "w0.intercept", "w0.class"]);
    }

    #[test]
    fn class_effect_may_reference_its_intercept() {
        let mut cfg = shaped(1, 1, 0);
        cfg.continuous_features[0].outcome_prior.intercept = PriorSpec::normal(-0.68, 0.05);
        cfg.continuous_features[0].outcome_prior.class_effect = PriorSpec::truncated(
            AffineExpr::linked(0.7, "y0.intercept", -1.0),
            0.05,
            Some(0.0.into()),
            None,
        );
        let layout = build_layout(&cfg).unwrap();
        let i = layout.index_of("y0.class").unwrap();
        let b = layout.index_of("y0.intercept").unwrap();
        assert!(b < i);
        assert_eq!(layout.slots()[i].mean, LinkedExpr { constant: 0.7, terms: vec![(b, -1.0)] });
        assert_eq!(layout.slots()[i].constraint.kind(), ConstraintKind::Lower);
    }

    #[test]
    fn forward_reference_names_both_parameters() {
        let mut cfg = shaped(0, 1, 0);
        cfg.continuous_features[0].outcome_prior.intercept.mean = AffineExpr::linked(0.0, "y0.sigma", 1.0);
        let err = build_layout_unchecked(&cfg).unwrap_err();
        assert_eq!(
            err,
            LayoutError::ForwardReference { param: "y0.intercept".into(), referenced: "y0.sigma".into() }
        );
    }

    #[test]
    fn self_reference_is_a_forward_reference() {
        let mut cfg = shaped(0, 0, 1);
        cfg.binary_features[0].prior.intercept.mean = AffineExpr::linked(0.0, "w0.intercept", 1.0);
        assert!(matches!(build_layout_unchecked(&cfg), Err(LayoutError::ForwardReference { .. })));
    }

    #[test]
    fn layout_is_deterministic() {
        let cfg = ModelConfig::asthma_default();
        let a = build_layout(&cfg).unwrap();
        let b = build_layout(&cfg.clone()).unwrap();
        assert_eq!(a.names().join("\n").as_bytes(), b.names().join("\n").as_bytes());
        assert_eq!(a, b);
        assert_eq!(parameter_names(&cfg), a.names());
    }

    #[test]
    fn dimension_formula_holds_across_shapes() {
        for m in 0..4 {
            for j in 0..3 {
                for k in 0..3 {
                    if j + k == 0 {
                        continue;
                    }
                    let layout = build_layout(&shaped(m, j, k)).unwrap();
                    assert_eq!(layout.dim(), expected_dim(m, j, k));
                }
            }
        }
    }

    #[test]
    fn linked_bound_gap_uses_shared_terms() {
        let cfg = ModelConfig::asthma_default();
        let layout = build_layout(&cfg).unwrap();
        assert!(infeasible_bounds(&layout).is_empty());
        let ranges = feasible_ranges(&layout);
        let pst = layout.index_of("pst.intercept").unwrap();
        assert_eq!(ranges[pst], (-9.2, -4.5));
    }
}
