//! Declarative model configuration and its validation.
//!
//! A [`ModelConfig`] names the covariates that drive latent class membership,
//! the continuous features (each with its own missingness model) and the
//! binary features, together with a prior for every coefficient. Priors may
//! be linked: a mean or a bound can be an affine function of parameters that
//! come earlier in the layout order.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;

use crate::layout::{self, ParameterLayout};

/// `constant + Σ coef · parameter`, where every parameter precedes the slot
/// that uses the expression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "AffineRepr", into = "AffineRepr")]
pub struct AffineExpr {
    pub constant: f64,
    pub terms: Vec<AffineTerm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTerm {
    pub param: String,
    pub coef: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AffineRepr {
    Constant(f64),
    Linked {
        #[serde(default)]
        constant: f64,
        terms: Vec<AffineTerm>,
    },
}

impl From<AffineRepr> for AffineExpr {
    fn from(r: AffineRepr) -> Self {
        match r {
            AffineRepr::Constant(constant) => AffineExpr { constant, terms: Vec::new() },
            AffineRepr::Linked { constant, terms } => AffineExpr { constant, terms },
        }
    }
}

impl From<AffineExpr> for AffineRepr {
    fn from(e: AffineExpr) -> Self {
        if e.terms.is_empty() {
            AffineRepr::Constant(e.constant)
        } else {
            AffineRepr::Linked { constant: e.constant, terms: e.terms }
        }
    }
}

impl AffineExpr {
    pub fn constant(c: f64) -> Self {
        AffineExpr { constant: c, terms: Vec::new() }
    }

    /// `constant + coef · param`.
    pub fn linked(constant: f64, param: impl Into<String>, coef: f64) -> Self {
        AffineExpr { constant, terms: vec![AffineTerm { param: param.into(), coef }] }
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|t| t.coef == 0.0)
    }
}

impl From<f64> for AffineExpr {
    fn from(c: f64) -> Self {
        AffineExpr::constant(c)
    }
}

impl fmt::Display for AffineExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.constant)?;
        for t in &self.terms {
            if t.coef < 0.0 {
                write!(f, " - {}·{}", -t.coef, t.param)?;
            } else {
                write!(f, " + {}·{}", t.coef, t.param)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorFamily {
    Normal,
    TruncatedNormal,
}

/// Normal or truncated-normal prior. A missing bound is infinite.
///
/// Truncation is enforced through the sampling transform; the density kernel
/// is the plain normal one (the truncation constant is not included).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub family: PriorFamily,
    pub mean: AffineExpr,
    pub sd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<AffineExpr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<AffineExpr>,
}

impl PriorSpec {
    pub fn normal(mean: impl Into<AffineExpr>, sd: f64) -> Self {
        PriorSpec { family: PriorFamily::Normal, mean: mean.into(), sd, lower: None, upper: None }
    }

    pub fn truncated(
        mean: impl Into<AffineExpr>,
        sd: f64,
        lower: Option<AffineExpr>,
        upper: Option<AffineExpr>,
    ) -> Self {
        PriorSpec { family: PriorFamily::TruncatedNormal, mean: mean.into(), sd, lower, upper }
    }

    /// Iterates over every affine expression the prior carries.
    pub fn exprs(&self) -> impl Iterator<Item = &AffineExpr> {
        std::iter::once(&self.mean).chain(self.lower.iter()).chain(self.upper.iter())
    }
}

/// One prior shared by every encoded covariate column, or one per column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorList {
    Shared(PriorSpec),
    PerColumn(Vec<PriorSpec>),
}

impl PriorList {
    pub fn get(&self, column: usize) -> Option<&PriorSpec> {
        match self {
            PriorList::Shared(p) => Some(p),
            PriorList::PerColumn(v) => v.get(column),
        }
    }
}

/// Prior for a logistic regression on `(1, X)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionPrior {
    pub intercept: PriorSpec,
    pub covariates: PriorList,
}

/// Prior pair for a `(1, d)` linear predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEffectPrior {
    pub intercept: PriorSpec,
    pub class_effect: PriorSpec,
}

/// Prior block for the missingness model on `(1, X, d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingnessPrior {
    pub intercept: PriorSpec,
    pub covariates: PriorList,
    pub class_effect: PriorSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Numeric,
    Categorical { levels: Vec<String>, reference: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
    #[serde(default)]
    pub standardize: bool,
}

impl CovariateSpec {
    pub fn numeric(name: impl Into<String>, standardize: bool) -> Self {
        CovariateSpec { name: name.into(), kind: CovariateKind::Numeric, standardize }
    }

    pub fn categorical(name: impl Into<String>, levels: &[&str], reference: &str) -> Self {
        CovariateSpec {
            name: name.into(),
            kind: CovariateKind::Categorical {
                levels: levels.iter().map(|s| s.to_string()).collect(),
                reference: reference.to_string(),
            },
            standardize: false,
        }
    }

    /// Names of the encoded design columns this covariate contributes.
    /// Categorical covariates omit the reference level and keep declared order.
    pub fn encoded_columns(&self) -> Vec<String> {
        match &self.kind {
            CovariateKind::Numeric => vec![self.name.clone()],
            CovariateKind::Categorical { levels, reference } => levels
                .iter()
                .filter(|l| *l != reference)
                .map(|l| format!("{}[{}]", self.name, l))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Log,
    #[default]
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousFeatureSpec {
    pub name: String,
    #[serde(default)]
    pub transform: Transform,
    /// z-score the (transformed) observed values; off only for data already
    /// on the model scale.
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default)]
    pub zero_as_missing: bool,
    /// Column holding follow-up years; when set, the feature column holds an
    /// event count and the modelled value is the annual rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_denominator: Option<String>,
    pub outcome_prior: ClassEffectPrior,
    pub scale_prior: PriorSpec,
    pub missingness_prior: MissingnessPrior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryFeatureSpec {
    pub name: String,
    pub prior: ClassEffectPrior,
    /// When set, the feature column holds `;`-separated codes and the value is
    /// the composite indicator over this list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_list: Option<CodeListRef>,
}

/// A named built-in code list or an explicit one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CodeListRef {
    Named(String),
    Explicit(Vec<String>),
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerDefaults {
    pub chains: usize,
    pub warmup: usize,
    pub keep: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SamplerDefaults {
    fn default() -> Self {
        SamplerDefaults { chains: 4, warmup: 200, keep: 1000, seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    #[serde(default)]
    pub continuous_features: Vec<ContinuousFeatureSpec>,
    #[serde(default)]
    pub binary_features: Vec<BinaryFeatureSpec>,
    pub latent_prior: RegressionPrior,
    #[serde(default)]
    pub sampler_defaults: SamplerDefaults,
}

/// Shipped default configuration for the asthma application.
pub const ASTHMA_DEFAULT_JSON: &str = include_str!("../../../configs/asthma-default.json");

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn asthma_default() -> Self {
        Self::from_json(ASTHMA_DEFAULT_JSON).expect("shipped config parses")
    }

    /// Encoded covariate column names, in design-matrix order.
    pub fn covariate_columns(&self) -> Vec<String> {
        self.covariates.iter().flat_map(|c| c.encoded_columns()).collect()
    }

    /// Stable hash of the canonical JSON encoding.
    pub fn hash_hex(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        sha256_hex(canonical.as_bytes())
    }
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation { path: path.into(), message: message.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

pub const RESIDUAL_SCALE_MSG: &str = "residual-scale support must be positive";

fn check_prior(report: &mut ValidationReport, path: &str, prior: &PriorSpec) {
    if !(prior.sd > 0.0 && prior.sd.is_finite()) {
        report.push(format!("{path}.sd"), format!("prior sd must be positive and finite, got {}", prior.sd));
    }
    for e in prior.exprs() {
        if !e.constant.is_finite() || e.terms.iter().any(|t| !t.coef.is_finite()) {
            report.push(path, "prior expressions must be finite");
        }
    }
    match prior.family {
        PriorFamily::Normal => {
            if prior.lower.is_some() || prior.upper.is_some() {
                report.push(path, "normal prior cannot carry bounds; use truncated_normal");
            }
        }
        PriorFamily::TruncatedNormal => {
            if prior.lower.is_none() && prior.upper.is_none() {
                report.push(path, "truncated_normal prior needs at least one bound");
            }
        }
    }
}

fn check_prior_list(report: &mut ValidationReport, path: &str, list: &PriorList, columns: usize) {
    match list {
        PriorList::Shared(p) => check_prior(report, path, p),
        PriorList::PerColumn(v) => {
            if v.len() != columns {
                report.push(
                    path,
                    format!("expected {columns} covariate priors (one per encoded column), got {}", v.len()),
                );
            }
            for (i, p) in v.iter().enumerate() {
                check_prior(report, &format!("{path}[{i}]"), p);
            }
        }
    }
}

fn check_name(report: &mut ValidationReport, seen: &mut HashSet<String>, path: &str, name: &str) {
    if name.trim().is_empty() {
        report.push(path, "name must be non-empty");
    } else if !seen.insert(name.to_string()) {
        report.push(path, format!("duplicate name \"{name}\""));
    }
}

/// Checks every configuration invariant and lists the violations found.
/// An empty report means the configuration can be laid out and sampled.
pub fn validate_config(config: &ModelConfig) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut covariate_names = HashSet::new();
    for (i, c) in config.covariates.iter().enumerate() {
        let path = format!("covariates[{i}]");
        check_name(&mut report, &mut covariate_names, &format!("{path}.name"), &c.name);
        if let CovariateKind::Categorical { levels, reference } = &c.kind {
            let mut seen = HashSet::new();
            for l in levels {
                if !seen.insert(l) {
                    report.push(format!("{path}.levels"), format!("duplicate level \"{l}\""));
                }
            }
            if !levels.contains(reference) {
                report.push(format!("{path}.reference"), format!("reference level \"{reference}\" is not declared"));
            }
            if levels.len() < 2 {
                report.push(format!("{path}.levels"), "categorical covariate needs at least two levels");
            }
            if c.standardize {
                report.push(format!("{path}.standardize"), "only numeric covariates can be standardized");
            }
        }
    }
    let m = config.covariate_columns().len();

    let mut feature_names = HashSet::new();
    feature_names.insert(layout::LATENT_BLOCK.to_string());
    for (j, f) in config.continuous_features.iter().enumerate() {
        let path = format!("continuous_features[{j}]");
        check_name(&mut report, &mut feature_names, &format!("{path}.name"), &f.name);
        check_prior(&mut report, &format!("{path}.outcome_prior.intercept"), &f.outcome_prior.intercept);
        check_prior(&mut report, &format!("{path}.outcome_prior.class_effect"), &f.outcome_prior.class_effect);
        check_prior(&mut report, &format!("{path}.scale_prior"), &f.scale_prior);
        let positive_support = match &f.scale_prior.lower {
            Some(lo) => lo.is_constant() && lo.constant >= 0.0,
            None => false,
        };
        if !positive_support {
            report.push(format!("{path}.scale_prior"), RESIDUAL_SCALE_MSG);
        }
        let mp = &f.missingness_prior;
        check_prior(&mut report, &format!("{path}.missingness_prior.intercept"), &mp.intercept);
        check_prior_list(&mut report, &format!("{path}.missingness_prior.covariates"), &mp.covariates, m);
        check_prior(&mut report, &format!("{path}.missingness_prior.class_effect"), &mp.class_effect);
    }
    for (k, f) in config.binary_features.iter().enumerate() {
        let path = format!("binary_features[{k}]");
        check_name(&mut report, &mut feature_names, &format!("{path}.name"), &f.name);
        check_prior(&mut report, &format!("{path}.prior.intercept"), &f.prior.intercept);
        check_prior(&mut report, &format!("{path}.prior.class_effect"), &f.prior.class_effect);
    }
    if config.continuous_features.is_empty() && config.binary_features.is_empty() {
        report.push("features", "at least one continuous or binary feature is required");
    }

    check_prior(&mut report, "latent_prior.intercept", &config.latent_prior.intercept);
    check_prior_list(&mut report, "latent_prior.covariates", &config.latent_prior.covariates, m);

    let sd = &config.sampler_defaults;
    if sd.chains == 0 {
        report.push("sampler_defaults.chains", "at least one chain is required");
    }
    if sd.keep == 0 {
        report.push("sampler_defaults.keep", "at least one kept iteration is required");
    }

    // Reference ordering and bound feasibility need a structurally sound
    // config; skip them when the basics already failed.
    if report.is_empty() {
        match layout::build_layout_unchecked(config) {
            Ok(l) => check_bounds(&mut report, &l),
            Err(e) => report.push(e.path(), e.to_string()),
        }
    }
    report
}

fn check_bounds(report: &mut ValidationReport, layout: &ParameterLayout) {
    for (slot, why) in layout::infeasible_bounds(layout) {
        report.push(format!("parameter {}", layout.names()[slot]), why);
    }
}
