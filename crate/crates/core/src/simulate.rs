//! Synthetic cohorts drawn from the model's own generative process.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

use crate::cohort::{Cohort, CohortError, StandardizationStats};
use crate::config::{
    BinaryFeatureSpec, ClassEffectPrior, ContinuousFeatureSpec, CovariateKind, CovariateSpec, MissingnessPrior, ModelConfig,
    PriorList, PriorSpec, RegressionPrior, SamplerDefaults, Transform,
};
use crate::elicit::logit_range_prior;
use crate::ingest::{Cell, CodeList, IngestError, RawTable};
use crate::layout::{build_layout, LayoutError, ParameterLayout};
use crate::model::{unconstrain, ModelError};
use crate::special::expit;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub config: ModelConfig,
    /// True parameter values keyed by layout name.
    pub truth: BTreeMap<String, f64>,
    pub n: usize,
    /// Level probabilities for categorical covariates, in declared level order.
    #[serde(default)]
    pub categorical_probs: BTreeMap<String, Vec<f64>>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("true value missing for {0}")]
    MissingTruth(String),
    #[error("true value given for unknown parameter {0}")]
    UnknownTruth(String),
    #[error("infeasible true point: {0}")]
    Infeasible(ModelError),
    #[error("categorical covariate {name}: {message}")]
    Categorical { name: String, message: String },
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error("raw output cannot represent feature {0} (rate-derived)")]
    RawUnsupported(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// A simulated cohort together with its generating classes.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub cohort: Cohort,
    pub classes: Vec<u8>,
    /// True parameters in layout order.
    pub theta: Vec<f64>,
    pub layout: ParameterLayout,
    /// Raw categorical level index per record and categorical covariate.
    categorical_levels: Vec<Vec<usize>>,
}

impl SimulationSpec {
    /// True parameters in layout order.
    pub fn theta(&self, layout: &ParameterLayout) -> Result<Vec<f64>, SimulateError> {
        if let Some(extra) = self.truth.keys().find(|k| layout.index_of(k).is_none()) {
            return Err(SimulateError::UnknownTruth(extra.clone()));
        }
        layout
            .names()
            .iter()
            .map(|n| self.truth.get(n).copied().ok_or_else(|| SimulateError::MissingTruth(n.clone())))
            .collect()
    }
}

fn level_probs(spec: &SimulationSpec, cov: &CovariateSpec, levels: &[String]) -> Result<Vec<f64>, SimulateError> {
    let err = |message: String| SimulateError::Categorical { name: cov.name.clone(), message };
    let probs = match spec.categorical_probs.get(&cov.name) {
        Some(p) => p.clone(),
        None => vec![1.0 / levels.len() as f64; levels.len()],
    };
    if probs.len() != levels.len() {
        return Err(err(format!("{} probabilities for {} levels", probs.len(), levels.len())));
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(err("probabilities must be non-negative and sum to 1".into()));
    }
    Ok(probs)
}

/// Draws a cohort on the model scale. One generator stream, consumed
/// record by record in the order covariates, class, missingness and
/// outcomes, binary indicators.
pub fn simulate_cohort(spec: &SimulationSpec) -> Result<Simulation, SimulateError> {
    let config = &spec.config;
    let layout = build_layout(config)?;
    let theta = spec.theta(&layout)?;
    unconstrain(&layout, &theta).map_err(SimulateError::Infeasible)?;

    let mut cat_probs = Vec::new();
    for cov in &config.covariates {
        if let CovariateKind::Categorical { levels, .. } = &cov.kind {
            cat_probs.push(level_probs(spec, cov, levels)?);
        }
    }

    let n = spec.n;
    let m = layout.num_covariates();
    let (j, k) = (config.continuous_features.len(), config.binary_features.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = vec![0.0; n * m];
    let mut y = vec![f64::NAN; n * j];
    let mut r = vec![0u8; n * j];
    let mut w = vec![0u8; n * k];
    let mut classes = Vec::with_capacity(n);
    let mut categorical_levels = Vec::with_capacity(n);

    for i in 0..n {
        let xi = &mut x[i * m..(i + 1) * m];
        let mut col = 0;
        let mut cat = 0;
        let mut levels_i = Vec::with_capacity(cat_probs.len());
        for cov in &config.covariates {
            match &cov.kind {
                CovariateKind::Numeric => {
                    xi[col] = rng.sample(StandardNormal);
                    col += 1;
                }
                CovariateKind::Categorical { levels, reference } => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = levels.len() - 1;
                    for (l, p) in cat_probs[cat].iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = l;
                            break;
                        }
                    }
                    for (l, _) in levels.iter().enumerate().filter(|(_, l)| *l != reference) {
                        xi[col] = if l == pick { 1.0 } else { 0.0 };
                        col += 1;
                    }
                    levels_i.push(pick);
                    cat += 1;
                }
            }
        }
        categorical_levels.push(levels_i);
        let xi = &x[i * m..(i + 1) * m];

        let eta_d = theta[0] + (0..m).map(|c| theta[1 + c] * xi[c]).sum::<f64>();
        let d = u8::from(rng.random::<f64>() < expit(eta_d));
        classes.push(d);
        let df = f64::from(d);

        for (fj, block) in layout.continuous.iter().enumerate() {
            let eta_r = theta[block.miss_start]
                + (0..m).map(|c| theta[block.miss_start + 1 + c] * xi[c]).sum::<f64>()
                + theta[block.miss_class(m)] * df;
            if rng.random::<f64>() < expit(eta_r) {
                r[i * j + fj] = 1;
                let z: f64 = rng.sample(StandardNormal);
                y[i * j + fj] = theta[block.intercept] + theta[block.class_effect] * df + theta[block.sigma] * z;
            }
        }
        for (fk, block) in layout.binary.iter().enumerate() {
            let eta_w = theta[block.intercept] + theta[block.class_effect] * df;
            w[i * k + fk] = u8::from(rng.random::<f64>() < expit(eta_w));
        }
    }

    let feature_stats = config
        .continuous_features
        .iter()
        .map(|f| StandardizationStats { transform: f.transform, ..StandardizationStats::identity() })
        .collect();
    let cohort = Cohort::new(
        (1..=n).map(|i| i.to_string()).collect(),
        config.covariate_columns(),
        config.continuous_features.iter().map(|f| f.name.clone()).collect(),
        config.binary_features.iter().map(|f| f.name.clone()).collect(),
        x,
        y,
        r,
        w,
        feature_stats,
        vec![None; m],
    )?;
    Ok(Simulation { cohort, classes, theta, layout, categorical_levels })
}

impl Simulation {
    /// A delimited table that the ingest path loads back into this cohort:
    /// categorical covariates as level labels, log features exponentiated,
    /// code-list indicators as a single listed code.
    pub fn raw_table(&self, config: &ModelConfig) -> Result<RawTable, SimulateError> {
        let c = &self.cohort;
        let mut columns = vec!["id".to_string()];
        columns.extend(config.covariates.iter().map(|cv| cv.name.clone()));
        columns.extend(config.continuous_features.iter().map(|f| f.name.clone()));
        columns.extend(config.binary_features.iter().map(|f| f.name.clone()));
        if let Some(f) = config.continuous_features.iter().find(|f| f.rate_denominator.is_some()) {
            return Err(SimulateError::RawUnsupported(f.name.clone()));
        }
        let mut codes = Vec::with_capacity(config.binary_features.len());
        for f in &config.binary_features {
            codes.push(match &f.code_list {
                Some(r) => Some(CodeList::resolve(r)?.iter().next().unwrap_or_default().to_string()),
                None => None,
            });
        }
        let (m, j, k) = (c.num_covariates(), c.num_continuous(), c.num_binary());
        let mut rows = Vec::with_capacity(c.len());
        for i in 0..c.len() {
            let mut row = vec![Cell::Text(c.ids[i].clone())];
            let mut col = 0;
            let mut cat = 0;
            for cov in &config.covariates {
                match &cov.kind {
                    CovariateKind::Numeric => {
                        row.push(Cell::Number(c.x[i * m + col]));
                        col += 1;
                    }
                    CovariateKind::Categorical { levels, .. } => {
                        row.push(Cell::Text(levels[self.categorical_levels[i][cat]].clone()));
                        col += levels.len() - 1;
                        cat += 1;
                    }
                }
            }
            for fj in 0..j {
                row.push(if c.r[i * j + fj] == 1 {
                    Cell::Number(c.feature_stats[fj].invert(c.y[i * j + fj]))
                } else {
                    Cell::Missing
                });
            }
            for fk in 0..k {
                let v = c.w[i * k + fk];
                row.push(match &codes[fk] {
                    Some(code) if v == 1 => Cell::Text(code.clone()),
                    Some(_) => Cell::Missing,
                    None => Cell::Number(f64::from(v)),
                });
            }
            rows.push(row);
        }
        Ok(RawTable::new(columns, rows)?)
    }

    pub fn truth_json(&self, seed: u64) -> serde_json::Value {
        let params: serde_json::Map<String, serde_json::Value> =
            self.layout.names().iter().zip(&self.theta).map(|(n, v)| (n.clone(), (*v).into())).collect();
        serde_json::json!({
            "seed": seed,
            "n": self.cohort.len(),
            "parameters": params,
            "classes": self.classes,
        })
    }

    pub fn write_truth<W: Write>(&self, seed: u64, writer: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(writer, &self.truth_json(seed))
    }
}

const DESK_COVARIATES: [&str; 2] = ["age", "bmi"];
const DESK_CONTINUOUS: [&str; 3] = ["eos", "feno", "ige"];
const DESK_BINARY: [&str; 2] = ["allergy", "atopy"];

/// Fit configuration for the desk-asthma preset. Every class effect is
/// anchored: continuous effects are truncated at zero and binary features
/// carry sensitivity/specificity range priors, so class 1 is the
/// high-biomarker class.
pub fn desk_asthma_config() -> ModelConfig {
    let weak = || PriorSpec::normal(0.0, 2.0);
    let scale = || PriorSpec::truncated(1.0, 1.0, Some(0.0.into()), None);
    let continuous = DESK_CONTINUOUS
        .iter()
        .map(|name| ContinuousFeatureSpec {
            name: name.to_string(),
            transform: Transform::None,
            standardize: false,
            zero_as_missing: false,
            rate_denominator: None,
            outcome_prior: ClassEffectPrior {
                intercept: weak(),
                class_effect: PriorSpec::truncated(1.0, 0.5, Some(0.0.into()), None),
            },
            scale_prior: scale(),
            missingness_prior: MissingnessPrior {
                intercept: weak(),
                covariates: PriorList::Shared(weak()),
                class_effect: weak(),
            },
        })
        .collect();
    let binary = DESK_BINARY
        .iter()
        .zip([((0.4, 0.8), (0.6, 0.9)), ((0.5, 0.9), (0.5, 0.8))])
        .map(|(name, (sens, spec))| {
            let (intercept, class_effect) =
                logit_range_prior(sens, spec, 1.0, &format!("{name}.intercept")).expect("valid preset ranges");
            BinaryFeatureSpec { name: name.to_string(), prior: ClassEffectPrior { intercept, class_effect }, code_list: None }
        })
        .collect();
    ModelConfig {
        covariates: DESK_COVARIATES.iter().map(|c| CovariateSpec::numeric(*c, false)).collect(),
        continuous_features: continuous,
        binary_features: binary,
        latent_prior: RegressionPrior { intercept: weak(), covariates: PriorList::Shared(weak()) },
        sampler_defaults: SamplerDefaults::default(),
    }
}

/// Generating parameters for the desk-asthma preset.
pub fn desk_asthma_truth() -> BTreeMap<String, f64> {
    let mut t = BTreeMap::new();
    let mut set = |k: String, v: f64| {
        t.insert(k, v);
    };
    set("latent.intercept".into(), -0.5);
    set("latent.age".into(), 0.3);
    set("latent.bmi".into(), -0.3);
    for (name, miss_intercept) in DESK_CONTINUOUS.iter().zip([1.0, 1.0, -1.0]) {
        set(format!("{name}.intercept"), 0.0);
        set(format!("{name}.class"), 1.0);
        set(format!("{name}.sigma"), 1.0);
        set(format!("{name}.miss.intercept"), miss_intercept);
        set(format!("{name}.miss.age"), 0.2);
        set(format!("{name}.miss.bmi"), -0.2);
        set(format!("{name}.miss.class"), 1.5);
    }
    for (name, intercept) in DESK_BINARY.iter().zip([-1.0, -0.5]) {
        set(format!("{name}.intercept"), intercept);
        set(format!("{name}.class"), 1.5);
    }
    t
}

pub fn desk_asthma(n: usize, seed: u64) -> SimulationSpec {
    SimulationSpec {
        config: desk_asthma_config(),
        truth: desk_asthma_truth(),
        n,
        categorical_probs: BTreeMap::new(),
        seed,
    }
}
