//! Prior elicitation from sensitivity and specificity targets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::StandardizationStats;
use crate::config::{AffineExpr, ClassEffectPrior, PriorSpec, Transform};
use crate::special::{inv_normal_cdf, logit};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before `logit`.
pub const PROB_CLAMP: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum ElicitError {
    #[error("{name} must lie strictly inside (0, 1), got {value}")]
    OutOfUnitInterval { name: &'static str, value: f64 },
    #[error("sensitivity {sens} + specificity {spec} must exceed 1")]
    NotBetterThanChance { sens: f64, spec: f64 },
    #[error("{name} range ({lo}, {hi}) is degenerate or outside [0, 1]")]
    DegenerateRange { name: &'static str, lo: f64, hi: f64 },
    #[error("threshold {0} must be positive under a log transform")]
    NonPositiveThreshold(f64),
    #[error("prior sd must be positive and finite, got {0}")]
    BadSd(f64),
}

fn open_unit(name: &'static str, value: f64) -> Result<f64, ElicitError> {
    if value > 0.0 && value < 1.0 {
        Ok(value)
    } else {
        Err(ElicitError::OutOfUnitInterval { name, value })
    }
}

fn positive_sd(sd: f64) -> Result<f64, ElicitError> {
    if sd > 0.0 && sd.is_finite() {
        Ok(sd)
    } else {
        Err(ElicitError::BadSd(sd))
    }
}

/// 2×2 classification table as proportions of the tested subgroup.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub tp: f64,
    pub fp: f64,
    pub tn: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
}

impl ContingencyTable {
    pub fn sensitivity(&self) -> f64 {
        self.tp / (self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        self.tn / (self.tn + self.fp)
    }

    pub fn prevalence(&self) -> f64 {
        self.tp + self.fn_
    }

    pub fn ppv(&self) -> f64 {
        self.tp / (self.tp + self.fp)
    }

    pub fn npv(&self) -> f64 {
        self.tn / (self.tn + self.fn_)
    }
}

/// Completes the table from the test-positive fraction and predictive values.
pub fn contingency_from_margins(p_pos: f64, ppv: f64, npv: f64) -> Result<ContingencyTable, ElicitError> {
    let p = open_unit("p_pos", p_pos)?;
    let ppv = open_unit("ppv", ppv)?;
    let npv = open_unit("npv", npv)?;
    Ok(ContingencyTable { tp: ppv * p, fp: (1.0 - ppv) * p, tn: npv * (1.0 - p), fn_: (1.0 - npv) * (1.0 - p) })
}

/// Clinical threshold `c` on the model scale of a feature.
pub fn standardized_threshold(c: f64, stats: &StandardizationStats) -> Result<f64, ElicitError> {
    let v = match stats.transform {
        Transform::Log if c > 0.0 => c.ln(),
        Transform::Log => return Err(ElicitError::NonPositiveThreshold(c)),
        Transform::None => c,
    };
    Ok((v - stats.mean) / stats.sd)
}

/// Priors for a continuous feature's class means from a threshold `z_c`
/// with the given sensitivity and specificity, assuming unit residual sd.
///
/// `intercept_param` is the layout name of the intercept, which the class
/// effect's prior mean is linked to.
pub fn threshold_normal_prior(
    z_c: f64,
    sens: f64,
    spec: f64,
    prior_sd: f64,
    intercept_param: &str,
) -> Result<(PriorSpec, PriorSpec), ElicitError> {
    let sens = open_unit("sensitivity", sens)?;
    let spec = open_unit("specificity", spec)?;
    let sd = positive_sd(prior_sd)?;
    if sens + spec <= 1.0 {
        return Err(ElicitError::NotBetterThanChance { sens, spec });
    }
    let b0 = z_c - inv_normal_cdf(spec);
    let total = z_c - inv_normal_cdf(1.0 - sens);
    Ok((
        PriorSpec::normal(b0, sd),
        PriorSpec::truncated(AffineExpr::linked(total, intercept_param, -1.0), sd, Some(0.0.into()), None),
    ))
}

fn clamped_logit(p: f64) -> f64 {
    logit(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
}

fn check_range(name: &'static str, (lo, hi): (f64, f64)) -> Result<(), ElicitError> {
    if (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo < hi {
        Ok(())
    } else {
        Err(ElicitError::DegenerateRange { name, lo, hi })
    }
}

/// Range-restricted priors for a binary indicator: the implied specificity
/// `1 - expit(b0)` and sensitivity `expit(b0 + b1)` stay inside the ranges.
pub fn logit_range_prior(
    sens_range: (f64, f64),
    spec_range: (f64, f64),
    prior_sd: f64,
    intercept_param: &str,
) -> Result<(PriorSpec, PriorSpec), ElicitError> {
    check_range("sensitivity", sens_range)?;
    check_range("specificity", spec_range)?;
    let sd = positive_sd(prior_sd)?;
    let (b0_lo, b0_hi) = (clamped_logit(1.0 - spec_range.1), clamped_logit(1.0 - spec_range.0));
    let (s_lo, s_hi) = (clamped_logit(sens_range.0), clamped_logit(sens_range.1));
    if !(b0_lo < b0_hi && s_lo < s_hi) {
        return Err(ElicitError::DegenerateRange { name: "clamped", lo: b0_lo, hi: b0_hi });
    }
    let linked = |c: f64| AffineExpr::linked(c, intercept_param, -1.0);
    Ok((
        PriorSpec::truncated(0.5 * (b0_lo + b0_hi), sd, Some(b0_lo.into()), Some(b0_hi.into())),
        PriorSpec::truncated(linked(0.5 * (s_lo + s_hi)), sd, Some(linked(s_lo)), Some(linked(s_hi))),
    ))
}

/// Request accepted by the `elicit` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum ElicitRequest {
    Contingency {
        p_pos: f64,
        ppv: f64,
        npv: f64,
    },
    Threshold {
        feature: String,
        /// Threshold already on the model scale.
        #[serde(default)]
        z_c: Option<f64>,
        /// Raw threshold, standardized with `stats`.
        #[serde(default)]
        threshold: Option<f64>,
        #[serde(default)]
        stats: Option<StandardizationStats>,
        sens: f64,
        spec: f64,
        prior_sd: f64,
    },
    LogitRange {
        feature: String,
        sens: (f64, f64),
        spec: (f64, f64),
        prior_sd: f64,
    },
}

#[derive(Debug, Error)]
pub enum RequestError {
    #[error(transparent)]
    Elicit(#[from] ElicitError),
    #[error("threshold request needs either z_c or both threshold and stats")]
    MissingThreshold,
}

#[derive(Serialize)]
struct ContingencyReport {
    #[serde(flatten)]
    table: ContingencyTable,
    sensitivity: f64,
    specificity: f64,
    prevalence: f64,
}

/// Evaluates a request; prior results are a `ClassEffectPrior` fragment.
pub fn handle_request(req: &ElicitRequest) -> Result<serde_json::Value, RequestError> {
    let prior_pair = |(intercept, class_effect)| {
        serde_json::to_value(ClassEffectPrior { intercept, class_effect }).expect("priors serialize")
    };
    Ok(match req {
        ElicitRequest::Contingency { p_pos, ppv, npv } => {
            let table = contingency_from_margins(*p_pos, *ppv, *npv)?;
            serde_json::to_value(ContingencyReport {
                table,
                sensitivity: table.sensitivity(),
                specificity: table.specificity(),
                prevalence: table.prevalence(),
            })
            .expect("table serializes")
        }
        ElicitRequest::Threshold { feature, z_c, threshold, stats, sens, spec, prior_sd } => {
            let z = match (z_c, threshold, stats) {
                (Some(z), _, _) => *z,
                (None, Some(c), Some(s)) => standardized_threshold(*c, s)?,
                _ => return Err(RequestError::MissingThreshold),
            };
            prior_pair(threshold_normal_prior(z, *sens, *spec, *prior_sd, &format!("{feature}.intercept"))?)
        }
        ElicitRequest::LogitRange { feature, sens, spec, prior_sd } => {
            prior_pair(logit_range_prior(*sens, *spec, *prior_sd, &format!("{feature}.intercept"))?)
        }
    })
}
