//! Encoded cohort matrices consumed by the model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Transform;

/// Transform and moments used to bring a column onto the model scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub transform: Transform,
    pub mean: f64,
    pub sd: f64,
}

impl StandardizationStats {
    pub fn identity() -> Self {
        StandardizationStats { transform: Transform::None, mean: 0.0, sd: 1.0 }
    }

    /// Raw value to model scale; `None` when the transform is undefined there.
    pub fn apply(&self, raw: f64) -> Option<f64> {
        let v = match self.transform {
            Transform::Log if raw > 0.0 => raw.ln(),
            Transform::Log => return None,
            Transform::None => raw,
        };
        Some((v - self.mean) / self.sd)
    }

    /// Model scale back to raw.
    pub fn invert(&self, z: f64) -> f64 {
        let v = z * self.sd + self.mean;
        match self.transform {
            Transform::Log => v.exp(),
            Transform::None => v,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CohortError {
    #[error("{matrix} has {got} entries, expected {expected}")]
    Shape { matrix: &'static str, got: usize, expected: usize },
    #[error("X[{row}, {col}] is not finite")]
    NonFiniteCovariate { row: usize, col: usize },
    #[error("Y[{row}, {col}] is observed but not finite")]
    NonFiniteOutcome { row: usize, col: usize },
    #[error("{matrix}[{row}, {col}] must be 0 or 1")]
    NotBinary { matrix: &'static str, row: usize, col: usize },
}

/// One record's view into the cohort matrices.
#[derive(Clone, Copy, Debug)]
pub struct Record<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub r: &'a [u8],
    pub w: &'a [u8],
}

/// Row-major design and outcome matrices for `n` records.
///
/// `y` holds NaN wherever `r` is 0; those cells never enter the likelihood.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub ids: Vec<String>,
    pub covariate_columns: Vec<String>,
    pub continuous_names: Vec<String>,
    pub binary_names: Vec<String>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub r: Vec<u8>,
    pub w: Vec<u8>,
    pub feature_stats: Vec<StandardizationStats>,
    /// Per encoded covariate column; `None` for columns left unscaled.
    pub covariate_stats: Vec<Option<StandardizationStats>>,
}

impl Cohort {
    /// Builds a cohort and checks every matrix invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ids: Vec<String>,
        covariate_columns: Vec<String>,
        continuous_names: Vec<String>,
        binary_names: Vec<String>,
        x: Vec<f64>,
        mut y: Vec<f64>,
        r: Vec<u8>,
        w: Vec<u8>,
        feature_stats: Vec<StandardizationStats>,
        covariate_stats: Vec<Option<StandardizationStats>>,
    ) -> Result<Self, CohortError> {
        let n = ids.len();
        let (m, j, k) = (covariate_columns.len(), continuous_names.len(), binary_names.len());
        let shape = |matrix, got, expected| {
            if got == expected {
                Ok(())
            } else {
                Err(CohortError::Shape { matrix, got, expected })
            }
        };
        shape("X", x.len(), n * m)?;
        shape("Y", y.len(), n * j)?;
        shape("R", r.len(), n * j)?;
        shape("W", w.len(), n * k)?;
        shape("feature_stats", feature_stats.len(), j)?;
        shape("covariate_stats", covariate_stats.len(), m)?;
        for (idx, v) in x.iter().enumerate() {
            if !v.is_finite() {
                return Err(CohortError::NonFiniteCovariate { row: idx / m, col: idx % m });
            }
        }
        for idx in 0..n * j {
            match r[idx] {
                1 if !y[idx].is_finite() => {
                    return Err(CohortError::NonFiniteOutcome { row: idx / j, col: idx % j })
                }
                1 => {}
                0 => y[idx] = f64::NAN,
                _ => return Err(CohortError::NotBinary { matrix: "R", row: idx / j, col: idx % j }),
            }
        }
        if let Some(idx) = w.iter().position(|&v| v > 1) {
            return Err(CohortError::NotBinary { matrix: "W", row: idx / k, col: idx % k });
        }
        Ok(Cohort {
            ids,
            covariate_columns,
            continuous_names,
            binary_names,
            x,
            y,
            r,
            w,
            feature_stats,
            covariate_stats,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_covariates(&self) -> usize {
        self.covariate_columns.len()
    }

    pub fn num_continuous(&self) -> usize {
        self.continuous_names.len()
    }

    pub fn num_binary(&self) -> usize {
        self.binary_names.len()
    }

    pub fn record(&self, i: usize) -> Record<'_> {
        let (m, j, k) = (self.num_covariates(), self.num_continuous(), self.num_binary());
        Record {
            x: &self.x[i * m..(i + 1) * m],
            y: &self.y[i * j..(i + 1) * j],
            r: &self.r[i * j..(i + 1) * j],
            w: &self.w[i * k..(i + 1) * k],
        }
    }

    /// Binary features that take a single value across the cohort.
    pub fn constant_binary_features(&self) -> Vec<String> {
        let (n, k) = (self.len(), self.num_binary());
        (0..k)
            .filter(|&c| n > 0 && (0..n).all(|i| self.w[i * k + c] == self.w[c]))
            .map(|c| self.binary_names[c].clone())
            .collect()
    }
}
