//! Marginalized log-posterior over the two latent classes.
//!
//! Sampling happens in unconstrained coordinates `u`. Each slot maps to its
//! constrained value through a bound transform whose bounds may be affine in
//! earlier slots; the gradient is chain-ruled back through those links.
//!
//! Truncated-normal priors use the unnormalized normal kernel inside the
//! transform's support. The truncation constant is omitted, which matters
//! when bounds depend on other parameters.

use rayon::prelude::*;
use thiserror::Error;

use crate::cohort::{Cohort, Record};
use crate::config::ModelConfig;
use crate::layout::{build_layout, Constraint, LayoutError, ParameterLayout};
use crate::special::{bernoulli_logit_lpmf, expit, log_expit, log_sum_exp2, normal_lpdf};

/// Records per reduction block. Fixed so sums do not depend on worker count.
pub const BLOCK_SIZE: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("cohort does not match config: {0}")]
    CohortMismatch(String),
    #[error("expected a point of dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{param} = {value} is outside its bounds ({lo}, {hi})")]
    OutOfBounds { param: String, value: f64, lo: f64, hi: f64 },
}

/// Complete-data log contributions of one record for each class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassLogLik {
    pub l0: f64,
    pub l1: f64,
}

impl ClassLogLik {
    pub fn marginal(&self) -> f64 {
        log_sum_exp2(self.l0, self.l1)
    }

    /// `P(D = 1 | record)`.
    pub fn responsibility(&self) -> f64 {
        expit(self.l1 - self.l0)
    }
}

/// Local derivatives of one slot's transform.
#[derive(Clone, Copy, Debug, Default)]
struct Jet {
    dtheta_du: f64,
    dlogj_du: f64,
    dtheta_dlo: f64,
    dtheta_dhi: f64,
    dlogj_dlo: f64,
    dlogj_dhi: f64,
}

fn check_finite(layout: &ParameterLayout, u: &[f64]) -> Result<(), ModelError> {
    if u.len() != layout.dim() {
        return Err(ModelError::Dimension { expected: layout.dim(), got: u.len() });
    }
    match u.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ModelError::NonFinite(format!("unconstrained coordinate {}", layout.names()[i]))),
        None => Ok(()),
    }
}

fn constrain_jets(layout: &ParameterLayout, u: &[f64]) -> Result<(Vec<f64>, f64, Vec<Jet>), ModelError> {
    check_finite(layout, u)?;
    let mut theta = Vec::with_capacity(u.len());
    let mut jets = Vec::with_capacity(u.len());
    let mut log_jac = 0.0;
    for (i, slot) in layout.slots().iter().enumerate() {
        let ui = u[i];
        let (value, lj, jet) = match &slot.constraint {
            Constraint::Unbounded => (ui, 0.0, Jet { dtheta_du: 1.0, ..Jet::default() }),
            Constraint::Lower(l) => {
                let e = ui.exp();
                (l.eval(&theta) + e, ui, Jet { dtheta_du: e, dlogj_du: 1.0, dtheta_dlo: 1.0, ..Jet::default() })
            }
            Constraint::Upper(h) => {
                let e = ui.exp();
                (h.eval(&theta) - e, ui, Jet { dtheta_du: -e, dlogj_du: 1.0, dtheta_dhi: 1.0, ..Jet::default() })
            }
            Constraint::Interval(l, h) => {
                let (lo, hi) = (l.eval(&theta), h.eval(&theta));
                let width = hi - lo;
                if !(width > 0.0) {
                    return Err(ModelError::NonFinite(format!("empty bounds ({lo}, {hi}) for {}", slot.name)));
                }
                let (s, s_c) = (expit(ui), expit(-ui));
                let value = if ui > 0.0 { hi - width * s_c } else { lo + width * s };
                let lj = width.ln() + log_expit(ui) + log_expit(-ui);
                let jet = Jet {
                    dtheta_du: width * s * s_c,
                    dlogj_du: s_c - s,
                    dtheta_dlo: s_c,
                    dtheta_dhi: s,
                    dlogj_dlo: -1.0 / width,
                    dlogj_dhi: 1.0 / width,
                };
                (value, lj, jet)
            }
        };
        if !value.is_finite() {
            return Err(ModelError::NonFinite(format!("constrained value of {}", slot.name)));
        }
        theta.push(value);
        jets.push(jet);
        log_jac += lj;
    }
    Ok((theta, log_jac, jets))
}

/// Maps an unconstrained point to model coordinates and the log-Jacobian.
pub fn constrain(layout: &ParameterLayout, u: &[f64]) -> Result<(Vec<f64>, f64), ModelError> {
    let (theta, lj, _) = constrain_jets(layout, u)?;
    Ok((theta, lj))
}

/// Inverse of [`constrain`]; fails when a value is not strictly inside its bounds.
pub fn unconstrain(layout: &ParameterLayout, theta: &[f64]) -> Result<Vec<f64>, ModelError> {
    if theta.len() != layout.dim() {
        return Err(ModelError::Dimension { expected: layout.dim(), got: theta.len() });
    }
    let mut u = Vec::with_capacity(theta.len());
    for (i, slot) in layout.slots().iter().enumerate() {
        let t = theta[i];
        let out = |lo: f64, hi: f64| ModelError::OutOfBounds { param: slot.name.clone(), value: t, lo, hi };
        let ui = match &slot.constraint {
            Constraint::Unbounded => t,
            Constraint::Lower(l) => {
                let lo = l.eval(theta);
                if !(t > lo) {
                    return Err(out(lo, f64::INFINITY));
                }
                (t - lo).ln()
            }
            Constraint::Upper(h) => {
                let hi = h.eval(theta);
                if !(t < hi) {
                    return Err(out(f64::NEG_INFINITY, hi));
                }
                (hi - t).ln()
            }
            Constraint::Interval(l, h) => {
                let (lo, hi) = (l.eval(theta), h.eval(theta));
                if !(t > lo && t < hi) {
                    return Err(out(lo, hi));
                }
                (t - lo).ln() - (hi - t).ln()
            }
        };
        if !ui.is_finite() {
            return Err(ModelError::NonFinite(format!("unconstrained value of {}", slot.name)));
        }
        u.push(ui);
    }
    Ok(u)
}

/// Bounds of each slot evaluated at `theta`.
pub fn bounds_at(layout: &ParameterLayout, theta: &[f64]) -> Vec<(f64, f64)> {
    layout
        .slots()
        .iter()
        .map(|s| match &s.constraint {
            Constraint::Unbounded => (f64::NEG_INFINITY, f64::INFINITY),
            Constraint::Lower(l) => (l.eval(theta), f64::INFINITY),
            Constraint::Upper(h) => (f64::NEG_INFINITY, h.eval(theta)),
            Constraint::Interval(l, h) => (l.eval(theta), h.eval(theta)),
        })
        .collect()
}

/// Normal-kernel log prior summed over slots, with linked means.
pub fn log_prior(layout: &ParameterLayout, theta: &[f64]) -> f64 {
    layout.slots().iter().zip(theta).map(|(s, &t)| normal_lpdf(t, s.mean.eval(theta), s.sd)).sum()
}

fn add_log_prior_grad(layout: &ParameterLayout, theta: &[f64], adj: &mut [f64]) {
    for (i, s) in layout.slots().iter().enumerate() {
        let d = (theta[i] - s.mean.eval(theta)) / (s.sd * s.sd);
        adj[i] -= d;
        for &(k, c) in &s.mean.terms {
            adj[k] += c * d;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-class log contributions; also stores each missingness linear
/// predictor (without the class term) in `eta_r`.
fn class_terms(layout: &ParameterLayout, theta: &[f64], rec: &Record<'_>, eta_r: &mut [f64]) -> (f64, ClassLogLik) {
    let m = rec.x.len();
    let eta_d = theta[0] + dot(&theta[1..1 + m], rec.x);
    let mut l0 = log_expit(-eta_d);
    let mut l1 = log_expit(eta_d);
    for (j, blk) in layout.continuous.iter().enumerate() {
        let b = blk.miss_start;
        let eta = theta[b] + dot(&theta[b + 1..b + 1 + m], rec.x);
        eta_r[j] = eta;
        let gamma = theta[blk.miss_class(m)];
        let observed = rec.r[j] == 1;
        l0 += bernoulli_logit_lpmf(observed, eta);
        l1 += bernoulli_logit_lpmf(observed, eta + gamma);
        if observed {
            let (a, d, s) = (theta[blk.intercept], theta[blk.class_effect], theta[blk.sigma]);
            l0 += normal_lpdf(rec.y[j], a, s);
            l1 += normal_lpdf(rec.y[j], a + d, s);
        }
    }
    for (k, blk) in layout.binary.iter().enumerate() {
        let (c, e) = (theta[blk.intercept], theta[blk.class_effect]);
        let w = rec.w[k] == 1;
        l0 += bernoulli_logit_lpmf(w, c);
        l1 += bernoulli_logit_lpmf(w, c + e);
    }
    (eta_d, ClassLogLik { l0, l1 })
}

/// Log contributions of one record under each latent class.
pub fn per_record_class_loglik(layout: &ParameterLayout, theta: &[f64], rec: &Record<'_>) -> ClassLogLik {
    let mut eta_r = vec![0.0; layout.continuous.len()];
    class_terms(layout, theta, rec, &mut eta_r).1
}

/// `P(D = 1 | record, theta)`.
pub fn responsibility(layout: &ParameterLayout, theta: &[f64], rec: &Record<'_>) -> f64 {
    per_record_class_loglik(layout, theta, rec).responsibility()
}

/// Adds one record's responsibility-weighted score to `g` (model coordinates).
fn add_record_grad(
    layout: &ParameterLayout,
    theta: &[f64],
    rec: &Record<'_>,
    eta_d: f64,
    eta_r: &[f64],
    ll: ClassLogLik,
    g: &mut [f64],
) {
    let m = rec.x.len();
    let r1 = expit(ll.l1 - ll.l0);
    let r0 = expit(ll.l0 - ll.l1);

    let s = r1 - expit(eta_d);
    g[0] += s;
    for (gc, x) in g[1..1 + m].iter_mut().zip(rec.x) {
        *gc += s * x;
    }

    for (j, blk) in layout.continuous.iter().enumerate() {
        let b = blk.miss_start;
        let gamma = theta[blk.miss_class(m)];
        let rv = f64::from(rec.r[j]);
        let e0 = rv - expit(eta_r[j]);
        let e1 = rv - expit(eta_r[j] + gamma);
        let shared = r0 * e0 + r1 * e1;
        g[b] += shared;
        for (gc, x) in g[b + 1..b + 1 + m].iter_mut().zip(rec.x) {
            *gc += shared * x;
        }
        g[blk.miss_class(m)] += r1 * e1;

        if rec.r[j] == 1 {
            let (a, d, sd) = (theta[blk.intercept], theta[blk.class_effect], theta[blk.sigma]);
            let var = sd * sd;
            let res0 = rec.y[j] - a;
            let res1 = rec.y[j] - a - d;
            g[blk.intercept] += (r0 * res0 + r1 * res1) / var;
            g[blk.class_effect] += r1 * res1 / var;
            g[blk.sigma] += -1.0 / sd + (r0 * res0 * res0 + r1 * res1 * res1) / (var * sd);
        }
    }

    for (k, blk) in layout.binary.iter().enumerate() {
        let (c, e) = (theta[blk.intercept], theta[blk.class_effect]);
        let wv = f64::from(rec.w[k]);
        let e0 = wv - expit(c);
        let e1 = wv - expit(c + e);
        g[blk.intercept] += r0 * e0 + r1 * e1;
        g[blk.class_effect] += r1 * e1;
    }
}

/// Pairwise tree reduction in a fixed order.
fn tree_reduce<T>(mut items: Vec<T>, combine: impl Fn(T, T) -> T) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// A config's posterior over one cohort.
#[derive(Clone, Debug)]
pub struct Model<'a> {
    layout: ParameterLayout,
    cohort: &'a Cohort,
    warnings: Vec<String>,
}

impl<'a> Model<'a> {
    pub fn new(config: &ModelConfig, cohort: &'a Cohort) -> Result<Self, ModelError> {
        let layout = build_layout(config)?;
        Self::with_layout(layout, config, cohort)
    }

    pub fn with_layout(layout: ParameterLayout, config: &ModelConfig, cohort: &'a Cohort) -> Result<Self, ModelError> {
        if cohort.covariate_columns.as_slice() != layout.covariate_columns() {
            return Err(ModelError::CohortMismatch(format!(
                "covariate columns {:?} vs {:?}",
                cohort.covariate_columns,
                layout.covariate_columns()
            )));
        }
        let cont: Vec<&str> = config.continuous_features.iter().map(|f| f.name.as_str()).collect();
        let bin: Vec<&str> = config.binary_features.iter().map(|f| f.name.as_str()).collect();
        if cohort.continuous_names != cont || cohort.binary_names != bin {
            return Err(ModelError::CohortMismatch("feature names differ".into()));
        }
        let warnings = cohort
            .constant_binary_features()
            .into_iter()
            .map(|f| format!("binary feature {f} is constant in the cohort; its intercept absorbs it"))
            .collect();
        Ok(Model { layout, cohort, warnings })
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn cohort(&self) -> &Cohort {
        self.cohort
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn constrain(&self, u: &[f64]) -> Result<(Vec<f64>, f64), ModelError> {
        constrain(&self.layout, u)
    }

    pub fn unconstrain(&self, theta: &[f64]) -> Result<Vec<f64>, ModelError> {
        unconstrain(&self.layout, theta)
    }

    fn num_blocks(&self) -> usize {
        self.cohort.len().div_ceil(BLOCK_SIZE)
    }

    fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        b * BLOCK_SIZE..((b + 1) * BLOCK_SIZE).min(self.cohort.len())
    }

    fn block_loglik(&self, theta: &[f64], b: usize, grad: Option<&mut [f64]>) -> Result<f64, ModelError> {
        let mut eta_r = vec![0.0; self.layout.continuous.len()];
        let mut total = 0.0;
        let mut grad = grad;
        for i in self.block_range(b) {
            let rec = self.cohort.record(i);
            let (eta_d, ll) = class_terms(&self.layout, theta, &rec, &mut eta_r);
            let v = ll.marginal();
            if !v.is_finite() {
                return Err(ModelError::NonFinite(format!("log-likelihood of record {}", self.cohort.ids[i])));
            }
            total += v;
            if let Some(g) = grad.as_deref_mut() {
                add_record_grad(&self.layout, theta, &rec, eta_d, &eta_r, ll, g);
            }
        }
        Ok(total)
    }

    /// Marginal data log-likelihood at model coordinates.
    pub fn data_loglik(&self, theta: &[f64]) -> Result<f64, ModelError> {
        let parts: Result<Vec<f64>, ModelError> =
            (0..self.num_blocks()).into_par_iter().map(|b| self.block_loglik(theta, b, None)).collect();
        Ok(tree_reduce(parts?, |a, b| a + b).unwrap_or(0.0))
    }

    fn data_loglik_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
        let dim = self.dim();
        let parts: Result<Vec<(f64, Vec<f64>)>, ModelError> = (0..self.num_blocks())
            .into_par_iter()
            .map(|b| {
                let mut g = vec![0.0; dim];
                let v = self.block_loglik(theta, b, Some(&mut g))?;
                Ok((v, g))
            })
            .collect();
        let reduced = tree_reduce(parts?, |(va, mut ga), (vb, gb)| {
            for (x, y) in ga.iter_mut().zip(&gb) {
                *x += y;
            }
            (va + vb, ga)
        });
        Ok(reduced.unwrap_or_else(|| (0.0, vec![0.0; dim])))
    }

    /// Log-posterior (data + prior + log-Jacobian) at an unconstrained point.
    pub fn log_posterior(&self, u: &[f64]) -> Result<f64, ModelError> {
        let (theta, log_jac) = self.constrain(u)?;
        let value = self.data_loglik(&theta)? + log_prior(&self.layout, &theta) + log_jac;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(ModelError::NonFinite("log-posterior".into()))
        }
    }

    /// Log-posterior and its exact gradient with respect to `u`.
    pub fn log_posterior_and_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64, ModelError> {
        let (theta, log_jac, jets) = constrain_jets(&self.layout, u)?;
        let (data, mut adj) = self.data_loglik_grad(&theta)?;
        let value = data + log_prior(&self.layout, &theta) + log_jac;
        if !value.is_finite() {
            return Err(ModelError::NonFinite("log-posterior".into()));
        }
        add_log_prior_grad(&self.layout, &theta, &mut adj);

        // Reverse pass: each slot's adjoint is final once later slots are done.
        for i in (0..self.dim()).rev() {
            let a = adj[i];
            let jet = jets[i];
            grad[i] = a * jet.dtheta_du + jet.dlogj_du;
            let mut push = |expr: &crate::layout::LinkedExpr, w: f64| {
                for &(k, c) in &expr.terms {
                    adj[k] += w * c;
                }
            };
            match &self.layout.slots()[i].constraint {
                Constraint::Unbounded => {}
                Constraint::Lower(l) => push(l, a * jet.dtheta_dlo + jet.dlogj_dlo),
                Constraint::Upper(h) => push(h, a * jet.dtheta_dhi + jet.dlogj_dhi),
                Constraint::Interval(l, h) => {
                    push(l, a * jet.dtheta_dlo + jet.dlogj_dlo);
                    push(h, a * jet.dtheta_dhi + jet.dlogj_dhi);
                }
            }
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite(format!("gradient for {}", self.layout.names()[i])));
        }
        Ok(value)
    }

    pub fn class_loglik(&self, theta: &[f64], i: usize) -> ClassLogLik {
        per_record_class_loglik(&self.layout, theta, &self.cohort.record(i))
    }

    /// Responsibility of every record at model coordinates.
    pub fn responsibilities(&self, theta: &[f64]) -> Vec<f64> {
        let mut eta_r = vec![0.0; self.layout.continuous.len()];
        (0..self.cohort.len())
            .map(|i| class_terms(&self.layout, theta, &self.cohort.record(i), &mut eta_r).1.responsibility())
            .collect()
    }
}

/// One-shot evaluation for callers without a long-lived [`Model`].
pub fn log_posterior_and_grad(u: &[f64], cohort: &Cohort, config: &ModelConfig) -> Result<(f64, Vec<f64>), ModelError> {
    let model = Model::new(config, cohort)?;
    let mut grad = vec![0.0; model.dim()];
    let v = model.log_posterior_and_grad(u, &mut grad)?;
    Ok((v, grad))
}
