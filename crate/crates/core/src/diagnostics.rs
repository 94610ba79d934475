//! Split R-hat, rank-normalized R-hat and bulk effective sample size.
//!
//! Every estimator takes one slice per chain. Chains are halved before
//! anything is computed; an odd chain length drops its middle draw.

use rayon::prelude::*;
use serde::Serialize;
use std::fmt;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::sampler::Draws;
use crate::special::inv_normal_cdf;

pub const STRICT_RHAT: f64 = 1.01;
pub const LENIENT_RHAT: f64 = 1.1;
pub const MIN_RELATIVE_ESS: f64 = 0.1;
/// Upper bound on ESS as a multiple of the total draw count.
pub const ESS_CAP: f64 = 2.0;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticError {
    #[error("need at least one chain")]
    NoChains,
    #[error("chains have unequal lengths")]
    Ragged,
    #[error("chains need at least 4 draws")]
    TooShort,
    #[error("degenerate chains")]
    Degenerate,
}

fn split_chains<C: AsRef<[f64]>>(chains: &[C]) -> Result<Vec<&[f64]>, DiagnosticError> {
    let first = chains.first().ok_or(DiagnosticError::NoChains)?.as_ref().len();
    if chains.iter().any(|c| c.as_ref().len() != first) {
        return Err(DiagnosticError::Ragged);
    }
    if first < 4 {
        return Err(DiagnosticError::TooShort);
    }
    let half = first / 2;
    Ok(chains.iter().flat_map(|c| {
        let c = c.as_ref();
        [&c[..half], &c[first - half..]]
    }).collect())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn rhat_of_split(split: &[&[f64]]) -> Result<f64, DiagnosticError> {
    let n = split[0].len() as f64;
    let means: Vec<f64> = split.iter().map(|c| mean(c)).collect();
    let w = split.iter().map(|c| sample_var(c)).sum::<f64>() / split.len() as f64;
    let b = n * sample_var(&means);
    if !(w > 0.0) || !w.is_finite() {
        return Err(DiagnosticError::Degenerate);
    }
    Ok(((w * (n - 1.0) / n + b / n) / w).sqrt())
}

pub fn split_rhat<C: AsRef<[f64]>>(chains: &[C]) -> Result<f64, DiagnosticError> {
    rhat_of_split(&split_chains(chains)?)
}

/// Normal scores of pooled average ranks, reshaped like the input.
pub fn rank_normalize<C: AsRef<[f64]>>(chains: &[C]) -> Vec<Vec<f64>> {
    let pooled: Vec<f64> = chains.iter().flat_map(|c| c.as_ref().iter().copied()).collect();
    let s = pooled.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let z: Vec<f64> = ranks.iter().map(|r| inv_normal_cdf((r - 0.375) / (s as f64 + 0.25))).collect();
    let mut out = Vec::with_capacity(chains.len());
    let mut offset = 0;
    for c in chains {
        let n = c.as_ref().len();
        out.push(z[offset..offset + n].to_vec());
        offset += n;
    }
    out
}

pub fn rank_normalized_rhat<C: AsRef<[f64]>>(chains: &[C]) -> Result<f64, DiagnosticError> {
    split_chains(chains)?;
    if degenerate(chains) {
        return Err(DiagnosticError::Degenerate);
    }
    split_rhat(&rank_normalize(chains))
}

fn degenerate<C: AsRef<[f64]>>(chains: &[C]) -> bool {
    chains.iter().any(|c| {
        let c = c.as_ref();
        c.iter().all(|v| *v == c[0])
    })
}

/// ESS with Geyer's initial positive and monotone sequence truncation.
fn ess_of_split(split: &[&[f64]]) -> Result<f64, DiagnosticError> {
    let m = split.len();
    let n = split[0].len();
    let means: Vec<f64> = split.iter().map(|c| mean(c)).collect();
    let acov = |lag: usize| -> f64 {
        split
            .iter()
            .zip(&means)
            .map(|(c, mu)| (0..n - lag).map(|t| (c[t] - mu) * (c[t + lag] - mu)).sum::<f64>() / n as f64)
            .sum::<f64>()
            / m as f64
    };
    let mean_var = acov(0) * n as f64 / (n as f64 - 1.0);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    if !(mean_var > 0.0) || !var_plus.is_finite() {
        return Err(DiagnosticError::Degenerate);
    }
    let rho = |lag: usize| 1.0 - (mean_var - acov(lag)) / var_plus;

    let mut rho_hat = vec![0.0; n + 1];
    rho_hat[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho(1);
    rho_hat[1] = odd;
    let mut s = 1;
    while s + 4 < n && even + odd > 0.0 {
        even = rho(s + 1);
        odd = rho(s + 2);
        if even + odd >= 0.0 {
            rho_hat[s + 1] = even;
            rho_hat[s + 2] = odd;
        }
        s += 2;
    }
    let max_s = s;
    if rho_hat[max_s] > 0.0 {
        rho_hat[max_s + 1] = rho_hat[max_s];
    }
    let mut k = 1;
    while k + 3 <= max_s {
        if rho_hat[k + 1] + rho_hat[k + 2] > rho_hat[k - 1] + rho_hat[k] {
            rho_hat[k + 1] = (rho_hat[k - 1] + rho_hat[k]) / 2.0;
            rho_hat[k + 2] = rho_hat[k + 1];
        }
        k += 2;
    }
    let total = (m * n) as f64;
    let tau = -1.0 + 2.0 * rho_hat[..max_s].iter().sum::<f64>() + rho_hat[max_s + 1];
    let tau = tau.max(1.0 / total.log10());
    Ok((total / tau).min(ESS_CAP * total))
}

/// ESS of the draws as given.
pub fn ess_basic<C: AsRef<[f64]>>(chains: &[C]) -> Result<f64, DiagnosticError> {
    ess_of_split(&split_chains(chains)?)
}

/// ESS of the rank-normalized draws.
pub fn ess_bulk<C: AsRef<[f64]>>(chains: &[C]) -> Result<f64, DiagnosticError> {
    split_chains(chains)?;
    if degenerate(chains) {
        return Err(DiagnosticError::Degenerate);
    }
    ess_basic(&rank_normalize(chains))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
    pub rhat: f64,
    pub rhat_rank: f64,
    pub ess_bulk: f64,
    pub ess_relative: f64,
    pub flag: Option<DiagnosticError>,
}

impl SummaryRow {
    /// The larger of the raw and rank-normalized R-hat; NaN when flagged.
    pub fn worst_rhat(&self) -> f64 {
        if self.flag.is_some() {
            f64::NAN
        } else {
            self.rhat.max(self.rhat_rank)
        }
    }

    fn strict_ok(&self) -> bool {
        self.worst_rhat() < STRICT_RHAT && self.ess_relative > MIN_RELATIVE_ESS
    }
}

impl Serialize for DiagnosticError {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Caution,
    Fail,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Caution => "caution",
            Verdict::Fail => "fail",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
    pub verdict: Verdict,
    /// Parameters missing the strict thresholds.
    pub offending: Vec<String>,
}

fn summarize_param(name: &str, chains: &[Vec<f64>]) -> SummaryRow {
    let mut pooled: Vec<f64> = chains.concat();
    let total = pooled.len() as f64;
    let mu = mean(&pooled);
    let sd = if pooled.len() > 1 { sample_var(&pooled).sqrt() } else { 0.0 };
    pooled.sort_by(f64::total_cmp);
    let stats = split_rhat(chains).and_then(|r| Ok((r, rank_normalized_rhat(chains)?, ess_bulk(chains)?)));
    let (rhat, rhat_rank, ess, flag) = match stats {
        Ok((r, rr, e)) => (r, rr, e, None),
        Err(e) => (f64::NAN, f64::NAN, f64::NAN, Some(e)),
    };
    SummaryRow {
        parameter: name.to_string(),
        mean: mu,
        sd,
        q025: quantile_sorted(&pooled, 0.025),
        q50: quantile_sorted(&pooled, 0.5),
        q975: quantile_sorted(&pooled, 0.975),
        rhat,
        rhat_rank,
        ess_bulk: ess,
        ess_relative: ess / total,
        flag,
    }
}

pub fn summarize(draws: &Draws) -> SummaryTable {
    let rows: Vec<SummaryRow> =
        (0..draws.dim()).into_par_iter().map(|p| summarize_param(&draws.names[p], &draws.param_chains(p))).collect();
    let offending: Vec<String> = rows.iter().filter(|r| !r.strict_ok()).map(|r| r.parameter.clone()).collect();
    let verdict = if offending.is_empty() {
        Verdict::Pass
    } else if rows.iter().all(|r| r.worst_rhat() < LENIENT_RHAT) {
        Verdict::Caution
    } else {
        Verdict::Fail
    };
    SummaryTable { rows, verdict, offending }
}

impl SummaryTable {
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["parameter", "mean", "sd", "q2.5", "q50", "q97.5", "rhat", "rhat_rank", "ess_bulk", "ess_relative", "flag"])?;
        for r in &self.rows {
            let mut rec = vec![r.parameter.clone()];
            rec.extend([r.mean, r.sd, r.q025, r.q50, r.q975, r.rhat, r.rhat_rank, r.ess_bulk, r.ess_relative].map(|v| format!("{v}")));
            rec.push(r.flag.map(|f| f.to_string()).unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One `trace/<parameter>.csv` per parameter with a column per chain.
pub fn write_traces(draws: &Draws, dir: &Path) -> std::io::Result<()> {
    let dir = dir.join("trace");
    std::fs::create_dir_all(&dir)?;
    for (p, name) in draws.names.iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv")))?;
        let mut header = vec!["iteration".to_string()];
        header.extend((1..=draws.chains).map(|c| format!("chain{c}")));
        w.write_record(&header)?;
        for i in 0..draws.keep {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend((0..draws.chains).map(|c| format!("{}", draws.get(c, i, p))));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}
