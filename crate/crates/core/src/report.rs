//! Per-record class membership, labels and cohort-level summaries.

use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;
use std::io::Write;
use thiserror::Error;

use crate::cohort::Cohort;
use crate::diagnostics::quantile_sorted;
use crate::layout::ParameterLayout;
use crate::model::responsibility;
use crate::sampler::Draws;

pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("draws carry parameters {draws:?}, layout expects {layout:?}")]
    Dimension { draws: Vec<String>, layout: Vec<String> },
    #[error("credible level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error("threshold must lie in (0, 1), got {0}")]
    Threshold(f64),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("groups do not partition the {0} records")]
    NotPartition(usize),
    #[error("per-draw responsibilities were not kept")]
    NoPerDraw,
}

/// Posterior class-1 membership per record.
#[derive(Clone, Debug, PartialEq)]
pub struct MembershipTable {
    pub ids: Vec<String>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    /// Record-major responsibilities, one entry per retained draw.
    pub per_draw: Option<Vec<Vec<f64>>>,
}

fn check_level(level: f64) -> Result<(f64, f64), ReportError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(ReportError::Level(level));
    }
    let tail = (1.0 - level) / 2.0;
    Ok((tail, 1.0 - tail))
}

/// Responsibilities at every retained draw, summarized per record.
pub fn membership_posterior(
    draws: &Draws,
    cohort: &Cohort,
    layout: &ParameterLayout,
    level: f64,
    keep_per_draw: bool,
) -> Result<MembershipTable, ReportError> {
    if draws.names != layout.names() {
        return Err(ReportError::Dimension { draws: draws.names.clone(), layout: layout.names().to_vec() });
    }
    let (lo_q, hi_q) = check_level(level)?;
    let points: Vec<&[f64]> =
        (0..draws.chains).flat_map(|c| (0..draws.keep).map(move |i| (c, i))).map(|(c, i)| draws.point(c, i)).collect();
    let rows: Vec<(f64, f64, f64, Option<Vec<f64>>)> = (0..cohort.len())
        .into_par_iter()
        .map(|i| {
            let rec = cohort.record(i);
            let resp: Vec<f64> = points.iter().map(|theta| responsibility(layout, theta, &rec)).collect();
            let mean = resp.iter().sum::<f64>() / resp.len() as f64;
            let mut sorted = resp.clone();
            sorted.sort_by(f64::total_cmp);
            let keep = keep_per_draw.then_some(resp);
            (mean, quantile_sorted(&sorted, lo_q), quantile_sorted(&sorted, hi_q), keep)
        })
        .collect();
    let mut table = MembershipTable {
        ids: cohort.ids.clone(),
        mean: Vec::with_capacity(rows.len()),
        lower: Vec::with_capacity(rows.len()),
        upper: Vec::with_capacity(rows.len()),
        level,
        per_draw: keep_per_draw.then(|| Vec::with_capacity(rows.len())),
    };
    for (mean, lo, hi, resp) in rows {
        table.mean.push(mean);
        table.lower.push(lo);
        table.upper.push(hi);
        if let (Some(all), Some(r)) = (table.per_draw.as_mut(), resp) {
            all.push(r);
        }
    }
    Ok(table)
}

/// Label 1 iff the posterior mean reaches the threshold.
pub fn classify(table: &MembershipTable, threshold: f64) -> Result<Vec<u8>, ReportError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(ReportError::Threshold(threshold));
    }
    Ok(table.mean.iter().map(|&m| u8::from(m >= threshold)).collect())
}

impl MembershipTable {
    pub fn write_csv<W: Write>(&self, labels: &[u8], writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "mean", "lo", "hi", "label"])?;
        for i in 0..self.ids.len() {
            w.write_record([
                self.ids[i].clone(),
                format!("{}", self.mean[i]),
                format!("{}", self.lower[i]),
                format!("{}", self.upper[i]),
                labels[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub center: f64,
    pub count: usize,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub bins: Vec<Bin>,
    /// Centers of the (at most) two tallest local modes, ascending.
    pub modes: Vec<f64>,
}

/// Equal-width histogram on [0, 1]; 1.0 falls in the last bin.
pub fn density_histogram(probabilities: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let width = 1.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for &p in probabilities {
        let b = ((p.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let total = probabilities.len().max(1) as f64;
    let rows: Vec<Bin> = counts
        .iter()
        .enumerate()
        .map(|(b, &count)| Bin {
            lo: b as f64 * width,
            hi: (b + 1) as f64 * width,
            center: (b as f64 + 0.5) * width,
            count,
            density: count as f64 / (total * width),
        })
        .collect();

    // Plateaus strictly above both neighbours are modes; report the middle bin.
    let mut peaks: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    while start < bins {
        let mut end = start;
        while end + 1 < bins && counts[end + 1] == counts[start] {
            end += 1;
        }
        let c = counts[start];
        let left_lower = start == 0 || counts[start - 1] < c;
        let right_lower = end + 1 == bins || counts[end + 1] < c;
        if c > 0 && left_lower && right_lower {
            peaks.push(((start + end) / 2, c));
        }
        start = end + 1;
    }
    peaks.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    peaks.truncate(2);
    let mut modes: Vec<f64> = peaks.iter().map(|(b, _)| rows[*b].center).collect();
    modes.sort_by(f64::total_cmp);
    Histogram { bins: rows, modes }
}

impl Histogram {
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["lo", "hi", "center", "count", "density", "mode"])?;
        for b in &self.bins {
            let is_mode = self.modes.contains(&b.center);
            w.write_record([
                format!("{}", b.lo),
                format!("{}", b.hi),
                format!("{}", b.center),
                b.count.to_string(),
                format!("{}", b.density),
                u8::from(is_mode).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Bar chart of the densities as a standalone SVG document.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 360.0, 40.0);
        let max = self.bins.iter().map(|b| b.density).fold(0.0, f64::max).max(1e-12);
        let plot_w = w - 2.0 * pad;
        let plot_h = h - 2.0 * pad;
        let bar_w = plot_w / self.bins.len() as f64;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        for (i, b) in self.bins.iter().enumerate() {
            let bh = plot_h * b.density / max;
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a6fa5"/>"##,
                pad + i as f64 * bar_w,
                pad + plot_h - bh,
                (bar_w - 1.0).max(0.5),
                bh
            );
        }
        let _ = writeln!(s, r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, pad + plot_h, w - pad);
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let x = pad + t * plot_w;
            let _ = writeln!(
                s,
                r#"<text x="{x:.2}" y="{:.2}" font-size="12" text-anchor="middle" font-family="sans-serif">{t}</text>"#,
                pad + plot_h + 16.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle" font-family="sans-serif">posterior probability of class 1</text>"#,
            w / 2.0,
            h - 6.0
        );
        s.push_str("</svg>\n");
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StratumRow {
    pub group: String,
    pub n: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub flag: Option<String>,
}

/// Across-draw summary of the per-draw group mean responsibility.
pub fn stratified_mean(table: &MembershipTable, groups: &[(String, Vec<usize>)]) -> Result<Vec<StratumRow>, ReportError> {
    let per_draw = table.per_draw.as_ref().ok_or(ReportError::NoPerDraw)?;
    let n = per_draw.len();
    let mut seen = vec![false; n];
    for (_, members) in groups {
        for &i in members {
            if i >= n || seen[i] {
                return Err(ReportError::NotPartition(n));
            }
            seen[i] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(ReportError::NotPartition(n));
    }
    let (lo_q, hi_q) = check_level(table.level)?;
    let draws = per_draw.first().map_or(0, Vec::len);
    Ok(groups
        .iter()
        .map(|(name, members)| {
            if members.is_empty() {
                return StratumRow {
                    group: name.clone(),
                    n: 0,
                    mean: f64::NAN,
                    lower: f64::NAN,
                    upper: f64::NAN,
                    flag: Some("empty group".into()),
                };
            }
            let mut group_means: Vec<f64> = (0..draws)
                .map(|s| members.iter().map(|&i| per_draw[i][s]).sum::<f64>() / members.len() as f64)
                .collect();
            let mean = group_means.iter().sum::<f64>() / draws as f64;
            group_means.sort_by(f64::total_cmp);
            StratumRow {
                group: name.clone(),
                n: members.len(),
                mean,
                lower: quantile_sorted(&group_means, lo_q),
                upper: quantile_sorted(&group_means, hi_q),
                flag: None,
            }
        })
        .collect())
}

/// Writes `stratum,group,n,mean,lo,hi,flag` rows.
pub fn write_strata_csv<W: Write>(strata: &[(String, Vec<StratumRow>)], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["stratum", "group", "n", "mean", "lo", "hi", "flag"])?;
    for (stratum, rows) in strata {
        for r in rows {
            w.write_record([
                stratum.clone(),
                r.group.clone(),
                r.n.to_string(),
                format!("{}", r.mean),
                format!("{}", r.lower),
                format!("{}", r.upper),
                r.flag.clone().unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Indicator {
    Pos,
    Neg,
    Missing,
}

impl Indicator {
    /// `pos`/`1`/`present` and `neg`/`0`/`absent`; anything else is missing.
    pub fn parse(s: &str) -> Indicator {
        match s.trim().to_ascii_lowercase().as_str() {
            "pos" | "positive" | "1" | "present" | "true" => Indicator::Pos,
            "neg" | "negative" | "0" | "absent" | "false" => Indicator::Neg,
            _ => Indicator::Missing,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RuleLabel {
    Positive,
    Negative,
    Indeterminate,
}

impl RuleLabel {
    pub const ALL: [RuleLabel; 3] = [RuleLabel::Positive, RuleLabel::Negative, RuleLabel::Indeterminate];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleLabel::Positive => "Positive",
            RuleLabel::Negative => "Negative",
            RuleLabel::Indeterminate => "Indeterminate",
        }
    }
}

/// Positive if any indicator is positive; Negative if a test was observed
/// negative and no allergy code is present; otherwise Indeterminate.
pub fn rule_based_t2(pst: Indicator, eos_high: Indicator, allergic_icd: bool) -> RuleLabel {
    if pst == Indicator::Pos || eos_high == Indicator::Pos || allergic_icd {
        RuleLabel::Positive
    } else if pst == Indicator::Neg || eos_high == Indicator::Neg {
        RuleLabel::Negative
    } else {
        RuleLabel::Indeterminate
    }
}

/// Rule label by model label counts, rows in `RuleLabel::ALL` order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Concordance {
    pub counts: [[usize; 2]; 3],
}

impl Concordance {
    pub fn row_total(&self, row: usize) -> usize {
        self.counts[row][0] + self.counts[row][1]
    }

    /// Row-normalized percentages; NaN for an empty row.
    pub fn percent(&self, row: usize, col: usize) -> f64 {
        let total = self.row_total(row);
        if total == 0 {
            f64::NAN
        } else {
            100.0 * self.counts[row][col] as f64 / total as f64
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rule", "model_0", "model_1", "total", "pct_0", "pct_1"])?;
        for (row, label) in RuleLabel::ALL.iter().enumerate() {
            w.write_record([
                label.as_str().to_string(),
                self.counts[row][0].to_string(),
                self.counts[row][1].to_string(),
                self.row_total(row).to_string(),
                format!("{}", self.percent(row, 0)),
                format!("{}", self.percent(row, 1)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn concordance(rule_labels: &[RuleLabel], model_labels: &[u8]) -> Result<Concordance, ReportError> {
    if rule_labels.len() != model_labels.len() {
        return Err(ReportError::Length(rule_labels.len(), model_labels.len()));
    }
    let mut counts = [[0usize; 2]; 3];
    for (r, &m) in rule_labels.iter().zip(model_labels) {
        let row = RuleLabel::ALL.iter().position(|l| l == r).expect("exhaustive");
        counts[row][usize::from(m.min(1))] += 1;
    }
    Ok(Concordance { counts })
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Area under the ROC curve via the rank-sum statistic; ties count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::layout::build_layout;
    use crate::sampler::{DrawsMeta, SamplerSettings};
    use crate::simulate::{desk_asthma, simulate_cohort};
    use proptest::prelude::*;

    fn table(per_draw: Vec<Vec<f64>>, level: f64) -> MembershipTable {
        let (lo_q, hi_q) = check_level(level).unwrap();
        let mut t = MembershipTable {
            ids: (0..per_draw.len()).map(|i| i.to_string()).collect(),
            mean: vec![],
            lower: vec![],
            upper: vec![],
            level,
            per_draw: None,
        };
        for r in &per_draw {
            let mut s = r.clone();
            s.sort_by(f64::total_cmp);
            t.mean.push(r.iter().sum::<f64>() / r.len() as f64);
            t.lower.push(quantile_sorted(&s, lo_q));
            t.upper.push(quantile_sorted(&s, hi_q));
        }
        t.per_draw = Some(per_draw);
        t
    }

    fn draws_of(layout: &ParameterLayout, points: &[Vec<f64>]) -> Draws {
        Draws {
            names: layout.names().to_vec(),
            chains: 1,
            keep: points.len(),
            values: points.concat(),
            accept_stat: vec![1.0; points.len()],
            divergent: vec![false; points.len()],
            tree_depth: vec![1; points.len()],
            energy: vec![0.0; points.len()],
            meta: DrawsMeta {
                seed: 0,
                chain_streams: vec![0],
                settings: SamplerSettings::default(),
                stepsizes: vec![],
                inv_metric: vec![],
                config_hash: None,
                version: String::new(),
            },
        }
    }

    fn symmetric_point(config: &ModelConfig) -> (ParameterLayout, Vec<f64>) {
        // Class effects zero, latent intercept zero: both classes identical.
        let layout = build_layout(config).unwrap();
        let mut theta = vec![0.0; layout.dim()];
        for b in &layout.continuous {
            theta[b.sigma] = 1.0;
        }
        (layout, theta)
    }

    fn plain_config() -> ModelConfig {
        let mut config = desk_asthma(1, 0).config;
        let plain = crate::config::PriorSpec::normal(0.0, 1.0);
        for f in &mut config.binary_features {
            f.prior.intercept = plain.clone();
            f.prior.class_effect = plain.clone();
        }
        for f in &mut config.continuous_features {
            f.outcome_prior.class_effect = plain.clone();
        }
        config
    }

    #[test]
    fn identical_draws_collapse_interval() {
        let spec = desk_asthma(50, 1);
        let sim = simulate_cohort(&spec).unwrap();
        let draws = draws_of(&sim.layout, &vec![sim.theta.clone(); 7]);
        let t = membership_posterior(&draws, &sim.cohort, &sim.layout, 0.95, true).unwrap();
        for i in 0..50 {
            assert_eq!(t.lower[i], t.upper[i]);
            assert!((t.mean[i] - t.lower[i]).abs() <= 1e-15);
        }
    }

    #[test]
    fn symmetric_parameters_give_one_half() {
        let config = plain_config();
        let (layout, theta) = symmetric_point(&config);
        let mut spec = desk_asthma(40, 2);
        spec.config = config;
        let sim = simulate_cohort(&spec).unwrap();
        let t = membership_posterior(&draws_of(&layout, &[theta.clone(), theta]), &sim.cohort, &layout, 0.95, true).unwrap();
        assert!(t.mean.iter().all(|&m| (m - 0.5).abs() < 1e-12));
        let groups = vec![("a".to_string(), (0..20).collect()), ("b".to_string(), (20..40).collect())];
        for row in stratified_mean(&t, &groups).unwrap() {
            assert!((row.mean - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let sim = simulate_cohort(&desk_asthma(5, 1)).unwrap();
        let mut draws = draws_of(&sim.layout, std::slice::from_ref(&sim.theta));
        draws.names.pop();
        assert!(matches!(
            membership_posterior(&draws, &sim.cohort, &sim.layout, 0.95, false),
            Err(ReportError::Dimension { .. })
        ));
    }

    #[test]
    fn classification_tie_goes_to_one() {
        let t = table(vec![vec![0.5], vec![0.49], vec![0.51]], 0.95);
        assert_eq!(classify(&t, 0.5).unwrap(), [1, 0, 1]);
        assert!(classify(&t, 1.0).is_err());
        assert!(classify(&t, 0.0).is_err());
    }

    #[test]
    fn histogram_single_value() {
        let h = density_histogram(&[0.5; 20], 50);
        assert_eq!(h.bins.iter().filter(|b| b.count > 0).count(), 1);
        assert_eq!(h.modes.len(), 1);
    }

    #[test]
    fn histogram_finds_two_modes() {
        let mut v = Vec::new();
        for i in 0..1000 {
            let e = (i % 7) as f64 * 0.001;
            v.push(0.03 + e - 0.003);
            if i % 2 == 0 {
                v.push(0.985 + e - 0.003);
            }
            v.push(i as f64 / 1000.0);
        }
        let h = density_histogram(&v, DEFAULT_BINS);
        assert_eq!(h.modes.len(), 2);
        assert!((h.modes[0] - 0.03).abs() < 1e-12);
        assert!((h.modes[1] - 0.98).abs() <= 0.01 + 1e-12);
    }

    #[test]
    fn histogram_of_uniform_sample_is_flat() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        let h = density_histogram(&v, DEFAULT_BINS);
        let max = h.bins.iter().map(|b| b.density).fold(0.0, f64::max);
        let min = h.bins.iter().map(|b| b.density).fold(f64::INFINITY, f64::min);
        assert!(max / min < 1.3);
        let total: f64 = h.bins.iter().map(|b| b.density * (b.hi - b.lo)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trivial_partition_matches_overall_mean() {
        let t = table(vec![vec![0.1, 0.2, 0.9], vec![0.7, 0.3, 0.5], vec![0.0, 1.0, 0.25]], 0.9);
        let rows = stratified_mean(&t, &[("all".into(), vec![0, 1, 2])]).unwrap();
        let overall = t.mean.iter().sum::<f64>() / 3.0;
        assert!((rows[0].mean - overall).abs() < 1e-12);
    }

    #[test]
    fn empty_group_is_flagged_and_bad_partitions_rejected() {
        let t = table(vec![vec![0.1, 0.2], vec![0.7, 0.3]], 0.95);
        let rows = stratified_mean(&t, &[("all".into(), vec![0, 1]), ("none".into(), vec![])]).unwrap();
        assert_eq!(rows[1].flag.as_deref(), Some("empty group"));
        assert!(rows[1].mean.is_nan());
        assert_eq!(stratified_mean(&t, &[("a".into(), vec![0])]), Err(ReportError::NotPartition(2)));
        assert_eq!(stratified_mean(&t, &[("a".into(), vec![0, 1, 1])]), Err(ReportError::NotPartition(2)));
    }

    #[test]
    fn class_linked_feature_separates_strata() {
        let mut spec = desk_asthma(3000, 21);
        spec.truth.insert("atopy.class".into(), 2.0);
        let sim = simulate_cohort(&spec).unwrap();
        let draws = draws_of(&sim.layout, std::slice::from_ref(&sim.theta));
        let t = membership_posterior(&draws, &sim.cohort, &sim.layout, 0.95, true).unwrap();
        let k = sim.cohort.num_binary();
        let (with, without): (Vec<usize>, Vec<usize>) = (0..sim.cohort.len()).partition(|&i| sim.cohort.w[i * k + 1] == 1);
        let rows = stratified_mean(&t, &[("1".into(), with), ("0".into(), without)]).unwrap();
        assert!(rows[0].mean - rows[1].mean > 0.2, "{rows:?}");
    }

    #[test]
    fn rule_examples() {
        use Indicator::*;
        assert_eq!(rule_based_t2(Missing, Pos, false), RuleLabel::Positive);
        assert_eq!(rule_based_t2(Neg, Missing, false), RuleLabel::Negative);
        assert_eq!(rule_based_t2(Missing, Missing, false), RuleLabel::Indeterminate);
        assert_eq!(rule_based_t2(Neg, Neg, true), RuleLabel::Positive);
        assert_eq!(Indicator::parse("present"), Pos);
        assert_eq!(Indicator::parse(""), Missing);
    }

    #[test]
    fn concordance_tables() {
        let rules = [RuleLabel::Positive, RuleLabel::Negative, RuleLabel::Positive, RuleLabel::Indeterminate];
        let c = concordance(&rules, &[1, 0, 1, 0]).unwrap();
        assert_eq!(c.counts, [[0, 2], [1, 0], [1, 0]]);
        let c = concordance(&rules, &[0, 0, 0, 0]).unwrap();
        assert!(c.counts.iter().all(|r| r[1] == 0));
        assert_eq!(c.percent(0, 0), 100.0);
        assert!(concordance(&rules, &[0]).is_err());
    }

    #[test]
    fn auc_and_correlation_oracles() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]), 0.5);
        assert_eq!(auc(&[0.9, 0.1, 0.4], &[0, 1, 1]), 0.0);
        assert_eq!(auc(&[0.3, 0.1, 0.4], &[0, 1, 1]), 0.5);
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn mean_is_mean_of_per_draw(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..20), 1..10)) {
            let s = rows[0].len();
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(s, 0.3); r }).collect();
            let t = table(rows.clone(), 0.95);
            for (i, r) in rows.iter().enumerate() {
                let m = r.iter().sum::<f64>() / s as f64;
                prop_assert!((t.mean[i] - m).abs() < 1e-12);
                prop_assert!(0.0 <= t.lower[i] && t.lower[i] <= t.upper[i] && t.upper[i] <= 1.0);
            }
        }

        #[test]
        fn classify_is_monotone_in_threshold(means in prop::collection::vec(0.0f64..1.0, 1..50), a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let t = table(means.iter().map(|m| vec![*m]).collect(), 0.95);
            let l_lo = classify(&t, lo).unwrap();
            let l_hi = classify(&t, hi).unwrap();
            prop_assert!(l_lo.iter().zip(&l_hi).all(|(x, y)| y <= x));
        }

        #[test]
        fn positive_input_is_never_indeterminate(p in 0usize..3, e in 0usize..3, icd: bool) {
            let ind = [Indicator::Pos, Indicator::Neg, Indicator::Missing];
            let label = rule_based_t2(ind[p], ind[e], icd);
            if p == 0 || e == 0 || icd {
                prop_assert_eq!(label, RuleLabel::Positive);
            }
        }
    }
}
