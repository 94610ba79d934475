//! Acceptance suite. Each criterion prints one `criterion N: PASS|FAIL` line
//! with the measured quantities and then asserts.

use std::process::Command;
use std::sync::LazyLock;

use priorlca::cohort::{Cohort, StandardizationStats};
use priorlca::config::{
    BinaryFeatureSpec, ClassEffectPrior, ContinuousFeatureSpec, CovariateSpec, MissingnessPrior, ModelConfig, PriorList,
    PriorSpec, RegressionPrior, SamplerDefaults, Transform,
};
use priorlca::diagnostics::{ess_basic, ess_bulk, rank_normalized_rhat, split_rhat};
use priorlca::elicit::{contingency_from_margins, logit_range_prior, threshold_normal_prior};
use priorlca::layout::build_layout;
use priorlca::model::{constrain, responsibility, unconstrain, Model};
use priorlca::report::{auc, membership_posterior, pearson, rule_based_t2, Indicator, RuleLabel};
use priorlca::sampler::{run_chains, Draws, SamplerSettings};
use priorlca::simulate::{desk_asthma, desk_asthma_config, simulate_cohort, Simulation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// Criterion 1
const TABLE_PCT_TOL: f64 = 0.1;
const THRESHOLD_CENTER_TOL: f64 = 0.005;
const PST_ROUNDED_TOL: f64 = 0.11;
/// Three-decimal bounds; -3.750 is the logit of 0.02298, not of 0.023.
const PST_PRINTED_TOL: f64 = 2e-3;
// Criterion 2
const LIKELIHOOD_REL_TOL: f64 = 1e-10;
// Criterion 3
const GRADIENT_REL_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
// Criterion 4
const ROUND_TRIP_TOL: f64 = 1e-12;
const LOG_JACOBIAN_TOL: f64 = 1e-8;
// Criterion 5
const MCSE_MULTIPLE: f64 = 3.0;
const VARIANCE_REL_TOL: f64 = 0.10;
const STRICT_RHAT: f64 = 1.01;
const MIN_REL_ESS: f64 = 0.10;
// Criterion 6
const RECOVERY_SIM_SEED: u64 = 101;
const RECOVERY_FIT_SEED: u64 = 101;
const RECOVERY_N: usize = 4000;
const MIN_COVERAGE: f64 = 0.90;
const RECOVERY_RHAT: f64 = 1.05;
// Criterion 7
const MIN_ORACLE_CORRELATION: f64 = 0.95;
const MIN_AUC: f64 = 0.85;
const MAX_MID_FRACTION: f64 = 0.30;
// Criterion 8
const REPLICATIONS: u64 = 100;
const MIN_IID_PASSES: usize = 95;
const SHIFTED_RHAT: f64 = 1.5;
const AR1_REL_TOL: f64 = 0.25;

fn report(n: u32, ok: bool, detail: String) {
    println!("criterion {n}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
}

fn normal(m: f64, s: f64) -> PriorSpec {
    PriorSpec::normal(m, s)
}

fn config(m: usize, j: usize, k: usize) -> ModelConfig {
    ModelConfig {
        covariates: (0..m).map(|i| CovariateSpec::numeric(format!("x{i}"), false)).collect(),
        continuous_features: (0..j)
            .map(|i| ContinuousFeatureSpec {
                name: format!("y{i}"),
                transform: Transform::None,
                standardize: false,
                zero_as_missing: false,
                rate_denominator: None,
                outcome_prior: ClassEffectPrior { intercept: normal(0.0, 1.0), class_effect: normal(0.0, 1.0) },
                scale_prior: PriorSpec::truncated(1.0, 1.0, Some(0.0.into()), None),
                missingness_prior: MissingnessPrior {
                    intercept: normal(0.0, 1.0),
                    covariates: PriorList::Shared(normal(0.0, 1.0)),
                    class_effect: normal(0.0, 1.0),
                },
            })
            .collect(),
        binary_features: (0..k)
            .map(|i| BinaryFeatureSpec {
                name: format!("w{i}"),
                prior: ClassEffectPrior { intercept: normal(0.0, 1.0), class_effect: normal(0.0, 1.0) },
                code_list: None,
            })
            .collect(),
        latent_prior: RegressionPrior { intercept: normal(0.0, 1.0), covariates: PriorList::Shared(normal(0.0, 1.0)) },
        sampler_defaults: SamplerDefaults::default(),
    }
}

fn random_cohort(cfg: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Cohort {
    let m = cfg.covariate_columns().len();
    let (j, k) = (cfg.continuous_features.len(), cfg.binary_features.len());
    let x = (0..n * m).map(|_| rng.random_range(-2.0..2.0)).collect();
    let r: Vec<u8> = (0..n * j).map(|_| u8::from(rng.random_bool(0.6))).collect();
    let y = r.iter().map(|&o| if o == 1 { rng.random_range(-2.5..2.5) } else { f64::NAN }).collect();
    let w = (0..n * k).map(|_| u8::from(rng.random_bool(0.5))).collect();
    Cohort::new(
        (0..n).map(|i| i.to_string()).collect(),
        cfg.covariate_columns(),
        cfg.continuous_features.iter().map(|f| f.name.clone()).collect(),
        cfg.binary_features.iter().map(|f| f.name.clone()).collect(),
        x,
        y,
        r,
        w,
        vec![StandardizationStats::identity(); j],
        vec![None; m],
    )
    .unwrap()
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Data likelihood summed over both classes in probability space, with
/// parameters looked up by name.
fn probability_space_loglik(cfg: &ModelConfig, theta: &[f64], cohort: &Cohort) -> f64 {
    let layout = build_layout(cfg).unwrap();
    let p = |name: String| theta[layout.index_of(&name).unwrap()];
    let cols = cfg.covariate_columns();
    let mut total = 0.0;
    for i in 0..cohort.len() {
        let rec = cohort.record(i);
        let mut lik = 0.0;
        for d in [0.0, 1.0] {
            let eta_d = p("latent.intercept".into()) + cols.iter().enumerate().map(|(c, n)| p(format!("latent.{n}")) * rec.x[c]).sum::<f64>();
            let mut prob = if d == 1.0 { logistic(eta_d) } else { 1.0 - logistic(eta_d) };
            for (fj, f) in cfg.continuous_features.iter().enumerate() {
                let name = &f.name;
                let eta_r = p(format!("{name}.miss.intercept"))
                    + cols.iter().enumerate().map(|(c, n)| p(format!("{name}.miss.{n}")) * rec.x[c]).sum::<f64>()
                    + p(format!("{name}.miss.class")) * d;
                let pr = logistic(eta_r);
                if rec.r[fj] == 1 {
                    let mu = p(format!("{name}.intercept")) + p(format!("{name}.class")) * d;
                    let s = p(format!("{name}.sigma"));
                    let z = (rec.y[fj] - mu) / s;
                    prob *= pr * (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
                } else {
                    prob *= 1.0 - pr;
                }
            }
            for (fk, f) in cfg.binary_features.iter().enumerate() {
                let pw = logistic(p(format!("{}.intercept", f.name)) + p(format!("{}.class", f.name)) * d);
                prob *= if rec.w[fk] == 1 { pw } else { 1.0 - pw };
            }
            lik += prob;
        }
        total += lik.ln();
    }
    total
}

#[test]
fn criterion_01_elicitation_constants() {
    let t = contingency_from_margins(0.528, 0.80, 0.70).unwrap();
    let cells = [(t.tp, 42.3), (t.fp, 10.6), (t.tn, 33.0), (t.fn_, 14.1)];
    let table_err = cells.iter().map(|(c, pct)| (100.0 * c - pct).abs()).fold(0.0, f64::max);
    let prevalence_ok = (100.0 * t.prevalence() - 56.4).abs() < 1e-9;

    let (b0, b1) = threshold_normal_prior(0.0255, 0.75, 0.76, 0.5, "eos.intercept").unwrap();
    let b0_center = b0.mean.constant;
    // Class-1 mean center is b0 + b1; the linked b1 mean carries -b0.
    let sum_center = b1.mean.constant;
    let threshold_ok = (b0_center + 0.68).abs() <= THRESHOLD_CENTER_TOL && (sum_center - 0.70).abs() <= THRESHOLD_CENTER_TOL;

    let (p0, p1) = logit_range_prior((0.023, 0.0375), (0.99, 1.0), 0.5, "pst.intercept").unwrap();
    let b = |s: &PriorSpec| (s.lower.as_ref().unwrap().constant, s.upper.as_ref().unwrap().constant);
    let ((l0, h0), (l1, h1)) = (b(&p0), b(&p1));
    let pst_ok = (l0 + 9.2).abs() < PST_ROUNDED_TOL
        && (h0 + 4.5).abs() < PST_ROUNDED_TOL
        && (l1 + 3.750).abs() <= PST_PRINTED_TOL
        && (h1 + 3.245).abs() <= PST_PRINTED_TOL;

    let ok = table_err <= TABLE_PCT_TOL && prevalence_ok && threshold_ok && pst_ok;
    report(
        1,
        ok,
        format!(
            "max cell error {table_err:.4} pts, prevalence {:.4}, b0 {b0_center:.4}, b0+b1 {sum_center:.4}, PST b0 ({l0:.4}, {h0:.4}) b0+b1 ({l1:.4}, {h1:.4})",
            t.prevalence()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_02_likelihood_oracle() {
    let shapes = [(1, 1, 2), (2, 1, 1), (0, 2, 1), (1, 1, 1), (0, 1, 3), (1, 0, 4)];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for inst in 0..100 {
        let (m, j, k) = shapes[inst % shapes.len()];
        let cfg = config(m, j, k);
        let layout = build_layout(&cfg).unwrap();
        assert!(layout.dim() <= 15);
        let n = rng.random_range(1..=3);
        let cohort = random_cohort(&cfg, n, &mut rng);
        let u: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (theta, _) = constrain(&layout, &u).unwrap();
        let model = Model::new(&cfg, &cohort).unwrap();
        let got = model.data_loglik(&theta).unwrap();
        let want = probability_space_loglik(&cfg, &theta, &cohort);
        worst = worst.max((got - want).abs() / want.abs().max(f64::MIN_POSITIVE));
    }
    let ok = worst < LIKELIHOOD_REL_TOL;
    report(2, ok, format!("100 instances, max relative error {worst:.3e}"));
    assert!(ok);
}

/// Desk-asthma config with a threshold-elicited (linked mean) prior on eos.
fn linked_desk_config() -> ModelConfig {
    let mut cfg = desk_asthma_config();
    let (b0, b1) = threshold_normal_prior(0.3, 0.75, 0.76, 0.5, "eos.intercept").unwrap();
    cfg.continuous_features[0].outcome_prior = ClassEffectPrior { intercept: b0, class_effect: b1 };
    cfg
}

#[test]
fn criterion_03_gradient_check() {
    let cfg = linked_desk_config();
    let mut spec = desk_asthma(20, 3);
    spec.config = cfg.clone();
    let sim = simulate_cohort(&spec).unwrap();
    let model = Model::new(&cfg, &sim.cohort).unwrap();
    let layout = model.layout();
    let has_linked = layout.slots().iter().any(|s| !s.mean.terms.is_empty());
    assert!(has_linked);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let u: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut grad = vec![0.0; model.dim()];
        model.log_posterior_and_grad(&u, &mut grad).unwrap();
        for i in 0..model.dim() {
            let (mut up, mut dn) = (u.clone(), u.clone());
            up[i] += FD_STEP;
            dn[i] -= FD_STEP;
            let fd = (model.log_posterior(&up).unwrap() - model.log_posterior(&dn).unwrap()) / (2.0 * FD_STEP);
            worst = worst.max((grad[i] - fd).abs() / fd.abs().max(1.0));
        }
    }
    let ok = worst < GRADIENT_REL_TOL;
    report(3, ok, format!("25 points x {} coordinates, max relative error {worst:.3e}", model.dim()));
    assert!(ok);
}

#[test]
fn criterion_04_transforms() {
    let cfg = linked_desk_config();
    let layout = build_layout(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut round_trip, mut jac_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let u: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (theta, log_j) = constrain(&layout, &u).unwrap();
        let back = unconstrain(&layout, &theta).unwrap();
        let (theta2, _) = constrain(&layout, &back).unwrap();
        for i in 0..u.len() {
            round_trip = round_trip.max((back[i] - u[i]).abs()).max((theta2[i] - theta[i]).abs());
        }
        // Bounds only depend on earlier slots, so the Jacobian is triangular
        // and its log-determinant is the sum of 1-D slice slopes.
        let mut numeric = 0.0;
        for i in 0..u.len() {
            let h = 1e-5;
            let (mut up, mut dn) = (u.clone(), u.clone());
            up[i] += h;
            dn[i] -= h;
            let slope = (constrain(&layout, &up).unwrap().0[i] - constrain(&layout, &dn).unwrap().0[i]) / (2.0 * h);
            numeric += slope.abs().ln();
        }
        jac_err = jac_err.max((numeric - log_j).abs());
    }
    let ok = round_trip < ROUND_TRIP_TOL && jac_err < LOG_JACOBIAN_TOL;
    report(4, ok, format!("max round-trip error {round_trip:.3e}, max log-Jacobian error {jac_err:.3e}"));
    assert!(ok);
}

#[test]
fn criterion_05_sampler_on_standard_normal() {
    // Intercept-only latent model with two binary features, unit normal
    // priors and no records: the posterior is a 5-D standard normal.
    let cfg = config(0, 0, 2);
    let cohort = Cohort::new(vec![], vec![], vec![], vec!["w0".into(), "w1".into()], vec![], vec![], vec![], vec![], vec![], vec![])
        .unwrap();
    let model = Model::new(&cfg, &cohort).unwrap();
    assert_eq!(model.dim(), 5);
    let start = std::time::Instant::now();
    let settings = SamplerSettings { chains: 4, warmup: 500, keep: 1000, seed: 5, ..SamplerSettings::default() };
    let draws = run_chains(&model, &settings).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let total = (draws.chains * draws.keep) as f64;
    let mut ok = elapsed < 60.0;
    let mut detail = Vec::new();
    for p in 0..5 {
        let chains = draws.param_chains(p);
        let all = chains.concat();
        let mean = all.iter().sum::<f64>() / total;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (total - 1.0);
        let mcse = (var / ess_basic(&chains).unwrap()).sqrt();
        let rhat = split_rhat(&chains).unwrap().max(rank_normalized_rhat(&chains).unwrap());
        let rel_ess = ess_bulk(&chains).unwrap() / total;
        ok &= mean.abs() < MCSE_MULTIPLE * mcse
            && (var - 1.0).abs() < VARIANCE_REL_TOL
            && rhat < STRICT_RHAT
            && rel_ess > MIN_REL_ESS;
        detail.push(format!("[{p}] mean {mean:+.3} (mcse {mcse:.3}) var {var:.3} rhat {rhat:.4} rel_ess {rel_ess:.2}"));
    }
    report(5, ok, format!("{:.1}s {}", elapsed, detail.join(" ")));
    assert!(ok);
}

struct RecoveryRun {
    sim: Simulation,
    draws: Draws,
    seconds: f64,
}

static RECOVERY: LazyLock<RecoveryRun> = LazyLock::new(|| {
    let sim = simulate_cohort(&desk_asthma(RECOVERY_N, RECOVERY_SIM_SEED)).unwrap();
    let config = desk_asthma_config();
    let model = Model::new(&config, &sim.cohort).unwrap();
    let settings = SamplerSettings { chains: 4, warmup: 500, keep: 1000, seed: RECOVERY_FIT_SEED, ..SamplerSettings::default() };
    let start = std::time::Instant::now();
    let draws = run_chains(&model, &settings).unwrap();
    RecoveryRun { sim, draws, seconds: start.elapsed().as_secs_f64() }
});

#[test]
fn criterion_06_parameter_recovery() {
    let run = &*RECOVERY;
    let d = &run.draws;
    let mut inside = 0;
    let mut worst_rhat: f64 = 0.0;
    let mut missed = Vec::new();
    for p in 0..d.dim() {
        let chains = d.param_chains(p);
        let mut all = chains.concat();
        all.sort_by(f64::total_cmp);
        let lo = priorlca::diagnostics::quantile_sorted(&all, 0.025);
        let hi = priorlca::diagnostics::quantile_sorted(&all, 0.975);
        let truth = run.sim.theta[p];
        if lo <= truth && truth <= hi {
            inside += 1;
        } else {
            missed.push(d.names[p].clone());
        }
        worst_rhat = worst_rhat.max(split_rhat(&chains).unwrap().max(rank_normalized_rhat(&chains).unwrap()));
    }
    let coverage = inside as f64 / d.dim() as f64;
    let ok = d.dim() == 28 && coverage >= MIN_COVERAGE && worst_rhat < RECOVERY_RHAT && run.seconds < 900.0;
    report(
        6,
        ok,
        format!(
            "{inside}/{} inside 95% intervals ({:.1}%), max R-hat {worst_rhat:.4}, fit {:.0}s, outside: {missed:?}",
            d.dim(),
            100.0 * coverage,
            run.seconds
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_07_membership_fidelity() {
    let run = &*RECOVERY;
    let sim = &run.sim;
    let table = membership_posterior(&run.draws, &sim.cohort, &sim.layout, 0.95, false).unwrap();
    let oracle: Vec<f64> =
        (0..sim.cohort.len()).map(|i| responsibility(&sim.layout, &sim.theta, &sim.cohort.record(i))).collect();
    let r = pearson(&table.mean, &oracle);
    let a = auc(&table.mean, &sim.classes);
    let mid = table.mean.iter().filter(|&&m| m > 0.2 && m < 0.8).count() as f64 / table.mean.len() as f64;
    let ok = r > MIN_ORACLE_CORRELATION && a > MIN_AUC && mid < MAX_MID_FRACTION;
    report(7, ok, format!("oracle correlation {r:.4}, AUC {a:.4}, fraction in (0.2, 0.8) {mid:.4}"));
    assert!(ok);
}

fn iid_chains(rng: &mut ChaCha8Rng, chains: usize, n: usize, shift: impl Fn(usize) -> f64) -> Vec<Vec<f64>> {
    (0..chains).map(|c| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) + shift(c)).collect()).collect()
}

#[test]
fn criterion_08_diagnostics_calibration() {
    let mut iid_pass = 0;
    let mut shifted_pass = 0;
    for seed in 0..REPLICATIONS {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let chains = iid_chains(&mut rng, 4, 1000, |_| 0.0);
        if split_rhat(&chains).unwrap().max(rank_normalized_rhat(&chains).unwrap()) < STRICT_RHAT {
            iid_pass += 1;
        }
        let shifted = iid_chains(&mut rng, 2, 1000, |c| 5.0 * c as f64);
        if split_rhat(&shifted).unwrap() > SHIFTED_RHAT {
            shifted_pass += 1;
        }
    }
    let phi: f64 = 0.9;
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let ar1: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let mut x: f64 = rng.sample(StandardNormal);
            (0..4000)
                .map(|_| {
                    x = phi * x + (1.0 - phi * phi).sqrt() * rng.sample::<f64, _>(StandardNormal);
                    x
                })
                .collect()
        })
        .collect();
    let analytic = 16000.0 * (1.0 - phi) / (1.0 + phi);
    let ess = ess_bulk(&ar1).unwrap();
    let ar_err = (ess / analytic - 1.0).abs();
    let ok = iid_pass >= MIN_IID_PASSES && shifted_pass == REPLICATIONS as usize && ar_err < AR1_REL_TOL;
    report(
        8,
        ok,
        format!(
            "iid R-hat < {STRICT_RHAT} in {iid_pass}/{REPLICATIONS}, shifted R-hat > {SHIFTED_RHAT} in {shifted_pass}/{REPLICATIONS}, AR(1) ESS {ess:.1} vs {analytic:.1} ({:.1}% off)",
            100.0 * ar_err
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_09_determinism() {
    let bin = env!("CARGO_BIN_EXE_priorlca");
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let status = Command::new(bin)
        .args(["simulate", "--seed", "91", "--n", "300", "--out"])
        .arg(root.join("sim"))
        .status()
        .unwrap();
    assert!(status.success());
    let fit = |name: &str, workers: &str| {
        let out = root.join(name);
        let status = Command::new(bin)
            .args(["--workers", workers, "fit", "--seed", "9", "--chains", "4", "--warmup", "150", "--keep", "100"])
            .arg("--config")
            .arg(root.join("sim/config.json"))
            .arg("--cohort")
            .arg(root.join("sim/cohort.csv"))
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(out.join("draws.csv")).unwrap()
    };
    let a = fit("a", "1");
    let b = fit("b", "1");
    let c = fit("c", "4");
    let ok = !a.is_empty() && a == b && a == c;
    report(9, ok, format!("draws.csv {} bytes; repeat identical {}; 1 vs 4 workers identical {}", a.len(), a == b, a == c));
    assert!(ok);
}

/// The comparator rule written out independently of the library.
fn literal_rule(pst: Indicator, eos: Indicator, icd: bool) -> RuleLabel {
    let any_positive = matches!(pst, Indicator::Pos) || matches!(eos, Indicator::Pos) || icd;
    let observed_negative = matches!(pst, Indicator::Neg) || matches!(eos, Indicator::Neg);
    if any_positive {
        RuleLabel::Positive
    } else if observed_negative && !icd {
        RuleLabel::Negative
    } else {
        RuleLabel::Indeterminate
    }
}

#[test]
fn criterion_10_rule_comparator() {
    let values = [Indicator::Pos, Indicator::Neg, Indicator::Missing];
    let mut checked = 0;
    let mut mismatches = Vec::new();
    let mut precedence_ok = true;
    for &pst in &values {
        for &eos in &values {
            for icd in [true, false] {
                let got = rule_based_t2(pst, eos, icd);
                if got != literal_rule(pst, eos, icd) {
                    mismatches.push(format!("{pst:?}/{eos:?}/{icd}"));
                }
                if (pst == Indicator::Pos || eos == Indicator::Pos || icd) && got != RuleLabel::Positive {
                    precedence_ok = false;
                }
                checked += 1;
            }
        }
    }
    let ok = checked == 18 && mismatches.is_empty() && precedence_ok;
    report(10, ok, format!("{checked} combinations, mismatches {mismatches:?}, positive precedence {precedence_ok}"));
    assert!(ok);
}
