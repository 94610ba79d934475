//! No-U-turn Hamiltonian Monte Carlo with multinomial trajectory sampling,
//! dual-averaging step size adaptation and a windowed diagonal metric.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::model::Model;
use crate::special::log_sum_exp2;

/// Energy error beyond which a transition is marked divergent.
pub const MAX_DELTA_H: f64 = 1000.0;
/// Uniform initialization half-width in unconstrained coordinates.
pub const INIT_RADIUS: f64 = 2.0;
pub const INIT_ATTEMPTS: usize = 100;

/// A differentiable log density in unconstrained coordinates.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Log density, writing the gradient into `grad`; `None` when not finite.
    fn log_density_and_grad(&self, u: &[f64], grad: &mut [f64]) -> Option<f64>;

    /// Model-scale values reported in the draws.
    fn constrain_point(&self, u: &[f64]) -> Vec<f64> {
        u.to_vec()
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("q{i}")).collect()
    }
}

impl LogDensity for Model<'_> {
    fn dim(&self) -> usize {
        Model::dim(self)
    }

    fn log_density_and_grad(&self, u: &[f64], grad: &mut [f64]) -> Option<f64> {
        self.log_posterior_and_grad(u, grad).ok()
    }

    fn constrain_point(&self, u: &[f64]) -> Vec<f64> {
        self.constrain(u).expect("finite sampler state").0
    }

    fn param_names(&self) -> Vec<String> {
        self.layout().names().to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub chains: usize,
    pub warmup: usize,
    pub keep: usize,
    pub target_accept: f64,
    pub max_depth: usize,
    pub seed: u64,
    /// Starting step size; the initialization heuristic still refines it
    /// unless `warmup` is 0.
    pub stepsize: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings { chains: 4, warmup: 200, keep: 1000, target_accept: 0.8, max_depth: 10, seed: 0, stepsize: 1.0 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler settings: {0}")]
    Settings(String),
    #[error("chain {chain}: no finite log density after {attempts} initial points")]
    Initialization { chain: usize, attempts: usize },
    #[error("chain {chain}: every warmup transition diverged (final step size {stepsize})")]
    AllDivergent { chain: usize, stepsize: f64 },
    #[error("chain {chain}: step size search failed ({stepsize})")]
    StepSize { chain: usize, stepsize: f64 },
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::Settings(m.into()));
        if self.chains < 1 {
            return bad("chains must be at least 1");
        }
        if self.keep < 1 {
            return bad("keep must be at least 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target acceptance must lie in (0, 1)");
        }
        if self.max_depth < 1 {
            return bad("max tree depth must be at least 1");
        }
        if !(self.stepsize > 0.0 && self.stepsize.is_finite()) {
            return bad("step size must be positive");
        }
        Ok(())
    }
}

/// Half-kick, drift, half-kick. `grad` holds the gradient at `q` on entry
/// and at the new position on return. Returns the new log density.
pub fn leapfrog<F>(q: &mut [f64], p: &mut [f64], grad: &mut [f64], eps: f64, inv_metric: &[f64], mut grad_fn: F) -> Option<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> Option<f64>,
{
    for (pi, gi) in p.iter_mut().zip(grad.iter()) {
        *pi += 0.5 * eps * gi;
    }
    for ((qi, pi), mi) in q.iter_mut().zip(p.iter()).zip(inv_metric) {
        *qi += eps * mi * pi;
    }
    let logp = grad_fn(q, grad);
    if logp.is_some() {
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi += 0.5 * eps * gi;
        }
    }
    logp
}

#[derive(Clone, Debug)]
struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    g: Vec<f64>,
    logp: f64,
}

/// Stan-style dual averaging of the log step size.
#[derive(Clone, Debug)]
struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, delta: f64) -> Self {
        DualAveraging { mu: (10.0 * eps).ln(), s_bar: 0.0, x_bar: 0.0, counter: 0.0, delta }
    }

    fn restart(&mut self, eps: f64) {
        *self = DualAveraging::new(eps, self.delta);
    }

    fn learn(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_stepsize(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Welford accumulator for per-coordinate variances.
#[derive(Clone, Debug)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford { n: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Sample variances shrunk toward 1e-3.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n;
        self.m2.iter().map(|m2| (n / (n + 5.0)) * (m2 / (n - 1.0)) + 1e-3 * (5.0 / (n + 5.0))).collect()
    }
}

/// Fast / slow / fast warmup schedule with doubling metric windows.
#[derive(Clone, Debug)]
struct Windows {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
}

impl Windows {
    fn new(warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base) = (75, 50, 25);
        if warmup < 20 {
            return Windows { warmup, init_buffer: warmup, term_buffer: 0, window_size: 0, next_window: usize::MAX, counter: 0 };
        }
        if init_buffer + base + term_buffer > warmup {
            init_buffer = (0.15 * warmup as f64) as usize;
            term_buffer = (0.1 * warmup as f64) as usize;
            base = warmup - (init_buffer + term_buffer);
        }
        Windows { warmup, init_buffer, term_buffer, window_size: base, next_window: init_buffer + base - 1, counter: 0 }
    }

    fn in_window(&self) -> bool {
        self.window_size > 0
            && self.counter >= self.init_buffer
            && self.counter < self.warmup - self.term_buffer
            && self.counter != self.warmup
    }

    fn end_of_window(&self) -> bool {
        self.window_size > 0 && self.counter == self.next_window && self.counter != self.warmup
    }

    fn advance(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= self.warmup - self.term_buffer {
            self.next_window = last;
        }
    }
}

struct Nuts<'t, T: LogDensity + ?Sized> {
    target: &'t T,
    inv_metric: Vec<f64>,
    eps: f64,
    max_depth: usize,
    rng: ChaCha8Rng,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

#[derive(Clone, Copy, Debug)]
struct Transition {
    accept_stat: f64,
    divergent: bool,
    depth: usize,
    energy: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

fn sum(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

impl<T: LogDensity + ?Sized> Nuts<'_, T> {
    fn hamiltonian(&self, z: &State) -> f64 {
        let kinetic: f64 = z.p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>() * 0.5;
        let h = -z.logp + kinetic;
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn sample_momentum(&mut self, z: &mut State) {
        for (pi, mi) in z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = self.rng.sample(StandardNormal);
            *pi = n / mi.sqrt();
        }
    }

    fn step(&self, z: &mut State, eps: f64) {
        let target = self.target;
        let logp = leapfrog(&mut z.q, &mut z.p, &mut z.g, eps, &self.inv_metric, |q, g| target.log_density_and_grad(q, g));
        z.logp = logp.unwrap_or(f64::NEG_INFINITY);
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut State,
        z_propose: &mut State,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut Vec<f64>,
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        h0: f64,
        sign: f64,
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            self.step(z, sign * self.eps);
            self.n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp2(*log_sum_weight, h0 - h);
            self.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = self.p_sharp(&z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            add_into(rho, &z.p);
            p_beg.clone_from(&z.p);
            p_end.clone_from(&z.p);
            return !self.divergent;
        }

        let dim = z.q.len();
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut p_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let mut lsw_init = f64::NEG_INFINITY;
        if !self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            sign,
            &mut lsw_init,
        ) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut p_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        let mut lsw_final = f64::NEG_INFINITY;
        if !self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            sign,
            &mut lsw_final,
        ) {
            return false;
        }

        let lsw_subtree = log_sum_exp2(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp2(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree = sum(&rho_init, &rho_final);
        add_into(rho, &rho_subtree);
        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &sum(&rho_init, &p_final_beg));
        persist &= criterion(&p_sharp_init_end, p_sharp_end, &sum(&rho_final, &p_init_end));
        persist
    }

    fn transition(&mut self, z: &mut State) -> Transition {
        self.sample_momentum(z);
        let dim = z.q.len();
        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let mut p_fwd_fwd = z.p.clone();
        let mut p_sharp_fwd_fwd = self.p_sharp(&z.p);
        let mut p_fwd_bck = z.p.clone();
        let mut p_sharp_fwd_bck = p_sharp_fwd_fwd.clone();
        let mut p_bck_fwd = z.p.clone();
        let mut p_sharp_bck_fwd = p_sharp_fwd_fwd.clone();
        let mut p_bck_bck = z.p.clone();
        let mut p_sharp_bck_bck = p_sharp_fwd_fwd.clone();

        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let h0 = self.hamiltonian(z);
        self.n_leapfrog = 0;
        self.sum_metro_prob = 0.0;
        self.divergent = false;
        let mut depth = 0;

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if self.rng.random::<f64>() > 0.5 {
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
                
                self.build_tree(
                    depth,
                    &mut z_fwd,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut lsw_subtree,
                )
            } else {
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
                self.build_tree(
                    depth,
                    &mut z_bck,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -1.0,
                    &mut lsw_subtree,
                )
            };
            if !valid {
                break;
            }
            depth += 1;

            if lsw_subtree > log_sum_weight {
                z_sample.clone_from(&z_propose);
            } else {
                let accept = (lsw_subtree - log_sum_weight).exp();
                if self.rng.random::<f64>() < accept {
                    z_sample.clone_from(&z_propose);
                }
            }
            log_sum_weight = log_sum_exp2(log_sum_weight, lsw_subtree);

            rho = sum(&rho_bck, &rho_fwd);
            let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            persist &= criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &sum(&rho_bck, &p_fwd_bck));
            persist &= criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &sum(&rho_fwd, &p_bck_fwd));
            if !persist {
                break;
            }
        }

        *z = z_sample;
        let accept_stat = if self.n_leapfrog > 0 { self.sum_metro_prob / self.n_leapfrog as f64 } else { 0.0 };
        Transition { accept_stat, divergent: self.divergent, depth, energy: self.hamiltonian(z) }
    }

    /// Doubles or halves the step size until one leapfrog step crosses an
    /// acceptance of 0.8.
    fn init_stepsize(&mut self, z: &State) -> Result<(), f64> {
        let mut probe = z.clone();
        self.sample_momentum(&mut probe);
        let h0 = self.hamiltonian(&probe);
        self.step(&mut probe, self.eps);
        let delta = h0 - self.hamiltonian(&probe);
        let direction = if delta > 0.8f64.ln() { 1.0 } else { -1.0 };
        for _ in 0..100 {
            let mut probe = z.clone();
            self.sample_momentum(&mut probe);
            let h0 = self.hamiltonian(&probe);
            self.step(&mut probe, self.eps);
            let delta = h0 - self.hamiltonian(&probe);
            if (direction > 0.0 && !(delta > 0.8f64.ln())) || (direction < 0.0 && !(delta < 0.8f64.ln())) {
                return Ok(());
            }
            self.eps = if direction > 0.0 { 2.0 * self.eps } else { 0.5 * self.eps };
            if self.eps > 1e7 || self.eps == 0.0 {
                return Err(self.eps);
            }
        }
        Ok(())
    }
}

/// Posterior draws on the model scale, chain-major `[chain][iteration][parameter]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub names: Vec<String>,
    pub chains: usize,
    pub keep: usize,
    pub values: Vec<f64>,
    pub accept_stat: Vec<f64>,
    pub divergent: Vec<bool>,
    pub tree_depth: Vec<usize>,
    pub energy: Vec<f64>,
    pub meta: DrawsMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawsMeta {
    pub seed: u64,
    /// RNG stream index used by each chain.
    pub chain_streams: Vec<u64>,
    pub settings: SamplerSettings,
    pub stepsizes: Vec<f64>,
    pub inv_metric: Vec<Vec<f64>>,
    pub config_hash: Option<String>,
    pub version: String,
}

#[derive(Debug, Error)]
pub enum DrawsIoError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed draws file: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed draws metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed draws file: {0}")]
    Format(String),
}

impl Draws {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    #[inline]
    pub fn get(&self, chain: usize, iter: usize, param: usize) -> f64 {
        self.values[(chain * self.keep + iter) * self.dim() + param]
    }

    pub fn point(&self, chain: usize, iter: usize) -> &[f64] {
        let d = self.dim();
        let start = (chain * self.keep + iter) * d;
        &self.values[start..start + d]
    }

    /// One vector per chain for parameter `param`.
    pub fn param_chains(&self, param: usize) -> Vec<Vec<f64>> {
        (0..self.chains).map(|c| (0..self.keep).map(|i| self.get(c, i, param)).collect()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DrawsIoError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["chain".to_string(), "iteration".to_string()];
        header.extend(self.names.iter().cloned());
        header.push("accept_stat".into());
        header.push("divergent".into());
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(header.len());
        for c in 0..self.chains {
            for i in 0..self.keep {
                row.clear();
                row.push((c + 1).to_string());
                row.push((i + 1).to_string());
                row.extend(self.point(c, i).iter().map(|v| format!("{v}")));
                let t = c * self.keep + i;
                row.push(format!("{}", self.accept_stat[t]));
                row.push(u8::from(self.divergent[t]).to_string());
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(|e| DrawsIoError::Io { path: "<draws>".into(), source: e })?;
        Ok(())
    }

    /// Writes `draws.csv` and `draws.meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DrawsIoError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| DrawsIoError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join("draws.csv");
        let file = fs::File::create(&path).map_err(io(&path))?;
        self.write_csv(std::io::BufWriter::new(file))?;
        let path = dir.join("draws.meta.json");
        fs::write(&path, serde_json::to_string_pretty(&self.meta)?).map_err(io(&path))?;
        Ok(())
    }

    /// Reads `draws.csv` and, when present, `draws.meta.json` from `dir`.
    pub fn load(dir: &Path) -> Result<Self, DrawsIoError> {
        let path = dir.join("draws.csv");
        let mut rdr = csv::Reader::from_path(&path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let nh = header.len();
        if nh < 4 || header[0] != "chain" || header[1] != "iteration" || header[nh - 2] != "accept_stat" || header[nh - 1] != "divergent" {
            return Err(DrawsIoError::Format("unexpected header".into()));
        }
        let names = header[2..nh - 2].to_vec();
        let num = |s: &str| s.parse::<f64>().map_err(|_| DrawsIoError::Format(format!("not a number: {s}")));
        let mut rows: Vec<(usize, usize, Vec<f64>, f64, bool)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let chain = num(&rec[0])? as usize;
            let iter = num(&rec[1])? as usize;
            let vals = (2..nh - 2).map(|i| num(&rec[i])).collect::<Result<Vec<_>, _>>()?;
            rows.push((chain, iter, vals, num(&rec[nh - 2])?, &rec[nh - 1] == "1"));
        }
        let chains = rows.iter().map(|r| r.0).max().unwrap_or(0);
        if chains == 0 || !rows.len().is_multiple_of(chains) {
            return Err(DrawsIoError::Format("ragged chains".into()));
        }
        let keep = rows.len() / chains;
        rows.sort_by_key(|r| (r.0, r.1));
        for (t, r) in rows.iter().enumerate() {
            if r.0 != t / keep + 1 || r.1 != t % keep + 1 {
                return Err(DrawsIoError::Format(format!("unexpected chain/iteration at row {}", t + 1)));
            }
        }
        let meta_path = dir.join("draws.meta.json");
        let meta = if meta_path.exists() {
            let text = fs::read_to_string(&meta_path)
                .map_err(|source| DrawsIoError::Io { path: meta_path.display().to_string(), source })?;
            serde_json::from_str(&text)?
        } else {
            DrawsMeta {
                seed: 0,
                chain_streams: (0..chains as u64).collect(),
                settings: SamplerSettings { chains, keep, ..SamplerSettings::default() },
                stepsizes: vec![],
                inv_metric: vec![],
                config_hash: None,
                version: String::new(),
            }
        };
        let n = rows.len();
        Ok(Draws {
            names,
            chains,
            keep,
            values: rows.iter().flat_map(|r| r.2.iter().copied()).collect(),
            accept_stat: rows.iter().map(|r| r.3).collect(),
            divergent: rows.iter().map(|r| r.4).collect(),
            tree_depth: vec![0; n],
            energy: vec![f64::NAN; n],
            meta,
        })
    }
}

struct ChainOutput {
    values: Vec<f64>,
    accept_stat: Vec<f64>,
    divergent: Vec<bool>,
    tree_depth: Vec<usize>,
    energy: Vec<f64>,
    stepsize: f64,
    inv_metric: Vec<f64>,
}

fn initial_state<T: LogDensity + ?Sized>(target: &T, rng: &mut ChaCha8Rng, chain: usize) -> Result<State, SamplerError> {
    let dim = target.dim();
    for _ in 0..INIT_ATTEMPTS {
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-INIT_RADIUS..INIT_RADIUS)).collect();
        let mut g = vec![0.0; dim];
        if let Some(logp) = target.log_density_and_grad(&q, &mut g) {
            if logp.is_finite() && g.iter().all(|v| v.is_finite()) {
                return Ok(State { q, p: vec![0.0; dim], g, logp });
            }
        }
    }
    Err(SamplerError::Initialization { chain, attempts: INIT_ATTEMPTS })
}

fn run_chain<T: LogDensity + ?Sized>(target: &T, settings: &SamplerSettings, chain: usize) -> Result<ChainOutput, SamplerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(chain as u64);
    let mut z = initial_state(target, &mut rng, chain)?;
    let dim = target.dim();
    let mut nuts = Nuts {
        target,
        inv_metric: vec![1.0; dim],
        eps: settings.stepsize,
        max_depth: settings.max_depth,
        rng,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };

    if settings.warmup > 0 {
        nuts.init_stepsize(&z).map_err(|stepsize| SamplerError::StepSize { chain, stepsize })?;
        let mut da = DualAveraging::new(nuts.eps, settings.target_accept);
        let mut windows = Windows::new(settings.warmup);
        let mut welford = Welford::new(dim);
        let mut divergences = 0;
        for _ in 0..settings.warmup {
            let t = nuts.transition(&mut z);
            divergences += usize::from(t.divergent);
            nuts.eps = da.learn(t.accept_stat);
            if windows.in_window() {
                welford.add(&z.q);
                if windows.end_of_window() {
                    windows.advance();
                    nuts.inv_metric = welford.regularized();
                    welford = Welford::new(dim);
                    nuts.init_stepsize(&z).map_err(|stepsize| SamplerError::StepSize { chain, stepsize })?;
                    da.restart(nuts.eps);
                }
            }
            windows.counter += 1;
        }
        if divergences == settings.warmup {
            return Err(SamplerError::AllDivergent { chain, stepsize: nuts.eps });
        }
        nuts.eps = da.final_stepsize();
    }

    let mut out = ChainOutput {
        values: Vec::with_capacity(settings.keep * dim),
        accept_stat: Vec::with_capacity(settings.keep),
        divergent: Vec::with_capacity(settings.keep),
        tree_depth: Vec::with_capacity(settings.keep),
        energy: Vec::with_capacity(settings.keep),
        stepsize: nuts.eps,
        inv_metric: nuts.inv_metric.clone(),
    };
    for _ in 0..settings.keep {
        let t = nuts.transition(&mut z);
        out.values.extend(target.constrain_point(&z.q));
        out.accept_stat.push(t.accept_stat);
        out.divergent.push(t.divergent);
        out.tree_depth.push(t.depth);
        out.energy.push(t.energy);
    }
    Ok(out)
}

/// Runs independent chains in parallel. Chain `c` draws from stream `c` of
/// a generator seeded with `settings.seed`.
pub fn run_chains<T: LogDensity + ?Sized>(target: &T, settings: &SamplerSettings) -> Result<Draws, SamplerError> {
    settings.validate()?;
    let outputs: Vec<Result<ChainOutput, SamplerError>> =
        (0..settings.chains).into_par_iter().map(|c| run_chain(target, settings, c)).collect();
    let outputs = outputs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut draws = Draws {
        names: target.param_names(),
        chains: settings.chains,
        keep: settings.keep,
        values: Vec::with_capacity(settings.chains * settings.keep * target.dim()),
        accept_stat: Vec::new(),
        divergent: Vec::new(),
        tree_depth: Vec::new(),
        energy: Vec::new(),
        meta: DrawsMeta {
            seed: settings.seed,
            chain_streams: (0..settings.chains as u64).collect(),
            settings: settings.clone(),
            stepsizes: outputs.iter().map(|o| o.stepsize).collect(),
            inv_metric: outputs.iter().map(|o| o.inv_metric.clone()).collect(),
            config_hash: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    };
    for o in outputs {
        draws.values.extend(o.values);
        draws.accept_stat.extend(o.accept_stat);
        draws.divergent.extend(o.divergent);
        draws.tree_depth.extend(o.tree_depth);
        draws.energy.extend(o.energy);
    }
    Ok(draws)
}
