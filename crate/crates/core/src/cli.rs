//! Command-line front end. Every subcommand reads files, writes into `--out`
//! and leaves a run manifest there.
//!
//! Exit codes: 0 success, 1 file or runtime error, 2 usage, 3 failed
//! convergence verdict.

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{sha256_hex, validate_config, ModelConfig};
use crate::diagnostics::{summarize, write_traces, Verdict};
use crate::elicit::{handle_request, ElicitRequest};
use crate::ingest::{load_cohort, LoadOptions, RawTable};
use crate::layout::build_layout;
use crate::model::Model;
use crate::report::{
    classify, concordance, density_histogram, membership_posterior, rule_based_t2, stratified_mean, write_strata_csv, Indicator,
    DEFAULT_BINS,
};
use crate::sampler::{run_chains, Draws, SamplerSettings};
use crate::simulate::{desk_asthma, simulate_cohort, SimulationSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIAGNOSTIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "priorlca", version, about = "Prior-guided two-class latent class models for incomplete patient tables")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn elicitation requests (JSON object or array) into priors.
    Elicit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a synthetic cohort with known parameters.
    Simulate {
        /// SimulationSpec JSON; the desk-asthma preset when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = ",", value_parser = parse_delimiter)]
        delimiter: u8,
    },
    /// Sample the posterior.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        keep: Option<usize>,
        #[arg(long, default_value_t = 0.8)]
        target_accept: f64,
        #[arg(long, default_value_t = 10)]
        max_depth: usize,
    },
    /// Convergence summary of a fit directory; exits 3 on a failing verdict.
    Diagnose {
        #[arg(long)]
        draws: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Posterior membership, labels, density and strata.
    Classify {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        draws: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
    /// Cross-tabulate model labels against the rule-based comparator.
    Compare {
        /// membership.csv from `classify`.
        #[arg(long)]
        membership: PathBuf,
        /// Table with id, pst, eos_high and allergic_icd columns.
        #[arg(long)]
        rules: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = ",", value_parser = parse_delimiter)]
        delimiter: u8,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long, default_value = ",", value_parser = parse_delimiter)]
    delimiter: u8,
    #[arg(long, default_value = "id")]
    id_column: String,
    /// Drop rows with missing covariates instead of failing.
    #[arg(long)]
    drop_incomplete_covariates: bool,
}

fn parse_delimiter(s: &str) -> Result<u8, String> {
    match s {
        "tab" | "\\t" | "\t" => Ok(b'\t'),
        _ if s.len() == 1 && s.is_ascii() => Ok(s.as_bytes()[0]),
        _ => Err(format!("delimiter must be a single ASCII character or 'tab', got {s:?}")),
    }
}

#[derive(Debug)]
enum CliError {
    Io(String),
    Usage(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Io(_) => EXIT_IO,
            CliError::Usage(_) => EXIT_USAGE,
        }
    }
}

fn io<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Io(format!("{context}: {e}"))
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_hash: Option<String>,
    inputs: Vec<InputDigest>,
    seed: Option<u64>,
    versions: BTreeMap<String, String>,
    wall_clock_seconds: f64,
}

struct Run {
    command: &'static str,
    config_hash: Option<String>,
    inputs: Vec<InputDigest>,
    seed: Option<u64>,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Run { command, config_hash: None, inputs: Vec::new(), seed: None }
    }

    /// Reads an input file and records its digest.
    fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(io(path.display()))?;
        self.inputs.push(InputDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(bytes)
    }

    fn read_text(&mut self, path: &Path) -> Result<String, CliError> {
        String::from_utf8(self.read(path)?).map_err(io(path.display()))
    }

    fn finish(self, out: &Path, started: Instant) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_hash: self.config_hash,
            inputs: self.inputs,
            seed: self.seed,
            versions: BTreeMap::from([("priorlca".to_string(), env!("CARGO_PKG_VERSION").to_string())]),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&out.join(format!("manifest-{}.json", self.command)), text.as_bytes())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(io(tmp.display()))?;
    fs::rename(&tmp, path).map_err(io(path.display()))
}

fn create_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io(out.display()))
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<fs::File>, CliError> {
    Ok(std::io::BufWriter::new(fs::File::create(path).map_err(io(path.display()))?))
}

fn load_config(run: &mut Run, path: &Path) -> Result<ModelConfig, CliError> {
    let text = run.read_text(path)?;
    let config = ModelConfig::from_json(&text).map_err(io(path.display()))?;
    let report = validate_config(&config);
    if !report.is_empty() {
        return Err(usage(format!("invalid config {}:\n{report}", path.display())));
    }
    run.config_hash = Some(config.hash_hex());
    Ok(config)
}

fn load_data(run: &mut Run, data: &DataArgs) -> Result<(ModelConfig, crate::cohort::Cohort), CliError> {
    let config = load_config(run, &data.config)?;
    let bytes = run.read(&data.cohort)?;
    let table = RawTable::read(bytes.as_slice(), data.delimiter).map_err(io(data.cohort.display()))?;
    let options = LoadOptions { id_column: data.id_column.clone(), drop_incomplete_covariates: data.drop_incomplete_covariates };
    let loaded = load_cohort(&table, &config, &options).map_err(io(data.cohort.display()))?;
    if !loaded.dropped_rows.is_empty() {
        eprintln!("dropped {} rows with missing covariates", loaded.dropped_rows.len());
    }
    Ok((config, loaded.cohort))
}

fn load_draws(run: &mut Run, dir: &Path) -> Result<Draws, CliError> {
    for name in ["draws.csv", "draws.meta.json"] {
        let p = dir.join(name);
        if p.exists() {
            run.read(&p)?;
        }
    }
    Draws::load(dir).map_err(io(dir.display()))
}

fn elicit(input: &Path, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let mut run = Run::new("elicit");
    let text = run.read_text(input)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(io(input.display()))?;
    let requests: Vec<ElicitRequest> = match value {
        serde_json::Value::Array(_) => serde_json::from_value(value),
        other => serde_json::from_value(other).map(|r| vec![r]),
    }
    .map_err(|e| usage(format!("{}: {e}", input.display())))?;
    let results = requests
        .iter()
        .map(handle_request)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(e.to_string()))?;
    create_out(out)?;
    let text = serde_json::to_string_pretty(&results).expect("json values serialize");
    fs::write(out.join("priors.json"), &text).map_err(io(out.join("priors.json").display()))?;
    println!("{text}");
    run.finish(out, started)
}

fn simulate(spec_path: Option<&Path>, n: Option<usize>, seed: u64, out: &Path, delimiter: u8) -> Result<(), CliError> {
    let started = Instant::now();
    let mut run = Run::new("simulate");
    run.seed = Some(seed);
    let mut spec = match spec_path {
        Some(p) => {
            let text = run.read_text(p)?;
            serde_json::from_str::<SimulationSpec>(&text).map_err(io(p.display()))?
        }
        None => desk_asthma(4000, seed),
    };
    spec.seed = seed;
    if let Some(n) = n {
        spec.n = n;
    }
    let report = validate_config(&spec.config);
    if !report.is_empty() {
        return Err(usage(format!("invalid simulation config:\n{report}")));
    }
    run.config_hash = Some(spec.config.hash_hex());
    let sim = simulate_cohort(&spec).map_err(|e| usage(e.to_string()))?;
    let table = sim.raw_table(&spec.config).map_err(|e| usage(e.to_string()))?;
    create_out(out)?;
    let path = out.join("cohort.csv");
    table.write(create_file(&path)?, delimiter).map_err(io(path.display()))?;
    let path = out.join("truth.json");
    sim.write_truth(seed, create_file(&path)?).map_err(io(path.display()))?;
    let path = out.join("config.json");
    fs::write(&path, spec.config.to_json()).map_err(io(path.display()))?;
    eprintln!("simulated {} records ({} in class 1)", spec.n, sim.classes.iter().filter(|&&d| d == 1).count());
    run.finish(out, started)
}

#[allow(clippy::too_many_arguments)]
fn fit(
    data: &DataArgs,
    out: &Path,
    seed: u64,
    chains: Option<usize>,
    warmup: Option<usize>,
    keep: Option<usize>,
    target_accept: f64,
    max_depth: usize,
) -> Result<(), CliError> {
    let started = Instant::now();
    let mut run = Run::new("fit");
    run.seed = Some(seed);
    let (config, cohort) = load_data(&mut run, data)?;
    let model = Model::new(&config, &cohort).map_err(|e| usage(e.to_string()))?;
    for w in model.warnings() {
        eprintln!("warning: {w}");
    }
    let defaults = &config.sampler_defaults;
    let settings = SamplerSettings {
        chains: chains.unwrap_or(defaults.chains),
        warmup: warmup.unwrap_or(defaults.warmup),
        keep: keep.unwrap_or(defaults.keep),
        target_accept,
        max_depth,
        seed,
        ..SamplerSettings::default()
    };
    settings.validate().map_err(|e| usage(e.to_string()))?;
    let mut draws = run_chains(&model, &settings).map_err(|e| CliError::Io(format!("sampling failed: {e}")))?;
    draws.meta.config_hash = run.config_hash.clone();
    create_out(out)?;
    draws.save(out).map_err(io(out.display()))?;
    let divergent = draws.divergent.iter().filter(|d| **d).count();
    if divergent > 0 {
        eprintln!("warning: {divergent} divergent transitions after warmup");
    }
    run.finish(out, started)
}

fn diagnose(draws_dir: &Path, out: &Path) -> Result<Verdict, CliError> {
    let started = Instant::now();
    let mut run = Run::new("diagnose");
    let draws = load_draws(&mut run, draws_dir)?;
    run.config_hash = draws.meta.config_hash.clone();
    let table = summarize(&draws);
    create_out(out)?;
    let path = out.join("summary.csv");
    table.write_csv(create_file(&path)?).map_err(io(path.display()))?;
    write_traces(&draws, out).map_err(io(out.join("trace").display()))?;
    println!("verdict: {}", table.verdict);
    if !table.offending.is_empty() {
        println!("offending parameters: {}", table.offending.join(", "));
    }
    run.finish(out, started)?;
    Ok(table.verdict)
}

#[allow(clippy::too_many_arguments)]
fn classify_cmd(data: &DataArgs, draws_dir: &Path, out: &Path, threshold: f64, level: f64, bins: usize) -> Result<(), CliError> {
    let started = Instant::now();
    let mut run = Run::new("classify");
    let (config, cohort) = load_data(&mut run, data)?;
    let draws = load_draws(&mut run, draws_dir)?;
    if let (Some(drawn), Some(now)) = (&draws.meta.config_hash, &run.config_hash) {
        if drawn != now {
            return Err(usage(format!("draws were fitted with config {drawn}, but {} hashes to {now}", data.config.display())));
        }
    }
    let layout = build_layout(&config).map_err(|e| usage(e.to_string()))?;
    let table = membership_posterior(&draws, &cohort, &layout, level, true).map_err(|e| usage(e.to_string()))?;
    let labels = classify(&table, threshold).map_err(|e| usage(e.to_string()))?;
    let hist = density_histogram(&table.mean, bins);

    let mut strata = vec![("all".to_string(), stratified_mean(&table, &[("all".into(), (0..cohort.len()).collect())]))];
    let k = cohort.num_binary();
    for (fk, name) in cohort.binary_names.iter().enumerate() {
        let (present, absent): (Vec<usize>, Vec<usize>) = (0..cohort.len()).partition(|&i| cohort.w[i * k + fk] == 1);
        strata.push((name.clone(), stratified_mean(&table, &[("1".into(), present), ("0".into(), absent)])));
    }
    let strata = strata
        .into_iter()
        .map(|(n, r)| r.map(|rows| (n, rows)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(e.to_string()))?;

    create_out(out)?;
    let path = out.join("membership.csv");
    table.write_csv(&labels, create_file(&path)?).map_err(io(path.display()))?;
    let path = out.join("density.csv");
    hist.write_csv(create_file(&path)?).map_err(io(path.display()))?;
    let path = out.join("density.svg");
    fs::write(&path, hist.to_svg()).map_err(io(path.display()))?;
    let path = out.join("strata.csv");
    write_strata_csv(&strata, create_file(&path)?).map_err(io(path.display()))?;
    let ones = labels.iter().filter(|&&l| l == 1).count();
    println!("{ones} of {} records labelled 1 at threshold {threshold}", labels.len());
    run.finish(out, started)
}

fn compare(membership: &Path, rules: &Path, out: &Path, delimiter: u8) -> Result<(), CliError> {
    let started = Instant::now();
    let mut run = Run::new("compare");
    let bytes = run.read(membership)?;
    let members = RawTable::read(bytes.as_slice(), b',').map_err(io(membership.display()))?;
    let bytes = run.read(rules)?;
    let rule_table = RawTable::read(bytes.as_slice(), delimiter).map_err(io(rules.display()))?;

    let col = |t: &RawTable, name: &str, path: &Path| t.column_index(name).map_err(io(path.display()));
    let (m_id, m_label) = (col(&members, "id", membership)?, col(&members, "label", membership)?);
    let r_id = col(&rule_table, "id", rules)?;
    let r_cols = [col(&rule_table, "pst", rules)?, col(&rule_table, "eos_high", rules)?, col(&rule_table, "allergic_icd", rules)?];

    let text = |c: &crate::ingest::Cell| match c {
        crate::ingest::Cell::Number(v) => format!("{v}"),
        crate::ingest::Cell::Text(s) => s.clone(),
        crate::ingest::Cell::Missing => String::new(),
    };
    let mut by_id = BTreeMap::new();
    for row in &rule_table.rows {
        let ind: Vec<Indicator> = r_cols.iter().map(|&c| Indicator::parse(&text(&row[c]))).collect();
        let label = rule_based_t2(ind[0], ind[1], ind[2] == Indicator::Pos);
        by_id.insert(text(&row[r_id]), label);
    }
    let mut rule_labels = Vec::with_capacity(members.rows.len());
    let mut model_labels = Vec::with_capacity(members.rows.len());
    for row in &members.rows {
        let id = text(&row[m_id]);
        let rule = by_id.get(&id).ok_or_else(|| CliError::Io(format!("{}: no rule inputs for id {id}", rules.display())))?;
        rule_labels.push(*rule);
        model_labels.push(u8::from(text(&row[m_label]) == "1"));
    }
    let table = concordance(&rule_labels, &model_labels).map_err(|e| usage(e.to_string()))?;
    create_out(out)?;
    let path = out.join("concordance.csv");
    table.write_csv(create_file(&path)?).map_err(io(path.display()))?;
    run.finish(out, started)
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Elicit { input, out } => elicit(&input, &out)?,
        Command::Simulate { spec, n, seed, out, delimiter } => simulate(spec.as_deref(), n, seed, &out, delimiter)?,
        Command::Fit { data, out, seed, chains, warmup, keep, target_accept, max_depth } => {
            fit(&data, &out, seed, chains, warmup, keep, target_accept, max_depth)?
        }
        Command::Diagnose { draws, out } => {
            if diagnose(&draws, &out)? == Verdict::Fail {
                return Ok(EXIT_DIAGNOSTIC);
            }
        }
        Command::Classify { data, draws, out, threshold, level, bins } => {
            classify_cmd(&data, &draws, &out, threshold, level, bins)?
        }
        Command::Compare { membership, rules, out, delimiter } => compare(&membership, &rules, &out, delimiter)?,
    }
    Ok(EXIT_OK)
}

/// Parses arguments, runs one subcommand and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let pool = match cli.workers {
        Some(0) => {
            eprintln!("error: --workers must be at least 1");
            return EXIT_USAGE;
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_IO;
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(code) => code,
        Err(e) => {
            match &e {
                CliError::Io(m) | CliError::Usage(m) => eprintln!("error: {m}"),
            }
            e.code()
        }
    }
}
