//! Command-line entry points: `simulate`, `fit`, `convert`, `diagnose`
//! and `catalog`, plus config-file handling and run metadata.
//!
//! Exit codes: 0 success, 2 validation/parse, 3 runtime cap, 4 I/O.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::configsets::ConfigCatalog;
use crate::error::{Error, Result};
use crate::io;
use crate::lattice::{Boundary, LatticeSpec, NodeSet, TemplateClique};
use crate::likelihood::{gibbs_sample, LikelihoodEngine, DEFAULT_EXCHANGE_SWEEPS};
use crate::model::{CovariateField, EnergyEvaluator, ModelParams, PartitionState};
use crate::param::{beta_to_phi, conversion_table, independence_phi, ising_phi, phi_to_beta, PhiVector};
use crate::prior::{PartitionPrior, PriorConfig};
use crate::sampler::{Chain, ChainRecord, SamplerConfig};
use crate::stats::{beta_posterior, pair_matrix, posterior_predictive, StatisticId};

#[derive(Parser)]
#[command(name = "binmrf", version, about = "Bayesian binary Markov random fields with template cliques")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the configuration-class table for a template
    Catalog(CatalogArgs),
    /// Convert between potential (phi) and interaction (beta) vectors
    Convert(ConvertArgs),
    /// Simulate images from a named model or a phi vector
    Simulate(SimulateArgs),
    /// Sample the posterior over partition states for an observed image
    Fit(FitArgs),
    /// Summarise a posterior run: pair matrix, r histogram, beta
    /// posterior and posterior-predictive statistics
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct CatalogArgs {
    /// Template block, e.g. 2x2
    #[arg(long)]
    template: String,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    template: String,
    /// Torus size the conversion is defined on, e.g. 8x8
    #[arg(long)]
    size: String,
    /// Input representation: phi or beta
    #[arg(long)]
    from: String,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    template: String,
    #[arg(long)]
    size: String,
    #[arg(long, default_value = "torus")]
    boundary: String,
    /// Named model `ising(w)` or `independence(p)`; omit to use --phi
    #[arg(long)]
    model: Option<String>,
    /// Labelled phi vector file
    #[arg(long)]
    phi: Option<PathBuf>,
    /// Partition-state JSON document ({groups, values, theta})
    #[arg(long)]
    state: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    sweeps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    /// Output format: text or pbm
    #[arg(long, default_value = "text")]
    format: String,
    /// Covariate CSV to include in the simulation (columns i,j,y1..yK)
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Covariate coefficients, comma separated
    #[arg(long)]
    theta: Option<String>,
    /// Generate this many smooth synthetic covariates instead of reading
    /// a file; written next to the image as <output>.covariates.csv
    #[arg(long)]
    synth_covariates: Option<usize>,
    /// With --synth-covariates, also mask the lattice to an elliptical
    /// region (red-deer-style irregular data)
    #[arg(long, default_value_t = false)]
    synth_mask: bool,
}

#[derive(Args, Clone)]
struct FitArgs {
    /// Config file with `key = value` lines; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    boundary: Option<String>,
    /// Likelihood engine: brute, transfer, exchange, pseudo or prior-only
    #[arg(long)]
    engine: Option<String>,
    #[arg(long)]
    exchange_sweeps: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sigma_phi: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    covariate_step: Option<f64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    thinning: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tree_depth: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Mask grid (text 0/1) of observed nodes; free boundary only
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Initial state: single, split, or a path to a state JSON document
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    states: PathBuf,
    #[arg(long)]
    template: String,
    /// Lattice size of the run, e.g. 48x48 (beta conversion uses the
    /// torus table of this size)
    #[arg(long)]
    size: String,
    #[arg(long)]
    out: PathBuf,
    /// Burn-in fraction dropped from the state sequence
    #[arg(long, default_value_t = 0.2)]
    burn_in: f64,
    /// Central credibility mass for beta intervals
    #[arg(long, default_value_t = 0.95)]
    mass: f64,
    /// Posterior-predictive draws per retained state (0 disables)
    #[arg(long, default_value_t = 0)]
    ppc_draws: usize,
    #[arg(long, default_value_t = 100)]
    ppc_sweeps: usize,
    /// At most this many states feed the posterior-predictive pass
    #[arg(long, default_value_t = 200)]
    ppc_states: usize,
    #[arg(long, default_value = "torus")]
    boundary: String,
    #[arg(long)]
    covariates: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn parse_block(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != 2 {
        return Err(Error::parse(format!("expected KxL, got '{s}'")));
    }
    let k = parts[0]
        .trim()
        .parse()
        .map_err(|_| Error::parse(format!("bad dimension in '{s}'")))?;
    let l = parts[1]
        .trim()
        .parse()
        .map_err(|_| Error::parse(format!("bad dimension in '{s}'")))?;
    Ok((k, l))
}

fn build_catalog(template: &str) -> Result<Arc<ConfigCatalog>> {
    let (k, l) = parse_block(template)?;
    Ok(Arc::new(ConfigCatalog::build(TemplateClique::block(k, l)?)?))
}

/// Fully resolved run configuration: config-file keys, overridden by
/// flags, with documented defaults. Unknown file keys are rejected.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub template: String,
    pub boundary: String,
    pub engine: String,
    pub exchange_sweeps: usize,
    pub gamma: f64,
    pub sigma_phi: f64,
    pub sigma: f64,
    pub covariate_step: f64,
    pub iterations: u64,
    pub thinning: u64,
    pub seed: u64,
    pub tree_depth: usize,
    pub checkpoint_every: u64,
    pub covariates: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub init: String,
    pub out: PathBuf,
}

const FILE_KEYS: &[&str] = &[
    "data",
    "template",
    "boundary",
    "likelihood.engine",
    "likelihood.exchange_sweeps",
    "prior.gamma",
    "prior.sigma_phi",
    "sampler.sigma",
    "sampler.covariate_step",
    "sampler.iterations",
    "sampler.thinning",
    "sampler.seed",
    "sampler.tree_depth",
    "sampler.checkpoint_every",
    "covariates",
    "mask",
    "init",
    "out",
];

fn parse_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::parse(format!("config line {} is not 'key = value'", lineno + 1))
        })?;
        let key = key.trim().to_string();
        if !FILE_KEYS.contains(&key.as_str()) {
            return Err(Error::parse(format!("unknown config key '{key}'")));
        }
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::parse(format!("config key '{key}' repeated")));
        }
    }
    Ok(out)
}

/// Merges file values and flag overrides into a validated RunConfig.
/// Flags win; a conflict is logged to stderr.
fn parse_config(args: &FitArgs) -> Result<RunConfig> {
    let file = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => HashMap::new(),
    };
    fn pick<T: std::str::FromStr + PartialEq + std::fmt::Debug>(
        flag: &Option<T>,
        file: &HashMap<String, String>,
        key: &str,
        default: Option<T>,
    ) -> Result<T>
    where
        T: Clone,
    {
        let from_file = match file.get(key) {
            Some(raw) => Some(raw.parse::<T>().map_err(|_| {
                Error::parse(format!("config key '{key}' has invalid value '{raw}'"))
            })?),
            None => None,
        };
        if let Some(flag) = flag {
            if let Some(fv) = &from_file {
                if fv != flag {
                    eprintln!("note: flag overrides config key '{key}' ({fv:?} -> {flag:?})");
                }
            }
            return Ok(flag.clone());
        }
        from_file
            .or(default)
            .ok_or_else(|| Error::validation(format!("missing required option '{key}'")))
    }

    let config = RunConfig {
        data: pick(&args.data, &file, "data", None)?,
        template: pick(&args.template, &file, "template", Some("2x2".into()))?,
        boundary: pick(&args.boundary, &file, "boundary", Some("free".into()))?,
        engine: pick(&args.engine, &file, "likelihood.engine", Some("exchange".into()))?,
        exchange_sweeps: pick(
            &args.exchange_sweeps,
            &file,
            "likelihood.exchange_sweeps",
            Some(DEFAULT_EXCHANGE_SWEEPS),
        )?,
        gamma: pick(&args.gamma, &file, "prior.gamma", Some(0.5))?,
        sigma_phi: pick(&args.sigma_phi, &file, "prior.sigma_phi", Some(10.0))?,
        sigma: pick(&args.sigma, &file, "sampler.sigma", Some(0.3))?,
        covariate_step: pick(&args.covariate_step, &file, "sampler.covariate_step", Some(0.1))?,
        iterations: pick(&args.iterations, &file, "sampler.iterations", Some(20000))?,
        thinning: pick(&args.thinning, &file, "sampler.thinning", Some(1))?,
        seed: pick(&args.seed, &file, "sampler.seed", Some(0))?,
        tree_depth: pick(&args.tree_depth, &file, "sampler.tree_depth", Some(1))?,
        checkpoint_every: pick(
            &args.checkpoint_every,
            &file,
            "sampler.checkpoint_every",
            Some(0),
        )?,
        covariates: match (&args.covariates, file.get("covariates")) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(p)) => Some(PathBuf::from(p)),
            (None, None) => None,
        },
        mask: match (&args.mask, file.get("mask")) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(p)) => Some(PathBuf::from(p)),
            (None, None) => None,
        },
        init: pick(&args.init, &file, "init", Some("single".into()))?,
        out: pick(&args.out, &file, "out", None)?,
    };
    if !(0.0..=1.0).contains(&config.gamma) {
        return Err(Error::validation(format!(
            "prior.gamma must lie in [0,1], got {}",
            config.gamma
        )));
    }
    Ok(config)
}

fn parse_model(spec: &str, cat: &ConfigCatalog) -> Result<PhiVector> {
    let spec = spec.trim();
    let (name, rest) = spec
        .split_once('(')
        .ok_or_else(|| Error::parse(format!("bad model spec '{spec}', expected name(value)")))?;
    let value: f64 = rest
        .strip_suffix(')')
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::parse(format!("bad model parameter in '{spec}'")))?;
    match name.trim() {
        "ising" => ising_phi(value, cat),
        "independence" => independence_phi(value, cat),
        other => Err(Error::parse(format!("unknown model '{other}'"))),
    }
}

fn engine_from(config: &RunConfig) -> Result<LikelihoodEngine> {
    let engine: LikelihoodEngine = config.engine.parse()?;
    Ok(match engine {
        LikelihoodEngine::Exchange { .. } => LikelihoodEngine::Exchange {
            sweeps: config.exchange_sweeps,
        },
        other => other,
    })
}

fn run_catalog(args: &CatalogArgs) -> Result<()> {
    let cat = build_catalog(&args.template)?;
    let tpl = cat.template();
    println!("template {}x{} ({} nodes), {} configuration classes",
        tpl.height(), tpl.width(), tpl.size(), cat.class_count());
    println!("{:<4} {:<12} bitmap", "id", "multiplicity");
    for class in cat.classes() {
        let mut rows = vec![vec!['0'; tpl.width()]; tpl.height()];
        for &(i, j) in class.canonical.iter() {
            rows[i as usize][j as usize] = '1';
        }
        let bitmap: Vec<String> = rows.into_iter().map(|r| r.into_iter().collect()).collect();
        println!("{:<4} {:<12} {}", class.id, class.multiplicity(), bitmap.join("/"));
    }
    Ok(())
}

fn run_convert(args: &ConvertArgs) -> Result<()> {
    let cat = build_catalog(&args.template)?;
    let (n, m) = parse_block(&args.size)?;
    let spec = LatticeSpec::torus(n, m)?;
    let table = conversion_table(&spec, &cat)?;
    let values = match args.from.to_ascii_lowercase().as_str() {
        "phi" => {
            let phi = io::read_phi(&args.input, &cat)?;
            phi_to_beta(&phi, &cat, &table)?.values
        }
        "beta" => {
            let beta = io::read_beta(&args.input, &cat)?;
            beta_to_phi(&beta, &cat, &table)?.values
        }
        other => {
            return Err(Error::parse(format!(
                "--from must be 'phi' or 'beta', got '{other}'"
            )))
        }
    };
    io::write_labelled_vector(&args.output, &values)?;
    Ok(())
}

/// Smooth synthetic covariates: a few random cosine waves per covariate,
/// standardised to zero mean and unit variance over the region.
fn synth_covariates(
    spec: &LatticeSpec,
    k: usize,
    mask: Option<&[bool]>,
    rng: &mut impl Rng,
) -> CovariateField {
    let mut data = vec![0.0; spec.sites() * k];
    for c in 0..k {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        for i in 0..spec.n {
            for j in 0..spec.m {
                let (x, y) = (
                    i as f64 / spec.n as f64 * std::f64::consts::TAU,
                    j as f64 / spec.m as f64 * std::f64::consts::TAU,
                );
                let mut v = 0.0;
                for &(a, b, phase) in &waves {
                    v += (a * x + b * y + phase).cos();
                }
                data[spec.index(i, j) * k + c] = v;
            }
        }
        // standardise over the observed region
        let sites: Vec<usize> = (0..spec.sites())
            .filter(|&s| mask.map_or(true, |m| m[s]))
            .collect();
        let mean: f64 = sites.iter().map(|&s| data[s * k + c]).sum::<f64>() / sites.len() as f64;
        let var: f64 = sites
            .iter()
            .map(|&s| (data[s * k + c] - mean).powi(2))
            .sum::<f64>()
            / sites.len() as f64;
        let sd = var.sqrt().max(1e-12);
        for s in 0..spec.sites() {
            data[s * k + c] = (data[s * k + c] - mean) / sd;
        }
    }
    CovariateField::new(spec.n, spec.m, k, data).unwrap()
}

fn elliptical_mask(spec: &LatticeSpec) -> Vec<bool> {
    let (cy, cx) = ((spec.n - 1) as f64 / 2.0, (spec.m - 1) as f64 / 2.0);
    let (ry, rx) = (spec.n as f64 / 2.0, spec.m as f64 / 2.0);
    (0..spec.sites())
        .map(|s| {
            let (i, j) = (s / spec.m, s % spec.m);
            let dy = (i as f64 - cy) / ry;
            let dx = (j as f64 - cx) / rx;
            dy * dy + dx * dx <= 1.0
        })
        .collect()
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let cat = build_catalog(&args.template)?;
    let (n, m) = parse_block(&args.size)?;
    let boundary: Boundary = args.boundary.parse()?;
    let spec = LatticeSpec::new(n, m, boundary)?;

    let phi = match (&args.model, &args.phi, &args.state) {
        (Some(model), None, None) => parse_model(model, &cat)?,
        (None, Some(path), None) => io::read_phi(path, &cat)?,
        (None, None, Some(path)) => {
            let doc: io::StateDoc = serde_json::from_str(&fs::read_to_string(path)?)
                .map_err(|e| Error::parse(format!("bad state file: {e}")))?;
            doc.to_state(cat.class_count())?.phi_of()
        }
        _ => {
            return Err(Error::validation(
                "provide exactly one of --model, --phi or --state",
            ))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    let mask = if args.synth_mask {
        if boundary != Boundary::Free {
            return Err(Error::validation("--synth-mask requires --boundary free"));
        }
        Some(elliptical_mask(&spec))
    } else {
        None
    };

    let covariates = match (&args.covariates, args.synth_covariates) {
        (Some(_), Some(_)) => {
            return Err(Error::validation(
                "provide at most one of --covariates and --synth-covariates",
            ))
        }
        (Some(path), None) => Some(io::read_covariates(path, &spec)?.field),
        (None, Some(k)) => Some(synth_covariates(&spec, k, mask.as_deref(), &mut rng)),
        (None, None) => None,
    };

    let field = match (&covariates, &args.theta) {
        (Some(cov), Some(theta)) => {
            let theta: Vec<f64> = theta
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| Error::parse(format!("bad theta value '{t}'")))
                })
                .collect::<Result<_>>()?;
            Some(cov.site_field(&theta)?)
        }
        (Some(_), None) => {
            return Err(Error::validation("--covariates requires --theta"))
        }
        (None, Some(_)) => {
            return Err(Error::validation("--theta requires covariates"))
        }
        (None, None) => None,
    };

    let evaluator = match &mask {
        Some(mask) => EnergyEvaluator::with_mask(spec, Arc::clone(&cat), mask)?,
        None => EnergyEvaluator::new(spec, Arc::clone(&cat))?,
    };
    let params = ModelParams { phi, field };
    let image = gibbs_sample(&evaluator, &params, args.sweeps, &mut rng);

    match args.format.as_str() {
        "text" => io::write_image_text(&args.output, &image)?,
        "pbm" => io::write_image_pbm(&args.output, &image)?,
        other => return Err(Error::parse(format!("unknown image format '{other}'"))),
    }
    if let Some(cov) = &covariates {
        if args.synth_covariates.is_some() {
            let mut cov_path = args.output.clone();
            cov_path.set_extension("covariates.csv");
            io::write_covariates(&cov_path, cov, mask.as_deref())?;
        }
    }
    let meta = serde_json::json!({
        "command": "simulate",
        "template": args.template,
        "size": args.size,
        "boundary": args.boundary,
        "model": args.model,
        "sweeps": args.sweeps,
        "seed": args.seed,
    });
    let mut meta_path = args.output.clone();
    meta_path.set_extension("meta.json");
    io::atomic_write(&meta_path, serde_json::to_string_pretty(&meta).unwrap().as_bytes())?;
    Ok(())
}

fn trace_header(theta_len: usize, kernels: &[crate::sampler::KernelKind]) -> String {
    let mut cols = vec![
        "iteration".to_string(),
        "r".to_string(),
        "value_min".to_string(),
        "value_max".to_string(),
        "value_sumsq".to_string(),
    ];
    for k in 0..theta_len {
        cols.push(format!("theta{}", k + 1));
    }
    cols.push("log_posterior".to_string());
    for kernel in kernels {
        cols.push(format!("acc_{}", kernel.name()));
    }
    cols.join(",")
}

fn trace_row(rec: &ChainRecord) -> String {
    let min = rec.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = rec.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sumsq: f64 = rec.values.iter().map(|v| v * v).sum();
    let mut cols = vec![
        rec.iteration.to_string(),
        rec.r.to_string(),
        format!("{min:.17e}"),
        format!("{max:.17e}"),
        format!("{sumsq:.17e}"),
    ];
    for t in &rec.theta {
        cols.push(format!("{t:.17e}"));
    }
    cols.push(format!("{:.17e}", rec.log_posterior));
    for &a in &rec.accepts {
        cols.push((a as u8).to_string());
    }
    cols.join(",")
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let config = parse_config(args)?;
    let cat = build_catalog(&config.template)?;
    let boundary: Boundary = config.boundary.parse()?;
    let data = io::read_image(&config.data, boundary)?;
    let spec = data.spec;

    let covariate_table = match &config.covariates {
        Some(path) => Some(io::read_covariates(path, &spec)?),
        None => None,
    };
    let mask_from_file = match &config.mask {
        Some(path) => {
            let grid = io::read_image(path, boundary)?;
            if grid.spec.n != spec.n || grid.spec.m != spec.m {
                return Err(Error::validation("mask size does not match the data"));
            }
            Some(grid.data().iter().map(|&v| v == 1).collect::<Vec<bool>>())
        }
        None => covariate_table.as_ref().and_then(|t| t.mask.clone()),
    };

    let evaluator = match &mask_from_file {
        Some(mask) => EnergyEvaluator::with_mask(spec, Arc::clone(&cat), mask)?,
        None => EnergyEvaluator::new(spec, Arc::clone(&cat))?,
    };
    let engine = engine_from(&config)?;
    let prior_cfg = PriorConfig::new(config.gamma, config.sigma_phi, cat.class_count())?;
    let prior = PartitionPrior::new(prior_cfg);
    let sampler_cfg = SamplerConfig {
        sigma: config.sigma,
        covariate_step: config.covariate_step,
        covariate_prior_sd: 10.0,
        iterations: config.iterations,
        thinning: config.thinning,
        seed: config.seed,
        tree_depth: config.tree_depth,
    };

    let covariates = covariate_table
        .as_ref()
        .filter(|t| t.field.k > 0)
        .map(|t| &t.field);
    let init = match config.init.as_str() {
        "single" => None,
        "split" => {
            let classes = cat.class_count();
            Some((
                PartitionState::new(
                    (0..classes).map(|c| vec![c]).collect(),
                    vec![0.0; classes],
                    classes,
                )?,
                vec![0.0; covariates.map_or(0, |c| c.k)],
            ))
        }
        path => {
            let doc: io::StateDoc = serde_json::from_str(&fs::read_to_string(path)?)
                .map_err(|e| Error::parse(format!("bad init state file: {e}")))?;
            Some((doc.to_state(cat.class_count())?, doc.theta))
        }
    };

    fs::create_dir_all(&config.out)?;
    let meta_path = config.out.join("meta.json");
    let meta = serde_json::json!({
        "command": "fit",
        "config": &config,
        "lattice": { "n": spec.n, "m": spec.m },
        "classes": cat.class_count(),
        "engine": engine.name(),
    });
    io::atomic_write(&meta_path, serde_json::to_string_pretty(&meta).unwrap().as_bytes())?;

    let mut chain = Chain::new(
        &evaluator,
        data,
        covariates,
        engine,
        prior,
        sampler_cfg,
        init,
    )?;

    let trace_tmp = config.out.join(".trace.csv.tmp");
    let states_tmp = config.out.join(".states.jsonl.tmp");
    let mut trace = fs::File::create(&trace_tmp)?;
    let mut states = fs::File::create(&states_tmp)?;
    writeln!(
        trace,
        "{}",
        trace_header(
            covariates.map_or(0, |c| c.k),
            chain.kernels()
        )
    )?;

    let checkpoint_every = config.checkpoint_every;
    let out_dir = config.out.clone();
    let tree = config.tree_depth > 1;
    let sink = |rec: &ChainRecord| -> Result<()> {
        writeln!(trace, "{}", trace_row(rec))?;
        let doc = io::StateDoc {
            iteration: rec.iteration,
            groups: rec.groups.clone(),
            values: rec.values.clone(),
            theta: rec.theta.clone(),
        };
        writeln!(states, "{}", serde_json::to_string(&doc).unwrap())?;
        if checkpoint_every > 0 && rec.iteration > 0 && rec.iteration % checkpoint_every == 0 {
            io::atomic_write(
                &out_dir.join("checkpoint.json"),
                serde_json::to_string_pretty(&doc).unwrap().as_bytes(),
            )?;
        }
        Ok(())
    };
    if tree {
        chain.run_tree(sink)?;
    } else {
        chain.run(sink)?;
    }
    trace.sync_all()?;
    states.sync_all()?;
    drop(trace);
    drop(states);
    fs::rename(&trace_tmp, config.out.join("trace.csv"))?;
    fs::rename(&states_tmp, config.out.join("states.jsonl"))?;

    let rates: Vec<serde_json::Value> = chain
        .kernels()
        .iter()
        .zip(chain.counters())
        .map(|(kernel, counter)| {
            serde_json::json!({
                "kernel": kernel.name(),
                "proposed": counter.proposed,
                "accepted": counter.accepted,
                "rate": counter.rate(),
            })
        })
        .collect();
    let meta = serde_json::json!({
        "command": "fit",
        "config": &config,
        "lattice": { "n": spec.n, "m": spec.m },
        "classes": cat.class_count(),
        "engine": engine.name(),
        "acceptance": rates,
    });
    io::atomic_write(&meta_path, serde_json::to_string_pretty(&meta).unwrap().as_bytes())?;
    for (kernel, counter) in chain.kernels().iter().zip(chain.counters()) {
        eprintln!(
            "acceptance {}: {:.1}% ({} / {})",
            kernel.name(),
            100.0 * counter.rate(),
            counter.accepted,
            counter.proposed
        );
    }
    Ok(())
}

fn default_statistics(cat: &ConfigCatalog) -> Vec<StatisticId> {
    let mut stats = vec![
        StatisticId::SumOnes,
        StatisticId::EqualVerticalPairs,
        StatisticId::EqualHorizontalPairs,
        StatisticId::PatternCount(NodeSet::empty()),
    ];
    let tpl = cat.template();
    if tpl.height() == 2 && tpl.width() == 2 && tpl.size() == 4 {
        stats.push(StatisticId::PatternCount(NodeSet::new(vec![(0, 1), (1, 0)])));
        stats.push(StatisticId::PatternCount(NodeSet::new(vec![
            (0, 0),
            (0, 1),
            (1, 0),
        ])));
    } else {
        stats.push(StatisticId::PatternCount(tpl.shape().clone()));
    }
    stats
}

fn run_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let cat = build_catalog(&args.template)?;
    let (n, m) = parse_block(&args.size)?;
    let docs = io::read_states_jsonl(&args.states)?;
    if !(0.0..1.0).contains(&args.burn_in) {
        return Err(Error::validation("burn-in fraction must lie in [0,1)"));
    }
    let skip = (docs.len() as f64 * args.burn_in) as usize;
    let kept = &docs[skip.min(docs.len() - 1)..];
    let states: Vec<PartitionState> = kept
        .iter()
        .map(|d| d.to_state(cat.class_count()))
        .collect::<Result<_>>()?;

    fs::create_dir_all(&args.out)?;

    // pair-grouping probability matrix
    let matrix = pair_matrix(&states)?;
    let mut out = String::from("class");
    for b in 0..matrix.size {
        out.push_str(&format!(",c{b}"));
    }
    out.push('\n');
    for a in 0..matrix.size {
        out.push_str(&format!("c{a}"));
        for b in 0..matrix.size {
            out.push_str(&format!(",{:.6}", matrix.at(a, b)));
        }
        out.push('\n');
    }
    io::atomic_write(&args.out.join("pair_matrix.csv"), out.as_bytes())?;

    // histogram of the number of groups
    let mut counts = vec![0u64; cat.class_count() + 1];
    for state in &states {
        counts[state.r()] += 1;
    }
    let mut out = String::from("r,count,frequency\n");
    for (r, &count) in counts.iter().enumerate().skip(1) {
        out.push_str(&format!(
            "{r},{count},{:.6}\n",
            count as f64 / states.len() as f64
        ));
    }
    io::atomic_write(&args.out.join("r_hist.csv"), out.as_bytes())?;

    // beta posterior via the torus conversion table of the run size
    let torus = LatticeSpec::torus(n, m)?;
    let table = conversion_table(&torus, &cat)?;
    let (summaries, _) = beta_posterior(&states, &cat, &table, args.mass)?;
    let mut out = String::from("class,mean,lower,upper\n");
    for s in &summaries {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            s.class, s.mean, s.lower, s.upper
        ));
    }
    io::atomic_write(&args.out.join("beta_posterior.csv"), out.as_bytes())?;

    if args.ppc_draws > 0 {
        let boundary: Boundary = args.boundary.parse()?;
        let spec = LatticeSpec::new(n, m, boundary)?;
        let covariates = match &args.covariates {
            Some(path) => Some(io::read_covariates(path, &spec)?),
            None => None,
        };
        let evaluator = match covariates.as_ref().and_then(|t| t.mask.as_deref()) {
            Some(mask) => EnergyEvaluator::with_mask(spec, Arc::clone(&cat), mask)?,
            None => EnergyEvaluator::new(spec, Arc::clone(&cat))?,
        };
        let stride = (states.len() / args.ppc_states.max(1)).max(1);
        let retained: Vec<(PartitionState, Vec<f64>)> = kept
            .iter()
            .step_by(stride)
            .map(|d| Ok((d.to_state(cat.class_count())?, d.theta.clone())))
            .collect::<Result<_>>()?;
        let statistics = default_statistics(&cat);
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let samples = posterior_predictive(
            &evaluator,
            &retained,
            covariates.as_ref().map(|t| &t.field),
            &statistics,
            args.ppc_draws,
            args.ppc_sweeps,
            &mut rng,
        )?;
        for (id, sample) in statistics.iter().zip(&samples) {
            let mut out = String::from("value\n");
            for v in sample {
                out.push_str(&format!("{v}\n"));
            }
            io::atomic_write(
                &args.out.join(format!("ppc_{}.csv", id.label())),
                out.as_bytes(),
            )?;
        }
    }
    Ok(())
}

/// Runs the parsed command; the binary maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Catalog(args) => run_catalog(args),
        Command::Convert(args) => run_convert(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Fit(args) => run_fit(args),
        Command::Diagnose(args) => run_diagnose(args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_parsing() {
        assert_eq!(parse_block("2x2").unwrap(), (2, 2));
        assert_eq!(parse_block("10X4").unwrap(), (10, 4));
        assert!(parse_block("2by2").is_err());
        assert!(parse_block("2x").is_err());
    }

    #[test]
    fn config_file_merging() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.cfg");
        fs::write(
            &cfg_path,
            "data = img.txt\nprior.gamma = 0.5\nsampler.seed = 3\nout = outdir\n",
        )
        .unwrap();
        let args = FitArgs {
            config: Some(cfg_path.clone()),
            data: None,
            template: None,
            boundary: None,
            engine: None,
            exchange_sweeps: None,
            gamma: Some(1.0), // flag wins
            sigma_phi: None,
            sigma: None,
            covariate_step: None,
            iterations: Some(10),
            thinning: None,
            seed: None,
            tree_depth: None,
            checkpoint_every: None,
            covariates: None,
            mask: None,
            init: None,
            out: None,
        };
        let config = parse_config(&args).unwrap();
        assert_eq!(config.gamma, 1.0);
        assert_eq!(config.seed, 3);
        assert_eq!(config.data, PathBuf::from("img.txt"));
        // defaults documented: sigma 0.3, sigma_phi 10, gamma 0.5
        assert_eq!(config.sigma, 0.3);
        assert_eq!(config.sigma_phi, 10.0);

        // unknown keys rejected
        fs::write(&cfg_path, "data = x\nout = y\nbogus.key = 1\n").unwrap();
        assert!(parse_config(&args).is_err());

        // out-of-range gamma rejected
        fs::write(&cfg_path, "data = x\nout = y\n").unwrap();
        let mut bad = args.clone();
        bad.gamma = Some(1.5);
        assert!(parse_config(&bad).is_err());
    }

    #[test]
    fn model_spec_parsing() {
        let cat = build_catalog("2x2").unwrap();
        assert!(parse_model("ising(0.4)", &cat).is_ok());
        assert!(parse_model("independence(0.3)", &cat).is_ok());
        assert!(parse_model("potts(0.4)", &cat).is_err());
        assert!(parse_model("ising", &cat).is_err());
    }
}
