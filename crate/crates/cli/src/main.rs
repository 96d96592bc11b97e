//! Command-line driver for the spatial count-model workflows:
//! `simulate`, `fit`, `score`, `compare`, `confound`, and `aniso`.
//!
//! Exit codes: 0 on success, 1 on usage/input errors, 2 on numerical
//! failures.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use countfield_core::config::{derive_hyperpriors, CircleKernel, SpatialLayout};
use countfield_core::confounding::{
    compare_confounding, coverage_csv_row, fit_rsr, misspecification_study, ConfoundingReport,
    GeneratorKind, StudyConfig, COVERAGE_CSV_HEADER,
};
use countfield_core::data::fmt_f64;
use countfield_core::evaluation::{anisotropy_summary, AnisotropyTable, ScoreReport};
use countfield_core::sampler::{
    diagnostics, effective_sample_size, sample_from_rows, ChainConfig,
};
use countfield_core::{
    generate_dataset, generate_locations, load_dataset, score_model, write_dataset, Dataset,
    DesignSpec, Error, ModelConfig, ModelId, PosteriorSample, Result, RunConfig, Shore,
};

#[derive(Parser)]
#[command(
    name = "countfield",
    version,
    about = "Hierarchical Poisson-lognormal spatial count models: simulate, fit, score, compare, audit confounding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ChainArgs {
    /// MCMC iterations per chain.
    #[arg(long)]
    iters: Option<usize>,
    /// Burn-in iterations discarded from the front of each chain.
    #[arg(long)]
    burnin: Option<usize>,
    /// Keep every thin-th post-burn-in draw.
    #[arg(long)]
    thin: Option<usize>,
    /// Number of independent chains.
    #[arg(long)]
    chains: Option<usize>,
    /// Master RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset over the two-shore elliptical design.
    Simulate {
        /// Generating model (M0..M10).
        #[arg(long)]
        model: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// TOML configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a model by Metropolis-within-Gibbs MCMC.
    Fit {
        /// Input dataset (comma-delimited, see README for the schema).
        #[arg(long)]
        data: PathBuf,
        /// Model to fit (M0..M10).
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        chain: ChainArgs,
        /// Skip covariate standardization.
        #[arg(long)]
        no_standardize: bool,
    },
    /// Score a saved fit: DIC decomposition plus mean RPS, LogS, DSS.
    Score {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank score reports: rows sorted by DIC, best row flagged.
    Compare {
        /// Score-report CSV files.
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare SGLM, RSR and RSR-PPD coefficient estimates, or run the
    /// misspecification study.
    Confound {
        /// Dataset for the on-data comparison.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Spatial structure (M8, M9 or M10).
        #[arg(long, default_value = "M8")]
        model: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        chain: ChainArgs,
        /// Run the misspecification study with this generator (sglm, rsr
        /// or both).
        #[arg(long)]
        study: Option<String>,
        /// Replicates per study cell.
        #[arg(long, default_value_t = 30)]
        reps: usize,
    },
    /// Binned angle-correlation anisotropy summary of a saved fit.
    Aniso {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        /// Number of angle bins over [0, pi/2].
        #[arg(long, default_value_t = 9)]
        bins: usize,
        /// Restrict pairs to one shore (north or south).
        #[arg(long)]
        shore: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_class(&e))
        }
    }
}

/// Honor the COUNTFIELD_THREADS override for the global worker pool.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("COUNTFIELD_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

/// 1 for usage/input problems, 2 for numerical failures.
fn exit_class(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Schema { .. }
        | Error::Io(_)
        | Error::MissingCovariate
        | Error::EmptyShore(_)
        | Error::InsufficientChains(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            model,
            out,
            config,
            seed,
        } => cmd_simulate(model, out, config, seed),
        Command::Fit {
            data,
            model,
            out,
            config,
            chain,
            no_standardize,
        } => cmd_fit(data, model, out, config, chain, no_standardize),
        Command::Score { data, fit, out } => cmd_score(data, fit, out),
        Command::Compare { reports, out } => cmd_compare(reports, out),
        Command::Confound {
            data,
            model,
            out,
            chain,
            study,
            reps,
        } => cmd_confound(data, model, out, chain, study, reps),
        Command::Aniso {
            data,
            fit,
            bins,
            shore,
            out,
        } => cmd_aniso(data, fit, bins, shore, out),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn resolve_model(flag: Option<String>, cfg: &RunConfig, default: Option<&str>) -> Result<ModelConfig> {
    let token = flag
        .or_else(|| cfg.run.model.clone())
        .or_else(|| default.map(|s| s.to_string()))
        .ok_or_else(|| Error::Config("no model given: pass --model or set run.model".into()))?;
    let id: ModelId = token.parse()?;
    Ok(ModelConfig {
        id,
        circle: cfg.priors.circle,
    })
}

fn chain_config(args: &ChainArgs, cfg: &RunConfig) -> ChainConfig {
    ChainConfig {
        n_iter: args.iters.unwrap_or(cfg.chain.iterations),
        burn_in: args.burnin.unwrap_or(cfg.chain.burn_in),
        thin: args.thin.unwrap_or(cfg.chain.thin),
        n_chains: args.chains.unwrap_or(cfg.chain.chains),
        seed: args.seed.or(cfg.run.seed).unwrap_or(0),
        adapt_target: cfg.chain.adapt_target,
        adapt_window: cfg.chain.adapt_window,
    }
}

fn design_from_config(cfg: &RunConfig) -> Result<DesignSpec> {
    let sim = &cfg.simulate;
    if sim.locations == 160 && sim.days == 38 {
        let mut spec = DesignSpec::default();
        spec.span_days = sim.span_days;
        return Ok(spec);
    }
    // Even split with the remainder spread over the first days.
    let base = sim.locations / sim.days;
    let extra = sim.locations % sim.days;
    if base == 0 {
        return Err(Error::Config("need at least one location per day".into()));
    }
    let cluster_sizes: Vec<usize> = (0..sim.days)
        .map(|t| base + usize::from(t < extra))
        .collect();
    Ok(DesignSpec {
        n_locations: sim.locations,
        n_days: sim.days,
        span_days: sim.span_days,
        cluster_sizes,
        alternate_shores: true,
    })
}

fn cmd_simulate(
    model: Option<String>,
    out: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(&config)?;
    let model = resolve_model(model, &cfg, Some("M9"))?;
    let seed = seed.or(cfg.run.seed).unwrap_or(0);
    let spec = design_from_config(&cfg)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let locs = generate_locations(&spec, &mut rng)?;
    let layout = SpatialLayout::new(&model, &locs)?;
    let truth = cfg.truth_for(&model, &layout)?;
    let smoothness = cfg.simulate.covariate_smoothness.clone();
    if truth.beta.len() != smoothness.len() {
        return Err(Error::Config(format!(
            "truth has {} covariate effects but covariate_smoothness lists {}",
            truth.beta.len(),
            smoothness.len()
        )));
    }
    let data = generate_dataset(&model, &truth, &locs, &smoothness, &mut rng)?;
    std::fs::create_dir_all(&out)?;
    let data_path = out.join("data.csv");
    write_dataset(&data, &data_path)?;
    let truth_doc = serde_json::json!({
        "model": format!("{}", model.id),
        "seed": seed,
        "locations": spec.n_locations,
        "days": spec.n_days,
        "span_days": spec.span_days,
        "covariate_smoothness": smoothness,
        "truth": truth,
    });
    let truth_path = out.join("truth.json");
    std::fs::write(&truth_path, serde_json::to_string_pretty(&truth_doc)?.as_bytes())?;
    write_manifest(&out, &[&data_path, &truth_path])?;
    println!(
        "simulated {} sites on {} days from {} -> {}",
        data.n(),
        data.n_days,
        model.id,
        data_path.display()
    );
    Ok(())
}

fn cmd_fit(
    data_path: PathBuf,
    model: Option<String>,
    out: PathBuf,
    config: Option<PathBuf>,
    chain_args: ChainArgs,
    no_standardize: bool,
) -> Result<()> {
    let cfg = load_config(&config)?;
    let model = resolve_model(model, &cfg, None)?;
    let chain = chain_config(&chain_args, &cfg);
    let mut data = load_dataset(&data_path)?;
    let standardize = cfg.run.standardize && !no_standardize;
    if standardize && !data.standardized {
        data.standardize_covariates();
    }
    let hp = derive_hyperpriors(&model, &data)?;
    let sample = countfield_core::run_chains_with(&chain, &model, &hp, &data)?;
    std::fs::create_dir_all(&out)?;

    let draws_path = out.join("draws.csv");
    write_draws(&sample, &draws_path)?;
    let diag_path = out.join("diagnostics.csv");
    write_diagnostics(&sample, &diag_path)?;
    let meta_path = out.join("metadata.json");
    write_fit_metadata(&sample, &model, &chain, &hp, &data, &meta_path)?;
    write_manifest(&out, &[&draws_path, &diag_path, &meta_path])?;
    let w_rates = &sample.acceptance.w_sites;
    let w_summary = if w_rates.is_empty() {
        "n/a".to_string()
    } else {
        let min = w_rates.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = w_rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        format!("{min:.2}..{max:.2}")
    };
    println!(
        "fit {}: {} draws, beta acceptance {:.2}, site acceptance {}, jitter events {}",
        model.id,
        sample.draws.len(),
        sample.acceptance.beta,
        w_summary,
        sample.jitter_events
    );
    Ok(())
}

fn write_draws(sample: &PosteriorSample, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", sample.param_names.join(","))?;
    for row in &sample.rows {
        let fields: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn write_diagnostics(sample: &PosteriorSample, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "param,psrf,ess")?;
    if sample.n_chains >= 2 {
        let report = diagnostics(sample)?;
        for p in &report.params {
            writeln!(out, "{},{:.6},{:.1}", p.name, p.psrf, p.ess)?;
        }
    } else {
        // PSRF needs at least two chains; report ESS alone.
        for (idx, name) in sample.param_names.iter().enumerate() {
            let ess = effective_sample_size(&sample.chain_series(idx));
            writeln!(out, "{name},nan,{ess:.1}")?;
        }
    }
    out.flush()?;
    Ok(())
}

fn write_fit_metadata(
    sample: &PosteriorSample,
    model: &ModelConfig,
    chain: &ChainConfig,
    hp: &countfield_core::Hyperpriors,
    data: &Dataset,
    path: &Path,
) -> Result<()> {
    let corr_acceptance: serde_json::Map<String, serde_json::Value> = sample
        .acceptance
        .corr
        .iter()
        .map(|(k, v)| (k.clone(), serde_json::json!(v)))
        .collect();
    let phi_priors: Vec<serde_json::Value> = hp
        .phi
        .iter()
        .enumerate()
        .map(|(b, p)| {
            serde_json::json!({
                "block": b,
                "shape": p.geo.shape,
                "rate": p.geo.rate,
                "implied_mean": p.geo.mean(),
                "depth_shape": p.depth.as_ref().map(|d| d.shape),
                "depth_rate": p.depth.as_ref().map(|d| d.rate),
                "depth_implied_mean": p.depth.as_ref().map(|d| d.mean()),
            })
        })
        .collect();
    let w_rates = &sample.acceptance.w_sites;
    let doc = serde_json::json!({
        "model": format!("{}", model.id),
        "structure": model.id.structure_label(),
        "circle_kernel": model.circle,
        "restricted": sample.restricted,
        "chain": {
            "iterations": chain.n_iter,
            "burn_in": chain.burn_in,
            "thin": chain.thin,
            "chains": chain.n_chains,
            "seed": chain.seed,
            "adapt_target": chain.adapt_target,
            "adapt_window": chain.adapt_window,
        },
        "data": {
            "n": data.n(),
            "covariates": data.n_covariates(),
            "days": data.n_days,
            "standardized": data.standardized,
        },
        "priors": {
            "beta_variance": hp.beta_var,
            "sigma2": {"shape": hp.sigma2.shape, "scale": hp.sigma2.scale},
            "tau2": {"shape": hp.tau2.shape, "scale": hp.tau2.scale},
            "preliminary_residual_variance": hp.prelim_residual_var,
            "phi": phi_priors,
        },
        "draws_stored": sample.draws.len(),
        "draws_per_chain": sample.draws_per_chain,
        "acceptance": {
            "beta": sample.acceptance.beta,
            "w_min": w_rates.iter().cloned().fold(f64::INFINITY, f64::min),
            "w_mean": w_rates.iter().sum::<f64>() / w_rates.len().max(1) as f64,
            "w_max": w_rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            "corr": corr_acceptance,
        },
        "jitter_events": sample.jitter_events,
    });
    std::fs::write(path, serde_json::to_string_pretty(&doc)?.as_bytes())?;
    Ok(())
}

/// Reload a saved fit against its dataset.
fn load_fit(fit_dir: &Path, data: &Dataset) -> Result<(ModelConfig, PosteriorSample)> {
    let meta_text = std::fs::read_to_string(fit_dir.join("metadata.json"))?;
    let meta: serde_json::Value =
        serde_json::from_str(&meta_text).map_err(|e| Error::Config(format!("metadata: {e}")))?;
    let model_token = meta["model"]
        .as_str()
        .ok_or_else(|| Error::Config("metadata lacks a model field".into()))?;
    let id: ModelId = model_token.parse()?;
    let circle = match meta["circle_kernel"].as_str() {
        Some("arc") => CircleKernel::Arc,
        _ => CircleKernel::Chord,
    };
    let model = ModelConfig { id, circle };
    let draws_path = fit_dir.join("draws.csv");
    let text = std::fs::read_to_string(&draws_path)?;
    let mut lines = text.lines();
    let display = draws_path.display().to_string();
    let header = lines.next().ok_or_else(|| Error::Parse {
        path: display.clone(),
        line: 1,
        msg: "empty draws file".into(),
    })?;
    let names: Vec<String> = header.split(',').map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: display.clone(),
                    line: k + 2,
                    msg: format!("invalid number {tok:?}"),
                })
            })
            .collect();
        rows.push(row?);
    }
    let n_chains = meta["chain"]["chains"].as_u64().unwrap_or(1) as usize;
    let per_chain = meta["draws_per_chain"]
        .as_u64()
        .map(|v| v as usize)
        .unwrap_or(rows.len() / n_chains.max(1));
    let sample = sample_from_rows(&model, data, &names, rows, per_chain, n_chains)?;
    Ok((model, sample))
}

fn load_data_for_fit(path: &Path, fit_dir: &Path) -> Result<Dataset> {
    let mut data = load_dataset(path)?;
    let meta_text = std::fs::read_to_string(fit_dir.join("metadata.json"))?;
    let meta: serde_json::Value =
        serde_json::from_str(&meta_text).map_err(|e| Error::Config(format!("metadata: {e}")))?;
    let fitted_standardized = meta["data"]["standardized"].as_bool().unwrap_or(true);
    if fitted_standardized && !data.standardized {
        data.standardize_covariates();
    }
    Ok(data)
}

fn cmd_score(data_path: PathBuf, fit_dir: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let data = load_data_for_fit(&data_path, &fit_dir)?;
    let (_, sample) = load_fit(&fit_dir, &data)?;
    let report = score_model(&sample, &data)?;
    let text = format!("{}\n{}\n", ScoreReport::CSV_HEADER, report.csv_row());
    emit(out, &text)?;
    Ok(())
}

fn cmd_compare(reports: Vec<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Config("compare needs at least one report file".into()));
    }
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    for path in &reports {
        let text = std::fs::read_to_string(path)?;
        for (k, line) in text.lines().enumerate() {
            if k == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 7 {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: k + 1,
                    msg: "expected 7 columns (model,Dbar,pD,DIC,RPS,LogS,DSS)".into(),
                });
            }
            let nums: Result<Vec<f64>> = fields[1..7]
                .iter()
                .map(|tok| {
                    tok.trim().parse::<f64>().map_err(|_| Error::Parse {
                        path: path.display().to_string(),
                        line: k + 1,
                        msg: format!("invalid number {tok:?}"),
                    })
                })
                .collect();
            rows.push((fields[0].to_string(), nums?));
        }
    }
    // Sort by DIC (column 3 of the numeric block).
    rows.sort_by(|a, b| a.1[2].partial_cmp(&b.1[2]).unwrap());
    let mut text = String::from("model,Dbar,pD,DIC,RPS,LogS,DSS,best\n");
    for (k, (model, nums)) in rows.iter().enumerate() {
        text.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.6},{:.6},{:.6},{}\n",
            model,
            nums[0],
            nums[1],
            nums[2],
            nums[3],
            nums[4],
            nums[5],
            if k == 0 { "*" } else { "" }
        ));
    }
    emit(out, &text)?;
    Ok(())
}

fn cmd_confound(
    data: Option<PathBuf>,
    model: String,
    out: PathBuf,
    chain_args: ChainArgs,
    study: Option<String>,
    reps: usize,
) -> Result<()> {
    if data.is_none() && study.is_none() {
        return Err(Error::Config(
            "confound needs --data (comparison), --study (simulation study), or both".into(),
        ));
    }
    let id: ModelId = model.parse()?;
    let model = ModelConfig::new(id);
    let cfg = RunConfig::default();
    let mut chain = chain_config(&chain_args, &cfg);
    // Desk-scale defaults for the restricted fits unless overridden.
    if chain_args.iters.is_none() {
        chain.n_iter = 8_000;
    }
    if chain_args.burnin.is_none() {
        chain.burn_in = 1_500;
    }
    if chain_args.thin.is_none() {
        chain.thin = 5;
    }
    if chain_args.chains.is_none() {
        chain.n_chains = 1;
    }
    std::fs::create_dir_all(&out)?;
    let mut artifacts: Vec<PathBuf> = Vec::new();

    if let Some(data_path) = data {
        let mut dataset = load_dataset(&data_path)?;
        if !dataset.standardized {
            dataset.standardize_covariates();
        }
        let sglm = countfield_core::run_chains(&chain, &model, &dataset)?;
        let rsr = fit_rsr(&chain, &model, &dataset)?;
        let report = compare_confounding(&sglm, &rsr, &dataset, 0.95)?;
        let path = out.join("confounding.csv");
        let mut text = format!("{}\n", ConfoundingReport::CSV_HEADER);
        for row in report.csv_rows() {
            text.push_str(&row);
            text.push('\n');
        }
        std::fs::write(&path, text.as_bytes())?;
        artifacts.push(path);
    }

    if let Some(which) = study {
        let mut study_cfg = StudyConfig::desk_scale(chain.seed);
        study_cfg.model = model;
        study_cfg.chain = ChainConfig {
            seed: chain.seed,
            ..study_cfg.chain
        };
        let generators: Vec<GeneratorKind> = match which.to_ascii_lowercase().as_str() {
            "sglm" => vec![GeneratorKind::Sglm],
            "rsr" => vec![GeneratorKind::Rsr],
            "both" => vec![GeneratorKind::Sglm, GeneratorKind::Rsr],
            other => {
                return Err(Error::Config(format!(
                    "unknown study generator {other:?} (expected sglm, rsr or both)"
                )))
            }
        };
        let mut text = format!("{COVERAGE_CSV_HEADER}\n");
        for generator in generators {
            let cells = misspecification_study(reps, generator, &study_cfg)?;
            for cell in &cells {
                text.push_str(&coverage_csv_row(cell));
                text.push('\n');
            }
        }
        let path = out.join("coverage.csv");
        std::fs::write(&path, text.as_bytes())?;
        artifacts.push(path);
    }

    let refs: Vec<&Path> = artifacts.iter().map(|p| p.as_path()).collect();
    write_manifest(&out, &refs)?;
    println!("confounding outputs written to {}", out.display());
    Ok(())
}

fn cmd_aniso(
    data_path: PathBuf,
    fit_dir: PathBuf,
    bins: usize,
    shore: Option<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let data = load_data_for_fit(&data_path, &fit_dir)?;
    let (_, sample) = load_fit(&fit_dir, &data)?;
    let shore: Option<Shore> = match shore {
        Some(s) => Some(s.parse().map_err(Error::Config)?),
        None => None,
    };
    let table = anisotropy_summary(&sample, &data.locations, bins, shore)?;
    let mut text = format!("{}\n", AnisotropyTable::CSV_HEADER);
    for row in table.csv_rows() {
        text.push_str(&row);
        text.push('\n');
    }
    emit(out, &text)?;
    Ok(())
}

fn emit(out: Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, text.as_bytes())?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Manifest of output artifacts and their hashes.
fn write_manifest(dir: &Path, files: &[&Path]) -> Result<()> {
    let mut artifacts = Vec::new();
    for f in files {
        artifacts.push(serde_json::json!({
            "path": f.file_name().and_then(|n| n.to_str()).unwrap_or_default(),
            "sha256": sha256_hex(f)?,
        }));
    }
    let doc = serde_json::json!({ "artifacts": artifacts });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&doc)?.as_bytes(),
    )?;
    Ok(())
}
