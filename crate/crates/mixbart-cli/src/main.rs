//! Operator surface: `fit`, `ale`, `waic`, and `simulate` subcommands wiring
//! data files and configs to the inference engine, with machine-readable
//! outputs and a run manifest per invocation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mixbart::config::RunConfig;
use mixbart::data::PanelDataset;
use mixbart::error::Error as MixError;
use mixbart::interpret::{run_effect_query, tidy_csv, EffectMode, EffectQuery, Reference};
use mixbart::rng::RngStream;
use mixbart::sampler::{log_likelihood_matrix, ChainRunner};
use mixbart::simlab::{metrics_csv, parameter_csv, run_study, SimConfig};
use mixbart::store::PosteriorStore;
use mixbart::util::quantile;

#[derive(Parser)]
#[command(name = "mixbart", version, about = "Negative-binomial soft tree-ensemble regression with spatial effects")]
struct Cli {
    /// Worker threads (overrides MIXBART_THREADS; 0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a dataset and write a posterior store.
    Fit(FitArgs),
    /// Summarize a fitted exposure surface (ALE, PD, fixed, decile).
    Ale(AleArgs),
    /// Compute WAIC for a fitted store.
    Waic(WaicArgs),
    /// Run the simulation study grid and write metric tables.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Dataset CSV (`region_id,date_index,count,population,...`).
    #[arg(long)]
    data: PathBuf,
    /// Adjacency edge list (`region_id_a,region_id_b` per line).
    #[arg(long)]
    adjacency: PathBuf,
    /// Run configuration TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the posterior store.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides bart.trees.
    #[arg(long)]
    trees: Option<usize>,
    /// Overrides bart.soft.
    #[arg(long)]
    soft: Option<bool>,
    /// Overrides bart.sparse.
    #[arg(long)]
    sparse: Option<bool>,
}

#[derive(Args)]
struct AleArgs {
    /// Posterior store directory written by `fit`.
    #[arg(long)]
    store: PathBuf,
    /// Dataset CSV; column roles come from the store's meta.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = ["ale1", "ale2", "pd", "fixed", "decile"], default_value = "ale1")]
    mode: String,
    /// Target exposure column name.
    #[arg(long)]
    exposure: Option<String>,
    /// Second exposure (ale2 only).
    #[arg(long)]
    exposure2: Option<String>,
    /// Quantile bins.
    #[arg(long, default_value_t = 40)]
    bins: usize,
    /// Central display fraction; 1.0 disables trimming.
    #[arg(long, default_value_t = 0.95)]
    trim: f64,
    /// Reference profile for `fixed`: `median` or `file:<path>` with one
    /// value per exposure, comma separated.
    #[arg(long, default_value = "median")]
    reference: String,
    /// Evaluate only the first N posterior draws.
    #[arg(long)]
    draws: Option<usize>,
    /// Output CSV path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WaicArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-row contributions CSV (defaults to the store directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation configuration TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for metric tables.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Written atomically at the end of every successful run.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    subcommand: String,
    resolved_config: serde_json::Value,
    input_digests: BTreeMap<String, String>,
    output_dir: String,
    elapsed_seconds: f64,
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(err) = setup_threads(cli.threads) {
        eprintln!("error: {err}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Ale(args) => cmd_ale(args),
        Command::Waic(args) => cmd_waic(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &MixError) -> u8 {
    match err {
        MixError::Config(_) => 2,
        MixError::Data(_) | MixError::Io(_) => 3,
        MixError::Numerical(_) | MixError::Domain(_) => 4,
    }
}

fn setup_threads(flag: Option<usize>) -> Result<(), MixError> {
    let from_env = std::env::var("MIXBART_THREADS")
        .ok()
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| MixError::Config(format!("MIXBART_THREADS not a number: {v}")))
        })
        .transpose()?;
    let threads = flag.or(from_env).unwrap_or(0);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| MixError::Config(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String, MixError> {
    let bytes = std::fs::read(path)
        .map_err(|e| MixError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

fn write_manifest(
    out_dir: &Path,
    subcommand: &str,
    resolved_config: serde_json::Value,
    input_digests: BTreeMap<String, String>,
    elapsed: f64,
    seed: Option<u64>,
) -> Result<(), MixError> {
    let manifest_path = out_dir.join("manifest.json");
    if manifest_path.exists() {
        let old: RunManifest = serde_json::from_str(
            &std::fs::read_to_string(&manifest_path)
                .map_err(|e| MixError::Data(format!("cannot read existing manifest: {e}")))?,
        )
        .map_err(|e| MixError::Data(format!("existing manifest unreadable: {e}")))?;
        if old.input_digests != input_digests {
            return Err(MixError::Data(format!(
                "output directory {} was produced from different inputs; refusing to overwrite",
                out_dir.display()
            )));
        }
    }
    let manifest = RunManifest {
        subcommand: subcommand.to_string(),
        resolved_config,
        input_digests,
        output_dir: out_dir.display().to_string(),
        elapsed_seconds: elapsed,
        seed,
    };
    let tmp = out_dir.join("manifest.json.tmp");
    std::fs::write(
        &tmp,
        serde_json::to_vec_pretty(&manifest).map_err(|e| MixError::Io(std::io::Error::other(e)))?,
    )?;
    std::fs::rename(&tmp, &manifest_path)?;
    Ok(())
}

/// Checks an existing manifest before heavy work so digest mismatches refuse
/// early.
fn preflight_manifest(out_dir: &Path, input_digests: &BTreeMap<String, String>) -> Result<(), MixError> {
    let manifest_path = out_dir.join("manifest.json");
    if !manifest_path.exists() {
        return Ok(());
    }
    let old: RunManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path)
            .map_err(|e| MixError::Data(format!("cannot read existing manifest: {e}")))?,
    )
    .map_err(|e| MixError::Data(format!("existing manifest unreadable: {e}")))?;
    if &old.input_digests != input_digests {
        return Err(MixError::Data(format!(
            "output directory {} was produced from different inputs; refusing to overwrite",
            out_dir.display()
        )));
    }
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<(), MixError> {
    let start = Instant::now();
    let config_text = std::fs::read_to_string(&args.config)
        .map_err(|e| MixError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut config = RunConfig::from_toml_str(&config_text)?;
    if let Some(seed) = args.seed {
        config.run.seed = seed;
    }
    if let Some(trees) = args.trees {
        config.bart.trees = trees;
    }
    if let Some(soft) = args.soft {
        config.bart.soft = soft;
    }
    if let Some(sparse) = args.sparse {
        config.bart.sparse = sparse;
    }
    config.validate()?;

    let mut digests = BTreeMap::new();
    digests.insert("data".to_string(), sha256_file(&args.data)?);
    digests.insert("adjacency".to_string(), sha256_file(&args.adjacency)?);
    digests.insert("config".to_string(), sha256_file(&args.config)?);
    std::fs::create_dir_all(&args.out)?;
    preflight_manifest(&args.out, &digests)?;

    let data = PanelDataset::from_csv_path(&args.data, &config.data)?;
    let adjacency_text = std::fs::read_to_string(&args.adjacency)
        .map_err(|e| MixError::Data(format!("cannot read {}: {e}", args.adjacency.display())))?;
    let car = data.build_car_from_text(&adjacency_text)?;

    log::info!(
        "fitting {} rows, {} regions, T={} ({} burn-in + {} x {} thin)",
        data.rows(),
        data.n_regions(),
        config.bart.trees,
        config.run.burnin,
        config.run.samples,
        config.run.thin
    );
    let runner = ChainRunner::new(
        data,
        car,
        config.prior.clone(),
        config.bart.clone(),
        RngStream::new(config.run.seed, 0),
    )?;
    let store = runner.run(config.run, config.clone())?;
    store.persist(&args.out)?;

    let summary = summary_table(&store);
    print!("{summary}");
    std::fs::write(args.out.join("summary.csv"), summary)?;

    let resolved = serde_json::to_value(&config).map_err(|e| MixError::Io(std::io::Error::other(e)))?;
    write_manifest(
        &args.out,
        "fit",
        resolved,
        digests,
        start.elapsed().as_secs_f64(),
        Some(config.run.seed),
    )?;
    log::info!("store written to {}", args.out.display());
    Ok(())
}

fn summary_table(store: &PosteriorStore) -> String {
    let mut out = String::from("parameter,mean,lo95,hi95\n");
    let mut push = |name: &str, draws: &[f64]| {
        let mean: f64 = draws.iter().sum::<f64>() / draws.len().max(1) as f64;
        let (lo, hi) = if draws.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (quantile(draws, 0.025), quantile(draws, 0.975))
        };
        out.push_str(&format!("{name},{mean},{lo},{hi}\n"));
    };
    for (j, name) in store.meta.confounder_names.iter().enumerate() {
        let draws: Vec<f64> = (0..store.draw_count()).map(|m| store.beta.get(m, j)).collect();
        push(&format!("beta[{name}]"), &draws);
    }
    push("tau2", &store.tau2);
    push("rho", &store.rho);
    push("xi", &store.xi);
    out
}

fn cmd_ale(args: AleArgs) -> Result<(), MixError> {
    let store = PosteriorStore::load(&args.store)?;
    let data = PanelDataset::from_csv_path(&args.data, &store.meta.config.data)?;
    // Column-name consistency between the store and the dataset.
    if data.exposure_names != store.meta.exposure_names {
        return Err(MixError::Data(format!(
            "dataset exposures {:?} do not match the store's {:?}",
            data.exposure_names, store.meta.exposure_names
        )));
    }
    let mode = match args.mode.as_str() {
        "ale1" => EffectMode::Ale1,
        "ale2" => EffectMode::Ale2,
        "pd" => EffectMode::Pd,
        "fixed" => EffectMode::Fixed,
        "decile" => EffectMode::Decile,
        other => return Err(MixError::Config(format!("unknown mode {other}"))),
    };
    let reference = if args.reference == "median" {
        Reference::Median
    } else if let Some(path) = args.reference.strip_prefix("file:") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MixError::Data(format!("cannot read reference file {path}: {e}")))?;
        let values: Result<Vec<f64>, _> = text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::parse::<f64>)
            .collect();
        Reference::Values(values.map_err(|e| MixError::Data(format!("bad reference value: {e}")))?)
    } else {
        return Err(MixError::Config(format!(
            "--reference must be `median` or `file:<path>`, got {}",
            args.reference
        )));
    };
    let query = EffectQuery {
        mode,
        exposure: args.exposure,
        exposure2: args.exposure2,
        bins: args.bins,
        trim: if args.trim >= 1.0 { None } else { Some(args.trim) },
        reference,
        draw_limit: args.draws,
        ..EffectQuery::default()
    };
    let rows = run_effect_query(&store, &data, &query)?;
    let csv = tidy_csv(&rows);
    match args.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_waic(args: WaicArgs) -> Result<(), MixError> {
    let store = PosteriorStore::load(&args.store)?;
    let data = PanelDataset::from_csv_path(&args.data, &store.meta.config.data)?;
    if data.exposure_names != store.meta.exposure_names {
        return Err(MixError::Data(
            "dataset exposures do not match the store".to_string(),
        ));
    }
    let ll = log_likelihood_matrix(&store, &data)?;
    let result = mixbart::interpret::waic(&ll)?;
    println!("waic,{}", result.waic);
    println!("lppd,{}", result.lppd);
    println!("p_waic,{}", result.p_waic);
    let mut csv = String::from("row,lppd,p_waic\n");
    for (i, (lppd, p)) in result.per_row.iter().enumerate() {
        csv.push_str(&format!("{i},{lppd},{p}\n"));
    }
    let out = args
        .out
        .unwrap_or_else(|| args.store.join("waic_contributions.csv"));
    std::fs::write(out, csv)?;
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), MixError> {
    let start = Instant::now();
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| MixError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut config = SimConfig::from_toml_str(&text)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let mut digests = BTreeMap::new();
    digests.insert("config".to_string(), sha256_file(&args.config)?);
    std::fs::create_dir_all(&args.out)?;
    preflight_manifest(&args.out, &digests)?;

    let metrics = run_study(&config)?;
    std::fs::write(args.out.join("metrics.csv"), metrics_csv(&metrics))?;
    std::fs::write(args.out.join("parameters.csv"), parameter_csv(&metrics))?;
    print!("{}", metrics_csv(&metrics));

    let resolved = serde_json::to_value(&config).map_err(|e| MixError::Io(std::io::Error::other(e)))?;
    write_manifest(
        &args.out,
        "simulate",
        resolved,
        digests,
        start.elapsed().as_secs_f64(),
        Some(config.seed),
    )?;
    Ok(())
}
