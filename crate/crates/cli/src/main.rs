mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use treeavg::exchange::{export_model, import_model, ExchangedModel};
use treeavg::simnet::{
    fit_site_model, fit_target_ensemble, run_replicates, summarize, weight_profiles, Estimator, RunOptions, SimConfig,
};
use treeavg::Execution;

const DEFAULT_GRID: &str = "-3:3:61";

#[derive(Debug)]
pub enum CliError {
    /// Bad config or arguments (exit 2).
    Config(String),
    /// Fitting or output failure (exit 3).
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<treeavg::Error> for CliError {
    fn from(e: treeavg::Error) -> Self {
        match e {
            treeavg::Error::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "treeavg", version, about = "Tree-based model averaging across data-siloed sites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with simulation settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set c=0.6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Override `base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long)]
    threads: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<(SimConfig, Execution), CliError> {
        let cfg = config::resolve(self.config.as_deref(), &self.overrides, self.seed)?;
        let exec = match self.threads {
            Some(0) => return Err(CliError::Config("--threads must be at least 1".into())),
            Some(1) => Execution::Sequential,
            Some(n) => {
                // only fails when a pool already exists, which is harmless here
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                Execution::Parallel
            }
            None => Execution::Parallel,
        };
        Ok((cfg, exec))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured replicates and write CSV results.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated estimators; LOC is always included.
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<String>>,
        /// `x1` grid for the replicate-0 weight profile, as `lo:hi:n`.
        #[arg(long, default_value = DEFAULT_GRID)]
        grid: String,
    },
    /// Fit one site's model (or the target's ensemble) and write its envelope.
    ExportModel {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Envelope file to write.
        #[arg(long)]
        out: PathBuf,
        /// Site whose local model is exported.
        #[arg(long, conflicts_with = "ensemble")]
        site: Option<usize>,
        /// Export the target's ensemble instead (ET, EF, ET-oracle, EF-oracle).
        #[arg(long)]
        ensemble: Option<String>,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
    },
    /// Verify an envelope and describe the model it holds.
    ImportModel {
        path: PathBuf,
        /// Comma-separated feature row to predict at.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        predict: Option<Vec<f64>>,
    },
    /// Model-averaging weights of the target's ensemble over an `x1` grid.
    WeightsReport {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "EF")]
        ensemble: String,
        #[arg(long, default_value = DEFAULT_GRID)]
        grid: String,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
    },
}

fn create_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))
}

fn parse_estimator(s: &str) -> Result<Estimator, CliError> {
    s.trim().parse().map_err(|e: treeavg::Error| CliError::Config(e.to_string()))
}

fn simulate(args: &ConfigArgs, out: &Path, estimators: Option<&[String]>, grid: &str) -> Result<(), CliError> {
    let started = chrono::Utc::now();
    let (cfg, execution) = args.resolve()?;
    let estimators: Vec<Estimator> = match estimators {
        Some(list) => list.iter().map(|s| parse_estimator(s)).collect::<Result<_, _>>()?,
        None => Estimator::ALL.to_vec(),
    };
    let grid = report::parse_grid(grid)?;
    create_dir(out)?;
    let opts = RunOptions {
        execution,
        weight_grid: Some(grid),
    };
    let results = run_replicates(&cfg, &estimators, &opts)?;
    let summary = summarize(&results);

    let mut files = vec!["replicates.csv", "summary.csv", "decisions.csv"];
    report::replicates(&out.join("replicates.csv"), &results)?;
    report::summary(&out.join("summary.csv"), &cfg, &summary)?;
    report::decisions(&out.join("decisions.csv"), &results)?;
    let source = [Estimator::Ef, Estimator::Et]
        .into_iter()
        .find(|e| results[0].weights.contains_key(e));
    if let Some(e) = source {
        report::weights(&out.join("weights.csv"), &results[0].weights[&e])?;
        files.push("weights.csv");
    }
    write_manifest(out, &cfg, started, &files)
}

fn write_manifest(
    out: &Path,
    cfg: &SimConfig,
    started: chrono::DateTime<chrono::Utc>,
    files: &[&str],
) -> Result<(), CliError> {
    let manifest = serde_json::json!({
        "manifest_version": 1,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config_digest": config::digest(cfg),
        "config": cfg,
        "started": started.to_rfc3339(),
        "finished": chrono::Utc::now().to_rfc3339(),
        "outputs": files,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(out.join("manifest.json"), text + "\n").map_err(|e| CliError::Runtime(e.to_string()))
}

fn export(args: &ConfigArgs, out: &Path, site: Option<usize>, ensemble: Option<&str>, r: u64) -> Result<(), CliError> {
    let (cfg, exec) = args.resolve()?;
    let model = match (site, ensemble) {
        (_, Some(e)) => ExchangedModel::Ensemble(fit_target_ensemble(&cfg, r, parse_estimator(e)?, exec)?.0),
        (Some(k), None) => ExchangedModel::Local(fit_site_model(&cfg, r, k, exec)?),
        (None, None) => return Err(CliError::Config("give --site K or --ensemble NAME".into())),
    };
    export_model(&model, out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))
}

fn import(path: &Path, predict: Option<&[f64]>) -> Result<(), CliError> {
    let model = import_model(path)?;
    let (kind, site, trees) = match &model {
        ExchangedModel::Local(m) => (m.kind.as_str(), m.site_id, &m.trees),
        ExchangedModel::Ensemble(m) => (m.kind.as_str(), treeavg::ensemble::TARGET_SITE, &m.trees),
    };
    let leaves: usize = trees.iter().map(|t| t.n_leaves()).sum();
    println!("kind={kind}");
    println!("site_id={site}");
    println!("n_trees={}", trees.len());
    println!("n_leaves={leaves}");
    if let Some(x) = predict {
        let v = match &model {
            ExchangedModel::Local(m) => m.predict_tau(x)?,
            ExchangedModel::Ensemble(m) => treeavg::ensemble::predict_tau_star(m, x)?,
        };
        println!("prediction={v}");
    }
    Ok(())
}

fn weights_report(args: &ConfigArgs, out: &Path, ensemble: &str, grid: &str, r: u64) -> Result<(), CliError> {
    let started = chrono::Utc::now();
    let (cfg, exec) = args.resolve()?;
    let grid = report::parse_grid(grid)?;
    let (model, aug) = fit_target_ensemble(&cfg, r, parse_estimator(ensemble)?, exec)?;
    let profiles = weight_profiles(&model, &aug, &grid, cfg.d)?;
    create_dir(out)?;
    report::weights(&out.join("weights.csv"), &profiles)?;
    write_manifest(out, &cfg, started, &["weights.csv"])
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate {
            cfg,
            out,
            estimators,
            grid,
        } => simulate(cfg, out, estimators.as_deref(), grid),
        Command::ExportModel {
            cfg,
            out,
            site,
            ensemble,
            replicate,
        } => export(cfg, out, *site, ensemble.as_deref(), *replicate),
        Command::ImportModel { path, predict } => import(path, predict.as_deref()),
        Command::WeightsReport {
            cfg,
            out,
            ensemble,
            grid,
            replicate,
        } => weights_report(cfg, out, ensemble, grid, *replicate),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Config(m) => eprintln!("config error: {m}"),
                CliError::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(e.code())
        }
    }
}
