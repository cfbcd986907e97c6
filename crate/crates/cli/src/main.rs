use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cellfree::harness::{
    evaluate, export_connection_map, run_training, run_validation, write_cdf_csv, write_report_csv,
    write_summary_csv, Dataset, EvalReport, ExperimentConfig, Method, GRADIENT_TOLERANCE, MC_TOLERANCE,
};
use cellfree::Checkpoint;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cellfree", version, about = "Cell-free massive MIMO AP clustering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the pilot-based reference clustering on the test set.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// Also export the connection map of this test location.
        #[arg(long)]
        map: Option<usize>,
    },
    /// Train a policy and write its history and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained policy on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        map: Option<usize>,
    },
    /// Run the Monte-Carlo estimation check and the gradient check.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
    },
    /// Generate the dataset and write it as JSON.
    Dataset {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("cannot use config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn prepare(common: &Common) -> Result<(ExperimentConfig, Dataset)> {
    let cfg = load_config(common)?;
    fs::create_dir_all(&common.out).with_context(|| format!("cannot create {}", common.out.display()))?;
    let dataset = Dataset::generate(&cfg)?;
    Ok((cfg, dataset))
}

fn write_outputs(out: &Path, report: &EvalReport, cfg: &ExperimentConfig) -> Result<()> {
    let tag = &report.method;
    write_report_csv(&out.join(format!("{tag}_report.csv")), report, cfg)?;
    write_summary_csv(&out.join(format!("{tag}_summary.csv")), &[report], cfg)?;
    write_cdf_csv(&out.join(format!("{tag}_cdf.csv")), &[report], cfg)?;
    println!(
        "{tag}: mean SE sum {:.4} bit/s/Hz, mean connections {:.2}, mean objective {:.4} over {} locations",
        report.mean_se_sum,
        report.mean_connections,
        report.mean_objective,
        report.records.len()
    );
    Ok(())
}

fn write_map(out: &Path, dataset: &Dataset, location: usize, method: Method<'_>, cfg: &ExperimentConfig) -> Result<()> {
    let map = export_connection_map(dataset, location, method, cfg)?;
    let path = out.join(format!("{}_map_{location}.txt", method.tag()));
    let header = format!("{} location={location} method={}", cfg.header(), method.tag());
    fs::write(&path, map.to_text(&header)).with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote {} ({} links)", path.display(), map.links.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Baseline { common, map } => {
            let (cfg, dataset) = prepare(&common)?;
            let report = evaluate(Method::Baseline, &dataset, &cfg)?;
            write_outputs(&common.out, &report, &cfg)?;
            if let Some(loc) = map {
                write_map(&common.out, &dataset, loc, Method::Baseline, &cfg)?;
            }
        }
        Command::Train { common } => {
            let (cfg, dataset) = prepare(&common)?;
            let run = run_training(&cfg, &dataset, &common.out)?;
            if let Some(last) = run.outcome.history.last() {
                println!(
                    "trained {} epochs: mean reward {:.4}, mean SE sum {:.4}, mean connections {:.2}",
                    last.epoch + 1,
                    last.mean_reward,
                    last.mean_se_sum,
                    last.mean_connections
                );
            }
            println!("wrote {} and {}", run.history_path.display(), run.checkpoint_path.display());
        }
        Command::Eval { common, checkpoint, map } => {
            let (cfg, dataset) = prepare(&common)?;
            let ckpt = Checkpoint::<f64>::load(&checkpoint)
                .with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
            let method = Method::Policy(&ckpt);
            let report = evaluate(method, &dataset, &cfg)
                .with_context(|| format!("checkpoint {} does not fit the config", checkpoint.display()))?;
            write_outputs(&common.out, &report, &cfg)?;
            if let Some(loc) = map {
                write_map(&common.out, &dataset, loc, method, &cfg)?;
            }
        }
        Command::Validate { common, trials } => {
            let cfg = load_config(&common)?;
            let report = run_validation(&cfg, trials)?;
            println!(
                "max MC relative error {:.4e} over {} trials (threshold {MC_TOLERANCE})",
                report.mc_max_relative_error, report.mc_trials
            );
            println!(
                "max gradient relative error {:.4e} (threshold {GRADIENT_TOLERANCE:e})",
                report.gradient_max_relative_error
            );
            if !report.passed() {
                bail!("validation thresholds exceeded");
            }
        }
        Command::Dataset { common } => {
            let (cfg, dataset) = prepare(&common)?;
            let path = common.out.join("dataset.json");
            dataset.save(&path)?;
            println!(
                "wrote {}: {} APs, {} training and {} test locations of {} UEs (config {})",
                path.display(),
                dataset.scenario.num_aps(),
                dataset.train.len(),
                dataset.test.len(),
                cfg.dataset.num_ues,
                cfg.config_hash()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
