use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use holoseg::config::RunConfig;
use holoseg::{pipeline, Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "holoseg", version, about = "Panoptic segmentation with unknown-object discovery on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Render the synthetic dataset.
    Gen,
    /// Train the model and fit the uncertainty threshold.
    Train,
    /// Grid-search DBSCAN parameters on the tuning split.
    Tune,
    /// Write predictions for the inference split.
    Infer,
    /// Score predictions against ground truth.
    Eval,
    /// Render color images of predictions and embeddings.
    Viz,
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("HOLOSEG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| Error::Config(format!("HOLOSEG_THREADS={raw:?} is not a count")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    configure_threads()?;
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    log::debug!("effective configuration:\n{}", cfg.to_toml());
    Ok(match cli.command {
        Command::Gen => {
            let m = pipeline::gen(&cfg)?;
            let counts: serde_json::Map<_, _> = m.splits.iter().map(|(s, ids)| (s.name().to_string(), json!(ids.len()))).collect();
            json!({ "dataset": cfg.paths.dataset, "images": counts })
        }
        Command::Train => {
            let s = pipeline::train_model(&cfg)?;
            json!({ "checkpoint": cfg.paths.run.join(pipeline::CHECKPOINT_FILE), "epochs": s.trace.len(),
                    "final_loss": s.trace.last().map(|r| r.total), "threshold": s.stats.threshold })
        }
        Command::Tune => {
            let t = pipeline::tune(&cfg)?;
            json!({ "eps": t.selected.eps, "min_pts": t.selected.min_pts })
        }
        Command::Infer => json!({ "predictions": pipeline::infer(&cfg)? }),
        Command::Eval => serde_json::to_value(pipeline::evaluate(&cfg)?)?,
        Command::Viz => json!({ "viz": pipeline::visualize(&cfg)? }),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
