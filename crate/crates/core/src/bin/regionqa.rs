use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use regionqa::pipeline::{self, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "regionqa", version, about = "Region-based knowledge VQA pipeline")]
struct Cli {
    /// TOML pipeline config; relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted override, e.g. `--set model.max_regions=18`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (and a matching config.toml) into a directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate inputs and summarise them.
    Ingest,
    /// Retrieve tags, knowledge and oracle candidates for every sample.
    Retrieve,
    /// Train one model per ensemble seed.
    Train,
    /// Predict answers with the trained (or given) checkpoints.
    Predict {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Score a predictions file.
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run the pipeline for every combination of `KEY=V1,V2,...` grids.
    Sweep {
        #[arg(long = "grid", value_name = "KEY=V1,V2", required = true)]
        grid: Vec<String>,
    },
    /// ingest, retrieve, train, predict and eval in sequence.
    Run,
}

fn parse_grid(specs: &[String]) -> Result<Vec<(String, Vec<String>)>, PipelineError> {
    specs
        .iter()
        .map(|s| {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("grid `{s}` is not KEY=V1,V2")))?;
            Ok((k.trim().to_string(), v.split(',').map(|x| x.trim().to_string()).collect()))
        })
        .collect()
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &cli.config {
        Some(path) => PipelineConfig::load(path, &overrides),
        None => PipelineConfig::from_toml(None, &overrides, Path::new(".")),
    }
}

fn run(cli: &Cli) -> Result<serde_json::Value, PipelineError> {
    let config = load_config(cli)?;
    Ok(match &cli.command {
        Command::Generate { out } => {
            let paths = pipeline::generate(&config, out)?;
            let mut c = config.clone();
            c.paths = Default::default();
            // The written config must match the generated embedding width.
            c.model.region_dim = c.syndata.dim;
            std::fs::write(out.join("config.toml"), c.to_toml()).map_err(|source| PipelineError::Io {
                path: out.join("config.toml"),
                source,
            })?;
            json(&paths)
        }
        Command::Ingest => json(&pipeline::ingest(&config)?),
        Command::Retrieve => serde_json::json!({ "records": pipeline::retrieve(&config)?.len() }),
        Command::Train => json(&pipeline::train(&config)?),
        Command::Predict { checkpoints } => {
            let given = (!checkpoints.is_empty()).then_some(checkpoints.as_slice());
            serde_json::json!({ "predictions": pipeline::predict(&config, given)?.len() })
        }
        Command::Eval { predictions } => {
            let r = pipeline::eval(&config, predictions.as_deref())?;
            serde_json::json!({ "accuracy": r.accuracy, "samples": r.samples, "missing_predictions": r.missing_predictions })
        }
        Command::Sweep { grid } => json(&pipeline::sweep(&config, &parse_grid(grid)?)?),
        Command::Run => {
            let r = pipeline::run_all(&config)?;
            serde_json::json!({ "accuracy": r.accuracy, "samples": r.samples })
        }
    })
}

fn json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("output serializes")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
