pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::{InferInputs, NoData, EXIT_NO_DATA};
use config::{extract_overrides, RunConfig};

/// Recurrent foreground, background and alpha refinement.
///
/// Any configuration field can be overridden with `--section.field=value`,
/// for example `--train.lr=2e-4` or `--iteration.iterations=3`.
#[derive(Parser, Debug)]
#[command(name = "rimatte", version)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed (overrides `seed` in the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Datagen {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        count: usize,
    },
    /// Train, resuming from the checkpoint if it exists.
    Train {
        /// Dataset directory (overrides paths.dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint path (overrides paths.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// CSV loss log (overrides paths.log).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Ignore an existing checkpoint and start from random weights.
        #[arg(long)]
        fresh: bool,
    },
    /// Refine one image and write F, B, alpha and optionally a composite.
    Infer {
        #[arg(long)]
        image: PathBuf,
        /// Initial alpha estimate.
        #[arg(long)]
        alpha: PathBuf,
        #[arg(long)]
        trimap: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// New background for `composite.png`.
        #[arg(long)]
        background: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Iterations (overrides iteration.iterations).
        #[arg(long)]
        iterations: Option<usize>,
        /// Tile size, 0 for no tiling (overrides tile.tile_size).
        #[arg(long)]
        tile_size: Option<usize>,
        /// Tile overlap in pixels (overrides tile.overlap).
        #[arg(long)]
        overlap: Option<usize>,
        /// `analytic` or `paper_verbatim` (overrides iteration.gradient_variant).
        #[arg(long)]
        gradient_variant: Option<String>,
    },
    /// Baseline and per-iteration metrics on a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for benchmark.csv and benchmark.md.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure the receptive field.
    Probe {
        /// Checkpoint; random weights from the init seed when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Iteration counts to probe.
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        iterations: Vec<usize>,
    },
    /// Serve the editing API over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory of static editor files served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

/// Parse the process arguments and run; returns the exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let (rest, mut overrides) = extract_overrides(args);
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    match run(cli, overrides) {
        Ok(()) => 0,
        Err(e) if e.is::<NoData>() => {
            eprintln!("error: {e}");
            EXIT_NO_DATA
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn push(overrides: &mut Vec<(String, String)>, key: &str, value: Option<String>) {
    if let Some(v) = value {
        overrides.push((key.into(), v));
    }
}

fn toml_string(p: &std::path::Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

pub fn run(cli: Cli, mut overrides: Vec<(String, String)>) -> Result<()> {
    match &cli.command {
        Command::Train {
            dataset,
            checkpoint,
            log,
            ..
        } => {
            push(&mut overrides, "paths.dataset", dataset.as_deref().map(toml_string));
            push(&mut overrides, "paths.checkpoint", checkpoint.as_deref().map(toml_string));
            push(&mut overrides, "paths.log", log.as_deref().map(toml_string));
        }
        Command::Infer {
            iterations,
            tile_size,
            overlap,
            gradient_variant,
            ..
        } => {
            push(&mut overrides, "iteration.iterations", iterations.map(|v| v.to_string()));
            push(&mut overrides, "tile.tile_size", tile_size.map(|v| v.to_string()));
            push(&mut overrides, "tile.overlap", overlap.map(|v| v.to_string()));
            push(
                &mut overrides,
                "iteration.gradient_variant",
                gradient_variant.as_ref().map(|v| toml::Value::String(v.clone()).to_string()),
            );
        }
        _ => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    log::info!("effective configuration:\n{}", cfg.to_toml());
    match cli.command {
        Command::Datagen { out, count } => {
            commands::cmd_datagen(&cfg, &out, count)?;
        }
        Command::Train { fresh, .. } => {
            commands::cmd_train(&cfg, fresh)?;
        }
        Command::Infer {
            image,
            alpha,
            trimap,
            checkpoint,
            background,
            out,
            ..
        } => {
            let written = commands::cmd_infer(
                &cfg,
                &InferInputs {
                    image,
                    alpha,
                    trimap,
                    checkpoint,
                    background,
                    out,
                },
            )?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            dataset,
            checkpoint,
            out,
        } => {
            let weights = commands::load_weights(&checkpoint)?;
            let report = commands::cmd_eval(&cfg, &dataset, &weights, out.as_deref())?;
            print!("{}", report.to_markdown());
        }
        Command::Probe { checkpoint, iterations } => {
            let weights = match checkpoint {
                Some(p) => commands::load_weights(&p)?,
                None => {
                    use rand::SeedableRng;
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.init_seed());
                    rimatte::rim::RimWeights::random(&mut rng)
                }
            };
            for r in commands::cmd_probe(&weights, &iterations, cfg.seed)? {
                println!("{}", commands::format_probe(&r));
            }
        }
        Command::Serve {
            checkpoint,
            host,
            port,
            static_dir,
        } => {
            let weights = commands::load_weights(&checkpoint)?;
            http::serve(&cfg, weights, &host, port, static_dir)?;
        }
    }
    Ok(())
}

pub mod http;
