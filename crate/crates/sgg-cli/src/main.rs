//! Single-binary driver wiring corpus generation, training, evaluation,
//! gradient checking, and attention export.
//!
//! Exit codes: 0 success, 1 validation or configuration error, 2 numerical
//! failure (divergence or a failed gradient check), 3 I/O error.

mod commands;
mod config;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use config::RunConfig;
use sgg_core::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sgg", version, about = "Scene-graph toolkit: generate, train, evaluate")]
struct Cli {
    /// JSON config file; nested objects or flat dotted keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config value, e.g. --set train.lr=0.01
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Cap the worker-thread pool.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Directory for all inputs and outputs.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: graphs, features, vocabulary.
    Gen {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        tail_exponent: Option<f64>,
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Train on the corpus's train split; write weights and the loss curve.
    Train {
        /// Controlling factor of the priority-sensitive loss.
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate on the test split; write the metric report.
    Eval {
        /// predcls, sgcls, or sgdet.
        #[arg(long)]
        mode: Option<String>,
        /// Comma-separated recall cutoffs, e.g. --k 20,50,100
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        /// Predicates kept per ordered pair when the constraint is off.
        #[arg(long)]
        k_per_pair: Option<usize>,
        #[arg(long)]
        graph_constraint: Option<bool>,
        /// Evaluate externally produced predictions (JSONL).
        #[arg(long, value_name = "FILE")]
        predictions: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and the pipeline.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Export the three message-passing attention maps for one image.
    Attention {
        #[arg(long, value_name = "ID")]
        image_id: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Json { .. } => 3,
        Error::NonFinite(_) | Error::Divergence { .. } => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> sgg_core::Result<ExitCode> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.sets)?;
    if let Some(threads) = cli.threads {
        config.threads = Some(threads);
    }
    if let Some(dir) = cli.out_dir {
        config.paths.out_dir = dir;
    }
    if let Some(threads) = config.threads {
        if threads > 0 {
            sgg_core::par::set_threads(threads);
        }
    }

    // Fold subcommand flags into the config, then echo the effective config.
    match &cli.command {
        Command::Gen {
            seed,
            n_images,
            tail_exponent,
            noise_sigma,
        } => {
            if let Some(v) = seed {
                config.gen.seed = *v;
            }
            if let Some(v) = n_images {
                config.gen.n_images = *v;
            }
            if let Some(v) = tail_exponent {
                config.gen.tail_exponent = *v;
            }
            if let Some(v) = noise_sigma {
                config.gen.noise_sigma = *v;
            }
        }
        Command::Train { mu, lr, epochs, seed } => {
            if let Some(v) = mu {
                config.train.mu = *v;
            }
            if let Some(v) = lr {
                config.train.lr = *v;
            }
            if let Some(v) = epochs {
                config.train.epochs = *v;
            }
            if let Some(v) = seed {
                config.train.seed = *v;
            }
        }
        Command::Eval {
            mode,
            k,
            k_per_pair,
            graph_constraint,
            predictions,
        } => {
            if let Some(v) = mode {
                config.eval.mode = v.clone();
            }
            if let Some(v) = k {
                config.eval.ks = v.clone();
            }
            if let Some(v) = k_per_pair {
                config.eval.k_per_pair = *v;
            }
            if let Some(v) = graph_constraint {
                config.eval.graph_constraint = *v;
            }
            if let Some(v) = predictions {
                config.eval.predictions = Some(v.clone());
            }
        }
        Command::Gradcheck { .. } | Command::Attention { .. } => {}
    }
    println!("effective config:\n{}", config.echo());

    match cli.command {
        Command::Gen { .. } => commands::cmd_gen(&config)?,
        Command::Train { .. } => commands::cmd_train(&config)?,
        Command::Eval { .. } => commands::cmd_eval(&config)?,
        Command::Gradcheck { tolerance, seeds } => {
            if !commands::cmd_gradcheck(&config, tolerance, seeds)? {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Attention { image_id } => commands::cmd_attention(&config, &image_id)?,
    }
    Ok(ExitCode::SUCCESS)
}
