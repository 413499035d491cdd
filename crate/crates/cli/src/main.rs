use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use artigen_cli::commands;
use artigen_cli::config::Config;
use artigen_cli::service::{self, AppState, ServiceOptions};
use artigen_core::corpus::load_corpus;
use artigen_core::exec::Execution;
use artigen_core::generate::GenerateError;
use artigen_core::kinematics::ARTICULATION_STATES;
use artigen_core::metrics::{Distance, MetricConfig};
use clap::{Parser, Subcommand, ValueEnum};

/// Graph-conditioned generation of articulated objects.
#[derive(Parser)]
#[command(name = "artigen", version, about)]
struct Cli {
    /// Run data-parallel stages on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.9)]
        train_fraction: f64,
        /// Category weights, e.g. `Storage=2,Table=1`; empty mixes all equally.
        #[arg(long, default_value = "")]
        mix: String,
    },
    /// Train the denoiser on a corpus' training split.
    Train {
        /// TOML config; `CAGE_<SECTION>__<FIELD>` variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample abstractions for a request document.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corpus to retrieve meshes from; skipped when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = artigen_core::diffusion::DEFAULT_INFERENCE_STEPS)]
        steps: usize,
    },
    /// Compare generated objects against a reference set and write a CSV report.
    Evaluate {
        /// Corpus directory, generation output, or directory of object files.
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// CSV path; a summary `.txt` is written beside it.
        #[arg(long)]
        out: PathBuf,
        /// Which object distance(s) the set metrics use.
        #[arg(long, value_enum, default_value_t = DistanceArg::Both)]
        distance: DistanceArg,
    },
    /// Export an abstraction's posed boxes as one OBJ per articulation state.
    Pose {
        #[arg(long)]
        abstraction: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated states in [0, 1].
        #[arg(long, value_delimiter = ',', default_values_t = ARTICULATION_STATES)]
        states: Vec<f64>,
    },
    /// Retrieve and assemble meshes for one abstraction.
    Assemble {
        #[arg(long)]
        abstraction: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API. Restart to switch checkpoints.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DistanceArg {
    Id,
    Aid,
    Both,
}

impl DistanceArg {
    fn distances(self) -> Vec<Distance> {
        match self {
            DistanceArg::Id => vec![Distance::Id],
            DistanceArg::Aid => vec![Distance::Aid],
            DistanceArg::Both => vec![Distance::Id, Distance::Aid],
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::SynthCorpus {
            out,
            count,
            seed,
            train_fraction,
            mix,
        } => commands::synth_corpus(&out, count, &mix, seed, train_fraction),
        Command::Train { config, resume } => {
            let cfg = Config::load(config.as_deref())?;
            let ckpt = commands::train(&cfg, resume.as_deref(), exec)?;
            println!("{}", ckpt.display());
            Ok(())
        }
        Command::Generate {
            checkpoint,
            request,
            out,
            corpus,
            steps,
        } => {
            let req = commands::read_request(&request)?;
            let generated = commands::generate_cmd(&checkpoint, &req, &out, corpus.as_deref(), steps)?;
            for g in generated {
                println!("{} seed={}", g.object.id, g.seed);
            }
            Ok(())
        }
        Command::Evaluate {
            generated,
            ground_truth,
            out,
            distance,
        } => {
            let report = commands::evaluate_cmd(
                &generated,
                &ground_truth,
                &out,
                &distance.distances(),
                &MetricConfig::default(),
                exec,
            )?;
            for (name, v) in report {
                println!("{name} {v}");
            }
            Ok(())
        }
        Command::Pose {
            abstraction,
            out,
            states,
        } => {
            for f in commands::pose_cmd(&abstraction, &out, &states)? {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Assemble {
            abstraction,
            corpus,
            out,
        } => {
            let (assembled, selection) = commands::assemble_cmd(&abstraction, &corpus, &out)?;
            println!(
                "assembled {} parts on base {} (fallback: {})",
                assembled.parts.len(),
                selection.base.source_id,
                selection.fallback
            );
            Ok(())
        }
        Command::Serve {
            config,
            addr,
            checkpoint,
            corpus,
        } => {
            let cfg = Config::load(config.as_deref())?;
            let addr = addr.unwrap_or(cfg.service.addr.clone());
            let model = checkpoint
                .or(cfg.service.checkpoint.clone())
                .map(|p| commands::load_model(&p).with_context(|| format!("loading checkpoint {}", p.display())))
                .transpose()?;
            if model.is_none() {
                log::warn!("no checkpoint configured; /api/generate will answer 409");
            }
            let corpus = corpus
                .or(cfg.service.corpus.clone())
                .map(|p| load_corpus(&p))
                .transpose()?;
            let state = Arc::new(AppState::new(
                model,
                corpus,
                ServiceOptions {
                    max_count: cfg.service.max_count,
                    steps: cfg.service.steps,
                },
            ));
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(service::serve(state, &addr))
        }
    }
}

/// Structured error document for stderr.
fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let causes: Vec<String> = err.chain().skip(1).map(|c| c.to_string()).collect();
    let fields = err
        .chain()
        .find_map(|c| match c.downcast_ref::<GenerateError>() {
            Some(GenerateError::Request(f)) => Some(f.clone()),
            _ => None,
        })
        .unwrap_or_default();
    serde_json::json!({"error": err.to_string(), "causes": causes, "fields": fields})
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
