use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use plvm::recipe::{PretrainConfig, ToyWorldConfig};
use plvm_cli::config::{Overrides, RunConfig};
use plvm_cli::SynthArgs;

#[derive(Parser)]
#[command(name = "plvm", version, about = "Personalized vision-language concepts without fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct OverrideArgs {
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Self {
            w: a.w,
            k: a.k,
            p: a.p,
            encoder: a.encoder,
            steps: a.steps,
            seed: a.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train an aligner against a frozen backbone.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Synthesize a training manifest from reference images.
    Synth {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        per_ref: usize,
        #[arg(long, default_value_t = 0.2)]
        clip_min: f64,
        #[arg(long, default_value_t = 0.5)]
        face_min: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score an endpoint on an eval-set manifest.
    Eval {
        #[arg(long)]
        set: PathBuf,
        /// `local` or the base URL of `plvm serve`.
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        report: PathBuf,
        /// Required with `--endpoint local`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Serve the HTTP API for a checkpoint.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// JSON snapshot of sessions, loaded at start and written on exit.
        #[arg(long)]
        sessions: Option<PathBuf>,
    },
    /// One-at-a-time ablation over w, k, p and encoders.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Pretrain the tiny backbone on the toy identities.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "toy-small")]
        encoder: String,
    },
    /// Write toy references and an eval set.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        identities: usize,
        #[arg(long, default_value_t = 6)]
        heldout: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, overrides } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply(&overrides.into())?;
            let o = plvm_cli::run_train(&cfg)?;
            println!("checkpoint: {}", o.checkpoint.display());
            println!("metrics:    {}", o.metrics.display());
            if let Some(m) = o.heldout {
                println!("held-out:   pos {:.1}  neg {:.1}  mean {:.1}", m.pos, m.neg, m.mean);
            }
        }
        Command::Synth {
            refs,
            out,
            per_ref,
            clip_min,
            face_min,
            seed,
        } => {
            let m = plvm_cli::run_synth(&SynthArgs {
                refs,
                out,
                per_ref,
                clip_min,
                face_min,
                seed,
            })?;
            println!("{}", serde_json::to_string(&m.stats)?);
        }
        Command::Eval {
            set,
            endpoint,
            report,
            checkpoint,
        } => {
            let r = plvm_cli::run_eval(&set, &endpoint, checkpoint.as_deref(), &report)?;
            print!("{}", r.table());
        }
        Command::Serve {
            checkpoint,
            port,
            host,
            sessions,
        } => plvm_cli::run_serve(&checkpoint, SocketAddr::new(host, port), sessions.as_deref())?,
        Command::Sweep { config, out, overrides } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply(&overrides.into())?;
            for r in plvm_cli::run_sweep(&cfg, &out)? {
                println!("{:<40} {:>5.1} {:>5.1} {:>5.1}", r.config, r.pos, r.neg, r.mean);
            }
        }
        Command::Pretrain {
            out,
            steps,
            seed,
            encoder,
        } => {
            let mut p = PretrainConfig::default();
            p.steps = steps.unwrap_or(p.steps);
            p.seed = seed.unwrap_or(p.seed);
            let hash = plvm_cli::run_pretrain(&ToyWorldConfig::default(), &p, &encoder, &out)?;
            println!("{} {hash}", out.display());
        }
        Command::Toy {
            out,
            identities,
            heldout,
            seed,
        } => plvm_cli::run_toy(
            &ToyWorldConfig {
                identities,
                heldout_queries: heldout,
                seed,
                ..Default::default()
            },
            &out,
        )?,
    }
    Ok(())
}
