//! `tunfp`: corpus simulation, flow correlation, training, evaluation and
//! export for app fingerprinting over encrypted tunnels.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use tunfp::train::Ablation;

use commands::Subset;
use config::RunConfig;

/// Exit status for invalid configuration or arguments.
const EXIT_CONFIG: u8 = 2;
/// Exit status for runtime failures.
const EXIT_FAILURE: u8 = 1;
/// Exit status when a gradient check finds a group above tolerance.
const EXIT_GRADCHECK: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "tunfp", version, about = "App fingerprinting over encrypted tunnels")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Loss term to sever: none, src, psm, cpd, asa or asc.
    #[arg(long, global = true)]
    ablation: Option<Ablation>,
    /// Worker threads for gradient computation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus: packet files, mapping table and ground truth.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Reassemble per-app packet files into flow sequences.
    Ingest {
        #[arg(long)]
        tls: PathBuf,
        #[arg(long)]
        tun: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pair TLS flows with the tunnel flows that carried them.
    Correlate {
        #[arg(long)]
        tls_flows: PathBuf,
        #[arg(long)]
        tun_flows: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a pair dataset and report test metrics.
    Train {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only pairs carried by this tunnel profile.
        #[arg(long)]
        profile: Option<String>,
        /// Train the tunnel-only reference classifier instead.
        #[arg(long)]
        baseline: bool,
    },
    /// Score tunnel flows with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        profile: Option<String>,
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
        /// Length bucket edges, e.g. 1,10,20,50,200.
        #[arg(long, value_delimiter = ',')]
        buckets: Option<Vec<usize>>,
        /// Variant name written to the metrics table.
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Train the full model and every single-term ablation.
    Ablate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        profile: Option<String>,
    },
    /// Retrain at several sequence lengths.
    Sweep {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        profile: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "20,50,100,200")]
        lengths: Vec<usize>,
    },
    /// Export fingerprint vectors of tunnel flows as CSV.
    Fingerprint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "flows")]
        pairs: Option<PathBuf>,
        /// A tunnel flow file from `ingest`.
        #[arg(long)]
        flows: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Subset::All)]
        subset: Subset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences on a tiny network.
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
}

enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(a) = cli.ablation {
        cfg.train.ablation = a;
    }
    if let Some(t) = cli.threads {
        cfg.train.threads = t;
    }
    cfg.finalize()
}

fn run(cli: &Cli) -> std::result::Result<bool, Failure> {
    let cfg = build_config(cli).map_err(Failure::Config)?;
    let r = match &cli.command {
        Command::Simulate { out } => commands::simulate(&cfg, out),
        Command::Ingest { tls, tun, out } => commands::ingest(&cfg, tls, tun, out),
        Command::Correlate {
            tls_flows,
            tun_flows,
            mapping,
            out,
        } => commands::correlate_cmd(&cfg, tls_flows, tun_flows, mapping, out),
        Command::Train {
            pairs,
            out,
            profile,
            baseline,
        } => commands::train_cmd(
            &cfg,
            &commands::TrainArgs {
                pairs,
                out,
                profile: profile.as_deref(),
                baseline: *baseline,
            },
        ),
        Command::Eval {
            checkpoint,
            pairs,
            out,
            profile,
            subset,
            buckets,
            variant,
        } => commands::eval_cmd(
            &cfg,
            &commands::EvalArgs {
                checkpoint,
                pairs,
                out,
                profile: profile.as_deref(),
                subset: *subset,
                buckets: buckets.clone(),
                variant,
            },
        ),
        Command::Ablate { pairs, out, profile } => commands::ablate_cmd(&cfg, pairs, out, profile.as_deref()),
        Command::Sweep {
            pairs,
            out,
            profile,
            lengths,
        } => commands::sweep_cmd(&cfg, pairs, out, profile.as_deref(), lengths),
        Command::Fingerprint {
            checkpoint,
            pairs,
            flows,
            subset,
            out,
        } => commands::fingerprint_cmd(
            &cfg,
            &commands::FingerprintArgs {
                checkpoint,
                pairs: pairs.as_deref(),
                flows: flows.as_deref(),
                subset: *subset,
                out,
            },
        ),
        Command::Gradcheck { batch } => return commands::gradcheck_cmd(&cfg, *batch).map_err(classify),
    };
    r.map(|_| true).map_err(classify)
}

/// Configuration problems surfacing from the library keep their own status.
fn classify(e: anyhow::Error) -> Failure {
    match e.downcast_ref::<tunfp::Error>() {
        Some(tunfp::Error::Config(_)) => Failure::Config(e),
        _ => Failure::Run(e),
    }
}

fn one_line(e: &anyhow::Error) -> String {
    format!("{e:#}").split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradcheck: relative error above tolerance");
            ExitCode::from(EXIT_GRADCHECK)
        }
        Err(Failure::Config(e)) => {
            eprintln!("error: config: {}", one_line(&e));
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: run: {}", one_line(&e));
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
