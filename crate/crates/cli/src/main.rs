//! `protoadapt` command-line entry point.

mod commands;
mod manifest;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status for usage errors, matching clap's own.
const EXIT_USAGE: u8 = 2;
const EXIT_FAILURE: u8 = 1;

/// Worker threads for `ablate` and multi-episode `eval`. Never affects results.
pub const WORKERS_ENV: &str = "PROTOADAPT_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "protoadapt", version, about = "Few-shot prototype adaptation on precomputed instance features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Feature-pack utilities.
    #[command(subcommand)]
    Pack(PackCommand),
    /// Episode utilities.
    #[command(subcommand)]
    Episode(EpisodeCommand),
    /// Finetune the adaptation head on one episode and write a checkpoint.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint, or train and evaluate one ablation stage over episodes.
    Eval(EvalArgs),
    /// Run the module ablation on one episode.
    Ablate(AblateArgs),
    /// Domain-gap metrics.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck(GradcheckArgs),
    /// Generate the seeded synthetic benchmark pack.
    Synth(SynthArgs),
}

#[derive(Debug, Subcommand)]
enum PackCommand {
    /// Parse and validate a pack; prints a summary.
    Validate {
        pack: PathBuf,
        /// Print the summary as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
enum EpisodeCommand {
    /// Sample an episode and print its record ids as JSON.
    Sample {
        #[command(flatten)]
        episode: EpisodeArgs,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags selecting one episode from a pack.
#[derive(Debug, Clone, Args)]
pub struct EpisodeArgs {
    /// Feature pack to sample from.
    #[arg(long)]
    pub pack: PathBuf,
    /// Classes per episode (N).
    #[arg(long = "n", default_value_t = 5)]
    pub n_way: usize,
    /// Support instances per class (K).
    #[arg(long = "k", default_value_t = 5)]
    pub k_shot: usize,
    /// Episode seed; also seeds parameter initialization and training.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Background instances; defaults to the config's n_bg (530).
    #[arg(long)]
    pub n_bg: Option<usize>,
    /// Explicit pack class indices, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<usize>>,
}

/// Flags overriding `FinetuneConfig` fields. Precedence: flag, then `--config`, then defaults.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON file mirroring the finetune config (missing fields take defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epoch count (default: 80 for one-shot, 40 otherwise).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Residual fusion weight of instance reweighting.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Prototype consistency temperature.
    #[arg(long)]
    pub tau_proto: Option<f64>,
    /// Domain diversity temperature.
    #[arg(long)]
    pub tau_domain: Option<f64>,
    /// Classification softmax temperature.
    #[arg(long)]
    pub cls_temperature: Option<f64>,
    /// Trainable modules, comma separated: ft-heads, lif, ir, dp.
    #[arg(long, value_delimiter = ',')]
    pub modules: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    episode: EpisodeArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for checkpoint.bin, train_log.jsonl and manifest.json.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    episode: EpisodeArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Evaluate this checkpoint (trained on the same episode) instead of training.
    #[arg(long, conflicts_with_all = ["stage", "episodes"])]
    checkpoint: Option<PathBuf>,
    /// Stage to train and evaluate when no checkpoint is given.
    #[arg(long, default_value = "full")]
    stage: String,
    /// Number of episodes, seeded seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    episodes: usize,
    /// IoU thresholds, comma separated, or "coco" for 0.50:0.05:0.95.
    #[arg(long, default_value = "coco")]
    iou: String,
    /// Print reports as JSON.
    #[arg(long)]
    json: bool,
    /// Also write reports and a manifest to this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    episode: EpisodeArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Stages in report order, comma separated.
    #[arg(long, default_value = "frozen,ft-heads,+lif,+ir,+dp,full", value_delimiter = ',')]
    stages: Vec<String>,
    /// IoU thresholds, comma separated, or "coco".
    #[arg(long, default_value = "coco")]
    iou: String,
    /// Print reports as JSON.
    #[arg(long)]
    json: bool,
    /// Write one CSV row per stage to this file.
    #[arg(long)]
    emit_csv: Option<PathBuf>,
    /// Also write reports and a manifest to this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum MetricsCommand {
    /// Inter-class variance of a text-feature pack (raw features, one record per class).
    Icv {
        #[arg(long)]
        pack: PathBuf,
        /// Lower level bound.
        #[arg(long, default_value_t = protoadapt_core::metrics::ICV_LOW)]
        low: f64,
        /// Upper level bound.
        #[arg(long, default_value_t = protoadapt_core::metrics::ICV_HIGH)]
        high: f64,
        #[arg(long)]
        json: bool,
    },
    /// Indefinable-boundary score from survey fractions.
    Ib {
        /// Survey JSON: entries with slight/moderate/significant fractions, or a bare array of the three.
        #[arg(long)]
        survey: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Check every loss.
    #[arg(long, conflicts_with = "loss")]
    all: bool,
    /// Losses to check: cls, loc, domain, proto, proto_cls, total.
    #[arg(long, value_delimiter = ',', required_unless_present = "all")]
    loss: Vec<String>,
    /// Random fixtures per loss.
    #[arg(long, default_value_t = protoadapt_core::checks::GRADCHECK_FIXTURES)]
    fixtures: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = protoadapt_core::checks::GRADCHECK_EPS)]
    eps: f64,
    /// Maximum relative error.
    #[arg(long, default_value_t = protoadapt_core::checks::GRADCHECK_TOLERANCE)]
    tolerance: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output pack path.
    #[arg(long)]
    out: PathBuf,
    /// JSON file mirroring the synth config (missing fields take defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    /// Object instances per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Background instances.
    #[arg(long)]
    backgrounds: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let argv: Vec<String> = std::env::args().collect();
    match run(cli, &argv) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn run(cli: Cli, argv: &[String]) -> Result<u8, commands::CliError> {
    match cli.command {
        Command::Pack(PackCommand::Validate { pack, json }) => commands::pack_validate(&pack, json),
        Command::Episode(EpisodeCommand::Sample { episode, out }) => commands::episode_sample(&episode, out.as_deref()),
        Command::Finetune(a) => commands::finetune(&a.episode, &a.config, &a.out, argv),
        Command::Eval(a) => commands::eval(commands::EvalRequest {
            episode: &a.episode,
            config: &a.config,
            checkpoint: a.checkpoint.as_deref(),
            stage: &a.stage,
            episodes: a.episodes,
            iou: &a.iou,
            json: a.json,
            out: a.out.as_deref(),
            argv,
        }),
        Command::Ablate(a) => commands::ablate(commands::AblateRequest {
            episode: &a.episode,
            config: &a.config,
            stages: &a.stages,
            iou: &a.iou,
            json: a.json,
            csv: a.emit_csv.as_deref(),
            out: a.out.as_deref(),
            argv,
        }),
        Command::Metrics(MetricsCommand::Icv { pack, low, high, json }) => commands::metrics_icv(&pack, low, high, json),
        Command::Metrics(MetricsCommand::Ib { survey, json }) => commands::metrics_ib(&survey, json),
        Command::Gradcheck(a) => commands::gradcheck(a.all, &a.loss, a.fixtures, a.eps, a.tolerance, a.json),
        Command::Synth(a) => commands::synth(commands::SynthRequest {
            out: &a.out,
            config: a.config.as_deref(),
            seed: a.seed,
            classes: a.classes,
            per_class: a.per_class,
            backgrounds: a.backgrounds,
            dim: a.dim,
            argv,
        }),
    }
}
