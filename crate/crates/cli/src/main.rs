mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpt::encoder::PromptVariant;
use dpt::eval::CandidateMode;

#[derive(Debug, Parser)]
#[command(name = "dpt", version, about = "Denoising and prompt-tuning for multi-behavior recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration file.
    #[arg(long, global = true, default_value = "configs/synthetic.conf")]
    config: PathBuf,

    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for every artifact.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    /// Worker threads for scoring and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[arg(long, global = true, value_parser = parse_mode)]
    eval_mode: Option<CandidateMode>,

    #[arg(long, global = true)]
    prompt_variant: Option<PromptVariant>,

    /// Behavior label to leave out of training; repeatable.
    #[arg(long = "drop-behavior", global = true)]
    drop_behavior: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the planted-noise synthetic dataset.
    Synth,
    /// Filter, split and build relation graphs.
    Prepare,
    /// Train the encoder and denoiser; write the denoised graph.
    Stage1,
    /// Retune the readout on the denoised graph.
    Stage2,
    /// Prompt-tune the target behavior.
    Stage3,
    /// Rank held-out items and print one metric record.
    Evaluate {
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        stage: Option<u8>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write per-user ranks as CSV.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Validate stage-1 gradients against finite differences.
    Gradcheck,
    /// Score pruned edges against the planted-noise sidecar.
    DenoiseReport {
        #[arg(long)]
        noise: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<CandidateMode, String> {
    s.parse().map_err(|e: dpt::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
