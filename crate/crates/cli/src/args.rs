use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use act_core::pipeline::Pipeline;

#[derive(Debug, Parser)]
#[command(name = "act", version, about = "Asymmetric co-teaching for domain-adaptive metric learning on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a two-domain dataset and its query/gallery split.
    Synth(SynthArgs),
    /// Run one pipeline end to end.
    Run(RunArgs),
    /// Run every compared pipeline and the k-means variants over several seeds.
    Ablate(AblateArgs),
    /// Evaluate a saved encoder on the target split.
    Eval(EvalArgs),
}

/// Options shared by every command.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML run config; missing keys take the benchmark defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, resolved against $ACT_OUT_ROOT when relative.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `seed` of the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct ScheduleOverrides {
    /// Source-training epochs.
    #[arg(long)]
    pub e1: Option<usize>,
    /// Epochs per adaptation round.
    #[arg(long)]
    pub e2: Option<usize>,
    /// Epochs per co-teaching round.
    #[arg(long)]
    pub e3: Option<usize>,
    /// Adaptation rounds.
    #[arg(long)]
    pub r2: Option<usize>,
    /// Co-teaching rounds.
    #[arg(long)]
    pub r3: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub schedule: ScheduleOverrides,
    /// direct, theory, theory_plus_to, ct, ct_plus_to or act.
    #[arg(long, value_parser = parse_pipeline)]
    pub pipeline: Pipeline,
    /// Dataset CSV written by `synth`; generated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub schedule: ScheduleOverrides,
    /// Number of consecutive seeds, starting at the config seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Seeds run concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Fixed dataset for every seed; otherwise each seed generates its own.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Encoder checkpoint written by `run`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset CSV; generated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

fn parse_pipeline(s: &str) -> Result<Pipeline, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = Pipeline::ALL.iter().map(|p| p.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}
