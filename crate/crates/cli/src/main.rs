// SPDX-License-Identifier: Apache-2.0

//! `leafcut` command-line front end.
//!
//! Exit codes: 0 success, 1 other failure, 2 malformed input or config,
//! 3 detection succeeded but found nothing, 4 schema version mismatch.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use leafcut::{PipelineConfig, Profile};

#[derive(Debug, Parser)]
#[command(
    name = "leafcut",
    version,
    about = "Leaf detection, synthesis and retrieval simulation"
)]
struct Cli {
    /// TOML config file; missing keys fall back to the profile defaults.
    #[arg(long, global = true, env = "LEAFCUT_CONFIG")]
    config: Option<PathBuf>,

    /// Overrides the config file's profile.
    #[arg(long, global = true, value_parser = parse_profile)]
    profile: Option<Profile>,

    #[command(subcommand)]
    command: Command,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CloudFormatArg {
    Pcd,
    PcdAscii,
    Ply,
    PlyAscii,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detect leaf candidates in a PCD or PLY cloud.
    Detect(DetectArgs),
    /// Generate a synthetic canopy cloud and its ground-truth sidecar.
    Synth(SynthArgs),
    /// Run a simulated retrieval campaign over synthetic scenes.
    Trial(TrialArgs),
    /// Score candidates against a ground-truth sidecar.
    Eval(EvalArgs),
    /// Time the perception pipeline.
    Bench(BenchArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Input cloud (.pcd or .ply; other extensions are sniffed).
    pub input: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of leaves; defaults to the config's synth.n_leaves.
    #[arg(long)]
    pub leaves: Option<usize>,
    /// File stem for the cloud and sidecar.
    #[arg(long, default_value = "scene")]
    pub name: String,
    #[arg(long, value_enum, default_value_t = CloudFormatArg::Pcd)]
    pub cloud_format: CloudFormatArg,
}

#[derive(Debug, Args)]
pub struct TrialArgs {
    /// Output directory for report.json, trials.csv, funnel.csv, timing.csv.
    #[arg(long, short)]
    pub output: PathBuf,
    /// TOML campaign with `[[scenes]]` tables layered over the synth config.
    #[arg(long, conflicts_with_all = ["scenes", "leaves_per_scene"])]
    pub campaign: Option<PathBuf>,
    /// Number of generated scenes when no campaign file is given.
    #[arg(long, default_value_t = 46)]
    pub scenes: usize,
    /// Seed of the first scene; scene i uses seed + i.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 2)]
    pub leaves_per_scene: usize,
    /// Zero wall-clock fields so reports are reproducible byte for byte.
    #[arg(long)]
    pub no_wall_clock: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth sidecar written by `synth`.
    #[arg(long)]
    pub truth: PathBuf,
    /// Candidate JSON written by `detect`.
    #[arg(long)]
    pub candidates: PathBuf,
    /// Matching radius in meters; half the mean leaf length by default.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output file; stdout when omitted.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Cloud to time; a synthetic scene from the config is used otherwise.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
}

/// Error carrying the process exit code.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self::new(1, e)
    }
}

pub const EXIT_MALFORMED: u8 = 2;
pub const EXIT_EMPTY: u8 = 3;
pub const EXIT_SCHEMA: u8 = 4;

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Failure::new(EXIT_MALFORMED, anyhow::anyhow!("{}: {e}", path.display())))?,
        None => String::new(),
    };
    PipelineConfig::from_toml_str(&text, cli.profile).map_err(|e| Failure::new(EXIT_MALFORMED, e))
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Detect(a) => commands::detect(&cfg, &a),
        Command::Synth(a) => commands::synth(&cfg, &a),
        Command::Trial(a) => commands::trial(&cfg, &a),
        Command::Eval(a) => commands::eval(&cfg, &a),
        Command::Bench(a) => commands::bench(&cfg, &a),
        Command::Config => {
            print!("{}", cfg.to_toml_string());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
