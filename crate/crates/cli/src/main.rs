mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ssc_core::inference::VarianceSource;
use ssc_core::spatial::Family;
use ssc_core::ssc::Level;

/// Strength of structural connectivity within functional networks.
#[derive(Debug, Parser)]
#[command(name = "ssc", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Output directory.
    #[arg(long, global = true, default_value = "ssc-out")]
    outdir: PathBuf,
    /// Master seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the simulation study and optionally export one simulated dataset.
    Simulate(SimulateArgs),
    /// Per-subject sSC estimates for every component.
    Estimate(EstimateArgs),
    /// Semivariogram fits and delta-method variances.
    Variance(VarianceArgs),
    /// One-sample, between-network and between-group tests.
    Test(TestArgs),
    /// Bootstrap reliability of group ICA components.
    Reliability(ReliabilityArgs),
    /// Tables, scatter CSV and the sSC-reliability association.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario JSON; defaults to the low-noise, 20-subject design.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Write replicate 0 as a dataset under `<outdir>/data`.
    #[arg(long)]
    export_data: bool,
    /// Export the dataset without running the study.
    #[arg(long, requires = "export_data")]
    data_only: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Grid CSV (`voxel_id,x,y,z`).
    #[arg(long)]
    grid: PathBuf,
    /// Subject manifest CSV (`subject_id,group,counts,fmri`).
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LevelArg {
    Voxel,
    Region,
}

impl From<LevelArg> for Level {
    fn from(l: LevelArg) -> Self {
        match l {
            LevelArg::Voxel => Level::Voxel,
            LevelArg::Region => Level::Region,
        }
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Component masks CSV (`component,voxel_id`).
    #[arg(long)]
    masks: PathBuf,
    #[arg(long, value_enum, default_value = "voxel")]
    level: LevelArg,
    /// Parcellation CSV (`voxel_id,region`), required at region level.
    #[arg(long, required_if_eq("level", "region"))]
    partition: Option<PathBuf>,
    /// Bootstrap replicates for the SE and interval of each mean.
    #[arg(long, default_value_t = 1000)]
    replicates: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FamilyArg {
    Exponential,
    Gaussian,
    Spherical,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Exponential => Family::Exponential,
            FamilyArg::Gaussian => Family::Gaussian,
            FamilyArg::Spherical => Family::Spherical,
        }
    }
}

#[derive(Debug, Args)]
pub struct VarianceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long, value_enum, default_value = "exponential")]
    family: FamilyArg,
    /// Maximum pair-of-pair combinations per semivariogram.
    #[arg(long, default_value_t = 2_000_000)]
    budget: u64,
    /// One semivariogram for all subjects.
    #[arg(long)]
    pooled: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    Delta,
    Bootstrap,
    Empirical,
}

impl From<SourceArg> for VarianceSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Delta => VarianceSource::Delta,
            SourceArg::Bootstrap => VarianceSource::Bootstrap,
            SourceArg::Empirical => VarianceSource::Empirical,
        }
    }
}

#[derive(Debug, Args)]
pub struct TestArgs {
    /// `estimates.json` written by `estimate`.
    #[arg(long)]
    estimates: PathBuf,
    /// `variance.json` written by `variance`, required for `--source delta`.
    #[arg(long, required_if_eq("source", "delta"))]
    variance: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "bootstrap")]
    source: SourceArg,
    /// Bootstrap and permutation replicates.
    #[arg(long, default_value_t = 1000)]
    replicates: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Debug, Args)]
pub struct ReliabilityArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Masks used to label and order the extracted components.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Components to extract (default: number of masks, else 2).
    #[arg(long)]
    components: Option<usize>,
    #[arg(long, default_value_t = 100)]
    replicates: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    estimates: PathBuf,
    /// `reliability.json` written by `reliability`.
    #[arg(long)]
    reliability: Option<PathBuf>,
    /// `tests.json` written by `test`.
    #[arg(long)]
    tests: Option<PathBuf>,
    /// Permutations for the association p-values.
    #[arg(long, default_value_t = 1000)]
    permutations: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli.global, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
