use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "fpm", version, about = "Single-shot Fourier ptychography with learned LED patterns")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a filtered complex-object dataset archive.
    SynthData(SynthDataArgs),
    /// Jointly train LED weights and reconstruction networks.
    Train(TrainArgs),
    /// Mean reconstruction error of a checkpoint over a dataset split.
    Eval(EvalArgs),
    /// Mutual information between objects and noisy measurements.
    Mi(MiArgs),
    /// Render reconstructions and LED patterns of a run as PNG images.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Mnist,
    Binary16,
    ImageDir,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    #[arg(long, value_enum)]
    pub dataset: DatasetKind,
    /// `table1`, `table2`, `table3`, or a path to an optical-configuration TOML file.
    #[arg(long)]
    pub preset: String,
    /// Directory holding IDX files (mnist) or PNG images (image-dir).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory for `dataset.fpmd` and `manifest.toml`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth-data`, or the archive itself.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub case: u8,
    /// Photon-count scale of the noise model; `inf` disables noise.
    #[arg(long)]
    pub m: f64,
    #[arg(long, default_value_t = 5000)]
    pub iters: u64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long)]
    pub no_dropout: bool,
    /// Drop the adversarial term from the objective.
    #[arg(long)]
    pub no_adversarial: bool,
    /// LED weights are written to `led_pattern.csv` every this many iterations.
    #[arg(long, default_value_t = 100)]
    pub snapshot_every: u64,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub dataset_split: SplitArg,
    /// Noise level; defaults to the one the checkpoint was trained at.
    #[arg(long, conflicts_with = "m_sweep")]
    pub m: Option<f64>,
    /// Comma-separated noise levels, one output row each.
    #[arg(long, value_delimiter = ',')]
    pub m_sweep: Option<Vec<f64>>,
    /// Evaluate only the first this many objects of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Noise seed; defaults to the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV output path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MiArgs {
    /// Checkpoint whose LED weights are analysed; may be repeated.
    #[arg(long, required_unless_present = "pattern_file", conflicts_with = "pattern_file")]
    pub checkpoint: Vec<PathBuf>,
    /// `led_pattern.csv`; every recorded iteration is analysed.
    #[arg(long)]
    pub pattern_file: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Noise level; defaults to the checkpoint's, or 1 for pattern files.
    #[arg(long)]
    pub m: Option<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV output path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Dataset override; defaults to the one recorded in the run manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 2)]
    pub examples: usize,
}
