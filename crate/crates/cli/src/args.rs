use clap::{Args, Parser, Subcommand, ValueEnum};
use protgo_core::ingest::GoAspect;
use protgo_core::splitter::{DEFAULT_IDENTITY_THRESHOLD, DEFAULT_KMER};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "protgo",
    version,
    about = "GO-term annotation of protein sequences"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Master seed; overrides the seeds in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// JSON file with `model`, `pretrain` and `finetune` sections.
    #[arg(long, global = true, value_name = "JSON")]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    /// Re-hash the inputs recorded in a run manifest and fail on drift.
    #[arg(long, value_name = "MANIFEST")]
    pub verify: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter records, build label vocabularies and encode per-aspect datasets.
    Preprocess(PreprocessArgs),
    /// Partition a preprocessed dataset into train/dev/test id lists.
    Split(SplitArgs),
    /// Masked-residue pretraining of the aspect encoders.
    Pretrain(TrainArgs),
    /// Multi-label fine-tuning of the aspect classifiers.
    Finetune(FinetuneArgs),
    /// Annotate sequences with the three fine-tuned models.
    Predict(PredictArgs),
    /// Score models or a prediction file against a held-out split.
    Evaluate(EvaluateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Preprocess(_) => "preprocess",
            Command::Split(_) => "split",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Predict(_) => "predict",
            Command::Evaluate(_) => "evaluate",
        }
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// TSV records, or FASTA when --annotations is given.
    pub input: PathBuf,
    /// Companion `accession<TAB>GO:NNNNNNN<TAB>ASPECT` file for FASTA input.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Terms kept per aspect.
    #[arg(long, default_value_t = 100)]
    pub top_k: usize,
    /// Residues kept per sequence.
    #[arg(long, default_value_t = 1000)]
    pub max_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Random,
    Clustered,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Preprocessed dataset directory.
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "random")]
    pub kind: KindArg,
    #[arg(long, default_value_t = DEFAULT_IDENTITY_THRESHOLD)]
    pub identity_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_KMER)]
    pub kmer: usize,
    /// Clustered split targets as `train,dev,test` fractions.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub ratios: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AspectArg {
    #[value(name = "BP")]
    Bp,
    #[value(name = "MF")]
    Mf,
    #[value(name = "CC")]
    Cc,
    All,
}

impl AspectArg {
    pub fn aspects(self) -> Vec<GoAspect> {
        match self {
            AspectArg::Bp => vec![GoAspect::BiologicalProcess],
            AspectArg::Mf => vec![GoAspect::MolecularFunction],
            AspectArg::Cc => vec![GoAspect::CellularComponent],
            AspectArg::All => GoAspect::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Preprocessed dataset directory.
    pub dataset: PathBuf,
    /// Split directory; training uses its `train.ids`. All records otherwise.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub aspect: AspectArg,
    /// Checkpoint to continue from, or a directory holding `<ASPECT>.ckpt`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train the selected aspects concurrently.
    #[arg(long)]
    pub parallel_aspects: bool,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Directory of pretrained `<ASPECT>.ckpt` files to start from.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// TSV or FASTA sequences; annotation columns are ignored.
    pub input: PathBuf,
    /// Directory with `<ASPECT>.ckpt` and `vocab_<ASPECT>.tsv` for all aspects.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PartArg {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Preprocessed dataset directory.
    pub dataset: PathBuf,
    /// Split directory.
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub part: PartArg,
    /// Score with these models.
    #[arg(
        long,
        conflicts_with = "predictions",
        required_unless_present = "predictions"
    )]
    pub models: Option<PathBuf>,
    /// Score an existing prediction TSV instead.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// One report per value, e.g. `--threshold 0.3,0.5,0.7`.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub threshold: Vec<f64>,
    #[arg(long, default_value_t = protgo_core::metrics::DEFAULT_BUCKET_WIDTH)]
    pub bucket_width: usize,
}
