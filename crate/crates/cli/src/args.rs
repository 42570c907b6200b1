use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use satseg::corpus::CorpusFormat;
use satseg::corrupt::Scheme;

#[derive(Parser, Debug)]
#[command(
    name = "satseg",
    version,
    about = "Sentence segmentation with limited-lookahead transformers"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand. Any of them, and any subcommand
/// option, can also come from `--config`; flags given on the command line
/// win.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Global {
    /// JSON object of option values keyed by their snake_case names.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for inference and evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Model checkpoint to start from or run.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Sliding-window stride in tokens.
    #[arg(long, global = true)]
    pub stride: Option<usize>,
    /// Boundary threshold.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Total lookahead budget in tokens.
    #[arg(long, global = true)]
    pub lookahead: Option<usize>,
    /// Keep only the first k layers at inference.
    #[arg(long, global = true)]
    pub layers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Learn a BPE or character vocabulary and the punctuation set.
    TokenizerTrain(TokenizerArgs),
    /// Pretrain on paragraphs with punctuation-driven labels.
    Pretrain(TrainArgs),
    /// Continue training on the sentence-level corruption mixture.
    TrainSm(TrainArgs),
    /// Adapt a checkpoint to a domain with low-rank adapters.
    AdaptLora(LoraArgs),
    /// Pick the boundary threshold that maximizes F1 on held-out data.
    TuneThreshold(TuneArgs),
    /// Split text into sentences.
    Segment(SegmentArgs),
    /// Score a segmenter against gold sentences.
    Evaluate(EvaluateArgs),
    /// Split text with the punctuation rule baseline.
    Baseline(BaselineArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Lines,
    Jsonl,
}

impl From<Format> for CorpusFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Lines => CorpusFormat::Lines,
            Format::Jsonl => CorpusFormat::Jsonl,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Bpe,
    Char,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeArg {
    Asr,
    Ugc,
    Clean,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Asr => Scheme::SmAsr,
            SchemeArg::Ugc => Scheme::SmUgc,
            SchemeArg::Clean => Scheme::Clean,
        }
    }
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerArgs {
    /// Corpus files; repeat for several.
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long, value_enum)]
    pub kind: Option<TokenizerKind>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Most frequent punctuation characters kept per language.
    #[arg(long)]
    pub punct_top_k: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Tokenizer file, needed when not starting from a checkpoint.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Training chunk length in tokens.
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub aux_weight: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_context: Option<usize>,
    /// Layers of a freshly initialized model.
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// Initialize without a lookahead limit.
    #[arg(long)]
    pub full_attention: bool,
    /// Corruption schemes of the supervised mixture, comma separated.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub schemes: Option<Vec<SchemeArg>>,
    /// Per-token punctuation removal probability during pretraining.
    #[arg(long)]
    pub p_remove: Option<f64>,
    /// Write one JSON record per step here.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also save `<out>.step<N>` every this many steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraArgs {
    /// Clean in-domain sentences.
    #[arg(long)]
    pub sentences: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Adapter scaling numerator; the update is scaled by this over the rank.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub context: Option<usize>,
    /// Fold the adapters into the base weights before saving.
    #[arg(long)]
    pub merge: bool,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneArgs {
    /// Held-out documents with gold sentences.
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Candidate thresholds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long)]
    pub context: Option<usize>,
    /// Save a copy of the checkpoint carrying the tuned threshold.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentArgs {
    /// Text to split, one text per line or JSON lines with a `text` field.
    /// Reads stdin when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Include per-character boundary probabilities.
    #[arg(long)]
    pub probs: bool,
    /// Window length in tokens.
    #[arg(long)]
    pub context: Option<usize>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub per_language: bool,
    /// Also score the boundary after the final character.
    #[arg(long)]
    pub include_terminal: bool,
    /// Lowercase and strip punctuation from the gold text first.
    #[arg(long)]
    pub asr: bool,
    /// Score consecutive sentence pairs instead of whole documents.
    #[arg(long)]
    pub pairs: bool,
    /// Score the rule baseline instead of a model.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long)]
    pub terminators: Option<String>,
    #[arg(long)]
    pub abbreviations: Option<PathBuf>,
    /// Score an external system's output, one JSON object per sequence with
    /// `text` and `boundaries` or with `sentences`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sentence-final characters.
    #[arg(long)]
    pub terminators: Option<String>,
    /// File of abbreviations, one per line.
    #[arg(long)]
    pub abbreviations: Option<PathBuf>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TokenizerTrain(_) => "tokenizer-train",
            Command::Pretrain(_) => "pretrain",
            Command::TrainSm(_) => "train-sm",
            Command::AdaptLora(_) => "adapt-lora",
            Command::TuneThreshold(_) => "tune-threshold",
            Command::Segment(_) => "segment",
            Command::Evaluate(_) => "evaluate",
            Command::Baseline(_) => "baseline",
        }
    }
}
