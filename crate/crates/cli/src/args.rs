use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use salient::attribution::{AttributionMethod, ReductionMode, ScoreSign, Target, Unit, WordAggregation};
use salient::compression::CompressionMethod;
use salient::metrics::Task;

#[derive(Debug, Parser)]
#[command(name = "salient", version, about = "Attribution-guided prompt compression and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every token (or word) of a text with an attribution method.
    Attribute(AttributeArgs),
    /// Compress a file of `{id, text}` records.
    Compress(CompressArgs),
    /// Run compressed prompts against an endpoint or replay file and score them.
    Evaluate(EvaluateArgs),
    /// Dollar cost of a token count under a price table.
    Cost(CostArgs),
    /// Randomized consistency checks of the attribution maths on a model.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Encoder weights file.
    #[arg(long)]
    pub model: PathBuf,
    /// Vocabulary file [default: vocab.txt next to the model].
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

impl ModelArgs {
    pub fn vocab_path(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| {
            self.model
                .parent()
                .map(|p| p.join("vocab.txt"))
                .unwrap_or_else(|| PathBuf::from("vocab.txt"))
        })
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum UnitArg {
    Word,
    Subword,
}

impl From<UnitArg> for Unit {
    fn from(u: UnitArg) -> Self {
        match u {
            UnitArg::Word => Unit::Word,
            UnitArg::Subword => Unit::Subword,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    ClsRow,
    ColumnSum,
}

impl From<ModeArg> for ReductionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ClsRow => ReductionMode::ClsRow,
            ModeArg::ColumnSum => ReductionMode::ColumnSum,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggregationArg {
    Mean,
    Max,
}

impl From<AggregationArg> for WordAggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Mean => WordAggregation::Mean,
            AggregationArg::Max => WordAggregation::Max,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SignArg {
    Signed,
    Magnitude,
}

impl From<SignArg> for ScoreSign {
    fn from(s: SignArg) -> Self {
        match s {
            SignArg::Signed => ScoreSign::Signed,
            SignArg::Magnitude => ScoreSign::Magnitude,
        }
    }
}

/// Options shared by every command that scores text.
#[derive(Debug, Args)]
pub struct ScoringArgs {
    /// Unit that k% and the kept indices refer to.
    #[arg(long, value_enum, default_value = "word")]
    pub unit: UnitArg,
    /// How a token-by-token grid becomes one score per token (rollout, globenc).
    #[arg(long, value_enum, default_value = "cls-row")]
    pub mode: ModeArg,
    /// Pooling of subword scores into word scores.
    #[arg(long, value_enum, default_value = "mean")]
    pub aggregation: AggregationArg,
    /// Class explained by decompx: "predicted" or a class index.
    #[arg(long, default_value = "predicted", value_parser = parse_target)]
    pub target: Target,
    /// Rank decompx contributions by signed value or magnitude.
    #[arg(long, value_enum, default_value = "signed")]
    pub sign: SignArg,
}

fn parse_target(s: &str) -> Result<Target, String> {
    if s == "predicted" {
        return Ok(Target::Predicted);
    }
    s.parse::<usize>()
        .map(Target::Class)
        .map_err(|_| format!("expected \"predicted\" or a class index, got {s:?}"))
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["text", "input"]))]
pub struct AttributeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Text to score.
    #[arg(long)]
    pub text: Option<String>,
    /// File whose whole contents are scored.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_parser = parse_attribution)]
    pub method: AttributionMethod,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// Write the dump here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_attribution(s: &str) -> Result<AttributionMethod, String> {
    s.parse()
}

fn parse_method(s: &str) -> Result<CompressionMethod, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Line-delimited `{id, text}` records.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_parser = parse_method)]
    pub method: CompressionMethod,
    /// Retention percent, 1 to 100.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=100))]
    pub k: u32,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write records here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("endpoint").required(true).multiple(true).args(["endpoint_config", "replay"]))]
pub struct EvaluateArgs {
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated compression methods; empty for a baseline-only run.
    #[arg(long, value_delimiter = ',', value_parser = parse_method, num_args = 0..)]
    pub methods: Vec<CompressionMethod>,
    /// Comma-separated retention percents; 100 is always included.
    #[arg(long, value_delimiter = ',', default_value = "100", value_parser = clap::value_parser!(u32).range(1..=100))]
    pub ks: Vec<u32>,
    /// TOML endpoint settings.
    #[arg(long)]
    pub endpoint_config: Option<PathBuf>,
    /// Replay file; selects the replay transport.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Price table CSV (`model,in_per_1m,out_per_1m`) [default: built-in].
    #[arg(long)]
    pub cost_table: Option<PathBuf>,
    /// Price-table row to charge [default: the endpoint model, or the first row].
    #[arg(long)]
    pub cost_model: Option<String>,
    /// Maximum in-flight requests [default: from the endpoint config, else 4].
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub parallelism: Option<u64>,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long, default_value_t = 0)]
    pub input_tokens: u64,
    #[arg(long, default_value_t = 0)]
    pub output_tokens: u64,
    /// Price-table row; all rows when omitted.
    #[arg(long)]
    pub model: Option<String>,
    /// Price table CSV [default: built-in].
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Fault {
    /// Scale the first layer-norm gain of the copy used for attribution.
    LnGamma,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Encoder weights file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<Fault>,
}
