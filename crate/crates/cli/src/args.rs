use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dreamstory_core::attention::LayerSelect;
use dreamstory_core::mask::MaskRefine;

#[derive(Debug, Parser)]
#[command(name = "dreamstory", version, about = "Story-to-image generation with subject-consistent scenes")]
pub struct Cli {
    /// TOML file with `[render]`, `[director]` and `[bench]` tables; flags win over it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = LogFormat::Text)]
    pub log: LogFormat,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogFormat {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn a story into a validated plan.json.
    Plan(PlanArgs),
    /// Plan (or load a plan) and render every scene.
    Run(RunArgs),
    /// Build or evaluate a benchmark.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Score rendered results and write metrics.json.
    Eval(EvalArgs),
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Generate a subject pool and prompt cases per subject count.
    Build(BenchBuildArgs),
    /// Render every case of a benchmark and score it.
    Eval(BenchEvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct LlmArgs {
    /// `mock`, `replay:<transcript.json>` or `fixed:<response.txt>` [default: mock]
    #[arg(long, value_name = "SPEC")]
    pub llm: Option<String>,

    /// Directory of `<stage>.txt` prompt templates overriding the built-ins.
    #[arg(long, value_name = "DIR")]
    pub templates: Option<PathBuf>,

    /// Save every LLM exchange to a replayable transcript.
    #[arg(long, value_name = "PATH")]
    pub record: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[arg(long, value_name = "PATH")]
    pub story: PathBuf,

    /// Number of scenes; the LLM chooses when absent.
    #[arg(long, value_name = "N")]
    pub scenes: Option<usize>,

    #[arg(long, value_name = "PATH", default_value = "plan.json")]
    pub out: PathBuf,

    #[command(flatten)]
    pub llm: LlmArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    /// Denoiser backend, `mock` or `mock:<weights-seed>` [default: mock]
    #[arg(long, value_name = "SPEC")]
    pub backend: Option<String>,

    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,

    /// Denoising steps [default: 50]
    #[arg(long)]
    pub steps: Option<usize>,

    /// Classifier-free guidance scale [default: 7.0]
    #[arg(long)]
    pub guidance: Option<f64>,

    /// [default: 1280]
    #[arg(long)]
    pub width: Option<u32>,

    /// [default: 768]
    #[arg(long)]
    pub height: Option<u32>,

    /// Text-feature injection weight of MMCA [default: 0.9]
    #[arg(long)]
    pub lambda: Option<f64>,

    /// Reference token dropout rate of MMSA [default: 0.5]
    #[arg(long)]
    pub dropout: Option<f64>,

    /// Layers running MMSA [default: decoder]
    #[arg(long, value_name = "decoder|all")]
    pub mmsa_layers: Option<LayerSelect>,

    /// Layers running MMCA [default: all]
    #[arg(long, value_name = "decoder|all")]
    pub mmca_layers: Option<LayerSelect>,

    #[arg(long)]
    pub disable_mmsa: bool,

    #[arg(long)]
    pub disable_mmca: bool,

    /// Render scenes from the raw prompts instead of the rewritten ones.
    #[arg(long)]
    pub disable_rewrite: bool,

    /// Style text appended to every prompt [default: none]
    #[arg(long, value_name = "TEXT")]
    pub style: Option<String>,

    /// Attention-derived mask refinement [default: off]
    #[arg(long, value_name = "off|auto|on")]
    pub mask_refine: Option<MaskRefine>,

    /// Concurrent scene renders [default: 1]
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["story", "plan"]))]
pub struct RunArgs {
    #[arg(long, value_name = "PATH")]
    pub story: Option<PathBuf>,

    #[arg(long, value_name = "PATH")]
    pub plan: Option<PathBuf>,

    /// Number of scenes when planning from a story.
    #[arg(long, value_name = "N")]
    pub scenes: Option<usize>,

    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    /// Keep finished scenes of an earlier run in the same directory.
    #[arg(long)]
    pub resume: bool,

    /// Stop at the first failed scene.
    #[arg(long)]
    pub fail_fast: bool,

    #[command(flatten)]
    pub render: RenderArgs,

    #[command(flatten)]
    pub llm: LlmArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BenchBuildArgs {
    /// Subject pool size [default: 12]
    #[arg(long)]
    pub pool_size: Option<usize>,

    /// Cases per subject count [default: 100]
    #[arg(long)]
    pub cases_per_group: Option<usize>,

    /// Comma-separated subject counts [default: 0,1,2,3]
    #[arg(long, value_delimiter = ',')]
    pub groups: Option<Vec<usize>>,

    /// Word limit per case prompt [default: 40]
    #[arg(long)]
    pub word_limit: Option<usize>,

    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long, value_name = "PATH", default_value = "bench.json")]
    pub out: PathBuf,

    #[command(flatten)]
    pub llm: LlmArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BenchEvalArgs {
    #[arg(long, value_name = "PATH")]
    pub bench: PathBuf,

    /// Output directory for case renders and metrics.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    /// Comma-separated metrics [default: aes,clip_t,ds,dc_ds]
    #[arg(long, value_name = "LIST")]
    pub metrics: Option<String>,

    /// Also score presence annotation with this LLM (`mock`, `replay:<path>`, `fixed:<path>`).
    #[arg(long, value_name = "SPEC")]
    pub annotator: Option<String>,

    #[arg(long, value_name = "DIR")]
    pub templates: Option<PathBuf>,

    #[command(flatten)]
    pub render: RenderArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// A run directory, or with `--bench` a directory of per-case runs.
    #[arg(long, value_name = "DIR")]
    pub results: PathBuf,

    #[arg(long, value_name = "PATH")]
    pub bench: Option<PathBuf>,

    /// Comma-separated metrics [default: aes,clip_t,ds,dc_ds]
    #[arg(long, value_name = "LIST")]
    pub metrics: Option<String>,

    /// [default: <results>/metrics.json]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}
