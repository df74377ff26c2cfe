//! `crossrank`: generate, rank, re-rank and evaluate cross-domain embeddings.

mod commands;
mod error;
mod loss_input;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crossrank_core::metrics::ApDenominator;
use crossrank_core::rerank::{AlphaVariant, MLimit};
use crossrank_core::RerankConfig;

use crate::error::{CliError, CliResult};

pub const THREADS_ENV: &str = "CROSSRANK_THREADS";

#[derive(Debug, Parser)]
#[command(name = "crossrank", version, about = "Cross-domain retrieval re-ranking toolkit")]
struct Cli {
    /// Worker threads (default: all cores). Overridden by CROSSRANK_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic gallery/query pair of embedding sets.
    GenSynth(GenSynthArgs),
    /// Plain Euclidean ranking of the gallery for every query.
    Rank(RankArgs),
    /// Iterative neighbourhood re-ranking.
    Rerank(RerankArgs),
    /// mAP and precision of a rankings file.
    Eval(EvalArgs),
    /// Per-iteration mAP@all over all queries.
    Trace(TraceArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Evaluate the weighted training loss on a batch.
    LossEval(LossEvalArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Generator spec as JSON; the chain demo scenario when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SetArgs {
    /// Gallery manifest.
    #[arg(long)]
    pub gallery: PathBuf,
    /// Query manifest.
    #[arg(long)]
    pub queries: PathBuf,
    /// Also dump distance and rank matrices as CSV here.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub sets: SetArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerankFlags {
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.01)]
    pub gamma: f64,
    /// Query-rank cut K of the alpha schedule.
    #[arg(long = "k", default_value_t = 16)]
    pub k_cut: usize,
    /// Slope of alpha below the cut.
    #[arg(long, default_value_t = 0.01)]
    pub alpha_slope: f64,
    /// Neighbours summed per update: a count or `all`.
    #[arg(long, default_value = "16")]
    pub m: MLimit,
    #[arg(long, default_value_t = 1000)]
    pub max_iters: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::QueryJ)]
    pub alpha_variant: VariantArg,
}

impl RerankFlags {
    pub fn config(&self) -> CliResult<RerankConfig<f64>> {
        let cfg = RerankConfig {
            beta: self.beta,
            gamma: self.gamma,
            k_cut: self.k_cut,
            alpha_low_slope: self.alpha_slope,
            m_limit: self.m,
            max_iters: self.max_iters,
            alpha_variant: self.alpha_variant.into(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    QueryJ,
    QueryI,
}

impl From<VariantArg> for AlphaVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::QueryJ => AlphaVariant::QueryRankOfJ,
            VariantArg::QueryI => AlphaVariant::QueryRankOfI,
        }
    }
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[command(flatten)]
    pub sets: SetArgs,
    #[command(flatten)]
    pub flags: RerankFlags,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-query trace: query_id, iteration, AP@all.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Record every iteration instead of thinning after 32.
    #[arg(long)]
    pub full_trace: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub rankings: PathBuf,
    /// Labels CSV or manifest of the gallery.
    #[arg(long)]
    pub gallery_labels: PathBuf,
    /// Labels CSV or manifest of the queries.
    #[arg(long)]
    pub query_labels: PathBuf,
    /// Comma-separated cutoffs, e.g. `all,100,200`.
    #[arg(long, default_value = "all,100,200", value_delimiter = ',')]
    pub k: Vec<crossrank_core::Cutoff>,
    #[arg(long, value_enum, default_value_t = DenominatorArg::MinKR)]
    pub ap_denominator: DenominatorArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DenominatorArg {
    #[value(name = "min-k-r")]
    MinKR,
    #[value(name = "r")]
    R,
}

impl From<DenominatorArg> for ApDenominator {
    fn from(d: DenominatorArg) -> Self {
        match d {
            DenominatorArg::MinKR => ApDenominator::MinKR,
            DenominatorArg::R => ApDenominator::R,
        }
    }
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[command(flatten)]
    pub flags: RerankFlags,
    #[arg(long)]
    pub full_trace: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CheckKind {
    All,
    Attention,
    Triplet,
    Ce,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Softmax in the attention check.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub softmax: Switch,
    #[arg(long, value_enum, default_value_t = CheckKind::All)]
    pub check: CheckKind,
}

#[derive(Debug, Args)]
pub struct LossEvalArgs {
    /// Batch JSON: embeddings, labels, optional logits and attention inputs.
    #[arg(long)]
    pub batch: PathBuf,
    /// JSON object with any of `triplet`, `cad`, `ce` (missing weights are 1).
    #[arg(long, default_value = r#"{"triplet":1,"cad":1,"ce":1}"#)]
    pub weights: String,
    #[arg(long, default_value_t = 0.3)]
    pub margin: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Use mean squared error instead of KL for the distillation term.
    #[arg(long)]
    pub mse: bool,
}

fn thread_count(flag: Option<usize>) -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => match flag {
            Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
            other => Ok(other),
        },
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(cli.threads)? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    pool.install(|| match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&a),
        Command::Rank(a) => commands::rank(&a),
        Command::Rerank(a) => commands::rerank(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Trace(a) => commands::trace(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::LossEval(a) => commands::loss_eval(&a),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
