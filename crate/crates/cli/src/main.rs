//! `scbm`: command-line driver for the concept bottleneck pipeline.
//!
//! Exit codes: 0 on success, 1 on domain errors, 2 on usage errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod demo;
mod manifest;

#[derive(Debug, Parser)]
#[command(name = "scbm", version, about = "Adjective-bottleneck text classification toolkit")]
struct Cli {
    /// Log more (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Inspect and export adjective lexicons.
    #[command(subcommand)]
    Lexicon(LexiconCmd),
    /// Inspect labeled JSONL datasets.
    #[command(subcommand)]
    Data(DataCmd),
    /// Prompt templates.
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Score every (sample, adjective) pair into a concept matrix.
    Encode(EncodeArgs),
    /// Train a classifier on concept matrices.
    Train(TrainArgs),
    /// Predict labels with local explanations.
    Predict(PredictArgs),
    /// Local and global explanations.
    #[command(subcommand)]
    Explain(ExplainCmd),
    /// Permutation importance and subset sweeps.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Run the full pipeline on a synthetic corpus with a mock backend.
    Demo(DemoArgs),
}

#[derive(Debug, Subcommand)]
enum LexiconCmd {
    /// Parse a lexicon file and report its size and fingerprint.
    Validate {
        path: PathBuf,
        #[arg(long, default_value = "en")]
        lang: String,
    },
    /// Write a built-in lexicon (en or de).
    Export {
        #[arg(long, default_value = "en")]
        lang: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum DataCmd {
    /// Per-split, per-label counts and the dataset fingerprint.
    Inspect {
        path: PathBuf,
        /// Also show fold sizes for stratified k-fold.
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
enum PromptCmd {
    /// List built-in templates.
    List,
    /// Render one prompt and show its prefix/suffix split.
    Render {
        #[arg(long, default_value = "plain_text")]
        template: String,
        #[arg(long)]
        adjective: String,
        #[arg(long)]
        text: String,
        #[arg(long)]
        context: Option<String>,
        #[command(flatten)]
        style: PromptStyle,
    },
}

#[derive(Debug, Clone, Args)]
struct PromptStyle {
    /// Persona preset (1-9) replacing the template's system text.
    #[arg(long)]
    persona: Option<usize>,
    /// Chat framing: messages, plain, llama2, llama3.
    #[arg(long)]
    chat: Option<String>,
    /// Insert lexicon glosses into prompts.
    #[arg(long)]
    gloss: bool,
}

#[derive(Debug, Clone, Args)]
struct BackendArgs {
    /// mock or http.
    #[arg(long)]
    backend: Option<String>,
    /// JSON list of keyword rules for the mock backend.
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// chat or completions.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    top_k: Option<u32>,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Lexicon file; defaults to the built-in lexicon for --lang.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long, default_value = "en")]
    lang: String,
    /// Built-in template name or JSON template file.
    #[arg(long, default_value = "plain_text")]
    template: String,
    #[command(flatten)]
    style: PromptStyle,
    /// Only encode samples of this split.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory; defaults to <out>.cache.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    parallel: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    max_attempts: Option<u32>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Debug, Clone, Args)]
struct TrainingOverrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// Validation matrix; without it a stratified share of --train is held out.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Dataset holding the labels of every matrix row.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 0.125)]
    val_fraction: f64,
    /// Embedding file for the fused model.
    #[arg(long)]
    fusion_embeddings: Option<PathBuf>,
    /// Train this many seeds and report mean and std.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[command(flatten)]
    training: TrainingOverrides,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(short, default_value_t = 10)]
    k: usize,
    /// JSONL output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum ExplainCmd {
    /// Top-k gated adjectives for one sample.
    Local {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        sample_id: String,
        #[arg(short, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Per-class mean gated activations as heatmap CSV.
    Global {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Average over misclassified instances too.
        #[arg(long)]
        include_errors: bool,
        /// Also export the N most confident correct instances per class.
        #[arg(long)]
        top_confident: Option<usize>,
        /// Where to write the top-confident heatmap.
        #[arg(long)]
        local_out: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum AnalyzeCmd {
    /// Fixed-model permutation importance per adjective.
    Perm {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = scbm_core::analysis::DEFAULT_REPETITIONS)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain on random adjective subsets of increasing size.
    Sweep {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Comma-separated, strictly increasing subset sizes.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = scbm_core::analysis::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        sweep_seed: u64,
        #[command(flatten)]
        training: TrainingOverrides,
        /// JSON report; a CSV with the same stem is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value = "scbm-demo")]
    out: PathBuf,
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .format_timestamp(None)
        .init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands as c;
    match cli.command {
        Command::Lexicon(LexiconCmd::Validate { path, lang }) => c::lexicon_validate(&path, &lang),
        Command::Lexicon(LexiconCmd::Export { lang, out }) => c::lexicon_export(&lang, &out),
        Command::Data(DataCmd::Inspect { path, folds, seed }) => c::data_inspect(&path, folds, seed),
        Command::Prompt(PromptCmd::List) => c::prompt_list(),
        Command::Prompt(PromptCmd::Render {
            template,
            adjective,
            text,
            context,
            style,
        }) => c::prompt_render(&template, &style, &adjective, &text, context.as_deref()),
        Command::Encode(args) => c::encode(&args),
        Command::Train(args) => c::train(&args),
        Command::Predict(args) => c::predict(&args),
        Command::Explain(ExplainCmd::Local {
            checkpoint,
            matrix,
            sample_id,
            k,
            embeddings,
        }) => c::explain_local(&checkpoint, &matrix, &sample_id, k, embeddings.as_deref()),
        Command::Explain(ExplainCmd::Global {
            checkpoint,
            matrix,
            labels,
            out,
            include_errors,
            top_confident,
            local_out,
            embeddings,
        }) => c::explain_global(&c::GlobalArgs {
            checkpoint: &checkpoint,
            matrix: &matrix,
            labels: &labels,
            out: &out,
            include_errors,
            top_confident,
            local_out: local_out.as_deref(),
            embeddings: embeddings.as_deref(),
        }),
        Command::Analyze(AnalyzeCmd::Perm {
            checkpoint,
            matrix,
            labels,
            reps,
            seed,
            out,
        }) => c::analyze_perm(&checkpoint, &matrix, &labels, reps, seed, &out),
        Command::Analyze(AnalyzeCmd::Sweep {
            train,
            val,
            test,
            labels,
            sizes,
            trials,
            sweep_seed,
            training,
            out,
        }) => c::analyze_sweep(&c::SweepArgs {
            train: &train,
            val: &val,
            test: &test,
            labels: &labels,
            sizes: &sizes,
            trials,
            seed: sweep_seed,
            training: &training,
            out: &out,
        }),
        Command::Demo(args) => demo::run(args.seed, args.samples, &args.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // A closed stdout (`scbm predict ... | head`) is not a failure.
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(1)
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

/// `a: b: c`, skipping causes whose text the previous message already shows.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !prev.is_empty() && prev.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
        prev = msg;
    }
    out
}
