//! `phrasal` command-line front end: one subcommand per pipeline stage plus a
//! JSON search service.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod manifest;
pub mod search;
pub mod serve;

/// Marks an error as a usage problem (exit code 2) rather than a runtime
/// failure (exit code 1).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "phrasal", version = manifest::VERSION, about = "Cross-lingual contextualized phrase retrieval")]
pub struct Cli {
    /// TOML file with one section per stage ([align], [extract], [encoder],
    /// [train], [segment], [index], [search], [prompt], [synth]). Flags win
    /// over the file, the file wins over built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Where to write the run manifest (default: next to the main output).
    #[arg(long, global = true, value_name = "FILE")]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BitextFormat {
    /// JSON lines with src, tgt, src_lang, tgt_lang and optional id.
    Jsonl,
    /// Line-aligned `<prefix>.<src-lang>` and `<prefix>.<tgt-lang>` files.
    TwoFile,
}

#[derive(Debug, Clone, Args)]
pub struct BitextArgs {
    /// Parallel corpus (a file, or a prefix for --format two-file).
    #[arg(long, value_name = "PATH")]
    pub bitext: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    pub format: BitextFormat,
    #[arg(long, required_if_eq("format", "two-file"))]
    pub src_lang: Option<String>,
    #[arg(long, required_if_eq("format", "two-file"))]
    pub tgt_lang: Option<String>,
    #[arg(long)]
    pub lowercase: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SelectionArgs {
    /// Segmentation threshold (overrides the configured one).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Use every n-gram instead of the learned segmentation.
    #[arg(long, value_name = "N")]
    pub ngram: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Ip,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Occurrence,
    String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Word-align a bitext with IBM Model 1 in both directions.
    Align {
        #[command(flatten)]
        bitext: BitextArgs,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Disable the empty (NULL) source word.
        #[arg(long)]
        no_null: bool,
        /// intersection, union or grow-diag-final-and.
        #[arg(long)]
        heuristic: Option<String>,
        /// Output Pharaoh file.
        #[arg(long)]
        out: PathBuf,
        /// Also dump the forward translation table as JSON lines.
        #[arg(long, value_name = "FILE")]
        dump_table: Option<PathBuf>,
    },
    /// Extract consistent phrase pairs from aligned bitext.
    Extract {
        #[command(flatten)]
        bitext: BitextArgs,
        #[arg(long)]
        alignments: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        freq_threshold: Option<u64>,
        /// Keep phrases made only of numbers and punctuation.
        #[arg(long)]
        keep_numeric: bool,
        /// Require every token of both spans to be aligned.
        #[arg(long)]
        strict: bool,
    },
    /// Train the phrase encoder and segmentation head.
    Train {
        #[command(flatten)]
        bitext: BitextArgs,
        #[arg(long)]
        phrases: PathBuf,
        /// Output directory for the checkpoint and metrics.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        literal_denominator: bool,
        /// Tokens seen fewer times map to <unk>.
        #[arg(long, default_value_t = 1)]
        min_count: u64,
    },
    /// Score spans of monolingual sentences with the segmentation head.
    Segment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lang: String,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode phrases into a searchable index.
    BuildIndex {
        #[arg(long)]
        model: PathBuf,
        /// Monolingual sentences, one per line, segmented with the model.
        #[arg(long, conflicts_with = "occurrences", required_unless_present = "occurrences")]
        input: Option<PathBuf>,
        #[arg(long, default_value = "tgt")]
        lang: String,
        /// Explicit occurrences ({"context","s","e"} per line) instead of segmentation.
        #[arg(long)]
        occurrences: Option<PathBuf>,
        #[command(flatten)]
        selection: SelectionArgs,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment query sentences and print their nearest indexed phrases as JSON.
    Search {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, conflicts_with = "input", required_unless_present = "input")]
        text: Option<String>,
        /// One query sentence per line; one JSON response per line.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "src")]
        lang: String,
        #[arg(short, long)]
        k: Option<usize>,
        #[command(flatten)]
        selection: SelectionArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build translation prompts with retrieved phrase translations.
    Prompt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        src_lang: String,
        #[arg(long)]
        tgt_lang: String,
        #[command(flatten)]
        selection: SelectionArgs,
        /// Line written between prompts.
        #[arg(long, default_value = "%%")]
        delimiter: String,
        /// Wrap the selected phrases of the source sentence in markers.
        #[arg(long)]
        mark_source: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// acc@1 of a gold set against an index.
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "occurrence")]
        mode: ModeArg,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve POST /search and GET /healthz over HTTP.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "src")]
        lang: String,
        #[command(flatten)]
        selection: SelectionArgs,
    },
    /// Write the synthetic cipher corpus used for end-to-end checks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train_pairs: Option<usize>,
        #[arg(long)]
        gold_pairs: Option<usize>,
        #[arg(long)]
        distractors: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Base,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("PHRASAL_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Usage(format!("PHRASAL_THREADS must be a positive integer, got '{v}'")))?;
        // A second call in the same process (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let outcome = init_threads().and_then(|()| commands::dispatch(cli));
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.downcast_ref::<Usage>().is_some()) {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
