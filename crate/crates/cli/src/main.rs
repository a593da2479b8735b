mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Desk-scale omni-modal model toolkit: tokenizer, corpus preparation,
/// vision and audio paths, packing, training plans, web search and
/// throughput benchmarking.
#[derive(Parser, Debug)]
#[command(name = "omni", version, propagate_version = true)]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a BPE tokenizer or measure its compression rate.
    #[command(subcommand)]
    Tokenize(TokenizeCmd),
    /// Bytes per token for each corpus in a directory.
    Rate(RateArgs),
    /// Remove exact or near duplicates from a JSON-lines corpus.
    #[command(subcommand)]
    Dedup(DedupCmd),
    /// Code corpus utilities.
    #[command(subcommand)]
    Code(CodeCmd),
    /// Image slicing and encoding.
    #[command(subcommand)]
    Vision(VisionCmd),
    /// Audio clip planning and encoding.
    #[command(subcommand)]
    Audio(AudioCmd),
    /// Pack a sample manifest into fixed-length training rows.
    Pack(PackArgs),
    /// Greedy text continuation.
    Infer(InferArgs),
    /// Greedy continuation of mixed text, image and audio prompts.
    InferOmni(InferOmniArgs),
    /// Write a freshly initialised checkpoint directory.
    Init(InitArgs),
    /// Training stage plans and learning-rate schedules.
    #[command(subcommand)]
    Stages(StagesCmd),
    /// Prefill and decode throughput benchmark.
    Bench(BenchArgs),
    /// Answer a question through the search, extract and summarise pipeline.
    SearchChat(SearchChatArgs),
}

#[derive(Subcommand, Debug)]
pub enum TokenizeCmd {
    /// Train byte-level BPE on every file in a directory.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: usize,
        /// Output tokenizer file.
        #[arg(long, default_value = "tokenizer.json")]
        out: PathBuf,
    },
    /// Bytes per token for each corpus in a directory.
    Rate(RateArgs),
}

#[derive(Args, Debug)]
pub struct RateArgs {
    /// Tokenizer file, or `byte-level` for the untrained byte vocabulary.
    #[arg(long)]
    pub model: String,
    /// Directory with one file per domain.
    #[arg(long)]
    pub corpora: PathBuf,
}

#[derive(Args, Debug)]
pub struct DedupIo {
    /// JSON-lines corpus of `{id, text, source}`.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Where to write the surviving documents.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON report file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum DedupCmd {
    /// Drop documents whose normalised text is identical.
    Exact(DedupIo),
    /// MinHash + LSH near-duplicate removal.
    Fuzzy {
        #[command(flatten)]
        io: DedupIo,
        /// Number of hash functions.
        #[arg(long, default_value_t = 128)]
        k: usize,
        #[arg(long, default_value_t = 16)]
        bands: usize,
        #[arg(long, default_value_t = 8)]
        rows: usize,
        /// Minimum exact Jaccard similarity to merge a candidate pair.
        #[arg(long, default_value_t = 0.8)]
        jaccard: f64,
        /// Word shingle width.
        #[arg(long, default_value_t = 5)]
        shingle: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand, Debug)]
pub enum CodeCmd {
    /// Order repository files so imported files come first.
    Toposort {
        /// JSON `{nodes: [file], edges: [[importer, imported]]}`.
        #[arg(long)]
        graph: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum VisionCmd {
    /// Print the slice plan and token budget of an image.
    Plan {
        #[arg(long, conflicts_with = "size", required_unless_present = "size")]
        image: Option<PathBuf>,
        /// Image size as WIDTHxHEIGHT instead of a file.
        #[arg(long, value_parser = parse_size)]
        size: Option<(usize, usize)>,
    },
    /// Encode an image into connector tokens.
    Encode {
        #[arg(long)]
        image: PathBuf,
        /// Checkpoint directory or `toy:SEED`.
        #[arg(long)]
        ckpt: String,
        /// Tensor output (raw little-endian f32 plus a `.json` header).
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum AudioCmd {
    /// Report the clip plan and token counts of a WAV file.
    Tokens {
        #[arg(long)]
        wav: PathBuf,
        /// Checkpoint directory or `toy:SEED`; enables encoding.
        #[arg(long)]
        ckpt: Option<String>,
        /// Write the projected embeddings (requires --ckpt).
        #[arg(long, requires = "ckpt")]
        dump: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct PackArgs {
    /// JSON-lines sample manifest; media paths are relative to it.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 4096)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional JSON report file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Checkpoint used to embed the samples.
    #[arg(long, default_value = "toy:0")]
    pub ckpt: String,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long, default_value = "toy:0")]
    pub ckpt: String,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 16)]
    pub max_new: usize,
}

#[derive(Args, Debug)]
pub struct InferOmniArgs {
    #[arg(long, default_value = "toy:0")]
    pub ckpt: String,
    /// JSON-lines sample manifest; media paths are relative to it.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub max_new: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModelSize {
    Toy,
    Tiny,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ModelSize::Toy)]
    pub size: ModelSize,
}

#[derive(Subcommand, Debug)]
pub enum StagesCmd {
    /// Table of the builtin training stages.
    List,
    /// Learning rate of a stage at every step.
    Lr {
        #[arg(long)]
        stage: String,
        #[arg(long)]
        total: usize,
        /// CSV output of `step,lr`.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value = "toy:0")]
    pub ckpt: String,
    #[arg(long = "input", default_value_t = 128)]
    pub input_tokens: usize,
    #[arg(long = "output", default_value_t = 128)]
    pub output_tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackendKind {
    /// Replies read in order from --script.
    Scripted,
    /// Deterministic heuristic replies.
    Rule,
    /// Greedy continuation from the checkpoint's language model.
    Toy,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ClientKind {
    /// Built-in offline fixtures.
    Mock,
    /// GET <endpoint>?q=<query> returning a JSON list.
    Http,
}

#[derive(Args, Debug)]
pub struct SearchChatArgs {
    #[arg(long)]
    pub query: String,
    #[arg(long, value_enum, default_value_t = BackendKind::Rule)]
    pub backend: BackendKind,
    #[arg(long, value_enum, default_value_t = ClientKind::Mock)]
    pub client: ClientKind,
    /// JSON array of replies for the scripted backend.
    #[arg(long, required_if_eq("backend", "scripted"))]
    pub script: Option<PathBuf>,
    /// Search endpoint for the HTTP client.
    #[arg(long, required_if_eq("client", "http"))]
    pub endpoint: Option<String>,
    /// Number of sources to read.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value = "toy:0")]
    pub ckpt: String,
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
    /// Where to save the JSON transcript.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(w)?, parse(h)?))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
