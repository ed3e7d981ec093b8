//! The `docspot` command line: `index`, `query`, `eval`, `bench` and `synth`.
//!
//! Exit status: 0 success, 2 usage or configuration error, 3 data error
//! (unreadable or inconsistent inputs), 4 internal error.

use std::ffi::OsString;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use docspot::eval::Task;
use docspot::search::Mode;

pub mod commands;
pub mod config;

pub use config::{Config, ConfigError};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "docspot", version, about = "Pattern spotting and image retrieval for scanned pages")]
pub struct Cli {
    /// TOML file overriding the built-in defaults; flags override the file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads [default: available parallelism].
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Propose, describe and hash every region of a page directory.
    Index(IndexArgs),
    /// Rank indexed regions against query images or vectors.
    Query(QueryArgs),
    /// Score queries against ground truth with the IR or PS protocol.
    Eval(EvalArgs),
    /// Time query scans and report index storage.
    Bench(BenchArgs),
    /// Write a synthetic page corpus with ground truth.
    Synth(SynthArgs),
}

#[derive(Debug, Default, Args)]
pub struct ProposalFlags {
    /// Edge-density threshold of the invalid-region filter.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Segmentation scale parameter.
    #[arg(long)]
    pub k: Option<f64>,
    /// Smallest segment after the post-merge pass.
    #[arg(long)]
    pub min_size: Option<usize>,
    /// Gaussian pre-smoothing of the segmentation.
    #[arg(long)]
    pub seg_sigma: Option<f64>,
    /// Smallest accepted box side in pixels.
    #[arg(long)]
    pub min_side: Option<u32>,
    /// Largest accepted box side as a fraction of the page side.
    #[arg(long)]
    pub max_side_frac: Option<f64>,
    #[arg(long)]
    pub canny_sigma: Option<f64>,
    #[arg(long)]
    pub canny_low: Option<f64>,
    #[arg(long)]
    pub canny_high: Option<f64>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Directory of PNG/JPEG pages; page ids are the file stems.
    pub pages: PathBuf,
    /// Output index directory.
    #[arg(long, required_unless_present = "manifest_only")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub proposals: ProposalFlags,
    /// Extractor profile of `--features` (a known name or `external:<dims>`).
    #[arg(long)]
    pub profile: Option<String>,
    /// Precomputed descriptors (PSFEAT01) keyed by region id.
    #[arg(long, value_name = "FILE")]
    pub features: Option<PathBuf>,
    /// Keep descriptors unnormalized for ranking and hashing.
    #[arg(long)]
    pub no_normalize: bool,
    /// Write the crops manifest CSV for an external exporter.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Stop after writing the manifest.
    #[arg(long, requires = "manifest")]
    pub manifest_only: bool,
    /// Per-page proposal counts as JSON lines.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: docspot::Error| e.to_string())
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: docspot::Error| e.to_string())
}

#[derive(Debug, Default, Args)]
pub struct SearchFlags {
    /// euclidean or hamming.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Apply the union post-processing.
    #[arg(long)]
    pub pp: bool,
    /// Candidates entering the union step.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub pool_size: Option<u64>,
    /// Overlap above which the worse of two boxes is dropped.
    #[arg(long)]
    pub union_iou: Option<f64>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Index directory.
    pub index: PathBuf,
    /// Query images, or directories of them.
    pub queries: Vec<PathBuf>,
    /// Precomputed query descriptors (PSFEAT01); ids become query ids.
    #[arg(long, value_name = "FILE")]
    pub vectors: Option<PathBuf>,
    /// Results per query.
    #[arg(short, long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: Option<u64>,
    #[command(flatten)]
    pub search: SearchFlags,
    /// JSON lines output file [default: stdout].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Directory for page images with the top results drawn on them.
    #[arg(long, value_name = "DIR")]
    pub overlay: Option<PathBuf>,
    /// Results drawn per query in overlays.
    #[arg(long, default_value_t = 5)]
    pub overlay_top: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Index directory.
    pub index: PathBuf,
    /// Ground truth JSON.
    #[arg(long, value_name = "FILE")]
    pub gt: PathBuf,
    /// ir or ps.
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    /// Cut-offs, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u64).range(1..))]
    pub top_n: Vec<u64>,
    #[command(flatten)]
    pub search: SearchFlags,
    /// IoU needed for a pattern-spotting hit.
    #[arg(long)]
    pub ps_iou: Option<f64>,
    /// Precomputed query descriptors; record `i` belongs to the i-th query.
    #[arg(long, value_name = "FILE")]
    pub vectors: Option<PathBuf>,
    /// Report file [default: stdout].
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Index directory.
    pub index: PathBuf,
    /// Modes to time, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_values = ["euclidean", "hamming"])]
    pub modes: Vec<Mode>,
    /// Cut queries from the pages named in this ground truth.
    #[arg(long, value_name = "FILE", conflicts_with = "queries")]
    pub gt: Option<PathBuf>,
    /// Directory of query images.
    #[arg(long, value_name = "DIR")]
    pub queries: Option<PathBuf>,
    /// Without --gt or --queries: use this many indexed descriptors.
    #[arg(long, default_value_t = 50)]
    pub sample: usize,
    /// Ranked list length per query.
    #[arg(short, long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (pages/, queries/, gt.json).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pages: Option<usize>,
    /// Glyphs planted per page.
    #[arg(long)]
    pub plants: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise: Option<f32>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub glyph_size: Option<usize>,
}

/// Why a command failed; decides the exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Internal(_) => EXIT_INTERNAL,
        }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Failure::Usage(anyhow::anyhow!("{msg}"))
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Failure::Data(anyhow::anyhow!("{msg}"))
    }

    fn is_broken_pipe(&self) -> bool {
        let (Failure::Usage(e) | Failure::Data(e) | Failure::Internal(e)) = self;
        use std::io::ErrorKind::BrokenPipe;
        e.chain().any(|c| {
            c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == BrokenPipe)
                || c.downcast_ref::<serde_json::Error>().is_some_and(|j| j.io_error_kind() == Some(BrokenPipe))
                || match c.downcast_ref::<docspot::Error>() {
                    Some(docspot::Error::Io(io)) => io.kind() == BrokenPipe,
                    Some(docspot::Error::Json(j)) => j.io_error_kind() == Some(BrokenPipe),
                    _ => false,
                }
        })
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(e) | Failure::Data(e) => write!(f, "{e:#}"),
            Failure::Internal(e) => write!(f, "internal error: {e:#}"),
        }
    }
}

impl From<docspot::Error> for Failure {
    fn from(e: docspot::Error) -> Self {
        Failure::Data(e.into())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Internal(e.into())
    }
}

pub type CmdResult = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();

    let outcome = catch_unwind(AssertUnwindSafe(|| dispatch(&cli)));
    match outcome {
        Ok(Ok(())) => 0,
        // a reader such as `head` closed stdout early
        Ok(Err(f)) if f.is_broken_pipe() => 0,
        Ok(Err(f)) => {
            eprintln!("error: {f}");
            f.code()
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| panic.downcast_ref::<&str>().copied())
                .unwrap_or("panic");
            eprintln!("internal error: {msg}");
            EXIT_INTERNAL
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    let mut config = match &cli.config {
        Some(path) => Config::load(path).map_err(Failure::Usage)?,
        None => Config::default(),
    };
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cli.workers {
            b = b.num_threads(n as usize);
        }
        b.build().map_err(|e| Failure::Internal(e.into()))?
    };
    pool.install(|| match &cli.command {
        Command::Index(a) => commands::cmd_index(a, &mut config),
        Command::Query(a) => commands::cmd_query(a, &mut config),
        Command::Eval(a) => commands::cmd_eval(a, &mut config),
        Command::Bench(a) => commands::cmd_bench(a, &mut config),
        Command::Synth(a) => commands::cmd_synth(a, &mut config),
    })
}
