//! `chop`: ingest, query, generate, compare and inspect.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use chop_core::pipeline::{
    self, build_embedder, build_gateway, load_index, PipelineConfig, PipelineError, SearchMode, Strategy,
};

#[derive(Debug, Parser)]
#[command(name = "chop", version, about = "Context-preserving chunking and retrieval for stitched manuals")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    strategy: Option<Strategy>,

    /// Replay (or, in record mode, append-to) transcript for the LLM gateway.
    #[arg(long, global = true)]
    transcript: Option<PathBuf>,

    #[arg(long, global = true)]
    index: Option<PathBuf>,

    /// Extra `key=value` config overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Args)]
struct SearchFlags {
    #[arg(long)]
    k: Option<usize>,

    /// Brute-force cosine search (default).
    #[arg(long, conflicts_with = "ann")]
    exact: bool,

    /// Search the HNSW graph stored with the index.
    #[arg(long)]
    ann: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Chunk, annotate, embed and index the configured corpus.
    Ingest,
    /// Rank indexed chunks for a query.
    Query {
        text: String,
        #[command(flatten)]
        search: SearchFlags,
        /// Also write `{id, score}` lines to this file.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Answer a question from retrieved evidence.
    Generate {
        question: String,
        #[command(flatten)]
        search: SearchFlags,
    },
    /// Run all strategies over the corpus and query set and write reports.
    Compare {
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Print index metadata.
    Inspect {
        /// One JSON line per chunk after the summary.
        #[arg(long)]
        chunks: bool,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut config = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.strategy {
        config.strategy = s;
    }
    if let Some(t) = &common.transcript {
        config.gateway.transcript = Some(t.clone());
    }
    if let Some(i) = &common.index {
        config.paths.index = Some(i.clone());
    }
    for raw in &common.overrides {
        let (key, value) = raw
            .split_once('=')
            .ok_or_else(|| PipelineError::Usage(format!("--set expects KEY=VALUE, got `{raw}`")))?;
        config.set(key.trim(), value.trim(), None)?;
    }
    config.validate()?;
    Ok(config)
}

fn search_mode(flags: &SearchFlags, config: &PipelineConfig) -> SearchMode {
    match (flags.exact, flags.ann) {
        (true, _) => SearchMode::Exact,
        (_, true) => SearchMode::Ann,
        _ => config.search,
    }
}

fn io_error(path: &std::path::Path, e: std::io::Error) -> PipelineError {
    PipelineError::Stage {
        stage: pipeline::Stage::Report,
        item: Some(path.display().to_string()),
        source: e.into(),
    }
}

fn snippet(text: &str) -> String {
    let flat: String = text.split_whitespace().collect::<Vec<_>>().join(" ");
    match flat.char_indices().nth(120) {
        Some((i, _)) => format!("{}...", &flat[..i]),
        None => flat,
    }
}

fn run(cli: Cli) -> Result<u8, PipelineError> {
    let mut config = load_config(&cli.common)?;
    let mut out = std::io::stdout().lock();
    let print = |out: &mut dyn Write, line: String| {
        let _ = writeln!(out, "{line}");
    };

    match cli.command {
        Command::Ingest => {
            let m = pipeline::cmd_ingest(&config)?;
            print(&mut out, serde_json::to_string_pretty(&m.counters).expect("counters serialize"));
            if let Some(sum) = m.store_checksum {
                print(&mut out, format!("store checksum {sum}"));
            }
        }
        Command::Query { text, search, export } => {
            let store = load_index(&config)?;
            let embedder = build_embedder(&config.embedder)?;
            let k = search.k.unwrap_or(config.generation_k);
            let hits = pipeline::cmd_query(&store, embedder.as_ref(), &text, k, search_mode(&search, &config))?;
            for h in &hits {
                print(&mut out, format!("{:>3}  {:.6}  {}  {}", h.rank, h.score, h.id, snippet(&h.x_text)));
            }
            if let Some(path) = export {
                let file = File::create(&path).map_err(|e| io_error(&path, e))?;
                let mut w = BufWriter::new(file);
                for h in &hits {
                    writeln!(w, "{}", json!({"id": h.id, "score": h.score})).map_err(|e| io_error(&path, e))?;
                }
                w.flush().map_err(|e| io_error(&path, e))?;
            }
        }
        Command::Generate { question, search } => {
            let store = load_index(&config)?;
            let embedder = build_embedder(&config.embedder)?;
            let gateway = build_gateway(&config.gateway)?;
            let k = search.k.unwrap_or(config.generation_k);
            let g = pipeline::cmd_generate(
                &store,
                embedder.as_ref(),
                &gateway,
                &question,
                k,
                search_mode(&search, &config),
            )?;
            tracing::info!(evidence = ?g.evidence.iter().map(|h| &h.id).collect::<Vec<_>>(), "answer: {}", g.answer);
            print(&mut out, g.answer);
        }
        Command::Compare { report_dir } => {
            if let Some(dir) = report_dir {
                config.paths.report_dir = Some(dir);
            }
            let outcome = pipeline::cmd_compare(&config)?;
            print(&mut out, outcome.report.to_text_table());
            let failed = outcome.failures().next().map(|(s, e)| (s, e.to_string(), e.exit_code()));
            if let Some((strategy, message, code)) = failed {
                eprintln!("error: {strategy}: {message}");
                return Ok(code);
            }
        }
        Command::Inspect { chunks } => {
            let store = load_index(&config)?;
            let header = store.header();
            let summary = json!({
                "dimension": header.dimension,
                "embedder": header.embedder,
                "prefix_format": header.prefix_format,
                "chunks": store.len(),
                "ann": store.ann().map(|a| a.params()),
                "checksum": store.checksum(),
            });
            print(&mut out, serde_json::to_string_pretty(&summary).expect("summary serializes"));
            if chunks {
                for item in store.items() {
                    let line = json!({"id": item.id, "metadata": item.metadata, "body": snippet(item.body())});
                    print(&mut out, line.to_string());
                }
            }
        }
    }
    Ok(0)
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_env("CHOP_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    init_logging(cli.common.verbose);
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
