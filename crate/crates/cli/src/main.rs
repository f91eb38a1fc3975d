use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use reinvoke::corpus::CorpusFormat;
use reinvoke::embedding::EncoderKind;
use reinvoke::expansion::ExpansionMode;
use reinvoke::index::Aggregation;
use reinvoke::pipeline::{
    format_explanation, format_results, EmbeddingSettings, GenerationSettings, Pipeline,
    PipelineConfig,
};
use reinvoke::retrieve::Method;

/// Tool retrieval with synthetic-query expansion, intent extraction and
/// multi-view ranking.
#[derive(Debug, Parser)]
#[command(name = "reinvoke", version)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, short = 'c', global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// toolbench-json, toole-json or jsonl.
    #[arg(long, global = true, value_parser = parse_format)]
    corpus_format: Option<CorpusFormat>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Synthetic queries per document (0 indexes raw documents).
    #[arg(short = 'm', long = "queries-per-doc", global = true)]
    m: Option<u32>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// bm25 or dense.
    #[arg(long, global = true)]
    encoder: Option<EncoderKind>,
    /// mean or max.
    #[arg(long, global = true)]
    aggregation: Option<Aggregation>,
    /// append or replace.
    #[arg(long, global = true)]
    expansion_mode: Option<ExpansionMode>,
    /// Comma-separated subset of reinvoke,bm25,dense,hyde.
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Use the raw query as the only intent.
    #[arg(long, global = true)]
    no_intents: bool,
    #[arg(long, global = true)]
    max_intents: Option<usize>,
    /// Retrieval depth.
    #[arg(short = 'k', long, global = true)]
    k: Option<usize>,
    /// Comma-separated evaluation cut-offs.
    #[arg(long, global = true, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Concurrent provider calls / query workers.
    #[arg(long, short = 'j', global = true)]
    jobs: Option<usize>,
    /// Force mock generation and embedding providers.
    #[arg(long, global = true)]
    mock: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load a corpus and write it as canonical JSONL.
    Normalize {
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
    /// Generate synthetic queries for every tool document.
    Expand,
    /// Build the expanded index and baseline indexes.
    Index,
    /// Rank tools for one query or for every dataset query.
    Retrieve {
        /// Ad-hoc query; without it the dataset is run.
        #[arg(long, short = 'q')]
        query: Option<String>,
        /// Print intents, per-intent similarities and reversed ranks.
        #[arg(long, requires = "query")]
        explain: bool,
    },
    /// Score run files against the dataset.
    Evaluate {
        /// Run files; defaults to those written by `retrieve`.
        runs: Vec<PathBuf>,
    },
    /// Recall@k of synthetic queries against their own documents.
    Roundtrip,
}

fn parse_format(s: &str) -> Result<CorpusFormat, String> {
    s.parse().map_err(|e: reinvoke::corpus::CorpusError| e.to_string())
}

fn build_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)
            .with_context(|| format!("loading {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    let o = &cli.overrides;
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = &o.$field { config.$field = v.clone().into(); })*
        };
    }
    set!(corpus, dataset, cache_dir);
    if let Some(v) = &o.work_dir {
        config.work_dir = v.clone();
    }
    if let Some(v) = o.corpus_format {
        config.corpus_format = v;
    }
    if let Some(v) = o.m {
        config.m = v;
    }
    if let Some(v) = o.temperature {
        config.temperature = v;
    }
    if let Some(v) = o.seed {
        config.seed = v;
    }
    if let Some(v) = o.encoder {
        config.encoder = v;
    }
    if let Some(v) = o.aggregation {
        config.aggregation = v;
    }
    if let Some(v) = o.expansion_mode {
        config.expansion_mode = v;
    }
    if let Some(v) = &o.methods {
        let mut methods = v.clone();
        methods.dedup();
        config.methods = methods;
    }
    if o.no_intents {
        config.intents = false;
    }
    if let Some(v) = o.max_intents {
        config.max_intents = v;
    }
    if let Some(v) = o.k {
        config.k = v;
    }
    if let Some(v) = &o.ks {
        config.ks = v.clone();
    }
    if let Some(v) = o.jobs {
        config.jobs = v;
    }
    if o.mock {
        config.generation = GenerationSettings::default();
        config.embedding = EmbeddingSettings::default();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let config = build_config(&cli)?;
    let pipeline = Pipeline::new(config)?;
    let config = pipeline.config();
    match cli.command {
        Command::Normalize { out } => {
            let s = pipeline.normalize(out.as_deref())?;
            println!("wrote {} documents to {}", s.documents, s.path.display());
            println!("corpus hash: {}", s.corpus_hash);
        }
        Command::Expand => {
            let s = pipeline.expand()?;
            println!(
                "expanded {} documents (m = {}): {} generated, {} already present, {} fell back to document text",
                s.documents, config.m, s.generated, s.skipped, s.fallbacks
            );
            println!("expansions: {}", s.path.display());
        }
        Command::Index => {
            for b in pipeline.index()? {
                let m = &b.manifest;
                println!(
                    "{}: {} ({} documents, encoder {}, m = {}, aggregation {}, {})",
                    b.label,
                    b.dir.display(),
                    m.doc_count,
                    m.encoder,
                    m.m,
                    m.aggregation,
                    if b.rebuilt { "built" } else { "up to date" }
                );
                println!("  corpus hash: {}", m.corpus_hash);
            }
        }
        Command::Retrieve { query, explain } => match query {
            Some(q) if explain => {
                if !config.methods.contains(&Method::Reinvoke) {
                    bail!("--explain needs the reinvoke method");
                }
                let exp = pipeline.explain(&q, config.k)?;
                print!("{}", format_explanation(&exp, config.k));
            }
            Some(q) => print!("{}", format_results(&pipeline.retrieve_query(&q, config.k)?)),
            None => {
                let s = pipeline.retrieve_dataset()?;
                println!(
                    "retrieved {} queries ({} excluded: no relevant tool in the corpus)",
                    s.queries,
                    s.excluded.len()
                );
                for (method, path) in &s.files {
                    println!("{method}: {}", path.display());
                }
            }
        },
        Command::Evaluate { runs } => {
            let out = pipeline.evaluate(&runs)?;
            print!("{}", out.text);
            println!("report: {}", out.json_path.display());
        }
        Command::Roundtrip => {
            let out = pipeline.roundtrip()?;
            print!("{}", out.text);
            println!("report: {}", out.json_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
