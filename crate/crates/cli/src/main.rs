use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use gramrag::eval::{self, SweepGrid};
use gramrag::trace::write_jsonl;
use gramrag::{
    Backend, Bm25Params, Deps, EngineConfig, EstimatorKind, HttpBackend, IclFamily, LayerSelector,
    MockBackend, Question, SearchIndex, TemplateSet, BACKEND_URL_ENV,
};

#[derive(Parser)]
#[command(name = "gramrag", version, about = "Uncertainty-gated retrieval-augmented question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a BM25 index from a line-delimited corpus.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer one question and print the trace.
    Ask {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        question: String,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a dataset and report EM/F1.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Per-question records, one JSON object per line.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate a seeded random subset of this size.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Benchmark every point of a hyperparameter grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Axes such as "delta=-7,-6,-5;num_samples=10,20;layer_selector=middle,16;top_n=3".
        #[arg(long)]
        grid: String,
        /// Full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Query the backend's /health endpoint.
    Health {
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Http,
    Mock,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "http")]
    backend: BackendKind,
    #[arg(long, env = BACKEND_URL_ENV, default_value = "http://127.0.0.1:8000")]
    backend_url: String,
    /// JSON script for the mock backend.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long, alias = "backend_timeout_secs")]
    backend_timeout_secs: Option<f64>,
    #[arg(long, alias = "backend_retries")]
    backend_retries: Option<u32>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    index: PathBuf,
    /// TOML file with engine settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long, alias = "top_n")]
    top_n: Option<usize>,
    #[arg(long, alias = "num_samples")]
    num_samples: Option<usize>,
    #[arg(long, alias = "layer_selector")]
    layer_selector: Option<LayerSelector>,
    #[arg(long, allow_hyphen_values = true)]
    delta: Option<f64>,
    #[arg(long)]
    estimator: Option<EstimatorKind>,
    #[arg(long, alias = "max_retrievals")]
    max_retrievals: Option<usize>,
    #[arg(long, alias = "max_iterations")]
    max_iterations: Option<usize>,
    #[arg(long, alias = "query_token_drop_prob")]
    query_token_drop_prob: Option<f64>,
    #[arg(long, alias = "sampling_temperature")]
    sampling_temperature: Option<f64>,
    #[arg(long, alias = "gram_alpha")]
    gram_alpha: Option<f64>,
    #[arg(long, alias = "icl_example_count")]
    icl_example_count: Option<usize>,
    #[arg(long, alias = "icl_family")]
    icl_family: Option<IclFamily>,
    #[arg(long, alias = "max_new_tokens")]
    max_new_tokens: Option<usize>,
    #[arg(long, alias = "max_answer_tokens")]
    max_answer_tokens: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-hop preset: at most one search per question.
    #[arg(long)]
    simple_qa: bool,
}

impl RunArgs {
    fn config(&self) -> Result<EngineConfig> {
        let mut c = match &self.config {
            Some(path) => EngineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None if self.overrides.simple_qa => EngineConfig::simple_qa(),
            None => EngineConfig::default(),
        };
        let o = &self.overrides;
        if o.simple_qa {
            c.max_retrievals = 1;
        }
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = o.$field.clone() {
                    c.$field = v;
                }
            )*};
        }
        apply!(
            top_n,
            num_samples,
            layer_selector,
            delta,
            estimator,
            max_retrievals,
            max_iterations,
            query_token_drop_prob,
            sampling_temperature,
            gram_alpha,
            icl_example_count,
            icl_family,
            max_new_tokens,
            max_answer_tokens,
            workers,
            seed
        );
        if let Some(v) = self.backend.backend_timeout_secs {
            c.backend_timeout_secs = v;
        }
        if let Some(v) = self.backend.backend_retries {
            c.backend_retries = v;
        }
        c.validate()?;
        Ok(c)
    }
}

impl BackendArgs {
    fn build(&self, config: &EngineConfig) -> Result<Box<dyn Backend>> {
        Ok(match self.backend {
            BackendKind::Http => Box::new(HttpBackend::new(
                self.backend_url.clone(),
                Duration::from_secs_f64(config.backend_timeout_secs),
                config.backend_retries as usize,
            )?),
            BackendKind::Mock => {
                let Some(path) = &self.mock_script else {
                    bail!("--backend mock needs --mock-script");
                };
                Box::new(MockBackend::load(path)?)
            }
        })
    }
}

fn load_index(dir: &Path) -> Result<SearchIndex> {
    SearchIndex::load(dir).with_context(|| format!("loading index from {}", dir.display()))
}

fn templates(config: &EngineConfig) -> TemplateSet {
    TemplateSet::for_family(config.icl_family, config.icl_example_count)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Index { corpus, out } => {
            let docs = gramrag::retrieval::read_corpus(&corpus)
                .with_context(|| format!("reading {}", corpus.display()))?;
            let index = SearchIndex::build(docs, Bm25Params::default())?;
            index.save(&out)?;
            info!(
                "indexed {} documents ({} terms) into {}",
                index.doc_count(),
                index.terms().count(),
                out.display()
            );
        }
        Command::Ask { run, question, trace } => {
            let config = run.config()?;
            let backend = run.backend.build(&config)?;
            let index = load_index(&run.index)?;
            let templates = templates(&config);
            let deps = Deps {
                backend: backend.as_ref(),
                index: &index,
                templates: &templates,
            };
            let q = Question::new("ask", question, Vec::new())?;
            let (result, events) = match gramrag::run_question(q, deps, &config) {
                Ok((answer, state)) => (Ok(answer), state.trace),
                Err(failure) => {
                    let events = failure.state.trace.clone();
                    (Err(failure), events)
                }
            };
            match &trace {
                Some(path) => write_jsonl(BufWriter::new(File::create(path)?), &events)?,
                None => write_jsonl(io::stdout().lock(), &events)?,
            }
            let answer = result?;
            print_json(&answer)?;
        }
        Command::Bench {
            run,
            dataset,
            out,
            limit,
        } => {
            let config = run.config()?;
            let questions = eval::load_dataset(&dataset)?;
            let questions = eval::sample_questions(&questions, limit, config.seed);
            let backend = run.backend.build(&config)?;
            let index = load_index(&run.index)?;
            let templates = templates(&config);
            let deps = Deps {
                backend: backend.as_ref(),
                index: &index,
                templates: &templates,
            };
            let mut sink = match &out {
                Some(path) => Some(BufWriter::new(File::create(path)?)),
                None => None,
            };
            let report = eval::run_benchmark(
                &questions,
                deps,
                &config,
                sink.as_mut().map(|w| w as &mut dyn Write),
            )?;
            print_json(&report.aggregate)?;
        }
        Command::Sweep {
            run,
            dataset,
            grid,
            out,
            limit,
        } => {
            let config = run.config()?;
            let grid = SweepGrid::parse(&grid)?;
            let questions = eval::load_dataset(&dataset)?;
            let questions = eval::sample_questions(&questions, limit, config.seed);
            let index = load_index(&run.index)?;
            let templates = templates(&config);
            let make_backend = || {
                run.backend
                    .build(&config)
                    .map_err(|e| gramrag::BackendError::Script(e.to_string()))
            };
            let report = eval::sweep(&questions, &index, &templates, &config, &grid, &make_backend)?;
            print!("{}", report.render_table());
            if let Some(path) = out {
                serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), &report)?;
            }
        }
        Command::Health { backend } => {
            let config = EngineConfig::default();
            let health = backend.build(&config)?.health()?;
            print_json(&health)?;
        }
    }
    Ok(())
}
