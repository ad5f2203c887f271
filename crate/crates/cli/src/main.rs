use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use covsel::corpus::{
    build_indexes, load_examples, load_predictions, read_jsonl, write_jsonl, write_predictions, IndexBundle,
    PredictionBundle, Split,
};
use covsel::evaluation::{aggregate, EvalRecord, Summary};
use covsel::fixture::{gen_fixture, FixtureConfig, GrammarConfig, SplitKind};
use covsel::gateway::{EndpointConfig, GatewayError, MockOracleConfig};
use covsel::pipeline::{
    configure_threads, evaluate, infer_endpoint, infer_mock, prompt_for, select_all, training_dataset, InferenceRecord,
    PromptConfig, SelectionConfig, SelectionRecord,
};
use covsel::program::Dialect;
use covsel::prompting::{DemoOrder, PromptRecord};
use covsel::retrieval::{Bm25Params, RetrieverConfig, RetrieverVariant};
use covsel::selection::Strategy;

const DEFAULT_K: usize = 24;

#[derive(Parser, Debug)]
#[command(name = "covsel", version, about = "Demonstration selection for in-context semantic parsing")]
struct Cli {
    /// TOML run configuration; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages and in-flight requests.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a corpus and write the index bundle.
    Index(IndexArgs),
    /// Choose demonstrations for every test example.
    Select(SelectArgs),
    /// Render prompts from selections.
    Prompt(PromptArgs),
    /// Complete prompts with an endpoint or the mock oracle.
    Infer(InferArgs),
    /// Score predictions and write the report.
    Eval(EvalArgs),
    /// Index, select, prompt, infer and eval in one go.
    Run(RunArgs),
    /// Generate a synthetic corpus with simulated predictions.
    GenFixture(FixtureArgs),
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    index: IndexOpts,
}

#[derive(Args, Debug, Clone, Default)]
struct IndexOpts {
    /// Comma-separated parents whose bare arguments are values.
    #[arg(long, value_delimiter = ',')]
    value_parents: Option<Vec<String>>,
    #[arg(long)]
    k1: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
struct SelectOpts {
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    retriever: Option<RetrieverVariant>,
    /// Auxiliary beams per prediction record to use.
    #[arg(long)]
    beams: Option<usize>,
    #[arg(long)]
    max_ls_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    candidate_pool: Option<usize>,
    /// Use gold programs instead of predictions.
    #[arg(long)]
    oracle: bool,
    /// Fail over to no selection instead of utterance coverage when a test
    /// example has no predicted structures.
    #[arg(long)]
    no_fallback: bool,
}

#[derive(Args, Debug, Clone, Default)]
struct PromptOpts {
    /// Shuffle demonstrations with this seed instead of ascending score.
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// Leave utterances out of demonstrations.
    #[arg(long)]
    programs_only: bool,
    /// Token budget; demonstrations are dropped from the front to fit.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct InferOpts {
    /// Use the deterministic mock oracle instead of an endpoint.
    #[arg(long)]
    mock: bool,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_retries: Option<u32>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    select: SelectOpts,
}

#[derive(Args, Debug)]
struct PromptArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    selections: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    prompt: PromptOpts,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    infer: InferOpts,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Per-example records JSONL.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Group label in the report, defaults to "all".
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, required_unless_present = "index")]
    corpus: Option<PathBuf>,
    /// Reuse a built index instead of a corpus.
    #[arg(long, conflicts_with = "corpus")]
    index: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Write finetuning prompts for the training split instead of
    /// evaluating the test split.
    #[arg(long)]
    train_mode: bool,
    #[command(flatten)]
    index_opts: IndexOpts,
    #[command(flatten)]
    select: SelectOpts,
    #[command(flatten)]
    prompt: PromptOpts,
    #[command(flatten)]
    infer: InferOpts,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Grammar TOML; the built-in grammar when absent.
    #[arg(long)]
    grammar: Option<PathBuf>,
    #[arg(long, default_value_t = 800)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    #[arg(long, default_value = "held-out-ls")]
    split: SplitKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    beams: usize,
    #[arg(long, default_value_t = 0.1)]
    beam_noise: f64,
}

/// Declarative run configuration. Every field is optional; command-line
/// flags override what is set here.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    strategy: Option<Strategy>,
    k: Option<usize>,
    retriever: Option<RetrieverVariant>,
    beams: Option<usize>,
    max_ls_size: Option<usize>,
    seed: Option<u64>,
    candidate_pool: Option<usize>,
    oracle: Option<bool>,
    fallback_to_cover_utt: Option<bool>,
    k1: Option<f64>,
    b: Option<f64>,
    value_parents: Option<Vec<String>>,
    shuffle_seed: Option<u64>,
    programs_only: Option<bool>,
    budget: Option<usize>,
    jobs: Option<usize>,
    endpoint: EndpointFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EndpointFile {
    base_url: Option<String>,
    model: Option<String>,
    max_retries: Option<u32>,
    timeout_secs: Option<u64>,
}

/// Errors that map to the usage/configuration exit code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("input file not found: {}", path.display())));
    }
    Ok(())
}

impl FileConfig {
    fn selection(&self, o: &SelectOpts) -> Result<(SelectionConfig, Option<usize>)> {
        let defaults = SelectionConfig::default();
        let retriever = RetrieverConfig {
            variant: o.retriever.or(self.retriever).unwrap_or(defaults.retriever.variant),
            k1: self.k1.unwrap_or(defaults.retriever.k1),
            b: self.b.unwrap_or(defaults.retriever.b),
            seed: o.seed.or(self.seed).unwrap_or(0),
        };
        let cfg = SelectionConfig {
            strategy: o.strategy.or(self.strategy).unwrap_or(defaults.strategy),
            retriever,
            k: o.k.or(self.k).unwrap_or(DEFAULT_K),
            max_ls_size: o.max_ls_size.or(self.max_ls_size).or(defaults.max_ls_size),
            candidate_pool: o.candidate_pool.or(self.candidate_pool).unwrap_or(defaults.candidate_pool),
            oracle: o.oracle || self.oracle.unwrap_or(false),
            fallback_to_cover_utt: !o.no_fallback && self.fallback_to_cover_utt.unwrap_or(true),
            seed: o.seed.or(self.seed).unwrap_or(0),
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        let beams = o.beams.or(self.beams);
        if beams == Some(0) {
            return Err(usage("beams must be at least 1"));
        }
        Ok((cfg, beams))
    }

    fn prompt(&self, o: &PromptOpts) -> PromptConfig {
        PromptConfig {
            order: match o.shuffle_seed.or(self.shuffle_seed) {
                Some(seed) => DemoOrder::Shuffled { seed },
                None => DemoOrder::AscendingScore,
            },
            programs_only: o.programs_only || self.programs_only.unwrap_or(false),
            budget: o.budget.or(self.budget),
        }
    }

    fn endpoint(&self, o: &InferOpts) -> EndpointConfig {
        let mut cfg = EndpointConfig::from_env();
        if let Some(url) = o.endpoint.clone().or_else(|| self.endpoint.base_url.clone()) {
            cfg.base_url = url;
        }
        if let Some(model) = o.model.clone().or_else(|| self.endpoint.model.clone()) {
            cfg.model = model;
        }
        if let Some(n) = o.max_retries.or(self.endpoint.max_retries) {
            cfg.max_retries = n;
        }
        if let Some(secs) = self.endpoint.timeout_secs {
            cfg.request_timeout = Duration::from_secs(secs);
        }
        cfg
    }

    fn bm25(&self, o: &IndexOpts) -> Result<Bm25Params> {
        let d = Bm25Params::default();
        let params = Bm25Params { k1: o.k1.or(self.k1).unwrap_or(d.k1), b: o.b.or(self.b).unwrap_or(d.b) };
        RetrieverConfig { k1: params.k1, b: params.b, ..Default::default() }
            .validate()
            .map_err(|e| usage(e.to_string()))?;
        Ok(params)
    }

    fn dialect(&self, o: &IndexOpts) -> Dialect {
        match o.value_parents.clone().or_else(|| self.value_parents.clone()) {
            Some(parents) => Dialect::with_value_parents(parents),
            None => Dialect::default(),
        }
    }
}

fn build_index(corpus_path: &Path, file: &FileConfig, opts: &IndexOpts) -> Result<IndexBundle> {
    require_file(corpus_path)?;
    let corpus = load_examples(corpus_path, &file.dialect(opts))?;
    if !corpus.failures.is_empty() {
        warn!("{} corpus lines skipped", corpus.failures.len());
    }
    let index = build_indexes(&corpus, file.bm25(opts)?);
    println!(
        "examples={} train={} unique_templates={} unique_ls={} skipped={}",
        corpus.len(),
        index.pool.len(),
        corpus.unique_templates(),
        corpus.unique_structures(),
        corpus.failures.len()
    );
    Ok(index)
}

fn load_index(path: &Path) -> Result<IndexBundle> {
    require_file(path)?;
    Ok(IndexBundle::load(path)?)
}

fn read_records<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<Vec<T>> {
    require_file(path)?;
    Ok(read_jsonl(path, what)?)
}

fn run_select(
    index: &IndexBundle,
    predictions: Option<&Path>,
    cfg: &SelectionConfig,
    beams: Option<usize>,
) -> Result<Vec<SelectionRecord>> {
    let tests: Vec<_> = index.examples.iter().filter(|e| e.split == Split::Test).collect();
    if tests.is_empty() {
        warn!("index has no test examples");
    }
    let preds: BTreeMap<String, PredictionBundle> = match predictions {
        Some(path) => {
            require_file(path)?;
            let ids: BTreeSet<String> = tests.iter().map(|e| e.id.clone()).collect();
            load_predictions(path, &index.dialect, Some(&ids), beams)?
        }
        None => {
            if cfg.strategy == Strategy::CoverLs && !cfg.oracle {
                warn!("cover-ls without predictions: every example falls back");
            }
            BTreeMap::new()
        }
    };
    if cfg.strategy == Strategy::CoverLs && !cfg.oracle && preds.is_empty() && !cfg.fallback_to_cover_utt {
        bail!(usage("cover-ls needs --predictions, --oracle, or utterance fallback"));
    }
    Ok(select_all(index, &tests, &preds, cfg)?)
}

fn run_prompts(index: &IndexBundle, selections: &[SelectionRecord], cfg: &PromptConfig) -> Result<Vec<PromptRecord>> {
    selections
        .iter()
        .map(|s| {
            let test = index.example(&s.id).with_context(|| format!("selection for unknown example '{}'", s.id))?;
            Ok(prompt_for(index, test, &s.set, cfg)?)
        })
        .collect()
}

fn run_infer(
    index: &IndexBundle,
    prompts: &[PromptRecord],
    opts: &InferOpts,
    file: &FileConfig,
    width: usize,
) -> Result<Vec<InferenceRecord>> {
    if opts.mock {
        return Ok(infer_mock(index, prompts, &MockOracleConfig::default())?);
    }
    let endpoint = file.endpoint(opts);
    info!("sending {} prompts to {}", prompts.len(), endpoint.base_url);
    Ok(infer_endpoint(prompts, &endpoint, width)?)
}

#[derive(Serialize)]
struct Report<'a> {
    accuracy: f64,
    count: usize,
    #[serde(flatten)]
    summary: &'a Summary,
}

fn write_report(
    summary: &Summary,
    records: &[EvalRecord],
    out: &Path,
    csv_path: Option<&Path>,
    records_path: Option<&Path>,
) -> Result<()> {
    let correct = records.iter().filter(|r| r.exact_match).count();
    let accuracy = if records.is_empty() { 0.0 } else { correct as f64 / records.len() as f64 };
    let report = Report { accuracy, count: records.len(), summary };
    fs::write(out, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = csv_path {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        for row in &summary.rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    if let Some(path) = records_path {
        write_jsonl(path, records)?;
    }
    println!("accuracy={accuracy:.4} count={}", records.len());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let file = load_config(cli.config.as_deref())?;
    let jobs = cli.jobs.or(file.jobs).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        bail!(usage("--jobs must be at least 1"));
    }
    configure_threads(jobs);

    match cli.command {
        Command::Index(a) => {
            let index = build_index(&a.corpus, &file, &a.index)?;
            index.save(&a.out)?;
        }
        Command::Select(a) => {
            let (cfg, beams) = file.selection(&a.select)?;
            let index = load_index(&a.index)?;
            let records = run_select(&index, a.predictions.as_deref(), &cfg, beams)?;
            write_jsonl(&a.out, &records)?;
        }
        Command::Prompt(a) => {
            let index = load_index(&a.index)?;
            let selections: Vec<SelectionRecord> = read_records(&a.selections, "selection JSONL")?;
            let prompts = run_prompts(&index, &selections, &file.prompt(&a.prompt))?;
            write_jsonl(&a.out, &prompts)?;
        }
        Command::Infer(a) => {
            let index = load_index(&a.index)?;
            let prompts: Vec<PromptRecord> = read_records(&a.prompts, "prompt JSONL")?;
            let out = run_infer(&index, &prompts, &a.infer, &file, jobs)?;
            write_jsonl(&a.out, &out)?;
        }
        Command::Eval(a) => {
            let index = load_index(&a.index)?;
            let prompts: Vec<PromptRecord> = read_records(&a.prompts, "prompt JSONL")?;
            let preds: Vec<InferenceRecord> = read_records(&a.predictions, "prediction JSONL")?;
            let records = evaluate(&index, &prompts, &preds, a.label.as_deref())?;
            write_report(&aggregate(&records), &records, &a.out, a.csv.as_deref(), a.records.as_deref())?;
        }
        Command::Run(a) => {
            let (sel_cfg, beams) = file.selection(&a.select)?;
            let prompt_cfg = file.prompt(&a.prompt);
            fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
            let dir = &a.out_dir;
            let index = match (&a.index, &a.corpus) {
                (Some(path), _) => load_index(path)?,
                (None, Some(corpus)) => {
                    let index = build_index(corpus, &file, &a.index_opts)?;
                    index.save(&dir.join("index.json"))?;
                    index
                }
                (None, None) => bail!(usage("run needs --corpus or --index")),
            };
            if a.train_mode {
                let order_seed = a.prompt.shuffle_seed.or(file.shuffle_seed).unwrap_or(sel_cfg.seed);
                let cfg = PromptConfig { order: DemoOrder::Shuffled { seed: order_seed }, ..prompt_cfg };
                let records = training_dataset(&index, sel_cfg.k, sel_cfg.seed, &cfg)?;
                write_jsonl(&dir.join("training.jsonl"), &records)?;
                println!("training_examples={}", records.len());
                return Ok(());
            }
            let selections = run_select(&index, a.predictions.as_deref(), &sel_cfg, beams)?;
            write_jsonl(&dir.join("selections.jsonl"), &selections)?;
            let prompts = run_prompts(&index, &selections, &prompt_cfg)?;
            write_jsonl(&dir.join("prompts.jsonl"), &prompts)?;
            let preds = run_infer(&index, &prompts, &a.infer, &file, jobs)?;
            write_jsonl(&dir.join("predictions.jsonl"), &preds)?;
            let records = evaluate(&index, &prompts, &preds, None)?;
            write_report(
                &aggregate(&records),
                &records,
                &dir.join("report.json"),
                Some(&dir.join("report.csv")),
                Some(&dir.join("records.jsonl")),
            )?;
        }
        Command::GenFixture(a) => {
            let grammar = match &a.grammar {
                Some(path) => {
                    let text = fs::read_to_string(path)
                        .map_err(|e| usage(format!("cannot read grammar {}: {e}", path.display())))?;
                    GrammarConfig::from_toml(&text)?
                }
                None => GrammarConfig::covr(),
            };
            let cfg = FixtureConfig {
                n_train: a.n_train,
                n_test: a.n_test,
                split: a.split,
                seed: a.seed,
                beams: a.beams,
                beam_noise: a.beam_noise,
            };
            let fixture = gen_fixture(&grammar, &cfg)?;
            fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
            fixture.corpus.write_jsonl(&a.out_dir.join("corpus.jsonl"))?;
            write_predictions(&a.out_dir.join("predictions.jsonl"), &fixture.predictions)?;
            let meta = serde_json::json!({ "held_out": fixture.held_out, "test": fixture.meta });
            fs::write(a.out_dir.join("fixture_meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
            println!("train={} test={} held_out={}", cfg.n_train, cfg.n_test, fixture.held_out.len());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<GatewayError>().is_some() {
        return 3;
    }
    match err.downcast_ref::<covsel::Error>() {
        Some(
            covsel::Error::Io { .. }
            | covsel::Error::Config(_)
            | covsel::Error::InvalidK(_)
            | covsel::Error::IndexVersion { .. }
            | covsel::Error::Format { .. },
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
