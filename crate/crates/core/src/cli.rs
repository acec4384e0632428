//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 2 when the run completed but some predictions fell back to
//! Neutral, 1 on any fatal error (including bad arguments).

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::{
    load_dataset, read_predictions, DataError, split_dataset, write_dataset, write_predictions, ColumnMap, Dataset,
    PredictionFile, RunManifest,
};
use crate::ensemble::{compose, run_ensemble, Adjudication, EnsembleConfig, EnsembleError, EnsembleSpec, VoteMode};
use crate::eval::{compare_runs, evaluate, MetricsReport};
use crate::gateway::{BackendConfig, Gateway};
use crate::knn::{
    embed_texts, index_from_rows, knn_classify, read_embeddings, select_k, write_embeddings, EmbeddingIndex,
    EmbeddingRow, EmbeddingVector,
};
use crate::label::{ModelId, Prediction};
use crate::strategies::{
    run_strategy, CorrectionScope, ExampleSelector, FewShotConfig, StrategyConfig, StrategyKind,
    DEFAULT_FEW_SHOT_EXAMPLES,
};
use crate::workflows::{mbcawf_run, miawf_run, write_traces, WorkflowConfig, WorkflowOutput};

#[derive(Debug, Parser)]
#[command(name = "emodetect", version, about = "Emotion classification with LLM prompting, agentic workflows and ensembles")]
pub struct Cli {
    /// Seed for every stochastic choice (splits, example sampling, folds).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify a dataset with one prompting strategy.
    Classify(ClassifyArgs),
    /// Run an agentic workflow.
    #[command(subcommand)]
    Workflow(WorkflowCommand),
    /// Combine prediction files by voting or adjudication.
    Ensemble(EnsembleArgs),
    /// Score prediction files against gold labels.
    Eval(EvalArgs),
    /// Embedding nearest-neighbour classification.
    #[command(subcommand)]
    Knn(KnnCommand),
    /// Write an embedding table for a dataset.
    Embed(EmbedArgs),
    /// Split a labeled dataset into train and test files.
    Split(SplitArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ColumnArgs {
    #[arg(long, default_value = "ID")]
    pub id_col: String,
    #[arg(long, default_value = "Texts")]
    pub text_col: String,
    #[arg(long, default_value = "Labels")]
    pub label_col: String,
    #[arg(long)]
    pub language_col: Option<String>,
}

impl ColumnArgs {
    fn map(&self) -> ColumnMap {
        ColumnMap {
            id: self.id_col.clone(),
            text: self.text_col.clone(),
            label: Some(self.label_col.clone()),
            language: self.language_col.clone(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Output prediction file.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest path; defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Model id written into the output; defaults to the output file stem.
    #[arg(long)]
    pub model_id: Option<String>,
}

impl OutputArgs {
    fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| {
            let mut s = self.out.clone().into_os_string();
            s.push(".manifest.json");
            PathBuf::from(s)
        })
    }

    fn model_id(&self) -> Result<ModelId> {
        let id = match &self.model_id {
            Some(m) => m.clone(),
            None => self
                .out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        ModelId::new(id).map_err(|_| anyhow!("model id is empty; pass --model-id"))
    }
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// Backend config file (TOML).
    #[arg(long)]
    pub backend: PathBuf,
    /// Response cache directory; overrides the config file.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

impl BackendArgs {
    fn load(&self) -> Result<(BackendConfig, Arc<Gateway>)> {
        load_backend(&self.backend, self.cache_dir.as_deref())
    }
}

fn load_backend(path: &Path, cache_dir: Option<&Path>) -> Result<(BackendConfig, Arc<Gateway>)> {
    let mut cfg = BackendConfig::load(path).with_context(|| format!("backend config {}", path.display()))?;
    if let Some(d) = cache_dir {
        cfg.cache_dir = Some(d.to_path_buf());
    }
    let gw = Gateway::from_config(&cfg).with_context(|| format!("backend config {}", path.display()))?;
    Ok((cfg, Arc::new(gw)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectorKind {
    Random,
    Knn,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long, value_enum)]
    pub strategy: StrategyKind,
    /// Dataset to classify (TSV).
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub columns: ColumnArgs,
    #[arg(long, value_enum, default_value = "neutral")]
    pub correction_scope: CorrectionScope,
    /// Backend config for the ZSEC correction model; the main backend when absent.
    #[arg(long)]
    pub second_backend: Option<PathBuf>,
    /// Labeled training set for few-shot examples.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "random")]
    pub selector: SelectorKind,
    #[arg(long, default_value_t = DEFAULT_FEW_SHOT_EXAMPLES)]
    pub examples: usize,
    /// Precomputed embedding table for the training set (knn selector).
    #[arg(long)]
    pub train_embeddings: Option<PathBuf>,
    /// Precomputed embedding table for the input (knn selector).
    #[arg(long)]
    pub query_embeddings: Option<PathBuf>,
    /// Truncate freshly fetched embeddings to this many coordinates.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum WorkflowCommand {
    /// Adjudicate between two prediction files, optionally iterated.
    Miawf(MiawfArgs),
    /// Five binary classifiers plus adjudication and Neutral recheck.
    Mbcawf(MbcawfArgs),
}

#[derive(Debug, Args)]
pub struct MiawfArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Dataset holding the tweet texts.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub iterations: usize,
    /// JSON object mapping model id to dev-set F1.
    #[arg(long)]
    pub dev_scores: Option<PathBuf>,
    /// Ask the adjudicator even when both labels agree.
    #[arg(long)]
    pub call_on_identical: bool,
    /// Trace file (JSONL); defaults to `<out>.trace.jsonl`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Debug, Args)]
pub struct MbcawfArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Member prediction files.
    pub members: Vec<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "config")]
    pub mode: Option<VoteMode>,
    /// Ensemble definitions (TOML with [[ensemble]] tables).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON object mapping member model id to weight (weighted mode).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Backend config for llm_adjudicated mode.
    #[arg(long)]
    pub adjudicator: Option<PathBuf>,
    /// Dataset holding the tweet texts (llm_adjudicated mode).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gold: PathBuf,
    /// One or more prediction files; several produce a comparison table.
    #[arg(long, required = true, num_args = 1..)]
    pub pred: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: ReportFormat,
    /// Write the confusion matrix of the first prediction file as TSV.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Debug, Subcommand)]
pub enum KnnCommand {
    /// Choose k by stratified cross-validation on the training set.
    SelectK(SelectKArgs),
    /// Label a dataset by its nearest training neighbours.
    Classify(KnnClassifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EmbeddingSource {
    /// Backend config used to fetch embeddings when a TSV dataset is given.
    #[arg(long)]
    pub backend: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Truncate embeddings to this many coordinates.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelectKArgs {
    /// Labeled dataset or embedding table.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 1)]
    pub k_min: usize,
    #[arg(long, default_value_t = 20)]
    pub k_max: usize,
    #[arg(long, value_enum, default_value = "text")]
    pub format: ReportFormat,
    #[command(flatten)]
    pub source: EmbeddingSource,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Debug, Args)]
pub struct KnnClassifyArgs {
    /// Labeled dataset or embedding table.
    #[arg(long)]
    pub train: PathBuf,
    /// Dataset or embedding table to classify.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[command(flatten)]
    pub source: EmbeddingSource,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Omit labels even if the dataset has them.
    #[arg(long)]
    pub unlabeled: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub n_train: usize,
    #[arg(long)]
    pub train_out: PathBuf,
    #[arg(long)]
    pub test_out: PathBuf,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(Outcome::Clean) => 0,
        Ok(Outcome::Degraded(n)) => {
            eprintln!("warning: {n} prediction(s) fell back to Neutral");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Clean,
    Degraded(u64),
}

impl Outcome {
    fn from_fallbacks(n: u64) -> Self {
        if n == 0 {
            Outcome::Clean
        } else {
            Outcome::Degraded(n)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Classify(a) => cmd_classify(a, cli.seed),
        Command::Workflow(WorkflowCommand::Miawf(a)) => cmd_miawf(a, cli.seed),
        Command::Workflow(WorkflowCommand::Mbcawf(a)) => cmd_mbcawf(a, cli.seed),
        Command::Ensemble(a) => cmd_ensemble(a, cli.seed),
        Command::Eval(a) => cmd_eval(a),
        Command::Knn(KnnCommand::SelectK(a)) => cmd_select_k(a, cli.seed),
        Command::Knn(KnnCommand::Classify(a)) => cmd_knn_classify(a, cli.seed),
        Command::Embed(a) => cmd_embed(a),
        Command::Split(a) => cmd_split(a, cli.seed),
    }
}

/// Loads a dataset; a missing label column means an unlabeled dataset.
fn load_input(path: &Path, columns: &ColumnArgs) -> Result<Dataset> {
    let map = columns.map();
    match load_dataset(path, &map) {
        Err(DataError::MissingColumn { column, .. }) if column == columns.label_col => {
            load_dataset(path, &map.unlabeled())
        }
        r => r,
    }
    .with_context(|| format!("loading {}", path.display()))
}

fn load_labeled(path: &Path, columns: &ColumnArgs) -> Result<Dataset> {
    let d = load_input(path, columns)?;
    if let Some(i) = d.instances.iter().find(|i| i.gold.is_none()) {
        bail!("{}: instance {:?} has no label", path.display(), i.id);
    }
    Ok(d)
}

/// Writes a report line to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn read_score_map(path: &Path) -> Result<HashMap<String, f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: expected a JSON object of numbers", path.display()))
}

fn merge_settings(manifest: &mut RunManifest, extra: serde_json::Value) {
    if !manifest.settings.is_object() {
        manifest.settings = serde_json::json!({});
    }
    if let (Some(dst), serde_json::Value::Object(src)) = (manifest.settings.as_object_mut(), extra) {
        dst.extend(src);
    }
}

fn finish(pf: &PredictionFile, manifest: &RunManifest, out: &OutputArgs) -> Result<Outcome> {
    write_predictions(pf, &out.out).with_context(|| format!("writing {}", out.out.display()))?;
    let mpath = out.manifest_path();
    manifest.write(&mpath).with_context(|| format!("writing {}", mpath.display()))?;
    eprintln!(
        "{}: {} predictions, {} backend calls, {} cache hits, {} fallbacks",
        out.out.display(),
        manifest.counts.instances,
        manifest.counts.backend_calls,
        manifest.counts.cache_hits,
        manifest.counts.fallbacks
    );
    Ok(Outcome::from_fallbacks(manifest.counts.fallbacks))
}

fn is_embedding_table(path: &Path) -> Result<bool> {
    use std::io::{BufRead, BufReader};
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut first = String::new();
    BufReader::new(f).read_line(&mut first)?;
    Ok(first.starts_with("#model_id="))
}

/// Embedding rows for `path`, which is either an embedding table or a dataset
/// to embed through `gw`.
fn rows_for(
    path: &Path,
    columns: &ColumnArgs,
    gw: Option<&Gateway>,
    dim: Option<usize>,
    labeled: bool,
) -> Result<Vec<EmbeddingRow>> {
    if is_embedding_table(path)? {
        let rows = read_embeddings(path).with_context(|| format!("reading {}", path.display()))?;
        return match dim {
            None => Ok(rows),
            Some(d) => rows
                .into_iter()
                .map(|r| {
                    Ok(EmbeddingRow {
                        vector: r.vector.truncate(d)?,
                        ..r
                    })
                })
                .collect(),
        };
    }
    let gw = gw.ok_or_else(|| anyhow!("{} is a dataset; pass --backend to embed it", path.display()))?;
    let d = if labeled { load_labeled(path, columns)? } else { load_input(path, columns)? };
    let texts: Vec<String> = d.instances.iter().map(|i| i.text.clone()).collect();
    let vectors = embed_texts(gw, &texts, dim)?;
    Ok(d
        .instances
        .into_iter()
        .zip(vectors)
        .map(|(i, vector)| EmbeddingRow {
            id: i.id,
            label: i.gold,
            vector,
        })
        .collect())
}

fn optional_gateway(src: &EmbeddingSource) -> Result<Option<(BackendConfig, Arc<Gateway>)>> {
    src.backend
        .as_deref()
        .map(|p| load_backend(p, src.cache_dir.as_deref()))
        .transpose()
}

fn cmd_classify(a: &ClassifyArgs, seed: u64) -> Result<Outcome> {
    let d = load_input(&a.input, &a.columns)?;
    let (bcfg, gw) = a.backend.load()?;
    let model_id = a.output.model_id()?;
    let mut cfg = StrategyConfig::new(a.strategy, model_id, gw.clone());
    cfg.seed = seed;

    let mut extra = serde_json::json!({
        "input": a.input,
        "backend": bcfg.redacted(),
    });
    if a.strategy == StrategyKind::Zsec {
        let second = match &a.second_backend {
            Some(p) => {
                let (c2, g2) = load_backend(p, a.backend.cache_dir.as_deref())?;
                extra["second_backend"] = c2.redacted();
                Some(g2)
            }
            None => None,
        };
        cfg = cfg.with_correction(a.correction_scope, second);
    }
    if a.strategy == StrategyKind::FewShot {
        let train_path = a.train.as_ref().ok_or_else(|| anyhow!("few-shot needs --train"))?;
        let train = Arc::new(load_labeled(train_path, &a.columns)?);
        let selector = match a.selector {
            SelectorKind::Random => ExampleSelector::Random { seed },
            SelectorKind::Knn => {
                let train_rows = match &a.train_embeddings {
                    Some(p) => rows_for(p, &a.columns, None, a.dim, true)?,
                    None => rows_for(train_path, &a.columns, Some(&gw), a.dim, true)?,
                };
                let query_rows = match &a.query_embeddings {
                    Some(p) => rows_for(p, &a.columns, None, a.dim, false)?,
                    None => rows_for(&a.input, &a.columns, Some(&gw), a.dim, false)?,
                };
                let queries: HashMap<String, EmbeddingVector> =
                    query_rows.into_iter().map(|r| (r.id, r.vector)).collect();
                ExampleSelector::Knn {
                    index: Arc::new(index_from_rows(train_rows)?),
                    queries: Arc::new(queries),
                }
            }
        };
        extra["train"] = serde_json::json!(train_path);
        cfg = cfg.with_few_shot(FewShotConfig {
            selector,
            examples: a.examples,
            train,
        });
    }

    let out = run_strategy(&d, &cfg)?;
    let mut manifest = out.manifest;
    merge_settings(&mut manifest, extra);
    finish(&out.predictions, &manifest, &a.output)
}

fn trace_path(explicit: &Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let mut s = out.to_path_buf().into_os_string();
        s.push(".trace.jsonl");
        PathBuf::from(s)
    })
}

fn finish_workflow(
    out: WorkflowOutput,
    trace: &Option<PathBuf>,
    output: &OutputArgs,
    extra: serde_json::Value,
) -> Result<Outcome> {
    let tpath = trace_path(trace, &output.out);
    write_traces(&out.traces, &tpath).with_context(|| format!("writing {}", tpath.display()))?;
    let mut manifest = out.manifest;
    merge_settings(&mut manifest, extra);
    finish(&out.predictions, &manifest, output)
}

fn cmd_miawf(a: &MiawfArgs, seed: u64) -> Result<Outcome> {
    if a.iterations == 0 {
        bail!("--iterations must be >= 1");
    }
    let dev_scores = match &a.dev_scores {
        Some(p) => read_score_map(p)?,
        None if a.iterations >= 2 => bail!("--iterations {} needs --dev-scores", a.iterations),
        None => HashMap::new(),
    };
    let d = load_input(&a.input, &a.columns)?;
    let pa = read_predictions(&a.a).with_context(|| format!("reading {}", a.a.display()))?;
    let pb = read_predictions(&a.b).with_context(|| format!("reading {}", a.b.display()))?;
    let (bcfg, gw) = a.backend.load()?;
    let mut cfg = WorkflowConfig::new(gw, a.output.model_id()?);
    cfg.call_on_identical = a.call_on_identical;
    cfg.seed = seed;
    let out = miawf_run(&d, &pa, &pb, &cfg, a.iterations, &dev_scores)?;
    let extra = serde_json::json!({ "input": a.input, "a": a.a, "b": a.b, "backend": bcfg.redacted() });
    finish_workflow(out, &a.trace, &a.output, extra)
}

fn cmd_mbcawf(a: &MbcawfArgs, seed: u64) -> Result<Outcome> {
    let d = load_input(&a.input, &a.columns)?;
    let (bcfg, gw) = a.backend.load()?;
    let mut cfg = WorkflowConfig::new(gw, a.output.model_id()?);
    cfg.seed = seed;
    let out = mbcawf_run(&d, &cfg)?;
    let extra = serde_json::json!({ "input": a.input, "backend": bcfg.redacted() });
    finish_workflow(out, &a.trace, &a.output, extra)
}

fn resolve_against(base: Option<&Path>, member: &str) -> PathBuf {
    let p = PathBuf::from(member);
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p,
    }
}

fn cmd_ensemble(a: &EnsembleArgs, seed: u64) -> Result<Outcome> {
    let name = a.output.model_id()?.to_string();
    let dataset = a.input.as_deref().map(|p| load_input(p, &a.columns)).transpose()?;
    let mut manifest;

    let pf = if let Some(cfg_path) = &a.config {
        if !a.members.is_empty() {
            bail!("member files come from --config; do not also list them");
        }
        let cfg = EnsembleConfig::load(cfg_path)?;
        let base = cfg_path.parent().map(Path::to_path_buf);
        let root = cfg.root_name().to_string();
        manifest = RunManifest::new("ensemble", &root, seed);

        let mut gateways: HashMap<String, Arc<Gateway>> = HashMap::new();
        for spec in cfg.ensembles.iter().filter(|s| s.mode == VoteMode::LlmAdjudicated) {
            let adj = spec
                .adjudicator
                .as_deref()
                .map(|p| resolve_against(base.as_deref(), p))
                .or_else(|| a.adjudicator.clone())
                .ok_or_else(|| EnsembleError::NoAdjudicator(spec.name.clone()))?;
            gateways.insert(spec.name.clone(), load_backend(&adj, a.cache_dir.as_deref())?.1);
        }
        if !gateways.is_empty() && dataset.is_none() {
            bail!("llm_adjudicated ensembles need --input for tweet texts");
        }
        let c = compose(
            &cfg.ensembles,
            &root,
            |m| {
                let path = resolve_against(base.as_deref(), m);
                read_predictions(&path).map_err(EnsembleError::from)
            },
            |spec| {
                Ok(gateways.get(&spec.name).map(|g| Adjudication {
                    dataset: dataset.as_ref().expect("checked above"),
                    gateway: g.as_ref(),
                }))
            },
        )?;
        merge_settings(
            &mut manifest,
            serde_json::json!({
                "config": cfg_path,
                "ensembles": cfg.ensembles,
                "evaluation_order": c.order,
                "tie_rules": cfg.ensembles.iter().map(|s| (s.name.clone(), s.mode.tie_rule())).collect::<HashMap<_, _>>(),
            }),
        );
        let mut out = c.output;
        out.model_id = ModelId::new(name).expect("non-empty");
        for p in &mut out.predictions {
            p.model_id = out.model_id.clone();
        }
        out
    } else {
        let mode = a.mode.ok_or_else(|| anyhow!("pass --mode or --config"))?;
        let files: Vec<PredictionFile> = a
            .members
            .iter()
            .map(|p| read_predictions(p).with_context(|| format!("reading {}", p.display())))
            .collect::<Result<_>>()?;
        let mut spec = EnsembleSpec::new(
            name.clone(),
            mode,
            a.members.iter().map(|p| p.display().to_string()).collect(),
        );
        if let Some(w) = &a.weights {
            spec.weights = read_score_map(w)?.into_iter().collect();
        }
        manifest = RunManifest::new("ensemble", &name, seed);
        let refs: Vec<&PredictionFile> = files.iter().collect();
        let out = if mode == VoteMode::LlmAdjudicated {
            let adj_path = a
                .adjudicator
                .as_deref()
                .ok_or_else(|| anyhow!("llm_adjudicated mode needs --adjudicator"))?;
            let d = dataset
                .as_ref()
                .ok_or_else(|| anyhow!("llm_adjudicated mode needs --input for tweet texts"))?;
            let (bcfg, gw) = load_backend(adj_path, a.cache_dir.as_deref())?;
            let before = gw.stats();
            let out = run_ensemble(&spec, &refs, Some(&Adjudication { dataset: d, gateway: &gw }))?;
            let after = gw.stats();
            manifest.backend_model = gw.model().to_string();
            manifest.counts.backend_calls = after.backend_calls - before.backend_calls;
            manifest.counts.cache_hits = after.cache_hits - before.cache_hits;
            merge_settings(&mut manifest, serde_json::json!({ "adjudicator": bcfg.redacted() }));
            out
        } else {
            run_ensemble(&spec, &refs, None)?
        };
        merge_settings(
            &mut manifest,
            serde_json::json!({ "mode": mode.name(), "members": spec.members, "weights": spec.weights, "tie_rule": mode.tie_rule() }),
        );
        out
    };
    manifest.counts.instances = pf.len() as u64;
    manifest.counts.fallbacks = pf.fallback_count() as u64;
    manifest.finish();
    finish(&pf, &manifest, &a.output)
}

fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let gold = load_labeled(&a.gold, &a.columns)?;
    let mut reports: Vec<(String, MetricsReport)> = Vec::new();
    for p in &a.pred {
        let pf = read_predictions(p).with_context(|| format!("reading {}", p.display()))?;
        let r = evaluate(&gold, &pf).with_context(|| format!("evaluating {}", p.display()))?;
        reports.push((pf.model_id.to_string(), r));
    }
    if let Some(path) = &a.confusion {
        crate::dataset::write_atomic(path, reports[0].1.confusion.to_tsv().as_bytes())?;
    }
    let text = match (a.format, reports.len()) {
        (ReportFormat::Json, 1) => serde_json::to_string_pretty(&reports[0].1)?,
        (ReportFormat::Text, 1) => reports[0].1.to_text(),
        (ReportFormat::Json, _) => serde_json::to_string_pretty(&serde_json::json!({
            "reports": reports.iter().map(|(n, r)| serde_json::json!({ "name": n, "report": r })).collect::<Vec<_>>(),
            "comparison": compare_runs(&reports),
        }))?,
        (ReportFormat::Text, _) => compare_runs(&reports).to_text(),
    };
    emit(text.trim_end())?;
    Ok(Outcome::Clean)
}

fn cmd_select_k(a: &SelectKArgs, seed: u64) -> Result<Outcome> {
    if a.k_min == 0 || a.k_min > a.k_max {
        bail!("need 1 <= --k-min <= --k-max");
    }
    let gw = optional_gateway(&a.source)?;
    let rows = rows_for(&a.train, &a.columns, gw.as_ref().map(|g| g.1.as_ref()), a.source.dim, true)?;
    let index = index_from_rows(rows)?;
    let report = select_k(&index, a.k_min..=a.k_max, a.folds, seed)?;
    match a.format {
        ReportFormat::Text => emit(report.to_text().trim_end())?,
        ReportFormat::Json => emit(&serde_json::to_string_pretty(&report)?)?,
    }
    Ok(Outcome::Clean)
}

fn cmd_knn_classify(a: &KnnClassifyArgs, seed: u64) -> Result<Outcome> {
    let gw = optional_gateway(&a.source)?;
    let gref = gw.as_ref().map(|g| g.1.as_ref());
    let index: EmbeddingIndex = index_from_rows(rows_for(&a.train, &a.columns, gref, a.source.dim, true)?)?;
    let queries = rows_for(&a.input, &a.columns, gref, a.source.dim, false)?;
    let model_id = a.output.model_id()?;
    let preds = queries
        .iter()
        .map(|q| {
            let l = knn_classify(&q.vector, &index, a.k)?;
            Ok(Prediction::labeled(&q.id, l, model_id.clone(), ""))
        })
        .collect::<Result<Vec<_>>>()?;
    let pf = PredictionFile::new(model_id.clone(), preds)?;
    let mut manifest = RunManifest::new("knn", model_id.as_str(), seed);
    manifest.backend_model = index.model_id().to_string();
    manifest.counts.instances = pf.len() as u64;
    merge_settings(
        &mut manifest,
        serde_json::json!({
            "k": a.k,
            "train": a.train,
            "input": a.input,
            "dim": index.dim(),
            "truncated_from": index.entries()[0].vector.truncated_from,
            "backend": gw.as_ref().map(|g| g.0.redacted()),
        }),
    );
    manifest.finish();
    finish(&pf, &manifest, &a.output)
}

fn cmd_embed(a: &EmbedArgs) -> Result<Outcome> {
    let d = if a.unlabeled {
        load_dataset(&a.input, &a.columns.map().unlabeled()).with_context(|| format!("loading {}", a.input.display()))?
    } else {
        load_input(&a.input, &a.columns)?
    };
    let (_, gw) = a.backend.load()?;
    let texts: Vec<String> = d.instances.iter().map(|i| i.text.clone()).collect();
    let vectors = embed_texts(&gw, &texts, a.dim)?;
    let rows: Vec<EmbeddingRow> = d
        .instances
        .into_iter()
        .zip(vectors)
        .map(|(i, vector)| EmbeddingRow {
            id: i.id,
            label: i.gold,
            vector,
        })
        .collect();
    write_embeddings(&rows, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("{}: {} embeddings", a.out.display(), rows.len());
    Ok(Outcome::Clean)
}

fn cmd_split(a: &SplitArgs, seed: u64) -> Result<Outcome> {
    let d = load_input(&a.input, &a.columns)?;
    let (train, test) = split_dataset(&d, a.n_train, seed)?;
    write_dataset(&train, &a.train_out)?;
    write_dataset(&test, &a.test_out)?;
    eprintln!("{} train / {} test instances", train.len(), test.len());
    Ok(Outcome::Clean)
}
