//! Experiment orchestration behind the `fewshot` binary.
//!
//! Every command reads and writes plain files. A classification run lives in
//! `<runs_dir>/<run_id>/` as `manifest.json` (config snapshot, input hashes,
//! one record per test item) plus `ledger.jsonl` (one usage record per call).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentor::{
    build_groups, filter_generated, parse_generation_output, render_generation_prompt, write_generated, AugmentError,
    GenerationRequest, LabelGroup, Rejection,
};
use crate::corpus::{
    banking77_label_set, load_dataset, mix_augmented, sample_few_shot, write_jsonl, CorpusError, Dataset, ExemplarSet,
    LabelSet, Origin, RecordFormat, SamplingPlan, Split,
};
use crate::embedder::{
    embed_batch, EmbedError, EmbeddingBackend, EmbeddingCache, EmbeddingProviderConfig, EmbeddingVector, RemoteEmbedder,
    TestEmbedder,
};
use crate::evaluator::{confusion, EvalError, EvalReport};
use crate::gateway::{
    replay_key, run_batch, ChatBackend, Gateway, GatewayError, HttpBackend, MockCentroidOracle, MockReplay,
    ProviderConfig, ReplayEntry,
};
use crate::labelspace::{parse_prediction, Outcome, Prediction};
use crate::ledger::{build_report, file_hash, CostReport, Ledger, LedgerError, PricingTable, ReportRun, UsageRecord};
use crate::promptkit::{
    order_hits, render_classification_prompt, ExampleOrder, Placement, PromptBundle, PromptError, PromptTemplate,
};
use crate::retriever::{fit_centroids, format_pool_fraction, ExemplarIndex, RetrieveError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const EXEMPLARS_FILE: &str = "exemplars.jsonl";
pub const MOCK_ORACLE: &str = "mock-oracle";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("manifest not found: {0}")]
    MissingManifest(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("item {item}: {source}")]
    Item { item: usize, source: GatewayError },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

impl PipelineError {
    /// 1 usage, 2 data, 3 provider.
    pub fn exit_code(&self) -> i32 {
        let gateway = |e: &GatewayError| match e {
            GatewayError::InvalidConfig(_) => 1,
            GatewayError::ContextOverflow { .. } | GatewayError::Ledger(_) => 2,
            _ => 3,
        };
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::Embed(EmbedError::ProviderUnavailable(_) | EmbedError::AuthMissing(_)) => 3,
            PipelineError::Item { source, .. } => gateway(source),
            PipelineError::Gateway(e) => gateway(e),
            _ => 2,
        }
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    #[default]
    Test,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSettings {
    pub backend: EmbeddingKind,
    pub dim: usize,
    pub cache: PathBuf,
    pub max_parallel: usize,
    pub remote: EmbeddingProviderConfig,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        EmbeddingSettings {
            backend: EmbeddingKind::Test,
            dim: 384,
            cache: PathBuf::from("embeddings.fiec"),
            max_parallel: 4,
            remote: EmbeddingProviderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSettings {
    pub groups: usize,
    pub per_class: usize,
    pub override_groups: Option<PathBuf>,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        AugmentSettings {
            groups: crate::augmentor::DEFAULT_GROUPS,
            per_class: crate::augmentor::DEFAULT_GENERATE_PER_CLASS,
            override_groups: None,
        }
    }
}

/// Contents of the `--config` TOML file. Relative paths are resolved against
/// the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub runs_dir: PathBuf,
    /// A label file (one name per line) or `banking77`.
    pub labels: Option<String>,
    pub shots: usize,
    pub seed: u64,
    pub k: usize,
    pub placement: Placement,
    pub example_order: ExampleOrder,
    pub template: Option<PathBuf>,
    pub provider: String,
    pub providers: BTreeMap<String, ProviderConfig>,
    pub pricing: Option<PathBuf>,
    pub top_confusions: usize,
    pub embedding: EmbeddingSettings,
    pub augment: AugmentSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            runs_dir: PathBuf::from("runs"),
            labels: None,
            shots: 3,
            seed: 42,
            k: 5,
            placement: Placement::SystemContext,
            example_order: ExampleOrder::AscendingSimilarity,
            template: None,
            provider: MOCK_ORACLE.to_string(),
            providers: BTreeMap::new(),
            pricing: None,
            top_confusions: 10,
            embedding: EmbeddingSettings::default(),
            augment: AugmentSettings::default(),
        }
    }
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut settings: Settings = toml::from_str(&text).map_err(|e| PipelineError::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        settings.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(settings)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.runs_dir);
        fix(&mut self.embedding.cache);
        self.template.iter_mut().for_each(fix);
        self.pricing.iter_mut().for_each(fix);
        self.augment.override_groups.iter_mut().for_each(fix);
        if let Some(labels) = &mut self.labels {
            if labels != "banking77" && Path::new(labels.as_str()).is_relative() {
                *labels = base.join(&*labels).to_string_lossy().into_owned();
            }
        }
        for provider in self.providers.values_mut() {
            if let crate::gateway::Dialect::MockReplay { path } = &mut provider.dialect {
                fix(path);
            }
        }
    }

    /// Looks `name` up in `[providers]`, then among the built-ins
    /// `mock-oracle` and `replay:<path>`.
    pub fn provider_config(&self, name: &str) -> Result<ProviderConfig> {
        if let Some(config) = self.providers.get(name) {
            return Ok(config.clone());
        }
        if name == MOCK_ORACLE {
            return Ok(ProviderConfig::mock_oracle());
        }
        if let Some(path) = name.strip_prefix("replay:") {
            return Ok(ProviderConfig::mock_replay(path));
        }
        Err(PipelineError::Usage(format!("unknown provider {name:?}")))
    }

    /// The configured label set, or `None` when it should be inferred.
    pub fn label_set(&self) -> Result<Option<LabelSet>> {
        match self.labels.as_deref() {
            None => Ok(None),
            Some("banking77") => Ok(Some(banking77_label_set())),
            Some(path) => Ok(Some(LabelSet::load_lines(Path::new(path))?)),
        }
    }

    fn template(&self) -> Result<PromptTemplate> {
        match &self.template {
            Some(path) => Ok(PromptTemplate::from_file(path)?),
            None => Ok(PromptTemplate::builtin()),
        }
    }
}

/// Settings plus whether network providers may be used.
#[derive(Debug, Clone)]
pub struct Context {
    pub settings: Settings,
    pub live: bool,
}

impl Context {
    pub fn offline(settings: Settings) -> Self {
        Context { settings, live: false }
    }
}

struct Embedding {
    backend: Arc<dyn EmbeddingBackend>,
    cache: Arc<EmbeddingCache>,
    path: PathBuf,
    max_parallel: usize,
}

impl Embedding {
    fn open(ctx: &Context) -> Result<Self> {
        let s = &ctx.settings.embedding;
        let backend: Arc<dyn EmbeddingBackend> = match s.backend {
            EmbeddingKind::Test => Arc::new(TestEmbedder { dim: s.dim }),
            EmbeddingKind::Remote if ctx.live => Arc::new(RemoteEmbedder::new(s.remote.clone())),
            EmbeddingKind::Remote => {
                return Err(PipelineError::Usage("the remote embedder needs --live".into()));
            }
        };
        let cache = if s.cache.exists() {
            EmbeddingCache::load_for_model(&s.cache, backend.model_id())?
        } else {
            EmbeddingCache::new(backend.model_id(), s.dim)
        };
        Ok(Embedding {
            backend,
            cache: Arc::new(cache),
            path: s.cache.clone(),
            max_parallel: s.max_parallel.max(1),
        })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        Ok(embed_batch(texts, self.backend.as_ref(), &self.cache, self.max_parallel)?)
    }

    fn save(&self) -> Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        Ok(self.cache.save(&self.path)?)
    }
}

fn texts_of(items: &[crate::corpus::LabeledUtterance]) -> Vec<String> {
    items.iter().map(|i| i.text.clone()).collect()
}

fn load_with(path: &Path, labels: Option<&LabelSet>, split: Split) -> Result<Dataset> {
    Ok(load_dataset(path, RecordFormat::from_path(path), labels, split)?)
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(file_hash(path)?)
}

fn absolute(path: &Path) -> PathBuf {
    std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub items: usize,
    pub labels: usize,
    pub class_counts: Vec<usize>,
}

/// Validates a CSV or JSONL dataset and writes it as canonical JSONL, plus
/// the label list when `labels_out` is given.
pub fn cmd_ingest(ctx: &Context, input: &Path, out: &Path, labels_out: Option<&Path>) -> Result<IngestSummary> {
    let declared = ctx.settings.label_set()?;
    let dataset = load_with(input, declared.as_ref(), Split::Train)?;
    write_jsonl(out, &dataset.label_set, &dataset.items)?;
    if let Some(path) = labels_out {
        dataset.label_set.save_lines(path)?;
    }
    Ok(IngestSummary {
        items: dataset.items.len(),
        labels: dataset.label_set.len(),
        class_counts: dataset.class_counts(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub texts: usize,
    pub newly_embedded: usize,
    pub cache_entries: usize,
    pub cache: PathBuf,
}

/// Embeds every text of the given dataset files into the configured cache.
pub fn cmd_embed(ctx: &Context, inputs: &[PathBuf]) -> Result<EmbedSummary> {
    let embedding = Embedding::open(ctx)?;
    let before = embedding.cache.len();
    let mut texts = Vec::new();
    for path in inputs {
        let records = crate::corpus::read_records(path, RecordFormat::from_path(path))?;
        texts.extend(records.into_iter().map(|(_, r)| r.text));
    }
    embedding.embed(&texts)?;
    embedding.save()?;
    Ok(EmbedSummary {
        texts: texts.len(),
        newly_embedded: embedding.cache.len() - before,
        cache_entries: embedding.cache.len(),
        cache: embedding.path.clone(),
    })
}

/// Where sampled exemplars come from.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleSource {
    Random,
    Curated(PathBuf),
    /// Originals drawn at random, topped up from a generated file.
    Mixed { generated: PathBuf, generated_per_class: usize },
}

/// Draws exemplars from `train` and writes them to `out`.
pub fn cmd_sample(ctx: &Context, train: &Path, source: &SampleSource, out: &Path) -> Result<ExemplarSet> {
    let declared = ctx.settings.label_set()?;
    let dataset = load_with(train, declared.as_ref(), Split::Train)?;
    let s = &ctx.settings;
    let set = match source {
        SampleSource::Random => sample_few_shot(&dataset, &SamplingPlan::random(s.shots, s.seed))?,
        SampleSource::Curated(path) => sample_few_shot(&dataset, &SamplingPlan::curated(s.shots, path))?,
        SampleSource::Mixed {
            generated,
            generated_per_class,
        } => {
            let originals = sample_few_shot(&dataset, &SamplingPlan::random(s.shots, s.seed))?;
            let mut extra = load_with(generated, Some(&dataset.label_set), Split::Train)?;
            for item in &mut extra.items {
                item.origin = Origin::Generated;
            }
            let extra = ExemplarSet::from_items(dataset.label_set.clone(), extra.items);
            mix_augmented(&originals, &extra, &SamplingPlan::mixed(s.shots, *generated_per_class))?
        }
    };
    set.save(out)?;
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RunMode {
    Fewshot {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        plan: Option<SamplingPlan>,
    },
    Rag {
        k: usize,
        pool_size: usize,
        pool_fraction: String,
        order: ExampleOrder,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub provider: ProviderConfig,
    pub placement: Placement,
    pub mode: RunMode,
    pub template_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pricing_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pricing_path: Option<PathBuf>,
    pub embedding: EmbeddingSettings,
    pub embedding_model: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub index: usize,
    pub query: String,
    pub gold: usize,
    pub exemplar_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarities: Option<Vec<f64>>,
    pub replay_key: String,
    pub estimated_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<UsageRecord>,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ItemRecord {
    /// Failed calls score as Unknown.
    pub fn outcome(&self) -> Outcome {
        self.prediction.as_ref().map_or(Outcome::Unknown, |p| p.outcome)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub setting: String,
    pub config: ConfigSnapshot,
    pub inputs: Vec<InputFile>,
    pub labels: Vec<String>,
    pub mean_estimated_tokens: f64,
    pub records: Vec<ItemRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        if !path.exists() {
            return Err(PipelineError::MissingManifest(path));
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Parse {
            path: path.clone(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn label_set(&self) -> Result<LabelSet> {
        Ok(LabelSet::new(self.labels.iter().cloned())?)
    }

    pub fn input(&self, role: &str) -> Option<&InputFile> {
        self.inputs.iter().find(|i| i.role == role)
    }

    /// Recorded answers keyed like [`MockReplay`] expects.
    pub fn replay_entries(&self) -> Vec<ReplayEntry> {
        self.records
            .iter()
            .filter_map(|r| {
                let text = r.raw_text.clone()?;
                let (prompt_tokens, completion_tokens) =
                    r.usage.as_ref().map_or((0, 0), |u| (u.prompt_tokens, u.completion_tokens));
                Some(ReplayEntry {
                    key: r.replay_key.clone(),
                    response: text,
                    prompt_tokens,
                    completion_tokens,
                    fail_times: None,
                })
            })
            .collect()
    }

    pub fn evaluate(&self, top_n: usize) -> Result<EvalReport> {
        let labels = self.label_set()?;
        let predicted: Vec<Outcome> = self.records.iter().map(ItemRecord::outcome).collect();
        let gold: Vec<usize> = self.records.iter().map(|r| r.gold).collect();
        let matrix = confusion(&predicted, &gold, labels.len())?;
        Ok(EvalReport::build(&matrix, &labels, top_n)?)
    }
}

pub fn new_run_id() -> String {
    let suffix: u32 = rand::thread_rng().gen_range(0..0x100_0000);
    format!("{}-{suffix:06x}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"))
}

/// Either the provider named in the settings, or a replay of recorded
/// answers.
pub enum BackendChoice {
    Configured(ProviderConfig),
    Replay(Vec<ReplayEntry>),
}

/// A fully resolved run, ready to render and execute.
struct PreparedRun {
    labels: LabelSet,
    exemplars: ExemplarSet,
    exemplar_path: PathBuf,
    test: Dataset,
    test_path: PathBuf,
    template: PromptTemplate,
    mode: RunMode,
    setting: String,
    backend: BackendChoice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_id: Option<String>,
    pub setting: Option<String>,
}

/// Where a classic few-shot run takes its exemplars from.
#[derive(Debug, Clone, PartialEq)]
pub enum ExemplarSource {
    File(PathBuf),
    /// Sampled at random from a training file with the configured shots and seed.
    Sample(PathBuf),
}

fn resolve_labels(ctx: &Context, fallback: &Path) -> Result<LabelSet> {
    match ctx.settings.label_set()? {
        Some(labels) => Ok(labels),
        None => {
            let inferred = load_with(fallback, None, Split::Train)?.label_set;
            if inferred.is_empty() {
                return Err(PipelineError::Usage(format!(
                    "{} has no labels to infer from; pass --labels",
                    fallback.display()
                )));
            }
            Ok(inferred)
        }
    }
}

fn create_run_dir(ctx: &Context, options: &RunOptions) -> Result<(String, PathBuf)> {
    let run_id = options.run_id.clone().unwrap_or_else(new_run_id);
    let dir = ctx.settings.runs_dir.join(&run_id);
    if dir.exists() {
        return Err(PipelineError::Usage(format!("run directory {} already exists", dir.display())));
    }
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok((run_id, dir))
}

/// Classic few-shot: one static example block for every test item.
pub fn cmd_run_fewshot(ctx: &Context, source: &ExemplarSource, test: &Path, options: &RunOptions) -> Result<RunOutput> {
    let s = &ctx.settings;
    let (run_id, dir) = create_run_dir(ctx, options)?;
    let (exemplar_path, plan) = match source {
        ExemplarSource::File(path) => (path.clone(), None),
        ExemplarSource::Sample(train) => {
            let path = dir.join(EXEMPLARS_FILE);
            cmd_sample(ctx, train, &SampleSource::Random, &path)?;
            (path, Some(SamplingPlan::random(s.shots, s.seed)))
        }
    };
    let labels = match source {
        ExemplarSource::Sample(train) => resolve_labels(ctx, train)?,
        ExemplarSource::File(path) => resolve_labels(ctx, path)?,
    };
    let exemplars = ExemplarSet::load(&exemplar_path, &labels)?;
    let shots = plan.as_ref().map_or_else(
        || exemplars.class_counts().into_iter().max().unwrap_or(0),
        |p| p.n_per_class,
    );
    let setting = options
        .setting
        .clone()
        .unwrap_or_else(|| format!("fewshot-{shots}shot-{}", placement_name(s.placement)));
    let prepared = PreparedRun {
        test: load_with(test, Some(&labels), Split::Test)?,
        test_path: test.to_path_buf(),
        labels,
        exemplars,
        exemplar_path,
        template: s.template()?,
        mode: RunMode::Fewshot { plan },
        setting,
        backend: BackendChoice::Configured(s.provider_config(&s.provider)?),
    };
    execute(ctx, prepared, run_id, dir)
}

/// Retrieval-augmented: each test item gets only its `k` nearest pool
/// exemplars.
pub fn cmd_run_rag(ctx: &Context, pool: &Path, test: &Path, options: &RunOptions) -> Result<RunOutput> {
    let s = &ctx.settings;
    let labels = resolve_labels(ctx, pool)?;
    let exemplars = ExemplarSet::load(pool, &labels)?;
    let k = s.k;
    if k == 0 || k > exemplars.len() {
        return Err(PipelineError::Usage(format!(
            "k = {k} must be within 1..={} (pool size)",
            exemplars.len()
        )));
    }
    let test_set = load_with(test, Some(&labels), Split::Test)?;
    let (run_id, dir) = create_run_dir(ctx, options)?;
    let setting = options
        .setting
        .clone()
        .unwrap_or_else(|| format!("rag-k{k}-{}", placement_name(s.placement)));
    let prepared = PreparedRun {
        mode: RunMode::Rag {
            k,
            pool_size: exemplars.len(),
            pool_fraction: format_pool_fraction(k, exemplars.len()),
            order: s.example_order,
        },
        labels,
        exemplars,
        exemplar_path: pool.to_path_buf(),
        test: test_set,
        test_path: test.to_path_buf(),
        template: s.template()?,
        setting,
        backend: BackendChoice::Configured(s.provider_config(&s.provider)?),
    };
    execute(ctx, prepared, run_id, dir)
}

fn placement_name(placement: Placement) -> &'static str {
    match placement {
        Placement::SystemContext => "system",
        Placement::ChatHistory => "chat",
    }
}

/// Per test item: exemplar ids in prompt order, with similarities for RAG.
type Selection = (Vec<usize>, Option<Vec<f64>>);

fn execute(ctx: &Context, run: PreparedRun, run_id: String, dir: PathBuf) -> Result<RunOutput> {
    let s = &ctx.settings;
    let embedding = Embedding::open(ctx)?;
    let needs_vectors =
        matches!(run.mode, RunMode::Rag { .. }) || matches!(&run.backend, BackendChoice::Configured(c) if c.dialect == crate::gateway::Dialect::MockCentroidOracle);
    let exemplar_vectors = if needs_vectors {
        embedding.embed(&texts_of(run.exemplars.exemplars()))?
    } else {
        Vec::new()
    };

    let queries: Vec<String> = run.test.items.iter().map(|i| i.text.clone()).collect();
    let selections: Vec<Selection> = match &run.mode {
        RunMode::Fewshot { .. } => vec![((0..run.exemplars.len()).collect(), None); queries.len()],
        RunMode::Rag { k, order, .. } => {
            let index = ExemplarIndex::build(&run.exemplars, &exemplar_vectors)?;
            let query_vectors = embedding.embed(&queries)?;
            query_vectors
                .iter()
                .map(|q| {
                    let hits = index.top_k(q, *k)?;
                    let ids = order_hits(&hits, *order);
                    let sims = ids
                        .iter()
                        .map(|id| hits.iter().find(|h| h.exemplar_id == *id).expect("hit").similarity)
                        .collect();
                    Ok((ids, Some(sims)))
                })
                .collect::<Result<_>>()?
        }
    };

    let items = run.exemplars.exemplars();
    let bundles: Vec<PromptBundle> = queries
        .iter()
        .zip(&selections)
        .map(|(query, (ids, _))| {
            let chosen: Vec<_> = ids.iter().map(|&id| (id, &items[id])).collect();
            render_classification_prompt(&run.template, &run.labels, &chosen, query, s.placement)
        })
        .collect::<Result<_, _>>()?;

    let provider = match &run.backend {
        BackendChoice::Configured(config) => config.clone(),
        BackendChoice::Replay(_) => ProviderConfig::mock_replay(dir.join("replay.jsonl")),
    };
    if provider.dialect.is_remote() && !ctx.live {
        return Err(PipelineError::Usage(format!(
            "provider {} ({}) calls a network API; pass --live",
            s.provider,
            provider.dialect.name()
        )));
    }
    let backend: Box<dyn ChatBackend> = match (&run.backend, &provider.dialect) {
        (BackendChoice::Replay(entries), _) => Box::new(MockReplay::new(entries.clone())),
        (_, crate::gateway::Dialect::MockReplay { path }) => {
            Box::new(MockReplay::load(path).map_err(io_err(path))?)
        }
        (_, crate::gateway::Dialect::MockCentroidOracle) => {
            let model = fit_centroids(&run.exemplars, &exemplar_vectors)?;
            Box::new(MockCentroidOracle::new(
                model,
                Arc::clone(&embedding.backend),
                Arc::clone(&embedding.cache),
            ))
        }
        _ => Box::new(HttpBackend::new(provider.clone())?),
    };
    let gateway = Gateway::new(provider.clone(), backend)?;
    for (item, bundle) in bundles.iter().enumerate() {
        gateway
            .check_context(bundle)
            .map_err(|source| PipelineError::Item { item, source })?;
    }

    let mut ledger = Ledger::journaled(&dir.join(LEDGER_FILE))?;
    let results = run_batch(&gateway, &bundles, &run_id, &mut ledger)?;
    ledger.flush()?;
    embedding.save()?;

    let records: Vec<ItemRecord> = results
        .into_iter()
        .enumerate()
        .map(|(index, result)| {
            let bundle = &bundles[index];
            let (exemplar_ids, similarities) = selections[index].clone();
            let mut record = ItemRecord {
                index,
                query: queries[index].clone(),
                gold: run.test.items[index].label,
                exemplar_ids,
                similarities,
                replay_key: replay_key(bundle),
                estimated_tokens: bundle.estimated_tokens,
                raw_text: None,
                prediction: None,
                usage: None,
                attempts: 0,
                error: None,
            };
            match result {
                Ok(done) => {
                    record.prediction = Some(parse_prediction(&done.raw_text, &run.labels));
                    record.raw_text = Some(done.raw_text);
                    record.attempts = done.attempt_count;
                    record.usage = Some(done.usage);
                }
                Err(e) => {
                    record.attempts = match &e {
                        GatewayError::RetriesExhausted { attempts, .. } => *attempts,
                        _ => 1,
                    };
                    record.error = Some(e.to_string());
                }
            }
            record
        })
        .collect();

    let mut inputs = vec![
        InputFile {
            role: "exemplars".into(),
            path: absolute(&run.exemplar_path),
            sha256: sha256_file(&run.exemplar_path)?,
        },
        InputFile {
            role: "test".into(),
            path: absolute(&run.test_path),
            sha256: sha256_file(&run.test_path)?,
        },
    ];
    if let Some(path) = s.labels.as_deref().filter(|l| *l != "banking77") {
        inputs.push(InputFile {
            role: "labels".into(),
            path: absolute(Path::new(path)),
            sha256: sha256_file(Path::new(path))?,
        });
    }
    let pricing_hash = s.pricing.as_deref().map(sha256_file).transpose()?;
    let mean_estimated_tokens = if bundles.is_empty() {
        0.0
    } else {
        bundles.iter().map(|b| b.estimated_tokens as f64).sum::<f64>() / bundles.len() as f64
    };
    let manifest = RunManifest {
        run_id,
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        setting: run.setting,
        config: ConfigSnapshot {
            provider,
            placement: s.placement,
            mode: run.mode,
            template_hash: run.template.hash(),
            template_path: s.template.as_deref().map(absolute),
            pricing_hash,
            pricing_path: s.pricing.as_deref().map(absolute),
            embedding: s.embedding.clone(),
            embedding_model: embedding.backend.model_id().to_string(),
        },
        inputs,
        labels: run.labels.names().to_vec(),
        mean_estimated_tokens,
        records,
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(RunOutput { manifest, dir })
}

pub fn cmd_evaluate(manifest: &Path, top_n: usize) -> Result<EvalReport> {
    RunManifest::load(manifest)?.evaluate(top_n)
}

/// Joins the ledgers of several runs into one priced table.
pub fn cmd_cost(manifests: &[PathBuf], pricing: &Path) -> Result<CostReport> {
    let table = PricingTable::load(pricing)?;
    let mut ledger = Ledger::new();
    let mut runs = Vec::with_capacity(manifests.len());
    for path in manifests {
        let manifest = RunManifest::load(path)?;
        let dir = if path.is_dir() {
            path.clone()
        } else {
            path.parent().unwrap_or(Path::new(".")).to_path_buf()
        };
        ledger.load_journal(&dir.join(LEDGER_FILE), &manifest.run_id)?;
        runs.push(ReportRun {
            run_id: manifest.run_id.clone(),
            setting: manifest.setting.clone(),
            micro_f1: Some(manifest.evaluate(0)?.micro_f1),
        });
    }
    Ok(build_report(&ledger, &runs, &table)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Drift {
    pub what: String,
    pub recorded: String,
    pub current: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerunOutput {
    pub run: RunOutput,
    pub drift: Vec<Drift>,
}

/// Compares the manifest's recorded hashes with the files as they are now.
pub fn detect_drift(manifest: &RunManifest) -> Vec<Drift> {
    let mut drift = Vec::new();
    let mut check = |what: String, path: &Path, recorded: &str| {
        let current = file_hash(path).unwrap_or_else(|_| "missing".to_string());
        if current != recorded {
            drift.push(Drift {
                what,
                recorded: recorded.to_string(),
                current,
            });
        }
    };
    for input in &manifest.inputs {
        check(format!("{} ({})", input.role, input.path.display()), &input.path, &input.sha256);
    }
    if let (Some(path), Some(hash)) = (&manifest.config.pricing_path, &manifest.config.pricing_hash) {
        check(format!("pricing ({})", path.display()), path, hash);
    }
    let template = match &manifest.config.template_path {
        Some(path) => PromptTemplate::from_file(path).map(|t| t.hash()).unwrap_or_else(|_| "missing".into()),
        None => PromptTemplate::builtin().hash(),
    };
    if template != manifest.config.template_hash {
        drift.push(Drift {
            what: "template".into(),
            recorded: manifest.config.template_hash.clone(),
            current: template,
        });
    }
    drift
}

/// Re-executes a manifest from its recorded inputs. Without a provider the
/// recorded answers are replayed. Drift is reported, not fatal.
pub fn cmd_rerun(
    ctx: &Context,
    manifest_path: &Path,
    provider: Option<&str>,
    options: &RunOptions,
) -> Result<RerunOutput> {
    let manifest = RunManifest::load(manifest_path)?;
    let drift = detect_drift(&manifest);
    let snapshot = &manifest.config;
    let mut settings = ctx.settings.clone();
    settings.placement = snapshot.placement;
    settings.template = snapshot.template_path.clone();
    settings.embedding = snapshot.embedding.clone();
    settings.pricing = snapshot.pricing_path.clone();
    settings.labels = manifest
        .input("labels")
        .map(|i| i.path.to_string_lossy().into_owned())
        .or(settings.labels);
    let mut ctx = Context {
        settings,
        live: ctx.live,
    };
    let missing = |role: &str| PipelineError::Usage(format!("manifest lists no {role} input"));
    let exemplar_path = manifest.input("exemplars").ok_or_else(|| missing("exemplars"))?.path.clone();
    let test_path = manifest.input("test").ok_or_else(|| missing("test"))?.path.clone();
    let labels = manifest.label_set()?;
    let backend = match provider {
        Some(name) => BackendChoice::Configured(ctx.settings.provider_config(name)?),
        None => BackendChoice::Replay(manifest.replay_entries()),
    };
    if let RunMode::Rag { k, order, .. } = &snapshot.mode {
        ctx.settings.k = *k;
        ctx.settings.example_order = *order;
    }
    let prepared = PreparedRun {
        exemplars: ExemplarSet::load(&exemplar_path, &labels)?,
        test: load_with(&test_path, Some(&labels), Split::Test)?,
        labels,
        exemplar_path,
        test_path,
        template: ctx.settings.template()?,
        mode: snapshot.mode.clone(),
        setting: options.setting.clone().unwrap_or_else(|| manifest.setting.clone()),
        backend,
    };
    let (run_id, dir) = create_run_dir(&ctx, options)?;
    let run = execute(&ctx, prepared, run_id, dir)?;
    Ok(RerunOutput { run, drift })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub run_id: String,
    pub groups: Vec<LabelGroup>,
    pub candidate_lines: usize,
    pub accepted: usize,
    pub per_class_counts: Vec<usize>,
    pub rejections: Vec<Rejection>,
}

/// Groups confusable labels, asks the provider for new examples per group,
/// and writes the filtered survivors to `out` with a rejection report next
/// to it.
pub fn cmd_augment(ctx: &Context, exemplars_path: &Path, out: &Path, options: &RunOptions) -> Result<AugmentSummary> {
    let s = &ctx.settings;
    let labels = resolve_labels(ctx, exemplars_path)?;
    let exemplars = ExemplarSet::load(exemplars_path, &labels)?;
    let groups = match &s.augment.override_groups {
        Some(path) => build_groups(&exemplars, &[], s.augment.groups, Some(path))?,
        None => {
            let embedding = Embedding::open(ctx)?;
            let vectors = embedding.embed(&texts_of(exemplars.exemplars()))?;
            embedding.save()?;
            build_groups(&exemplars, &vectors, s.augment.groups, None)?
        }
    };
    let requests = groups
        .iter()
        .map(|g| GenerationRequest::new(g.clone(), &exemplars, s.augment.per_class))
        .collect::<Result<Vec<_>, _>>()?;
    let bundles: Vec<PromptBundle> = requests.iter().map(|r| render_generation_prompt(r, &labels)).collect();

    let provider = s.provider_config(&s.provider)?;
    if provider.dialect.is_remote() && !ctx.live {
        return Err(PipelineError::Usage(format!("provider {} needs --live", s.provider)));
    }
    let backend: Box<dyn ChatBackend> = match &provider.dialect {
        crate::gateway::Dialect::MockReplay { path } => Box::new(MockReplay::load(path).map_err(io_err(path))?),
        crate::gateway::Dialect::MockCentroidOracle => {
            return Err(PipelineError::Usage(
                "the centroid oracle classifies; augmentation needs a generating provider".into(),
            ))
        }
        _ => Box::new(HttpBackend::new(provider.clone())?),
    };
    let gateway = Gateway::new(provider, backend)?;
    let (run_id, dir) = create_run_dir(ctx, options)?;
    let mut ledger = Ledger::journaled(&dir.join(LEDGER_FILE))?;
    let results = run_batch(&gateway, &bundles, &run_id, &mut ledger)?;
    ledger.flush()?;

    let mut candidates = Vec::new();
    let mut rejections = Vec::new();
    for (request, result) in requests.iter().zip(results) {
        let raw = result.map_err(|source| PipelineError::Item {
            item: request.group.group_id,
            source,
        })?;
        let (c, r) = parse_generation_output(&raw.raw_text, Some(request.group.group_id));
        candidates.extend(c);
        rejections.extend(r);
    }
    let outcome = filter_generated(&candidates, &exemplars, &labels, Some(s.augment.per_class));
    write_generated(out, &labels, &outcome.accepted)?;
    rejections.extend(outcome.rejections);
    let summary = AugmentSummary {
        run_id,
        groups,
        candidate_lines: candidates.len() + rejections.iter().filter(|r| r.reason == crate::augmentor::RejectReason::Malformed).count(),
        accepted: outcome.accepted.len(),
        per_class_counts: outcome.per_class_counts,
        rejections,
    };
    let report = out.with_extension("rejections.json");
    std::fs::write(&report, serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")
        .map_err(io_err(&report))?;
    std::fs::write(dir.join("augment.json"), serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")
        .map_err(io_err(&dir))?;
    Ok(summary)
}
