//! Orchestrates stage-1 elicitation and stage-2 introspection across
//! models x datasets x strategies x efforts.
//!
//! Cells are enumerated in a fixed order, deduplicated against the records
//! already persisted in the run directory, executed on a bounded worker
//! pool, and appended to `records.jsonl` in enumeration order by a single
//! writer. Every scheduled cell yields exactly one record: completed,
//! format-failed, errored, or skipped. Failures are recorded, never
//! dropped.

mod store;

pub use store::{
    read_manifest, read_records, Manifest, RecordCounts, MANIFEST_FILE, RECORDS_FILE,
    SNAPSHOT_FILE,
};

/// Load the exact config a run directory was created with.
pub fn read_snapshot_config(run_dir: &Path) -> Result<RunConfig, PipelineError> {
    store::read_snapshot(run_dir)
}

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datasets::{load_dataset, Dataset, DatasetError, QuestionItem};
use crate::extract::{
    grade, parse_final, GradeError, GradingMode, MeaningJudge, ParseKind,
};
use crate::promptkit::{
    append_trace_request, render_iuq_stage2, render_prompt, FormatSpec, IuqLevel, Message,
    PromptStrategy,
};
use crate::provider::{
    complete_with_retry, ChatProvider, ChatRequest, HttpProvider, HttpProviderConfig,
    InflightLimiter, JudgeClient, MockProvider, ModelSpec, ProviderError, ReasoningEffort,
    RetryPolicy, SyntheticAgent, SyntheticAgentParams,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("run directory {0} already holds a run; resume it instead")]
    RunDirExists(String),
    #[error("config does not match the run's snapshot: {0}")]
    SnapshotMismatch(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt run state: {0}")]
    Store(String),
}

/// How freeform answers are graded. MCQ and boolean datasets always use
/// their kind-specific matchers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
#[derive(Default)]
pub enum FreeformGrading {
    #[default]
    Normalized,
    Judge { model: ModelSpec },
}


/// Backend definition referenced by `ModelSpec::provider_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProviderConfig {
    Mock {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixtures: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fallback_seed: Option<u64>,
    },
    Synthetic {
        dataset: PathBuf,
        #[serde(flatten)]
        params: SyntheticAgentParams,
    },
    Http(HttpProviderConfig),
}

fn default_temperature() -> Option<f64> {
    Some(0.0)
}

fn default_concurrency() -> usize {
    4
}

fn default_record_timestamps() -> bool {
    true
}

/// Full description of a run. Snapshotted verbatim into the run directory;
/// resuming requires an identical config (run_dir aside).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub models: Vec<ModelSpec>,
    pub datasets: Vec<PathBuf>,
    pub strategies: Vec<PromptStrategy>,
    pub efforts: Vec<ReasoningEffort>,
    #[serde(default)]
    pub iuq_levels: Vec<IuqLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_dataset_limit: Option<usize>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub freeform_grading: FreeformGrading,
    pub seed: u64,
    pub providers: BTreeMap<String, ProviderConfig>,
    #[serde(default = "default_temperature")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
    /// Off for byte-stable runs: record and manifest timestamps are omitted.
    #[serde(default = "default_record_timestamps")]
    pub record_timestamps: bool,
    /// Optional unanswerable-question sentinel. When set, stage-1 prompts
    /// tell the model to answer `{<sentinel>, Y}` when it cannot answer.
    /// Disabled by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal_sentinel: Option<String>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |msg: String| Err(PipelineError::InvalidConfig(msg));
        if self.models.is_empty() {
            return invalid("models list is empty".into());
        }
        if self.datasets.is_empty() {
            return invalid("datasets list is empty".into());
        }
        if self.strategies.is_empty() {
            return invalid("strategies list is empty".into());
        }
        if self.efforts.is_empty() {
            return invalid("efforts list is empty".into());
        }
        if self.concurrency == 0 {
            return invalid("concurrency must be at least 1".into());
        }
        let mut names = HashSet::new();
        for model in &self.models {
            model.validate()?;
            if !self.providers.contains_key(&model.provider_id) {
                return invalid(format!(
                    "model {} references unknown provider {:?}",
                    model.model_name, model.provider_id
                ));
            }
            if !names.insert(&model.model_name) {
                return invalid(format!("duplicate model name {:?}", model.model_name));
            }
        }
        for strategy in &self.strategies {
            if let PromptStrategy::TopK { k: 0 } = strategy {
                return invalid("top_k strategy requires k >= 1".into());
            }
        }
        if let FreeformGrading::Judge { model } = &self.freeform_grading {
            model.validate()?;
            if !self.providers.contains_key(&model.provider_id) {
                return invalid(format!(
                    "judge model references unknown provider {:?}",
                    model.provider_id
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Answer,
    Introspect,
}

impl StageKind {
    pub fn key(&self) -> &'static str {
        match self {
            StageKind::Answer => "answer",
            StageKind::Introspect => "introspect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionStatus {
    Completed,
    FormatFailure,
    Error,
    Skipped,
}

/// Identity of one scheduled cell. Unique within a run directory.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecordKey {
    pub model: String,
    pub dataset: String,
    pub question_id: String,
    pub strategy: String,
    pub effort: String,
    pub stage: StageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iuq_level: Option<String>,
}

impl RecordKey {
    /// Canonical string form used for dedup sets.
    pub fn dedup_string(&self) -> String {
        serde_json::to_string(self).expect("keys serialize")
    }

    /// The Answer key an Introspect key refers back to.
    pub fn answer_parent(&self) -> RecordKey {
        RecordKey {
            stage: StageKind::Answer,
            iuq_level: None,
            ..self.clone()
        }
    }
}

/// One persisted unit of work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    #[serde(flatten)]
    pub key: RecordKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_trace: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_percent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    pub status: CompletionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_ms: Option<u64>,
}

/// Providers instantiated from config, shared by all workers.
pub struct ProviderRegistry {
    providers: BTreeMap<String, Arc<dyn ChatProvider>>,
    limiters: BTreeMap<String, Arc<InflightLimiter>>,
}

impl ProviderRegistry {
    pub fn from_config(config: &RunConfig) -> Result<Self, PipelineError> {
        let mut providers: BTreeMap<String, Arc<dyn ChatProvider>> = BTreeMap::new();
        for (id, provider_config) in &config.providers {
            let provider: Arc<dyn ChatProvider> = match provider_config {
                ProviderConfig::Mock { fixtures, fallback_seed } => {
                    let mut mock = match fallback_seed {
                        Some(seed) => MockProvider::with_fallback(*seed),
                        None => MockProvider::new(),
                    };
                    if let Some(path) = fixtures {
                        mock.load_fixtures(path)?;
                    }
                    Arc::new(mock)
                }
                ProviderConfig::Synthetic { dataset, params } => {
                    let loaded = load_dataset(dataset)?;
                    Arc::new(SyntheticAgent::new(&loaded.items, params.clone())?)
                }
                ProviderConfig::Http(http) => Arc::new(HttpProvider::new(http.clone())),
            };
            providers.insert(id.clone(), provider);
        }
        let limiters = providers
            .keys()
            .map(|id| {
                (
                    id.clone(),
                    Arc::new(InflightLimiter::new(config.concurrency)),
                )
            })
            .collect();
        Ok(ProviderRegistry { providers, limiters })
    }

    /// Install a pre-built provider, replacing any configured one. Tests use
    /// this to observe request traffic.
    pub fn insert(&mut self, id: &str, provider: Arc<dyn ChatProvider>, max_inflight: usize) {
        self.providers.insert(id.to_string(), provider);
        self.limiters
            .insert(id.to_string(), Arc::new(InflightLimiter::new(max_inflight)));
    }

    pub fn empty() -> Self {
        ProviderRegistry { providers: BTreeMap::new(), limiters: BTreeMap::new() }
    }

    fn handle(&self, id: &str) -> Result<ProviderHandle, PipelineError> {
        Ok(ProviderHandle {
            provider: Arc::clone(self.providers.get(id).ok_or_else(|| {
                PipelineError::InvalidConfig(format!("no provider registered as {id:?}"))
            })?),
            limiter: Arc::clone(&self.limiters[id]),
        })
    }
}

#[derive(Clone)]
struct ProviderHandle {
    provider: Arc<dyn ChatProvider>,
    limiter: Arc<InflightLimiter>,
}

impl ProviderHandle {
    fn complete(
        &self,
        request: &ChatRequest,
        policy: &RetryPolicy,
    ) -> Result<crate::provider::CompletionResult, ProviderError> {
        let _guard = self.limiter.acquire();
        complete_with_retry(self.provider.as_ref(), request, policy)
    }
}

/// Result of a pipeline invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub run_id: String,
    /// Provider requests issued by this invocation (skipped and deduplicated
    /// cells issue none).
    pub requests_issued: u64,
    pub counts: RecordCounts,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn snapshot_value(config: &RunConfig) -> serde_json::Value {
    let mut value = serde_json::to_value(config).expect("config serializes");
    value.as_object_mut().unwrap().remove("run_dir");
    value
}

/// Create the run directory or verify an existing one matches the config.
fn prepare_run_dir(config: &RunConfig, allow_resume: bool) -> Result<(), PipelineError> {
    let dir = &config.run_dir;
    if store::snapshot_path(dir).exists() {
        if !allow_resume {
            return Err(PipelineError::RunDirExists(dir.display().to_string()));
        }
        let snapshot = store::read_snapshot(dir)?;
        if snapshot_value(&snapshot) != snapshot_value(config) {
            return Err(PipelineError::SnapshotMismatch(
                "strategies, models, datasets, or settings differ from the original run".into(),
            ));
        }
        return Ok(());
    }
    std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        context: format!("create {}", dir.display()),
        source,
    })?;
    store::write_snapshot(dir, config)
}

fn run_id_for(config: &RunConfig) -> Result<String, PipelineError> {
    if let Some(manifest) = store::read_manifest(&config.run_dir)? {
        return Ok(manifest.run_id);
    }
    let digest = Sha256::digest(serde_json::to_vec(config).expect("config serializes"));
    let base = hex::encode(&digest[..6]);
    Ok(if config.record_timestamps {
        format!("r{base}-{}", now_ms())
    } else {
        format!("r{base}")
    })
}

fn counts_of(records: &[RunRecord]) -> RecordCounts {
    let mut counts = RecordCounts { scheduled: records.len(), ..Default::default() };
    for record in records {
        match record.status {
            CompletionStatus::Completed => counts.completed += 1,
            CompletionStatus::FormatFailure => counts.format_failures += 1,
            CompletionStatus::Error => counts.errors += 1,
            CompletionStatus::Skipped => counts.skipped += 1,
        }
    }
    counts
}

type Job = Box<dyn FnOnce() -> RunRecord + Send>;

/// Run jobs on a bounded pool, appending results in job order.
fn execute_jobs(
    jobs: Vec<Job>,
    concurrency: usize,
    writer: &mut store::RecordWriter,
) -> Result<(), PipelineError> {
    let queue: Arc<Mutex<VecDeque<(usize, Job)>>> =
        Arc::new(Mutex::new(jobs.into_iter().enumerate().collect()));
    let total = queue.lock().unwrap().len();
    let (sender, receiver) = mpsc::channel::<(usize, RunRecord)>();

    std::thread::scope(|scope| {
        for _ in 0..concurrency.max(1).min(total.max(1)) {
            let queue = Arc::clone(&queue);
            let sender = sender.clone();
            scope.spawn(move || loop {
                let next = queue.lock().unwrap().pop_front();
                match next {
                    Some((index, job)) => {
                        if sender.send((index, job())).is_err() {
                            return;
                        }
                    }
                    None => return,
                }
            });
        }
        drop(sender);

        // Single writer: buffer out-of-order completions, append in order.
        let mut buffered: BTreeMap<usize, RunRecord> = BTreeMap::new();
        let mut next = 0usize;
        for (index, record) in receiver {
            buffered.insert(index, record);
            while let Some(record) = buffered.remove(&next) {
                writer.append(&record)?;
                next += 1;
            }
        }
        debug_assert!(buffered.is_empty());
        Ok(())
    })
}

struct StageContext {
    config: RunConfig,
    run_id: String,
    judge: Option<Arc<JudgeClient>>,
    requests_issued: Arc<AtomicU64>,
}

impl StageContext {
    fn new(
        config: &RunConfig,
        registry: &ProviderRegistry,
        run_id: String,
    ) -> Result<Self, PipelineError> {
        let judge = match &config.freeform_grading {
            FreeformGrading::Normalized => None,
            FreeformGrading::Judge { model } => {
                let handle = registry.handle(&model.provider_id)?;
                Some(Arc::new(JudgeClient::new(handle.provider, model.clone())))
            }
        };
        Ok(StageContext {
            config: config.clone(),
            run_id,
            judge,
            requests_issued: Arc::new(AtomicU64::new(0)),
        })
    }

    fn grading_mode(&self, item: &QuestionItem) -> GradingMode {
        let freeform = match &self.config.freeform_grading {
            FreeformGrading::Normalized => GradingMode::FreeformNormalized,
            FreeformGrading::Judge { model } => {
                GradingMode::FreeformJudge { model: model.model_name.clone() }
            }
        };
        GradingMode::for_kind(item.answer_kind, &freeform)
    }

    fn base_record(&self, key: RecordKey) -> RunRecord {
        RunRecord {
            run_id: self.run_id.clone(),
            key,
            fingerprint: None,
            raw_response: None,
            reasoning_trace: None,
            answer: None,
            confidence_percent: None,
            correct: None,
            status: CompletionStatus::Skipped,
            error: None,
            input_tokens: None,
            output_tokens: None,
            reasoning_tokens: None,
            started_ms: None,
            finished_ms: None,
        }
    }

    fn chat_request(
        &self,
        model: &ModelSpec,
        messages: Vec<Message>,
        effort: ReasoningEffort,
    ) -> ChatRequest {
        ChatRequest {
            model: model.clone(),
            messages,
            effort,
            temperature: self.config.temperature,
            seed: Some(self.config.seed),
            max_output_tokens: self.config.max_output_tokens,
        }
    }

    /// Issue the request and fill in response, parse, and grading fields.
    fn execute_request(
        &self,
        record: &mut RunRecord,
        handle: &ProviderHandle,
        request: &ChatRequest,
        parse_kind: ParseKind,
        grading: Option<(&QuestionItem, GradingMode)>,
    ) {
        record.fingerprint = Some(request.fingerprint());
        if self.config.record_timestamps {
            record.started_ms = Some(now_ms());
        }
        self.requests_issued.fetch_add(1, Ordering::SeqCst);
        match handle.complete(request, &self.config.retry) {
            Ok(result) => {
                record.raw_response = Some(result.content.clone());
                record.reasoning_trace = result.reasoning_trace.clone();
                record.input_tokens = result.input_tokens;
                record.output_tokens = result.output_tokens;
                record.reasoning_tokens = result.reasoning_tokens;
                match parse_final(&result.content, parse_kind) {
                    Ok(parsed) => {
                        record.answer = parsed.answer.clone();
                        record.confidence_percent = Some(parsed.confidence_percent);
                        record.status = CompletionStatus::Completed;
                        if let Some((item, mode)) = grading {
                            let judge = self.judge.as_deref().map(|j| j as &dyn MeaningJudge);
                            let answer = parsed.answer.as_deref().unwrap_or_default();
                            match grade(answer, item, &mode, judge) {
                                Ok(correct) => record.correct = Some(correct),
                                Err(GradeError::Unavailable(reason)) => {
                                    // Keep the parsed fields; the record is
                                    // retained but ungraded.
                                    record.status = CompletionStatus::Error;
                                    record.error = Some(format!("grading unavailable: {reason}"));
                                }
                            }
                        }
                    }
                    Err(failure) => {
                        record.status = CompletionStatus::FormatFailure;
                        record.error = Some(failure.reason.as_str().to_string());
                    }
                }
            }
            Err(e) => {
                record.status = CompletionStatus::Error;
                record.error = Some(e.to_string());
            }
        }
        if self.config.record_timestamps {
            record.finished_ms = Some(now_ms());
        }
    }
}

fn load_all_datasets(config: &RunConfig) -> Result<Vec<Arc<Dataset>>, PipelineError> {
    config
        .datasets
        .iter()
        .map(|path| Ok(Arc::new(load_dataset(path)?)))
        .collect()
}

/// Run (or resume) stage 1: one Answer record per
/// model x dataset item x strategy x effort cell.
pub fn run_stage1(
    config: &RunConfig,
    registry: &ProviderRegistry,
    allow_resume: bool,
) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let datasets = load_all_datasets(config)?;
    prepare_run_dir(config, allow_resume)?;
    let run_id = run_id_for(config)?;

    let (existing, valid_len) = store::read_records_repair(&config.run_dir)?;
    let persisted: HashSet<String> = existing.iter().map(|r| r.key.dedup_string()).collect();

    let context = Arc::new(StageContext::new(config, registry, run_id.clone())?);
    let started_ms = config.record_timestamps.then(now_ms);

    let mut jobs: Vec<Job> = Vec::new();
    for model in &config.models {
        let handle = registry.handle(&model.provider_id)?;
        for dataset in &datasets {
            let limit = config.per_dataset_limit.unwrap_or(usize::MAX);
            for item in dataset.items.iter().take(limit) {
                for strategy in &config.strategies {
                    for effort in &config.efforts {
                        let key = RecordKey {
                            model: model.model_name.clone(),
                            dataset: dataset.id.clone(),
                            question_id: item.id.clone(),
                            strategy: strategy.key().to_string(),
                            effort: effort.key().to_string(),
                            stage: StageKind::Answer,
                            iuq_level: None,
                        };
                        if persisted.contains(&key.dedup_string()) {
                            continue;
                        }
                        let context = Arc::clone(&context);
                        let handle = handle.clone();
                        let model = model.clone();
                        let item = item.clone();
                        let strategy = *strategy;
                        let effort = *effort;
                        jobs.push(Box::new(move || {
                            stage1_job(&context, &handle, &model, &item, strategy, effort, key)
                        }));
                    }
                }
            }
        }
    }

    let mut writer = store::RecordWriter::open(&config.run_dir, valid_len)?;
    execute_jobs(jobs, config.concurrency, &mut writer)?;

    let records = store::read_records(&config.run_dir)?;
    let manifest = Manifest {
        run_id: run_id.clone(),
        started_ms,
        finished_ms: config.record_timestamps.then(now_ms),
        counts: counts_of(&records),
    };
    store::write_manifest(&config.run_dir, &manifest)?;

    Ok(RunOutcome {
        run_dir: config.run_dir.clone(),
        run_id,
        requests_issued: context.requests_issued.load(Ordering::SeqCst),
        counts: manifest.counts,
    })
}

fn stage1_job(
    context: &StageContext,
    handle: &ProviderHandle,
    model: &ModelSpec,
    item: &QuestionItem,
    strategy: PromptStrategy,
    effort: ReasoningEffort,
    key: RecordKey,
) -> RunRecord {
    let mut record = context.base_record(key);
    let format = FormatSpec::for_kind(item.answer_kind);
    let mut messages = match render_prompt(strategy, &format, item) {
        Ok(messages) => messages,
        Err(e) => {
            record.status = CompletionStatus::Error;
            record.error = Some(e.to_string());
            return record;
        }
    };
    if let Some(sentinel) = &context.config.refusal_sentinel {
        messages.push(Message::system(format!(
            "If you cannot answer the question, answer {{{sentinel}, Y}}."
        )));
    }
    if !model.exposes_trace {
        append_trace_request(&mut messages);
    }
    let request = context.chat_request(model, messages, effort);
    let grading = context.grading_mode(item);
    context.execute_request(
        &mut record,
        handle,
        &request,
        ParseKind::AnswerConfidence,
        Some((item, grading)),
    );
    record
}

/// Run stage-2 introspection at the given level over every completed Answer
/// record in the run directory. Each request starts a fresh context holding
/// only the embedded stage-1 trace, never the stage-1 conversation.
pub fn run_stage2_iuq(
    run_dir: &Path,
    level: IuqLevel,
    config: &RunConfig,
    registry: &ProviderRegistry,
) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let datasets = load_all_datasets(config)?;
    let items_by_key: HashMap<(String, String), &QuestionItem> = datasets
        .iter()
        .flat_map(|d| {
            d.items
                .iter()
                .map(move |item| ((d.id.clone(), item.id.clone()), item))
        })
        .collect();
    let models_by_name: HashMap<&str, &ModelSpec> = config
        .models
        .iter()
        .map(|m| (m.model_name.as_str(), m))
        .collect();

    let (existing, valid_len) = store::read_records_repair(run_dir)?;
    let persisted: HashSet<String> = existing.iter().map(|r| r.key.dedup_string()).collect();
    let run_id = store::read_manifest(run_dir)?
        .map(|m| m.run_id)
        .ok_or_else(|| PipelineError::Store("run has no manifest; run stage 1 first".into()))?;

    let context = Arc::new(StageContext::new(config, registry, run_id.clone())?);

    let mut jobs: Vec<Job> = Vec::new();
    for answer in existing
        .iter()
        .filter(|r| r.key.stage == StageKind::Answer && r.status == CompletionStatus::Completed)
    {
        let key = RecordKey {
            stage: StageKind::Introspect,
            iuq_level: Some(level.key().to_string()),
            ..answer.key.clone()
        };
        if persisted.contains(&key.dedup_string()) {
            continue;
        }
        let model = match models_by_name.get(answer.key.model.as_str()) {
            Some(model) => (*model).clone(),
            None => {
                return Err(PipelineError::InvalidConfig(format!(
                    "record model {:?} is not in the config",
                    answer.key.model
                )))
            }
        };
        let item = match items_by_key.get(&(answer.key.dataset.clone(), answer.key.question_id.clone())) {
            Some(item) => (*item).clone(),
            None => {
                return Err(PipelineError::InvalidConfig(format!(
                    "record question {}/{} is not in the configured datasets",
                    answer.key.dataset, answer.key.question_id
                )))
            }
        };
        let handle = registry.handle(&model.provider_id)?;
        let context = Arc::clone(&context);
        let answer = answer.clone();
        jobs.push(Box::new(move || {
            stage2_job(&context, &handle, &model, &item, &answer, level, key)
        }));
    }

    let mut writer = store::RecordWriter::open(run_dir, valid_len)?;
    execute_jobs(jobs, config.concurrency, &mut writer)?;

    let records = store::read_records(run_dir)?;
    let mut manifest = store::read_manifest(run_dir)?
        .ok_or_else(|| PipelineError::Store("manifest disappeared mid-run".into()))?;
    manifest.counts = counts_of(&records);
    if config.record_timestamps {
        manifest.finished_ms = Some(now_ms());
    }
    store::write_manifest(run_dir, &manifest)?;

    Ok(RunOutcome {
        run_dir: run_dir.to_path_buf(),
        run_id,
        requests_issued: context.requests_issued.load(Ordering::SeqCst),
        counts: manifest.counts,
    })
}

fn stage2_job(
    context: &StageContext,
    handle: &ProviderHandle,
    model: &ModelSpec,
    item: &QuestionItem,
    answer_record: &RunRecord,
    level: IuqLevel,
    key: RecordKey,
) -> RunRecord {
    let mut record = context.base_record(key);

    // Consume the exposed trace, or the full content for models that were
    // instructed to include the trace in their response.
    let trace = if model.exposes_trace {
        answer_record.reasoning_trace.clone()
    } else {
        answer_record.raw_response.clone()
    };
    let trace = match trace {
        Some(t) if !t.trim().is_empty() => t,
        _ => {
            record.status = CompletionStatus::Skipped;
            record.error = Some("no-trace".into());
            return record;
        }
    };

    let stage1_answer = answer_record.answer.clone().unwrap_or_default();
    let stage1_confidence = match level {
        IuqLevel::Low | IuqLevel::Medium => answer_record.confidence_percent,
        IuqLevel::High => None,
    };
    let messages = match render_iuq_stage2(
        level,
        &item.question_text,
        &trace,
        &stage1_answer,
        stage1_confidence,
    ) {
        Ok(messages) => messages,
        Err(e) => {
            record.status = CompletionStatus::Error;
            record.error = Some(e.to_string());
            return record;
        }
    };

    let request = context.chat_request(model, messages, answer_record_effort(answer_record));
    context.execute_request(&mut record, handle, &request, ParseKind::RecConfidence, None);

    // The introspection stage re-estimates confidence only; correctness is
    // inherited from the answer it reviews.
    if record.status == CompletionStatus::Completed {
        record.correct = answer_record.correct;
        record.answer = None;
    }
    record
}

fn answer_record_effort(record: &RunRecord) -> ReasoningEffort {
    match record.key.effort.as_str() {
        "low" => ReasoningEffort::Low,
        "medium" => ReasoningEffort::Medium,
        "high" => ReasoningEffort::High,
        _ => ReasoningEffort::Unspecified,
    }
}

/// The wrong-at-all-depths subset: Answer records grouped by
/// (model, dataset, question) where at least two effort levels are present
/// and every record in the group is completed and incorrect. Groups with
/// any unfinished or ungraded record are excluded.
pub fn filter_always_wrong(records: &[RunRecord]) -> Vec<RunRecord> {
    let mut groups: BTreeMap<(String, String, String), Vec<&RunRecord>> = BTreeMap::new();
    for record in records.iter().filter(|r| r.key.stage == StageKind::Answer) {
        groups
            .entry((
                record.key.model.clone(),
                record.key.dataset.clone(),
                record.key.question_id.clone(),
            ))
            .or_default()
            .push(record);
    }
    let mut subset = Vec::new();
    for group in groups.values() {
        let efforts: HashSet<&str> = group.iter().map(|r| r.key.effort.as_str()).collect();
        if efforts.len() < 2 {
            continue;
        }
        let all_wrong = group.iter().all(|r| {
            r.status == CompletionStatus::Completed && r.correct == Some(false)
        });
        if all_wrong {
            subset.extend(group.iter().map(|r| (*r).clone()));
        }
    }
    subset
}
