//! Stage orchestration over a work directory.
//!
//! Every stage reads the artifacts of earlier stages from the work
//! directory and writes its own, each with a `.manifest.json` sidecar.
//! Stages that call endpoints append per-question results and skip
//! questions already present, so an interrupted run resumes where it
//! stopped. Questions are processed in id-ordered chunks and results are
//! appended in id order, which keeps the files byte-identical across runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpo::{self, DpoConfig, DpoError, ToyPolicy};
use crate::endpoint::{
    api_key_from_env, ChatEndpoint, ChatMessage, ChatRequest, EndpointError, HttpChatEndpoint, HttpNewsEndpoint,
    NewsEndpoint, RecordingChat, RecordingNews, ReplayChat, ReplayNews, RetryPolicy, TranscriptStore,
};
use crate::eval_stats::{self, ForecastRecord, StatsError, TTestKind};
use crate::forecast_parser;
use crate::news_client::{self, NewsContext, NewsSettings};
use crate::question_store::{self, CsvMapping, IngestReport, Partition, Question, Store, StoreError};
use crate::records::{self, file_sha256, Manifest, ReadError};
use crate::reranker::{self, LabelMode, PreferencePair, RerankError};
use crate::selfplay::{self, PairResult, PromptBundle, SelfplayError, SelfplaySettings};
use crate::synthetic::{SimChat, SimNews, SyntheticSpec, World};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage}: missing input {path}; run `{needs}` first")]
    MissingArtifact {
        stage: &'static str,
        path: PathBuf,
        needs: &'static str,
    },
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error(transparent)]
    Dpo(#[from] DpoError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Read(#[from] ReadError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl PipelineError {
    /// 2 for configuration problems (including absent credentials), 1 for
    /// everything that goes wrong at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Endpoint(EndpointError::MissingApiKey(_)) => 2,
            PipelineError::Store(StoreError::InvalidPartition(_)) => 2,
            PipelineError::Dpo(DpoError::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::MissingArtifact { .. } => "missing_artifact",
            PipelineError::Endpoint(EndpointError::MissingApiKey(_)) => "missing_api_key",
            PipelineError::Endpoint(_) => "endpoint",
            PipelineError::Store(_) => "store",
            PipelineError::Rerank(e) => e.code(),
            PipelineError::Dpo(_) => "dpo",
            PipelineError::Stats(e) => e.code(),
            PipelineError::Read(_) => "read",
            PipelineError::Io(_) => "io",
        }
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointMode {
    Http,
    /// Serve recorded responses only; never touches the network.
    #[default]
    Replay,
    /// Call over HTTP and record every response.
    Record,
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatEndpointConfig {
    #[serde(default)]
    pub mode: EndpointMode,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default = "ChatEndpointConfig::default_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub transcripts: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl ChatEndpointConfig {
    fn default_key_env() -> String {
        "FORESIGHT_CHAT_API_KEY".into()
    }
}

impl Default for ChatEndpointConfig {
    fn default() -> Self {
        ChatEndpointConfig {
            mode: EndpointMode::Replay,
            base_url: None,
            api_key_env: Self::default_key_env(),
            transcripts: None,
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewsEndpointConfig {
    #[serde(default)]
    pub mode: EndpointMode,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default = "NewsEndpointConfig::default_key_header")]
    pub key_header: String,
    #[serde(default = "NewsEndpointConfig::default_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub transcripts: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl NewsEndpointConfig {
    fn default_key_header() -> String {
        "x-api-token".into()
    }
    fn default_key_env() -> String {
        "FORESIGHT_NEWS_API_KEY".into()
    }
}

impl Default for NewsEndpointConfig {
    fn default() -> Self {
        NewsEndpointConfig {
            mode: EndpointMode::Replay,
            base_url: None,
            key_header: Self::default_key_header(),
            api_key_env: Self::default_key_env(),
            transcripts: None,
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankConfig {
    pub label_mode: LabelMode,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            label_mode: LabelMode::TrueOutcome,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    /// Generations tried per test question before giving up on it.
    pub attempts: usize,
    pub temperature: f64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            attempts: 5,
            temperature: 1.0,
        }
    }
}

fn default_work_dir() -> PathBuf {
    PathBuf::from("work")
}

fn default_concurrency() -> usize {
    8
}

/// The TOML run configuration. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Raw question records, `.jsonl` or `.csv`.
    pub questions: PathBuf,
    #[serde(default = "default_work_dir")]
    pub work_dir: PathBuf,
    /// Seed for the randomized-label orientation.
    #[serde(default)]
    pub seed: u64,
    /// Questions in flight at once in endpoint-bound stages.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "Partition::reference_windows")]
    pub partition: Partition,
    #[serde(default)]
    pub csv: CsvMapping,
    #[serde(default)]
    pub chat: ChatEndpointConfig,
    #[serde(default)]
    pub news: NewsEndpointConfig,
    #[serde(default)]
    pub news_settings: NewsSettings,
    #[serde(default)]
    pub selfplay: SelfplaySettings,
    #[serde(default)]
    pub rank: RankConfig,
    #[serde(default)]
    pub dpo: DpoConfig,
    #[serde(default)]
    pub forecast: ForecastConfig,
}

impl PipelineConfig {
    pub fn new(questions: PathBuf, work_dir: PathBuf) -> Self {
        PipelineConfig {
            questions,
            work_dir,
            seed: 0,
            concurrency: default_concurrency(),
            partition: Partition::reference_windows(),
            csv: CsvMapping::default(),
            chat: ChatEndpointConfig::default(),
            news: NewsEndpointConfig::default(),
            news_settings: NewsSettings::default(),
            selfplay: SelfplaySettings::default(),
            rank: RankConfig::default(),
            dpo: DpoConfig::default(),
            forecast: ForecastConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.questions);
        fix(&mut self.work_dir);
        if let Some(t) = self.chat.transcripts.as_mut() {
            fix(t);
        }
        if let Some(t) = self.news.transcripts.as_mut() {
            fix(t);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        self.dpo.validate()?;
        if self.concurrency == 0 {
            return Err(PipelineError::Config("concurrency must be at least 1".into()));
        }
        if self.forecast.attempts == 0 {
            return Err(PipelineError::Config("forecast.attempts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.work_dir.clone(),
        }
    }
}

/// Artifact paths inside the work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn store(&self) -> PathBuf {
        self.root.join("questions.jsonl")
    }
    pub fn ingest_report(&self) -> PathBuf {
        self.root.join("ingest_report.json")
    }
    pub fn news(&self) -> PathBuf {
        self.root.join("news").join("contexts.jsonl")
    }
    pub fn traces(&self) -> PathBuf {
        self.root.join("selfplay").join("traces.jsonl")
    }
    pub fn selfplay_status(&self) -> PathBuf {
        self.root.join("selfplay").join("status.jsonl")
    }
    pub fn pairs(&self, mode: LabelMode) -> PathBuf {
        self.root.join("rank").join(format!("pairs.{}.jsonl", mode.as_str()))
    }
    pub fn dataset(&self, mode: LabelMode) -> PathBuf {
        self.root.join("dpo").join(format!("dataset.{}.jsonl", mode.as_str()))
    }
    pub fn toy_dir(&self, mode: LabelMode) -> PathBuf {
        self.root.join("toy").join(mode.as_str())
    }
    pub fn forecasts_dir(&self) -> PathBuf {
        self.root.join("forecasts")
    }
    pub fn forecasts(&self, tag: &str) -> PathBuf {
        self.forecasts_dir().join(format!("{tag}.jsonl"))
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn require(path: &Path, stage: &'static str, needs: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact {
            stage,
            path: path.to_path_buf(),
            needs,
        })
    }
}

fn transcripts(dir: &Option<PathBuf>, what: &str) -> Result<TranscriptStore> {
    dir.as_ref()
        .map(TranscriptStore::new)
        .ok_or_else(|| PipelineError::Config(format!("{what}.transcripts is required in replay and record modes")))
}

fn base_url(url: &Option<String>, what: &str) -> Result<String> {
    url.clone()
        .ok_or_else(|| PipelineError::Config(format!("{what}.base_url is required in http and record modes")))
}

/// Builds the configured chat endpoint. Credentials are checked here,
/// before any request is made.
pub fn chat_endpoint(cfg: &ChatEndpointConfig) -> Result<Box<dyn ChatEndpoint>> {
    let http = || -> Result<HttpChatEndpoint> {
        let url = base_url(&cfg.base_url, "chat")?;
        let key = api_key_from_env(&cfg.api_key_env)?;
        Ok(HttpChatEndpoint::new(&url, key, Duration::from_secs(cfg.timeout_secs), cfg.retry))
    };
    Ok(match cfg.mode {
        EndpointMode::Replay => Box::new(ReplayChat(transcripts(&cfg.transcripts, "chat")?)),
        EndpointMode::Http => Box::new(http()?),
        EndpointMode::Record => Box::new(RecordingChat {
            store: transcripts(&cfg.transcripts, "chat")?,
            inner: http()?,
        }),
    })
}

pub fn news_endpoint(cfg: &NewsEndpointConfig) -> Result<Box<dyn NewsEndpoint>> {
    let http = || -> Result<HttpNewsEndpoint> {
        let url = base_url(&cfg.base_url, "news")?;
        let key = api_key_from_env(&cfg.api_key_env)?;
        Ok(HttpNewsEndpoint::new(
            &url,
            &cfg.key_header,
            key,
            Duration::from_secs(cfg.timeout_secs),
            cfg.retry,
        ))
    };
    Ok(match cfg.mode {
        EndpointMode::Replay => Box::new(ReplayNews(transcripts(&cfg.transcripts, "news")?)),
        EndpointMode::Http => Box::new(http()?),
        EndpointMode::Record => Box::new(RecordingNews {
            store: transcripts(&cfg.transcripts, "news")?,
            inner: http()?,
        }),
    })
}

fn write_manifest(path: &Path, stage: &str, count: usize, params: BTreeMap<String, serde_json::Value>) -> Result<Manifest> {
    let m = Manifest {
        stage: stage.into(),
        artifact: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        count,
        sha256: file_sha256(path)?,
        params,
    };
    m.write(path)?;
    Ok(m)
}

/// Runs `work` over `items` with at most `limit` in flight and hands the
/// results to `sink` in input order, one chunk at a time.
fn for_each_bounded<T, R>(
    items: &[T],
    limit: usize,
    work: impl Fn(&T) -> R + Sync,
    mut sink: impl FnMut(&T, R) -> Result<()>,
) -> Result<()>
where
    T: Sync,
    R: Send,
{
    let limit = limit.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(limit)
        .build()
        .map_err(|e| io::Error::other(e.to_string()))?;
    for chunk in items.chunks(limit * 4) {
        let results: Vec<R> = pool.install(|| chunk.par_iter().map(&work).collect());
        for (item, r) in chunk.iter().zip(results) {
            sink(item, r)?;
        }
    }
    Ok(())
}

fn read_or_empty<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if path.exists() {
        Ok(records::read_jsonl(path)?)
    } else {
        Ok(Vec::new())
    }
}

pub fn load_store(cfg: &PipelineConfig) -> Result<Store> {
    let path = cfg.layout().store();
    require(&path, "load", "ingest")?;
    Ok(Store::load(&path)?)
}

/// Validates the raw question file into the canonical store.
pub fn ingest(cfg: &PipelineConfig) -> Result<IngestReport> {
    let path = &cfg.questions;
    if !path.exists() {
        return Err(PipelineError::Config(format!("questions file {} does not exist", path.display())));
    }
    let raw = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        question_store::read_raw_csv(fs::File::open(path)?, &cfg.csv)?
    } else {
        question_store::read_raw_jsonl(path)?
    };
    let (store, report) = Store::ingest(raw);
    let layout = cfg.layout();
    store.save(&layout.store())?;
    write_manifest(
        &layout.store(),
        "ingest",
        store.len(),
        BTreeMap::from([
            ("source".into(), serde_json::json!(path.display().to_string())),
            ("rejected".into(), serde_json::json!(report.rejected.len())),
        ]),
    )?;
    let mut bytes = serde_json::to_vec_pretty(&report).map_err(io::Error::other)?;
    bytes.push(b'\n');
    records::write_atomic(&layout.ingest_report(), &bytes)?;
    for r in &report.rejected {
        warn!("ingest: record {} ({:?}) rejected: {:?}", r.record, r.id, r.reason);
    }
    info!("ingest: {} accepted, {} rejected", report.accepted, report.rejected.len());
    Ok(report)
}

/// Train and test questions; the gap between them is never used.
pub fn split(cfg: &PipelineConfig, store: &Store) -> Result<(Vec<Question>, Vec<Question>)> {
    let (train, test) = question_store::partition(store, &cfg.partition)?;
    Ok((train.into_iter().cloned().collect(), test.into_iter().cloned().collect()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct NewsSummary {
    pub fetched: usize,
    pub skipped_existing: usize,
    pub warnings: usize,
}

/// News contexts for every train and test question not fetched yet.
pub fn fetch_news(cfg: &PipelineConfig, chat: &dyn ChatEndpoint, news: &dyn NewsEndpoint) -> Result<NewsSummary> {
    let store = load_store(cfg)?;
    let (train, test) = split(cfg, &store)?;
    let path = cfg.layout().news();
    let done: BTreeSet<String> = read_or_empty::<NewsContext>(&path)?
        .into_iter()
        .map(|c| c.question_id)
        .collect();
    let mut todo: Vec<Question> = train.into_iter().chain(test).filter(|q| !done.contains(&q.id)).collect();
    todo.sort_by(|a, b| a.id.cmp(&b.id));

    let mut summary = NewsSummary {
        skipped_existing: done.len(),
        ..NewsSummary::default()
    };
    for_each_bounded(
        &todo,
        cfg.concurrency,
        |q| news_client::gather(q, chat, news, &cfg.news_settings),
        |_, ctx| {
            summary.fetched += 1;
            summary.warnings += ctx.warnings.len();
            Ok(records::append_jsonl(&path, &ctx)?)
        },
    )?;
    let total = summary.fetched + summary.skipped_existing;
    if path.exists() {
        write_manifest(&path, "fetch-news", total, BTreeMap::new())?;
    }
    info!("fetch-news: {} fetched, {} already present", summary.fetched, summary.skipped_existing);
    Ok(summary)
}

pub fn load_news(cfg: &PipelineConfig) -> Result<BTreeMap<String, NewsContext>> {
    let path = cfg.layout().news();
    require(&path, "news", "fetch-news")?;
    Ok(records::read_jsonl::<NewsContext>(&path)?
        .into_iter()
        .map(|c| (c.question_id.clone(), c))
        .collect())
}

fn bundle_for(q: &Question, news: &BTreeMap<String, NewsContext>, settings: &SelfplaySettings) -> PromptBundle {
    let ctx = news.get(&q.id).cloned().unwrap_or_else(|| {
        warn!("{}: no news context; prompting without news", q.id);
        NewsContext::empty(q)
    });
    PromptBundle::for_question(q, ctx, settings.style())
}

/// The prompt a question is forecast from, at generation and test time.
pub fn prompt_for(q: &Question, news: &BTreeMap<String, NewsContext>, settings: &SelfplaySettings) -> String {
    selfplay::render_prompt(&bundle_for(q, news, settings))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Kept,
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusRecord {
    pub question_id: String,
    pub status: PairStatus,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SelfplaySummary {
    pub kept: usize,
    pub dropped: usize,
    pub failed: usize,
    pub skipped_existing: usize,
}

/// Trace pairs for every training question without a recorded status.
/// Failed questions get no status and are retried by the next run.
pub fn selfplay(cfg: &PipelineConfig, chat: &dyn ChatEndpoint) -> Result<SelfplaySummary> {
    let store = load_store(cfg)?;
    let (train, _) = split(cfg, &store)?;
    let news = load_news(cfg)?;
    let layout = cfg.layout();
    let (traces_path, status_path) = (layout.traces(), layout.selfplay_status());
    let done: BTreeSet<String> = read_or_empty::<StatusRecord>(&status_path)?
        .into_iter()
        .map(|s| s.question_id)
        .collect();
    let todo: Vec<Question> = train.into_iter().filter(|q| !done.contains(&q.id)).collect();

    let mut summary = SelfplaySummary {
        skipped_existing: done.len(),
        ..SelfplaySummary::default()
    };
    for_each_bounded(
        &todo,
        cfg.concurrency,
        |q| selfplay::generate_pair(q, &bundle_for(q, &news, &cfg.selfplay), chat, &cfg.selfplay),
        |q, result| {
            let status = match result {
                Ok(PairResult::Pair(t1, t2)) => {
                    records::append_jsonl(&traces_path, &t1)?;
                    records::append_jsonl(&traces_path, &t2)?;
                    summary.kept += 1;
                    PairStatus::Kept
                }
                Ok(PairResult::Dropped { attempts }) => {
                    info!("{}: dropped after {attempts} identical forecasts", q.id);
                    summary.dropped += 1;
                    PairStatus::Dropped
                }
                Err(e @ SelfplayError::GenerationFailed { .. }) | Err(e @ SelfplayError::TemporalLeak { .. }) => {
                    warn!("{}: {} ({e})", q.id, e.code());
                    summary.failed += 1;
                    return Ok(());
                }
            };
            records::append_jsonl(
                &status_path,
                &StatusRecord {
                    question_id: q.id.clone(),
                    status,
                },
            )?;
            Ok(())
        },
    )?;
    if traces_path.exists() {
        let n = records::read_jsonl::<selfplay::ReasoningTrace>(&traces_path)?.len();
        write_manifest(&traces_path, "selfplay", n, BTreeMap::new())?;
    }
    info!(
        "selfplay: {} kept, {} dropped, {} failed, {} already done",
        summary.kept, summary.dropped, summary.failed, summary.skipped_existing
    );
    Ok(summary)
}

pub fn load_traces(cfg: &PipelineConfig) -> Result<Vec<selfplay::ReasoningTrace>> {
    let path = cfg.layout().traces();
    require(&path, "rank", "selfplay")?;
    Ok(records::read_jsonl(&path)?)
}

/// Builds preference pairs and writes them with a manifest.
pub fn rank(cfg: &PipelineConfig, mode: LabelMode, seed: u64) -> Result<(Vec<PreferencePair>, Manifest)> {
    let store = load_store(cfg)?;
    let traces = load_traces(cfg)?;
    let (pairs, skipped) = reranker::build_pairs(&traces, &store, mode, seed);
    let path = cfg.layout().pairs(mode);
    records::write_jsonl(&path, &pairs)?;
    let m = write_manifest(
        &path,
        "rank",
        pairs.len(),
        BTreeMap::from([
            ("label_mode".into(), serde_json::json!(mode.as_str())),
            ("seed".into(), serde_json::json!(seed)),
            ("skipped".into(), serde_json::to_value(&skipped).map_err(io::Error::other)?),
        ]),
    )?;
    info!("rank: {} pairs ({}), {} questions skipped", pairs.len(), mode.as_str(), skipped.len());
    Ok((pairs, m))
}

/// Writes the preference dataset for `mode` from the ranked pairs.
pub fn emit_dpo(cfg: &PipelineConfig, mode: LabelMode) -> Result<Manifest> {
    let layout = cfg.layout();
    let pairs_path = layout.pairs(mode);
    require(&pairs_path, "emit-dpo", "rank")?;
    let pairs: Vec<PreferencePair> = records::read_jsonl(&pairs_path)?;
    let seed = Manifest::read(&pairs_path)?
        .params
        .get("seed")
        .and_then(serde_json::Value::as_u64)
        .unwrap_or(cfg.seed);
    let m = reranker::emit_dataset(&pairs, &layout.dataset(mode), seed)?;
    info!("emit-dpo: {} examples -> {}", m.count, layout.dataset(mode).display());
    Ok(m)
}

/// Trains the toy policy on the dataset for `mode`; writes `policy.json`,
/// `reference.json` and `report.jsonl` under `toy/<mode>/`.
pub fn train_toy(cfg: &PipelineConfig, mode: LabelMode, dpo: &DpoConfig) -> Result<dpo::TrainOutcome> {
    let layout = cfg.layout();
    let path = layout.dataset(mode);
    require(&path, "train-toy", "emit-dpo")?;
    let (examples, _) = reranker::read_dataset(&path)?;
    let out = dpo::train_toy(&examples, dpo)?;
    let dir = layout.toy_dir(mode);
    out.policy.save(&dir.join("policy.json"))?;
    out.reference.save(&dir.join("reference.json"))?;
    out.report.write(&dir.join("report.jsonl"))?;
    let last = out.report.epochs.last().expect("epoch 0 is always recorded");
    info!(
        "train-toy: {} pairs, final train loss {:.4}, plateau {:?}",
        out.report.n_train, last.train_loss, out.report.plateau_epoch
    );
    Ok(out)
}

/// Forecasts every test question with a toy policy.
pub fn forecast_toy(cfg: &PipelineConfig, policy: &ToyPolicy, tag: &str) -> Result<Vec<ForecastRecord>> {
    let store = load_store(cfg)?;
    let (_, test) = split(cfg, &store)?;
    let news = load_news(cfg)?;
    let recs: Vec<ForecastRecord> = test
        .iter()
        .map(|q| ForecastRecord {
            question_id: q.id.clone(),
            probability: policy.forecast_prompt(&prompt_for(q, &news, &cfg.selfplay)),
            outcome: q.outcome,
            model_tag: tag.to_string(),
        })
        .collect();
    let path = cfg.layout().forecasts(tag);
    records::write_jsonl(&path, &recs)?;
    write_manifest(&path, "forecast", recs.len(), BTreeMap::from([("tag".into(), serde_json::json!(tag))]))?;
    Ok(recs)
}

/// Forecasts test questions through the chat endpoint, resuming past
/// questions already in the output file.
pub fn forecast_chat(cfg: &PipelineConfig, chat: &dyn ChatEndpoint, tag: &str) -> Result<Vec<ForecastRecord>> {
    let store = load_store(cfg)?;
    let (_, test) = split(cfg, &store)?;
    let news = load_news(cfg)?;
    let path = cfg.layout().forecasts(tag);
    let existing: Vec<ForecastRecord> = read_or_empty(&path)?;
    let done: BTreeSet<&str> = existing.iter().map(|r| r.question_id.as_str()).collect();
    let todo: Vec<Question> = test.into_iter().filter(|q| !done.contains(q.id.as_str())).collect();

    let one = |q: &Question| -> std::result::Result<Option<f64>, EndpointError> {
        let prompt = prompt_for(q, &news, &cfg.selfplay);
        for i in 0..cfg.forecast.attempts {
            let req = ChatRequest {
                scope: q.id.clone(),
                tag: format!("forecast/attempt-{i}"),
                model: cfg.selfplay.model.clone(),
                messages: vec![ChatMessage::user(prompt.clone())],
                temperature: cfg.forecast.temperature,
                max_tokens: cfg.selfplay.max_tokens,
            };
            let text = chat.complete(&req)?.text;
            if let Ok(p) = forecast_parser::parse_with(&text, cfg.selfplay.strictness) {
                return Ok(Some(p.probability));
            }
        }
        Ok(None)
    };
    let mut failures = 0usize;
    for_each_bounded(&todo, cfg.concurrency, one, |q, r| {
        match r {
            Ok(Some(probability)) => records::append_jsonl(
                &path,
                &ForecastRecord {
                    question_id: q.id.clone(),
                    probability,
                    outcome: q.outcome,
                    model_tag: tag.to_string(),
                },
            )?,
            Ok(None) => {
                warn!("{}: no parsable forecast in {} attempts", q.id, cfg.forecast.attempts);
                failures += 1;
            }
            Err(e) => {
                warn!("{}: forecast failed: {e}", q.id);
                failures += 1;
            }
        }
        Ok(())
    })?;
    let recs: Vec<ForecastRecord> = read_or_empty(&path)?;
    if path.exists() {
        write_manifest(&path, "forecast", recs.len(), BTreeMap::from([("tag".into(), serde_json::json!(tag))]))?;
    }
    if failures > 0 {
        warn!("forecast: {failures} test questions without a forecast");
    }
    Ok(recs)
}

/// Tags with a forecast file in the work directory, sorted.
pub fn forecast_tags(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let dir = cfg.layout().forecasts_dir();
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut tags = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(tag) = name.strip_suffix(".jsonl") {
            tags.push(tag.to_string());
        }
    }
    tags.sort();
    Ok(tags)
}

/// Scores the given tags and writes the report under `eval/`.
pub fn evaluate(cfg: &PipelineConfig, tags: &[String], kind: TTestKind) -> Result<eval_stats::EvalReport> {
    let layout = cfg.layout();
    let mut models = BTreeMap::new();
    for tag in tags {
        let path = layout.forecasts(tag);
        require(&path, "evaluate", "forecast")?;
        models.insert(tag.clone(), records::read_jsonl::<ForecastRecord>(&path)?);
    }
    let report = eval_stats::report(&models, kind)?;
    eval_stats::write_report(&report, &layout.eval_dir())?;
    Ok(report)
}

/// Tuned for the bundled synthetic world: the toy policy has no pretrained
/// knowledge, so it needs far larger steps than a language model would.
pub fn toy_dpo_config() -> DpoConfig {
    DpoConfig {
        learning_rate: 20.0,
        epochs: 10,
        features: dpo::FeatureSpec {
            buckets: 1024,
            ..dpo::FeatureSpec::default()
        },
        ..DpoConfig::default()
    }
}

/// Builds a synthetic world under `out`: raw questions (with a few defective
/// records), recorded chat and news transcripts for every endpoint call the
/// pipeline makes, and a replay-mode `config.toml`.
pub fn synth(spec: &SyntheticSpec, out: &Path) -> Result<PipelineConfig> {
    let world = World::new(spec.clone());
    fs::create_dir_all(out)?;
    let questions = out.join("questions.jsonl");
    records::write_jsonl(&questions, &world.raw_questions_with_defects())?;

    let mut cfg = PipelineConfig::new("questions.jsonl".into(), "work".into());
    cfg.chat.transcripts = Some("transcripts/chat".into());
    cfg.news.transcripts = Some("transcripts/news".into());
    cfg.dpo = toy_dpo_config();
    let written = cfg.clone();
    cfg.resolve_paths(out);

    let chat_dir = cfg.chat.transcripts.clone().expect("set above");
    let news_dir = cfg.news.transcripts.clone().expect("set above");
    for dir in [&chat_dir, &news_dir, &cfg.work_dir] {
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
    }
    let chat = RecordingChat {
        inner: SimChat { spec: spec.clone() },
        store: TranscriptStore::new(&chat_dir),
    };
    let news = RecordingNews {
        inner: SimNews(&world),
        store: TranscriptStore::new(&news_dir),
    };
    ingest(&cfg)?;
    fetch_news(&cfg, &chat, &news)?;
    selfplay(&cfg, &chat)?;
    forecast_chat(&cfg, &chat, "base")?;
    fs::remove_dir_all(&cfg.work_dir)?;

    let mut text = written.to_toml()?;
    text.insert_str(0, &format!("# synthetic world, seed {}\n", spec.seed));
    records::write_atomic(&out.join("config.toml"), text.as_bytes())?;
    Ok(cfg)
}
