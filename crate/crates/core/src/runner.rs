//! Planning, resumable execution and persistence of evaluation runs.
//!
//! A run lives in `<out>/<run_id>/`:
//!
//! - `run.manifest`: identity of the run (config digest, dataset hash,
//!   backend fingerprints, seed);
//! - `records/<agent>.jsonl`: one [`ResultRecord`] per completed item;
//! - `ledger`: one completed [`ItemKey`] per line, appended only after the
//!   matching record is on disk.
//!
//! Items are written in plan order, so an interrupted run leaves a prefix of
//! the plan behind and a resumed run produces the same bytes as an
//! uninterrupted one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use futures::{stream, StreamExt};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::{low_level_features, FeatureVector};
use crate::bundle::{build_bundle, ScoreBundle};
use crate::backends::{self, Dispatcher, Role, SharedBackend};
use crate::config::{AgentKind, BackendKind, Config, ConfigError};
use crate::ingestion::{self, derive_view, load_view_raster, shuffled_order, Dataset, IngestError, LoadOptions, Sample, SampleView};
use crate::model::{denormalize, BBox, NormPoint, PixelPoint, ViewLabel};
use crate::router::{run_edagent, EdAgent, RouterConfig, RouterFailure, StrategyOutcome};
use crate::scoring::{score_action, score_answer, ActionScore, AnswerStatus, ScoreRecord};

pub const MANIFEST_FILE: &str = "run.manifest";
pub const LEDGER_FILE: &str = "ledger";
pub const RECORDS_DIR: &str = "records";
pub const SCORES_DIR: &str = "scores";
pub const REPORTS_DIR: &str = "reports";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed content: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("nothing to run: {0}")]
    EmptyPlan(String),
    #[error("run {0} already exists; resume it instead")]
    AlreadyExists(String),
    #[error("no run {0} under {1}")]
    UnknownRun(String, PathBuf),
    #[error("configuration differs from the one run {run_id} was created with")]
    ConfigDrift { run_id: String },
    #[error("run {0} has no records")]
    EmptyRun(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemKey {
    pub sample_id: String,
    pub view: ViewLabel,
    pub agent: String,
}

#[derive(Debug, Clone)]
pub struct WorkItem {
    pub key: ItemKey,
    pub view: SampleView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub sample_id: String,
    pub view: ViewLabel,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub items: Vec<WorkItem>,
    pub skipped: Vec<SkippedItem>,
}

/// Every (sample, view, agent) item, samples in seeded random order. Views a
/// sample lacks are skipped with a reason.
pub fn plan_run(dataset: &Dataset, views: &[ViewLabel], agents: &[String], seed: u64) -> Result<Plan, RunError> {
    if dataset.is_empty() || views.is_empty() || agents.is_empty() {
        return Err(RunError::EmptyPlan("dataset, views and agents must all be non-empty".into()));
    }
    let mut plan = Plan {
        items: Vec::new(),
        skipped: Vec::new(),
    };
    for id in shuffled_order(dataset, seed) {
        let sample = dataset.get(&id).expect("ids come from the dataset");
        for &label in views {
            let view = match derive_view(sample, label) {
                Ok(v) => v,
                Err(e) => {
                    tracing::info!("skipping {id}/{label}: {e}");
                    plan.skipped.push(SkippedItem {
                        sample_id: id.clone(),
                        view: label,
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            for agent in agents {
                plan.items.push(WorkItem {
                    key: ItemKey {
                        sample_id: id.clone(),
                        view: label,
                        agent: agent.clone(),
                    },
                    view: view.clone(),
                });
            }
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEntry {
    pub name: String,
    pub roles: Vec<Role>,
    pub kind: BackendKind,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEntry {
    pub name: String,
    pub produces_answer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub manifest_hash: String,
    pub seed: u64,
    pub dry_run: bool,
    /// Unix seconds; omitted for dry runs so their output is reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<u64>,
    pub backends: Vec<BackendEntry>,
    pub agents: Vec<AgentEntry>,
    pub views: Vec<ViewLabel>,
    pub plan_size: usize,
    pub skipped: Vec<SkippedItem>,
    pub top_k: usize,
    pub heat_grid: [usize; 2],
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<RunManifest, RunError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| RunError::Corrupt {
            path,
            detail: e.to_string(),
        })
    }

    pub fn agent_names(&self) -> Vec<String> {
        self.agents.iter().map(|a| a.name.clone()).collect()
    }
}

/// Deterministic: the same config, dataset and mode always name the same run.
pub fn run_id_for(config_digest: &str, manifest_hash: &str, seed: u64, dry_run: bool) -> String {
    let mut h = Sha256::new();
    h.update(config_digest.as_bytes());
    h.update(b"\n");
    h.update(manifest_hash.as_bytes());
    h.update(format!("\n{seed}\n{dry_run}").as_bytes());
    hex::encode(&h.finalize()[..6])
}

pub fn records_path(dir: &Path, agent: &str) -> PathBuf {
    dir.join(RECORDS_DIR).join(format!("{agent}.jsonl"))
}

/// How an agent got to its click.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentTrace {
    Router { outcome: StrategyOutcome },
    RouterFailure { failure: RouterFailure },
    Direct {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        answer: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        point: Option<NormPoint>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        act: Option<PixelPoint>,
    },
    /// The item could not be attempted (e.g. unreadable raster).
    Error { message: String },
}

impl AgentTrace {
    pub fn act(&self) -> Option<PixelPoint> {
        match self {
            AgentTrace::Router { outcome } => Some(outcome.act),
            AgentTrace::Direct { act, .. } => *act,
            _ => None,
        }
    }

    pub fn answer(&self) -> Option<&str> {
        match self {
            AgentTrace::Router { outcome } => outcome.ans.as_deref(),
            AgentTrace::RouterFailure { failure } => failure.ans.as_deref(),
            AgentTrace::Direct { answer, .. } => answer.as_deref(),
            AgentTrace::Error { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    #[serde(flatten)]
    pub key: ItemKey,
    pub image_size: [u32; 2],
    pub view_size: [u32; 2],
    /// Ground-truth box in the view's frame.
    pub gt_bbox: BBox,
    pub trace: AgentTrace,
    pub score: ScoreRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

struct Ctx {
    dataset: Arc<Dataset>,
    backends: BTreeMap<String, SharedBackend>,
    agents: BTreeMap<String, AgentKind>,
    judge: Option<SharedBackend>,
    dispatcher: Dispatcher,
    router: RouterConfig,
    judge_runs: u32,
    timed: bool,
}

impl Ctx {
    fn backend(&self, name: &str) -> &SharedBackend {
        &self.backends[name]
    }
}

struct AgentOutput {
    trace: AgentTrace,
    errors: Vec<String>,
}

async fn run_agent(ctx: &Ctx, kind: &AgentKind, view: &SampleView, question: &str, raster: Arc<RgbImage>) -> AgentOutput {
    let prefix = format!("{}/{}", view.sample_id, view.label);
    let mut errors = Vec::new();
    match kind {
        AgentKind::Edagent {
            comprehender,
            grounder,
            validator,
        } => {
            let agent = EdAgent {
                comprehender: ctx.backend(comprehender).as_ref(),
                grounder: ctx.backend(grounder).as_ref(),
                validator: ctx.backend(validator.as_deref().unwrap_or(comprehender)).as_ref(),
                dispatcher: &ctx.dispatcher,
                config: &ctx.router,
            };
            let trace = match run_edagent(&agent, view, question, raster).await {
                Ok(outcome) => AgentTrace::Router { outcome },
                Err(failure) => AgentTrace::RouterFailure { failure },
            };
            AgentOutput { trace, errors }
        }
        AgentKind::Grounder { grounder } => {
            let g = ctx.backend(grounder);
            let point = backends::ground(&ctx.dispatcher, g.as_ref(), &format!("{prefix}/ground/question"), question, raster)
                .await
                .map_err(|e| errors.push(format!("ground question: {e}")))
                .ok();
            AgentOutput {
                trace: AgentTrace::Direct {
                    answer: None,
                    point,
                    act: point.map(|p| denormalize(&p, &view.view_meta)),
                },
                errors,
            }
        }
        AgentKind::Mllm { model } => {
            let m = ctx.backend(model);
            let comprehend_key = format!("{prefix}/comprehend");
            let ground_key = format!("{prefix}/ground/question");
            let (ans, point) = tokio::join!(
                backends::comprehend(&ctx.dispatcher, m.as_ref(), &comprehend_key, question, raster.clone()),
                backends::ground(&ctx.dispatcher, m.as_ref(), &ground_key, question, raster)
            );
            let answer = ans.map_err(|e| errors.push(format!("comprehend: {e}"))).ok();
            let point = point.map_err(|e| errors.push(format!("ground question: {e}"))).ok();
            AgentOutput {
                trace: AgentTrace::Direct {
                    answer,
                    point,
                    act: point.map(|p| denormalize(&p, &view.view_meta)),
                },
                errors,
            }
        }
    }
}

fn load_raster(root: PathBuf, sample: Sample, view: SampleView) -> Result<(RgbImage, FeatureVector), IngestError> {
    let img = load_view_raster(&root, &sample, &view)?;
    let f = low_level_features(&img);
    Ok((img, f))
}

async fn execute_item(ctx: &Ctx, item: &WorkItem) -> ResultRecord {
    let started = Instant::now();
    let sample = ctx.dataset.get(&item.key.sample_id).expect("planned from this dataset").clone();
    let kind = &ctx.agents[&item.key.agent];
    let view = &item.view;

    let loaded = {
        let (root, s, v) = (ctx.dataset.root.clone(), sample.clone(), view.clone());
        tokio::task::spawn_blocking(move || load_raster(root, s, v))
            .await
            .expect("raster task does not panic")
    };
    let (out, features) = match loaded {
        Ok((img, f)) => (run_agent(ctx, kind, view, &sample.question, Arc::new(img)).await, Some(f)),
        Err(e) => (
            AgentOutput {
                trace: AgentTrace::Error { message: e.to_string() },
                errors: Vec::new(),
            },
            None,
        ),
    };
    let mut errors = out.errors;

    let action = match out.trace.act() {
        Some(p) => score_action(&p, &view.view_bbox).expect("clicks are denormalized into the view frame"),
        None => ActionScore::MISS,
    };
    let (answer_status, answer) = if !kind.produces_answer() {
        (AnswerStatus::NotApplicable, None)
    } else {
        match (out.trace.answer(), &ctx.judge) {
            (Some(text), Some(judge)) => {
                let prefix = format!("{}/{}/judge/{}", item.key.sample_id, item.key.view, item.key.agent);
                match score_answer(
                    &ctx.dispatcher,
                    judge.as_ref(),
                    &prefix,
                    &sample.question,
                    &sample.gt_answer,
                    text,
                    ctx.judge_runs,
                )
                .await
                {
                    Ok(s) => (AnswerStatus::Scored, Some(s)),
                    Err(e) => {
                        errors.push(e.to_string());
                        (AnswerStatus::Unavailable, None)
                    }
                }
            }
            _ => (AnswerStatus::Missing, None),
        }
    };

    ResultRecord {
        key: item.key.clone(),
        image_size: [sample.image.width, sample.image.height],
        view_size: [view.view_meta.width, view.view_meta.height],
        gt_bbox: view.view_bbox,
        score: ScoreRecord {
            sample_id: item.key.sample_id.clone(),
            view: item.key.view,
            agent: item.key.agent.clone(),
            combo: sample.combo,
            difficulty: sample.difficulty,
            answer_status,
            answer,
            action,
        },
        trace: out.trace,
        features,
        elapsed_ms: ctx.timed.then(|| started.elapsed().as_millis() as u64),
        errors,
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub dry_run: bool,
    /// Continue an existing run instead of creating one.
    pub resume: bool,
    /// Stop after this many newly executed items.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub dir: PathBuf,
    pub planned: usize,
    pub skipped: usize,
    pub previously_done: usize,
    pub executed: usize,
    pub remaining: usize,
    /// Newly executed items that carry at least one error.
    pub items_with_errors: usize,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn sync_append(file: &mut File, line: &str, path: &Path) -> Result<(), RunError> {
    let mut buf = String::with_capacity(line.len() + 1);
    buf.push_str(line);
    buf.push('\n');
    file.write_all(buf.as_bytes()).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))
}

/// Lines that end in a newline and parse as `T`, with the byte offset just
/// past each; stops at the first torn or malformed line.
fn complete_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(T, u64)>, RunError> {
    let mut text = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut text).map_err(io_err(path))?;
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    }
    let mut out = Vec::new();
    let mut offset = 0usize;
    while let Some(nl) = text[offset..].iter().position(|b| *b == b'\n') {
        let line = &text[offset..offset + nl];
        match serde_json::from_slice::<T>(line) {
            Ok(v) => out.push((v, (offset + nl + 1) as u64)),
            Err(_) => break,
        }
        offset += nl + 1;
    }
    Ok(out)
}

fn truncate_to(path: &Path, len: u64) -> Result<(), RunError> {
    if !path.exists() {
        return Ok(());
    }
    let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
    if f.metadata().map_err(io_err(path))?.len() != len {
        tracing::warn!("truncating {} to {len} bytes", path.display());
        f.set_len(len).map_err(io_err(path))?;
        f.sync_all().map_err(io_err(path))?;
    }
    Ok(())
}

/// Brings the run directory back to a consistent state after an
/// interruption and returns the completed keys. The ledger keeps its longest
/// prefix whose records all survived; every records file is then cut back to
/// the records of that prefix, dropping torn tails and unledgered work.
fn recover(dir: &Path, agents: &[String]) -> Result<BTreeSet<ItemKey>, RunError> {
    let ledger_path = dir.join(LEDGER_FILE);
    let ledger: Vec<(ItemKey, u64)> = complete_lines(&ledger_path)?;
    let ledgered: BTreeSet<ItemKey> = ledger.iter().map(|(k, _)| k.clone()).collect();

    let mut files = Vec::with_capacity(agents.len());
    let mut recorded = BTreeSet::new();
    for agent in agents {
        let path = records_path(dir, agent);
        let mut lines = Vec::new();
        for (rec, end) in complete_lines::<ResultRecord>(&path)? {
            if !ledgered.contains(&rec.key) || !recorded.insert(rec.key.clone()) {
                break;
            }
            lines.push((rec.key, end));
        }
        files.push((path, lines));
    }

    let mut done = BTreeSet::new();
    let mut keep = 0;
    for (key, end) in &ledger {
        if !recorded.contains(key) {
            break;
        }
        done.insert(key.clone());
        keep = *end;
    }
    truncate_to(&ledger_path, keep)?;
    for (path, lines) in files {
        let keep = lines.iter().take_while(|(k, _)| done.contains(k)).last().map_or(0, |(_, end)| *end);
        truncate_to(&path, keep)?;
    }
    Ok(done)
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<(), RunError> {
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

/// The id `run` would give this config, without loading images.
pub fn expected_run_id(cfg: &Config, dry_run: bool) -> Result<String, RunError> {
    let path = cfg.dataset_path();
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(run_id_for(&cfg.digest(), &ingestion::manifest_digest(&bytes), cfg.seed, dry_run))
}

pub fn run_dir(cfg: &Config, run_id: &str) -> PathBuf {
    cfg.resolve(&cfg.out).join(run_id)
}

/// Plans and executes (or resumes) the run described by `cfg`.
pub async fn run(cfg: &Config, opts: &RunOptions) -> Result<RunSummary, RunError> {
    // Backends first: a missing credential should stop us before any work.
    let backends = cfg.build_backends(opts.dry_run)?;
    let dataset = ingestion::load_manifest_with(&cfg.dataset_path(), LoadOptions::default())?;
    let agent_names: Vec<String> = cfg.agents.iter().map(|a| a.name.clone()).collect();
    let plan = plan_run(&dataset, &cfg.views, &agent_names, cfg.seed)?;

    let digest = cfg.digest();
    let run_id = run_id_for(&digest, &dataset.manifest_hash, cfg.seed, opts.dry_run);
    let dir = run_dir(cfg, &run_id);
    let manifest_exists = dir.join(MANIFEST_FILE).exists();
    match (manifest_exists, opts.resume) {
        (true, false) => return Err(RunError::AlreadyExists(run_id)),
        (false, true) => return Err(RunError::UnknownRun(run_id, cfg.resolve(&cfg.out))),
        (true, true) => {
            let m = RunManifest::load(&dir)?;
            if m.config_digest != digest || m.manifest_hash != dataset.manifest_hash {
                return Err(RunError::ConfigDrift { run_id });
            }
        }
        (false, false) => {
            let records = dir.join(RECORDS_DIR);
            fs::create_dir_all(&records).map_err(io_err(&records))?;
            let manifest = RunManifest {
                run_id: run_id.clone(),
                config_digest: digest.clone(),
                manifest_hash: dataset.manifest_hash.clone(),
                seed: cfg.seed,
                dry_run: opts.dry_run,
                created_at: (!opts.dry_run).then(unix_now),
                backends: cfg
                    .backends
                    .iter()
                    .map(|b| BackendEntry {
                        name: b.name.clone(),
                        roles: b.roles.clone(),
                        kind: if opts.dry_run { BackendKind::Scripted } else { b.kind },
                        fingerprint: cfg.fingerprint(b, opts.dry_run),
                    })
                    .collect(),
                agents: cfg
                    .agents
                    .iter()
                    .map(|a| AgentEntry {
                        name: a.name.clone(),
                        produces_answer: a.kind.produces_answer(),
                    })
                    .collect(),
                views: cfg.views.clone(),
                plan_size: plan.items.len(),
                skipped: plan.skipped.clone(),
                top_k: cfg.top_k,
                heat_grid: cfg.heat_grid,
                config: {
                    let mut v = serde_json::to_value(cfg).expect("config serializes");
                    v.as_object_mut().expect("object").remove("out");
                    v
                },
            };
            write_manifest(&dir, &manifest)?;
        }
    }

    let done = recover(&dir, &agent_names)?;
    let todo: Vec<&WorkItem> = plan.items.iter().filter(|i| !done.contains(&i.key)).collect();
    let limit = opts.limit.unwrap_or(usize::MAX);
    tracing::info!("run {run_id}: {} planned, {} done, {} remaining", plan.items.len(), done.len(), todo.len());

    let ctx = Ctx {
        dataset: Arc::new(dataset),
        judge: cfg.judge.as_ref().map(|j| backends[j].clone()),
        backends,
        agents: cfg.agents.iter().map(|a| (a.name.clone(), a.kind.clone())).collect(),
        dispatcher: Dispatcher::new(cfg.retry.clone()),
        router: cfg.router,
        judge_runs: cfg.judge_runs,
        timed: !opts.dry_run,
    };

    let ledger_path = dir.join(LEDGER_FILE);
    let mut ledger = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&ledger_path)
        .map_err(io_err(&ledger_path))?;
    let mut writers: BTreeMap<String, (File, PathBuf)> = BTreeMap::new();
    for agent in &agent_names {
        let path = records_path(&dir, agent);
        let f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        writers.insert(agent.clone(), (f, path));
    }

    let mut executed = 0;
    let mut items_with_errors = 0;
    let width = cfg.retry.max_in_flight.max(1);
    let mut results = stream::iter(todo.iter().take(limit))
        .map(|item| execute_item(&ctx, item))
        .buffered(width);
    while let Some(rec) = results.next().await {
        let (file, path) = writers.get_mut(&rec.key.agent).expect("writer per agent");
        sync_append(file, &serde_json::to_string(&rec).expect("record serializes"), path)?;
        sync_append(&mut ledger, &serde_json::to_string(&rec.key).expect("key serializes"), &ledger_path)?;
        executed += 1;
        let failed = !rec.errors.is_empty()
            || matches!(rec.trace, AgentTrace::RouterFailure { .. } | AgentTrace::Error { .. });
        if failed {
            items_with_errors += 1;
        }
    }

    Ok(RunSummary {
        run_id,
        dir,
        planned: plan.items.len(),
        skipped: plan.skipped.len(),
        previously_done: done.len(),
        executed,
        remaining: todo.len() - executed,
        items_with_errors,
    })
}

/// Reads every record of a run, agents in manifest order.
pub fn load_records(dir: &Path) -> Result<(RunManifest, Vec<ResultRecord>), RunError> {
    let manifest = RunManifest::load(dir)?;
    let mut out = Vec::new();
    for agent in manifest.agent_names() {
        let path = records_path(dir, &agent);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
            Err(e) => return Err(io_err(&path)(e)),
        };
        for (i, line) in text.lines().enumerate() {
            let rec: ResultRecord = serde_json::from_str(line).map_err(|e| RunError::Corrupt {
                path: path.clone(),
                detail: format!("line {}: {e}", i + 1),
            })?;
            out.push(rec);
        }
    }
    Ok((manifest, out))
}

pub const BUNDLE_FILE: &str = "bundle.json";

/// Derives aggregates and analytics from the persisted records alone and
/// writes them to `scores/bundle.json`.
pub fn score_run(dir: &Path) -> Result<ScoreBundle, RunError> {
    let (manifest, records) = load_records(dir)?;
    if records.is_empty() {
        return Err(RunError::EmptyRun(manifest.run_id));
    }
    let bundle = build_bundle(&manifest, &records);
    let scores = dir.join(SCORES_DIR);
    fs::create_dir_all(&scores).map_err(io_err(&scores))?;
    let path = scores.join(BUNDLE_FILE);
    let mut text = serde_json::to_string_pretty(&bundle).expect("bundle serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(bundle)
}

pub fn load_bundle(dir: &Path) -> Result<ScoreBundle, RunError> {
    let path = dir.join(SCORES_DIR).join(BUNDLE_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| RunError::Corrupt {
        path,
        detail: e.to_string(),
    })
}

/// The directory of an existing run under `out_root`.
pub fn find_run(out_root: &Path, run_id: &str) -> Result<PathBuf, RunError> {
    let dir = out_root.join(run_id);
    if run_id.is_empty() || run_id.contains(['/', '\\']) || !dir.join(MANIFEST_FILE).is_file() {
        return Err(RunError::UnknownRun(run_id.to_string(), out_root.to_path_buf()));
    }
    Ok(dir)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub ledger_entries: usize,
    pub records: usize,
    /// Ledger keys without a record.
    pub missing_records: Vec<ItemKey>,
    /// Records without a ledger key (an interrupted tail, until resumed).
    pub unledgered_records: Vec<ItemKey>,
    pub duplicate_records: Vec<ItemKey>,
    pub duplicate_ledger: Vec<ItemKey>,
    /// Lines that are torn or do not parse, as `file:line`.
    pub malformed: Vec<String>,
    pub plan_size: usize,
}

impl AuditReport {
    pub fn is_consistent(&self) -> bool {
        self.missing_records.is_empty()
            && self.unledgered_records.is_empty()
            && self.duplicate_records.is_empty()
            && self.duplicate_ledger.is_empty()
            && self.malformed.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.is_consistent() && self.records == self.plan_size
    }
}

fn scan_lines<T: for<'de> Deserialize<'de>>(path: &Path, malformed: &mut Vec<String>) -> Result<Vec<T>, RunError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let n_lines = bytes.split(|b| *b == b'\n').count();
    for (i, line) in bytes.split(|b| *b == b'\n').enumerate() {
        let last = i + 1 == n_lines;
        if last && line.is_empty() {
            break;
        }
        match serde_json::from_slice::<T>(line) {
            Ok(v) if !last => out.push(v),
            _ => malformed.push(format!("{name}:{}", i + 1)),
        }
    }
    Ok(out)
}

/// Cross-checks the ledger against the records without modifying anything.
pub fn audit(dir: &Path) -> Result<AuditReport, RunError> {
    let manifest = RunManifest::load(dir)?;
    let mut report = AuditReport {
        plan_size: manifest.plan_size,
        ..AuditReport::default()
    };
    let ledger: Vec<ItemKey> = scan_lines(&dir.join(LEDGER_FILE), &mut report.malformed)?;
    report.ledger_entries = ledger.len();
    let mut ledger_set = BTreeSet::new();
    for k in ledger {
        if !ledger_set.insert(k.clone()) {
            report.duplicate_ledger.push(k);
        }
    }
    let mut seen = BTreeSet::new();
    for agent in manifest.agent_names() {
        let records: Vec<ResultRecord> = scan_lines(&records_path(dir, &agent), &mut report.malformed)?;
        for r in records {
            report.records += 1;
            if !seen.insert(r.key.clone()) {
                report.duplicate_records.push(r.key.clone());
            }
            if !ledger_set.contains(&r.key) {
                report.unledgered_records.push(r.key);
            }
        }
    }
    report.missing_records = ledger_set.difference(&seen).cloned().collect();
    Ok(report)
}
