//! Runs a continual experiment: one training round per task, evaluation of
//! every checkpoint on the test sets seen so far, and the replay data each
//! strategy carries forward.
//!
//! A run directory holds:
//!
//! ```text
//! config.json     resolved configuration
//! state.json      everything needed to continue after the last finished task
//! journal.jsonl   one line per finished task, append-only
//! record.json     the final record (a pure function of state.json)
//! timing.json     wall-clock seconds per task, kept out of the record
//! tasks/task<t>/  payload manifests, training annotations, trainer exports
//! replay/         replay manifests handed to the predictor
//! exemplars/      generated exemplar sets
//! ras/            persisted RAS state
//! ```

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    ewc_penalty, fisher_diag, packnet_prune, read_mask, read_param_vectors, select_replay, write_mask,
    write_param_vectors, BaselineError, PruneMask, SelectionPolicy,
};
use crate::dataset::{
    bucketize, class_frequencies, io_err, load_dataset, BucketAssignment, BucketPolicy, ClassKind, Dataset,
    IngestError, RawGraph, FORMAT_VERSION,
};
use crate::exemplar::{ExemplarItem, ExemplarSet};
use crate::graph::{ObjectClass, Predicate, SceneGraph};
use crate::metrics::{
    evaluate_images, gen_recall_bbox, gen_recall_rel, mean_recall_at_k, recall_at_k, GeneralizationMetrics, MeanRecall,
    MetricsReport, PredictionSet, RecallMatrix,
};
use crate::predictor::{
    resolve_predictor, BuiltinKind, Checkpoint, EwcPayload, ImageInput, PacknetPayload, Predictor, PredictorError,
    TrainPayload,
};
use crate::protocols::{mask_task, LabelMask, ProtocolError, Scenario, ScenarioKind, ScenarioManifest};
use crate::ras::{
    build_exemplar_set, build_exemplar_set_gt, cache_bytes, fnv1a64, persisted_state_bytes, splitmix64,
    write_persisted_state, CheckpointRef, EmbeddingProvider, HttpEmbedder, HttpGenerator, ImageGenerator, Labeler,
    MockEmbedder, MockGenerator, Providers, RasConfig, RasError, RetryPolicy, TripletUniverse, UNIVERSE_FILE,
};
use crate::sampling::{apply_to_buffer, resample, Resampler, SamplingError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("task {task}: {source}")]
    Predictor { task: usize, source: PredictorError },
    #[error("task {task}: {source}")]
    Ras { task: usize, source: RasError },
    #[error("task {task}: {source}")]
    Baseline { task: usize, source: BaselineError },
    #[error("task {task}: {source}")]
    Sampling { task: usize, source: SamplingError },
    #[error("provider: {0}")]
    Provider(String),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("stopped after task {0}")]
    Stopped(usize),
}

impl RunError {
    pub fn code(&self) -> &'static str {
        match self {
            RunError::InvalidConfig(_) => "InvalidConfig",
            RunError::Ingest(e) => e.code(),
            RunError::Protocol(e) => e.code(),
            RunError::Predictor { source, .. } => source.code(),
            RunError::Ras { source, .. } => source.code(),
            RunError::Baseline { .. } => "BaselineError",
            RunError::Sampling { source, .. } => source.code(),
            RunError::Provider(_) => "ProviderUnavailable",
            RunError::Resume(_) => "ResumeError",
            RunError::Stopped(_) => "Stopped",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Naive,
    /// Keeps `M` percent of each task's training images.
    Replay(f64),
    Ras,
    RasGt,
    Ewc,
    Packnet,
    Joint,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Naive => write!(f, "naive"),
            Strategy::Replay(m) => write!(f, "replay@{m}"),
            Strategy::Ras => write!(f, "ras"),
            Strategy::RasGt => write!(f, "ras_gt"),
            Strategy::Ewc => write!(f, "ewc"),
            Strategy::Packnet => write!(f, "packnet"),
            Strategy::Joint => write!(f, "joint"),
        }
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Ok(match lower.as_str() {
            "naive" => Strategy::Naive,
            "ras" => Strategy::Ras,
            "ras_gt" | "ras-gt" => Strategy::RasGt,
            "ewc" => Strategy::Ewc,
            "packnet" => Strategy::Packnet,
            "joint" => Strategy::Joint,
            _ => {
                let m = lower
                    .strip_prefix("replay@")
                    .or_else(|| lower.strip_prefix("replay:"))
                    .ok_or_else(|| format!("unknown strategy {s:?}"))?;
                let m: f64 = m.trim_end_matches('%').parse().map_err(|_| format!("bad replay percentage in {s:?}"))?;
                Strategy::Replay(m)
            }
        })
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub scenario: PathBuf,
    pub strategy: Strategy,
    /// `oracle`, `decay_oracle:<rho>`, `freq_baseline`, `empty` or
    /// `cmd:<command line>`.
    pub predictor: String,
    pub ks: Vec<usize>,
    pub iou: f64,
    pub gen_ious: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Train a scratch model per task for the forward-transfer baseline.
    pub fwt: bool,
    /// Resampling of each task's training graphs.
    pub sampler: Option<Resampler>,
    /// Resampling of the replay payload.
    pub buffer_sampler: Option<Resampler>,
    pub replay_policy: SelectionPolicy,
    pub packnet_keep: f64,
    /// Dataset images, for byte accounting and external trainers.
    pub image_dir: Option<PathBuf>,
    /// Task order as a permutation of `1..=T`.
    pub order: Option<Vec<usize>>,
    pub ras: RasConfig,
    /// Base URL serving both `/embed` and `/generate`; mocks when unset.
    /// `ras.embedding_endpoint` and `ras.generation_endpoint` override it.
    pub sidecar_url: Option<String>,
    /// Filesystem shared with the sidecar, for images returned by path.
    pub shared_root: Option<PathBuf>,
    pub retry: RetryPolicy,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            scenario: PathBuf::new(),
            strategy: Strategy::Naive,
            predictor: "oracle".into(),
            ks: vec![20, 50, 100],
            iou: 0.5,
            gen_ious: vec![0.3, 0.5, 0.7],
            seeds: vec![0],
            fwt: false,
            sampler: None,
            buffer_sampler: None,
            replay_policy: SelectionPolicy::Uniform,
            packnet_keep: 0.5,
            image_dir: None,
            order: None,
            ras: RasConfig::default(),
            sidecar_url: None,
            shared_root: None,
            retry: RetryPolicy::default(),
            jobs: 1,
        }
    }
}

impl RunConfig {
    /// Reads TOML (by extension) or JSON.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let parsed = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| RunError::InvalidConfig(vec![format!("{}: {e}", path.display())]))
    }

    /// Every problem found, one entry per field.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.dataset.as_os_str().is_empty() {
            p.push("dataset: required".to_string());
        }
        if self.scenario.as_os_str().is_empty() {
            p.push("scenario: required".to_string());
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            p.push(format!("ks: need at least one positive K, got {:?}", self.ks));
        }
        if !(self.iou > 0.0 && self.iou <= 1.0) {
            p.push(format!("iou: must be in (0, 1], got {}", self.iou));
        }
        if self.gen_ious.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            p.push(format!("gen_ious: each must be in (0, 1], got {:?}", self.gen_ious));
        }
        if self.seeds.is_empty() {
            p.push("seeds: need at least one seed".to_string());
        }
        if let Strategy::Replay(m) = self.strategy {
            if !(m > 0.0 && m <= 100.0) {
                p.push(format!("strategy: replay percentage must be in (0, 100], got {m}"));
            }
        }
        if !(self.packnet_keep > 0.0 && self.packnet_keep < 1.0) {
            p.push(format!("packnet_keep: must be in (0, 1), got {}", self.packnet_keep));
        }
        if !self.predictor.starts_with("cmd:") {
            if let Err(e) = self.predictor.parse::<BuiltinKind>() {
                p.push(format!("predictor: {e}"));
            }
        }
        if let Err(e) = self.ras.validate() {
            p.push(format!("ras: {e}"));
        }
        if self.jobs == 0 {
            p.push("jobs: must be at least 1".to_string());
        }
        p
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(RunError::InvalidConfig(p))
        }
    }
}

/// Loaded inputs and resolved providers for one run.
pub struct RunContext {
    pub dataset: Arc<Dataset>,
    pub scenario: Scenario,
    pub predictor: Box<dyn Predictor>,
    pub embedder: Box<dyn EmbeddingProvider>,
    pub generator: Box<dyn ImageGenerator>,
}

impl RunContext {
    /// Loads the dataset and scenario and resolves the predictor and the
    /// providers (HTTP when a sidecar URL is configured, mocks otherwise).
    pub fn prepare(cfg: &RunConfig, seed: u64, run_dir: &Path) -> Result<Self, RunError> {
        cfg.validate()?;
        let (dataset, report) = load_dataset(&cfg.dataset, FORMAT_VERSION)?;
        if !report.repairs.is_clean() {
            log::warn!("dataset needed repairs: {:?}", report.repairs);
        }
        let dataset = Arc::new(dataset);
        let mut scenario = ScenarioManifest::read(&cfg.scenario)?.to_scenario(&dataset.vocab)?;
        if let Some(order) = &cfg.order {
            scenario = scenario.reorder(order)?;
        }
        let work_dir = fs::canonicalize(run_dir).unwrap_or_else(|_| run_dir.to_path_buf());
        let predictor = resolve_predictor(&cfg.predictor, dataset.clone(), scenario.taught_objects(), seed, &work_dir)
            .map_err(|source| RunError::Predictor { task: 0, source })?;
        let embed_url = cfg.ras.embedding_endpoint.as_ref().or(cfg.sidecar_url.as_ref());
        let gen_url = cfg.ras.generation_endpoint.as_ref().or(cfg.sidecar_url.as_ref());
        let embedder: Box<dyn EmbeddingProvider> = match embed_url {
            Some(url) if cfg.strategy == Strategy::Ras => {
                Box::new(HttpEmbedder::connect(url, cfg.retry.clone()).map_err(|e| RunError::Provider(e.to_string()))?)
            }
            _ => Box::new(MockEmbedder { seed }),
        };
        let generator: Box<dyn ImageGenerator> = match gen_url {
            Some(url) if matches!(cfg.strategy, Strategy::Ras | Strategy::RasGt) => {
                Box::new(HttpGenerator::new(url, cfg.retry.clone(), cfg.shared_root.as_deref()))
            }
            _ => Box::new(MockGenerator::new()),
        };
        Ok(Self { dataset, scenario, predictor, embedder, generator })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop with [`RunError::Stopped`] once this many tasks are done.
    pub stop_after: Option<usize>,
}

/// Evaluation of one checkpoint at one K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRow {
    pub k: usize,
    /// R@K on test set `j`, for each evaluated `j`.
    pub recall: Vec<Option<f64>>,
    pub mean_recall: Vec<Option<f64>>,
    pub cumulative_recall: Option<f64>,
    pub cumulative_mean_recall: Option<MeanRecall>,
    pub generalization: Vec<GeneralizationMetrics>,
    /// Scratch model on this task's own test set.
    pub baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: usize,
    pub checkpoint: String,
    pub per_k: Vec<KRow>,
    pub replay_items: usize,
    pub replay_bytes: u64,
    pub ewc_penalty: Option<f64>,
    pub packnet_free: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct RunState {
    config_hash: String,
    completed: usize,
    checkpoint: Option<Checkpoint>,
    rows: Vec<TaskRow>,
    /// Raw replay buffer (Replay@M) or accumulated GT exemplars, relative
    /// to the run directory.
    buffer: Option<PathBuf>,
    /// Manifest handed to the next task.
    replay_manifest: Option<PathBuf>,
    ewc: Option<EwcPayload>,
    packnet: Option<PacknetPayload>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Storage {
    /// Images plus annotations held by the replay buffer.
    pub replay_bytes: Option<u64>,
    pub replay_image_bytes: Option<u64>,
    pub ras_state_bytes: Option<u64>,
    /// Generated images: regenerable, reported apart from the state.
    pub exemplar_cache_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub strategy: Strategy,
    pub predictor: String,
    pub scenario: ScenarioKind,
    pub tasks: usize,
    pub checkpoints: Vec<String>,
    pub rows: Vec<TaskRow>,
    pub reports: Vec<MetricsReport>,
    pub storage: Storage,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| {
            IngestError::Format { file: path.to_path_buf(), line: e.line(), message: e.to_string() }.into()
        })
    }

    pub fn report(&self, k: usize) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.k == k)
    }
}

pub const RECORD_FILE: &str = "record.json";
pub const SEED_DIR_PREFIX: &str = "seed-";

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("{SEED_DIR_PREFIX}{seed}"))
}
const STATE_FILE: &str = "state.json";
const JOURNAL_FILE: &str = "journal.jsonl";

fn task_rng(seed: u64, task: usize, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(task as u64 ^ (purpose << 32))))
}

fn write_file(path: &Path, text: &str) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

fn write_graphs(path: &Path, graphs: &[SceneGraph], d: &Dataset) -> Result<(), RunError> {
    let mut out = String::new();
    for g in graphs {
        out.push_str(&serde_json::to_string(&RawGraph::from_graph(g, &d.vocab)).expect("serializable"));
        out.push('\n');
    }
    write_file(path, &out)
}

/// Prefixes relative image paths so they resolve from the run directory.
fn rebase(set: &ExemplarSet, prefix: &Path) -> ExemplarSet {
    ExemplarSet {
        items: set
            .items
            .iter()
            .map(|i| ExemplarItem {
                image_path: i.image_path.as_ref().map(|p| if p.is_absolute() { p.clone() } else { prefix.join(p) }),
                ..i.clone()
            })
            .collect(),
    }
}

struct Run<'a> {
    cfg: &'a RunConfig,
    ctx: &'a RunContext,
    seed: u64,
    dir: PathBuf,
    buckets: BucketAssignment,
    state: RunState,
    timing: Vec<(usize, f64)>,
}

impl<'a> Run<'a> {
    fn d(&self) -> &Dataset {
        &self.ctx.dataset
    }

    fn tasks(&self) -> usize {
        self.ctx.scenario.tasks.len()
    }

    fn rel(&self, p: &Path) -> PathBuf {
        p.strip_prefix(&self.dir).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
    }

    fn image_dir(&self) -> Option<PathBuf> {
        self.cfg.image_dir.clone().or_else(|| {
            let p = self.cfg.dataset.join("images");
            p.is_dir().then_some(p)
        })
    }

    fn predict(&self, ckpt: &Checkpoint, ids: &[String], task: usize) -> Result<HashMap<String, PredictionSet>, RunError> {
        let image_dir = self.image_dir();
        let inputs: Vec<ImageInput> = ids
            .iter()
            .map(|id| ImageInput::Dataset {
                image_id: id.clone(),
                path: image_dir.as_deref().and_then(|d| crate::baselines::image_file(d, id)),
            })
            .collect();
        let jobs = self.cfg.jobs.max(1);
        let chunk = inputs.len().div_ceil(jobs).max(1);
        let predictor = &*self.ctx.predictor;
        let results: Vec<Result<Vec<PredictionSet>, PredictorError>> = if jobs == 1 || inputs.len() < 2 {
            vec![predictor.predict(ckpt, &inputs)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> =
                    inputs.chunks(chunk).map(|c| s.spawn(move || predictor.predict(ckpt, c))).collect();
                handles.into_iter().map(|h| h.join().expect("prediction thread panicked")).collect()
            })
        };
        let mut out = HashMap::new();
        for r in results {
            for set in r.map_err(|source| RunError::Predictor { task, source })? {
                out.insert(set.image_id.clone(), set);
            }
        }
        Ok(out)
    }

    fn payload_base(&self, t: usize, mask: &LabelMask, graphs: Vec<SceneGraph>) -> Result<TrainPayload, RunError> {
        let d = self.d();
        let task_dir = self.dir.join("tasks").join(format!("task{t}"));
        let mut visible_objects: Option<Vec<ObjectClass>> =
            mask.objects.as_ref().map(|s| s.iter().copied().collect::<BTreeSet<_>>().into_iter().collect());
        if let Some(v) = &mut visible_objects {
            v.sort();
        }
        let visible_predicates: Vec<Predicate> = mask.predicates.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let annotations = task_dir.join("train.jsonl");
        write_graphs(&annotations, &graphs, d)?;
        Ok(TrainPayload {
            task: t,
            seed: self.seed,
            base_checkpoint: None,
            objects: visible_objects.as_ref().map(|v| v.iter().map(|c| d.vocab.object_name(*c).to_string()).collect()),
            predicates: visible_predicates.iter().map(|p| d.vocab.predicate_name(*p).to_string()).collect(),
            train_images: graphs.iter().map(|g| g.image_id.clone()).collect(),
            annotations: Some(self.rel(&annotations)),
            replay_manifest: None,
            image_dir: self.image_dir(),
            ewc: None,
            packnet: None,
            export_dir: None,
            manifest_path: None,
            graphs,
            replay: Vec::new(),
            visible_objects,
            visible_predicates,
        })
    }

    fn train(&self, t: usize, mut payload: TrainPayload, base: Option<&Checkpoint>, name: &str) -> Result<Checkpoint, RunError> {
        payload.base_checkpoint = base.map(|c| c.id.clone());
        let path = self.dir.join("tasks").join(format!("task{t}")).join(name);
        let mut text = serde_json::to_string_pretty(&payload).expect("serializable");
        text.push('\n');
        write_file(&path, &text)?;
        payload.manifest_path = Some(path);
        self.ctx.predictor.train(base, &payload).map_err(|source| RunError::Predictor { task: t, source })
    }

    fn training_graphs(&self, t: usize, graphs: Vec<SceneGraph>) -> Vec<SceneGraph> {
        match &self.cfg.sampler {
            Some(s) => resample(&graphs, s, &mut task_rng(self.seed, t, 1)).into_iter().map(|(_, g)| g).collect(),
            None => graphs,
        }
    }

    fn load_replay(&self) -> Result<Vec<ExemplarItem>, RunError> {
        match &self.state.replay_manifest {
            Some(p) => Ok(ExemplarSet::read(&self.dir.join(p), &self.d().vocab)?.items),
            None => Ok(Vec::new()),
        }
    }

    /// Evaluates a checkpoint on test sets `1..=upto` (per-task labels),
    /// the cumulative test set and, for S3, the generalization set.
    fn evaluate(&self, ckpt: &Checkpoint, t: usize, upto: usize) -> Result<Vec<KRow>, RunError> {
        let d = self.d();
        let s = &self.ctx.scenario;
        let per_task: Vec<Vec<SceneGraph>> =
            (1..=upto).map(|j| mask_task(d, s, j, false).map(|td| td.test)).collect::<Result<_, _>>()?;
        let cumulative = mask_task(d, s, upto, true)?.test;
        let gen = s.generalization_graphs(d);
        let mut ids: Vec<String> = Vec::new();
        let mut seen = HashSet::new();
        for g in per_task.iter().flatten().chain(&cumulative).chain(&gen) {
            if seen.insert(g.image_id.clone()) {
                ids.push(g.image_id.clone());
            }
        }
        let preds = self.predict(ckpt, &ids, t)?;
        let mut rows = Vec::new();
        for &k in &self.cfg.ks {
            let mut recall = Vec::new();
            let mut mean_recall = Vec::new();
            for test in &per_task {
                let m = evaluate_images(&preds, test, k, self.cfg.iou);
                recall.push(recall_at_k(&m).ok());
                mean_recall.push(mean_recall_at_k(&m, Some(&self.buckets)).ok().map(|r| r.mean));
            }
            let m = evaluate_images(&preds, &cumulative, k, self.cfg.iou);
            let generalization = if gen.is_empty() {
                Vec::new()
            } else {
                self.cfg
                    .gen_ious
                    .iter()
                    .map(|&iou| GeneralizationMetrics {
                        task: t,
                        iou,
                        recall_bbox: gen_recall_bbox(&preds, &gen, k, iou).ok(),
                        recall_rel: gen_recall_rel(&preds, &gen, k, iou).ok(),
                    })
                    .collect()
            };
            rows.push(KRow {
                k,
                recall,
                mean_recall,
                cumulative_recall: recall_at_k(&m).ok(),
                cumulative_mean_recall: mean_recall_at_k(&m, Some(&self.buckets)).ok(),
                generalization,
                baseline: None,
            });
        }
        Ok(rows)
    }

    fn scratch_baseline(&self, t: usize, rows: &mut [KRow]) -> Result<(), RunError> {
        let td = mask_task(self.d(), &self.ctx.scenario, t, false)?;
        let graphs = self.training_graphs(t, td.train);
        let payload = self.payload_base(t, &self.ctx.scenario.task(t)?.mask(), graphs)?;
        let ckpt = self.train(t, payload, None, "scratch_payload.json")?;
        let preds = self.predict(&ckpt, &td.test.iter().map(|g| g.image_id.clone()).collect::<Vec<_>>(), t)?;
        for row in rows {
            row.baseline = recall_at_k(&evaluate_images(&preds, &td.test, row.k, self.cfg.iou)).ok();
        }
        Ok(())
    }

    fn save_state(&self) -> Result<(), RunError> {
        let mut text = serde_json::to_string_pretty(&self.state).expect("serializable");
        text.push('\n');
        write_file(&self.dir.join(STATE_FILE), &text)
    }

    fn journal(&self, row: &TaskRow) -> Result<(), RunError> {
        use std::io::Write;
        let path = self.dir.join(JOURNAL_FILE);
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        let line = serde_json::json!({"event": "task_done", "task": row.task, "checkpoint": row.checkpoint});
        writeln!(f, "{line}").map_err(io_err(&path))?;
        Ok(())
    }

    /// Replay data for the next task, built after training task `t`.
    fn carry_forward(&mut self, t: usize, train: &[SceneGraph], ckpt: &Checkpoint, row: &mut TaskRow) -> Result<(), RunError> {
        let d = self.ctx.dataset.clone();
        let vocab = &d.vocab;
        let last = t == self.tasks();
        let replay_dir = self.dir.join("replay");
        let mut next: Option<ExemplarSet> = None;
        match self.cfg.strategy {
            Strategy::Naive | Strategy::Joint => {}
            Strategy::Replay(m) => {
                let mut buffer = match &self.state.buffer {
                    Some(p) => ExemplarSet::read(&self.dir.join(p), vocab)?,
                    None => ExemplarSet::default(),
                };
                let image_dir = self.image_dir();
                let picked =
                    select_replay(train, m, self.cfg.replay_policy, &mut task_rng(self.seed, t, 2), image_dir.as_deref(), vocab)
                        .map_err(|source| RunError::Baseline { task: t, source })?;
                buffer.items.extend(picked.items);
                let path = replay_dir.join("buffer.jsonl");
                fs::create_dir_all(&replay_dir).map_err(io_err(&replay_dir))?;
                buffer.write(&path, vocab)?;
                self.state.buffer = Some(self.rel(&path));
                next = Some(buffer);
            }
            Strategy::Ras => {
                let state_path = self.dir.join(crate::ras::STATE_DIR).join(UNIVERSE_FILE);
                let mut u = if state_path.exists() {
                    TripletUniverse::from_file(&TripletUniverse::read_file(&state_path)?, vocab)
                        .map_err(|e| RunError::Resume(format!("{}: {e}", state_path.display())))?
                } else {
                    TripletUniverse::new()
                };
                u.update(train, t);
                let cref = CheckpointRef { checkpoint_id: ckpt.id.clone(), task: t };
                write_persisted_state(&self.dir, &u, vocab, &self.cfg.ras, Some(&cref))
                    .map_err(|source| RunError::Ras { task: t, source })?;
                if !last && !u.is_empty() {
                    let dir = self.dir.join("exemplars").join(format!("task{t}"));
                    let providers = Providers { embedder: &*self.ctx.embedder, generator: &*self.ctx.generator };
                    let labeler = Labeler { predictor: &*self.ctx.predictor, checkpoint: ckpt };
                    let build = build_exemplar_set(&u, vocab, &self.cfg.ras, &providers, &labeler, &dir, &mut task_rng(self.seed, t, 3))
                        .map_err(|source| RunError::Ras { task: t, source })?;
                    next = Some(rebase(&build.set, &self.rel(&dir)));
                }
            }
            Strategy::RasGt => {
                let mut acc = match &self.state.buffer {
                    Some(p) => ExemplarSet::read(&self.dir.join(p), vocab)?,
                    None => ExemplarSet::default(),
                };
                if !last {
                    let dir = self.dir.join("exemplars").join(format!("gt_task{t}"));
                    let build = build_exemplar_set_gt(train, vocab, &self.cfg.ras, &*self.ctx.generator, &dir)
                        .map_err(|source| RunError::Ras { task: t, source })?;
                    acc.items.extend(rebase(&build.set, &self.rel(&dir)).items);
                    let path = replay_dir.join("buffer.jsonl");
                    fs::create_dir_all(&replay_dir).map_err(io_err(&replay_dir))?;
                    acc.write(&path, vocab)?;
                    self.state.buffer = Some(self.rel(&path));
                    next = Some(acc);
                }
            }
            Strategy::Ewc => {
                let export = self.dir.join("tasks").join(format!("task{t}")).join("export");
                match (read_param_vectors(&export.join("params.bin")), read_param_vectors(&export.join("grads.bin"))) {
                    (Ok(params), Ok(grads)) if !params.is_empty() => {
                        let w = &params[0];
                        if let Some(prev) = &self.state.ewc {
                            let anchor = read_param_vectors(&self.dir.join(&prev.anchor))
                                .map_err(|source| RunError::Baseline { task: t, source })?;
                            let fisher = read_param_vectors(&self.dir.join(&prev.fisher))
                                .map_err(|source| RunError::Baseline { task: t, source })?;
                            row.ewc_penalty = Some(
                                ewc_penalty(w, &anchor[0], &crate::baselines::FisherDiag(fisher[0].0.clone()))
                                    .map_err(|source| RunError::Baseline { task: t, source })?,
                            );
                        }
                        let f = fisher_diag(&grads).map_err(|source| RunError::Baseline { task: t, source })?;
                        let dir = self.dir.join("ewc");
                        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                        let (anchor, fisher) = (dir.join(format!("anchor_task{t}.bin")), dir.join(format!("fisher_task{t}.bin")));
                        write_param_vectors(&anchor, std::slice::from_ref(w)).map_err(|source| RunError::Baseline { task: t, source })?;
                        write_param_vectors(&fisher, &[crate::baselines::ParamVector(f.0)])
                            .map_err(|source| RunError::Baseline { task: t, source })?;
                        self.state.ewc = Some(EwcPayload { anchor: self.rel(&anchor), fisher: self.rel(&fisher) });
                    }
                    _ => log::warn!("task {t}: trainer exported no parameters; EWC anchor unchanged"),
                }
            }
            Strategy::Packnet => {
                let export = self.dir.join("tasks").join(format!("task{t}")).join("export");
                match read_param_vectors(&export.join("params.bin")) {
                    Ok(params) if !params.is_empty() => {
                        let w = &params[0];
                        let prev = match &self.state.packnet {
                            Some(p) => read_mask(&self.dir.join(&p.mask)).map_err(|source| RunError::Baseline { task: t, source })?,
                            None => PruneMask::all_free(w.0.len()),
                        };
                        let mask = match packnet_prune(w, &prev, self.cfg.packnet_keep, t as u16) {
                            Ok(m) => m,
                            Err(BaselineError::NoFreeParameters) => {
                                log::warn!("task {t}: no free parameters left to assign");
                                prev
                            }
                            Err(source) => return Err(RunError::Baseline { task: t, source }),
                        };
                        row.packnet_free = Some(mask.free_count());
                        let dir = self.dir.join("packnet");
                        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                        let path = dir.join(format!("mask_task{t}.bin"));
                        write_mask(&path, &mask).map_err(|source| RunError::Baseline { task: t, source })?;
                        self.state.packnet = Some(PacknetPayload { mask: self.rel(&path), keep_fraction: self.cfg.packnet_keep });
                    }
                    _ => log::warn!("task {t}: trainer exported no parameters; PackNet mask unchanged"),
                }
            }
        }
        if let Some(set) = next {
            let set = match &self.cfg.buffer_sampler {
                Some(s) if !set.is_empty() => apply_to_buffer(&set, s, &mut task_rng(self.seed, t, 4))
                    .map_err(|source| RunError::Sampling { task: t, source })?,
                _ => set,
            };
            row.replay_items = set.len();
            row.replay_bytes = set.total_bytes();
            fs::create_dir_all(&replay_dir).map_err(io_err(&replay_dir))?;
            let path = replay_dir.join(format!("task{}.jsonl", t + 1));
            set.write(&path, vocab)?;
            self.state.replay_manifest = Some(self.rel(&path));
        }
        Ok(())
    }

    fn run_task(&mut self, t: usize) -> Result<(), RunError> {
        let started = Instant::now();
        let s = &self.ctx.scenario;
        let td = mask_task(self.d(), s, t, false)?;
        let graphs = self.training_graphs(t, td.train.clone());
        let mut payload = self.payload_base(t, &s.task(t)?.mask(), graphs)?;
        payload.replay = self.load_replay()?;
        payload.replay_manifest = self.state.replay_manifest.clone();
        if matches!(self.cfg.strategy, Strategy::Ewc | Strategy::Packnet) {
            payload.export_dir = Some(PathBuf::from("tasks").join(format!("task{t}")).join("export"));
            payload.ewc = self.state.ewc.clone();
            payload.packnet = self.state.packnet.clone();
        }
        let base = self.state.checkpoint.clone();
        let ckpt = self.train_in_run_dir(t, payload, base.as_ref())?;
        let mut row = TaskRow {
            task: t,
            checkpoint: ckpt.id.clone(),
            per_k: Vec::new(),
            replay_items: 0,
            replay_bytes: 0,
            ewc_penalty: None,
            packnet_free: None,
        };
        self.carry_forward(t, &td.train, &ckpt, &mut row)?;
        row.per_k = self.evaluate(&ckpt, t, t)?;
        if self.cfg.fwt {
            self.scratch_baseline(t, &mut row.per_k)?;
        }
        self.journal(&row)?;
        self.state.rows.push(row);
        self.state.checkpoint = Some(ckpt);
        self.state.completed = t;
        self.save_state()?;
        self.timing.push((t, started.elapsed().as_secs_f64()));
        Ok(())
    }

    /// Trainers resolve payload paths against the run directory.
    fn train_in_run_dir(&self, t: usize, mut payload: TrainPayload, base: Option<&Checkpoint>) -> Result<Checkpoint, RunError> {
        if let Some(e) = &payload.export_dir {
            payload.export_dir = Some(self.dir.join(e));
        }
        let ckpt = self.train(t, payload, base, "payload.json")?;
        Ok(ckpt)
    }

    fn run_joint(&mut self) -> Result<(), RunError> {
        let started = Instant::now();
        let t = self.tasks();
        let s = &self.ctx.scenario;
        let mask = s.cumulative_mask(t)?;
        let train: Vec<SceneGraph> = self
            .d()
            .split_graphs(crate::dataset::Split::Train)
            .map(|g| mask.apply(g))
            .filter(|g| !g.relations.is_empty())
            .collect();
        let graphs = self.training_graphs(t, train);
        let payload = self.payload_base(t, &mask, graphs)?;
        let ckpt = self.train(t, payload, None, "payload.json")?;
        let mut per_k = self.evaluate(&ckpt, t, t)?;
        if self.cfg.fwt {
            self.scratch_baseline(t, &mut per_k)?;
        }
        let row = TaskRow {
            task: t,
            checkpoint: ckpt.id.clone(),
            per_k,
            replay_items: 0,
            replay_bytes: 0,
            ewc_penalty: None,
            packnet_free: None,
        };
        self.journal(&row)?;
        self.state.rows.push(row);
        self.state.checkpoint = Some(ckpt);
        self.state.completed = t;
        self.save_state()?;
        self.timing.push((t, started.elapsed().as_secs_f64()));
        Ok(())
    }

    fn record(&self) -> RunRecord {
        let n = self.tasks();
        let reports = self
            .cfg
            .ks
            .iter()
            .enumerate()
            .map(|(ki, &k)| {
                let mut recall = RecallMatrix::new(n);
                let mut mean = RecallMatrix::new(n);
                let mut cumulative = vec![(None, None); n];
                let mut generalization = Vec::new();
                for row in &self.state.rows {
                    let kr = &row.per_k[ki];
                    for (j, v) in kr.recall.iter().enumerate() {
                        if let Some(v) = v {
                            recall.set(row.task, j + 1, *v);
                        }
                    }
                    for (j, v) in kr.mean_recall.iter().enumerate() {
                        if let Some(v) = v {
                            mean.set(row.task, j + 1, *v);
                        }
                    }
                    if let Some(b) = kr.baseline {
                        recall.set_baseline(row.task, b);
                    }
                    cumulative[row.task - 1] = (kr.cumulative_recall, kr.cumulative_mean_recall.clone());
                    generalization.extend(kr.generalization.iter().cloned());
                }
                MetricsReport::from_matrices(k, recall, mean, cumulative, generalization)
            })
            .collect();
        let vocab = &self.d().vocab;
        let buffer = self.state.buffer.as_ref().and_then(|p| ExemplarSet::read(&self.dir.join(p), vocab).ok());
        let mut storage = Storage::default();
        match self.cfg.strategy {
            Strategy::Replay(_) => {
                storage.replay_bytes = buffer.as_ref().map(ExemplarSet::total_bytes);
                storage.replay_image_bytes = buffer.as_ref().map(|b| {
                    b.items
                        .iter()
                        .filter_map(|i| i.image_path.as_ref())
                        .filter_map(|p| fs::metadata(p).ok())
                        .map(|m| m.len())
                        .sum()
                });
            }
            Strategy::Ras => {
                storage.ras_state_bytes = Some(persisted_state_bytes(&self.dir));
                storage.exemplar_cache_bytes = Some(self.exemplar_cache());
            }
            Strategy::RasGt => {
                storage.exemplar_cache_bytes = Some(self.exemplar_cache());
            }
            _ => {}
        }
        RunRecord {
            seed: self.seed,
            strategy: self.cfg.strategy,
            predictor: self.cfg.predictor.clone(),
            scenario: self.ctx.scenario.kind,
            tasks: n,
            checkpoints: self.state.rows.iter().map(|r| r.checkpoint.clone()).collect(),
            rows: self.state.rows.clone(),
            reports,
            storage,
        }
    }

    fn exemplar_cache(&self) -> u64 {
        fs::read_dir(self.dir.join("exemplars"))
            .map(|rd| rd.filter_map(|e| e.ok()).map(|e| cache_bytes(&e.path())).sum())
            .unwrap_or(0)
    }
}

fn config_hash(cfg: &RunConfig, seed: u64) -> String {
    let text = format!("{}|{seed}", serde_json::to_string(cfg).expect("serializable"));
    format!("{:016x}", fnv1a64(text.as_bytes()))
}

/// Runs every configured seed into its own `seed-<s>` directory under `out`.
pub fn run_seeds(cfg: &RunConfig, out: &Path, opts: RunOptions) -> Result<Vec<RunRecord>, RunError> {
    cfg.validate()?;
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(out, seed);
        let ctx = RunContext::prepare(cfg, seed, &dir)?;
        records.push(run_scenario(cfg, &ctx, seed, &dir, opts)?);
    }
    Ok(records)
}

/// Runs every task of the scenario for one seed into `run_dir`.
pub fn run_scenario(cfg: &RunConfig, ctx: &RunContext, seed: u64, run_dir: &Path, opts: RunOptions) -> Result<RunRecord, RunError> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let dir = fs::canonicalize(run_dir).map_err(io_err(run_dir))?;
    let hash = config_hash(cfg, seed);
    let state_path = dir.join(STATE_FILE);
    let state = if state_path.exists() {
        if !opts.resume {
            return Err(RunError::Resume(format!("{} already holds a run; pass --resume to continue it", dir.display())));
        }
        let text = fs::read_to_string(&state_path).map_err(io_err(&state_path))?;
        let st: RunState = serde_json::from_str(&text).map_err(|e| RunError::Resume(e.to_string()))?;
        if st.config_hash != hash {
            return Err(RunError::Resume("configuration differs from the interrupted run".into()));
        }
        log::info!("resuming after task {}", st.completed);
        st
    } else {
        RunState { config_hash: hash, ..Default::default() }
    };
    let mut cfg_text = serde_json::to_string_pretty(cfg).expect("serializable");
    cfg_text.push('\n');
    write_file(&dir.join("config.json"), &cfg_text)?;
    let freqs = class_frequencies(&ctx.dataset, ClassKind::Predicates);
    let mut run = Run {
        cfg,
        ctx,
        seed,
        dir: dir.clone(),
        buckets: bucketize(&freqs, BucketPolicy::default()),
        state,
        timing: Vec::new(),
    };
    let n = run.tasks();
    if cfg.strategy == Strategy::Joint {
        if run.state.completed < n {
            run.run_joint()?;
        }
    } else {
        for t in run.state.completed + 1..=n {
            run.run_task(t)?;
            if opts.stop_after.is_some_and(|s| t >= s) && t < n {
                return Err(RunError::Stopped(t));
            }
        }
    }
    let record = run.record();
    write_file(&dir.join(RECORD_FILE), &record.to_json())?;
    let timing: Vec<serde_json::Value> =
        run.timing.iter().map(|(t, s)| serde_json::json!({"task": t, "seconds": s})).collect();
    write_file(&dir.join("timing.json"), &serde_json::to_string_pretty(&timing).expect("serializable"))?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names() {
        for (s, v) in [
            ("naive", Strategy::Naive),
            ("replay@10", Strategy::Replay(10.0)),
            ("Replay:20%", Strategy::Replay(20.0)),
            ("ras", Strategy::Ras),
            ("ras_gt", Strategy::RasGt),
            ("ewc", Strategy::Ewc),
            ("packnet", Strategy::Packnet),
            ("joint", Strategy::Joint),
        ] {
            assert_eq!(s.parse::<Strategy>().unwrap(), v);
        }
        assert_eq!(Strategy::Replay(100.0).to_string(), "replay@100");
        assert!("replay@x".parse::<Strategy>().is_err());
        assert!("magic".parse::<Strategy>().is_err());
    }

    #[test]
    fn config_problems_list_fields() {
        let cfg = RunConfig {
            ks: vec![0],
            iou: 1.5,
            strategy: Strategy::Replay(0.0),
            predictor: "nope".into(),
            ..Default::default()
        };
        let p = cfg.problems();
        for field in ["dataset", "scenario", "ks", "iou", "strategy", "predictor"] {
            assert!(p.iter().any(|m| m.starts_with(field)), "{field} missing from {p:?}");
        }
        let ok = RunConfig { dataset: "d".into(), scenario: "s".into(), ..Default::default() };
        assert!(ok.problems().is_empty());
    }

    #[test]
    fn config_formats() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("run.toml");
        fs::write(
            &toml_path,
            "dataset = \"data\"\nscenario = \"s1.json\"\nstrategy = \"replay@10\"\nks = [20]\n\n[ras]\ngamma = 2\n\n[sampler]\nmethod = \"lvis\"\nthreshold = 0.1\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&toml_path).unwrap();
        assert_eq!(cfg.strategy, Strategy::Replay(10.0));
        assert_eq!(cfg.ras.gamma, 2);
        assert_eq!(cfg.ras.cluster_threshold, 0.6);
        assert!(matches!(cfg.sampler, Some(Resampler::Lvis(p)) if p.threshold == 0.1));
        let json_path = dir.path().join("run.json");
        fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&json_path).unwrap(), cfg);
        fs::write(&json_path, "{\"datasett\": \"x\"}").unwrap();
        assert!(matches!(RunConfig::load(&json_path), Err(RunError::InvalidConfig(_))));
    }
}
