//! The predictor contract and the built-in predictors.
//!
//! A predictor is trained once per task from a payload and evaluated by
//! checkpoint id. Built-ins run in-process and keep their state in the
//! checkpoint; external predictors are commands:
//!
//! * `<cmd> train <payload.json>` prints the new checkpoint id as the last
//!   line of stdout;
//! * `<cmd> predict <checkpoint> <images.json> <out.jsonl>` writes one
//!   prediction line per image.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{write_param_vectors, ParamVector};
use crate::dataset::Dataset;
use crate::exemplar::ExemplarItem;
use crate::graph::{BBox, ObjectClass, ObjectNode, Predicate, RelationEdge, SceneGraph, TripletLabel};
use crate::metrics::{read_predictions, PredictedTriplet, PredictionSet};
use crate::ras::{fnv1a64, parse_prompt, splitmix64};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("unknown predictor {0:?} (expected oracle, decay_oracle:<rho>, freq_baseline, empty or cmd:<command>)")]
    UnknownPredictor(String),
    #[error("predictor {name} failed: {message}")]
    Failure { name: String, message: String },
}

impl PredictorError {
    pub fn code(&self) -> &'static str {
        match self {
            PredictorError::UnknownPredictor(_) => "UnknownPredictor",
            PredictorError::Failure { .. } => "PredictorFailure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageInput {
    Dataset { image_id: String, path: Option<PathBuf> },
    Generated { image_id: String, path: PathBuf, prompt: String, seed: u64, width: u32, height: u32 },
}

impl ImageInput {
    pub fn image_id(&self) -> &str {
        match self {
            ImageInput::Dataset { image_id, .. } | ImageInput::Generated { image_id, .. } => image_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub id: String,
    /// Predictor-private state; `null` for external predictors.
    pub state: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwcPayload {
    pub anchor: PathBuf,
    pub fisher: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacknetPayload {
    pub mask: PathBuf,
    pub keep_fraction: f64,
}

/// What a predictor receives for one training round. Serialized fields
/// form the payload manifest handed to external commands; the in-memory
/// graphs are for built-ins.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainPayload {
    pub task: usize,
    pub seed: u64,
    pub base_checkpoint: Option<String>,
    /// Visible object classes; `None` when every class is visible.
    pub objects: Option<Vec<String>>,
    pub predicates: Vec<String>,
    pub train_images: Vec<String>,
    pub annotations: Option<PathBuf>,
    pub replay_manifest: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    pub ewc: Option<EwcPayload>,
    pub packnet: Option<PacknetPayload>,
    /// Where a trainer may leave `params.bin` (one vector) and `grads.bin`
    /// (per-sample gradients) for the EWC and PackNet bookkeeping.
    pub export_dir: Option<PathBuf>,
    #[serde(skip)]
    pub manifest_path: Option<PathBuf>,
    #[serde(skip)]
    pub graphs: Vec<SceneGraph>,
    #[serde(skip)]
    pub replay: Vec<ExemplarItem>,
    #[serde(skip)]
    pub visible_objects: Option<Vec<ObjectClass>>,
    #[serde(skip)]
    pub visible_predicates: Vec<Predicate>,
}

pub trait Predictor: Send + Sync {
    fn name(&self) -> String;
    fn train(&self, base: Option<&Checkpoint>, payload: &TrainPayload) -> Result<Checkpoint, PredictorError>;
    fn predict(&self, ckpt: &Checkpoint, images: &[ImageInput]) -> Result<Vec<PredictionSet>, PredictorError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BuiltinKind {
    Oracle,
    DecayOracle { rho: f64 },
    FreqBaseline,
    Empty,
}

impl fmt::Display for BuiltinKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BuiltinKind::Oracle => write!(f, "oracle"),
            BuiltinKind::DecayOracle { rho } => write!(f, "decay_oracle:{rho}"),
            BuiltinKind::FreqBaseline => write!(f, "freq_baseline"),
            BuiltinKind::Empty => write!(f, "empty"),
        }
    }
}

impl std::str::FromStr for BuiltinKind {
    type Err = PredictorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || PredictorError::UnknownPredictor(s.to_string());
        match s {
            "oracle" => Ok(BuiltinKind::Oracle),
            "freq_baseline" => Ok(BuiltinKind::FreqBaseline),
            "empty" => Ok(BuiltinKind::Empty),
            _ => {
                let rho = s
                    .strip_prefix("decay_oracle:")
                    .or_else(|| s.strip_prefix("decay_oracle(").and_then(|r| r.strip_suffix(')')))
                    .ok_or_else(unknown)?;
                let rho: f64 = rho.parse().map_err(|_| unknown())?;
                if !(0.0..=1.0).contains(&rho) {
                    return Err(unknown());
                }
                Ok(BuiltinKind::DecayOracle { rho })
            }
        }
    }
}

/// Classes a built-in has been trained on, with the last task that
/// reinforced each.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct BuiltinState {
    task: usize,
    predicates: BTreeMap<u32, usize>,
    objects: BTreeMap<u32, usize>,
    all_objects: Option<usize>,
    /// `(subject, object) -> predicate -> count`, for the frequency baseline.
    pair_counts: BTreeMap<String, BTreeMap<u32, u64>>,
}

fn pair_key(s: ObjectClass, o: ObjectClass) -> String {
    format!("{}:{}", s.0, o.0)
}

impl BuiltinState {
    fn object_task(&self, c: ObjectClass) -> Option<usize> {
        match (self.objects.get(&c.0).copied(), self.all_objects) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        }
    }
}

/// In-process predictors used to exercise the harness.
pub struct BuiltinPredictor {
    pub kind: BuiltinKind,
    dataset: Arc<Dataset>,
    /// Object classes that some task teaches; `None` when all are.
    scheduled_objects: Option<HashSet<ObjectClass>>,
    seed: u64,
}

/// Uniform draw in [0, 1) fixed per image edge.
fn edge_draw(seed: u64, image_id: &str, edge: usize) -> f64 {
    let h = splitmix64(fnv1a64(image_id.as_bytes()) ^ splitmix64(seed ^ edge as u64));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Scene graph drawn for a synthesized image: one node per distinct class
/// in order of appearance (a second node when subject and object share a
/// class), laid out on a grid inside the image.
pub fn plant_graph(image_id: &str, labels: &[TripletLabel], width: u32, height: u32) -> SceneGraph {
    let mut nodes: Vec<ObjectClass> = Vec::new();
    let mut edges: Vec<(usize, Predicate, usize)> = Vec::new();
    for l in labels {
        let s = match nodes.iter().position(|c| *c == l.subject) {
            Some(i) => i,
            None => {
                nodes.push(l.subject);
                nodes.len() - 1
            }
        };
        let o = match nodes.iter().enumerate().position(|(i, c)| *c == l.object && i != s) {
            Some(i) => i,
            None => {
                nodes.push(l.object);
                nodes.len() - 1
            }
        };
        if !edges.contains(&(s, l.predicate, o)) {
            edges.push((s, l.predicate, o));
        }
    }
    let cols = (nodes.len() as f64).sqrt().ceil().max(1.0) as usize;
    let rows = nodes.len().div_ceil(cols).max(1);
    let (cw, ch) = (width as f64 / cols as f64, height as f64 / rows as f64);
    let objects = nodes
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (r, k) = (i / cols, i % cols);
            ObjectNode {
                node_id: i as u32,
                class: *c,
                bbox: BBox::new(k as f64 * cw + 0.1 * cw, r as f64 * ch + 0.1 * ch, 0.8 * cw, 0.8 * ch)
                    .expect("positive cell size"),
            }
        })
        .collect();
    let relations = edges
        .into_iter()
        .map(|(s, p, o)| RelationEdge { subject: s as u32, predicate: p, object: o as u32 })
        .collect();
    SceneGraph::new(image_id, width, height, objects, relations).expect("planted graphs are valid")
}

/// `<name>-t<task>-<hash>`, the hash covering the payload manifest and
/// the base checkpoint, so equal inputs give equal ids.
fn checkpoint_id(name: &str, payload: &TrainPayload, base: Option<&Checkpoint>) -> String {
    let mut text = serde_json::to_string(payload).expect("serializable");
    if let Some(b) = base {
        text.push_str(&b.id);
    }
    for g in &payload.graphs {
        text.push_str(&g.image_id);
    }
    for i in &payload.replay {
        text.push_str(&i.image_id);
    }
    format!("{name}-t{}-{:08x}", payload.task, fnv1a64(text.as_bytes()) >> 32)
}

impl BuiltinPredictor {
    pub fn new(kind: BuiltinKind, dataset: Arc<Dataset>, scheduled_objects: Option<HashSet<ObjectClass>>, seed: u64) -> Self {
        Self { kind, dataset, scheduled_objects, seed }
    }

    /// Class-count vectors standing in for model parameters: entry `p` is
    /// predicate `p`, then one entry per object class. One gradient sample
    /// per training graph.
    fn export(&self, dir: &Path, payload: &TrainPayload) -> Result<(), String> {
        let (np, no) = (self.dataset.vocab.predicates.len(), self.dataset.vocab.objects.len());
        let counts = |g: &SceneGraph| {
            let mut v = vec![0.0; np + no];
            for (s, p, o) in g.resolved_edges() {
                v[p.0 as usize] += 1.0;
                v[np + s.class.0 as usize] += 1.0;
                v[np + o.class.0 as usize] += 1.0;
            }
            ParamVector(v)
        };
        let grads: Vec<ParamVector> =
            payload.graphs.iter().chain(payload.replay.iter().map(|i| &i.graph)).map(counts).collect();
        let mut params = vec![0.0; np + no];
        for g in &grads {
            params.iter_mut().zip(&g.0).for_each(|(a, b)| *a += b);
        }
        std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        write_param_vectors(&dir.join("params.bin"), &[ParamVector(params)]).map_err(|e| e.to_string())?;
        write_param_vectors(&dir.join("grads.bin"), &grads).map_err(|e| e.to_string())
    }

    fn state(&self, ckpt: &Checkpoint) -> Result<BuiltinState, PredictorError> {
        serde_json::from_value(ckpt.state.clone()).map_err(|e| self.fail(format!("bad checkpoint {}: {e}", ckpt.id)))
    }

    fn fail(&self, message: String) -> PredictorError {
        PredictorError::Failure { name: self.name(), message }
    }

    fn ground_truth(&self, image: &ImageInput) -> Result<SceneGraph, PredictorError> {
        match image {
            ImageInput::Dataset { image_id, .. } => {
                self.dataset.graph(image_id).cloned().ok_or_else(|| self.fail(format!("unknown image {image_id}")))
            }
            ImageInput::Generated { image_id, prompt, width, height, .. } => {
                let labels = parse_prompt(prompt, &self.dataset.vocab)
                    .ok_or_else(|| self.fail(format!("cannot parse prompt {prompt:?}")))?;
                Ok(plant_graph(image_id, &labels, *width, *height))
            }
        }
    }

    /// Task at which the edge's classes were last reinforced, or `None`
    /// when one of them was never learned.
    fn reinforced_at(&self, st: &BuiltinState, s: ObjectClass, p: Predicate, o: ObjectClass) -> Option<usize> {
        let mut at = *st.predicates.get(&p.0)?;
        for c in [s, o] {
            match st.object_task(c) {
                Some(t) => at = at.min(t),
                None => {
                    let scheduled = self.scheduled_objects.as_ref().is_none_or(|set| set.contains(&c));
                    if scheduled {
                        return None;
                    }
                }
            }
        }
        Some(at)
    }

    fn predict_one(&self, st: &BuiltinState, image: &ImageInput) -> Result<PredictionSet, PredictorError> {
        let g = self.ground_truth(image)?;
        let mut out = Vec::new();
        match self.kind {
            BuiltinKind::Empty => {}
            BuiltinKind::Oracle | BuiltinKind::DecayOracle { .. } => {
                for (i, (s, p, o)) in g.resolved_edges().into_iter().enumerate() {
                    let Some(at) = self.reinforced_at(st, s.class, p, o.class) else { continue };
                    if let BuiltinKind::DecayOracle { rho } = self.kind {
                        let keep = (1.0 - rho).powi((st.task - at.min(st.task)) as i32);
                        if edge_draw(self.seed, &g.image_id, i) >= keep {
                            continue;
                        }
                    }
                    out.push(PredictedTriplet {
                        subject: s.class,
                        predicate: p,
                        object: o.class,
                        subject_box: s.bbox,
                        object_box: o.bbox,
                        score: 1.0,
                    });
                }
            }
            BuiltinKind::FreqBaseline => {
                for s in &g.objects {
                    for o in &g.objects {
                        if s.node_id == o.node_id {
                            continue;
                        }
                        let Some(counts) = st.pair_counts.get(&pair_key(s.class, o.class)) else { continue };
                        let total: u64 = counts.values().sum();
                        let (p, c) = counts
                            .iter()
                            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                            .expect("nonempty counts");
                        out.push(PredictedTriplet {
                            subject: s.class,
                            predicate: Predicate(*p),
                            object: o.class,
                            subject_box: s.bbox,
                            object_box: o.bbox,
                            score: *c as f64 / total as f64,
                        });
                    }
                }
            }
        }
        Ok(PredictionSet::new(g.image_id.clone(), out))
    }
}

impl Predictor for BuiltinPredictor {
    fn name(&self) -> String {
        self.kind.to_string()
    }

    fn train(&self, base: Option<&Checkpoint>, payload: &TrainPayload) -> Result<Checkpoint, PredictorError> {
        let mut st = match base {
            Some(c) => self.state(c)?,
            None => BuiltinState::default(),
        };
        let t = payload.task;
        st.task = t;
        for p in &payload.visible_predicates {
            st.predicates.insert(p.0, t);
        }
        match &payload.visible_objects {
            Some(objs) => objs.iter().for_each(|c| {
                st.objects.insert(c.0, t);
            }),
            None => st.all_objects = Some(t),
        }
        // replayed annotations reinforce what they contain
        for item in &payload.replay {
            for (s, p, o) in item.graph.resolved_edges() {
                st.predicates.insert(p.0, t);
                st.objects.insert(s.class.0, t);
                st.objects.insert(o.class.0, t);
            }
        }
        if self.kind == BuiltinKind::FreqBaseline {
            for g in payload.graphs.iter().chain(payload.replay.iter().map(|i| &i.graph)) {
                for (s, p, o) in g.resolved_edges() {
                    *st.pair_counts.entry(pair_key(s.class, o.class)).or_default().entry(p.0).or_insert(0) += 1;
                }
            }
        }
        if let Some(dir) = &payload.export_dir {
            self.export(dir, payload).map_err(|e| self.fail(format!("export to {}: {e}", dir.display())))?;
        }
        let id = checkpoint_id(&self.name(), payload, base);
        Ok(Checkpoint { id, state: serde_json::to_value(&st).expect("serializable") })
    }

    fn predict(&self, ckpt: &Checkpoint, images: &[ImageInput]) -> Result<Vec<PredictionSet>, PredictorError> {
        let st = self.state(ckpt)?;
        images.iter().map(|i| self.predict_one(&st, i)).collect()
    }
}

/// Runs an external command per the file-based contract.
pub struct ExternalPredictor {
    pub command: Vec<String>,
    pub work_dir: PathBuf,
    dataset: Arc<Dataset>,
}

impl ExternalPredictor {
    pub fn new(command: Vec<String>, work_dir: &Path, dataset: Arc<Dataset>) -> Self {
        Self { command, work_dir: work_dir.to_path_buf(), dataset }
    }

    fn fail(&self, message: impl Into<String>) -> PredictorError {
        PredictorError::Failure { name: self.name(), message: message.into() }
    }

    fn run(&self, args: &[&str]) -> Result<String, PredictorError> {
        let (prog, rest) = self.command.split_first().ok_or_else(|| self.fail("empty command"))?;
        let out = Command::new(prog)
            .args(rest)
            .args(args)
            .current_dir(&self.work_dir)
            .output()
            .map_err(|e| self.fail(format!("cannot start {prog}: {e}")))?;
        if !out.status.success() {
            let err = String::from_utf8_lossy(&out.stderr);
            return Err(self.fail(format!("{} exited with {}: {}", args[0], out.status, err.trim())));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }
}

impl Predictor for ExternalPredictor {
    fn name(&self) -> String {
        format!("cmd:{}", self.command.join(" "))
    }

    fn train(&self, _base: Option<&Checkpoint>, payload: &TrainPayload) -> Result<Checkpoint, PredictorError> {
        let manifest = payload.manifest_path.as_ref().ok_or_else(|| self.fail("payload manifest was not written"))?;
        let stdout = self.run(&["train", &manifest.to_string_lossy()])?;
        let id = stdout
            .lines()
            .map(str::trim)
            .rfind(|l| !l.is_empty())
            .ok_or_else(|| self.fail("train printed no checkpoint id"))?;
        Ok(Checkpoint { id: id.to_string(), state: serde_json::Value::Null })
    }

    fn predict(&self, ckpt: &Checkpoint, images: &[ImageInput]) -> Result<Vec<PredictionSet>, PredictorError> {
        std::fs::create_dir_all(&self.work_dir).map_err(|e| self.fail(e.to_string()))?;
        let mut key = ckpt.id.clone();
        images.iter().for_each(|i| key.push_str(i.image_id()));
        let tag = format!("{:016x}", fnv1a64(key.as_bytes()));
        let list = self.work_dir.join(format!("images-{tag}.json"));
        let out = self.work_dir.join(format!("predictions-{tag}.jsonl"));
        let text = serde_json::to_string_pretty(images).expect("serializable");
        std::fs::write(&list, text).map_err(|e| self.fail(format!("{}: {e}", list.display())))?;
        self.run(&["predict", &ckpt.id, &list.to_string_lossy(), &out.to_string_lossy()])?;
        let mut by_id: HashMap<String, PredictionSet> =
            read_predictions(&out, &self.dataset.vocab).map_err(|e| self.fail(e.to_string()))?;
        Ok(images
            .iter()
            .map(|i| by_id.remove(i.image_id()).unwrap_or_else(|| PredictionSet::new(i.image_id(), Vec::new())))
            .collect())
    }
}

/// Resolves `oracle`, `decay_oracle:<rho>`, `freq_baseline`, `empty` or
/// `cmd:<command line>`.
pub fn resolve_predictor(
    spec: &str,
    dataset: Arc<Dataset>,
    scheduled_objects: Option<HashSet<ObjectClass>>,
    seed: u64,
    work_dir: &Path,
) -> Result<Box<dyn Predictor>, PredictorError> {
    if let Some(cmd) = spec.strip_prefix("cmd:") {
        let command: Vec<String> = cmd.split_whitespace().map(String::from).collect();
        if command.is_empty() {
            return Err(PredictorError::UnknownPredictor(spec.to_string()));
        }
        return Ok(Box::new(ExternalPredictor::new(command, work_dir, dataset)));
    }
    let kind: BuiltinKind = spec.parse()?;
    Ok(Box::new(BuiltinPredictor::new(kind, dataset, scheduled_objects, seed)))
}
