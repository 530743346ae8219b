//! End-to-end exemplar construction: sample labels, embed, cluster, prompt,
//! generate, pseudo-label.
//!
//! A build writes into one exemplar directory:
//!
//! ```text
//! exemplars.jsonl   one item per line, appended as items complete
//! images/           generated images (regenerable cache)
//! progress.json     prompts finished so far, for resuming
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cluster::{cut, dendrogram, merge_until, FlatCluster};
use super::prompt::{compose_prompt, Prompt};
use super::providers::{fnv1a64, image_dimensions, EmbeddingProvider, ImageGenerator, ProviderError};
use super::universe::TripletUniverse;
use crate::baselines::item_bytes;
use crate::dataset::{io_err, IngestError};
use crate::exemplar::{append_item, ExemplarItem, ExemplarSet, Provenance};
use crate::graph::{clamp_graph, iou, BBox, ObjectClass, ObjectNode, RelationEdge, SceneGraph, TripletLabel, Vocabularies};
use crate::metrics::PredictionSet;
use crate::predictor::{Checkpoint, ImageInput, Predictor, PredictorError};
use crate::sampling::{ltd_rates, ltd_sample, LtdConfig, SamplingError};

pub const MANIFEST_FILE: &str = "exemplars.jsonl";
const PROGRESS_FILE: &str = "progress.json";
const IMAGE_DIR: &str = "images";
/// Boxes of the same class at or above this IoU become one node.
pub const NODE_MERGE_IOU: f64 = 0.9;

#[derive(Debug, Error)]
pub enum RasError {
    #[error("no cluster has more than {min_exclusive} labels")]
    NoEligibleClusters { min_exclusive: usize },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("embedding provider: {0}")]
    Provider(ProviderError),
    #[error("image generator: {0}")]
    GeneratorUnavailable(ProviderError),
    #[error("generator returned {} of the requested images: {detail}", images.len())]
    PartialGeneration { images: Vec<GeneratedRef>, detail: String },
    #[error("pseudo-labeling predictor: {0}")]
    PredictorUnavailable(#[from] PredictorError),
    #[error("build interrupted after {} item(s); resume from {}: {cause}", partial.len(), checkpoint.display())]
    Interrupted { partial: Box<ExemplarSet>, checkpoint: PathBuf, cause: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IngestError),
}

impl RasError {
    pub fn code(&self) -> &'static str {
        match self {
            RasError::NoEligibleClusters { .. } => "NoEligibleClusters",
            RasError::Sampling(e) => e.code(),
            RasError::Provider(ProviderError::DimensionMismatch { .. }) => "DimensionMismatch",
            RasError::Provider(_) => "ProviderUnavailable",
            RasError::GeneratorUnavailable(_) => "GeneratorUnavailable",
            RasError::PartialGeneration { .. } => "PartialGeneration",
            RasError::PredictorUnavailable(_) => "PredictorUnavailable",
            RasError::Interrupted { .. } => "Interrupted",
            RasError::Config(_) => "InvalidConfig",
            RasError::Io(e) => e.code(),
        }
    }
}

/// Caps on the exemplar set; `None` means unbounded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    #[serde(default)]
    pub items: Option<usize>,
    #[serde(default)]
    pub bytes: Option<u64>,
}

impl Budget {
    pub fn items(n: usize) -> Self {
        Budget { items: Some(n), bytes: None }
    }

    fn admits(&self, set: &ExemplarSet, next_bytes: u64) -> bool {
        self.items.is_none_or(|n| set.len() < n) && self.bytes.is_none_or(|b| set.total_bytes() + next_bytes <= b)
    }

    fn exhausted(&self, set: &ExemplarSet) -> bool {
        self.items.is_some_and(|n| set.len() >= n) || self.bytes.is_some_and(|b| set.total_bytes() >= b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasConfig {
    pub alpha: f64,
    pub cluster_threshold: f64,
    pub min_cluster_size_exclusive: usize,
    pub gamma: usize,
    pub k_keep: usize,
    pub score_floor: f64,
    pub budget: Budget,
    pub embedding_endpoint: Option<String>,
    pub generation_endpoint: Option<String>,
}

impl Default for RasConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            cluster_threshold: 0.6,
            min_cluster_size_exclusive: 3,
            gamma: 10,
            k_keep: 20,
            score_floor: 0.3,
            budget: Budget::default(),
            embedding_endpoint: None,
            generation_endpoint: None,
        }
    }
}

impl RasConfig {
    pub fn validate(&self) -> Result<(), RasError> {
        if !(self.cluster_threshold > 0.0) {
            return Err(RasError::Config(format!("cluster_threshold must be > 0, got {}", self.cluster_threshold)));
        }
        if self.gamma == 0 {
            return Err(RasError::Config("gamma must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(RasError::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// The frozen model that annotates generated images.
pub struct Labeler<'a> {
    pub predictor: &'a dyn Predictor,
    pub checkpoint: &'a Checkpoint,
}

pub struct Providers<'a> {
    pub embedder: &'a dyn EmbeddingProvider,
    pub generator: &'a dyn ImageGenerator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletEmbedding {
    pub label: TripletLabel,
    pub vector: Vec<f64>,
}

/// Embeds each label as the phrase "subject predicate object".
pub fn embed_triplets(
    labels: &[TripletLabel],
    vocab: &Vocabularies,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<TripletEmbedding>, RasError> {
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<String> = labels.iter().map(|l| vocab.phrase(l)).collect();
    let vectors = provider.embed(&texts).map_err(RasError::Provider)?;
    if vectors.len() != labels.len() {
        return Err(RasError::Provider(ProviderError::Protocol(format!(
            "{} vectors for {} texts",
            vectors.len(),
            labels.len()
        ))));
    }
    let dim = provider.dim();
    labels
        .iter()
        .zip(vectors)
        .map(|(l, v)| {
            if v.len() != dim {
                return Err(RasError::Provider(ProviderError::DimensionMismatch { expected: dim, got: v.len() }));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(RasError::Provider(ProviderError::Protocol("non-finite embedding entry".into())));
            }
            Ok(TripletEmbedding { label: *l, vector: v })
        })
        .collect()
}

/// Clusters with more than `min_exclusive` members.
pub fn select_prompt_clusters(clusters: &[FlatCluster], min_exclusive: usize) -> Result<Vec<FlatCluster>, RasError> {
    let kept: Vec<FlatCluster> = clusters.iter().filter(|c| c.members.len() > min_exclusive).cloned().collect();
    if kept.is_empty() {
        return Err(RasError::NoEligibleClusters { min_exclusive });
    }
    Ok(kept)
}

/// LTD draw, topped up with the rarest unsampled labels until it holds
/// `min_labels` (or the whole universe). Returned in universe order.
pub fn sample_labels<R: Rng + ?Sized>(
    u: &TripletUniverse,
    alpha: f64,
    min_labels: usize,
    rng: &mut R,
) -> Result<Vec<TripletLabel>, RasError> {
    let rates = ltd_rates(u, &LtdConfig { alpha })?;
    let mut picked = ltd_sample(u, &rates, rng);
    let want = min_labels.min(u.len());
    if picked.len() < want {
        let mut rest: Vec<(u64, usize, TripletLabel)> = u
            .iter()
            .enumerate()
            .filter(|(_, (l, _))| !picked.contains(l))
            .map(|(i, (l, e))| (e.frequency, i, *l))
            .collect();
        rest.sort();
        picked.extend(rest.into_iter().take(want - picked.len()).map(|(_, _, l)| l));
        picked.sort_by_key(|l| u.index_of(l));
    }
    Ok(picked)
}

/// Label groups to prompt with, and whether the fallback produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPlan {
    pub prompts: Vec<Prompt>,
    pub eligible_clusters: usize,
    pub fallback: bool,
}

/// Clusters the sampled labels and turns each eligible cluster into a
/// prompt. Without an eligible cluster, merging continues past the
/// threshold until one group is large enough; with too few labels for
/// that, every label goes into one prompt.
pub fn plan_prompts(
    labels: &[TripletLabel],
    vocab: &Vocabularies,
    embedder: &dyn EmbeddingProvider,
    cfg: &RasConfig,
) -> Result<PromptPlan, RasError> {
    if labels.is_empty() {
        return Ok(PromptPlan { prompts: Vec::new(), eligible_clusters: 0, fallback: false });
    }
    let emb = embed_triplets(labels, vocab, embedder)?;
    let points: Vec<Vec<f64>> = emb.into_iter().map(|e| e.vector).collect();
    let merges = dendrogram(&points);
    let min_size = cfg.min_cluster_size_exclusive + 1;
    let to_prompt = |c: &FlatCluster| {
        let ls: Vec<TripletLabel> = c.members.iter().map(|&i| labels[i]).collect();
        compose_prompt(&ls, vocab)
    };
    match select_prompt_clusters(&cut(labels.len(), &merges, cfg.cluster_threshold), cfg.min_cluster_size_exclusive) {
        Ok(eligible) => Ok(PromptPlan {
            prompts: eligible.iter().map(to_prompt).collect(),
            eligible_clusters: eligible.len(),
            fallback: false,
        }),
        Err(RasError::NoEligibleClusters { .. }) => {
            let group = merge_until(labels.len(), &merges, cfg.cluster_threshold, min_size)
                .unwrap_or(FlatCluster { members: (0..labels.len()).collect(), merge_distance: 0.0 });
            log::warn!("no cluster above {} labels; falling back to one group of {}", cfg.min_cluster_size_exclusive, group.members.len());
            Ok(PromptPlan { prompts: vec![to_prompt(&group)], eligible_clusters: 0, fallback: true })
        }
        Err(e) => Err(e),
    }
}

/// A generated image persisted on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedRef {
    pub image_id: String,
    /// Relative to the exemplar directory.
    pub path: PathBuf,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub bytes: u64,
}

/// Requests `gamma` images for one prompt and writes them under
/// `dir/images/` as `<stem>-<i>.<format>`.
pub fn request_images(
    prompt: &Prompt,
    gamma: usize,
    generator: &dyn ImageGenerator,
    dir: &Path,
    stem: &str,
) -> Result<Vec<GeneratedRef>, RasError> {
    let images = generator.generate(&prompt.text, gamma, None).map_err(RasError::GeneratorUnavailable)?;
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let mut refs = Vec::with_capacity(images.len());
    for (i, img) in images.into_iter().take(gamma).enumerate() {
        let (width, height) = image_dimensions(&img.bytes).ok_or_else(|| {
            RasError::GeneratorUnavailable(ProviderError::Protocol(format!("unreadable {} image", img.format)))
        })?;
        let image_id = format!("{stem}-{i:02}");
        let rel = Path::new(IMAGE_DIR).join(format!("{image_id}.{}", img.format));
        let path = dir.join(&rel);
        fs::write(&path, &img.bytes).map_err(io_err(&path))?;
        refs.push(GeneratedRef { image_id, path: rel, seed: img.seed, width, height, bytes: img.bytes.len() as u64 });
    }
    if refs.len() < gamma {
        let detail = format!("{} of {gamma} images for {:?}", refs.len(), prompt.text);
        return Err(RasError::PartialGeneration { images: refs, detail });
    }
    Ok(refs)
}

/// Top `k_keep` triplets scoring at least `score_floor`, as a scene graph
/// whose nodes merge same-class boxes at IoU >= 0.9. The second value is
/// true when nothing passed the floor.
pub fn predictions_to_graph(
    preds: &PredictionSet,
    width: u32,
    height: u32,
    k_keep: usize,
    score_floor: f64,
) -> (SceneGraph, bool) {
    let mut nodes: Vec<(ObjectClass, BBox)> = Vec::new();
    let mut node_for = |c: ObjectClass, b: BBox| -> u32 {
        match nodes.iter().position(|(nc, nb)| *nc == c && iou(nb, &b) >= NODE_MERGE_IOU) {
            Some(i) => i as u32,
            None => {
                nodes.push((c, b));
                (nodes.len() - 1) as u32
            }
        }
    };
    let mut relations: Vec<RelationEdge> = Vec::new();
    for t in preds.top_k(k_keep).filter(|t| t.score >= score_floor) {
        let subject = node_for(t.subject, t.subject_box);
        let object = node_for(t.object, t.object_box);
        let e = RelationEdge { subject, predicate: t.predicate, object };
        if subject != object && !relations.contains(&e) {
            relations.push(e);
        }
    }
    let low = relations.is_empty();
    let objects = nodes
        .into_iter()
        .enumerate()
        .map(|(i, (class, bbox))| ObjectNode { node_id: i as u32, class, bbox })
        .collect();
    let raw = SceneGraph { image_id: preds.image_id.clone(), width, height, objects, relations };
    let g = match clamp_graph(&raw) {
        Ok((g, _)) => g,
        Err(_) => SceneGraph { objects: Vec::new(), relations: Vec::new(), ..raw },
    };
    let low = low || g.relations.is_empty();
    (g, low)
}

/// Pseudo-labels generated images with the frozen checkpoint.
pub fn pseudo_label(
    images: &[GeneratedRef],
    prompt: &Prompt,
    dir: &Path,
    labeler: &Labeler<'_>,
    k_keep: usize,
    score_floor: f64,
) -> Result<Vec<(SceneGraph, bool)>, RasError> {
    let inputs: Vec<ImageInput> = images
        .iter()
        .map(|r| ImageInput::Generated {
            image_id: r.image_id.clone(),
            path: dir.join(&r.path),
            prompt: prompt.text.clone(),
            seed: r.seed,
            width: r.width,
            height: r.height,
        })
        .collect();
    let preds = labeler.predictor.predict(labeler.checkpoint, &inputs)?;
    Ok(images
        .iter()
        .zip(preds)
        .map(|(r, p)| predictions_to_graph(&p, r.width, r.height, k_keep, score_floor))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Progress {
    plan: String,
    prompts_done: usize,
    items: usize,
}

fn plan_tag(prompts: &[Prompt], gamma: usize, tag: &str) -> String {
    let mut text = format!("{tag}|{gamma}");
    for p in prompts {
        text.push('|');
        text.push_str(&p.text);
    }
    format!("{:016x}", fnv1a64(text.as_bytes()))
}

/// Result of an exemplar build.
#[derive(Debug, Clone, PartialEq)]
pub struct RasBuild {
    pub set: ExemplarSet,
    pub plan: PromptPlan,
    pub manifest: PathBuf,
}

type Annotate<'a> = dyn FnMut(usize, &Prompt, &[GeneratedRef]) -> Result<Vec<(SceneGraph, bool, String)>, RasError> + 'a;

/// Generates and annotates every prompt in order until the budget is
/// reached, appending items to the manifest as they complete. A matching
/// `progress.json` resumes after the prompts it records.
fn run_prompts(
    prompts: &[Prompt],
    cfg: &RasConfig,
    generator: &dyn ImageGenerator,
    dir: &Path,
    stem: &str,
    vocab: &Vocabularies,
    annotate: &mut Annotate<'_>,
) -> Result<(ExemplarSet, PathBuf), RasError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = dir.join(MANIFEST_FILE);
    let progress_path = dir.join(PROGRESS_FILE);
    let tag = plan_tag(prompts, cfg.gamma, stem);
    let mut set = ExemplarSet::default();
    let mut start = 0;
    let resumed = fs::read_to_string(&progress_path)
        .ok()
        .and_then(|s| serde_json::from_str::<Progress>(&s).ok())
        .filter(|p| p.plan == tag && manifest.exists());
    match resumed {
        Some(p) => {
            set = ExemplarSet::read(&manifest, vocab)?;
            set.items.truncate(p.items);
            set.write(&manifest, vocab)?;
            start = p.prompts_done;
            log::info!("resuming exemplar build at prompt {start} with {} item(s)", set.len());
        }
        None => {
            if manifest.exists() {
                fs::remove_file(&manifest).map_err(io_err(&manifest))?;
            }
            fs::write(&manifest, "").map_err(io_err(&manifest))?;
        }
    }
    let save = |done: usize, items: usize| -> Result<(), RasError> {
        let p = Progress { plan: tag.clone(), prompts_done: done, items };
        fs::write(&progress_path, serde_json::to_string(&p).expect("serializable")).map_err(io_err(&progress_path))?;
        Ok(())
    };
    save(start, set.len())?;
    for (j, prompt) in prompts.iter().enumerate().skip(start) {
        if cfg.budget.exhausted(&set) {
            break;
        }
        let refs = match request_images(prompt, cfg.gamma, generator, dir, &format!("{stem}-p{j:04}")) {
            Ok(r) => r,
            Err(e @ (RasError::GeneratorUnavailable(_) | RasError::PartialGeneration { .. })) => {
                return Err(RasError::Interrupted { partial: Box::new(set), checkpoint: progress_path, cause: e.to_string() });
            }
            Err(e) => return Err(e),
        };
        let graphs = annotate(j, prompt, &refs)?;
        let mut full = false;
        for (r, (graph, low, checkpoint_id)) in refs.iter().zip(graphs) {
            let path = dir.join(&r.path);
            let item = ExemplarItem {
                image_id: r.image_id.clone(),
                bytes: item_bytes(&graph, Some(&path), vocab),
                image_path: Some(r.path.clone()),
                graph,
                provenance: Some(Provenance {
                    prompt: prompt.text.clone(),
                    source_labels: prompt.labels.clone(),
                    generator: generator.name(),
                    seed: r.seed,
                    checkpoint_id,
                    low_confidence: low,
                }),
            };
            if !cfg.budget.admits(&set, item.bytes) {
                full = true;
                break;
            }
            append_item(&manifest, &item, vocab)?;
            set.items.push(item);
        }
        save(j + 1, set.len())?;
        if full {
            break;
        }
    }
    Ok((set, manifest))
}

/// Builds the exemplar set for replay from the universe of labels seen so
/// far, written to `dir`.
pub fn build_exemplar_set<R: Rng + ?Sized>(
    u: &TripletUniverse,
    vocab: &Vocabularies,
    cfg: &RasConfig,
    providers: &Providers<'_>,
    labeler: &Labeler<'_>,
    dir: &Path,
    rng: &mut R,
) -> Result<RasBuild, RasError> {
    cfg.validate()?;
    if cfg.budget.items == Some(0) || cfg.budget.bytes == Some(0) {
        let manifest = dir.join(MANIFEST_FILE);
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        fs::write(&manifest, "").map_err(io_err(&manifest))?;
        let plan = PromptPlan { prompts: Vec::new(), eligible_clusters: 0, fallback: false };
        return Ok(RasBuild { set: ExemplarSet::default(), plan, manifest });
    }
    let labels = sample_labels(u, cfg.alpha, cfg.min_cluster_size_exclusive + 1, rng)?;
    let plan = plan_prompts(&labels, vocab, providers.embedder, cfg)?;
    let ckpt_id = labeler.checkpoint.id.clone();
    let mut annotate = |_: usize, prompt: &Prompt, refs: &[GeneratedRef]| {
        let graphs = pseudo_label(refs, prompt, dir, labeler, cfg.k_keep, cfg.score_floor)?;
        Ok(graphs.into_iter().map(|(g, low)| (g, low, ckpt_id.clone())).collect())
    };
    let (set, manifest) = run_prompts(&plan.prompts, cfg, providers.generator, dir, "ras", vocab, &mut annotate)?;
    Ok(RasBuild { set, plan, manifest })
}

/// Ground-truth variant: one prompt per graph from its full triplet list,
/// annotated with the graph itself.
pub fn build_exemplar_set_gt(
    graphs: &[SceneGraph],
    vocab: &Vocabularies,
    cfg: &RasConfig,
    generator: &dyn ImageGenerator,
    dir: &Path,
) -> Result<RasBuild, RasError> {
    cfg.validate()?;
    let sources: Vec<&SceneGraph> = graphs.iter().filter(|g| !g.relations.is_empty()).collect();
    let prompts: Vec<Prompt> = sources.iter().map(|g| compose_prompt(&g.triplets(), vocab)).collect();
    let mut annotate = |j: usize, _: &Prompt, refs: &[GeneratedRef]| {
        Ok(refs.iter().map(|_| (sources[j].clone(), false, "ground_truth".to_string())).collect())
    };
    let (set, manifest) = run_prompts(&prompts, cfg, generator, dir, "rasgt", vocab, &mut annotate)?;
    let n = prompts.len();
    Ok(RasBuild { set, plan: PromptPlan { prompts, eligible_clusters: n, fallback: false }, manifest })
}

pub const STATE_DIR: &str = "ras";
pub const UNIVERSE_FILE: &str = "universe.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_REF_FILE: &str = "checkpoint_ref.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub checkpoint_id: String,
    pub task: usize,
}

/// Writes what RAS must keep between tasks: the label universe, the
/// configuration and a reference to the labeling checkpoint.
pub fn write_persisted_state(
    run_dir: &Path,
    u: &TripletUniverse,
    vocab: &Vocabularies,
    cfg: &RasConfig,
    checkpoint: Option<&CheckpointRef>,
) -> Result<(), RasError> {
    let dir = run_dir.join(STATE_DIR);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    u.write(&dir.join(UNIVERSE_FILE), vocab)?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, serde_json::to_string(cfg).expect("serializable")).map_err(io_err(&path))?;
    if let Some(c) = checkpoint {
        let path = dir.join(CHECKPOINT_REF_FILE);
        fs::write(&path, serde_json::to_string(c).expect("serializable")).map_err(io_err(&path))?;
    }
    Ok(())
}

/// On-disk bytes of the persisted state; generated images are cache and
/// not counted.
pub fn persisted_state_bytes(run_dir: &Path) -> u64 {
    let dir = run_dir.join(STATE_DIR);
    [UNIVERSE_FILE, CONFIG_FILE, CHECKPOINT_REF_FILE]
        .iter()
        .filter_map(|f| fs::metadata(dir.join(f)).ok())
        .map(|m| m.len())
        .sum()
}

/// Bytes of generated images under an exemplar directory.
pub fn cache_bytes(dir: &Path) -> u64 {
    fs::read_dir(dir.join(IMAGE_DIR))
        .map(|rd| rd.filter_map(|e| e.ok()?.metadata().ok()).map(|m| m.len()).sum())
        .unwrap_or(0)
}
