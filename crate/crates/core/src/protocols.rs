//! The three continual learning scenarios: relationship-incremental (S1),
//! scene-incremental (S2) and relationship generalization under
//! object-incremental learning (S3).

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{bucketize, class_frequencies, io_err, Bucket, BucketAssignment, BucketPolicy, ClassKind, Dataset, IngestError, Split};
use crate::graph::{ObjectClass, Predicate, SceneGraph, Vocabularies};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("insufficient {axis} classes: need {needed}, vocabulary has {available}")]
    InsufficientClasses { axis: ClassKind, needed: usize, available: usize },
    #[error("no test image contains only objects outside every task")]
    EmptyGeneralizationSet,
    #[error("task {0} is outside the scenario")]
    TaskOutOfRange(usize),
    #[error("invalid task order: {0}")]
    InvalidOrder(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] IngestError),
}

impl ProtocolError {
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::InsufficientClasses { .. } => "InsufficientClasses",
            ProtocolError::EmptyGeneralizationSet => "EmptyGeneralizationSet",
            ProtocolError::TaskOutOfRange(_) => "TaskOutOfRange",
            ProtocolError::InvalidOrder(_) => "InvalidOrder",
            ProtocolError::Manifest(_) => "ManifestError",
            ProtocolError::Io(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    S1,
    S2,
    S3,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(ScenarioKind::S1),
            "S2" => Ok(ScenarioKind::S2),
            "S3" => Ok(ScenarioKind::S3),
            other => Err(format!("unknown scenario {other:?} (expected S1, S2 or S3)")),
        }
    }
}

/// Classes labeled in one task plus the images that carry them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub index: usize,
    /// `None` means every object class is visible.
    pub objects: Option<Vec<ObjectClass>>,
    pub predicates: Vec<Predicate>,
    pub train_images: Vec<String>,
    pub test_images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
    pub generalization_test: Option<TaskSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct S1Params {
    pub tasks: usize,
    pub predicates_per_task: usize,
}

impl Default for S1Params {
    fn default() -> Self {
        Self { tasks: 5, predicates_per_task: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct S2Params {
    /// `(new object classes, new predicate classes)` per task.
    pub stages: Vec<(usize, usize)>,
}

impl Default for S2Params {
    fn default() -> Self {
        Self { stages: vec![(100, 40), (25, 5)] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct S3Params {
    pub tasks: usize,
    pub objects_per_task: usize,
    pub shared_predicates: usize,
}

impl Default for S3Params {
    fn default() -> Self {
        Self { tasks: 4, objects_per_task: 30, shared_predicates: 35 }
    }
}

/// Splits `quota` over head/body/tail as evenly as possible; the leftover
/// slots rotate with the task index.
fn bucket_quota(quota: usize, task: usize) -> [usize; 3] {
    let (base, rem) = (quota / 3, quota % 3);
    let mut q = [base; 3];
    for k in 0..rem {
        q[(task + k) % 3] += 1;
    }
    q
}

/// Draws `tasks` disjoint class sets of `per_task` classes, each spread
/// uniformly over the buckets. A bucket that runs dry is topped up from the
/// bucket with the most classes left.
fn draw_uniform_over_buckets(
    buckets: &BucketAssignment,
    tasks: usize,
    per_task: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<u32>> {
    let mut pools: Vec<Vec<u32>> = Bucket::ALL
        .iter()
        .map(|b| {
            let mut m = buckets.members(*b);
            m.shuffle(rng);
            m
        })
        .collect();
    (0..tasks)
        .map(|t| {
            let quota = bucket_quota(per_task, t);
            let mut chosen = Vec::with_capacity(per_task);
            let mut short = 0;
            for (b, &q) in quota.iter().enumerate() {
                for _ in 0..q {
                    match pools[b].pop() {
                        Some(c) => chosen.push(c),
                        None => short += 1,
                    }
                }
            }
            for _ in 0..short {
                let b = (0..3).max_by_key(|&b| (pools[b].len(), std::cmp::Reverse(b))).expect("three buckets");
                chosen.push(pools[b].pop().expect("total checked by caller"));
            }
            chosen.sort_unstable();
            chosen
        })
        .collect()
}

/// Which annotations survive masking for a task.
#[derive(Debug, Clone)]
pub struct LabelMask {
    pub objects: Option<HashSet<ObjectClass>>,
    pub predicates: HashSet<Predicate>,
}

impl LabelMask {
    fn object_visible(&self, c: ObjectClass) -> bool {
        self.objects.as_ref().is_none_or(|s| s.contains(&c))
    }

    /// Keeps visible objects and the edges whose predicate and endpoints
    /// are all visible.
    pub fn apply(&self, g: &SceneGraph) -> SceneGraph {
        g.filtered(|c| self.object_visible(c), |t| self.predicates.contains(&t.predicate))
    }

    fn union(masks: impl IntoIterator<Item = LabelMask>) -> LabelMask {
        let mut objects: Option<HashSet<ObjectClass>> = Some(HashSet::new());
        let mut predicates = HashSet::new();
        for m in masks {
            objects = match (objects, m.objects) {
                (Some(mut a), Some(b)) => {
                    a.extend(b);
                    Some(a)
                }
                _ => None,
            };
            predicates.extend(m.predicates);
        }
        LabelMask { objects, predicates }
    }
}

impl TaskSpec {
    pub fn mask(&self) -> LabelMask {
        LabelMask {
            objects: self.objects.as_ref().map(|o| o.iter().copied().collect()),
            predicates: self.predicates.iter().copied().collect(),
        }
    }
}

fn images_with_edges(d: &Dataset, split: Split, mask: &LabelMask) -> Vec<String> {
    d.split_graphs(split)
        .filter(|g| !mask.apply(g).relations.is_empty())
        .map(|g| g.image_id.clone())
        .collect()
}

fn make_task(d: &Dataset, index: usize, objects: Option<Vec<ObjectClass>>, predicates: Vec<Predicate>) -> TaskSpec {
    let mut t = TaskSpec { index, objects, predicates, train_images: Vec::new(), test_images: Vec::new() };
    let mask = t.mask();
    t.train_images = images_with_edges(d, Split::Train, &mask);
    t.test_images = images_with_edges(d, Split::Test, &mask);
    t
}

fn require(axis: ClassKind, needed: usize, available: usize) -> Result<(), ProtocolError> {
    if needed > available {
        return Err(ProtocolError::InsufficientClasses { axis, needed, available });
    }
    Ok(())
}

/// Relationship-incremental: every task adds new predicate classes over the
/// same, fully labeled object vocabulary.
pub fn build_s1(
    d: &Dataset,
    predicate_buckets: &BucketAssignment,
    seed: u64,
    params: &S1Params,
) -> Result<Scenario, ProtocolError> {
    require(ClassKind::Predicates, params.tasks * params.predicates_per_task, d.vocab.predicates.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = draw_uniform_over_buckets(predicate_buckets, params.tasks, params.predicates_per_task, &mut rng);
    let tasks = draws
        .into_iter()
        .enumerate()
        .map(|(i, preds)| make_task(d, i + 1, None, preds.into_iter().map(Predicate).collect()))
        .collect();
    Ok(Scenario { kind: ScenarioKind::S1, seed, tasks, generalization_test: None })
}

/// Scene-incremental: the most frequent classes first, the next ranks in
/// later tasks.
pub fn build_s2(d: &Dataset, params: &S2Params) -> Result<Scenario, ProtocolError> {
    let need_obj: usize = params.stages.iter().map(|s| s.0).sum();
    let need_pred: usize = params.stages.iter().map(|s| s.1).sum();
    require(ClassKind::Objects, need_obj, d.vocab.objects.len())?;
    require(ClassKind::Predicates, need_pred, d.vocab.predicates.len())?;
    let obj_rank = class_frequencies(d, ClassKind::Objects).ranked();
    let pred_rank = class_frequencies(d, ClassKind::Predicates).ranked();
    let (mut oi, mut pi) = (0, 0);
    let mut tasks = Vec::with_capacity(params.stages.len());
    for (i, &(n_obj, n_pred)) in params.stages.iter().enumerate() {
        let mut objects: Vec<ObjectClass> = obj_rank[oi..oi + n_obj].iter().map(|&c| ObjectClass(c)).collect();
        let mut predicates: Vec<Predicate> = pred_rank[pi..pi + n_pred].iter().map(|&c| Predicate(c)).collect();
        objects.sort_unstable();
        predicates.sort_unstable();
        oi += n_obj;
        pi += n_pred;
        tasks.push(make_task(d, i + 1, Some(objects), predicates));
    }
    Ok(Scenario { kind: ScenarioKind::S2, seed: 0, tasks, generalization_test: None })
}

/// Relationship generalization: new object classes per task, a fixed
/// predicate set, and a standalone test set over objects no task teaches.
pub fn build_s3(
    d: &Dataset,
    object_buckets: &BucketAssignment,
    seed: u64,
    params: &S3Params,
) -> Result<Scenario, ProtocolError> {
    // at least one class must stay unknown for the generalization set
    require(ClassKind::Objects, params.tasks * params.objects_per_task + 1, d.vocab.objects.len())?;
    require(ClassKind::Predicates, params.shared_predicates, d.vocab.predicates.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = draw_uniform_over_buckets(object_buckets, params.tasks, params.objects_per_task, &mut rng);
    let mut predicates: Vec<Predicate> = class_frequencies(d, ClassKind::Predicates)
        .ranked()
        .into_iter()
        .take(params.shared_predicates)
        .map(Predicate)
        .collect();
    predicates.sort_unstable();

    let assigned: HashSet<u32> = draws.iter().flatten().copied().collect();
    let unknown: Vec<ObjectClass> =
        (0..d.vocab.objects.len() as u32).filter(|c| !assigned.contains(c)).map(ObjectClass).collect();
    let tasks = draws
        .into_iter()
        .enumerate()
        .map(|(i, objs)| make_task(d, i + 1, Some(objs.into_iter().map(ObjectClass).collect()), predicates.clone()))
        .collect();

    let unknown_set: HashSet<ObjectClass> = unknown.iter().copied().collect();
    let pred_set: HashSet<Predicate> = predicates.iter().copied().collect();
    let gen_images: Vec<String> = d
        .split_graphs(Split::Test)
        .filter(|g| !g.objects.is_empty() && g.objects.iter().all(|o| unknown_set.contains(&o.class)))
        .filter(|g| g.relations.iter().any(|r| pred_set.contains(&r.predicate)))
        .map(|g| g.image_id.clone())
        .collect();
    if gen_images.is_empty() {
        return Err(ProtocolError::EmptyGeneralizationSet);
    }
    let generalization_test = TaskSpec {
        index: 0,
        objects: Some(unknown),
        predicates,
        train_images: Vec::new(),
        test_images: gen_images,
    };
    Ok(Scenario { kind: ScenarioKind::S3, seed, tasks, generalization_test: Some(generalization_test) })
}

/// Builds a scenario with its default parameters; head/body/tail buckets
/// come from training-split frequencies.
pub fn build_scenario(d: &Dataset, kind: ScenarioKind, seed: u64) -> Result<Scenario, ProtocolError> {
    match kind {
        ScenarioKind::S1 => {
            let b = bucketize(&class_frequencies(d, ClassKind::Predicates), BucketPolicy::default());
            build_s1(d, &b, seed, &S1Params::default())
        }
        ScenarioKind::S2 => build_s2(d, &S2Params::default()),
        ScenarioKind::S3 => {
            let b = bucketize(&class_frequencies(d, ClassKind::Objects), BucketPolicy::default());
            build_s3(d, &b, seed, &S3Params::default())
        }
    }
}

/// Masked train and test graphs of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_index: usize,
    pub train: Vec<SceneGraph>,
    pub test: Vec<SceneGraph>,
}

impl Scenario {
    pub fn task(&self, t: usize) -> Result<&TaskSpec, ProtocolError> {
        if t == 0 || t > self.tasks.len() {
            return Err(ProtocolError::TaskOutOfRange(t));
        }
        Ok(&self.tasks[t - 1])
    }

    /// Union of the label masks of tasks `1..=t`.
    pub fn cumulative_mask(&self, t: usize) -> Result<LabelMask, ProtocolError> {
        self.task(t)?;
        Ok(LabelMask::union(self.tasks[..t].iter().map(TaskSpec::mask)))
    }

    /// Object classes taught by some task; `None` when all are.
    pub fn taught_objects(&self) -> Option<HashSet<ObjectClass>> {
        self.cumulative_mask(self.tasks.len()).ok().and_then(|m| m.objects)
    }

    /// Permutes the task sequence; `order` lists 1-based task indices.
    pub fn reorder(&self, order: &[usize]) -> Result<Scenario, ProtocolError> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (1..=self.tasks.len()).collect::<Vec<_>>() {
            return Err(ProtocolError::InvalidOrder(format!(
                "{order:?} is not a permutation of 1..={}",
                self.tasks.len()
            )));
        }
        let tasks = order
            .iter()
            .enumerate()
            .map(|(i, &src)| TaskSpec { index: i + 1, ..self.tasks[src - 1].clone() })
            .collect();
        Ok(Scenario { tasks, ..self.clone() })
    }

    /// Standalone generalization set with predicates restricted to the
    /// shared ones. Empty for S1/S2.
    pub fn generalization_graphs(&self, d: &Dataset) -> Vec<SceneGraph> {
        let Some(gen) = &self.generalization_test else { return Vec::new() };
        let mask = gen.mask();
        gen.test_images.iter().filter_map(|id| d.graph(id)).map(|g| mask.apply(g)).collect()
    }
}

/// Masks the dataset for task `t`. Training graphs always use task `t`'s
/// own classes; test graphs use the union over `1..=t` when `cumulative`.
/// Graphs left without a visible relation are dropped.
pub fn mask_task(d: &Dataset, s: &Scenario, t: usize, cumulative: bool) -> Result<TaskDataset, ProtocolError> {
    let train_mask = s.task(t)?.mask();
    let test_mask = if cumulative { s.cumulative_mask(t)? } else { train_mask.clone() };
    let collect = |split: Split, mask: &LabelMask| -> Vec<SceneGraph> {
        d.split_graphs(split).map(|g| mask.apply(g)).filter(|g| !g.relations.is_empty()).collect()
    };
    Ok(TaskDataset {
        task_index: t,
        train: collect(Split::Train, &train_mask),
        test: collect(Split::Test, &test_mask),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub index: usize,
    pub objects: Vec<String>,
    pub predicates: Vec<String>,
    pub train_images: Vec<String>,
    pub test_images: Vec<String>,
}

/// Persisted form of a [`Scenario`], classes given by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub tasks: Vec<TaskManifest>,
    pub generalization_test: Option<TaskManifest>,
}

impl ScenarioManifest {
    pub fn from_scenario(s: &Scenario, vocab: &Vocabularies) -> Self {
        let task = |t: &TaskSpec| TaskManifest {
            index: t.index,
            objects: match &t.objects {
                Some(o) => o.iter().map(|c| vocab.object_name(*c).to_string()).collect(),
                None => vocab.objects.names().to_vec(),
            },
            predicates: t.predicates.iter().map(|p| vocab.predicate_name(*p).to_string()).collect(),
            train_images: t.train_images.clone(),
            test_images: t.test_images.clone(),
        };
        ScenarioManifest {
            kind: s.kind,
            seed: s.seed,
            tasks: s.tasks.iter().map(task).collect(),
            generalization_test: s.generalization_test.as_ref().map(task),
        }
    }

    pub fn to_scenario(&self, vocab: &Vocabularies) -> Result<Scenario, ProtocolError> {
        let obj = |n: &String| {
            vocab.objects.id(n).map(ObjectClass).ok_or_else(|| ProtocolError::Manifest(format!("unknown object {n:?}")))
        };
        let pred = |n: &String| {
            vocab.predicates.id(n).map(Predicate).ok_or_else(|| ProtocolError::Manifest(format!("unknown predicate {n:?}")))
        };
        let task = |t: &TaskManifest| -> Result<TaskSpec, ProtocolError> {
            let objects: Vec<ObjectClass> = t.objects.iter().map(obj).collect::<Result<_, _>>()?;
            // S1 lists the whole vocabulary
            let all = self.kind == ScenarioKind::S1 && objects.len() == vocab.objects.len();
            Ok(TaskSpec {
                index: t.index,
                objects: if all { None } else { Some(objects) },
                predicates: t.predicates.iter().map(pred).collect::<Result<_, _>>()?,
                train_images: t.train_images.clone(),
                test_images: t.test_images.clone(),
            })
        };
        Ok(Scenario {
            kind: self.kind,
            seed: self.seed,
            tasks: self.tasks.iter().map(task).collect::<Result<_, _>>()?,
            generalization_test: self.generalization_test.as_ref().map(task).transpose()?,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), ProtocolError> {
        std::fs::write(path, self.to_json()).map_err(io_err(path))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ProtocolError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| ProtocolError::Manifest(format!("{}: {e}", path.display())))
    }
}
