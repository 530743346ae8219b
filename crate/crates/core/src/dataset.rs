//! Dataset directory loading, class statistics and head/body/tail buckets.
//!
//! On-disk layout (all UTF-8 JSON):
//!
//! * `vocab.json`: `{"objects": [names...], "predicates": [names...]}`
//! * `graphs.jsonl`: one scene graph per line, classes given by name
//! * `splits.json`: `{"train": [ids], "val": [ids], "test": [ids]}`

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    clamp_graph, BBox, GraphError, ObjectClass, ObjectNode, Predicate, RelationEdge, RepairReport,
    SceneGraph, Vocabularies, Vocabulary,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{file}:{line}: {message}")]
    Format { file: PathBuf, line: usize, message: String },
    #[error("{file}:{line}: unknown {kind} class {name:?}")]
    Vocab { file: PathBuf, line: usize, kind: ClassKind, name: String },
    #[error("dataset at {0} contains no graphs")]
    EmptyDataset(PathBuf),
    #[error("unsupported dataset format version {0}")]
    UnsupportedVersion(u32),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl IngestError {
    pub fn code(&self) -> &'static str {
        match self {
            IngestError::Format { .. } | IngestError::UnsupportedVersion(_) => "FormatError",
            IngestError::Vocab { .. } => "VocabError",
            IngestError::EmptyDataset(_) => "EmptyDataset",
            IngestError::Io { .. } => "IoError",
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Objects,
    Predicates,
}

impl std::fmt::Display for ClassKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClassKind::Objects => "object",
            ClassKind::Predicates => "predicate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Raw graph line as stored in `graphs.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawGraph {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<RawObject>,
    pub relations: Vec<RawRelation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawObject {
    pub id: u32,
    pub class: String,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRelation {
    pub subject: u32,
    pub predicate: String,
    pub object: u32,
}

impl RawGraph {
    pub fn from_graph(g: &SceneGraph, vocab: &Vocabularies) -> Self {
        RawGraph {
            image_id: g.image_id.clone(),
            width: g.width,
            height: g.height,
            objects: g
                .objects
                .iter()
                .map(|o| RawObject {
                    id: o.node_id,
                    class: vocab.object_name(o.class).to_string(),
                    bbox: o.bbox.into(),
                })
                .collect(),
            relations: g
                .relations
                .iter()
                .map(|r| RawRelation {
                    subject: r.subject,
                    predicate: vocab.predicate_name(r.predicate).to_string(),
                    object: r.object,
                })
                .collect(),
        }
    }
}

/// Why a raw graph could not be turned into a [`SceneGraph`].
#[derive(Debug, Error)]
pub enum RawGraphError {
    #[error("unknown {0} class {1:?}")]
    UnknownClass(ClassKind, String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Resolves class names, drops degenerate boxes, self-loops and duplicate
/// edges, then clamps to the image rectangle.
pub fn repair_raw_graph(
    raw: &RawGraph,
    vocab: &Vocabularies,
) -> Result<(SceneGraph, RepairReport), RawGraphError> {
    let mut report = RepairReport::default();
    let mut objects = Vec::with_capacity(raw.objects.len());
    let mut declared = HashSet::new();
    for o in &raw.objects {
        if !declared.insert(o.id) {
            return Err(GraphError::DuplicateNode(o.id).into());
        }
        let class = vocab
            .objects
            .id(&o.class)
            .ok_or_else(|| RawGraphError::UnknownClass(ClassKind::Objects, o.class.clone()))?;
        match BBox::try_from(o.bbox) {
            Ok(bbox) => objects.push(ObjectNode { node_id: o.id, class: ObjectClass(class), bbox }),
            Err(_) => report.dropped_nodes += 1,
        }
    }
    let alive: HashSet<u32> = objects.iter().map(|o| o.node_id).collect();
    let mut relations = Vec::with_capacity(raw.relations.len());
    let mut seen = HashSet::new();
    for r in &raw.relations {
        let predicate = vocab
            .predicates
            .id(&r.predicate)
            .ok_or_else(|| RawGraphError::UnknownClass(ClassKind::Predicates, r.predicate.clone()))?;
        for id in [r.subject, r.object] {
            if !declared.contains(&id) {
                return Err(GraphError::MissingNode(id).into());
            }
        }
        if !alive.contains(&r.subject) || !alive.contains(&r.object) {
            report.dropped_edges += 1;
            continue;
        }
        if r.subject == r.object {
            report.self_loops += 1;
            continue;
        }
        let edge = RelationEdge { subject: r.subject, predicate: Predicate(predicate), object: r.object };
        if !seen.insert(edge) {
            report.duplicate_edges += 1;
            continue;
        }
        relations.push(edge);
    }
    let g = SceneGraph::new(raw.image_id.clone(), raw.width, raw.height, objects, relations)?;
    let (g, clamp_report) = clamp_graph(&g)?;
    report.absorb(&clamp_report);
    Ok((g, report))
}

/// Summary of the fixes applied while loading.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub graphs: usize,
    pub repairs: RepairReport,
    pub repaired_graphs: usize,
    pub dropped_graphs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabFile {
    objects: Vec<String>,
    predicates: Vec<String>,
}

/// A validated scene-graph dataset with its vocabularies and splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabularies,
    graphs: IndexMap<String, SceneGraph>,
    splits: Splits,
    split_of: HashMap<String, Split>,
}

impl Dataset {
    /// Assembles a dataset from already-validated graphs. Split ids that
    /// have no graph are ignored; graphs missing from every split go to
    /// `train`.
    pub fn from_parts(vocab: Vocabularies, graphs: Vec<SceneGraph>, splits: Splits) -> Self {
        let graphs: IndexMap<String, SceneGraph> =
            graphs.into_iter().map(|g| (g.image_id.clone(), g)).collect();
        let mut split_of = HashMap::with_capacity(graphs.len());
        let mut clean = Splits::default();
        for (split, ids) in [
            (Split::Train, &splits.train),
            (Split::Val, &splits.val),
            (Split::Test, &splits.test),
        ] {
            for id in ids {
                if graphs.contains_key(id) && !split_of.contains_key(id) {
                    split_of.insert(id.clone(), split);
                    match split {
                        Split::Train => clean.train.push(id.clone()),
                        Split::Val => clean.val.push(id.clone()),
                        Split::Test => clean.test.push(id.clone()),
                    }
                }
            }
        }
        for id in graphs.keys() {
            if !split_of.contains_key(id) {
                split_of.insert(id.clone(), Split::Train);
                clean.train.push(id.clone());
            }
        }
        Self { vocab, graphs, splits: clean, split_of }
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn graph(&self, image_id: &str) -> Option<&SceneGraph> {
        self.graphs.get(image_id)
    }

    pub fn graphs(&self) -> impl Iterator<Item = &SceneGraph> {
        self.graphs.values()
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn split_of(&self, image_id: &str) -> Option<Split> {
        self.split_of.get(image_id).copied()
    }

    pub fn split_graphs(&self, split: Split) -> impl Iterator<Item = &SceneGraph> {
        self.splits.ids(split).iter().map(move |id| &self.graphs[id])
    }

    /// Writes the dataset in the directory layout read by [`load_dataset`].
    pub fn write(&self, dir: &Path) -> Result<(), IngestError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let vocab = VocabFile {
            objects: self.vocab.objects.names().to_vec(),
            predicates: self.vocab.predicates.names().to_vec(),
        };
        write_json(&dir.join("vocab.json"), &vocab)?;
        let path = dir.join("graphs.jsonl");
        let mut out = Vec::new();
        for g in self.graphs.values() {
            let line = serde_json::to_string(&RawGraph::from_graph(g, &self.vocab))
                .expect("graph serialization is infallible");
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
        fs::write(&path, out).map_err(io_err(&path))?;
        write_json(&dir.join("splits.json"), &self.splits)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IngestError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IngestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| IngestError::Format {
        file: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Loads and validates a dataset directory.
pub fn load_dataset(root: &Path, format_version: u32) -> Result<(Dataset, LoadReport), IngestError> {
    if format_version != FORMAT_VERSION {
        return Err(IngestError::UnsupportedVersion(format_version));
    }
    let vocab_path = root.join("vocab.json");
    let vf: VocabFile = read_json(&vocab_path)?;
    let to_vocab = |names: Vec<String>| {
        Vocabulary::new(names).map_err(|e| IngestError::Format {
            file: vocab_path.clone(),
            line: 0,
            message: e.to_string(),
        })
    };
    let vocab = Vocabularies { objects: to_vocab(vf.objects)?, predicates: to_vocab(vf.predicates)? };

    let graphs_path = root.join("graphs.jsonl");
    let file = fs::File::open(&graphs_path).map_err(io_err(&graphs_path))?;
    let mut report = LoadReport::default();
    let mut graphs = Vec::new();
    let mut seen_ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(io_err(&graphs_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let format_err = |message: String| IngestError::Format {
            file: graphs_path.clone(),
            line: lineno,
            message,
        };
        let raw: RawGraph = serde_json::from_str(&line).map_err(|e| format_err(e.to_string()))?;
        if !seen_ids.insert(raw.image_id.clone()) {
            return Err(format_err(format!("duplicate image id {:?}", raw.image_id)));
        }
        match repair_raw_graph(&raw, &vocab) {
            Ok((g, rep)) => {
                if !rep.is_clean() {
                    report.repaired_graphs += 1;
                    report.repairs.absorb(&rep);
                }
                graphs.push(g);
            }
            Err(RawGraphError::UnknownClass(kind, name)) => {
                return Err(IngestError::Vocab { file: graphs_path.clone(), line: lineno, kind, name })
            }
            Err(RawGraphError::Graph(GraphError::GraphUnrepairable(id))) => {
                log::warn!("dropping image {id}: no valid objects");
                report.dropped_graphs.push(id);
            }
            Err(RawGraphError::Graph(e)) => return Err(format_err(e.to_string())),
        }
    }
    if graphs.is_empty() {
        return Err(IngestError::EmptyDataset(root.to_path_buf()));
    }

    let splits_path = root.join("splits.json");
    let splits: Splits = read_json(&splits_path)?;
    let mut assigned = HashSet::new();
    let dropped: HashSet<&String> = report.dropped_graphs.iter().collect();
    for id in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        if !assigned.insert(id.clone()) {
            return Err(IngestError::Format {
                file: splits_path.clone(),
                line: 0,
                message: format!("image {id:?} appears in more than one split"),
            });
        }
        if !seen_ids.contains(id) {
            return Err(IngestError::Format {
                file: splits_path.clone(),
                line: 0,
                message: format!("split references unknown image {id:?}"),
            });
        }
    }
    if let Some(g) = graphs.iter().find(|g| !assigned.contains(&g.image_id)) {
        return Err(IngestError::Format {
            file: splits_path,
            line: 0,
            message: format!("image {:?} is not assigned to any split", g.image_id),
        });
    }
    let keep = |ids: Vec<String>| ids.into_iter().filter(|id| !dropped.contains(id)).collect();
    let splits = Splits { train: keep(splits.train), val: keep(splits.val), test: keep(splits.test) };
    if report.repaired_graphs > 0 {
        log::warn!("repaired {} graphs: {:?}", report.repaired_graphs, report.repairs);
    }
    report.graphs = graphs.len();
    Ok((Dataset::from_parts(vocab, graphs, splits), report))
}

/// Per-class instance counts over the train split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub kind: ClassKind,
    pub counts: Vec<u64>,
}

impl FrequencyTable {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Class ids ordered by descending count, ties by ascending id.
    pub fn ranked(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = (0..self.counts.len() as u32).collect();
        ids.sort_by(|a, b| self.counts[*b as usize].cmp(&self.counts[*a as usize]).then(a.cmp(b)));
        ids
    }
}

pub fn class_frequencies(d: &Dataset, kind: ClassKind) -> FrequencyTable {
    let n = match kind {
        ClassKind::Objects => d.vocab.objects.len(),
        ClassKind::Predicates => d.vocab.predicates.len(),
    };
    let mut counts = vec![0u64; n];
    for g in d.split_graphs(Split::Train) {
        match kind {
            ClassKind::Objects => g.objects.iter().for_each(|o| counts[o.class.0 as usize] += 1),
            ClassKind::Predicates => g.relations.iter().for_each(|r| counts[r.predicate.0 as usize] += 1),
        }
    }
    FrequencyTable { kind, counts }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Head,
    Body,
    Tail,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Head, Bucket::Body, Bucket::Tail];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum BucketPolicy {
    /// `head` when count >= head_min, `body` when count >= body_min.
    CountThresholds { head_min: u64, body_min: u64 },
    /// Equal thirds by frequency rank.
    RankTertiles,
}

impl Default for BucketPolicy {
    fn default() -> Self {
        BucketPolicy::CountThresholds { head_min: 10_000, body_min: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketAssignment {
    pub buckets: Vec<Bucket>,
}

impl BucketAssignment {
    pub fn of(&self, class: u32) -> Bucket {
        self.buckets[class as usize]
    }

    /// Class ids in `bucket`, ascending.
    pub fn members(&self, bucket: Bucket) -> Vec<u32> {
        (0..self.buckets.len() as u32).filter(|c| self.buckets[*c as usize] == bucket).collect()
    }
}

pub fn bucketize(f: &FrequencyTable, policy: BucketPolicy) -> BucketAssignment {
    let buckets = match policy {
        BucketPolicy::CountThresholds { head_min, body_min } => f
            .counts
            .iter()
            .map(|&c| {
                if c >= head_min {
                    Bucket::Head
                } else if c >= body_min {
                    Bucket::Body
                } else {
                    Bucket::Tail
                }
            })
            .collect(),
        BucketPolicy::RankTertiles => {
            let n = f.counts.len();
            let head = n.div_ceil(3);
            let body = (n - head).div_ceil(2);
            let mut buckets = vec![Bucket::Tail; n];
            for (rank, id) in f.ranked().into_iter().enumerate() {
                buckets[id as usize] = if rank < head {
                    Bucket::Head
                } else if rank < head + body {
                    Bucket::Body
                } else {
                    Bucket::Tail
                };
            }
            buckets
        }
    };
    BucketAssignment { buckets }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabularies {
        Vocabularies {
            objects: Vocabulary::new(["man", "horse", "house"]).unwrap(),
            predicates: Vocabulary::new(["on", "behind"]).unwrap(),
        }
    }

    fn raw(id: &str, rels: &[(u32, &str, u32)]) -> RawGraph {
        RawGraph {
            image_id: id.into(),
            width: 100,
            height: 100,
            objects: vec![
                RawObject { id: 0, class: "man".into(), bbox: [1.0, 1.0, 10.0, 10.0] },
                RawObject { id: 1, class: "horse".into(), bbox: [5.0, 5.0, 10.0, 10.0] },
            ],
            relations: rels
                .iter()
                .map(|(s, p, o)| RawRelation { subject: *s, predicate: p.to_string(), object: *o })
                .collect(),
        }
    }

    #[test]
    fn raw_graph_repairs() {
        let v = vocab();
        let (g, rep) = repair_raw_graph(&raw("a", &[(0, "on", 1), (0, "on", 1), (1, "on", 1)]), &v).unwrap();
        assert_eq!(g.relations.len(), 1);
        assert_eq!(rep.duplicate_edges, 1);
        assert_eq!(rep.self_loops, 1);
        assert!(matches!(
            repair_raw_graph(&raw("b", &[(0, "riding", 1)]), &v),
            Err(RawGraphError::UnknownClass(ClassKind::Predicates, _))
        ));
        assert!(matches!(
            repair_raw_graph(&raw("c", &[(0, "on", 7)]), &v),
            Err(RawGraphError::Graph(GraphError::MissingNode(7)))
        ));
    }

    fn dataset(graphs: Vec<RawGraph>) -> Dataset {
        let v = vocab();
        let gs: Vec<SceneGraph> = graphs.iter().map(|r| repair_raw_graph(r, &v).unwrap().0).collect();
        let ids = gs.iter().map(|g| g.image_id.clone()).collect();
        Dataset::from_parts(v, gs, Splits { train: ids, ..Default::default() })
    }

    #[test]
    fn frequencies() {
        let d = dataset(vec![raw("a", &[(0, "on", 1)])]);
        assert_eq!(class_frequencies(&d, ClassKind::Objects).counts, vec![1, 1, 0]);
        assert_eq!(class_frequencies(&d, ClassKind::Predicates).counts, vec![1, 0]);

        let d = dataset(vec![raw("a", &[(0, "on", 1)]), raw("b", &[(0, "on", 1), (1, "behind", 0)])]);
        assert_eq!(class_frequencies(&d, ClassKind::Objects).counts, vec![2, 2, 0]);
        assert_eq!(class_frequencies(&d, ClassKind::Predicates).counts, vec![2, 1]);

        let v = vocab();
        let g = repair_raw_graph(&raw("t", &[(0, "on", 1)]), &v).unwrap().0;
        let d = Dataset::from_parts(v, vec![g], Splits { test: vec!["t".into()], ..Default::default() });
        assert_eq!(class_frequencies(&d, ClassKind::Objects).total(), 0);
    }

    #[test]
    fn bucket_policies() {
        let f = FrequencyTable { kind: ClassKind::Predicates, counts: vec![12_000, 600, 3, 10_000, 499] };
        let b = bucketize(&f, BucketPolicy::default());
        assert_eq!(b.buckets, vec![Bucket::Head, Bucket::Body, Bucket::Tail, Bucket::Head, Bucket::Tail]);

        let f = FrequencyTable { kind: ClassKind::Predicates, counts: (1..=9).collect() };
        let b = bucketize(&f, BucketPolicy::RankTertiles);
        for bucket in Bucket::ALL {
            assert_eq!(b.members(bucket).len(), 3);
        }
        assert_eq!(b.members(Bucket::Head), vec![6, 7, 8]);

        let f = FrequencyTable { kind: ClassKind::Objects, counts: vec![5; 6] };
        let b = bucketize(&f, BucketPolicy::RankTertiles);
        assert_eq!(b.members(Bucket::Head), vec![0, 1]);
        assert_eq!(b.members(Bucket::Tail), vec![4, 5]);

        let f = FrequencyTable { kind: ClassKind::Objects, counts: vec![1; 50] };
        let b = bucketize(&f, BucketPolicy::RankTertiles);
        let sizes: Vec<usize> = Bucket::ALL.iter().map(|x| b.members(*x).len()).collect();
        assert_eq!(sizes, vec![17, 17, 16]);
    }

    #[test]
    fn write_then_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = dataset(vec![raw("a", &[(0, "on", 1)]), raw("b", &[(1, "behind", 0)])]);
        d.write(dir.path()).unwrap();
        let (loaded, report) = load_dataset(dir.path(), FORMAT_VERSION).unwrap();
        assert_eq!(report.graphs, 2);
        assert_eq!(loaded.graph("b"), d.graph("b"));
        assert_eq!(loaded.splits(), d.splits());
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = dataset(vec![raw("a", &[(0, "on", 1)])]);
        d.write(dir.path()).unwrap();

        let bad = serde_json::to_string(&raw("a", &[(0, "riding", 1)])).unwrap();
        fs::write(dir.path().join("graphs.jsonl"), bad + "\n").unwrap();
        let err = load_dataset(dir.path(), 1).unwrap_err();
        assert!(matches!(err, IngestError::Vocab { line: 1, .. }), "{err}");

        fs::write(dir.path().join("graphs.jsonl"), "").unwrap();
        assert!(matches!(load_dataset(dir.path(), 1), Err(IngestError::EmptyDataset(_))));

        fs::write(dir.path().join("graphs.jsonl"), "{not json\n").unwrap();
        let err = load_dataset(dir.path(), 1).unwrap_err();
        assert_eq!(err.code(), "FormatError");
        assert!(err.to_string().contains("graphs.jsonl:1"));
    }

    proptest! {
        #[test]
        fn thresholds_monotone(counts in proptest::collection::vec(0u64..20_000, 1..40)) {
            let f = FrequencyTable { kind: ClassKind::Objects, counts: counts.clone() };
            let b = bucketize(&f, BucketPolicy::default());
            prop_assert_eq!(&b, &bucketize(&f, BucketPolicy::default()));
            for i in 0..counts.len() {
                for j in 0..counts.len() {
                    if counts[i] >= counts[j] {
                        prop_assert!(b.buckets[i] <= b.buckets[j]);
                    }
                }
            }
        }
    }
}
