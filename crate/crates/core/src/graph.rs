//! Scene-graph data model: boxes, nodes, relation edges, vocabularies and
//! class-level triplet labels.

use std::collections::{HashMap, HashSet};
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid box [{x}, {y}, {w}, {h}]: width and height must be positive and finite")]
    InvalidBox { x: f64, y: f64, w: f64, h: f64 },
    #[error("duplicate node id {0}")]
    DuplicateNode(u32),
    #[error("relation references missing node {0}")]
    MissingNode(u32),
    #[error("relation connects node {0} to itself")]
    SelfLoop(u32),
    #[error("duplicate relation ({subject}, {predicate}, {object})")]
    DuplicateEdge { subject: u32, predicate: u32, object: u32 },
    #[error("graph {0} has no valid objects left after clamping")]
    GraphUnrepairable(String),
    #[error("duplicate class name {0:?} in vocabulary")]
    DuplicateClass(String),
}

/// Axis-aligned box in pixel space, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GraphError> {
        let finite = x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite();
        if !finite || w <= 0.0 || h <= 0.0 {
            return Err(GraphError::InvalidBox { x, y, w, h });
        }
        Ok(Self { x, y, w, h })
    }

    /// Builds a box from `(x1, y1, x2, y2)` corner coordinates.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GraphError> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Clips the box to `[0, width] x [0, height]`. Returns `None` when
    /// nothing with positive area is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let x1 = self.x.clamp(0.0, width);
        let y1 = self.y.clamp(0.0, height);
        let x2 = self.right().clamp(0.0, width);
        let y2 = self.bottom().clamp(0.0, height);
        BBox::from_corners(x1, y1, x2, y2).ok()
    }

    /// True when the box lies inside `[0, width] x [0, height]`, allowing
    /// for the rounding left behind by [`BBox::clip`].
    pub fn within(&self, width: f64, height: f64) -> bool {
        let eps = 1e-9 * width.max(height).max(1.0);
        self.x >= 0.0
            && self.y >= 0.0
            && self.right() <= width + eps
            && self.bottom() <= height + eps
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GraphError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let iw = a.right().min(b.right()) - a.x.max(b.x);
    let ih = a.bottom().min(b.bottom()) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Index into the object vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectClass(pub u32);

/// Index into the predicate vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Predicate(pub u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub node_id: u32,
    pub class: ObjectClass,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationEdge {
    pub subject: u32,
    pub predicate: Predicate,
    pub object: u32,
}

/// Class-level `(subject, predicate, object)` label of a relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripletLabel {
    pub subject: ObjectClass,
    pub predicate: Predicate,
    pub object: ObjectClass,
}

impl TripletLabel {
    pub fn new(subject: u32, predicate: u32, object: u32) -> Self {
        Self {
            subject: ObjectClass(subject),
            predicate: Predicate(predicate),
            object: ObjectClass(object),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectNode>,
    pub relations: Vec<RelationEdge>,
}

impl SceneGraph {
    /// Validates node-id uniqueness and edge well-formedness.
    pub fn new(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        objects: Vec<ObjectNode>,
        relations: Vec<RelationEdge>,
    ) -> Result<Self, GraphError> {
        let g = Self {
            image_id: image_id.into(),
            width,
            height,
            objects,
            relations,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let mut ids = HashSet::with_capacity(self.objects.len());
        for o in &self.objects {
            if !ids.insert(o.node_id) {
                return Err(GraphError::DuplicateNode(o.node_id));
            }
        }
        let mut seen = HashSet::with_capacity(self.relations.len());
        for r in &self.relations {
            for id in [r.subject, r.object] {
                if !ids.contains(&id) {
                    return Err(GraphError::MissingNode(id));
                }
            }
            if r.subject == r.object {
                return Err(GraphError::SelfLoop(r.subject));
            }
            if !seen.insert(*r) {
                return Err(GraphError::DuplicateEdge {
                    subject: r.subject,
                    predicate: r.predicate.0,
                    object: r.object,
                });
            }
        }
        Ok(())
    }

    pub fn node(&self, node_id: u32) -> Option<&ObjectNode> {
        self.objects.iter().find(|o| o.node_id == node_id)
    }

    fn node_map(&self) -> HashMap<u32, &ObjectNode> {
        self.objects.iter().map(|o| (o.node_id, o)).collect()
    }

    /// Class-level label of every relation, in edge order.
    pub fn triplets(&self) -> Vec<TripletLabel> {
        let nodes = self.node_map();
        self.relations
            .iter()
            .map(|r| TripletLabel {
                subject: nodes[&r.subject].class,
                predicate: r.predicate,
                object: nodes[&r.object].class,
            })
            .collect()
    }

    /// Relations together with their resolved endpoint nodes.
    pub fn resolved_edges(&self) -> Vec<(&ObjectNode, Predicate, &ObjectNode)> {
        let nodes = self.node_map();
        self.relations
            .iter()
            .map(|r| (nodes[&r.subject], r.predicate, nodes[&r.object]))
            .collect()
    }

    /// Keeps objects passing `keep_object` and edges passing `keep_edge`
    /// whose endpoints both survived.
    pub fn filtered(
        &self,
        keep_object: impl Fn(ObjectClass) -> bool,
        keep_edge: impl Fn(&TripletLabel) -> bool,
    ) -> SceneGraph {
        let objects: Vec<ObjectNode> = self
            .objects
            .iter()
            .filter(|o| keep_object(o.class))
            .cloned()
            .collect();
        let kept: HashMap<u32, ObjectClass> = objects.iter().map(|o| (o.node_id, o.class)).collect();
        let relations = self
            .relations
            .iter()
            .filter(|r| match (kept.get(&r.subject), kept.get(&r.object)) {
                (Some(&s), Some(&o)) => keep_edge(&TripletLabel {
                    subject: s,
                    predicate: r.predicate,
                    object: o,
                }),
                _ => false,
            })
            .copied()
            .collect();
        SceneGraph {
            image_id: self.image_id.clone(),
            width: self.width,
            height: self.height,
            objects,
            relations,
        }
    }
}

/// Counts of what [`clamp_graph`] (and ingest) had to fix in one graph.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairReport {
    pub clipped_boxes: usize,
    pub dropped_nodes: usize,
    pub dropped_edges: usize,
    pub duplicate_edges: usize,
    pub self_loops: usize,
}

impl RepairReport {
    pub fn is_clean(&self) -> bool {
        *self == RepairReport::default()
    }

    pub fn absorb(&mut self, other: &RepairReport) {
        self.clipped_boxes += other.clipped_boxes;
        self.dropped_nodes += other.dropped_nodes;
        self.dropped_edges += other.dropped_edges;
        self.duplicate_edges += other.duplicate_edges;
        self.self_loops += other.self_loops;
    }
}

/// Clips every box to the image rectangle, drops nodes left without area
/// and the edges that referenced them.
pub fn clamp_graph(g: &SceneGraph) -> Result<(SceneGraph, RepairReport), GraphError> {
    let (w, h) = (g.width as f64, g.height as f64);
    let mut report = RepairReport::default();
    let mut objects = Vec::with_capacity(g.objects.len());
    for o in &g.objects {
        if o.bbox.within(w, h) {
            objects.push(o.clone());
            continue;
        }
        match o.bbox.clip(w, h) {
            Some(bbox) => {
                report.clipped_boxes += 1;
                objects.push(ObjectNode { bbox, ..o.clone() });
            }
            None => report.dropped_nodes += 1,
        }
    }
    if objects.is_empty() {
        return Err(GraphError::GraphUnrepairable(g.image_id.clone()));
    }
    let alive: HashSet<u32> = objects.iter().map(|o| o.node_id).collect();
    let relations: Vec<RelationEdge> = g
        .relations
        .iter()
        .filter(|r| alive.contains(&r.subject) && alive.contains(&r.object))
        .copied()
        .collect();
    report.dropped_edges = g.relations.len() - relations.len();
    Ok((
        SceneGraph {
            image_id: g.image_id.clone(),
            width: g.width,
            height: g.height,
            objects,
            relations,
        },
        report,
    ))
}

/// Multiset of triplet labels, iterated in first-insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TripletCounts(IndexMap<TripletLabel, u64>);

impl TripletCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, label: TripletLabel, count: u64) {
        *self.0.entry(label).or_insert(0) += count;
    }

    pub fn merge(&mut self, other: &TripletCounts) {
        for (l, c) in other.iter() {
            self.add(*l, c);
        }
    }

    pub fn get(&self, label: &TripletLabel) -> u64 {
        self.0.get(label).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TripletLabel, u64)> {
        self.0.iter().map(|(l, c)| (l, *c))
    }

    pub fn labels(&self) -> impl Iterator<Item = &TripletLabel> {
        self.0.keys()
    }

    pub fn index_of(&self, label: &TripletLabel) -> Option<usize> {
        self.0.get_index_of(label)
    }
}

impl FromIterator<TripletLabel> for TripletCounts {
    fn from_iter<I: IntoIterator<Item = TripletLabel>>(iter: I) -> Self {
        let mut c = TripletCounts::new();
        for l in iter {
            c.add(l, 1);
        }
        c
    }
}

pub fn extract_triplet_labels(g: &SceneGraph) -> TripletCounts {
    g.triplets().into_iter().collect()
}

/// Ordered list of class names with a reverse lookup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, GraphError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i as u32).is_some() {
                return Err(GraphError::DuplicateClass(n.clone()));
            }
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = GraphError;

    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        Vocabulary::new(v)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.names
    }
}

/// Object and predicate vocabularies together, enough to render labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub objects: Vocabulary,
    pub predicates: Vocabulary,
}

impl Vocabularies {
    pub fn object_name(&self, c: ObjectClass) -> &str {
        self.objects.name(c.0).unwrap_or("<unknown>")
    }

    pub fn predicate_name(&self, p: Predicate) -> &str {
        self.predicates.name(p.0).unwrap_or("<unknown>")
    }

    /// "subject predicate object" phrase for a label.
    pub fn phrase(&self, t: &TripletLabel) -> String {
        format!(
            "{} {} {}",
            self.object_name(t.subject),
            self.predicate_name(t.predicate),
            self.object_name(t.object)
        )
    }

    pub fn triplet(&self, subject: &str, predicate: &str, object: &str) -> Option<TripletLabel> {
        Some(TripletLabel::new(
            self.objects.id(subject)?,
            self.predicates.id(predicate)?,
            self.objects.id(object)?,
        ))
    }
}

impl fmt::Display for TripletLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}, {}, {}>", self.subject.0, self.predicate.0, self.object.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn node(id: u32, class: u32, bbox: BBox) -> ObjectNode {
        ObjectNode { node_id: id, class: ObjectClass(class), bbox }
    }

    fn edge(s: u32, p: u32, o: u32) -> RelationEdge {
        RelationEdge { subject: s, predicate: Predicate(p), object: o }
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 5.0, 5.0)), 0.0);
        // intersection 50, union 150
        assert!((iou(&a, &b(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
        // touching edges do not overlap
        assert_eq!(iou(&a, &b(10.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 5.0).is_err());
        assert!(BBox::new(0.0, 0.0, 5.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 5.0, 5.0).is_err());
        assert!(serde_json::from_str::<BBox>("[0, 0, 0, 1]").is_err());
        let parsed: BBox = serde_json::from_str("[1, 2, 3, 4]").unwrap();
        assert_eq!(parsed, b(1.0, 2.0, 3.0, 4.0));
    }

    #[test]
    fn triplet_extraction() {
        let g = SceneGraph::new(
            "a",
            100,
            100,
            vec![node(0, 0, b(0., 0., 5., 5.)), node(1, 1, b(5., 5., 5., 5.))],
            vec![edge(0, 0, 1)],
        )
        .unwrap();
        let t = extract_triplet_labels(&g);
        assert_eq!(t.len(), 1);
        assert_eq!(t.get(&TripletLabel::new(0, 0, 1)), 1);

        let empty = SceneGraph::new("e", 10, 10, vec![], vec![]).unwrap();
        assert!(extract_triplet_labels(&empty).is_empty());

        // two distinct man nodes each riding a distinct horse node
        let g = SceneGraph::new(
            "b",
            100,
            100,
            vec![
                node(0, 0, b(0., 0., 5., 5.)),
                node(1, 1, b(5., 5., 5., 5.)),
                node(2, 0, b(20., 0., 5., 5.)),
                node(3, 1, b(25., 5., 5., 5.)),
            ],
            vec![edge(0, 3, 1), edge(2, 3, 3)],
        )
        .unwrap();
        let t = extract_triplet_labels(&g);
        assert_eq!(t.len(), 1);
        assert_eq!(t.get(&TripletLabel::new(0, 3, 1)), 2);
        assert_eq!(t.total(), 2);
    }

    #[test]
    fn construction_errors() {
        let n = || node(0, 0, b(0., 0., 1., 1.));
        assert_eq!(
            SceneGraph::new("x", 10, 10, vec![n(), n()], vec![]),
            Err(GraphError::DuplicateNode(0))
        );
        assert_eq!(
            SceneGraph::new("x", 10, 10, vec![n()], vec![edge(0, 0, 0)]),
            Err(GraphError::SelfLoop(0))
        );
        assert_eq!(
            SceneGraph::new("x", 10, 10, vec![n()], vec![edge(0, 0, 4)]),
            Err(GraphError::MissingNode(4))
        );
    }

    #[test]
    fn clamp_cases() {
        let g = SceneGraph::new(
            "c",
            100,
            100,
            vec![node(0, 0, b(1., 1., 5., 5.)), node(1, 1, b(10., 10., 5., 5.))],
            vec![edge(0, 0, 1)],
        )
        .unwrap();
        let (c, rep) = clamp_graph(&g).unwrap();
        assert_eq!(c, g);
        assert!(rep.is_clean());

        let g = SceneGraph::new("c", 100, 100, vec![node(0, 0, b(-5., 0., 20., 10.))], vec![]).unwrap();
        let (c, rep) = clamp_graph(&g).unwrap();
        assert_eq!(c.objects[0].bbox, b(0., 0., 15., 10.));
        assert_eq!(rep.clipped_boxes, 1);

        let g = SceneGraph::new(
            "gone",
            100,
            100,
            vec![node(0, 0, b(150., 0., 20., 10.)), node(1, 0, b(-50., -50., 10., 10.))],
            vec![edge(0, 0, 1)],
        )
        .unwrap();
        assert_eq!(clamp_graph(&g), Err(GraphError::GraphUnrepairable("gone".into())));

        // one node lost, its edge goes with it
        let g = SceneGraph::new(
            "half",
            100,
            100,
            vec![node(0, 0, b(150., 0., 20., 10.)), node(1, 0, b(5., 5., 10., 10.))],
            vec![edge(0, 0, 1)],
        )
        .unwrap();
        let (c, rep) = clamp_graph(&g).unwrap();
        assert_eq!(c.objects.len(), 1);
        assert!(c.relations.is_empty());
        assert_eq!((rep.dropped_nodes, rep.dropped_edges), (1, 1));
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        assert!(Vocabulary::new(["a", "b", "a"]).is_err());
        let v = Vocabulary::new(["man", "horse"]).unwrap();
        assert_eq!(v.id("horse"), Some(1));
        assert_eq!(v.name(0), Some("man"));
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["man","horse"]"#);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..150.0f64, -50.0..150.0f64, 0.5..80.0f64, 0.5..80.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn clamp_is_idempotent(boxes in proptest::collection::vec(arb_box(), 1..6)) {
            let objects: Vec<ObjectNode> = boxes.iter().enumerate().map(|(i, b)| node(i as u32, 0, *b)).collect();
            let relations: Vec<RelationEdge> = (1..objects.len() as u32).map(|i| edge(0, 0, i)).collect();
            let g = SceneGraph::new("p", 100, 100, objects, relations).unwrap();
            if let Ok((once, _)) = clamp_graph(&g) {
                let (twice, rep) = clamp_graph(&once).unwrap();
                prop_assert_eq!(&twice, &once);
                prop_assert!(rep.is_clean());
                prop_assert_eq!(extract_triplet_labels(&once).total(), once.relations.len() as u64);
            }
        }
    }
}
