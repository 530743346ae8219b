//! Triplet matching and recall over a test set.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{MetricsError, PredictionSet};
use crate::dataset::{Bucket, BucketAssignment};
use crate::graph::{iou, Predicate, SceneGraph};

/// Greedy pass over the top-`k` predictions in descending score order
/// (stable for ties). A prediction matches an unmatched GT edge when all
/// three classes agree and both box IoUs reach `iou_thresh`; among several
/// candidates the one with the largest smaller-IoU wins, then GT order.
/// Returns one flag per GT edge.
pub fn match_triplets(preds: &PredictionSet, gt: &SceneGraph, k: usize, iou_thresh: f64) -> Vec<bool> {
    let edges = gt.resolved_edges();
    let mut matched = vec![false; edges.len()];
    for p in preds.top_k(k) {
        let mut best: Option<(usize, f64)> = None;
        for (j, (s, pred, o)) in edges.iter().enumerate() {
            if matched[j] || s.class != p.subject || *pred != p.predicate || o.class != p.object {
                continue;
            }
            let q = iou(&p.subject_box, &s.bbox).min(iou(&p.object_box, &o.bbox));
            if q >= iou_thresh && best.is_none_or(|(_, b)| q > b) {
                best = Some((j, q));
            }
        }
        if let Some((j, _)) = best {
            matched[j] = true;
        }
    }
    matched
}

/// Matching outcome for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatch {
    pub image_id: String,
    /// `(predicate, matched)` per GT edge.
    pub edges: Vec<(Predicate, bool)>,
}

impl ImageMatch {
    pub fn matched(&self) -> usize {
        self.edges.iter().filter(|e| e.1).count()
    }
}

/// Matches every test graph against its predictions. Images without
/// predictions count as empty prediction sets.
pub fn evaluate_images(
    preds: &HashMap<String, PredictionSet>,
    gts: &[SceneGraph],
    k: usize,
    iou_thresh: f64,
) -> Vec<ImageMatch> {
    let empty = PredictionSet::default();
    gts.iter()
        .map(|g| {
            let p = preds.get(&g.image_id).unwrap_or(&empty);
            let flags = match_triplets(p, g, k, iou_thresh);
            ImageMatch {
                image_id: g.image_id.clone(),
                edges: g.relations.iter().zip(flags).map(|(r, m)| (r.predicate, m)).collect(),
            }
        })
        .collect()
}

/// Mean over images of matched / GT edges, in percent. Images without GT
/// edges are skipped.
pub fn recall_at_k(images: &[ImageMatch]) -> Result<f64, MetricsError> {
    let per_image: Vec<f64> = images
        .iter()
        .filter(|m| !m.edges.is_empty())
        .map(|m| m.matched() as f64 / m.edges.len() as f64)
        .collect();
    if per_image.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    Ok(100.0 * per_image.iter().sum::<f64>() / per_image.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRecall {
    pub mean: f64,
    /// `None` when no predicate of that bucket occurs in the GT.
    pub head: Option<f64>,
    pub body: Option<f64>,
    pub tail: Option<f64>,
    pub per_predicate: Vec<(Predicate, f64)>,
}

/// Recall pooled over all GT edges of each predicate, then the unweighted
/// mean over predicates present in the GT, in percent.
pub fn mean_recall_at_k(images: &[ImageMatch], buckets: Option<&BucketAssignment>) -> Result<MeanRecall, MetricsError> {
    let mut tally: HashMap<Predicate, (usize, usize)> = HashMap::new();
    for m in images {
        for &(p, hit) in &m.edges {
            let e = tally.entry(p).or_insert((0, 0));
            e.0 += hit as usize;
            e.1 += 1;
        }
    }
    if tally.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let mut per_predicate: Vec<(Predicate, f64)> =
        tally.into_iter().map(|(p, (hit, n))| (p, 100.0 * hit as f64 / n as f64)).collect();
    per_predicate.sort_by_key(|(p, _)| *p);
    let mean_of = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    let bucket_mean = |b: Bucket| {
        buckets.and_then(|a| {
            mean_of(
                per_predicate
                    .iter()
                    .filter(|(p, _)| (p.0 as usize) < a.buckets.len() && a.of(p.0) == b)
                    .map(|(_, r)| *r)
                    .collect(),
            )
        })
    };
    Ok(MeanRecall {
        mean: mean_of(per_predicate.iter().map(|(_, r)| *r).collect()).expect("nonempty"),
        head: bucket_mean(Bucket::Head),
        body: bucket_mean(Bucket::Body),
        tail: bucket_mean(Bucket::Tail),
        per_predicate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BBox, ObjectClass, ObjectNode, RelationEdge};
    use crate::metrics::PredictedTriplet;

    fn bx(x: f64) -> BBox {
        BBox::new(x, 0., 10., 10.).unwrap()
    }

    fn gt(edges: &[(u32, u32, u32)]) -> SceneGraph {
        // node i has class i and box at x = 20 i
        let n = edges.iter().flat_map(|e| [e.0, e.2]).max().unwrap_or(0) + 1;
        let objects =
            (0..n).map(|i| ObjectNode { node_id: i, class: ObjectClass(i), bbox: bx(20.0 * i as f64) }).collect();
        let relations =
            edges.iter().map(|&(s, p, o)| RelationEdge { subject: s, predicate: Predicate(p), object: o }).collect();
        SceneGraph::new("img", 200, 100, objects, relations).unwrap()
    }

    fn pred(s: u32, p: u32, o: u32, sx: f64, score: f64) -> PredictedTriplet {
        PredictedTriplet {
            subject: ObjectClass(s),
            predicate: Predicate(p),
            object: ObjectClass(o),
            subject_box: bx(sx),
            object_box: bx(20.0 * o as f64),
            score,
        }
    }

    #[test]
    fn identical_predictions_match_all() {
        let g = gt(&[(0, 0, 1), (1, 2, 2), (2, 1, 0)]);
        let p = PredictionSet::from_graph(&g, 1.0);
        assert_eq!(match_triplets(&p, &g, 20, 0.5), vec![true; 3]);
        assert_eq!(match_triplets(&p, &g, 2, 0.5), vec![true, true, false]);
    }

    #[test]
    fn iou_below_threshold_fails() {
        let g = gt(&[(0, 0, 1)]);
        // shifted by 5.7 px: IoU = 4.3 / 15.7 < 0.5
        let p = PredictionSet::new("img", vec![pred(0, 0, 1, 5.7, 1.0)]);
        assert!(iou(&bx(5.7), &bx(0.0)) < 0.5);
        assert_eq!(match_triplets(&p, &g, 20, 0.5), vec![false]);
        assert_eq!(match_triplets(&p, &g, 20, 0.2), vec![true]);
    }

    #[test]
    fn one_gt_edge_matches_once() {
        let g = gt(&[(0, 0, 1)]);
        let p = PredictionSet::new("img", vec![pred(0, 0, 1, 0.0, 0.9), pred(0, 0, 1, 1.0, 0.8)]);
        assert_eq!(match_triplets(&p, &g, 20, 0.5), vec![true]);
        let m = evaluate_images(&[("img".to_string(), p)].into(), &[g], 20, 0.5);
        assert_eq!(m[0].matched(), 1);
    }

    #[test]
    fn recall_examples() {
        let g1 = gt(&[(0, 0, 1), (1, 1, 2)]);
        let mut g2 = gt(&[(0, 0, 1), (1, 1, 2), (2, 0, 0), (0, 1, 2)]);
        g2.image_id = "img2".into();
        let mut g3 = gt(&[]);
        g3.image_id = "none".into();
        let mut preds = HashMap::new();
        preds.insert("img".to_string(), PredictionSet::new("img", vec![pred(0, 0, 1, 0.0, 1.0)]));
        preds.insert(
            "img2".to_string(),
            PredictionSet::new("img2", vec![pred(0, 0, 1, 0.0, 1.0), pred(1, 1, 2, 20.0, 0.5)]),
        );
        let m = evaluate_images(&preds, &[g1.clone(), g2, g3.clone()], 20, 0.5);
        assert_eq!(recall_at_k(&m).unwrap(), 50.0);
        let oracle: HashMap<_, _> = [("img".to_string(), PredictionSet::from_graph(&g1, 1.0))].into();
        assert_eq!(recall_at_k(&evaluate_images(&oracle, &[g1], 20, 0.5)).unwrap(), 100.0);
        assert_eq!(recall_at_k(&evaluate_images(&oracle, &[g3], 20, 0.5)), Err(MetricsError::EmptyTestSet));
        assert_eq!(recall_at_k(&[]), Err(MetricsError::EmptyTestSet));
    }

    #[test]
    fn mean_recall_exposes_head_bias() {
        // 99 edges of predicate 0 all matched, 1 edge of predicate 1 missed
        let mut images: Vec<ImageMatch> =
            (0..99).map(|i| ImageMatch { image_id: format!("h{i}"), edges: vec![(Predicate(0), true)] }).collect();
        images.push(ImageMatch { image_id: "t".into(), edges: vec![(Predicate(1), false)] });
        let buckets = BucketAssignment { buckets: vec![Bucket::Head, Bucket::Tail, Bucket::Body] };
        let mr = mean_recall_at_k(&images, Some(&buckets)).unwrap();
        assert_eq!(mr.mean, 50.0);
        assert_eq!(mr.head, Some(100.0));
        assert_eq!(mr.tail, Some(0.0));
        // predicate 2 never occurs, so it is not averaged
        assert_eq!(mr.body, None);
        assert_eq!(recall_at_k(&images).unwrap(), 99.0);
    }
}
