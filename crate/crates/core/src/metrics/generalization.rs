//! Class-agnostic recall on objects no task has taught.
//!
//! Candidate boxes are the deduplicated subject and object boxes of the
//! top-K predicted triplets. Boxes are paired with GT boxes one-to-one by a
//! maximum-cardinality matching over pairs with IoU at or above the
//! threshold, so raising the threshold can only remove pairs.

use std::collections::HashMap;

use super::{MetricsError, PredictionSet};
use crate::graph::{iou, BBox, SceneGraph};

#[derive(Debug, Clone, PartialEq)]
pub struct BoxMatch {
    pub pred_boxes: Vec<BBox>,
    /// Index into `pred_boxes` for each GT object, in node order.
    pub gt_to_pred: Vec<Option<usize>>,
}

impl BoxMatch {
    pub fn true_positives(&self) -> usize {
        self.gt_to_pred.iter().flatten().count()
    }
}

pub fn candidate_boxes(preds: &PredictionSet, k: usize) -> Vec<BBox> {
    let mut out: Vec<BBox> = Vec::new();
    for t in preds.top_k(k) {
        for b in [t.subject_box, t.object_box] {
            if !out.contains(&b) {
                out.push(b);
            }
        }
    }
    out
}

/// Kuhn's augmenting-path matching; GT boxes are tried in node order and
/// candidates in box order, so the result is deterministic.
fn max_matching(adj: &[Vec<usize>], n_right: usize) -> Vec<Option<usize>> {
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], right_to_left: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if right_to_left[v].is_none_or(|w| augment(w, adj, seen, right_to_left)) {
                right_to_left[v] = Some(u);
                return true;
            }
        }
        false
    }
    let mut right_to_left = vec![None; n_right];
    for u in 0..adj.len() {
        let mut seen = vec![false; n_right];
        augment(u, adj, &mut seen, &mut right_to_left);
    }
    let mut left = vec![None; adj.len()];
    for (v, u) in right_to_left.iter().enumerate() {
        if let Some(u) = u {
            left[*u] = Some(v);
        }
    }
    left
}

pub fn match_boxes(preds: &PredictionSet, gt: &SceneGraph, k: usize, iou_thresh: f64) -> BoxMatch {
    let pred_boxes = candidate_boxes(preds, k);
    let adj: Vec<Vec<usize>> = gt
        .objects
        .iter()
        .map(|o| (0..pred_boxes.len()).filter(|&j| iou(&o.bbox, &pred_boxes[j]) >= iou_thresh).collect())
        .collect();
    let gt_to_pred = max_matching(&adj, pred_boxes.len());
    BoxMatch { pred_boxes, gt_to_pred }
}

fn mean_percent(vals: &[f64]) -> Result<f64, MetricsError> {
    if vals.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    Ok(100.0 * vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Image-averaged TP / GT boxes, in percent. Images without objects are
/// skipped.
pub fn gen_recall_bbox(
    preds: &HashMap<String, PredictionSet>,
    gts: &[SceneGraph],
    k: usize,
    iou_thresh: f64,
) -> Result<f64, MetricsError> {
    let empty = PredictionSet::default();
    let per_image: Vec<f64> = gts
        .iter()
        .filter(|g| !g.objects.is_empty())
        .map(|g| {
            let m = match_boxes(preds.get(&g.image_id).unwrap_or(&empty), g, k, iou_thresh);
            m.true_positives() as f64 / g.objects.len() as f64
        })
        .collect();
    mean_percent(&per_image)
}

/// Fraction of the GT edges with both boxes localized that some top-K
/// triplet recovers: same predicate, subject and object boxes at or above
/// the threshold, classes ignored.
pub fn gen_recall_rel_image(preds: &PredictionSet, gt: &SceneGraph, k: usize, iou_thresh: f64) -> Result<f64, MetricsError> {
    let m = match_boxes(preds, gt, k, iou_thresh);
    let localized = |node_id: u32| {
        gt.objects.iter().position(|o| o.node_id == node_id).is_some_and(|i| m.gt_to_pred[i].is_some())
    };
    let top: Vec<_> = preds.top_k(k).collect();
    let mut denom = 0usize;
    let mut hits = 0usize;
    for r in &gt.relations {
        if !(localized(r.subject) && localized(r.object)) {
            continue;
        }
        denom += 1;
        let s = gt.node(r.subject).expect("validated graph");
        let o = gt.node(r.object).expect("validated graph");
        if top.iter().any(|t| {
            t.predicate == r.predicate
                && iou(&t.subject_box, &s.bbox) >= iou_thresh
                && iou(&t.object_box, &o.bbox) >= iou_thresh
        }) {
            hits += 1;
        }
    }
    if denom == 0 {
        return Err(MetricsError::NoLocalizedBoxes(gt.image_id.clone()));
    }
    Ok(hits as f64 / denom as f64)
}

/// Image average of [`gen_recall_rel_image`] in percent, skipping images
/// without localized edges.
pub fn gen_recall_rel(
    preds: &HashMap<String, PredictionSet>,
    gts: &[SceneGraph],
    k: usize,
    iou_thresh: f64,
) -> Result<f64, MetricsError> {
    let empty = PredictionSet::default();
    let per_image: Vec<f64> = gts
        .iter()
        .filter_map(|g| gen_recall_rel_image(preds.get(&g.image_id).unwrap_or(&empty), g, k, iou_thresh).ok())
        .collect();
    mean_percent(&per_image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ObjectClass, ObjectNode, Predicate, RelationEdge};
    use crate::metrics::PredictedTriplet;

    fn bx(x: f64, w: f64) -> BBox {
        BBox::new(x, 0., w, 10.).unwrap()
    }

    fn graph(boxes: &[BBox], edges: &[(u32, u32, u32)]) -> SceneGraph {
        let objects = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| ObjectNode { node_id: i as u32, class: ObjectClass(7), bbox: *b })
            .collect();
        let relations =
            edges.iter().map(|&(s, p, o)| RelationEdge { subject: s, predicate: Predicate(p), object: o }).collect();
        SceneGraph::new("g", 500, 100, objects, relations).unwrap()
    }

    fn triplet(sb: BBox, p: u32, ob: BBox) -> PredictedTriplet {
        PredictedTriplet {
            subject: ObjectClass(0),
            predicate: Predicate(p),
            object: ObjectClass(0),
            subject_box: sb,
            object_box: ob,
            score: 1.0,
        }
    }

    #[test]
    fn exact_boxes_give_full_recall() {
        let g = graph(&[bx(0., 10.), bx(50., 10.), bx(100., 10.)], &[(0, 1, 1), (1, 2, 2)]);
        let p: HashMap<_, _> = [("g".to_string(), PredictionSet::from_graph(&g, 1.0))].into();
        for t in [0.3, 0.5, 0.7] {
            assert_eq!(gen_recall_bbox(&p, &[g.clone()], 20, t).unwrap(), 100.0);
            assert_eq!(gen_recall_rel(&p, &[g.clone()], 20, t).unwrap(), 100.0);
        }
    }

    #[test]
    fn one_box_over_two_gt_is_one_positive() {
        // two GT boxes of width 10 side by side, one prediction covering both
        // at IoU 0.5 each
        let g = graph(&[bx(0., 10.), bx(10., 10.)], &[]);
        let wide = bx(0., 20.);
        let p = PredictionSet::new("g", vec![triplet(wide, 0, wide)]);
        let m = match_boxes(&p, &g, 20, 0.5);
        assert_eq!(m.pred_boxes.len(), 1);
        assert_eq!(m.true_positives(), 1);
    }

    #[test]
    fn wrong_predicates_give_zero() {
        let g = graph(&[bx(0., 10.), bx(50., 10.)], &[(0, 1, 1)]);
        let mut p = PredictionSet::from_graph(&g, 1.0);
        for t in &mut p.triplets {
            t.predicate = Predicate(9);
        }
        assert_eq!(gen_recall_rel_image(&p, &g, 20, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn unlocalized_image_is_skipped() {
        let g = graph(&[bx(0., 10.), bx(50., 10.)], &[(0, 1, 1)]);
        let p = PredictionSet::default();
        assert_eq!(gen_recall_rel_image(&p, &g, 20, 0.5), Err(MetricsError::NoLocalizedBoxes("g".into())));
    }

    #[test]
    fn three_edges_two_localized_one_correct() {
        let b = [bx(0., 10.), bx(50., 10.), bx(100., 10.), bx(150., 10.)];
        // edge (2, 3) has node 3 unlocalized
        let g = graph(&b, &[(0, 1, 1), (1, 2, 2), (2, 3, 3)]);
        let p = PredictionSet::new("g", vec![triplet(b[0], 1, b[1]), triplet(b[1], 5, b[2])]);
        assert_eq!(gen_recall_rel_image(&p, &g, 20, 0.5).unwrap(), 0.5);
    }
}
