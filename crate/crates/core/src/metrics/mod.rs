//! Evaluation: triplet matching, recall and mean recall, forgetting and
//! transfer aggregates, and generalization recall on unknown objects.

mod generalization;
mod matching;
mod transfer;

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generalization::{candidate_boxes, gen_recall_bbox, gen_recall_rel, gen_recall_rel_image, match_boxes, BoxMatch};
pub use matching::{evaluate_images, match_triplets, mean_recall_at_k, recall_at_k, ImageMatch, MeanRecall};
pub use transfer::{avg_recall, bwt, forgetting, fwt, RecallMatrix};

use crate::dataset::{io_err, IngestError};
use crate::graph::{BBox, ObjectClass, Predicate, SceneGraph, Vocabularies};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("test set has no ground-truth relations")]
    EmptyTestSet,
    #[error("recall matrix cell ({0}, {1}) is not populated")]
    MissingCell(usize, usize),
    #[error("scratch baseline for task {0} is missing")]
    MissingBaseline(usize),
    #[error("image {0} has no localized ground-truth relation")]
    NoLocalizedBoxes(String),
}

impl MetricsError {
    pub fn code(&self) -> &'static str {
        match self {
            MetricsError::EmptyTestSet => "EmptyTestSet",
            MetricsError::MissingCell(..) => "MissingCell",
            MetricsError::MissingBaseline(_) => "MissingBaseline",
            MetricsError::NoLocalizedBoxes(_) => "NoLocalizedBoxes",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedTriplet {
    pub subject: ObjectClass,
    pub predicate: Predicate,
    pub object: ObjectClass,
    pub subject_box: BBox,
    pub object_box: BBox,
    pub score: f64,
}

/// Predictions for one image in descending score order; ties keep the
/// producer's order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    pub image_id: String,
    pub triplets: Vec<PredictedTriplet>,
}

impl PredictionSet {
    pub fn new(image_id: impl Into<String>, mut triplets: Vec<PredictedTriplet>) -> Self {
        triplets.sort_by(|a, b| b.score.total_cmp(&a.score));
        Self { image_id: image_id.into(), triplets }
    }

    /// Every edge of `g` as a prediction with the given score.
    pub fn from_graph(g: &SceneGraph, score: f64) -> Self {
        let triplets = g
            .resolved_edges()
            .into_iter()
            .map(|(s, p, o)| PredictedTriplet {
                subject: s.class,
                predicate: p,
                object: o.class,
                subject_box: s.bbox,
                object_box: o.bbox,
                score,
            })
            .collect();
        Self::new(g.image_id.clone(), triplets)
    }

    pub fn top_k(&self, k: usize) -> impl Iterator<Item = &PredictedTriplet> {
        self.triplets.iter().take(k)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TripletLine {
    s_class: String,
    p_class: String,
    o_class: String,
    s_box: [f64; 4],
    o_box: [f64; 4],
    score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionLine {
    image_id: String,
    triplets: Vec<TripletLine>,
}

impl PredictionSet {
    pub fn to_json_line(&self, vocab: &Vocabularies) -> String {
        let line = PredictionLine {
            image_id: self.image_id.clone(),
            triplets: self
                .triplets
                .iter()
                .map(|t| TripletLine {
                    s_class: vocab.object_name(t.subject).to_string(),
                    p_class: vocab.predicate_name(t.predicate).to_string(),
                    o_class: vocab.object_name(t.object).to_string(),
                    s_box: t.subject_box.into(),
                    o_box: t.object_box.into(),
                    score: t.score,
                })
                .collect(),
        };
        serde_json::to_string(&line).expect("serializable")
    }

    pub fn from_json_line(line: &str, vocab: &Vocabularies) -> Result<Self, String> {
        let l: PredictionLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let mut triplets = Vec::with_capacity(l.triplets.len());
        for t in l.triplets {
            if !t.score.is_finite() {
                return Err(format!("non-finite score in {}", l.image_id));
            }
            let label = vocab
                .triplet(&t.s_class, &t.p_class, &t.o_class)
                .ok_or_else(|| format!("unknown classes {} {} {}", t.s_class, t.p_class, t.o_class))?;
            triplets.push(PredictedTriplet {
                subject: label.subject,
                predicate: label.predicate,
                object: label.object,
                subject_box: BBox::try_from(t.s_box).map_err(|e| e.to_string())?,
                object_box: BBox::try_from(t.o_box).map_err(|e| e.to_string())?,
                score: t.score,
            });
        }
        Ok(Self::new(l.image_id, triplets))
    }
}

pub fn write_predictions(path: &Path, sets: &[PredictionSet], vocab: &Vocabularies) -> Result<(), IngestError> {
    let mut out = String::new();
    for s in sets {
        out.push_str(&s.to_json_line(vocab));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_predictions(path: &Path, vocab: &Vocabularies) -> Result<HashMap<String, PredictionSet>, IngestError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let set = PredictionSet::from_json_line(&line, vocab).map_err(|message| IngestError::Format {
            file: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        out.insert(set.image_id.clone(), set);
    }
    Ok(out)
}

/// Aggregates after one task at one K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub avg_recall: f64,
    pub forgetting: f64,
    /// R@K on the union of test sets `1..=task` under cumulative labels.
    pub cumulative_recall: Option<f64>,
    pub mean_recall: Option<MeanRecall>,
    pub mean_forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationMetrics {
    pub task: usize,
    pub iou: f64,
    pub recall_bbox: Option<f64>,
    pub recall_rel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub recall: RecallMatrix,
    pub mean_recall: RecallMatrix,
    pub tasks: Vec<TaskMetrics>,
    pub fwt: Option<f64>,
    pub bwt: Option<f64>,
    pub generalization: Vec<GeneralizationMetrics>,
}

impl MetricsReport {
    /// Fills the per-task aggregates from the two matrices. Rows that are
    /// not populated (joint training fills only the last) are skipped.
    pub fn from_matrices(
        k: usize,
        recall: RecallMatrix,
        mean_recall: RecallMatrix,
        cumulative: Vec<(Option<f64>, Option<MeanRecall>)>,
        generalization: Vec<GeneralizationMetrics>,
    ) -> Self {
        let mut tasks = Vec::new();
        for t in 1..=recall.tasks() {
            let (Ok(avg), Ok(f)) = (avg_recall(&recall, t), forgetting(&recall, t)) else { continue };
            let (cum_r, cum_mr) = cumulative.get(t - 1).cloned().unwrap_or((None, None));
            tasks.push(TaskMetrics {
                task: t,
                avg_recall: avg,
                forgetting: f,
                cumulative_recall: cum_r,
                mean_recall: cum_mr,
                mean_forgetting: forgetting(&mean_recall, t).ok(),
            });
        }
        MetricsReport {
            k,
            fwt: fwt(&recall).ok(),
            bwt: bwt(&recall).ok(),
            recall,
            mean_recall,
            tasks,
            generalization,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Vocabulary;

    fn vocab() -> Vocabularies {
        Vocabularies {
            objects: Vocabulary::new(["man", "horse"]).unwrap(),
            predicates: Vocabulary::new(["on", "in front of"]).unwrap(),
        }
    }

    fn t(score: f64, p: u32) -> PredictedTriplet {
        PredictedTriplet {
            subject: ObjectClass(0),
            predicate: Predicate(p),
            object: ObjectClass(1),
            subject_box: BBox::new(0., 0., 1., 1.).unwrap(),
            object_box: BBox::new(1., 1., 2., 2.).unwrap(),
            score,
        }
    }

    #[test]
    fn sorting_is_stable() {
        let s = PredictionSet::new("a", vec![t(0.5, 0), t(0.9, 0), t(0.5, 1)]);
        let order: Vec<(f64, u32)> = s.triplets.iter().map(|x| (x.score, x.predicate.0)).collect();
        assert_eq!(order, vec![(0.9, 0), (0.5, 0), (0.5, 1)]);
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let sets = vec![PredictionSet::new("a", vec![t(0.5, 1), t(0.9, 0)]), PredictionSet::new("b", vec![])];
        let path = dir.path().join("p.jsonl");
        write_predictions(&path, &sets, &vocab()).unwrap();
        let back = read_predictions(&path, &vocab()).unwrap();
        assert_eq!(back["a"], sets[0]);
        assert!(std::fs::read_to_string(&path).unwrap().contains("\"p_class\":\"in front of\""));
        std::fs::write(&path, "{\"image_id\":\"x\",\"triplets\":[{\"s_class\":\"cat\",\"p_class\":\"on\",\"o_class\":\"man\",\"s_box\":[0,0,1,1],\"o_box\":[0,0,1,1],\"score\":1}]}\n").unwrap();
        assert!(read_predictions(&path, &vocab()).is_err());
    }

    #[test]
    fn report_skips_unfilled_rows() {
        let mut r = RecallMatrix::new(3);
        for j in 1..=3 {
            r.set(3, j, 50.0);
        }
        let rep = MetricsReport::from_matrices(20, r.clone(), r, vec![], vec![]);
        assert!(rep.tasks.is_empty());
        assert_eq!(rep.bwt, None);
    }
}
