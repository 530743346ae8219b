//! Seeded synthetic scene-graph corpora with long-tailed class
//! distributions, used as fixtures by the tests and the CLI.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{io_err, Dataset, IngestError, Splits};
use crate::graph::{BBox, ObjectClass, ObjectNode, Predicate, RelationEdge, SceneGraph, Vocabularies, Vocabulary};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub images: usize,
    pub object_classes: usize,
    pub predicate_classes: usize,
    /// Zipf exponents of the class distributions.
    pub object_skew: f64,
    pub predicate_skew: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_relations: usize,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            images: 1000,
            object_classes: 150,
            predicate_classes: 50,
            object_skew: 0.6,
            predicate_skew: 0.8,
            min_objects: 2,
            max_objects: 6,
            max_relations: 8,
            test_fraction: 0.3,
            val_fraction: 0.0,
            width: 640,
            height: 480,
        }
    }
}

pub fn object_name(i: usize) -> String {
    format!("obj{i:03}")
}

pub fn predicate_name(i: usize) -> String {
    format!("pred{i:02}")
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|k| (k as f64).powf(-s))).expect("n > 0")
}

/// Generates a dataset. Class 0 is the most frequent in expectation.
pub fn generate(cfg: &SynthConfig) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = Vocabularies {
        objects: Vocabulary::new((0..cfg.object_classes).map(object_name)).expect("unique"),
        predicates: Vocabulary::new((0..cfg.predicate_classes).map(predicate_name)).expect("unique"),
    };
    let obj_dist = zipf(cfg.object_classes, cfg.object_skew);
    let pred_dist = zipf(cfg.predicate_classes, cfg.predicate_skew);
    let (w, h) = (cfg.width as f64, cfg.height as f64);

    let mut graphs = Vec::with_capacity(cfg.images);
    for i in 0..cfg.images {
        let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let objects: Vec<ObjectNode> = (0..n as u32)
            .map(|node_id| {
                let bw = rng.gen_range(16.0..(w / 2.0)).round();
                let bh = rng.gen_range(16.0..(h / 2.0)).round();
                let x = rng.gen_range(0.0..(w - bw)).round();
                let y = rng.gen_range(0.0..(h - bh)).round();
                ObjectNode {
                    node_id,
                    class: ObjectClass(obj_dist.sample(&mut rng) as u32),
                    bbox: BBox::new(x, y, bw, bh).expect("positive size"),
                }
            })
            .collect();
        let target = rng.gen_range(1..=cfg.max_relations.min(n * (n - 1)));
        let mut relations: Vec<RelationEdge> = Vec::with_capacity(target);
        let mut attempts = 0;
        while relations.len() < target && attempts < target * 10 {
            attempts += 1;
            let s = rng.gen_range(0..n as u32);
            let o = rng.gen_range(0..n as u32);
            if s == o {
                continue;
            }
            let e = RelationEdge { subject: s, predicate: Predicate(pred_dist.sample(&mut rng) as u32), object: o };
            if !relations.contains(&e) {
                relations.push(e);
            }
        }
        graphs.push(
            SceneGraph::new(format!("img{i:06}"), cfg.width, cfg.height, objects, relations)
                .expect("generator emits valid graphs"),
        );
    }

    let n = graphs.len();
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    let n_val = (n as f64 * cfg.val_fraction).round() as usize;
    let ids: Vec<String> = graphs.iter().map(|g| g.image_id.clone()).collect();
    let splits = Splits {
        train: ids[..n - n_test - n_val].to_vec(),
        val: ids[n - n_test - n_val..n - n_test].to_vec(),
        test: ids[n - n_test..].to_vec(),
    };
    Dataset::from_parts(vocab, graphs, splits)
}

/// Writes one binary PPM per image id whose file size is at least
/// `min_bytes`. Pixel content is seeded noise. Returns total bytes written.
pub fn write_placeholder_images<'a>(
    dir: &Path,
    image_ids: impl IntoIterator<Item = &'a str>,
    min_bytes: usize,
    seed: u64,
) -> Result<u64, IngestError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let side = ((min_bytes as f64 / 3.0).sqrt().ceil() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0;
    for id in image_ids {
        let mut data = format!("P6\n{side} {side}\n255\n").into_bytes();
        let start = data.len();
        data.resize(start + side * side * 3, 0);
        rng.fill(&mut data[start..]);
        let path = dir.join(format!("{id}.ppm"));
        fs::write(&path, &data).map_err(io_err(&path))?;
        total += data.len() as u64;
    }
    Ok(total)
}
