//! Conversion of raw Visual Genome release files into the dataset layout.
//!
//! Reads `image_data.json` and `relationships.json` (and `objects.json`
//! when present) from the raw directory. Class names are lower-cased and
//! whitespace-normalized; only the `max_object_classes` most frequent
//! object names and `max_predicate_classes` most frequent predicates are
//! kept (150 and 50 by default, the usual VG scene-graph filtering).
//! Relations touching a dropped class are removed, and images left without
//! objects are skipped.
//!
//! When the raw directory has a `splits.json` it is used verbatim.
//! Otherwise images are ordered by numeric id: the last 30% form `test`,
//! and the last `min(5000, 5%)` of the remainder form `val`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::dataset::{repair_raw_graph, Dataset, IngestError, RawGraph, RawObject, RawRelation, Splits};
use crate::graph::{GraphError, Vocabularies, Vocabulary};

#[derive(Debug, Clone)]
pub struct ConvertOptions {
    pub max_object_classes: usize,
    pub max_predicate_classes: usize,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self { max_object_classes: 150, max_predicate_classes: 50 }
    }
}

#[derive(Debug, Deserialize)]
struct VgImage {
    image_id: u64,
    width: u32,
    height: u32,
}

#[derive(Debug, Deserialize)]
struct VgObject {
    object_id: u64,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    #[serde(default)]
    names: Vec<String>,
    #[serde(default)]
    name: Option<String>,
}

impl VgObject {
    fn class_name(&self) -> Option<String> {
        self.names.first().or(self.name.as_ref()).map(|n| normalize(n)).filter(|n| !n.is_empty())
    }
}

#[derive(Debug, Deserialize)]
struct VgRelationship {
    predicate: String,
    subject: VgObject,
    object: VgObject,
}

#[derive(Debug, Deserialize)]
struct VgImageRelationships {
    image_id: u64,
    relationships: Vec<VgRelationship>,
}

#[derive(Debug, Deserialize)]
struct VgImageObjects {
    image_id: u64,
    objects: Vec<VgObject>,
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn read_raw<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IngestError> {
    let file = fs::File::open(path).map_err(|e| IngestError::Format {
        file: path.to_path_buf(),
        line: 0,
        message: format!("cannot open raw file: {e}"),
    })?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| IngestError::Format {
        file: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Most frequent names first, ties by name; at most `limit` names.
fn top_names(counts: &HashMap<String, u64>, limit: usize) -> Vec<String> {
    let mut v: Vec<(&String, &u64)> = counts.iter().collect();
    v.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    v.into_iter().take(limit).map(|(n, _)| n.clone()).collect()
}

pub fn convert_visual_genome(raw_dir: &Path, opts: &ConvertOptions) -> Result<Dataset, IngestError> {
    let images: Vec<VgImage> = read_raw(&raw_dir.join("image_data.json"))?;
    let rels: Vec<VgImageRelationships> = read_raw(&raw_dir.join("relationships.json"))?;
    let objects_path = raw_dir.join("objects.json");
    let extra_objects: Vec<VgImageObjects> =
        if objects_path.exists() { read_raw(&objects_path)? } else { Vec::new() };

    // image -> object_id -> (name, box), in object_id order
    let mut per_image: BTreeMap<u64, BTreeMap<u64, (String, [f64; 4])>> = BTreeMap::new();
    let mut per_image_rels: BTreeMap<u64, Vec<(u64, String, u64)>> = BTreeMap::new();
    let mut obj_counts: HashMap<String, u64> = HashMap::new();
    let mut pred_counts: HashMap<String, u64> = HashMap::new();

    let mut add_object = |image: u64, o: &VgObject, table: &mut BTreeMap<u64, BTreeMap<u64, (String, [f64; 4])>>| {
        if let Some(name) = o.class_name() {
            let objs = table.entry(image).or_default();
            if !objs.contains_key(&o.object_id) {
                *obj_counts.entry(name.clone()).or_insert(0) += 1;
                objs.insert(o.object_id, (name, [o.x, o.y, o.w, o.h]));
            }
        }
    };
    for entry in &extra_objects {
        for o in &entry.objects {
            add_object(entry.image_id, o, &mut per_image);
        }
    }
    for entry in &rels {
        for r in &entry.relationships {
            add_object(entry.image_id, &r.subject, &mut per_image);
            add_object(entry.image_id, &r.object, &mut per_image);
            let p = normalize(&r.predicate);
            if p.is_empty() {
                continue;
            }
            *pred_counts.entry(p.clone()).or_insert(0) += 1;
            per_image_rels.entry(entry.image_id).or_default().push((r.subject.object_id, p, r.object.object_id));
        }
    }

    let objects_vocab = top_names(&obj_counts, opts.max_object_classes);
    let predicates_vocab = top_names(&pred_counts, opts.max_predicate_classes);
    let vocab_err = |e: GraphError| IngestError::Format {
        file: raw_dir.to_path_buf(),
        line: 0,
        message: e.to_string(),
    };
    let vocab = Vocabularies {
        objects: Vocabulary::new(objects_vocab).map_err(vocab_err)?,
        predicates: Vocabulary::new(predicates_vocab).map_err(vocab_err)?,
    };

    let mut graphs = Vec::new();
    let mut sorted_images: Vec<&VgImage> = images.iter().collect();
    sorted_images.sort_by_key(|i| i.image_id);
    for img in sorted_images {
        let Some(objs) = per_image.get(&img.image_id) else { continue };
        // VG object ids are global; local node ids are positions.
        let mut local = HashMap::new();
        let mut raw_objects = Vec::new();
        for (oid, (name, bbox)) in objs {
            if vocab.objects.id(name).is_some() {
                local.insert(*oid, raw_objects.len() as u32);
                raw_objects.push(RawObject { id: raw_objects.len() as u32, class: name.clone(), bbox: *bbox });
            }
        }
        let relations = per_image_rels
            .get(&img.image_id)
            .map(|rs| {
                rs.iter()
                    .filter(|(_, p, _)| vocab.predicates.id(p).is_some())
                    .filter_map(|(s, p, o)| {
                        Some(RawRelation { subject: *local.get(s)?, predicate: p.clone(), object: *local.get(o)? })
                    })
                    .collect()
            })
            .unwrap_or_default();
        let raw = RawGraph {
            image_id: img.image_id.to_string(),
            width: img.width,
            height: img.height,
            objects: raw_objects,
            relations,
        };
        match repair_raw_graph(&raw, &vocab) {
            Ok((g, _)) => graphs.push(g),
            Err(e) => log::debug!("skipping image {}: {e}", raw.image_id),
        }
    }
    if graphs.is_empty() {
        return Err(IngestError::EmptyDataset(raw_dir.to_path_buf()));
    }

    let splits_path = raw_dir.join("splits.json");
    let splits = if splits_path.exists() {
        read_raw::<Splits>(&splits_path)?
    } else {
        let ids: Vec<String> = graphs.iter().map(|g| g.image_id.clone()).collect();
        let n = ids.len();
        let n_test = (n as f64 * 0.3).round() as usize;
        let n_trainval = n - n_test;
        let n_val = 5000.min((n as f64 * 0.05).round() as usize).min(n_trainval.saturating_sub(1));
        Splits {
            train: ids[..n_trainval - n_val].to_vec(),
            val: ids[n_trainval - n_val..n_trainval].to_vec(),
            test: ids[n_trainval..].to_vec(),
        }
    };
    Ok(Dataset::from_parts(vocab, graphs, splits))
}
