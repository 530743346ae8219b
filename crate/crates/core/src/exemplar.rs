//! Replay payload items shared by Replay@M buffers and RAS exemplar sets.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{io_err, repair_raw_graph, IngestError, RawGraph};
use crate::graph::{SceneGraph, TripletLabel, Vocabularies};

/// Where a synthesized item came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub prompt: String,
    pub source_labels: Vec<TripletLabel>,
    pub generator: String,
    pub seed: u64,
    pub checkpoint_id: String,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarItem {
    pub image_id: String,
    /// `None` for dataset images whose pixels are not on disk.
    pub image_path: Option<PathBuf>,
    pub graph: SceneGraph,
    pub provenance: Option<Provenance>,
    /// Image file bytes plus serialized annotation bytes.
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExemplarSet {
    pub items: Vec<ExemplarItem>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    image_id: String,
    image_path: Option<PathBuf>,
    graph: RawGraph,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_labels: Option<Vec<[String; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    checkpoint_id: Option<String>,
    #[serde(default)]
    low_confidence: bool,
    bytes: u64,
}

impl ExemplarItem {
    pub fn manifest_line(&self, vocab: &Vocabularies) -> String {
        let p = self.provenance.as_ref();
        let line = ManifestLine {
            image_id: self.image_id.clone(),
            image_path: self.image_path.clone(),
            graph: RawGraph::from_graph(&self.graph, vocab),
            prompt: p.map(|p| p.prompt.clone()),
            source_labels: p.map(|p| {
                p.source_labels
                    .iter()
                    .map(|t| {
                        [
                            vocab.object_name(t.subject).to_string(),
                            vocab.predicate_name(t.predicate).to_string(),
                            vocab.object_name(t.object).to_string(),
                        ]
                    })
                    .collect()
            }),
            generator: p.map(|p| p.generator.clone()),
            seed: p.map(|p| p.seed),
            checkpoint_id: p.map(|p| p.checkpoint_id.clone()),
            low_confidence: p.is_some_and(|p| p.low_confidence),
            bytes: self.bytes,
        };
        serde_json::to_string(&line).expect("serializable")
    }

    fn from_line(line: &str, vocab: &Vocabularies, file: &Path, lineno: usize) -> Result<Self, IngestError> {
        let format = |message: String| IngestError::Format { file: file.to_path_buf(), line: lineno, message };
        let m: ManifestLine = serde_json::from_str(line).map_err(|e| format(e.to_string()))?;
        let (graph, _) = repair_raw_graph(&m.graph, vocab).map_err(|e| format(e.to_string()))?;
        let provenance = match (m.prompt, m.generator, m.seed, m.checkpoint_id) {
            (Some(prompt), Some(generator), Some(seed), Some(checkpoint_id)) => {
                let source_labels = m
                    .source_labels
                    .unwrap_or_default()
                    .iter()
                    .map(|[s, p, o]| vocab.triplet(s, p, o).ok_or_else(|| format(format!("unknown label {s} {p} {o}"))))
                    .collect::<Result<_, _>>()?;
                Some(Provenance { prompt, source_labels, generator, seed, checkpoint_id, low_confidence: m.low_confidence })
            }
            _ => None,
        };
        Ok(ExemplarItem { image_id: m.image_id, image_path: m.image_path, graph, provenance, bytes: m.bytes })
    }
}

impl ExemplarSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.items.iter().map(|i| i.bytes).sum()
    }

    pub fn graphs(&self) -> impl Iterator<Item = &SceneGraph> {
        self.items.iter().map(|i| &i.graph)
    }

    pub fn to_jsonl(&self, vocab: &Vocabularies) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&item.manifest_line(vocab));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path, vocab: &Vocabularies) -> Result<(), IngestError> {
        fs::write(path, self.to_jsonl(vocab)).map_err(io_err(path))
    }

    pub fn read(path: &Path, vocab: &Vocabularies) -> Result<Self, IngestError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut items = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            items.push(ExemplarItem::from_line(&line, vocab, path, i + 1)?);
        }
        Ok(ExemplarSet { items })
    }
}

/// Appends items to a manifest file one line at a time, so an interrupted
/// build leaves a readable prefix.
pub(crate) fn append_item(path: &Path, item: &ExemplarItem, vocab: &Vocabularies) -> Result<(), IngestError> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{}", item.manifest_line(vocab)).map_err(io_err(path))
}
