//! The triplet universe: every triplet label seen so far, with its
//! cumulative frequency and the task that introduced it.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::dataset::{io_err, IngestError};
use crate::graph::{SceneGraph, TripletLabel, Vocabularies, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UniverseEntry {
    pub frequency: u64,
    pub first_task: usize,
}

/// Labels in first-seen order. Labels are never removed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletUniverse {
    entries: IndexMap<TripletLabel, UniverseEntry>,
}

/// One persisted label: `[subject, predicate, object, frequency, task]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniverseRow(pub String, pub String, pub String, pub u64, pub usize);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniverseFile {
    pub labels: Vec<UniverseRow>,
}

impl UniverseFile {
    /// Vocabularies made of the names in the file, in first-seen order.
    pub fn vocab(&self) -> Vocabularies {
        let mut objects: IndexMap<&str, ()> = IndexMap::new();
        let mut predicates: IndexMap<&str, ()> = IndexMap::new();
        for UniverseRow(s, p, o, _, _) in &self.labels {
            objects.insert(s, ());
            predicates.insert(p, ());
            objects.insert(o, ());
        }
        Vocabularies {
            objects: Vocabulary::new(objects.keys().copied()).expect("keys are unique"),
            predicates: Vocabulary::new(predicates.keys().copied()).expect("keys are unique"),
        }
    }
}

impl TripletUniverse {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, label: TripletLabel, count: u64, task: usize) {
        self.entries
            .entry(label)
            .and_modify(|e| e.frequency += count)
            .or_insert(UniverseEntry { frequency: count, first_task: task });
    }

    /// Accumulates the triplets of one task's graphs.
    pub fn update<'a>(&mut self, graphs: impl IntoIterator<Item = &'a SceneGraph>, task: usize) {
        for g in graphs {
            for t in g.triplets() {
                self.add(t, 1, task);
            }
        }
    }

    pub fn frequency(&self, label: &TripletLabel) -> u64 {
        self.entries.get(label).map_or(0, |e| e.frequency)
    }

    pub fn get(&self, label: &TripletLabel) -> Option<&UniverseEntry> {
        self.entries.get(label)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TripletLabel, &UniverseEntry)> {
        self.entries.iter()
    }

    pub fn labels(&self) -> impl Iterator<Item = &TripletLabel> {
        self.entries.keys()
    }

    pub fn index_of(&self, label: &TripletLabel) -> Option<usize> {
        self.entries.get_index_of(label)
    }

    pub fn to_file(&self, vocab: &Vocabularies) -> UniverseFile {
        UniverseFile {
            labels: self
                .entries
                .iter()
                .map(|(l, e)| {
                    UniverseRow(
                        vocab.object_name(l.subject).to_string(),
                        vocab.predicate_name(l.predicate).to_string(),
                        vocab.object_name(l.object).to_string(),
                        e.frequency,
                        e.first_task,
                    )
                })
                .collect(),
        }
    }

    pub fn from_file(file: &UniverseFile, vocab: &Vocabularies) -> Result<Self, String> {
        let mut u = TripletUniverse::new();
        for UniverseRow(s, p, o, f, task) in &file.labels {
            let label = vocab.triplet(s, p, o).ok_or_else(|| format!("unknown label {s:?} {p:?} {o:?}"))?;
            if *f == 0 {
                return Err(format!("label {s:?} {p:?} {o:?} has zero frequency"));
            }
            u.add(label, *f, *task);
        }
        Ok(u)
    }

    /// Compact JSON, one object per file.
    pub fn write(&self, path: &Path, vocab: &Vocabularies) -> Result<(), IngestError> {
        let text = serde_json::to_string(&self.to_file(vocab)).expect("serializable");
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn read_file(path: &Path) -> Result<UniverseFile, IngestError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| IngestError::Format {
            file: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}
