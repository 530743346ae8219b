//! Replay@M buffer selection and the EWC and PackNet arithmetic on flat
//! parameter vectors exchanged with external trainers through files.
//!
//! Vector file: u64 little-endian length, then that many f64 little-endian
//! values. Several vectors may be concatenated in one file.
//! Mask file: u64 little-endian length, then one u16 little-endian owner
//! per parameter (0 = free, k = owned by task k).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exemplar::{ExemplarItem, ExemplarSet};
use crate::dataset::RawGraph;
use crate::graph::{SceneGraph, Vocabularies};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no gradient samples")]
    NoSamples,
    #[error("no free parameters left to prune")]
    NoFreeParameters,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionPolicy {
    #[default]
    Uniform,
    Reservoir,
}

/// Finds `<dir>/<id>.<ext>` for the usual image extensions.
pub fn image_file(dir: &Path, image_id: &str) -> Option<PathBuf> {
    ["jpg", "jpeg", "png", "ppm"].iter().map(|e| dir.join(format!("{image_id}.{e}"))).find(|p| p.is_file())
}

/// Serialized annotation bytes plus the image file size when present.
pub fn item_bytes(g: &SceneGraph, image_path: Option<&Path>, vocab: &Vocabularies) -> u64 {
    let ann = serde_json::to_string(&RawGraph::from_graph(g, vocab)).expect("serializable").len() as u64 + 1;
    ann + image_path.and_then(|p| fs::metadata(p).ok()).map_or(0, |m| m.len())
}

/// Keeps `floor(M% * N)` of the task's graphs, sampled without replacement;
/// M = 100 keeps everything in order. Output follows dataset order.
pub fn select_replay<R: Rng + ?Sized>(
    graphs: &[SceneGraph],
    m_percent: f64,
    policy: SelectionPolicy,
    rng: &mut R,
    image_dir: Option<&Path>,
    vocab: &Vocabularies,
) -> Result<ExemplarSet, BaselineError> {
    if !(m_percent > 0.0 && m_percent <= 100.0) {
        return Err(BaselineError::InvalidParameter(format!("M must be in (0, 100], got {m_percent}")));
    }
    let n = graphs.len();
    let cap = ((m_percent / 100.0) * n as f64 + 1e-9).floor() as usize;
    let mut chosen: Vec<usize> = if cap >= n {
        (0..n).collect()
    } else {
        match policy {
            SelectionPolicy::Uniform => sample(rng, n, cap).into_vec(),
            SelectionPolicy::Reservoir => {
                let mut r: Vec<usize> = (0..cap).collect();
                for i in cap..n {
                    let j = rng.gen_range(0..=i);
                    if j < cap {
                        r[j] = i;
                    }
                }
                r
            }
        }
    };
    chosen.sort_unstable();
    let items = chosen
        .into_iter()
        .map(|i| {
            let g = &graphs[i];
            let image_path = image_dir.and_then(|d| image_file(d, &g.image_id));
            ExemplarItem {
                image_id: g.image_id.clone(),
                bytes: item_bytes(g, image_path.as_deref(), vocab),
                image_path,
                graph: g.clone(),
                provenance: None,
            }
        })
        .collect();
    Ok(ExemplarSet { items })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

/// Diagonal Fisher approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag(pub Vec<f64>);

/// Mean over samples of the elementwise squared gradient.
pub fn fisher_diag(grads: &[ParamVector]) -> Result<FisherDiag, BaselineError> {
    let first = grads.first().ok_or(BaselineError::NoSamples)?;
    let n = first.0.len();
    let mut acc = vec![0.0; n];
    for g in grads {
        if g.0.len() != n {
            return Err(BaselineError::LengthMismatch(n, g.0.len()));
        }
        for (a, x) in acc.iter_mut().zip(&g.0) {
            *a += x * x;
        }
    }
    let m = grads.len() as f64;
    Ok(FisherDiag(acc.into_iter().map(|a| a / m).collect()))
}

/// `sum_i F_i (W_i - W*_i)^2`.
pub fn ewc_penalty(w: &ParamVector, w_star: &ParamVector, f: &FisherDiag) -> Result<f64, BaselineError> {
    if w.0.len() != w_star.0.len() {
        return Err(BaselineError::LengthMismatch(w.0.len(), w_star.0.len()));
    }
    if w.0.len() != f.0.len() {
        return Err(BaselineError::LengthMismatch(w.0.len(), f.0.len()));
    }
    Ok(w.0.iter().zip(&w_star.0).zip(&f.0).map(|((a, b), fi)| fi * (a - b) * (a - b)).sum())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask(pub Vec<u16>);

impl PruneMask {
    pub fn all_free(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn free_count(&self) -> usize {
        self.0.iter().filter(|o| **o == 0).count()
    }
}

/// Gives task `task` the top `ceil(keep_fraction * free)` free parameters
/// by magnitude (ties to the lower index). Owned entries never change.
pub fn packnet_prune(w: &ParamVector, mask: &PruneMask, keep_fraction: f64, task: u16) -> Result<PruneMask, BaselineError> {
    if w.0.len() != mask.0.len() {
        return Err(BaselineError::LengthMismatch(w.0.len(), mask.0.len()));
    }
    if !(keep_fraction > 0.0 && keep_fraction < 1.0) {
        return Err(BaselineError::InvalidParameter(format!("keep_fraction must be in (0, 1), got {keep_fraction}")));
    }
    if task == 0 {
        return Err(BaselineError::InvalidParameter("task ids start at 1".into()));
    }
    let mut free: Vec<usize> = (0..w.0.len()).filter(|&i| mask.0[i] == 0).collect();
    if free.is_empty() {
        return Err(BaselineError::NoFreeParameters);
    }
    let keep = (keep_fraction * free.len() as f64).ceil() as usize;
    free.sort_by(|&a, &b| w.0[b].abs().total_cmp(&w.0[a].abs()).then(a.cmp(&b)));
    let mut out = mask.clone();
    for &i in &free[..keep] {
        out.0[i] = task;
    }
    Ok(out)
}

fn file_err(path: &Path) -> impl Fn(String) -> BaselineError + '_ {
    move |message| BaselineError::File { path: path.to_path_buf(), message }
}

fn read_len(bytes: &[u8], at: usize) -> Option<usize> {
    Some(u64::from_le_bytes(bytes.get(at..at + 8)?.try_into().ok()?) as usize)
}

pub fn write_param_vectors(path: &Path, vectors: &[ParamVector]) -> Result<(), BaselineError> {
    let mut out = Vec::new();
    for v in vectors {
        out.extend_from_slice(&(v.0.len() as u64).to_le_bytes());
        for x in &v.0 {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| file_err(path)(e.to_string()))
}

pub fn read_param_vectors(path: &Path) -> Result<Vec<ParamVector>, BaselineError> {
    let err = file_err(path);
    let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
    let mut at = 0;
    let mut out = Vec::new();
    while at < bytes.len() {
        let n = read_len(&bytes, at).ok_or_else(|| err("truncated length header".into()))?;
        at += 8;
        let body = bytes.get(at..at + n * 8).ok_or_else(|| err(format!("expected {n} values")))?;
        let v: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        out.push(ParamVector(v));
        at += n * 8;
    }
    Ok(out)
}

pub fn write_mask(path: &Path, mask: &PruneMask) -> Result<(), BaselineError> {
    let mut out = (mask.0.len() as u64).to_le_bytes().to_vec();
    for o in &mask.0 {
        out.extend_from_slice(&o.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| file_err(path)(e.to_string()))
}

pub fn read_mask(path: &Path) -> Result<PruneMask, BaselineError> {
    let err = file_err(path);
    let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
    let n = read_len(&bytes, 0).ok_or_else(|| err("truncated length header".into()))?;
    if bytes.len() != 8 + 2 * n {
        return Err(err(format!("expected {n} entries")));
    }
    Ok(PruneMask(bytes[8..].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()))
}
