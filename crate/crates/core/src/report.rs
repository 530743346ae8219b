//! Tables, curves and summaries built from finished run directories.
//!
//! A run directory holds either a single `record.json` or one
//! `seed-<s>/record.json` per seed. Everything here reads only those files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{io_err, IngestError};
use crate::metrics::{avg_recall, forgetting, MetricsReport};
use crate::protocols::ScenarioKind;
use crate::runner::{RunError, RunRecord, RECORD_FILE, SEED_DIR_PREFIX};

pub const TABLE_COLUMNS: [&str; 6] = ["Avg.R", "F", "mR", "mF", "FWT", "BWT"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no {RECORD_FILE} under {0}")]
    NoRecords(PathBuf),
    #[error("{dir}: seeds disagree on {field}")]
    Mixed { dir: PathBuf, field: &'static str },
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

impl ReportError {
    pub fn code(&self) -> &'static str {
        match self {
            ReportError::NoRecords(_) => "NoRecords",
            ReportError::Mixed { .. } => "MixedRecords",
            ReportError::Run(e) => e.code(),
            ReportError::Ingest(e) => e.code(),
        }
    }
}

/// Reads the record of a run directory, or of each of its seed
/// subdirectories in ascending seed order.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>, ReportError> {
    let single = dir.join(RECORD_FILE);
    if single.is_file() {
        return Ok(vec![RunRecord::read(&single)?]);
    }
    let mut seeds = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(seed) = name.strip_prefix(SEED_DIR_PREFIX).and_then(|s| s.parse::<u64>().ok()) else { continue };
        let path = entry.path().join(RECORD_FILE);
        if path.is_file() {
            seeds.push((seed, path));
        }
    }
    if seeds.is_empty() {
        return Err(ReportError::NoRecords(dir.to_path_buf()));
    }
    seeds.sort();
    let records = seeds.iter().map(|(_, p)| RunRecord::read(p)).collect::<Result<Vec<_>, _>>()?;
    let first = &records[0];
    for r in &records[1..] {
        let field = if r.strategy != first.strategy {
            "strategy"
        } else if r.scenario != first.scenario {
            "scenario"
        } else if r.predictor != first.predictor {
            "predictor"
        } else {
            continue;
        };
        return Err(ReportError::Mixed { dir: dir.to_path_buf(), field });
    }
    Ok(records)
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Stat {
    /// `None` when any seed lacks the value.
    pub fn over(values: &[Option<f64>]) -> Option<Stat> {
        let v: Vec<f64> = values.iter().copied().collect::<Option<_>>()?;
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 { 0.0 } else { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
        Some(Stat { mean, sd, n })
    }
}

fn cell(s: &Option<Stat>) -> String {
    match s {
        None => "n/a".into(),
        Some(s) if s.n > 1 => format!("{:.2} ± {:.2}", s.mean, s.sd),
        Some(s) => format!("{:.2}", s.mean),
    }
}

/// Values after the last task of one seed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FinalMetrics {
    /// In [`TABLE_COLUMNS`] order.
    pub columns: [Option<f64>; 6],
    /// `(iou, R_bbox, R_rel)`.
    pub generalization: Vec<(f64, Option<f64>, Option<f64>)>,
}

pub fn final_metrics(rep: &MetricsReport, tasks: usize) -> FinalMetrics {
    let columns = [
        avg_recall(&rep.recall, tasks).ok(),
        forgetting(&rep.recall, tasks).ok(),
        avg_recall(&rep.mean_recall, tasks).ok(),
        forgetting(&rep.mean_recall, tasks).ok(),
        rep.fwt,
        rep.bwt,
    ];
    let generalization = rep
        .generalization
        .iter()
        .filter(|g| g.task == tasks)
        .map(|g| (g.iou, g.recall_bbox, g.recall_rel))
        .collect();
    FinalMetrics { columns, generalization }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenCell {
    pub iou: f64,
    pub recall_bbox: Option<Stat>,
    pub recall_rel: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub predictor: String,
    pub scenario: ScenarioKind,
    pub k: usize,
    pub seeds: Vec<u64>,
    #[serde(rename = "Avg.R")]
    pub avg_recall: Option<Stat>,
    #[serde(rename = "F")]
    pub forgetting: Option<Stat>,
    #[serde(rename = "mR")]
    pub mean_recall: Option<Stat>,
    #[serde(rename = "mF")]
    pub mean_forgetting: Option<Stat>,
    #[serde(rename = "FWT")]
    pub fwt: Option<Stat>,
    #[serde(rename = "BWT")]
    pub bwt: Option<Stat>,
    pub generalization: Vec<GenCell>,
}

impl TableRow {
    fn columns(&self) -> [&Option<Stat>; 6] {
        [&self.avg_recall, &self.forgetting, &self.mean_recall, &self.mean_forgetting, &self.fwt, &self.bwt]
    }
}

/// One point of a per-task curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub seed: u64,
    pub k: usize,
    pub task: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageRow {
    pub method: String,
    pub seed: u64,
    pub replay_bytes: Option<u64>,
    pub replay_image_bytes: Option<u64>,
    pub ras_state_bytes: Option<u64>,
    pub exemplar_cache_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub table: Vec<TableRow>,
    pub curves: Vec<CurvePoint>,
    pub storage: Vec<StorageRow>,
}

fn method_rows(records: &[RunRecord]) -> Vec<TableRow> {
    let first = &records[0];
    let method = first.strategy.to_string();
    let mut ks: Vec<usize> = first.reports.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut rows = Vec::new();
    for k in ks {
        let finals: Vec<FinalMetrics> =
            records.iter().map(|r| r.report(k).map(|rep| final_metrics(rep, r.tasks)).unwrap_or_default()).collect();
        let col = |i: usize| Stat::over(&finals.iter().map(|f| f.columns[i]).collect::<Vec<_>>());
        let generalization = finals[0]
            .generalization
            .iter()
            .map(|&(iou, _, _)| {
                let pick = |rel: bool| {
                    let v: Vec<Option<f64>> = finals
                        .iter()
                        .map(|f| {
                            f.generalization
                                .iter()
                                .find(|g| g.0 == iou)
                                .and_then(|g| if rel { g.2 } else { g.1 })
                        })
                        .collect();
                    Stat::over(&v)
                };
                GenCell { iou, recall_bbox: pick(false), recall_rel: pick(true) }
            })
            .collect();
        rows.push(TableRow {
            method: method.clone(),
            predictor: first.predictor.clone(),
            scenario: first.scenario,
            k,
            seeds: records.iter().map(|r| r.seed).collect(),
            avg_recall: col(0),
            forgetting: col(1),
            mean_recall: col(2),
            mean_forgetting: col(3),
            fwt: col(4),
            bwt: col(5),
            generalization,
        });
    }
    rows
}

fn method_curves(records: &[RunRecord], out: &mut Vec<CurvePoint>) {
    for rec in records {
        let method = rec.strategy.to_string();
        for rep in &rec.reports {
            let mut push = |task: usize, metric: String, value: Option<f64>| {
                if let Some(value) = value {
                    out.push(CurvePoint { method: method.clone(), seed: rec.seed, k: rep.k, task, metric, value });
                }
            };
            for t in 1..=rec.tasks {
                push(t, "Avg.R".into(), avg_recall(&rep.recall, t).ok());
                push(t, "F".into(), forgetting(&rep.recall, t).ok());
                push(t, "mR".into(), avg_recall(&rep.mean_recall, t).ok());
                push(t, "mF".into(), forgetting(&rep.mean_recall, t).ok());
                if let Some(tm) = rep.tasks.iter().find(|m| m.task == t) {
                    push(t, "cumulative R".into(), tm.cumulative_recall);
                    if let Some(mr) = &tm.mean_recall {
                        push(t, "cumulative mR".into(), Some(mr.mean));
                        push(t, "cumulative mR head".into(), mr.head);
                        push(t, "cumulative mR body".into(), mr.body);
                        push(t, "cumulative mR tail".into(), mr.tail);
                    }
                }
                for j in 1..=t {
                    push(t, format!("R[{t}][{j}]"), rep.recall.get(t, j).ok());
                }
                for g in rep.generalization.iter().filter(|g| g.task == t) {
                    push(t, format!("Gen R_bbox@{}", g.iou), g.recall_bbox);
                    push(t, format!("Gen R@{}", g.iou), g.recall_rel);
                }
            }
        }
    }
}

/// Builds the report for one or more run directories, one method each.
pub fn build_report(dirs: &[PathBuf]) -> Result<ReportBundle, ReportError> {
    let mut bundle = ReportBundle { table: Vec::new(), curves: Vec::new(), storage: Vec::new() };
    for dir in dirs {
        let records = load_records(dir)?;
        bundle.table.extend(method_rows(&records));
        method_curves(&records, &mut bundle.curves);
        for r in &records {
            bundle.storage.push(StorageRow {
                method: r.strategy.to_string(),
                seed: r.seed,
                replay_bytes: r.storage.replay_bytes,
                replay_image_bytes: r.storage.replay_image_bytes,
                ras_state_bytes: r.storage.ras_state_bytes,
                exemplar_cache_bytes: r.storage.exemplar_cache_bytes,
            });
        }
    }
    Ok(bundle)
}

fn gen_ious(table: &[TableRow]) -> Vec<f64> {
    let mut ious: Vec<f64> = table.iter().flat_map(|r| r.generalization.iter().map(|g| g.iou)).collect();
    ious.sort_by(f64::total_cmp);
    ious.dedup();
    ious
}

fn csv_string(rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

impl ReportBundle {
    fn table_grid(&self) -> Vec<Vec<String>> {
        let ious = gen_ious(&self.table);
        let mut header: Vec<String> = vec!["Method".into(), "K".into()];
        header.extend(TABLE_COLUMNS.iter().map(|c| c.to_string()));
        for iou in &ious {
            header.push(format!("Gen R_bbox@{iou}"));
            header.push(format!("Gen R@{iou}"));
        }
        let mut grid = vec![header];
        for row in &self.table {
            let mut line = vec![row.method.clone(), row.k.to_string()];
            line.extend(row.columns().iter().map(|s| cell(s)));
            for iou in &ious {
                let g = row.generalization.iter().find(|g| g.iou == *iou);
                line.push(cell(&g.and_then(|g| g.recall_bbox)));
                line.push(cell(&g.and_then(|g| g.recall_rel)));
            }
            grid.push(line);
        }
        grid
    }

    pub fn table_csv(&self) -> String {
        csv_string(self.table_grid())
    }

    pub fn table_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.table).expect("serializable");
        s.push('\n');
        s
    }

    pub fn curves_csv(&self) -> String {
        let mut rows = vec![["method", "seed", "k", "task", "metric", "value"].map(String::from).to_vec()];
        for p in &self.curves {
            rows.push(vec![
                p.method.clone(),
                p.seed.to_string(),
                p.k.to_string(),
                p.task.to_string(),
                p.metric.clone(),
                p.value.to_string(),
            ]);
        }
        csv_string(rows)
    }

    pub fn storage_csv(&self) -> String {
        let opt = |v: Option<u64>| v.map(|b| b.to_string()).unwrap_or_default();
        let mut rows = vec![[
            "method",
            "seed",
            "replay_bytes",
            "replay_image_bytes",
            "ras_state_bytes",
            "exemplar_cache_bytes",
        ]
        .map(String::from)
        .to_vec()];
        for s in &self.storage {
            rows.push(vec![
                s.method.clone(),
                s.seed.to_string(),
                opt(s.replay_bytes),
                opt(s.replay_image_bytes),
                opt(s.ras_state_bytes),
                opt(s.exemplar_cache_bytes),
            ]);
        }
        csv_string(rows)
    }

    /// Plain-text summary: the table with aligned columns, then storage.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let mut methods: Vec<(&str, &str, ScenarioKind, &[u64])> = Vec::new();
        for r in &self.table {
            if !methods.iter().any(|m| m.0 == r.method && m.1 == r.predictor) {
                methods.push((&r.method, &r.predictor, r.scenario, &r.seeds));
            }
        }
        for (m, p, s, seeds) in &methods {
            let seeds: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
            let _ = writeln!(out, "{m}: scenario {s}, predictor {p}, seeds {}", seeds.join(","));
        }
        out.push('\n');
        let grid = self.table_grid();
        let widths: Vec<usize> =
            (0..grid[0].len()).map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        for row in &grid {
            let cells: Vec<String> =
                row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}", w = *w)).collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        let bytes = |v: Option<u64>| v.map(|b| format!("{b} bytes")).unwrap_or_else(|| "n/a".into());
        let mut first = true;
        for s in &self.storage {
            if s.replay_bytes.is_none() && s.ras_state_bytes.is_none() {
                continue;
            }
            if first {
                out.push_str("\nstorage\n");
                first = false;
            }
            if s.replay_bytes.is_some() {
                let _ = writeln!(
                    out,
                    "{} seed {}: replay buffer {} (images {})",
                    s.method,
                    s.seed,
                    bytes(s.replay_bytes),
                    bytes(s.replay_image_bytes)
                );
            }
            if s.ras_state_bytes.is_some() {
                let _ = writeln!(
                    out,
                    "{} seed {}: persisted state {} (regenerable image cache {})",
                    s.method,
                    s.seed,
                    bytes(s.ras_state_bytes),
                    bytes(s.exemplar_cache_bytes)
                );
            }
        }
        out
    }

    /// Writes `table.csv`, `table.json`, `curves.csv`, `storage.csv` and
    /// `summary.txt` into `out`.
    pub fn write(&self, out: &Path) -> Result<(), ReportError> {
        fs::create_dir_all(out).map_err(io_err(out))?;
        for (name, text) in [
            ("table.csv", self.table_csv()),
            ("table.json", self.table_json()),
            ("curves.csv", self.curves_csv()),
            ("storage.csv", self.storage_csv()),
            ("summary.txt", self.summary()),
        ] {
            let path = out.join(name);
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_uses_sample_deviation() {
        let s = Stat::over(&[Some(1.0), Some(2.0), Some(3.0)]).unwrap();
        assert_eq!((s.mean, s.sd, s.n), (2.0, 1.0, 3));
        assert_eq!(Stat::over(&[Some(4.0)]).unwrap().sd, 0.0);
        assert_eq!(Stat::over(&[Some(1.0), None]), None);
        assert_eq!(Stat::over(&[]), None);
    }

    #[test]
    fn cells() {
        assert_eq!(cell(&None), "n/a");
        assert_eq!(cell(&Stat::over(&[Some(12.345)])), "12.35");
        assert_eq!(cell(&Stat::over(&[Some(1.0), Some(3.0)])), "2.00 ± 1.41");
    }

    #[test]
    fn csv_quotes_when_needed() {
        let s = csv_string(vec![vec!["a,b".into(), "c".into()]]);
        assert_eq!(s, "\"a,b\",c\n");
    }
}
