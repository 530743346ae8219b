//! Forgetting and transfer aggregates over a recall matrix.

use serde::{Deserialize, Serialize};

use super::MetricsError;

/// `values[i][j]`: recall of the model after task `i` on test set `j`,
/// 1-based in the accessors. Unfilled cells are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallMatrix {
    pub values: Vec<Vec<Option<f64>>>,
    /// Scratch-model diagonal `b[i]`, when measured.
    pub baselines: Option<Vec<Option<f64>>>,
}

impl RecallMatrix {
    pub fn new(tasks: usize) -> Self {
        Self { values: vec![vec![None; tasks]; tasks], baselines: None }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let t = rows.len();
        let mut m = Self::new(t);
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate().take(t) {
                m.values[i][j] = Some(*v);
            }
        }
        m
    }

    pub fn tasks(&self) -> usize {
        self.values.len()
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i - 1][j - 1] = Some(v);
    }

    pub fn get(&self, i: usize, j: usize) -> Result<f64, MetricsError> {
        self.values
            .get(i.wrapping_sub(1))
            .and_then(|r| r.get(j.wrapping_sub(1)))
            .copied()
            .flatten()
            .ok_or(MetricsError::MissingCell(i, j))
    }

    pub fn set_baseline(&mut self, i: usize, v: f64) {
        let t = self.tasks();
        self.baselines.get_or_insert_with(|| vec![None; t])[i - 1] = Some(v);
    }
}

/// `F(t) = R[t][1] - R[1][1]`.
pub fn forgetting(m: &RecallMatrix, t: usize) -> Result<f64, MetricsError> {
    Ok(m.get(t, 1)? - m.get(1, 1)?)
}

/// Mean of `R[t][1..=t]`.
pub fn avg_recall(m: &RecallMatrix, t: usize) -> Result<f64, MetricsError> {
    if t == 0 {
        return Err(MetricsError::MissingCell(0, 0));
    }
    let mut sum = 0.0;
    for i in 1..=t {
        sum += m.get(t, i)?;
    }
    Ok(sum / t as f64)
}

/// `1/(T-1) * sum_{i<T} (R[T][i] - R[i][i])`.
pub fn bwt(m: &RecallMatrix) -> Result<f64, MetricsError> {
    let t = m.tasks();
    if t < 2 {
        return Err(MetricsError::MissingCell(2, 1));
    }
    let mut sum = 0.0;
    for i in 1..t {
        sum += m.get(t, i)? - m.get(i, i)?;
    }
    Ok(sum / (t - 1) as f64)
}

/// `1/(T-1) * sum_{i>=2} (R[i][i] - b[i])`.
pub fn fwt(m: &RecallMatrix) -> Result<f64, MetricsError> {
    let t = m.tasks();
    if t < 2 {
        return Err(MetricsError::MissingCell(2, 2));
    }
    let b = m.baselines.as_ref().ok_or(MetricsError::MissingBaseline(2))?;
    let mut sum = 0.0;
    for i in 2..=t {
        let bi = b.get(i - 1).copied().flatten().ok_or(MetricsError::MissingBaseline(i))?;
        sum += m.get(i, i)? - bi;
    }
    Ok(sum / (t - 1) as f64)
}
