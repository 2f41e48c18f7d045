//! Online GPU-count estimation from observed stage memory.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EstimatorError {
    #[error("stage needs more than {limit} GPUs")]
    Unsatisfiable { limit: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub batch_size: u64,
    pub observed_mem_mb: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub slope: f64,
    pub n_observations: usize,
}

impl LinearModel {
    pub fn predict(&self, batch_size: u64) -> f64 {
        self.intercept + self.slope * batch_size as f64
    }
}

/// Ordinary least squares of memory on batch size. `None` when fewer than
/// two distinct batch sizes have been seen.
pub fn fit(records: &[ProfileRecord]) -> Option<LinearModel> {
    let first = records.first()?.batch_size;
    if records.iter().all(|r| r.batch_size == first) {
        return None;
    }
    let n = records.len() as f64;
    let mean_x = records.iter().map(|r| r.batch_size as f64).sum::<f64>() / n;
    let mean_y = records.iter().map(|r| r.observed_mem_mb).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for r in records {
        let dx = r.batch_size as f64 - mean_x;
        sxy += dx * (r.observed_mem_mb - mean_y);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    Some(LinearModel {
        intercept: mean_y - slope * mean_x,
        slope,
        n_observations: records.len(),
    })
}

/// GPUs needed for `batch_size`; one GPU while the model is undefined.
pub fn estimate_gpus(batch_size: u64, model: Option<&LinearModel>, gpu_capacity_mb: f64) -> u32 {
    let Some(m) = model else { return 1 };
    let predicted = m.predict(batch_size).max(gpu_capacity_mb * 1e-6);
    ((predicted / gpu_capacity_mb).ceil() as u32).max(1)
}

/// Next GPU count after an out-of-memory failure.
pub fn escalate(previous: u32, limit: u32) -> Result<u32, EstimatorError> {
    let next = previous.max(1) + 1;
    if next > limit {
        Err(EstimatorError::Unsatisfiable { limit })
    } else {
        Ok(next)
    }
}

/// Profile history plus the model fitted to it.
#[derive(Debug, Clone, Default)]
pub struct ResourceEstimator {
    records: Vec<ProfileRecord>,
    model: Option<LinearModel>,
}

impl ResourceEstimator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, record: ProfileRecord) {
        self.records.push(record);
        self.model = fit(&self.records);
    }

    pub fn model(&self) -> Option<&LinearModel> {
        self.model.as_ref()
    }

    pub fn records(&self) -> &[ProfileRecord] {
        &self.records
    }

    pub fn estimate_gpus(&self, batch_size: u64, gpu_capacity_mb: f64) -> u32 {
        estimate_gpus(batch_size, self.model.as_ref(), gpu_capacity_mb)
    }
}
