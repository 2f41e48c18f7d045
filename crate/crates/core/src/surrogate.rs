//! Deterministic stand-in for model training.
//!
//! Error after each epoch is a pure function of the study seed and the full
//! per-epoch hyperparameter history, so resuming from a checkpoint produces
//! bit-identical results to training from scratch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hp::{HpAssignment, Segment};

pub const LR_KEY: &str = "lr";
pub const BATCH_KEY: &str = "batch_size";
/// Learning rate assumed when an assignment only carries a batch size.
pub const DEFAULT_LR: f64 = 0.1;

const DIGEST_SEED: u64 = 0xcbf2_9ce4_8422_2325;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("assignment {0} has neither a learning rate nor a batch size")]
    MissingHp(String),
    #[error("assignment {assignment}: {name} must be a positive number")]
    BadValue { assignment: String, name: &'static str },
    #[error("invalid surrogate parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateParams {
    pub err0: f64,
    pub err_min: f64,
    /// Per-epoch relative error reduction at perfect match.
    pub rate: f64,
    /// Width of the log-lr match window.
    pub width: f64,
    pub jitter: f64,
    pub lr_star_hi: f64,
    pub lr_star_lo: f64,
    pub batch_ref: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        SurrogateParams {
            err0: 0.9,
            err_min: 0.05,
            rate: 0.03,
            width: std::f64::consts::LN_10,
            jitter: 0.1,
            lr_star_hi: 0.4,
            lr_star_lo: 0.004,
            batch_ref: 128.0,
        }
    }
}

impl SurrogateParams {
    pub fn validate(&self) -> Result<(), SurrogateError> {
        let bad = |m: &str| Err(SurrogateError::InvalidParams(m.to_string()));
        if !(0.0 < self.err_min && self.err_min < self.err0 && self.err0 <= 1.0) {
            return bad("need 0 < err_min < err0 <= 1");
        }
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return bad("rate must be in (0, 1)");
        }
        if self.width.is_nan() || self.width <= 0.0 {
            return bad("width must be positive");
        }
        if !(self.jitter > 0.0 && self.jitter < 1.0) {
            return bad("jitter must be in (0, 1)");
        }
        if !(self.lr_star_hi > 0.0 && self.lr_star_lo > 0.0 && self.batch_ref > 0.0) {
            return bad("lr_star_hi, lr_star_lo and batch_ref must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub history_digest: u64,
    pub epochs_done: u32,
    pub error: f64,
    pub study_seed: u64,
}

impl Checkpoint {
    pub fn fresh(study_seed: u64, params: &SurrogateParams) -> Self {
        Checkpoint {
            history_digest: DIGEST_SEED,
            epochs_done: 0,
            error: params.err0,
            study_seed,
        }
    }

    pub fn validation_accuracy(&self) -> f64 {
        1.0 - self.error
    }
}

pub fn validation_accuracy(ckpt: &Checkpoint) -> f64 {
    ckpt.validation_accuracy()
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(DIGEST_SEED, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x100_0000_01b3))
}

fn unit_interval(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}

fn positive(a: &HpAssignment, name: &'static str) -> Result<Option<f64>, SurrogateError> {
    match a.get(name) {
        None => Ok(None),
        Some(v) => match v.to_f64() {
            Some(x) if x > 0.0 && x.is_finite() => Ok(Some(x)),
            _ => Err(SurrogateError::BadValue {
                assignment: a.to_string(),
                name,
            }),
        },
    }
}

/// Applies `epochs` epochs of training under `assignment`.
pub fn train(
    ckpt: &Checkpoint,
    assignment: &HpAssignment,
    epochs: u32,
    params: &SurrogateParams,
) -> Result<Checkpoint, SurrogateError> {
    let lr = positive(assignment, LR_KEY)?;
    let batch = positive(assignment, BATCH_KEY)?;
    if lr.is_none() && batch.is_none() {
        return Err(SurrogateError::MissingHp(assignment.to_string()));
    }
    let lr_eff = lr.unwrap_or(DEFAULT_LR) * params.batch_ref / batch.unwrap_or(params.batch_ref);
    let ln_lr_eff = lr_eff.ln();
    let ln_hi = params.lr_star_hi.ln();
    let ln_ratio = (params.lr_star_lo / params.lr_star_hi).ln();
    let two_var = 2.0 * params.width * params.width;
    let assignment_hash = fnv1a(assignment.to_string().as_bytes());

    let mut out = *ckpt;
    for _ in 0..epochs {
        out.history_digest = mix64(out.history_digest.rotate_left(5) ^ assignment_hash);
        let progress =
            ((params.err0 - out.error) / (params.err0 - params.err_min)).clamp(0.0, 1.0);
        let ln_target = ln_hi + progress * ln_ratio;
        let d = ln_lr_eff - ln_target;
        let matched = (-(d * d) / two_var).exp();
        let u = unit_interval(mix64(
            out.study_seed ^ mix64(out.history_digest ^ mix64(u64::from(out.epochs_done))),
        ));
        let j = 1.0 + params.jitter * (2.0 * u - 1.0);
        out.error = (out.error * (1.0 - params.rate * matched * j)).max(params.err_min);
        out.epochs_done += 1;
    }
    Ok(out)
}

pub fn train_segments(
    ckpt: &Checkpoint,
    segments: &[Segment],
    params: &SurrogateParams,
) -> Result<Checkpoint, SurrogateError> {
    segments
        .iter()
        .try_fold(*ckpt, |c, s| train(&c, &s.assignment, s.epochs, params))
}

/// Ground-truth memory footprint in MB: `500 + 2 * batch_size`.
pub fn memory_required(assignment: &HpAssignment, params: &SurrogateParams) -> f64 {
    let batch = assignment
        .get(BATCH_KEY)
        .and_then(|v| v.to_f64())
        .unwrap_or(params.batch_ref);
    500.0 + 2.0 * batch
}
