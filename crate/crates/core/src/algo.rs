//! Trial-set generation and early stopping: random discrete search,
//! synchronous successive halving (SHA) and its asynchronous variant (ASHA).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hp::{
    numbered_trial_id, point_segments, HpError, HpKind, HpValue, ScheduleTemplate, TrialId,
    TrialSpec,
};
use crate::tree::Stage;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AlgoError {
    #[error("no priority for trial {0}")]
    MissingPriority(TrialId),
    #[error("stage has no covering trials")]
    Uncovered,
    #[error("invalid algorithm parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Hp(#[from] HpError),
}

/// Synchronous successive-halving rungs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RungSpec {
    pub rung_epochs: Vec<u32>,
    pub eta: u32,
}

impl RungSpec {
    pub fn validate(&self, horizon: u32) -> Result<(), AlgoError> {
        if self.eta < 2 {
            return Err(AlgoError::InvalidParams("eta must be at least 2".into()));
        }
        if self.rung_epochs.is_empty() {
            return Err(AlgoError::InvalidParams("rung_epochs is empty".into()));
        }
        if self.rung_epochs[0] == 0 || self.rung_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AlgoError::InvalidParams(
                "rung_epochs must be positive and strictly increasing".into(),
            ));
        }
        if *self.rung_epochs.last().unwrap() >= horizon {
            return Err(AlgoError::InvalidParams(format!(
                "rung epochs must be below the horizon {horizon}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AshaParams {
    /// Maximum resource per trial, in epochs (R).
    pub max_resource: u32,
    /// Minimum resource, in epochs (r).
    pub min_resource: u32,
    pub eta: u32,
    /// Minimum early-stopping rate (s).
    #[serde(default)]
    pub min_early_stopping_rate: u32,
}

impl AshaParams {
    pub fn validate(&self) -> Result<(), AlgoError> {
        let bad = |m: &str| Err(AlgoError::InvalidParams(m.to_string()));
        if self.eta < 2 {
            return bad("eta must be at least 2");
        }
        if self.min_resource == 0 {
            return bad("min_resource must be positive");
        }
        let floor = u64::from(self.eta)
            .checked_pow(self.min_early_stopping_rate)
            .and_then(|p| p.checked_mul(u64::from(self.min_resource)));
        match floor {
            Some(f) if f <= u64::from(self.max_resource) => Ok(()),
            _ => bad("max_resource must be at least min_resource * eta^s"),
        }
    }

    /// Epoch budgets per rung: `r * eta^(s+k)` below `R`, then `R`.
    pub fn rung_budgets(&self) -> Vec<u32> {
        let mut out = Vec::new();
        let mut b = u64::from(self.min_resource)
            * u64::from(self.eta).pow(self.min_early_stopping_rate);
        while b < u64::from(self.max_resource) {
            out.push(b as u32);
            b *= u64::from(self.eta);
        }
        out.push(self.max_resource);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Algorithm {
    /// Every trial runs to completion.
    Exhaustive,
    Sha(RungSpec),
    Asha(AshaParams),
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Exhaustive => "exhaustive",
            Algorithm::Sha(_) => "sha",
            Algorithm::Asha(_) => "asha",
        }
    }

    /// Epochs at which trials may pause for an algorithm decision.
    pub fn decision_epochs(&self) -> Vec<u32> {
        match self {
            Algorithm::Exhaustive => Vec::new(),
            Algorithm::Sha(r) => r.rung_epochs.clone(),
            Algorithm::Asha(p) => {
                let mut b = p.rung_budgets();
                b.pop();
                b
            }
        }
    }

    pub fn validate(&self, horizon: u32) -> Result<(), AlgoError> {
        match self {
            Algorithm::Exhaustive => Ok(()),
            Algorithm::Sha(r) => r.validate(horizon),
            Algorithm::Asha(p) => p.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PruneDecision {
    pub at_epoch: u32,
    pub surviving: BTreeSet<TrialId>,
    pub stopped: BTreeSet<TrialId>,
}

/// Best first: higher accuracy, then smaller trial id.
fn rank(a: &(&TrialId, f64), b: &(&TrialId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Keeps the top `ceil(n / eta)` trials by accuracy.
pub fn sha_rung_decision(scores: &BTreeMap<TrialId, f64>, eta: u32, at_epoch: u32) -> PruneDecision {
    let mut ranked: Vec<(&TrialId, f64)> = scores.iter().map(|(t, s)| (t, *s)).collect();
    ranked.sort_by(rank);
    let keep = ranked.len().div_ceil(eta.max(1) as usize);
    let surviving = ranked[..keep].iter().map(|(t, _)| (*t).clone()).collect();
    let stopped = ranked[keep..].iter().map(|(t, _)| (*t).clone()).collect();
    PruneDecision {
        at_epoch,
        surviving,
        stopped,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RungState {
    pub completed: BTreeMap<TrialId, f64>,
    pub promoted: BTreeSet<TrialId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AshaAction {
    Start(TrialId),
    /// Promote `trial` from rung `from_rung` to the next rung.
    Promote { trial: TrialId, from_rung: usize },
    Idle,
}

/// Bookkeeping for ASHA: which trials finished which rung.
#[derive(Debug, Clone)]
pub struct AshaState {
    pub params: AshaParams,
    pub budgets: Vec<u32>,
    pub rungs: Vec<RungState>,
    pub unstarted: std::collections::VecDeque<TrialId>,
}

impl AshaState {
    pub fn new(params: AshaParams, trials: impl IntoIterator<Item = TrialId>) -> Self {
        let budgets = params.rung_budgets();
        AshaState {
            rungs: vec![RungState::default(); budgets.len()],
            budgets,
            params,
            unstarted: trials.into_iter().collect(),
        }
    }

    pub fn record(&mut self, trial: TrialId, rung: usize, accuracy: f64) {
        self.rungs[rung].completed.insert(trial, accuracy);
    }

    pub fn apply(&mut self, action: &AshaAction) {
        match action {
            AshaAction::Start(t) => {
                if self.unstarted.front() == Some(t) {
                    self.unstarted.pop_front();
                } else {
                    self.unstarted.retain(|x| x != t);
                }
            }
            AshaAction::Promote { trial, from_rung } => {
                self.rungs[*from_rung].promoted.insert(trial.clone());
            }
            AshaAction::Idle => {}
        }
    }
}

/// Picks the next ASHA job: the best promotable trial in the highest rung
/// that has one, else the next unstarted trial.
pub fn asha_poll(state: &AshaState) -> AshaAction {
    let eta = state.params.eta.max(2) as usize;
    let top = state.rungs.len().saturating_sub(1);
    for k in (0..top).rev() {
        let rung = &state.rungs[k];
        let quota = rung.completed.len() / eta;
        if quota <= rung.promoted.len() {
            continue;
        }
        let mut ranked: Vec<(&TrialId, f64)> =
            rung.completed.iter().map(|(t, s)| (t, *s)).collect();
        ranked.sort_by(rank);
        if let Some((t, _)) = ranked[..quota]
            .iter()
            .find(|(t, _)| !rung.promoted.contains(*t))
        {
            return AshaAction::Promote {
                trial: (*t).clone(),
                from_rung: k,
            };
        }
    }
    match state.unstarted.front() {
        Some(t) => AshaAction::Start(t.clone()),
        None => AshaAction::Idle,
    }
}

/// Most urgent (smallest) priority among the trials covering `stage`.
pub fn stage_priority(stage: &Stage, priorities: &BTreeMap<TrialId, i64>) -> Result<i64, AlgoError> {
    let mut best: Option<i64> = None;
    for t in &stage.covering {
        let p = *priorities
            .get(t)
            .ok_or_else(|| AlgoError::MissingPriority(t.clone()))?;
        best = Some(best.map_or(p, |b| b.min(p)));
    }
    best.ok_or(AlgoError::Uncovered)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Draw listed values with replacement.
    #[default]
    Discrete,
    /// Draw fresh values from each numeric axis's [min, max] range.
    Continuous,
}

const CONTINUOUS_DIGITS: u32 = 6;
const MAX_REDRAWS: usize = 64;

fn draw_continuous<R: Rng>(rng: &mut R, values: &[HpValue]) -> HpValue {
    if values.iter().all(|v| v.kind() == HpKind::Integer) {
        let ints: Vec<i64> = values.iter().filter_map(HpValue::to_i64).collect();
        if let (Some(lo), Some(hi)) = (ints.iter().min(), ints.iter().max()) {
            return HpValue::integer(rng.gen_range(*lo..=*hi));
        }
    }
    let numeric: Option<Vec<Decimal>> = values.iter().map(HpValue::to_decimal).collect();
    let Some(numeric) = numeric else {
        return values[rng.gen_range(0..values.len())].clone();
    };
    let scale = Decimal::from(10i64.pow(CONTINUOUS_DIGITS));
    let lo = numeric.iter().min().expect("non-empty axis") * scale;
    let hi = numeric.iter().max().expect("non-empty axis") * scale;
    let lo = i64::try_from(lo.ceil()).unwrap_or(0);
    let hi = i64::try_from(hi.floor()).unwrap_or(0).max(lo);
    HpValue::decimal(Decimal::new(rng.gen_range(lo..=hi), CONTINUOUS_DIGITS))
}

/// `n` trials sampled from the space, deterministic per seed.
pub fn random_discrete_plan(
    space: &BTreeMap<String, Vec<HpValue>>,
    template: Option<&ScheduleTemplate>,
    horizon: u32,
    n: usize,
    seed: u64,
    mode: SamplingMode,
) -> Result<Vec<TrialSpec>, AlgoError> {
    if n == 0 {
        return Err(AlgoError::InvalidParams("n must be at least 1".into()));
    }
    if space.is_empty() || space.values().any(Vec::is_empty) {
        return Err(AlgoError::Hp(HpError::InvalidSpace(
            "every axis needs at least one value".into(),
        )));
    }
    if let Some(t) = template {
        t.check_axes(space)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen_first = BTreeSet::new();
    let mut trials = Vec::with_capacity(n);
    for i in 0..n {
        let mut attempt = 0;
        let segments = loop {
            let point: BTreeMap<String, HpValue> = space
                .iter()
                .map(|(k, vs)| {
                    let v = match mode {
                        SamplingMode::Discrete => vs[rng.gen_range(0..vs.len())].clone(),
                        SamplingMode::Continuous => draw_continuous(&mut rng, vs),
                    };
                    (k.clone(), v)
                })
                .collect();
            let segments = point_segments(&point, template, horizon)?;
            attempt += 1;
            // Continuous draws must not share a first stage with an earlier
            // trial.
            if mode == SamplingMode::Discrete
                || seen_first.insert(segments[0].assignment.clone())
                || attempt >= MAX_REDRAWS
            {
                break segments;
            }
        };
        trials.push(TrialSpec::new(numbered_trial_id("r", i, n), segments, 0)?);
    }
    Ok(trials)
}
