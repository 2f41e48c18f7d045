//! Units of scheduling for both execution policies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use super::{ClusterSpec, Policy, SimError};
use crate::hp::{HpAssignment, Segment, StudySpec, TrialId};
use crate::surrogate::{memory_required, SurrogateParams, BATCH_KEY};
use crate::tree::StageTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct UnitId(pub u32);

impl UnitId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

/// A contiguous span of training that is scheduled as one job.
///
/// Under the stage-based policy this is a stage of the tree; under the
/// trial-based policy it is a chunk of one trial between decision epochs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkUnit {
    pub id: UnitId,
    pub label: String,
    pub parent: Option<UnitId>,
    pub children: Vec<UnitId>,
    pub segments: Vec<Segment>,
    pub start_epoch: u32,
    pub length: u32,
    pub covering: BTreeSet<TrialId>,
    /// Whole-lifetime allocation for trial-based units.
    pub fixed_gpus: Option<u32>,
    pub batch_size: u64,
    pub mem_mb: f64,
}

impl WorkUnit {
    pub fn end_epoch(&self) -> u32 {
        self.start_epoch + self.length
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionPlan {
    pub policy: Policy,
    pub units: Vec<WorkUnit>,
    pub trial_paths: BTreeMap<TrialId, Vec<UnitId>>,
    pub trial_epochs: BTreeMap<TrialId, u32>,
    pub priorities: BTreeMap<TrialId, i64>,
}

fn batch_of(a: &HpAssignment, params: &SurrogateParams) -> u64 {
    a.get(BATCH_KEY)
        .and_then(|v| v.to_f64())
        .map_or(params.batch_ref, |b| b)
        .max(0.0)
        .round() as u64
}

/// First `epochs` epochs of `segments`.
pub fn take_epochs(segments: &[Segment], mut epochs: u32) -> Vec<Segment> {
    let mut out = Vec::new();
    for s in segments {
        if epochs == 0 {
            break;
        }
        let n = s.epochs.min(epochs);
        out.push(Segment {
            assignment: s.assignment.clone(),
            epochs: n,
        });
        epochs -= n;
    }
    out
}

/// Epochs `[from, to)` of `segments`.
fn slice_epochs(segments: &[Segment], from: u32, to: u32) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut at = 0;
    for s in segments {
        let (lo, hi) = (at.max(from), (at + s.epochs).min(to));
        if lo < hi {
            out.push(Segment {
                assignment: s.assignment.clone(),
                epochs: hi - lo,
            });
        }
        at += s.epochs;
    }
    out
}

impl ExecutionPlan {
    pub fn build(
        study: &StudySpec,
        policy: Policy,
        decision_epochs: &[u32],
        cluster: &ClusterSpec,
        surrogate: &SurrogateParams,
    ) -> Result<Self, SimError> {
        if study.trials.is_empty() {
            return Err(SimError::EmptyStudy(study.study_id.clone()));
        }
        let priorities = study.trials.iter().map(|t| (t.id().clone(), t.priority())).collect();
        let trial_epochs = study
            .trials
            .iter()
            .map(|t| (t.id().clone(), t.segments().iter().map(|s| s.epochs).sum()))
            .collect();
        let mut plan = ExecutionPlan {
            policy,
            units: Vec::new(),
            trial_paths: BTreeMap::new(),
            trial_epochs,
            priorities,
        };
        match policy {
            Policy::StageBased => plan.fill_stage_based(study, decision_epochs, surrogate)?,
            Policy::TrialBased => plan.fill_trial_based(study, decision_epochs, cluster, surrogate),
        }
        Ok(plan)
    }

    fn fill_stage_based(
        &mut self,
        study: &StudySpec,
        decision_epochs: &[u32],
        surrogate: &SurrogateParams,
    ) -> Result<(), SimError> {
        let mut tree = StageTree::from_trials(&study.trials)?;
        tree.split_at_epochs(decision_epochs);
        for s in tree.stages() {
            debug_assert_eq!(s.id.index() as usize, self.units.len());
            self.units.push(WorkUnit {
                id: UnitId(s.id.index()),
                label: s.id.to_string(),
                parent: s.parent.map(|p| UnitId(p.index())),
                children: s.children.iter().map(|c| UnitId(c.index())).collect(),
                segments: vec![Segment {
                    assignment: s.assignment.clone(),
                    epochs: s.length,
                }],
                start_epoch: s.start_epoch,
                length: s.length,
                covering: s.covering.clone(),
                fixed_gpus: None,
                batch_size: batch_of(&s.assignment, surrogate),
                mem_mb: memory_required(&s.assignment, surrogate),
            });
        }
        for t in &study.trials {
            let path = tree.trial_path(t.id())?;
            self.trial_paths
                .insert(t.id().clone(), path.into_iter().map(|s| UnitId(s.index())).collect());
        }
        Ok(())
    }

    fn fill_trial_based(
        &mut self,
        study: &StudySpec,
        decision_epochs: &[u32],
        cluster: &ClusterSpec,
        surrogate: &SurrogateParams,
    ) {
        let cap = f64::from(cluster.gpu_memory_mb);
        for t in &study.trials {
            let total: u32 = t.segments().iter().map(|s| s.epochs).sum();
            let peak = t
                .segments()
                .iter()
                .map(|s| memory_required(&s.assignment, surrogate))
                .fold(0.0, f64::max);
            let gpus = ((peak / cap).ceil() as u32).max(1);
            let peak_batch = t
                .segments()
                .iter()
                .map(|s| batch_of(&s.assignment, surrogate))
                .max()
                .unwrap_or(0);
            let mut cuts: Vec<u32> = decision_epochs.iter().copied().filter(|&e| e > 0 && e < total).collect();
            cuts.sort_unstable();
            cuts.dedup();
            cuts.push(total);
            let mut path = Vec::new();
            let mut from = 0;
            for (k, to) in cuts.into_iter().enumerate() {
                let id = UnitId(self.units.len() as u32);
                let parent = path.last().copied();
                if let Some(p) = parent {
                    self.units[UnitId::index(p)].children.push(id);
                }
                self.units.push(WorkUnit {
                    id,
                    label: format!("{}#{}", t.id(), k),
                    parent,
                    children: Vec::new(),
                    segments: slice_epochs(t.segments(), from, to),
                    start_epoch: from,
                    length: to - from,
                    covering: BTreeSet::from([t.id().clone()]),
                    fixed_gpus: Some(gpus),
                    batch_size: peak_batch,
                    mem_mb: peak,
                });
                path.push(id);
                from = to;
            }
            self.trial_paths.insert(t.id().clone(), path);
        }
    }

    pub fn unit(&self, id: UnitId) -> &WorkUnit {
        &self.units[id.index()]
    }

    pub fn total_epochs(&self) -> u64 {
        self.units.iter().map(|u| u64::from(u.length)).sum()
    }
}
