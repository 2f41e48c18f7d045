//! Prefix-merged forest of stages.
//!
//! Every inserted trial is a root-to-node path; trials that agree on a
//! prefix of their per-epoch assignment sequence share the stages covering
//! that prefix. When a new trial diverges in the middle of an existing
//! stage, that stage is split at the exact epoch offset.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hp::{normalize_segments, HpAssignment, HpError, Segment, TrialId, TrialSpec};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("trial {0} is already in the tree")]
    DuplicateTrial(TrialId),
    #[error("cannot split stage {stage} of length {length} at offset {offset}")]
    InvalidSplit {
        stage: StageId,
        length: u32,
        offset: u32,
    },
    #[error("stage {0} not found")]
    StageNotFound(StageId),
    #[error("trial {0} not found")]
    TrialNotFound(TrialId),
    #[error("tree is empty")]
    EmptyTree,
    #[error(transparent)]
    Hp(#[from] HpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct StageId(u32);

impl StageId {
    pub fn index(self) -> u32 {
        self.0
    }

    pub fn from_index(i: u32) -> Self {
        StageId(i)
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub id: StageId,
    pub assignment: HpAssignment,
    /// Global epoch offset of the first epoch of this stage.
    pub start_epoch: u32,
    pub length: u32,
    pub parent: Option<StageId>,
    pub children: Vec<StageId>,
    /// Trials whose path passes through this stage.
    pub covering: BTreeSet<TrialId>,
    /// Trials whose path ends at this stage.
    pub terminal: BTreeSet<TrialId>,
}

impl Stage {
    pub fn end_epoch(&self) -> u32 {
        self.start_epoch + self.length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTreeStats {
    pub stage_count: usize,
    pub stage_epochs: u64,
    pub trial_epochs: u64,
}

impl StageTreeStats {
    /// `trial_epochs / stage_epochs`: how many times less training the tree
    /// needs compared to running every trial independently.
    pub fn savings_ratio(&self) -> f64 {
        self.trial_epochs as f64 / self.stage_epochs as f64
    }
}

#[derive(Debug, Clone, Default)]
pub struct StageTree {
    stages: BTreeMap<StageId, Stage>,
    roots: Vec<StageId>,
    leaf_of: BTreeMap<TrialId, StageId>,
    trial_epochs: u64,
    next_id: u32,
}

impl StageTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_trials<'a>(trials: impl IntoIterator<Item = &'a TrialSpec>) -> Result<Self, TreeError> {
        let mut tree = StageTree::new();
        for t in trials {
            tree.insert_trial(t)?;
        }
        Ok(tree)
    }

    pub fn stage(&self, id: StageId) -> Option<&Stage> {
        self.stages.get(&id)
    }

    pub fn stages(&self) -> impl Iterator<Item = &Stage> {
        self.stages.values()
    }

    pub fn roots(&self) -> &[StageId] {
        &self.roots
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn leaf_of(&self, trial: &TrialId) -> Option<StageId> {
        self.leaf_of.get(trial).copied()
    }

    pub fn trials(&self) -> impl Iterator<Item = (&TrialId, StageId)> {
        self.leaf_of.iter().map(|(t, s)| (t, *s))
    }

    fn children_of(&self, parent: Option<StageId>) -> &[StageId] {
        match parent {
            Some(p) => &self.stages[&p].children,
            None => &self.roots,
        }
    }

    fn push_stage(&mut self, parent: Option<StageId>, assignment: HpAssignment, length: u32) -> StageId {
        let start_epoch = parent.map_or(0, |p| self.stages[&p].end_epoch());
        let id = StageId(self.next_id);
        self.next_id += 1;
        self.stages.insert(
            id,
            Stage {
                id,
                assignment,
                start_epoch,
                length,
                parent,
                children: Vec::new(),
                covering: BTreeSet::new(),
                terminal: BTreeSet::new(),
            },
        );
        match parent {
            Some(p) => self.stages.get_mut(&p).expect("parent exists").children.push(id),
            None => self.roots.push(id),
        }
        id
    }

    /// Inserts a trial, sharing its longest common prefix with the tree.
    /// Returns the stage at which the trial's path ends.
    pub fn insert_trial(&mut self, trial: &TrialSpec) -> Result<StageId, TreeError> {
        if self.leaf_of.contains_key(trial.id()) {
            return Err(TreeError::DuplicateTrial(trial.id().clone()));
        }
        let segments = trial.segments();
        let mut path = Vec::new();
        let mut parent: Option<StageId> = None;
        let mut seg_idx = 0;
        let mut remaining = segments[0].epochs;

        while seg_idx < segments.len() {
            let assignment = &segments[seg_idx].assignment;
            let matched = self
                .children_of(parent)
                .iter()
                .copied()
                .find(|c| self.stages[c].assignment == *assignment);
            let Some(child) = matched else {
                // No shared prefix left: append the rest as a fresh chain.
                let mut p = self.push_stage(parent, assignment.clone(), remaining);
                path.push(p);
                for seg in &segments[seg_idx + 1..] {
                    p = self.push_stage(Some(p), seg.assignment.clone(), seg.epochs);
                    path.push(p);
                }
                break;
            };
            let length = self.stages[&child].length;
            if remaining < length {
                self.split_stage(child, remaining)?;
            }
            let consumed = remaining.min(length);
            path.push(child);
            parent = Some(child);
            remaining -= consumed;
            if remaining == 0 {
                seg_idx += 1;
                if let Some(next) = segments.get(seg_idx) {
                    remaining = next.epochs;
                }
            }
        }

        let leaf = *path.last().expect("trial has at least one segment");
        for id in &path {
            self.stages
                .get_mut(id)
                .expect("path stage exists")
                .covering
                .insert(trial.id().clone());
        }
        self.stages
            .get_mut(&leaf)
            .expect("leaf exists")
            .terminal
            .insert(trial.id().clone());
        self.leaf_of.insert(trial.id().clone(), leaf);
        self.trial_epochs += trial.total_epochs();
        Ok(leaf)
    }

    /// Splits `stage` after `offset` epochs. The original id keeps the
    /// prefix; the returned suffix inherits children and terminal trials.
    pub fn split_stage(&mut self, stage: StageId, offset: u32) -> Result<(StageId, StageId), TreeError> {
        let s = self.stages.get(&stage).ok_or(TreeError::StageNotFound(stage))?;
        if offset == 0 || offset >= s.length {
            return Err(TreeError::InvalidSplit {
                stage,
                length: s.length,
                offset,
            });
        }
        let suffix_id = StageId(self.next_id);
        self.next_id += 1;

        let prefix = self.stages.get_mut(&stage).expect("checked above");
        let suffix = Stage {
            id: suffix_id,
            assignment: prefix.assignment.clone(),
            start_epoch: prefix.start_epoch + offset,
            length: prefix.length - offset,
            parent: Some(stage),
            children: std::mem::replace(&mut prefix.children, vec![suffix_id]),
            covering: prefix.covering.clone(),
            terminal: std::mem::take(&mut prefix.terminal),
        };
        prefix.length = offset;

        for c in &suffix.children {
            self.stages.get_mut(c).expect("child exists").parent = Some(suffix_id);
        }
        for t in &suffix.terminal {
            self.leaf_of.insert(t.clone(), suffix_id);
        }
        self.stages.insert(suffix_id, suffix);
        Ok((stage, suffix_id))
    }

    /// Splits every stage that strictly contains one of `epochs`.
    pub fn split_at_epochs(&mut self, epochs: &[u32]) {
        for &e in epochs {
            let inside: Vec<StageId> = self
                .stages
                .values()
                .filter(|s| s.start_epoch < e && e < s.end_epoch())
                .map(|s| s.id)
                .collect();
            for id in inside {
                let start = self.stages[&id].start_epoch;
                self.split_stage(id, e - start).expect("offset strictly inside stage");
            }
        }
    }

    /// Stage ids from the root down to `stage`.
    pub fn path_to(&self, stage: StageId) -> Result<Vec<StageId>, TreeError> {
        let mut path = Vec::new();
        let mut cur = Some(stage);
        while let Some(id) = cur {
            let s = self.stages.get(&id).ok_or(TreeError::StageNotFound(id))?;
            path.push(id);
            cur = s.parent;
        }
        path.reverse();
        Ok(path)
    }

    pub fn trial_path(&self, trial: &TrialId) -> Result<Vec<StageId>, TreeError> {
        let leaf = self
            .leaf_of(trial)
            .ok_or_else(|| TreeError::TrialNotFound(trial.clone()))?;
        self.path_to(leaf)
    }

    /// The stage sequence from the root to `leaf`, one segment per stage.
    /// Split stages show up as separate segments; pass the result through
    /// `normalize_segments` to recover the inserted trial.
    pub fn reconstruct_path(&self, leaf: StageId) -> Result<Vec<Segment>, TreeError> {
        self.path_to(leaf)?
            .into_iter()
            .map(|id| {
                let s = &self.stages[&id];
                Ok(Segment::new(s.assignment.clone(), s.length)?)
            })
            .collect()
    }

    pub fn reconstruct_trial(&self, trial: &TrialId) -> Result<Vec<Segment>, TreeError> {
        let leaf = self
            .leaf_of(trial)
            .ok_or_else(|| TreeError::TrialNotFound(trial.clone()))?;
        Ok(normalize_segments(self.reconstruct_path(leaf)?)?)
    }

    pub fn tree_stats(&self) -> Result<StageTreeStats, TreeError> {
        if self.leaf_of.is_empty() {
            return Err(TreeError::EmptyTree);
        }
        Ok(StageTreeStats {
            stage_count: self.stages.len(),
            stage_epochs: self.stages.values().map(|s| u64::from(s.length)).sum(),
            trial_epochs: self.trial_epochs,
        })
    }

    /// Id-independent form: nodes in a canonical order with parent indices.
    pub fn canonical_nodes(&self) -> Vec<CanonicalNode> {
        // Depth-first with children ordered by assignment gives a canonical
        // sequence; the stable sort then orders by (start_epoch, assignment)
        // while keeping ties in that canonical sequence.
        let mut order: Vec<StageId> = Vec::with_capacity(self.stages.len());
        let sorted = |ids: &[StageId]| {
            let mut v = ids.to_vec();
            v.sort_by(|a, b| self.stages[a].assignment.cmp(&self.stages[b].assignment));
            v
        };
        let mut stack: Vec<StageId> = sorted(&self.roots).into_iter().rev().collect();
        while let Some(id) = stack.pop() {
            order.push(id);
            stack.extend(sorted(&self.stages[&id].children).into_iter().rev());
        }
        order.sort_by(|a, b| {
            let (sa, sb) = (&self.stages[a], &self.stages[b]);
            (sa.start_epoch, &sa.assignment).cmp(&(sb.start_epoch, &sb.assignment))
        });
        let index: BTreeMap<StageId, usize> = order.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        order
            .iter()
            .map(|id| {
                let s = &self.stages[id];
                CanonicalNode {
                    index: index[id],
                    parent: s.parent.map(|p| index[&p]),
                    assignment: s.assignment.clone(),
                    start_epoch: s.start_epoch,
                    length: s.length,
                    covering: s.covering.iter().cloned().collect(),
                    terminal: s.terminal.iter().cloned().collect(),
                }
            })
            .collect()
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(&self.canonical_nodes()).expect("tree serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CanonicalNode {
    pub index: usize,
    pub parent: Option<usize>,
    pub assignment: HpAssignment,
    pub start_epoch: u32,
    pub length: u32,
    pub covering: Vec<TrialId>,
    pub terminal: Vec<TrialId>,
}
