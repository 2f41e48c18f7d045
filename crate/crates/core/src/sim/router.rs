//! Routing of studies to per-(model, dataset) executors.

use std::collections::BTreeMap;

use serde::Serialize;

use super::engine::{simulate, SimReport};
use super::{ClusterSpec, CostModel, Policy, SimError};
use crate::algo::Algorithm;
use crate::hp::{StudySpec, TrialId};
use crate::surrogate::SurrogateParams;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ExecutorKey {
    pub model_key: String,
    pub dataset_key: String,
}

impl ExecutorKey {
    fn of(study: &StudySpec) -> Self {
        ExecutorKey {
            model_key: study.model_key.clone(),
            dataset_key: study.dataset_key.clone(),
        }
    }
}

/// Executor index per study id. Executors are numbered in order of first
/// appearance; studies sharing a model and dataset share an executor.
pub fn route(studies: &[StudySpec]) -> BTreeMap<String, usize> {
    let mut keys: Vec<ExecutorKey> = Vec::new();
    let mut out = BTreeMap::new();
    for s in studies {
        let key = ExecutorKey::of(s);
        let idx = match keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                keys.push(key);
                keys.len() - 1
            }
        };
        out.insert(s.study_id.clone(), idx);
    }
    out
}

pub fn qualified_trial_id(study_id: &str, trial: &TrialId) -> TrialId {
    TrialId::new(format!("{study_id}/{trial}"))
}

/// One study holding every trial of `studies`, ids qualified by study.
pub fn merge_studies(studies: &[&StudySpec]) -> Result<StudySpec, SimError> {
    let first = studies.first().ok_or_else(|| SimError::EmptyStudy("<merged>".into()))?;
    let trials = studies
        .iter()
        .flat_map(|s| {
            s.trials
                .iter()
                .map(move |t| t.clone().with_id(qualified_trial_id(&s.study_id, t.id())))
        })
        .collect();
    let horizon = studies.iter().map(|s| s.horizon_epochs).max().unwrap_or(1);
    let id = studies.iter().map(|s| s.study_id.as_str()).collect::<Vec<_>>().join("+");
    Ok(StudySpec::new(id, first.model_key.clone(), first.dataset_key.clone(), trials, horizon)?)
}

/// Splits the nodes as evenly as possible; earlier executors get the remainder.
pub fn partition_cluster(cluster: &ClusterSpec, executors: usize) -> Result<Vec<ClusterSpec>, SimError> {
    let n = executors as u32;
    if executors == 0 || n > cluster.nodes {
        return Err(SimError::InvalidCluster(format!(
            "cannot split {} nodes across {executors} executors",
            cluster.nodes
        )));
    }
    Ok((0..n)
        .map(|i| ClusterSpec {
            nodes: cluster.nodes / n + u32::from(i < cluster.nodes % n),
            ..*cluster
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutorReport {
    pub key: ExecutorKey,
    pub studies: Vec<String>,
    pub cluster: ClusterSpec,
    pub report: SimReport,
}

/// Routes studies to executors, each with its own tree, estimator and
/// slice of the cluster, and simulates every executor independently.
#[allow(clippy::too_many_arguments)]
pub fn simulate_studies(
    studies: &[StudySpec],
    algorithm: &Algorithm,
    policy: Policy,
    cluster: &ClusterSpec,
    cost: &CostModel,
    params: &SurrogateParams,
    seed: u64,
) -> Result<Vec<ExecutorReport>, SimError> {
    let routes = route(studies);
    let count = routes.values().max().map_or(0, |m| m + 1);
    let slices = partition_cluster(cluster, count)?;
    let mut out = Vec::with_capacity(count);
    for (idx, slice) in slices.into_iter().enumerate() {
        let members: Vec<&StudySpec> = studies.iter().filter(|s| routes[&s.study_id] == idx).collect();
        let merged = merge_studies(&members)?;
        let report = simulate(&merged, algorithm, policy, &slice, cost, params, seed)?;
        out.push(ExecutorReport {
            key: ExecutorKey::of(members[0]),
            studies: members.iter().map(|s| s.study_id.clone()).collect(),
            cluster: slice,
            report,
        });
    }
    Ok(out)
}
