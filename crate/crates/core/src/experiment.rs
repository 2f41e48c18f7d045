//! Experiment configuration and the two-policy runner.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algo::{random_discrete_plan, Algorithm, SamplingMode};
use crate::gantt::render_gantt;
use crate::hp::{expand_grid, HpValue, ScheduleTemplate, StudySpec, TrialSpec};
use crate::report::{ComparisonReport, Ratios};
use crate::sim::{
    simulate, trace_to_csv_string, ClusterSpec, CostModel, Policy, SimError, SimReport, TraceError,
};
use crate::surrogate::{train, Checkpoint, SurrogateParams};
use crate::tree::StageTree;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
}

impl ConfigError {
    fn invalid(field: &str, message: impl ToString) -> Self {
        ConfigError::Invalid {
            field: field.to_string(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum TrialSource {
    /// Every point of the space.
    Grid,
    /// `n` points drawn from the space.
    Random {
        n: usize,
        #[serde(default)]
        mode: SamplingMode,
        /// Defaults to the experiment seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Trials spelled out segment by segment.
    Explicit { list: Vec<TrialSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub study_id: String,
    pub model_key: String,
    pub dataset_key: String,
    pub horizon_epochs: u32,
    #[serde(default)]
    pub space: BTreeMap<String, Vec<HpValue>>,
    #[serde(default)]
    pub schedule: Option<ScheduleTemplate>,
    pub trials: TrialSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub study: StudyConfig,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub cluster: ClusterSpec,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub surrogate: SurrogateParams,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// Parses and validates a config. Errors name the offending field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
        path: match e.path().to_string() {
            p if p == "." => "config".to_string(),
            p => p,
        },
        message: e.into_inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.trim().is_empty() {
            return Err(ConfigError::invalid("name", "must not be empty"));
        }
        self.cluster.validate().map_err(|e| ConfigError::invalid("cluster", e))?;
        self.cost.validate().map_err(|e| ConfigError::invalid("cost", e))?;
        self.surrogate
            .validate()
            .map_err(|e| ConfigError::invalid("surrogate", e))?;
        self.algorithm
            .validate(self.study.horizon_epochs)
            .map_err(|e| ConfigError::invalid("algorithm", e))?;
        let study = self.build_study()?;
        let probe = Checkpoint::fresh(self.seed, &self.surrogate);
        for t in &study.trials {
            for s in t.segments() {
                train(&probe, &s.assignment, 0, &self.surrogate)
                    .map_err(|e| ConfigError::invalid("study.trials", format!("trial {}: {e}", t.id())))?;
            }
        }
        Ok(())
    }

    /// Expands the trial source into a concrete study.
    pub fn build_study(&self) -> Result<StudySpec, ConfigError> {
        let s = &self.study;
        if s.horizon_epochs == 0 {
            return Err(ConfigError::invalid("study.horizon_epochs", "must be positive"));
        }
        let template = s.schedule.as_ref();
        let trials = match &s.trials {
            TrialSource::Grid => expand_grid(&s.space, template, s.horizon_epochs)
                .map_err(|e| ConfigError::invalid("study.space", e))?,
            TrialSource::Random { n, mode, seed } => random_discrete_plan(
                &s.space,
                template,
                s.horizon_epochs,
                *n,
                seed.unwrap_or(self.seed),
                *mode,
            )
            .map_err(|e| ConfigError::invalid("study.trials", e))?,
            TrialSource::Explicit { list } => {
                if list.is_empty() {
                    return Err(ConfigError::invalid("study.trials.list", "must not be empty"));
                }
                list.clone()
            }
        };
        StudySpec::new(&s.study_id, &s.model_key, &s.dataset_key, trials, s.horizon_epochs)
            .map_err(|e| ConfigError::invalid("study", e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PolicySelection {
    Trial,
    Stage,
    #[default]
    Both,
}

impl PolicySelection {
    pub fn policies(self) -> &'static [Policy] {
        match self {
            PolicySelection::Trial => &[Policy::TrialBased],
            PolicySelection::Stage => &[Policy::StageBased],
            PolicySelection::Both => &[Policy::TrialBased, Policy::StageBased],
        }
    }
}

pub struct ExperimentOutput {
    pub report: ComparisonReport,
    pub runs: BTreeMap<Policy, SimReport>,
}

/// Runs the selected policies on the same study and seed, each on its own
/// thread, and joins the results into a comparison.
pub fn run_experiment(cfg: &ExperimentConfig, select: PolicySelection) -> Result<ExperimentOutput, ExperimentError> {
    let study = cfg.build_study()?;
    let tree = StageTree::from_trials(&study.trials).map_err(SimError::from)?;
    let stats = tree.tree_stats().map_err(SimError::from)?;
    let results: Vec<(Policy, Result<SimReport, SimError>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = select
            .policies()
            .iter()
            .map(|&policy| {
                let study = &study;
                scope.spawn(move || {
                    let r = simulate(
                        study,
                        &cfg.algorithm,
                        policy,
                        &cfg.cluster,
                        &cfg.cost,
                        &cfg.surrogate,
                        cfg.seed,
                    );
                    (policy, r)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    let mut runs = BTreeMap::new();
    for (policy, r) in results {
        runs.insert(policy, r?);
    }
    let ratios = match (runs.get(&Policy::TrialBased), runs.get(&Policy::StageBased)) {
        (Some(t), Some(s)) => Some(Ratios::between(t, s)),
        _ => None,
    };
    let report = ComparisonReport {
        name: cfg.name.clone(),
        algorithm: cfg.algorithm.name().to_string(),
        seed: cfg.seed,
        trials: study.trials.len(),
        tree: stats,
        trial_based: runs.get(&Policy::TrialBased).cloned(),
        stage_based: runs.get(&Policy::StageBased).cloned(),
        ratios,
    };
    Ok(ExperimentOutput { report, runs })
}

/// File stem suffix used for per-policy artifacts.
pub fn policy_tag(policy: Policy) -> &'static str {
    match policy {
        Policy::TrialBased => "trial",
        Policy::StageBased => "stage",
    }
}

/// Writes `report.json`, `trace_<policy>.csv` and `gantt_<policy>.svg`.
pub fn write_artifacts(out: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let write = |name: String, body: String| -> Result<PathBuf, ExperimentError> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|source| ExperimentError::Write {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    };
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = vec![write("report.json".into(), out.report.to_json())?];
    for (policy, run) in &out.runs {
        let tag = policy_tag(*policy);
        written.push(write(format!("trace_{tag}.csv"), trace_to_csv_string(&run.trace))?);
        written.push(write(format!("gantt_{tag}.svg"), render_gantt(&run.trace)?)?);
    }
    Ok(written)
}
