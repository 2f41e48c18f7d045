//! Event loop, dispatch and pruning.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::cluster::{Placement, WorkerId, WorkerPool};
use super::plan::{take_epochs, ExecutionPlan, UnitId};
use super::trace::{TraceEvent, TraceRecord};
use super::{ClusterSpec, CostModel, Policy, SimError};
use crate::algo::{asha_poll, sha_rung_decision, Algorithm, AshaAction, AshaState, PruneDecision, RungSpec};
use crate::estimator::{escalate, ProfileRecord, ResourceEstimator};
use crate::hp::{StudySpec, TrialId};
use crate::surrogate::{train_segments, Checkpoint, SurrogateParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnitStatus {
    Pending,
    Running,
    Done,
    Truncated,
    Cancelled,
    Failed,
}

#[derive(Debug, Clone)]
struct RunInfo {
    worker: WorkerId,
    gpus: Vec<u32>,
    launched: f64,
    exec_start: f64,
    epoch_dur: f64,
    epochs: u32,
    oom: bool,
}

#[derive(Debug, Clone)]
struct UnitState {
    status: UnitStatus,
    gpu_request: u32,
    run: Option<RunInfo>,
    checkpoint: Option<Checkpoint>,
    generation: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    /// Not started, or paused at a rung waiting for a decision.
    Waiting,
    Active,
    Finished,
    Stopped,
    Failed,
}

#[derive(Debug, Clone)]
struct TrialState {
    status: TrialOutcome,
    target: u32,
    total: u32,
    reached: u32,
    rung: usize,
    priority: i64,
    accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RungLog {
    pub at_epoch: u32,
    pub entered: usize,
    pub promoted: usize,
}

enum Driver {
    Exhaustive,
    Sha { spec: RungSpec, next: usize },
    Asha { state: AshaState, issued: i64 },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    unit: UnitId,
    generation: u32,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Reversed so that `BinaryHeap` pops the earliest event, then the smallest unit.
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.unit.cmp(&self.unit))
            .then_with(|| other.generation.cmp(&self.generation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: Policy,
    pub algorithm: String,
    pub end_to_end_s: f64,
    /// Sum of per-GPU busy seconds.
    pub gpu_seconds: f64,
    pub gpu_hours: f64,
    pub gpu_busy_s: Vec<f64>,
    pub epochs_trained: u64,
    pub units_total: usize,
    pub units_completed: usize,
    pub units_truncated: usize,
    pub units_cancelled: usize,
    pub launches: u64,
    pub oom_failures: u64,
    pub checkpoint_loads: u64,
    pub containers_started: u64,
    pub containers_destroyed: u64,
    /// Launch count per allocated GPU count.
    pub launch_gpu_counts: BTreeMap<u32, u64>,
    pub trial_outcomes: BTreeMap<TrialId, TrialOutcome>,
    pub trial_epochs: BTreeMap<TrialId, u32>,
    pub trial_accuracy: BTreeMap<TrialId, f64>,
    pub rungs: Vec<RungLog>,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

impl SimReport {
    pub fn failed_trials(&self) -> impl Iterator<Item = &TrialId> {
        self.trial_outcomes
            .iter()
            .filter(|(_, o)| **o == TrialOutcome::Failed)
            .map(|(t, _)| t)
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.trial_accuracy.values().copied().max_by(f64::total_cmp)
    }
}

pub struct Simulation {
    plan: ExecutionPlan,
    cluster: ClusterSpec,
    cost: CostModel,
    params: SurrogateParams,
    seed: u64,
    algorithm: String,
    units: Vec<UnitState>,
    trials: BTreeMap<TrialId, TrialState>,
    trial_order: Vec<TrialId>,
    pool: WorkerPool,
    estimator: ResourceEstimator,
    events: BinaryHeap<Event>,
    clock: f64,
    driver: Driver,
    trace: Vec<TraceRecord>,
    busy: Vec<f64>,
    epochs_trained: u64,
    launches: u64,
    oom_failures: u64,
    checkpoint_loads: u64,
    containers_started: u64,
    containers_destroyed: u64,
    launch_gpu_counts: BTreeMap<u32, u64>,
    rungs: Vec<RungLog>,
}

/// Runs one study under one policy.
pub fn simulate(
    study: &StudySpec,
    algorithm: &Algorithm,
    policy: Policy,
    cluster: &ClusterSpec,
    cost: &CostModel,
    params: &SurrogateParams,
    seed: u64,
) -> Result<SimReport, SimError> {
    cluster.validate()?;
    cost.validate()?;
    params.validate()?;
    algorithm.validate(study.horizon_epochs)?;
    let mut cuts = algorithm.decision_epochs();
    if let Algorithm::Asha(p) = algorithm {
        cuts.push(p.max_resource);
    }
    let plan = ExecutionPlan::build(study, policy, &cuts, cluster, params)?;
    let order = study.trials.iter().map(|t| t.id().clone()).collect();
    Simulation::new(plan, order, algorithm, *cluster, *cost, *params, seed).run()
}

impl Simulation {
    pub fn new(
        plan: ExecutionPlan,
        trial_order: Vec<TrialId>,
        algorithm: &Algorithm,
        cluster: ClusterSpec,
        cost: CostModel,
        params: SurrogateParams,
        seed: u64,
    ) -> Self {
        let units = plan
            .units
            .iter()
            .map(|_| UnitState {
                status: UnitStatus::Pending,
                gpu_request: 1,
                run: None,
                checkpoint: None,
                generation: 0,
            })
            .collect();
        let trials = plan
            .trial_epochs
            .iter()
            .map(|(t, total)| {
                let st = TrialState {
                    status: TrialOutcome::Waiting,
                    target: 0,
                    total: *total,
                    reached: 0,
                    rung: 0,
                    priority: plan.priorities.get(t).copied().unwrap_or(0),
                    accuracy: None,
                };
                (t.clone(), st)
            })
            .collect();
        let driver = match algorithm {
            Algorithm::Exhaustive => Driver::Exhaustive,
            Algorithm::Sha(spec) => Driver::Sha {
                spec: spec.clone(),
                next: 0,
            },
            Algorithm::Asha(p) => Driver::Asha {
                state: AshaState::new(p.clone(), trial_order.iter().cloned()),
                issued: 0,
            },
        };
        Simulation {
            cluster,
            cost,
            params,
            seed,
            algorithm: algorithm.name().to_string(),
            units,
            trials,
            trial_order,
            pool: WorkerPool::new(cluster),
            estimator: ResourceEstimator::new(),
            events: BinaryHeap::new(),
            clock: 0.0,
            driver,
            trace: Vec::new(),
            busy: vec![0.0; cluster.total_gpus() as usize],
            epochs_trained: 0,
            launches: 0,
            oom_failures: 0,
            checkpoint_loads: 0,
            containers_started: 0,
            containers_destroyed: 0,
            launch_gpu_counts: BTreeMap::new(),
            rungs: Vec::new(),
            plan,
        }
    }

    pub fn run(mut self) -> Result<SimReport, SimError> {
        self.start_trials();
        self.run_loop()
    }

    fn run_loop(mut self) -> Result<SimReport, SimError> {
        loop {
            self.advance();
            if self.dispatch()? {
                continue;
            }
            let Some(first) = self.events.pop() else { break };
            if self.is_stale(&first) {
                continue;
            }
            self.clock = first.time;
            self.handle(first)?;
            while self.events.peek().is_some_and(|e| e.time == first.time) {
                let ev = self.events.pop().expect("peeked");
                self.handle(ev)?;
            }
        }
        let active = self.trials.values().filter(|t| t.status == TrialOutcome::Active).count();
        if active > 0 {
            return Err(SimError::Stalled(active));
        }
        Ok(self.finish())
    }

    fn start_trials(&mut self) {
        let first_target = match &self.driver {
            Driver::Exhaustive => u32::MAX,
            Driver::Sha { spec, .. } => spec.rung_epochs.first().copied().unwrap_or(u32::MAX),
            Driver::Asha { .. } => return,
        };
        for t in self.trial_order.clone() {
            self.activate(&t, first_target);
        }
    }

    fn activate(&mut self, trial: &TrialId, target: u32) {
        let ts = self.trials.get_mut(trial).expect("known trial");
        ts.status = TrialOutcome::Active;
        ts.target = target.min(ts.total);
        self.check_reached(trial);
    }

    /// Marks `trial` as having reached its target once the unit ending there is done.
    fn check_reached(&mut self, trial: &TrialId) {
        let ts = &self.trials[trial];
        if ts.status != TrialOutcome::Active {
            return;
        }
        let goal = ts.target;
        let path = &self.plan.trial_paths[trial];
        let u = *path
            .iter()
            .find(|u| self.plan.unit(**u).end_epoch() == goal)
            .expect("units are split at every target epoch");
        if self.units[u.index()].status != UnitStatus::Done {
            return;
        }
        let acc = self.units[u.index()]
            .checkpoint
            .expect("done units hold a checkpoint")
            .validation_accuracy();
        let ts = self.trials.get_mut(trial).expect("known trial");
        ts.reached = goal;
        ts.accuracy = Some(acc);
        ts.status = if goal == ts.total {
            TrialOutcome::Finished
        } else {
            TrialOutcome::Waiting
        };
        let rung = ts.rung;
        let mut rec = TraceRecord::new(self.clock, TraceEvent::TrialReached);
        rec.stage_id = self.plan.unit(u).label.clone();
        rec.trial_id = trial.to_string();
        rec.detail = format!("epoch={goal};accuracy={acc}");
        self.trace.push(rec);
        if let Driver::Asha { state, .. } = &mut self.driver {
            state.record(trial.clone(), rung, acc);
            if rung + 1 == state.budgets.len() {
                self.trials.get_mut(trial).expect("known trial").status = TrialOutcome::Finished;
            }
        }
    }

    /// Algorithm decisions that can be taken at the current instant.
    fn advance(&mut self) {
        loop {
            let progressed = match self.driver {
                Driver::Exhaustive => false,
                Driver::Sha { .. } => self.sha_barrier(),
                Driver::Asha { .. } => self.asha_step(),
            };
            if !progressed {
                break;
            }
        }
    }

    fn sha_barrier(&mut self) -> bool {
        let Driver::Sha { spec, next } = &mut self.driver else {
            return false;
        };
        if *next >= spec.rung_epochs.len() || self.trials.values().any(|t| t.status == TrialOutcome::Active) {
            return false;
        }
        let at = spec.rung_epochs[*next];
        let eta = spec.eta;
        *next += 1;
        let next_target = spec.rung_epochs.get(*next).copied().unwrap_or(u32::MAX);
        let scores: BTreeMap<TrialId, f64> = self
            .trials
            .iter()
            .filter(|(_, t)| t.status == TrialOutcome::Waiting)
            .map(|(id, t)| (id.clone(), t.accuracy.expect("paused trials have an accuracy")))
            .collect();
        if scores.is_empty() {
            return false;
        }
        let decision = sha_rung_decision(&scores, eta, at);
        self.rungs.push(RungLog {
            at_epoch: at,
            entered: scores.len(),
            promoted: decision.surviving.len(),
        });
        let mut rec = TraceRecord::new(self.clock, TraceEvent::Prune);
        rec.detail = format!(
            "epoch={at};entered={};kept={}",
            scores.len(),
            decision.surviving.len()
        );
        self.trace.push(rec);
        self.apply_prune(&decision);
        for t in &decision.surviving {
            self.activate(t, next_target);
        }
        true
    }

    fn asha_step(&mut self) -> bool {
        if self.has_ready_unit() || !self.has_idle_gpu() {
            return false;
        }
        let Driver::Asha { state, issued } = &mut self.driver else {
            return false;
        };
        let action = asha_poll(state);
        state.apply(&action);
        let (trial, rung) = match action {
            AshaAction::Idle => return false,
            AshaAction::Start(t) => (t, 0),
            AshaAction::Promote { trial, from_rung } => (trial, from_rung + 1),
        };
        let target = state.budgets[rung];
        let priority = *issued;
        *issued += 1;
        let ts = self.trials.get_mut(&trial).expect("known trial");
        if matches!(ts.status, TrialOutcome::Failed | TrialOutcome::Stopped) {
            return true;
        }
        ts.rung = rung;
        ts.priority = priority;
        self.activate(&trial, target);
        true
    }

    fn has_idle_gpu(&self) -> bool {
        let busy: usize = self.pool.workers().filter(|w| w.busy).map(|w| w.gpus.len()).sum();
        busy < self.cluster.total_gpus() as usize
    }

    fn has_ready_unit(&self) -> bool {
        (0..self.units.len()).any(|i| self.ready_priority(UnitId(i as u32)).is_some())
    }

    /// Priority of a unit that can start now; `None` when it is not ready
    /// or no active trial needs it.
    fn ready_priority(&self, u: UnitId) -> Option<i64> {
        if self.units[u.index()].status != UnitStatus::Pending {
            return None;
        }
        let unit = self.plan.unit(u);
        if let Some(p) = unit.parent {
            if self.units[p.index()].status != UnitStatus::Done {
                return None;
            }
        }
        unit.covering
            .iter()
            .filter_map(|t| {
                let ts = &self.trials[t];
                (ts.status == TrialOutcome::Active && ts.target >= unit.end_epoch()).then_some(ts.priority)
            })
            .min()
    }

    /// Most urgent ready unit and the GPUs it should get.
    pub fn next_dispatch(&self) -> Option<(UnitId, u32)> {
        let mut best: Option<(i64, u32, UnitId)> = None;
        for i in 0..self.units.len() {
            let u = UnitId(i as u32);
            if let Some(p) = self.ready_priority(u) {
                let key = (p, self.plan.unit(u).start_epoch, u);
                if best.is_none_or(|b| key < b) {
                    best = Some(key);
                }
            }
        }
        best.map(|(_, _, u)| (u, self.gpus_for(u)))
    }

    fn gpus_for(&self, u: UnitId) -> u32 {
        let unit = self.plan.unit(u);
        match unit.fixed_gpus {
            Some(g) => g,
            None => {
                let est = self
                    .estimator
                    .estimate_gpus(unit.batch_size, f64::from(self.cluster.gpu_memory_mb));
                est.max(self.units[u.index()].gpu_request)
            }
        }
    }

    /// Launches ready units in strict priority order until the head one has
    /// to wait. Returns true if anything launched or failed, since either
    /// can let the algorithm issue more work.
    fn dispatch(&mut self) -> Result<bool, SimError> {
        let mut changed = false;
        while let Some((u, g)) = self.next_dispatch() {
            match self.pool.place(g, self.plan.unit(u).parent) {
                Ok(Some(p)) => self.run_stage(u, p),
                Ok(None) => break,
                Err(SimError::Unsatisfiable { gpus, limit }) => {
                    self.fail_unit(u, &format!("needs {gpus} GPUs, node has {limit}"));
                }
                Err(e) => return Err(e),
            }
            changed = true;
        }
        Ok(changed)
    }

    fn worker_record(&self, event: TraceEvent, w: WorkerId) -> TraceRecord {
        let worker = self.pool.worker(w).expect("live worker");
        let mut rec = TraceRecord::new(self.clock, event);
        rec.worker_id = w.to_string();
        rec.node = Some(worker.node);
        rec.gpus = Some(worker.gpus.len() as u32);
        rec
    }

    fn run_stage(&mut self, u: UnitId, p: Placement) {
        for v in &p.destroyed {
            let mut rec = TraceRecord::new(self.clock, TraceEvent::WorkerDestroy);
            rec.worker_id = v.to_string();
            self.trace.push(rec);
            self.containers_destroyed += 1;
        }
        if p.created {
            let mut rec = self.worker_record(TraceEvent::WorkerCreate, p.worker);
            let worker = self.pool.worker(p.worker).expect("just created");
            rec.detail = format!(
                "gpu_ids={}",
                worker.gpus.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
            );
            self.trace.push(rec);
            self.containers_started += 1;
        }
        let mut overhead = 0.0;
        if !p.destroyed.is_empty() {
            overhead += self.cost.container_destroy_s;
        }
        if p.created {
            overhead += self.cost.container_start_s;
        }
        if p.checkpoint_load {
            overhead += self.cost.checkpoint_load_s;
            self.checkpoint_loads += 1;
        }
        let worker = self.pool.worker(p.worker).expect("placed worker").clone();
        let unit = self.plan.unit(u);
        let g = worker.gpus.len() as u32;
        let oom = unit.mem_mb > f64::from(g) * f64::from(self.cluster.gpu_memory_mb);
        let epoch_dur = self.cost.epoch_duration(g);
        let exec_start = self.clock + overhead;
        let end = if oom {
            exec_start
        } else {
            exec_start + f64::from(unit.length) * epoch_dur
        };

        let mut rec = self.worker_record(TraceEvent::Launch, p.worker);
        rec.stage_id = unit.label.clone();
        if unit.covering.len() == 1 {
            rec.trial_id = unit.covering.iter().next().expect("one trial").to_string();
        }
        rec.detail = format!(
            "parent={};load={};overhead={};epochs={};start_epoch={};batch={}",
            unit.parent.map_or(String::new(), |p| self.plan.unit(p).label.clone()),
            u8::from(p.checkpoint_load),
            overhead,
            unit.length,
            unit.start_epoch,
            unit.batch_size
        );
        self.trace.push(rec);

        self.launches += 1;
        *self.launch_gpu_counts.entry(g).or_insert(0) += 1;
        self.pool.set_busy(p.worker, true);
        self.pool.set_loaded(p.worker, None);
        let st = &mut self.units[u.index()];
        st.status = UnitStatus::Running;
        st.run = Some(RunInfo {
            worker: p.worker,
            gpus: worker.gpus,
            launched: self.clock,
            exec_start,
            epoch_dur,
            epochs: unit.length,
            oom,
        });
        self.events.push(Event {
            time: end,
            unit: u,
            generation: st.generation,
        });
    }

    /// Events superseded by a truncation.
    fn is_stale(&self, ev: &Event) -> bool {
        let st = &self.units[ev.unit.index()];
        st.generation != ev.generation || st.status != UnitStatus::Running
    }

    fn handle(&mut self, ev: Event) -> Result<(), SimError> {
        if self.is_stale(&ev) {
            return Ok(());
        }
        let st = &mut self.units[ev.unit.index()];
        let run = st.run.take().expect("running unit has run info");
        let elapsed = self.clock - run.launched;
        for g in &run.gpus {
            self.busy[*g as usize] += elapsed;
        }
        self.pool.set_busy(run.worker, false);
        let unit = self.plan.unit(ev.unit).clone();
        let profile = ProfileRecord {
            batch_size: unit.batch_size,
            observed_mem_mb: unit.mem_mb,
        };
        let g = run.gpus.len() as u32;
        let mut rec = self.worker_record(TraceEvent::Complete, run.worker);
        rec.stage_id = unit.label.clone();
        if unit.covering.len() == 1 {
            rec.trial_id = unit.covering.iter().next().expect("one trial").to_string();
        }

        if run.oom {
            self.oom_failures += 1;
            if unit.fixed_gpus.is_none() {
                self.estimator.observe(profile);
            }
            rec.event = TraceEvent::Oom;
            rec.detail = format!(
                "required_mb={};available_mb={}",
                unit.mem_mb,
                u64::from(g) * u64::from(self.cluster.gpu_memory_mb)
            );
            self.trace.push(rec);
            if self.is_orphaned(ev.unit) {
                self.cancel(ev.unit);
                return Ok(());
            }
            match escalate(g, self.cluster.gpus_per_node) {
                Ok(next) if unit.fixed_gpus.is_none() => {
                    let st = &mut self.units[ev.unit.index()];
                    st.status = UnitStatus::Pending;
                    st.gpu_request = next;
                }
                _ => self.fail_unit(ev.unit, "out of memory on every allowed GPU count"),
            }
            return Ok(());
        }

        let base = match unit.parent {
            Some(p) => self.units[p.index()].checkpoint.expect("parent done before child"),
            None => Checkpoint::fresh(self.seed, &self.params),
        };
        let ckpt = train_segments(&base, &take_epochs(&unit.segments, run.epochs), &self.params)?;
        self.epochs_trained += u64::from(run.epochs);
        if unit.fixed_gpus.is_none() {
            self.estimator.observe(profile);
        }
        let truncated = run.epochs < unit.length;
        rec.detail = format!("epochs={};accuracy={}", run.epochs, ckpt.validation_accuracy());
        if truncated {
            rec.detail.push_str(";truncated=1");
        }
        self.trace.push(rec);
        let st = &mut self.units[ev.unit.index()];
        if truncated {
            st.status = UnitStatus::Truncated;
            return Ok(());
        }
        st.status = UnitStatus::Done;
        st.checkpoint = Some(ckpt);
        self.pool.set_loaded(run.worker, Some(ev.unit));
        for t in &unit.covering {
            self.check_reached(t);
        }
        Ok(())
    }

    /// True when no trial that may still progress covers `u`.
    fn is_orphaned(&self, u: UnitId) -> bool {
        self.plan.unit(u).covering.iter().all(|t| {
            matches!(
                self.trials[t].status,
                TrialOutcome::Stopped | TrialOutcome::Failed
            )
        })
    }

    fn cancel(&mut self, u: UnitId) {
        self.units[u.index()].status = UnitStatus::Cancelled;
        let mut rec = TraceRecord::new(self.clock, TraceEvent::Cancel);
        rec.stage_id = self.plan.unit(u).label.clone();
        self.trace.push(rec);
    }

    /// Stops the losing trials of a decision and retires the work only they needed.
    pub fn apply_prune(&mut self, decision: &PruneDecision) {
        if decision.stopped.is_empty() {
            return;
        }
        for t in &decision.stopped {
            let ts = self.trials.get_mut(t).expect("known trial");
            if matches!(ts.status, TrialOutcome::Active | TrialOutcome::Waiting) {
                ts.status = TrialOutcome::Stopped;
                let mut rec = TraceRecord::new(self.clock, TraceEvent::TrialStopped);
                rec.trial_id = t.to_string();
                rec.detail = format!("epoch={}", decision.at_epoch);
                self.trace.push(rec);
            }
        }
        self.retire_orphans();
    }

    fn retire_orphans(&mut self) {
        for i in 0..self.units.len() {
            let u = UnitId(i as u32);
            if !self.is_orphaned(u) {
                continue;
            }
            match self.units[i].status {
                UnitStatus::Pending => self.cancel(u),
                UnitStatus::Running => self.truncate(u),
                _ => {}
            }
        }
    }

    /// Cuts a running unit short at the next epoch boundary.
    fn truncate(&mut self, u: UnitId) {
        let clock = self.clock;
        let st = &mut self.units[u.index()];
        let run = st.run.as_mut().expect("running unit has run info");
        if run.oom {
            return;
        }
        let done = ((clock - run.exec_start) / run.epoch_dur).ceil().max(0.0) as u32;
        let keep = done.min(run.epochs);
        if keep == run.epochs {
            return;
        }
        run.epochs = keep;
        st.generation += 1;
        let time = run.exec_start + f64::from(keep) * run.epoch_dur;
        self.events.push(Event {
            time,
            unit: u,
            generation: st.generation,
        });
        let mut rec = TraceRecord::new(clock, TraceEvent::Truncate);
        rec.stage_id = self.plan.unit(u).label.clone();
        rec.detail = format!("epochs={keep}");
        self.trace.push(rec);
    }

    fn fail_unit(&mut self, u: UnitId, reason: &str) {
        self.units[u.index()].status = UnitStatus::Failed;
        let mut rec = TraceRecord::new(self.clock, TraceEvent::UnitFailed);
        rec.stage_id = self.plan.unit(u).label.clone();
        rec.detail = reason.to_string();
        self.trace.push(rec);
        for t in self.plan.unit(u).covering.clone() {
            let ts = self.trials.get_mut(&t).expect("known trial");
            if matches!(ts.status, TrialOutcome::Active | TrialOutcome::Waiting) {
                ts.status = TrialOutcome::Failed;
                ts.accuracy = None;
                let mut rec = TraceRecord::new(self.clock, TraceEvent::TrialFailed);
                rec.trial_id = t.to_string();
                rec.stage_id = self.plan.unit(u).label.clone();
                self.trace.push(rec);
            }
        }
        self.retire_orphans();
    }

    fn finish(mut self) -> SimReport {
        let rungs = match &self.driver {
            // ASHA has no barrier; summarize each rung after the fact.
            Driver::Asha { state, .. } => state
                .budgets
                .iter()
                .zip(&state.rungs)
                .map(|(b, r)| RungLog {
                    at_epoch: *b,
                    entered: r.completed.len(),
                    promoted: r.promoted.len(),
                })
                .collect(),
            _ => std::mem::take(&mut self.rungs),
        };
        let count = |s: UnitStatus| self.units.iter().filter(|u| u.status == s).count();
        let gpu_busy_total: f64 = self.busy.iter().sum();
        SimReport {
            policy: self.plan.policy,
            algorithm: self.algorithm.clone(),
            end_to_end_s: self.clock,
            gpu_seconds: gpu_busy_total,
            gpu_hours: gpu_busy_total / 3600.0,
            epochs_trained: self.epochs_trained,
            units_total: self.units.len(),
            units_completed: count(UnitStatus::Done),
            units_truncated: count(UnitStatus::Truncated),
            units_cancelled: count(UnitStatus::Cancelled),
            launches: self.launches,
            oom_failures: self.oom_failures,
            checkpoint_loads: self.checkpoint_loads,
            containers_started: self.containers_started,
            containers_destroyed: self.containers_destroyed,
            launch_gpu_counts: std::mem::take(&mut self.launch_gpu_counts),
            trial_outcomes: self.trials.iter().map(|(t, s)| (t.clone(), s.status)).collect(),
            trial_epochs: self.trials.iter().map(|(t, s)| (t.clone(), s.reached)).collect(),
            trial_accuracy: self
                .trials
                .iter()
                .filter_map(|(t, s)| s.accuracy.map(|a| (t.clone(), a)))
                .collect(),
            rungs,
            gpu_busy_s: std::mem::take(&mut self.busy),
            trace: std::mem::take(&mut self.trace),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hp::{HpAssignment, Segment, TrialSpec};
    use crate::sim::WorkUnit;
    use std::collections::BTreeSet;

    fn seg(pairs: &[(&str, &str)], n: u32) -> Segment {
        Segment::new(HpAssignment::parse_pairs(pairs).unwrap(), n).unwrap()
    }

    fn lr_trial(id: &str, segs: &[(&str, u32)]) -> TrialSpec {
        let segments = segs.iter().map(|(lr, n)| seg(&[("lr", lr)], *n)).collect();
        TrialSpec::new(id, segments, 0).unwrap()
    }

    fn fig1() -> StudySpec {
        let trials = vec![
            lr_trial("T1", &[("0.1", 6), ("0.3", 4)]),
            lr_trial("T2", &[("0.1", 4), ("0.2", 3), ("0.05", 3)]),
            lr_trial("T3", &[("0.1", 4), ("0.2", 3), ("0.02", 5)]),
            lr_trial("T4", &[("0.1", 4), ("0.01", 8)]),
        ];
        StudySpec::new("fig1", "resnet", "cifar10", trials, 12).unwrap()
    }

    fn cluster(nodes: u32, per: u32) -> ClusterSpec {
        ClusterSpec {
            nodes,
            gpus_per_node: per,
            gpu_memory_mb: 12_000,
        }
    }

    fn run(study: &StudySpec, policy: Policy, c: ClusterSpec, cost: CostModel) -> SimReport {
        simulate(study, &Algorithm::Exhaustive, policy, &c, &cost, &SurrogateParams::default(), 7).unwrap()
    }

    fn sim(study: &StudySpec, algorithm: &Algorithm, c: ClusterSpec, cost: CostModel) -> Simulation {
        let plan = ExecutionPlan::build(study, Policy::StageBased, &[], &c, &SurrogateParams::default()).unwrap();
        let order = study.trials.iter().map(|t| t.id().clone()).collect();
        Simulation::new(plan, order, algorithm, c, cost, SurrogateParams::default(), 7)
    }

    fn status_of(s: &Simulation, label: &str) -> UnitStatus {
        let u = s.plan.units.iter().find(|u| u.label == label).unwrap();
        s.units[u.id.index()].status
    }

    #[test]
    fn fig1_on_two_gpus() {
        let stage = run(&fig1(), Policy::StageBased, cluster(1, 2), CostModel::default());
        let trial = run(&fig1(), Policy::TrialBased, cluster(1, 2), CostModel::default());
        assert_eq!(stage.epochs_trained, 29);
        assert_eq!(trial.epochs_trained, 44);
        assert_eq!(stage.trial_accuracy, trial.trial_accuracy);
        assert_eq!(stage.trial_accuracy.len(), 4);
        assert!(stage.gpu_hours < trial.gpu_hours);
        assert!(stage.trial_outcomes.values().all(|o| *o == TrialOutcome::Finished));
    }

    #[test]
    fn zero_overhead_ratio_is_epoch_ratio() {
        let z = CostModel::zero_overhead();
        let stage = run(&fig1(), Policy::StageBased, cluster(1, 2), z);
        let trial = run(&fig1(), Policy::TrialBased, cluster(1, 2), z);
        assert_eq!(stage.gpu_seconds, 29.0);
        assert_eq!(trial.gpu_seconds, 44.0);
        assert_eq!(trial.gpu_seconds / stage.gpu_seconds, 44.0 / 29.0);
        assert_eq!(stage.gpu_hours, 29.0 / 3600.0);
    }

    #[test]
    fn one_trial_one_gpu_policies_agree() {
        let t = lr_trial("a", &[("0.1", 5), ("0.01", 5)]);
        let study = StudySpec::new("s", "m", "d", vec![t], 10).unwrap();
        let a = run(&study, Policy::StageBased, cluster(1, 1), CostModel::default());
        let b = run(&study, Policy::TrialBased, cluster(1, 1), CostModel::default());
        assert_eq!(a.end_to_end_s, b.end_to_end_s);
        assert_eq!(a.gpu_hours, b.gpu_hours);
        assert_eq!(a.epochs_trained, b.epochs_trained);
        assert_eq!(a.trial_accuracy, b.trial_accuracy);
    }

    #[test]
    fn cold_start_oom_escalates_to_three() {
        let t = TrialSpec::new("big", vec![seg(&[("batch_size", "16000")], 4)], 0).unwrap();
        let study = StudySpec::new("s", "m", "d", vec![t], 4).unwrap();
        let r = run(&study, Policy::StageBased, cluster(1, 5), CostModel::default());
        assert_eq!(r.oom_failures, 2);
        assert_eq!(r.launch_gpu_counts, BTreeMap::from([(1, 1), (2, 1), (3, 1)]));
        assert_eq!(r.epochs_trained, 4);
        let ooms: Vec<u32> = r
            .trace
            .iter()
            .filter(|x| x.event == TraceEvent::Oom)
            .map(|x| x.gpus.unwrap())
            .collect();
        assert_eq!(ooms, vec![1, 2]);
    }

    #[test]
    fn small_batch_fits_one_gpu() {
        let t = TrialSpec::new("small", vec![seg(&[("batch_size", "128")], 10)], 0).unwrap();
        let study = StudySpec::new("s", "m", "d", vec![t], 10).unwrap();
        let r = run(&study, Policy::StageBased, cluster(1, 1), CostModel::zero_overhead());
        assert_eq!(r.oom_failures, 0);
        assert_eq!(r.end_to_end_s, 10.0);
    }

    #[test]
    fn unsatisfiable_stage_fails_trial_only() {
        let big = TrialSpec::new("big", vec![seg(&[("batch_size", "16000")], 2)], 0).unwrap();
        let ok = TrialSpec::new("ok", vec![seg(&[("batch_size", "128")], 2)], 1).unwrap();
        let study = StudySpec::new("s", "m", "d", vec![big, ok], 2).unwrap();
        let r = run(&study, Policy::StageBased, cluster(2, 2), CostModel::default());
        assert_eq!(r.trial_outcomes[&TrialId::new("big")], TrialOutcome::Failed);
        assert_eq!(r.trial_outcomes[&TrialId::new("ok")], TrialOutcome::Finished);
        assert_eq!(r.failed_trials().count(), 1);
        let t = run(&study, Policy::TrialBased, cluster(2, 2), CostModel::default());
        assert_eq!(t.trial_outcomes[&TrialId::new("big")], TrialOutcome::Failed);
    }

    #[test]
    fn dispatch_prefers_smaller_priority() {
        let a = lr_trial("a", &[("0.1", 3)]).with_priority(2);
        let b = lr_trial("b", &[("0.2", 3)]).with_priority(0);
        let study = StudySpec::new("s", "m", "d", vec![a, b], 3).unwrap();
        let mut s = sim(&study, &Algorithm::Exhaustive, cluster(1, 1), CostModel::default());
        assert_eq!(s.next_dispatch(), None);
        s.start_trials();
        let (u, g) = s.next_dispatch().unwrap();
        assert_eq!(g, 1);
        assert!(s.plan.unit(u).covering.contains(&TrialId::new("b")));
        s.dispatch().unwrap();
        // the only GPU is busy: nothing else can go
        assert_eq!(s.units.iter().filter(|u| u.status == UnitStatus::Running).count(), 1);
    }

    #[test]
    fn fig1_dispatch_order_after_root() {
        let mut study = fig1();
        for (i, t) in study.trials.iter_mut().enumerate() {
            *t = t.clone().with_priority(3 - i as i64);
        }
        let mut s = sim(&study, &Algorithm::Exhaustive, cluster(1, 1), CostModel::zero_overhead());
        s.start_trials();
        s.dispatch().unwrap();
        let ev = s.events.pop().unwrap();
        s.clock = ev.time;
        s.handle(ev).unwrap();
        // T4 has priority 0, so its child of the root goes first.
        let (u, _) = s.next_dispatch().unwrap();
        assert_eq!(s.plan.unit(u).covering, BTreeSet::from([TrialId::new("T4")]));
    }

    #[test]
    fn chain_reuses_worker_without_loading() {
        let t = lr_trial("a", &[("0.1", 2), ("0.2", 2), ("0.3", 2)]);
        let study = StudySpec::new("s", "m", "d", vec![t], 6).unwrap();
        let r = run(&study, Policy::StageBased, cluster(1, 1), CostModel::default());
        assert_eq!(r.checkpoint_loads, 0);
        assert_eq!(r.containers_started, 1);
        assert_eq!(r.end_to_end_s, 2.0 + 6.0);
    }

    #[test]
    fn other_worker_pays_checkpoint_load() {
        // The root's two children run in parallel; one lands on the root's worker.
        let study = StudySpec::new(
            "s",
            "m",
            "d",
            vec![
                lr_trial("a", &[("0.1", 2), ("0.2", 2)]),
                lr_trial("b", &[("0.1", 2), ("0.3", 2)]),
            ],
            4,
        )
        .unwrap();
        let r = run(&study, Policy::StageBased, cluster(1, 2), CostModel::default());
        assert_eq!(r.checkpoint_loads, 1);
        let loads: Vec<&str> = r
            .trace
            .iter()
            .filter(|x| x.event == TraceEvent::Launch)
            .map(|x| x.detail_value("load").unwrap())
            .collect();
        assert_eq!(loads, vec!["0", "0", "1"]);
    }

    #[test]
    fn merges_two_idle_workers_for_a_wide_stage() {
        // 1000 MB GPUs: batch 128 fits on one, batch 640 needs two.
        let c = ClusterSpec {
            nodes: 1,
            gpus_per_node: 2,
            gpu_memory_mb: 1000,
        };
        let study = StudySpec::new(
            "s",
            "m",
            "d",
            vec![
                TrialSpec::new(
                    "a",
                    vec![seg(&[("batch_size", "128")], 2), seg(&[("batch_size", "640")], 2)],
                    0,
                )
                .unwrap(),
                TrialSpec::new("b", vec![seg(&[("batch_size", "256")], 2)], 1).unwrap(),
            ],
            4,
        )
        .unwrap();
        let r = run(&study, Policy::StageBased, c, CostModel::default());
        assert_eq!(r.containers_destroyed, 2);
        let created: Vec<u32> = r
            .trace
            .iter()
            .filter(|x| x.event == TraceEvent::WorkerCreate)
            .map(|x| x.gpus.unwrap())
            .collect();
        assert_eq!(created, vec![1, 1, 2]);
        assert!(r.trial_outcomes.values().all(|o| *o == TrialOutcome::Finished));
    }

    #[test]
    fn pruning_t1_cancels_its_private_stages() {
        let mut s = sim(&fig1(), &Algorithm::Exhaustive, cluster(1, 1), CostModel::default());
        s.start_trials();
        let before: Vec<UnitStatus> = s.units.iter().map(|u| u.status).collect();
        s.apply_prune(&PruneDecision {
            at_epoch: 4,
            surviving: BTreeSet::new(),
            stopped: BTreeSet::new(),
        });
        assert_eq!(before, s.units.iter().map(|u| u.status).collect::<Vec<_>>());

        s.apply_prune(&PruneDecision {
            at_epoch: 4,
            surviving: ["T2", "T3", "T4"].into_iter().map(TrialId::new).collect(),
            stopped: BTreeSet::from([TrialId::new("T1")]),
        });
        let cancelled: Vec<&WorkUnit> = s
            .plan
            .units
            .iter()
            .filter(|u| s.units[u.id.index()].status == UnitStatus::Cancelled)
            .collect();
        assert_eq!(cancelled.len(), 2);
        for u in &cancelled {
            assert_eq!(u.covering, BTreeSet::from([TrialId::new("T1")]));
        }
        assert_eq!(status_of(&s, "s0"), UnitStatus::Pending);
        let r = s.run_loop().unwrap();
        assert_eq!(r.epochs_trained, 29 - 6);
        assert_eq!(r.trial_outcomes[&TrialId::new("T1")], TrialOutcome::Stopped);
    }

    #[test]
    fn truncation_keeps_an_epoch_boundary_checkpoint() {
        let t = lr_trial("a", &[("0.1", 10)]);
        let study = StudySpec::new("s", "m", "d", vec![t], 10).unwrap();
        let mut s = sim(&study, &Algorithm::Exhaustive, cluster(1, 1), CostModel::zero_overhead());
        s.start_trials();
        s.dispatch().unwrap();
        s.clock = 2.5;
        s.apply_prune(&PruneDecision {
            at_epoch: 2,
            surviving: BTreeSet::new(),
            stopped: BTreeSet::from([TrialId::new("a")]),
        });
        let r = s.run_loop().unwrap();
        assert_eq!(r.epochs_trained, 3);
        assert_eq!(r.end_to_end_s, 3.0);
        assert_eq!(r.units_truncated, 1);
        let acc: f64 = r
            .trace
            .iter()
            .find(|x| x.event == TraceEvent::Complete)
            .and_then(|x| x.detail_value("accuracy"))
            .unwrap()
            .parse()
            .unwrap();
        let p = SurrogateParams::default();
        let lr = HpAssignment::parse_pairs(&[("lr", "0.1")]).unwrap();
        let want = crate::surrogate::train(&Checkpoint::fresh(7, &p), &lr, 3, &p).unwrap();
        assert_eq!(acc, want.validation_accuracy());
    }

    #[test]
    fn sha_funnel_small() {
        let trials: Vec<TrialSpec> = (0..9)
            .map(|i| lr_trial(&format!("t{i}"), &[(["0.5", "0.2", "0.05"][i % 3], 3), ("0.01", 6)]))
            .collect();
        let study = StudySpec::new("s", "m", "d", trials, 9).unwrap();
        let alg = Algorithm::Sha(RungSpec {
            rung_epochs: vec![2, 5],
            eta: 3,
        });
        for policy in [Policy::StageBased, Policy::TrialBased] {
            let r = simulate(&study, &alg, policy, &cluster(1, 2), &CostModel::default(), &SurrogateParams::default(), 1)
                .unwrap();
            let funnel: Vec<(usize, usize)> = r.rungs.iter().map(|x| (x.entered, x.promoted)).collect();
            assert_eq!(funnel, vec![(9, 3), (3, 1)], "{policy}");
            assert_eq!(r.trial_outcomes.values().filter(|o| **o == TrialOutcome::Finished).count(), 1);
        }
    }

    #[test]
    fn asha_runs_to_completion() {
        let trials: Vec<TrialSpec> = (0..12)
            .map(|i| lr_trial(&format!("t{i:02}"), &[(["0.5", "0.2", "0.1", "0.05"][i % 4], 4), ("0.01", 5)]))
            .collect();
        let study = StudySpec::new("s", "m", "d", trials, 9).unwrap();
        let alg = Algorithm::Asha(crate::algo::AshaParams {
            max_resource: 9,
            min_resource: 1,
            eta: 3,
            min_early_stopping_rate: 0,
        });
        for policy in [Policy::StageBased, Policy::TrialBased] {
            let r = simulate(&study, &alg, policy, &cluster(1, 2), &CostModel::default(), &SurrogateParams::default(), 1)
                .unwrap();
            assert_eq!(r.rungs[0].entered, 12, "{policy}");
            assert!(r.trial_outcomes.values().any(|o| *o == TrialOutcome::Finished));
            assert!(r.trial_outcomes.values().all(|o| *o != TrialOutcome::Active));
        }
    }
}
