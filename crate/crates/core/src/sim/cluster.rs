//! Worker pool over a fixed set of nodes and GPUs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::plan::UnitId;
use super::{ClusterSpec, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct WorkerId(pub u32);

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

/// A containerized worker process holding GPUs of a single node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Worker {
    pub id: WorkerId,
    pub node: u32,
    /// Global GPU ids, ascending.
    pub gpus: Vec<u32>,
    /// Unit whose end state is resident in this worker.
    pub loaded: Option<UnitId>,
    pub busy: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub worker: WorkerId,
    pub created: bool,
    pub destroyed: Vec<WorkerId>,
    pub checkpoint_load: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuLabel {
    pub node: u32,
    pub index: u32,
}

#[derive(Debug, Clone)]
pub struct WorkerPool {
    spec: ClusterSpec,
    free: Vec<BTreeSet<u32>>,
    workers: BTreeMap<WorkerId, Worker>,
    next_id: u32,
}

impl WorkerPool {
    pub fn new(spec: ClusterSpec) -> Self {
        let free = (0..spec.nodes)
            .map(|n| (0..spec.gpus_per_node).map(|i| n * spec.gpus_per_node + i).collect())
            .collect();
        WorkerPool {
            spec,
            free,
            workers: BTreeMap::new(),
            next_id: 0,
        }
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn worker(&self, id: WorkerId) -> Option<&Worker> {
        self.workers.get(&id)
    }

    pub fn workers(&self) -> impl Iterator<Item = &Worker> {
        self.workers.values()
    }

    pub fn free_gpus(&self, node: u32) -> usize {
        self.free[node as usize].len()
    }

    pub fn gpu_label(&self, gpu: u32) -> GpuLabel {
        GpuLabel {
            node: gpu / self.spec.gpus_per_node,
            index: gpu % self.spec.gpus_per_node,
        }
    }

    /// Finds or builds an idle worker with exactly `gpus` GPUs.
    ///
    /// Preference: an idle worker of that size already holding `parent`'s
    /// checkpoint; any idle worker of that size; a new worker assembled on
    /// one node from free GPUs and destroyed idle workers. `Ok(None)` means
    /// the caller has to wait for running work to finish.
    pub fn place(&mut self, gpus: u32, parent: Option<UnitId>) -> Result<Option<Placement>, SimError> {
        if gpus == 0 || gpus > self.spec.gpus_per_node {
            return Err(SimError::Unsatisfiable {
                gpus,
                limit: self.spec.gpus_per_node,
            });
        }
        let idle_exact = || {
            self.workers
                .values()
                .filter(|w| !w.busy && w.gpus.len() == gpus as usize)
        };
        if let Some(p) = parent {
            if let Some(w) = idle_exact().find(|w| w.loaded == Some(p)) {
                return Ok(Some(Placement {
                    worker: w.id,
                    created: false,
                    destroyed: Vec::new(),
                    checkpoint_load: false,
                }));
            }
        }
        if let Some(w) = idle_exact().next() {
            return Ok(Some(Placement {
                worker: w.id,
                created: false,
                destroyed: Vec::new(),
                checkpoint_load: parent.is_some(),
            }));
        }

        // Assemble on the node that needs the fewest workers destroyed.
        let mut best: Option<(usize, u32, Vec<WorkerId>)> = None;
        for node in 0..self.spec.nodes {
            let mut have = self.free[node as usize].len();
            let mut victims = Vec::new();
            if have < gpus as usize {
                let mut idle: Vec<&Worker> = self
                    .workers
                    .values()
                    .filter(|w| !w.busy && w.node == node)
                    .collect();
                idle.sort_by_key(|w| (w.gpus.len(), w.id));
                for w in idle {
                    if have >= gpus as usize {
                        break;
                    }
                    have += w.gpus.len();
                    victims.push(w.id);
                }
            }
            if have >= gpus as usize && best.as_ref().is_none_or(|b| victims.len() < b.0) {
                best = Some((victims.len(), node, victims));
            }
        }
        let Some((_, node, victims)) = best else {
            return Ok(None);
        };
        for v in &victims {
            let w = self.workers.remove(v).expect("victim exists");
            self.free[node as usize].extend(w.gpus);
        }
        let taken: Vec<u32> = self.free[node as usize].iter().copied().take(gpus as usize).collect();
        for g in &taken {
            self.free[node as usize].remove(g);
        }
        let id = WorkerId(self.next_id);
        self.next_id += 1;
        self.workers.insert(
            id,
            Worker {
                id,
                node,
                gpus: taken,
                loaded: None,
                busy: false,
            },
        );
        Ok(Some(Placement {
            worker: id,
            created: true,
            destroyed: victims,
            checkpoint_load: parent.is_some(),
        }))
    }

    pub fn set_busy(&mut self, id: WorkerId, busy: bool) {
        if let Some(w) = self.workers.get_mut(&id) {
            w.busy = busy;
        }
    }

    pub fn set_loaded(&mut self, id: WorkerId, loaded: Option<UnitId>) {
        if let Some(w) = self.workers.get_mut(&id) {
            w.loaded = loaded;
        }
    }

    /// Every GPU belongs to at most one worker and to none if it is free.
    pub fn check_exclusive(&self) -> bool {
        let mut seen = BTreeSet::new();
        for (node, free) in self.free.iter().enumerate() {
            for g in free {
                if !seen.insert(*g) || g / self.spec.gpus_per_node != node as u32 {
                    return false;
                }
            }
        }
        for w in self.workers.values() {
            for g in &w.gpus {
                if !seen.insert(*g) || g / self.spec.gpus_per_node != w.node {
                    return false;
                }
            }
        }
        seen.len() == (self.spec.nodes * self.spec.gpus_per_node) as usize
    }
}
