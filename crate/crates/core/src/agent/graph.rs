use serde::{Deserialize, Serialize};

use crate::env::ScheduleState;
use crate::instance::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeFeature {
    pub done: f64,
    pub clb_scaled: f64,
}

impl NodeFeature {
    pub fn as_array(&self) -> [f64; 2] {
        [self.done, self.clb_scaled]
    }
}

/// An eligible job and the node of its next task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub job: usize,
    pub node: usize,
}

/// Snapshot of the task graph: node features plus in-neighbour lists.
///
/// Every node receives messages from itself, its job predecessor and successor,
/// and its neighbours in the machine sequence once it has been scheduled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGraph {
    pub features: Vec<NodeFeature>,
    offsets: Vec<usize>,
    adjacency: Vec<usize>,
    pub candidates: Vec<Candidate>,
}

impl TaskGraph {
    pub fn from_state(state: &ScheduleState, clb_scale: f64) -> Self {
        let inst = state.instance();
        let (n_jobs, n_mach) = (inst.n_jobs(), inst.n_machines());
        let n = inst.n_tasks();

        // machine neighbours of each scheduled node
        let mut mpred = vec![usize::MAX; n];
        let mut msucc = vec![usize::MAX; n];
        for m in 0..n_mach {
            for w in state.machine_seq(m).windows(2) {
                let (a, b) = (inst.node(w[0]), inst.node(w[1]));
                msucc[a] = b;
                mpred[b] = a;
            }
        }

        let mut features = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(n + 1);
        let mut adjacency = Vec::with_capacity(n * 5);
        offsets.push(0);
        let clb = state.clb_flat();
        for j in 0..n_jobs {
            for k in 0..n_mach {
                let v = j * n_mach + k;
                features.push(NodeFeature {
                    done: if state.is_scheduled(TaskId::new(j, k)) { 1.0 } else { 0.0 },
                    clb_scaled: clb[v] as f64 / clb_scale,
                });
                adjacency.push(v);
                if k > 0 {
                    adjacency.push(v - 1);
                }
                if k + 1 < n_mach {
                    adjacency.push(v + 1);
                }
                for other in [mpred[v], msucc[v]] {
                    if other != usize::MAX {
                        adjacency.push(other);
                    }
                }
                offsets.push(adjacency.len());
            }
        }
        let candidates = state
            .eligible_actions()
            .into_iter()
            .map(|job| Candidate {
                job,
                node: inst.node(state.next_task(job).unwrap()),
            })
            .collect();
        TaskGraph {
            features,
            offsets,
            adjacency,
            candidates,
        }
    }

    /// Builds a graph directly from parts; `neighbors[v]` lists the in-neighbours of `v`.
    pub fn from_parts(features: Vec<NodeFeature>, neighbors: &[Vec<usize>], candidates: Vec<Candidate>) -> Self {
        let mut offsets = vec![0];
        let mut adjacency = Vec::new();
        for list in neighbors {
            adjacency.extend_from_slice(list);
            offsets.push(adjacency.len());
        }
        TaskGraph {
            features,
            offsets,
            adjacency,
            candidates,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.features.len()
    }

    #[inline]
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[self.offsets[v]..self.offsets[v + 1]]
    }
}
