//! Graph policy over the task graph and its clipped policy-gradient training.

mod checkpoint;
mod graph;
mod network;
mod ppo;

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use graph::{Candidate, NodeFeature, TaskGraph};
pub use network::{backward, forward, Forward, Linear, PolicyParams, Propagation};
pub use ppo::{
    batch_loss_and_gradient, compute_advantages, ppo_update, Adam, PpoConfig, Sample, StepRecord, Trajectory,
    UpdateStats,
};

use crate::env::ScheduleState;
use crate::error::{Error, Result};
use crate::instance::{JsspInstance, Time};
use crate::seed;

/// Network shape and feature scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Message-passing rounds `K`.
    pub layers: usize,
    /// Embedding width `H`.
    pub hidden: usize,
    /// Divisor for completion lower bounds and rewards.
    pub clb_scale: f64,
    /// Parameter-initialization seed.
    pub seed: u64,
}

impl AgentConfig {
    /// Defaults for `n_machines` machines with processing times up to `max_time`.
    pub fn for_dataset(n_machines: usize, max_time: Time, seed: u64) -> Self {
        AgentConfig {
            layers: 2,
            hidden: 64,
            clb_scale: (n_machines as f64) * (max_time as f64),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || !(self.clb_scale > 0.0 && self.clb_scale.is_finite()) {
            return Err(Error::Config(format!(
                "agent needs hidden >= 1 and a positive clb scale, got hidden={} scale={}",
                self.hidden, self.clb_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub config: AgentConfig,
    pub params: PolicyParams,
}

impl Policy {
    pub fn new(config: AgentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng_for(config.seed, 0x1417);
        let params = PolicyParams::new(config.layers, config.hidden, &mut rng);
        Ok(Policy { config, params })
    }

    pub fn observe(&self, state: &ScheduleState) -> TaskGraph {
        TaskGraph::from_state(state, self.config.clb_scale)
    }
}

/// Node embeddings (`n_nodes * H`, row-major) and the summed graph embedding.
pub fn embed(params: &PolicyParams, graph: &TaskGraph) -> (Vec<f64>, Vec<f64>) {
    let f = forward(params, graph);
    (f.node_embeddings().to_vec(), f.graph)
}

/// Action distribution over a state's eligible jobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    /// Eligible jobs in ascending order.
    pub jobs: Vec<usize>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Probability per job index; ineligible jobs are exactly zero.
    pub full: Vec<f64>,
}

impl Distribution {
    pub fn from_logits(jobs: Vec<usize>, logits: &[f64], n_jobs: usize) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_z = max + sum.ln();
        let log_probs: Vec<f64> = logits.iter().map(|l| l - log_z).collect();
        let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
        let mut full = vec![0.0; n_jobs];
        for (&j, &p) in jobs.iter().zip(&probs) {
            full[j] = p;
        }
        Distribution {
            jobs,
            probs,
            log_probs,
            full,
        }
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().zip(&self.log_probs).map(|(p, lp)| p * lp).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Sample,
    Greedy,
}

pub fn policy_forward(policy: &Policy, state: &ScheduleState) -> Result<(Distribution, f64)> {
    if state.is_done() {
        return Err(Error::Precondition("policy queried on a terminal state".into()));
    }
    let graph = policy.observe(state);
    let f = forward(&policy.params, &graph);
    let jobs = graph.candidates.iter().map(|c| c.job).collect();
    Ok((
        Distribution::from_logits(jobs, &f.logits, state.instance().n_jobs()),
        f.value,
    ))
}

/// Returns the index into `dist.jobs` of the chosen action.
pub fn select_index(dist: &Distribution, mode: SelectMode, rng: &mut dyn RngCore) -> usize {
    match mode {
        SelectMode::Greedy => {
            let mut best = 0;
            for (i, &p) in dist.probs.iter().enumerate() {
                if p > dist.probs[best] {
                    best = i;
                }
            }
            best
        }
        SelectMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, &p) in dist.probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            dist.probs.iter().rposition(|&p| p > 0.0).unwrap_or(dist.probs.len() - 1)
        }
    }
}

pub fn select_action(dist: &Distribution, mode: SelectMode, rng: &mut dyn RngCore) -> usize {
    dist.jobs[select_index(dist, mode, rng)]
}

/// Plays one full episode, recording everything the update needs.
pub fn collect_episode(policy: &Policy, instance: Arc<JsspInstance>, mode: SelectMode, rng: &mut dyn RngCore) -> Trajectory {
    let mut state = ScheduleState::reset(instance);
    let initial_lower_bound = state.lower_bound();
    let mut steps = Vec::with_capacity(state.instance().n_tasks());
    while !state.is_done() {
        let graph = policy.observe(&state);
        let f = forward(&policy.params, &graph);
        let jobs: Vec<usize> = graph.candidates.iter().map(|c| c.job).collect();
        let dist = Distribution::from_logits(jobs, &f.logits, state.instance().n_jobs());
        let idx = select_index(&dist, mode, rng);
        let job = dist.jobs[idx];
        let out = state.step(job).expect("selected job is eligible");
        steps.push(StepRecord {
            graph,
            action: idx,
            job,
            probs: dist.probs,
            log_prob: dist.log_probs[idx],
            value: f.value,
            reward: out.reward,
        });
    }
    Trajectory {
        instance_id: state.instance().id,
        initial_lower_bound,
        makespan: state.makespan().expect("terminal"),
        steps,
    }
}

/// Makespan of the greedy policy on `instance`.
pub fn greedy_makespan(policy: &Policy, instance: Arc<JsspInstance>) -> Time {
    let mut state = ScheduleState::reset(instance);
    while !state.is_done() {
        let graph = policy.observe(&state);
        let f = forward(&policy.params, &graph);
        let mut best = 0;
        for (i, &l) in f.logits.iter().enumerate() {
            if l > f.logits[best] {
                best = i;
            }
        }
        state.step(graph.candidates[best].job).expect("eligible");
    }
    state.makespan().expect("terminal")
}
