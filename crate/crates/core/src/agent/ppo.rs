//! Clipped-surrogate policy optimization with generalized advantage estimation.

use serde::{Deserialize, Serialize};

use super::graph::TaskGraph;
use super::network::{backward, forward, PolicyParams};
use super::{Distribution, Policy};
use crate::error::{Error, Result};
use crate::instance::Time;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Episodes collected before each update.
    pub episodes_per_update: usize,
    pub normalize_advantages: bool,
    /// Global gradient-norm clip; `None` disables it.
    pub max_grad_norm: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            gamma: 1.0,
            gae_lambda: 0.98,
            entropy_coef: 0.01,
            value_coef: 0.5,
            epochs: 1,
            learning_rate: 2e-4,
            episodes_per_update: 1,
            normalize_advantages: true,
            max_grad_norm: Some(1.0),
        }
    }
}

impl PpoConfig {
    /// Steadier settings for short runs of a few thousand episodes.
    pub fn desk() -> Self {
        PpoConfig {
            learning_rate: 5e-4,
            episodes_per_update: 4,
            ..PpoConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.episodes_per_update == 0 {
            return Err(Error::Config("epochs and episodes_per_update must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || self.clip.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config("learning rate must be finite and >= 0, clip > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub graph: TaskGraph,
    /// Index of the chosen candidate in `graph.candidates`.
    pub action: usize,
    pub job: usize,
    pub probs: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
    pub reward: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instance_id: usize,
    pub initial_lower_bound: Time,
    pub makespan: Time,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn total_reward(&self) -> i64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// GAE advantages and value targets for one episode; rewards are divided by `reward_scale`.
pub fn compute_advantages(traj: &Trajectory, cfg: &PpoConfig, reward_scale: f64) -> (Vec<f64>, Vec<f64>) {
    let n = traj.steps.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { traj.steps[t + 1].value } else { 0.0 };
        let s = &traj.steps[t];
        let delta = s.reward as f64 / reward_scale + cfg.gamma * next_value - s.value;
        running = delta + cfg.gamma * cfg.gae_lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(&traj.steps).map(|(a, s)| a + s.value).collect();
    (adv, returns)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total_loss: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub steps: usize,
}

/// One flattened training sample.
pub struct Sample<'a> {
    pub graph: &'a TaskGraph,
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub target: f64,
}

/// Mean loss over `samples` and its gradient w.r.t. `params`.
pub fn batch_loss_and_gradient(
    params: &PolicyParams,
    samples: &[Sample<'_>],
    cfg: &PpoConfig,
) -> (UpdateStats, PolicyParams) {
    let mut grad = params.zeros_like();
    let mut stats = UpdateStats {
        steps: samples.len(),
        ..Default::default()
    };
    let inv_n = 1.0 / samples.len() as f64;
    let mut clipped = 0usize;
    for s in samples {
        let f = forward(params, s.graph);
        let jobs: Vec<usize> = s.graph.candidates.iter().map(|c| c.job).collect();
        let width = jobs.iter().max().map_or(0, |j| j + 1);
        let dist = Distribution::from_logits(jobs, &f.logits, width);
        let logp = dist.log_probs[s.action];
        let ratio = (logp - s.old_log_prob).exp();
        let clipped_ratio = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        let surr1 = ratio * s.advantage;
        let surr2 = clipped_ratio * s.advantage;
        let entropy = dist.entropy();
        let verr = f.value - s.target;

        stats.policy_loss -= surr1.min(surr2) * inv_n;
        stats.value_loss += verr * verr * inv_n;
        stats.entropy += entropy * inv_n;
        if surr2 < surr1 {
            clipped += 1;
        }

        // d(total)/d(logit_i)
        let mut dlogits = vec![0.0; dist.probs.len()];
        if surr1 <= surr2 {
            let coef = -s.advantage * ratio * inv_n;
            for (i, d) in dlogits.iter_mut().enumerate() {
                let onehot = if i == s.action { 1.0 } else { 0.0 };
                *d += coef * (onehot - dist.probs[i]);
            }
        }
        if cfg.entropy_coef != 0.0 {
            for (i, d) in dlogits.iter_mut().enumerate() {
                // dH/dlogit_i = -p_i (log p_i + H); loss carries -c_e H
                *d += cfg.entropy_coef * inv_n * dist.probs[i] * (dist.log_probs[i] + entropy);
            }
        }
        let dvalue = 2.0 * cfg.value_coef * verr * inv_n;
        backward(params, s.graph, &f, &dlogits, dvalue, &mut grad);
    }
    stats.total_loss = stats.policy_loss + cfg.value_coef * stats.value_loss - cfg.entropy_coef * stats.entropy;
    stats.clip_fraction = clipped as f64 * inv_n;
    (stats, grad)
}

/// Adam optimizer state, one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &PolicyParams) -> Self {
        let shapes: Vec<usize> = params.named_tensors().iter().map(|t| t.2.len()).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grad: &mut PolicyParams, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors_mut())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

fn global_norm(grad: &mut PolicyParams) -> f64 {
    grad.tensors_mut()
        .iter()
        .flat_map(|t| t.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

fn diagnostic(batch: &[Trajectory], advantages: &[f64]) -> String {
    let mut bad = Vec::new();
    let mut k = 0;
    for tr in batch {
        for (t, s) in tr.steps.iter().enumerate() {
            if !(s.value.is_finite() && s.log_prob.is_finite() && advantages[k].is_finite()) && bad.len() < 8 {
                bad.push(format!(
                    "instance {} step {t}: reward={} value={} log_prob={} advantage={}",
                    tr.instance_id, s.reward, s.value, s.log_prob, advantages[k]
                ));
            }
            k += 1;
        }
    }
    format!(
        "batch of {} episodes ({} steps); offending steps: [{}]",
        batch.len(),
        k,
        bad.join("; ")
    )
}

/// Runs `cfg.epochs` full-batch updates over `batch`.
pub fn ppo_update(policy: &mut Policy, adam: &mut Adam, batch: &[Trajectory], cfg: &PpoConfig) -> Result<UpdateStats> {
    if batch.is_empty() || batch.iter().all(|t| t.steps.is_empty()) {
        return Err(Error::Precondition("ppo_update needs a non-empty batch".into()));
    }
    let scale = policy.config.clb_scale;
    let mut advantages = Vec::new();
    let mut targets = Vec::new();
    for tr in batch {
        let (a, r) = compute_advantages(tr, cfg, scale);
        advantages.extend(a);
        targets.extend(r);
    }
    if cfg.normalize_advantages && advantages.len() > 1 {
        let n = advantages.len() as f64;
        let mean = advantages.iter().sum::<f64>() / n;
        let std = (advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        for a in &mut advantages {
            *a -= mean;
            if std > 1e-8 {
                *a /= std;
            }
        }
    }
    let samples: Vec<Sample<'_>> = batch
        .iter()
        .flat_map(|tr| tr.steps.iter())
        .zip(advantages.iter().zip(&targets))
        .map(|(s, (&advantage, &target))| Sample {
            graph: &s.graph,
            action: s.action,
            old_log_prob: s.log_prob,
            advantage,
            target,
        })
        .collect();

    let mut stats = UpdateStats::default();
    for _ in 0..cfg.epochs {
        let (st, mut grad) = batch_loss_and_gradient(&policy.params, &samples, cfg);
        if !st.total_loss.is_finite() {
            return Err(Error::NonFinite(diagnostic(batch, &advantages)));
        }
        let norm = global_norm(&mut grad);
        if let Some(max) = cfg.max_grad_norm {
            if norm > max {
                let s = max / norm;
                grad.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|x| *x *= s));
            }
        }
        adam.step(&mut policy.params, &mut grad, cfg.learning_rate);
        stats = UpdateStats { grad_norm: norm, ..st };
    }
    if !policy.params.is_finite() {
        return Err(Error::NonFinite(format!(
            "parameters became non-finite; {}",
            diagnostic(batch, &advantages)
        )));
    }
    Ok(stats)
}
