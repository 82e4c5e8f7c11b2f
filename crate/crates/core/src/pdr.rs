//! Priority dispatching rules.
//!
//! Every rule implements [`DispatchRule`] and is registered by name in a
//! [`RuleRegistry`]. A rollout repeatedly dispatches the eligible job with the
//! highest priority, breaking ties towards the lowest job index.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::ScheduleState;
use crate::error::{Error, Result};
use crate::exact::gap;
use crate::instance::{JsspInstance, Time};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PdrKind {
    #[serde(rename = "SPT")]
    Spt,
    #[serde(rename = "LPT")]
    Lpt,
    #[serde(rename = "MTR")]
    Mtr,
    #[serde(rename = "LRPT")]
    Lrpt,
    #[serde(rename = "LOUM")]
    Loum,
    #[serde(rename = "MPTLOM")]
    Mptlom,
    #[serde(rename = "RANDOM")]
    Random,
}

impl PdrKind {
    pub const ALL: [PdrKind; 7] = [
        PdrKind::Spt,
        PdrKind::Lpt,
        PdrKind::Mtr,
        PdrKind::Lrpt,
        PdrKind::Loum,
        PdrKind::Mptlom,
        PdrKind::Random,
    ];

    /// Rules that are a deterministic function of the state.
    pub const DETERMINISTIC: [PdrKind; 6] = [
        PdrKind::Spt,
        PdrKind::Lpt,
        PdrKind::Mtr,
        PdrKind::Lrpt,
        PdrKind::Loum,
        PdrKind::Mptlom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PdrKind::Spt => "SPT",
            PdrKind::Lpt => "LPT",
            PdrKind::Mtr => "MTR",
            PdrKind::Lrpt => "LRPT",
            PdrKind::Loum => "LOUM",
            PdrKind::Mptlom => "MPTLOM",
            PdrKind::Random => "RANDOM",
        }
    }
}

impl fmt::Display for PdrKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PdrKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PdrKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown dispatching rule {s:?}")))
    }
}

/// A dispatching rule scores an eligible job; higher scores are dispatched first.
pub trait DispatchRule: Send + Sync {
    fn kind(&self) -> PdrKind;

    /// Priority of `job`, which the caller guarantees to be eligible.
    fn priority(&self, state: &ScheduleState, job: usize, rng: &mut dyn RngCore) -> f64;
}

fn next_duration(state: &ScheduleState, job: usize) -> Time {
    state.instance().duration(state.next_task(job).expect("eligible job"))
}

fn remaining_work(state: &ScheduleState, job: usize) -> Time {
    state.instance().proc_time[job][state.next_pos(job)..].iter().sum()
}

/// Unscheduled processing time still queued for the machine of `job`'s next task.
fn machine_backlog(state: &ScheduleState, job: usize) -> Time {
    let inst = state.instance();
    let machine = inst.machine(state.next_task(job).expect("eligible job"));
    (0..inst.n_jobs())
        .filter_map(|j| {
            let pos = inst.machine_order[j].iter().position(|&m| m == machine)?;
            (pos >= state.next_pos(j)).then(|| inst.proc_time[j][pos])
        })
        .sum()
}

pub struct ShortestProcessingTime;
pub struct LongestProcessingTime;
pub struct MostTasksRemaining;
pub struct LongestRemainingProcessingTime;
pub struct MostWorkLeftOnMachine;
pub struct LeastWorkLeftOnMachine;
pub struct RandomPriority;

impl DispatchRule for ShortestProcessingTime {
    fn kind(&self) -> PdrKind {
        PdrKind::Spt
    }
    fn priority(&self, state: &ScheduleState, job: usize, _: &mut dyn RngCore) -> f64 {
        -(next_duration(state, job) as f64)
    }
}

impl DispatchRule for LongestProcessingTime {
    fn kind(&self) -> PdrKind {
        PdrKind::Lpt
    }
    fn priority(&self, state: &ScheduleState, job: usize, _: &mut dyn RngCore) -> f64 {
        next_duration(state, job) as f64
    }
}

impl DispatchRule for MostTasksRemaining {
    fn kind(&self) -> PdrKind {
        PdrKind::Mtr
    }
    fn priority(&self, state: &ScheduleState, job: usize, _: &mut dyn RngCore) -> f64 {
        (state.instance().n_machines() - state.next_pos(job)) as f64
    }
}

impl DispatchRule for LongestRemainingProcessingTime {
    fn kind(&self) -> PdrKind {
        PdrKind::Lrpt
    }
    fn priority(&self, state: &ScheduleState, job: usize, _: &mut dyn RngCore) -> f64 {
        remaining_work(state, job) as f64
    }
}

impl DispatchRule for MostWorkLeftOnMachine {
    fn kind(&self) -> PdrKind {
        PdrKind::Mptlom
    }
    fn priority(&self, state: &ScheduleState, job: usize, _: &mut dyn RngCore) -> f64 {
        machine_backlog(state, job) as f64
    }
}

// LOUM has no published expansion; this reads it as the mirror image of MPTLOM.
impl DispatchRule for LeastWorkLeftOnMachine {
    fn kind(&self) -> PdrKind {
        PdrKind::Loum
    }
    fn priority(&self, state: &ScheduleState, job: usize, _: &mut dyn RngCore) -> f64 {
        -(machine_backlog(state, job) as f64)
    }
}

impl DispatchRule for RandomPriority {
    fn kind(&self) -> PdrKind {
        PdrKind::Random
    }
    fn priority(&self, _: &ScheduleState, _: usize, rng: &mut dyn RngCore) -> f64 {
        rng.random::<f64>()
    }
}

/// Name-indexed collection of dispatching rules.
pub struct RuleRegistry {
    rules: BTreeMap<String, Arc<dyn DispatchRule>>,
}

impl Default for RuleRegistry {
    /// Registry holding all seven built-in rules.
    fn default() -> Self {
        let mut reg = RuleRegistry::empty();
        reg.register(ShortestProcessingTime);
        reg.register(LongestProcessingTime);
        reg.register(MostTasksRemaining);
        reg.register(LongestRemainingProcessingTime);
        reg.register(LeastWorkLeftOnMachine);
        reg.register(MostWorkLeftOnMachine);
        reg.register(RandomPriority);
        reg
    }
}

impl RuleRegistry {
    pub fn empty() -> Self {
        RuleRegistry { rules: BTreeMap::new() }
    }

    /// Registers `rule` under its kind's name, replacing any previous entry.
    pub fn register<R: DispatchRule + 'static>(&mut self, rule: R) {
        self.rules.insert(rule.kind().name().to_string(), Arc::new(rule));
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn DispatchRule>> {
        let kind: PdrKind = name.parse()?;
        self.rules
            .get(kind.name())
            .cloned()
            .ok_or_else(|| Error::Config(format!("rule {name} is not registered")))
    }

    pub fn rule(&self, kind: PdrKind) -> Arc<dyn DispatchRule> {
        self.get(kind.name()).expect("built-in rule registered")
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.rules.keys().map(String::as_str)
    }
}

/// Priority of `job` under `kind`; errors if the job is not eligible.
pub fn priority(kind: PdrKind, state: &ScheduleState, job: usize, rng: &mut dyn RngCore) -> Result<f64> {
    if !state.is_eligible(job) {
        return Err(Error::Precondition(format!("job {job} is not eligible")));
    }
    Ok(RuleRegistry::default().rule(kind).priority(state, job, rng))
}

/// Picks the highest-priority eligible job, lowest index on ties.
pub fn choose(rule: &dyn DispatchRule, state: &ScheduleState, rng: &mut dyn RngCore) -> usize {
    let mut best = None;
    let mut best_score = f64::NEG_INFINITY;
    for job in state.eligible_actions() {
        let score = rule.priority(state, job, rng);
        if best.is_none() || score > best_score {
            best = Some(job);
            best_score = score;
        }
    }
    best.expect("state has an eligible job")
}

/// Full rollout of `rule` on `instance`. RANDOM draws from a stream derived from `(seed, instance.id)`.
pub fn rollout(rule: &dyn DispatchRule, instance: Arc<JsspInstance>, seed: u64) -> (ScheduleState, Time) {
    let mut rng = seed::rng_for(seed, instance.id as u64);
    let mut state = ScheduleState::reset(instance);
    while !state.is_done() {
        let job = choose(rule, &state, &mut rng);
        state.step(job).expect("chosen job is eligible");
    }
    let ms = state.makespan().expect("terminal");
    (state, ms)
}

pub fn solve_with_pdr(instance: &JsspInstance, kind: PdrKind, seed: u64) -> (ScheduleState, Time) {
    rollout(&*RuleRegistry::default().rule(kind), Arc::new(instance.clone()), seed)
}

/// Per-instance makespans of every rule in `kinds`, indexed `[kind][instance]`.
pub fn makespan_table(instances: &[JsspInstance], kinds: &[PdrKind], seed: u64) -> Vec<Vec<Time>> {
    let registry = RuleRegistry::default();
    let rules: Vec<_> = kinds.iter().map(|&k| registry.rule(k)).collect();
    let per_instance: Vec<Vec<Time>> = instances
        .par_iter()
        .map(|inst| {
            let arc = Arc::new(inst.clone());
            rules.iter().map(|r| rollout(&**r, arc.clone(), seed).1).collect()
        })
        .collect();
    (0..kinds.len())
        .map(|k| per_instance.iter().map(|row| row[k]).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRow {
    pub kind: PdrKind,
    pub mean_gap: f64,
    pub mean_makespan: f64,
    pub n_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteTable {
    pub rows: Vec<SuiteRow>,
    /// Kind with the smallest mean gap; ties go to the earlier kind in [`PdrKind::ALL`].
    pub best: PdrKind,
}

impl SuiteTable {
    pub fn row(&self, kind: PdrKind) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    pub fn mean_gap(&self, kind: PdrKind) -> f64 {
        self.row(kind).map_or(f64::NAN, |r| r.mean_gap)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,mean_gap,mean_makespan,n_instances\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.4},{}\n", r.kind, r.mean_gap, r.mean_makespan, r.n_instances));
        }
        out
    }
}

/// Mean optimality gap of every rule against the aligned `optima`.
pub fn evaluate_suite(instances: &[JsspInstance], optima: &[Time], seed: u64) -> Result<SuiteTable> {
    if instances.len() != optima.len() {
        return Err(Error::Validation(format!(
            "{} instances but {} optima",
            instances.len(),
            optima.len()
        )));
    }
    if instances.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty suite".into()));
    }
    let table = makespan_table(instances, &PdrKind::ALL, seed);
    let n = instances.len() as f64;
    let mut rows = Vec::with_capacity(PdrKind::ALL.len());
    for (kind, makespans) in PdrKind::ALL.iter().zip(&table) {
        let mut gap_sum = 0.0;
        for (inst, (&ms, &opt)) in instances.iter().zip(makespans.iter().zip(optima)) {
            gap_sum += gap(ms, opt).map_err(|e| match e {
                Error::Integrity(msg) => Error::Integrity(format!("{kind} on instance {}: {msg}", inst.id)),
                other => other,
            })?;
        }
        rows.push(SuiteRow {
            kind: *kind,
            mean_gap: gap_sum / n,
            mean_makespan: makespans.iter().map(|&m| m as f64).sum::<f64>() / n,
            n_instances: instances.len(),
        });
    }
    let best = rows
        .iter()
        .fold(None::<&SuiteRow>, |acc, r| match acc {
            Some(a) if a.mean_gap <= r.mean_gap => Some(a),
            _ => Some(r),
        })
        .unwrap()
        .kind;
    Ok(SuiteTable { rows, best })
}
