//! Exact makespan minimization for small instances.
//!
//! [`solve_optimal`] is a depth-first branch-and-bound over active schedules.
//! Each node branches on the Giffler-Thompson conflict set: among the tasks
//! that could complete earliest, the ones on the same machine that could start
//! before that completion time. Nodes are bounded by the larger of a job-chain
//! bound and a per-machine preemptive one-machine bound (Jackson's preemptive
//! schedule with heads and tails). Since every branch appends an active
//! schedule, partial schedules that are not active are never generated.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{ScheduleState, ScheduledTask};
use crate::error::{Error, Result};
use crate::instance::{JsspInstance, TaskId, Time};
use crate::io;
use crate::pdr::{rollout, PdrKind, RuleRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolveLimits {
    pub node_limit: u64,
    pub time_limit: Duration,
}

impl Default for SolveLimits {
    fn default() -> Self {
        SolveLimits {
            node_limit: 10_000_000,
            time_limit: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactResult {
    pub optimum: Time,
    /// True iff the search tree was exhausted, so `optimum` is the minimum.
    pub proved: bool,
    pub nodes_explored: u64,
    pub schedule: Option<Vec<ScheduledTask>>,
}

/// Relative optimality gap `(makespan - optimum) / optimum`.
pub fn gap(makespan: Time, optimum: Time) -> Result<f64> {
    if optimum == 0 {
        return Err(Error::Validation("optimum must be >= 1".into()));
    }
    if makespan < optimum {
        return Err(Error::Integrity(format!(
            "makespan {makespan} is below the optimum {optimum}"
        )));
    }
    Ok((makespan - optimum) as f64 / optimum as f64)
}

struct Search<'a> {
    n_jobs: usize,
    n_machines: usize,
    proc: &'a [Vec<Time>],
    machine: &'a [Vec<usize>],
    /// `tail[j][k]`: work of job `j` strictly after position `k`.
    tail: Vec<Vec<Time>>,
    job_ready: Vec<Time>,
    machine_ready: Vec<Time>,
    next: Vec<usize>,
    start: Vec<Vec<Time>>,
    best: Time,
    best_start: Option<Vec<Vec<Time>>>,
    nodes: u64,
    limits: SolveLimits,
    began: Instant,
    aborted: bool,
    // scratch for the machine bound
    ops: Vec<(Time, Time, Time)>,
}

impl<'a> Search<'a> {
    fn new(inst: &'a JsspInstance, limits: SolveLimits, incumbent: Time) -> Self {
        let n = inst.n_jobs();
        let m = inst.n_machines();
        let tail = inst
            .proc_time
            .iter()
            .map(|row| {
                let mut t = vec![0; m];
                for k in (0..m.saturating_sub(1)).rev() {
                    t[k] = t[k + 1] + row[k + 1];
                }
                t
            })
            .collect();
        Search {
            n_jobs: n,
            n_machines: m,
            proc: &inst.proc_time,
            machine: &inst.machine_order,
            tail,
            job_ready: vec![0; n],
            machine_ready: vec![0; m],
            next: vec![0; n],
            start: vec![vec![0; m]; n],
            best: incumbent,
            best_start: None,
            nodes: 0,
            limits,
            began: Instant::now(),
            aborted: false,
            ops: Vec::with_capacity(n),
        }
    }

    fn earliest_start(&self, job: usize) -> Time {
        let mach = self.machine[job][self.next[job]];
        self.job_ready[job].max(self.machine_ready[mach])
    }

    fn lower_bound(&mut self) -> Time {
        let m = self.n_machines;
        let mut bound = self.job_ready.iter().copied().max().unwrap_or(0);
        for j in 0..self.n_jobs {
            if self.next[j] < m {
                let k = self.next[j];
                bound = bound.max(self.earliest_start(j) + self.proc[j][k] + self.tail[j][k]);
            }
        }
        for mach in 0..m {
            self.ops.clear();
            for j in 0..self.n_jobs {
                let k0 = self.next[j];
                if k0 >= m {
                    continue;
                }
                let mut head = self.earliest_start(j);
                for k in k0..m {
                    if self.machine[j][k] == mach {
                        let r = head.max(self.machine_ready[mach]);
                        self.ops.push((r, self.proc[j][k], self.tail[j][k]));
                        break;
                    }
                    head += self.proc[j][k];
                }
            }
            if !self.ops.is_empty() {
                bound = bound.max(preemptive_one_machine(&mut self.ops));
            }
        }
        bound
    }

    fn out_of_budget(&mut self) -> bool {
        if self.aborted {
            return true;
        }
        if self.nodes >= self.limits.node_limit
            || (self.nodes.is_multiple_of(4096) && self.began.elapsed() >= self.limits.time_limit)
        {
            self.aborted = true;
        }
        self.aborted
    }

    fn dfs(&mut self, remaining: usize) {
        self.nodes += 1;
        if self.out_of_budget() {
            return;
        }
        if remaining == 0 {
            let ms = self.job_ready.iter().copied().max().unwrap_or(0);
            if ms < self.best {
                self.best = ms;
                self.best_start = Some(self.start.clone());
            }
            return;
        }

        // Giffler-Thompson: the task with the earliest completion fixes the machine.
        let mut c_star = Time::MAX;
        let mut m_star = 0;
        for j in 0..self.n_jobs {
            if self.next[j] < self.n_machines {
                let ect = self.earliest_start(j) + self.proc[j][self.next[j]];
                if ect < c_star {
                    c_star = ect;
                    m_star = self.machine[j][self.next[j]];
                }
            }
        }

        let mut children: Vec<(Time, Time, usize)> = Vec::with_capacity(self.n_jobs);
        for j in 0..self.n_jobs {
            let k = self.next[j];
            if k >= self.n_machines || self.machine[j][k] != m_star {
                continue;
            }
            let est = self.earliest_start(j);
            if est >= c_star {
                continue;
            }
            let (jr, mr) = self.apply(j, est);
            let lb = self.lower_bound();
            self.undo(j, jr, mr);
            if lb < self.best {
                children.push((lb, est, j));
            }
        }
        children.sort_unstable();

        for (lb, est, j) in children {
            if lb >= self.best {
                break;
            }
            let (jr, mr) = self.apply(j, est);
            self.dfs(remaining - 1);
            self.undo(j, jr, mr);
            if self.aborted {
                return;
            }
        }
    }

    fn apply(&mut self, job: usize, est: Time) -> (Time, Time) {
        let k = self.next[job];
        let mach = self.machine[job][k];
        let saved = (self.job_ready[job], self.machine_ready[mach]);
        let end = est + self.proc[job][k];
        self.start[job][k] = est;
        self.job_ready[job] = end;
        self.machine_ready[mach] = end;
        self.next[job] += 1;
        saved
    }

    fn undo(&mut self, job: usize, job_ready: Time, machine_ready: Time) {
        self.next[job] -= 1;
        let mach = self.machine[job][self.next[job]];
        self.job_ready[job] = job_ready;
        self.machine_ready[mach] = machine_ready;
    }
}

/// Optimal makespan of the preemptive one-machine problem with release times
/// (heads) and delivery times (tails), computed by Jackson's preemptive schedule.
/// `ops` holds `(head, duration, tail)` and is reordered in place.
fn preemptive_one_machine(ops: &mut [(Time, Time, Time)]) -> Time {
    ops.sort_unstable_by_key(|o| o.0);
    let n = ops.len();
    let mut left: [Time; 64] = [0; 64];
    let mut left_vec;
    let left: &mut [Time] = if n <= 64 {
        &mut left[..n]
    } else {
        left_vec = vec![0; n];
        &mut left_vec
    };
    for (l, o) in left.iter_mut().zip(ops.iter()) {
        *l = o.1;
    }
    let mut released = 0;
    let mut t = ops[0].0;
    let mut done = 0;
    let mut bound = 0;
    while done < n {
        while released < n && ops[released].0 <= t {
            released += 1;
        }
        let pick = (0..released)
            .filter(|&i| left[i] > 0)
            .max_by_key(|&i| (ops[i].2, std::cmp::Reverse(i)));
        let Some(i) = pick else {
            t = ops[released].0;
            continue;
        };
        let next_release = if released < n { ops[released].0 } else { Time::MAX };
        let finish = t + left[i];
        if finish <= next_release {
            t = finish;
            left[i] = 0;
            done += 1;
            bound = bound.max(t + ops[i].2);
        } else {
            left[i] -= next_release - t;
            t = next_release;
        }
    }
    bound
}

/// Lower bound at the root of the search tree.
pub fn root_lower_bound(instance: &JsspInstance) -> Time {
    Search::new(instance, SolveLimits::default(), Time::MAX).lower_bound()
}

fn starts_to_schedule(instance: &JsspInstance, start: &[Vec<Time>]) -> Vec<ScheduledTask> {
    let mut rows: Vec<ScheduledTask> = (0..instance.n_jobs())
        .flat_map(|j| (0..instance.n_machines()).map(move |k| TaskId::new(j, k)))
        .map(|t| ScheduledTask {
            task: t,
            machine: instance.machine(t),
            start: start[t.job][t.pos],
            end: start[t.job][t.pos] + instance.duration(t),
        })
        .collect();
    rows.sort_by_key(|r| (r.machine, r.start));
    rows
}

/// Proves the optimal makespan of `instance`, or returns the best schedule found
/// within `limits` with `proved = false`.
pub fn solve_optimal(instance: &JsspInstance, limits: SolveLimits) -> ExactResult {
    let registry = RuleRegistry::default();
    let arc = Arc::new(instance.clone());
    let (warm_state, warm) = PdrKind::DETERMINISTIC
        .iter()
        .map(|&k| rollout(&*registry.rule(k), arc.clone(), 0))
        .min_by_key(|(_, ms)| *ms)
        .expect("at least one rule");

    let mut search = Search::new(instance, limits, warm);
    let root = search.lower_bound();
    if root < warm {
        search.dfs(instance.n_tasks());
    }
    let schedule = match &search.best_start {
        Some(start) => starts_to_schedule(instance, start),
        None => warm_state.export(),
    };
    ExactResult {
        optimum: search.best,
        proved: !search.aborted,
        nodes_explored: search.nodes,
        schedule: Some(schedule),
    }
}

pub const BRUTE_FORCE_MAX_TASKS: usize = 9;

/// Minimum makespan over every action sequence of the left-shift environment.
pub fn brute_force_small(instance: &JsspInstance) -> Result<Time> {
    if instance.n_tasks() > BRUTE_FORCE_MAX_TASKS {
        return Err(Error::Precondition(format!(
            "brute force is limited to {BRUTE_FORCE_MAX_TASKS} tasks, instance has {}",
            instance.n_tasks()
        )));
    }
    fn go(state: &ScheduleState, best: &mut Time) {
        if state.is_done() {
            *best = (*best).min(state.makespan().unwrap());
            return;
        }
        for job in state.eligible_actions() {
            let mut child = state.clone();
            child.step(job).unwrap();
            go(&child, best);
        }
    }
    let mut best = Time::MAX;
    go(&ScheduleState::reset(Arc::new(instance.clone())), &mut best);
    Ok(best)
}

/// One line of the optima cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimumRecord {
    pub id: usize,
    pub optimum: Time,
    pub proved: bool,
    pub nodes: u64,
}

pub fn solve_all(instances: &[JsspInstance], limits: SolveLimits) -> Vec<OptimumRecord> {
    instances
        .par_iter()
        .map(|inst| {
            let r = solve_optimal(inst, limits);
            OptimumRecord {
                id: inst.id,
                optimum: r.optimum,
                proved: r.proved,
                nodes: r.nodes_explored,
            }
        })
        .collect()
}

pub fn write_optima(records: &[OptimumRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    io::write_atomic(path, out.as_bytes())
}

pub fn read_optima(path: &Path) -> Result<Vec<OptimumRecord>> {
    let text = io::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Optimum per instance id, `None` where the cache has no proved value.
pub fn proved_optima(records: &[OptimumRecord], n: usize) -> Vec<Option<Time>> {
    let mut out = vec![None; n];
    for r in records.iter().filter(|r| r.proved && r.id < n) {
        out[r.id] = Some(r.optimum);
    }
    out
}
