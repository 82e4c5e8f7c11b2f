//! JSSP instances, seeded generation and the line-delimited dataset format.
//!
//! A dataset file starts with one JSON header line describing the generator
//! configuration, followed by one JSON object per instance:
//!
//! ```text
//! {"version":1,"n_jobs":6,"n_machines":6,"time_dist":{"kind":"uniform","low":1,"high":99},"seed":1,"count":2}
//! {"id":0,"machine_order":[[...],...],"proc_time":[[...],...]}
//! {"id":1,"machine_order":[[...],...],"proc_time":[[...],...]}
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::seed;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Integer time unit used throughout scheduling.
pub type Time = u32;

/// Identifies one task: the `pos`-th operation of job `job`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId {
    pub job: usize,
    pub pos: usize,
}

impl TaskId {
    pub fn new(job: usize, pos: usize) -> Self {
        TaskId { job, pos }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsspInstance {
    pub id: usize,
    pub machine_order: Vec<Vec<usize>>,
    pub proc_time: Vec<Vec<Time>>,
}

impl JsspInstance {
    /// Builds an instance and checks all invariants.
    pub fn new(id: usize, machine_order: Vec<Vec<usize>>, proc_time: Vec<Vec<Time>>) -> Result<Self> {
        let inst = JsspInstance {
            id,
            machine_order,
            proc_time,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn n_jobs(&self) -> usize {
        self.machine_order.len()
    }

    pub fn n_machines(&self) -> usize {
        self.machine_order.first().map_or(0, Vec::len)
    }

    pub fn n_tasks(&self) -> usize {
        self.n_jobs() * self.n_machines()
    }

    pub fn machine(&self, task: TaskId) -> usize {
        self.machine_order[task.job][task.pos]
    }

    pub fn duration(&self, task: TaskId) -> Time {
        self.proc_time[task.job][task.pos]
    }

    /// Flat node index `job * n_machines + pos`.
    pub fn node(&self, task: TaskId) -> usize {
        task.job * self.n_machines() + task.pos
    }

    pub fn task(&self, node: usize) -> TaskId {
        let m = self.n_machines();
        TaskId::new(node / m, node % m)
    }

    pub fn job_total(&self, job: usize) -> Time {
        self.proc_time[job].iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_jobs();
        let m = self.n_machines();
        let bad = |msg: String| Err(Error::Validation(format!("instance {}: {msg}", self.id)));
        if n == 0 || m == 0 {
            return bad("instance must have at least one job and one machine".into());
        }
        if self.proc_time.len() != n {
            return bad(format!(
                "proc_time has {} rows, machine_order has {n}",
                self.proc_time.len()
            ));
        }
        let mut seen = vec![false; m];
        for (j, (order, times)) in self.machine_order.iter().zip(&self.proc_time).enumerate() {
            if order.len() != m || times.len() != m {
                return bad(format!("job {j} row lengths differ from n_machines={m}"));
            }
            seen.iter_mut().for_each(|s| *s = false);
            for &mach in order {
                if mach >= m || seen[mach] {
                    return bad(format!("machine_order row {j} is not a permutation of 0..{m}"));
                }
                seen[mach] = true;
            }
            if let Some(k) = times.iter().position(|&p| p == 0) {
                return bad(format!("proc_time[{j}][{k}] must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Processing-time distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeDist {
    Uniform { low: Time, high: Time },
    /// Normal draw rounded to the nearest integer and rejected outside `[low, high]`.
    Normal {
        mean: f64,
        stddev: f64,
        low: Time,
        high: Time,
    },
}

impl Default for TimeDist {
    fn default() -> Self {
        TimeDist::Uniform { low: 1, high: 99 }
    }
}

impl TimeDist {
    pub fn upper(&self) -> Time {
        match *self {
            TimeDist::Uniform { high, .. } | TimeDist::Normal { high, .. } => high,
        }
    }

    fn validate(&self) -> Result<()> {
        let (low, high) = match *self {
            TimeDist::Uniform { low, high } => (low, high),
            TimeDist::Normal {
                mean,
                stddev,
                low,
                high,
            } => {
                if !(stddev > 0.0 && stddev.is_finite()) || !mean.is_finite() {
                    return Err(Error::Config(format!(
                        "normal distribution needs finite mean and stddev > 0, got mean={mean} stddev={stddev}"
                    )));
                }
                (low, high)
            }
        };
        if low < 1 || high < low {
            return Err(Error::Config(format!(
                "processing-time bounds need 1 <= low <= high, got [{low}, {high}]"
            )));
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Time {
        match *self {
            TimeDist::Uniform { low, high } => rng.random_range(low..=high),
            TimeDist::Normal {
                mean,
                stddev,
                low,
                high,
            } => {
                let normal = Normal::new(mean, stddev).expect("validated parameters");
                // Bounded rejection; a mean far outside [low, high] falls back to clamping.
                for _ in 0..1000 {
                    let x = normal.sample(rng).round();
                    if x >= low as f64 && x <= high as f64 {
                        return x as Time;
                    }
                }
                normal.sample(rng).round().clamp(low as f64, high as f64) as Time
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_jobs: usize,
    pub n_machines: usize,
    pub time_dist: TimeDist,
    pub seed: u64,
}

impl GenConfig {
    pub fn uniform(n_jobs: usize, n_machines: usize, low: Time, high: Time, seed: u64) -> Self {
        GenConfig {
            n_jobs,
            n_machines,
            time_dist: TimeDist::Uniform { low, high },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_jobs == 0 || self.n_machines == 0 {
            return Err(Error::Config(format!(
                "instance dimensions must be positive, got {}x{}",
                self.n_jobs, self.n_machines
            )));
        }
        self.time_dist.validate()
    }
}

/// Generates instance `index` of the stream defined by `cfg`.
///
/// Each index owns an RNG seeded from `(cfg.seed, index)`, so any subset of a
/// dataset can be regenerated independently and in any order.
pub fn generate_instance(cfg: &GenConfig, index: usize) -> Result<JsspInstance> {
    cfg.validate()?;
    let mut rng = seed::rng_for(cfg.seed, index as u64);
    let mut machine_order = Vec::with_capacity(cfg.n_jobs);
    let mut proc_time = Vec::with_capacity(cfg.n_jobs);
    for _ in 0..cfg.n_jobs {
        let mut row: Vec<usize> = (0..cfg.n_machines).collect();
        row.shuffle(&mut rng);
        machine_order.push(row);
    }
    for _ in 0..cfg.n_jobs {
        proc_time.push((0..cfg.n_machines).map(|_| cfg.time_dist.sample(&mut rng)).collect());
    }
    Ok(JsspInstance {
        id: index,
        machine_order,
        proc_time,
    })
}

/// A generated or loaded set of same-size instances with ids `0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Generator configuration from the file header; absent for an empty file.
    pub config: Option<GenConfig>,
    pub instances: Vec<JsspInstance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Content hash over the instance records only, independent of header fields.
    pub fn content_hash(&self) -> String {
        let mut buf = String::new();
        for inst in &self.instances {
            buf.push_str(&serde_json::to_string(inst).expect("instance serializes"));
            buf.push('\n');
        }
        io::sha256_hex(buf.as_bytes())
    }
}

pub fn generate_dataset(cfg: &GenConfig, count: usize) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    cfg.validate()?;
    use rayon::prelude::*;
    let instances = (0..count)
        .into_par_iter()
        .map(|i| generate_instance(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: Some(cfg.clone()),
        instances,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    n_jobs: usize,
    n_machines: usize,
    time_dist: TimeDist,
    seed: u64,
    count: usize,
}

pub fn dataset_to_string(dataset: &Dataset) -> Result<String> {
    let mut out = String::new();
    if dataset.instances.is_empty() && dataset.config.is_none() {
        return Ok(out);
    }
    let cfg = match &dataset.config {
        Some(cfg) => cfg.clone(),
        None => {
            let first = &dataset.instances[0];
            GenConfig {
                n_jobs: first.n_jobs(),
                n_machines: first.n_machines(),
                time_dist: TimeDist::default(),
                seed: 0,
            }
        }
    };
    let header = Header {
        version: DATASET_FORMAT_VERSION,
        n_jobs: cfg.n_jobs,
        n_machines: cfg.n_machines,
        time_dist: cfg.time_dist,
        seed: cfg.seed,
        count: dataset.instances.len(),
    };
    out.push_str(&serde_json::to_string(&header)?);
    out.push('\n');
    for inst in &dataset.instances {
        writeln!(out, "{}", serde_json::to_string(inst)?).expect("string write");
    }
    Ok(out)
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    io::write_atomic(path, dataset_to_string(dataset)?.as_bytes())
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((hline, htext)) = lines.next() else {
        return Ok(Dataset {
            config: None,
            instances: Vec::new(),
        });
    };
    let header: Header =
        serde_json::from_str(htext).map_err(|e| parse_err(hline, format!("bad header: {e}")))?;
    if header.version != DATASET_FORMAT_VERSION {
        return Err(parse_err(
            hline,
            format!("unsupported dataset version {}", header.version),
        ));
    }
    let config = GenConfig {
        n_jobs: header.n_jobs,
        n_machines: header.n_machines,
        time_dist: header.time_dist,
        seed: header.seed,
    };
    let mut instances = Vec::with_capacity(header.count);
    for (line, text) in lines {
        let inst: JsspInstance =
            serde_json::from_str(text).map_err(|e| parse_err(line, e.to_string()))?;
        inst.validate()?;
        if inst.n_jobs() != config.n_jobs || inst.n_machines() != config.n_machines {
            return Err(Error::Validation(format!(
                "instance {}: dimensions {}x{} differ from header {}x{}",
                inst.id,
                inst.n_jobs(),
                inst.n_machines(),
                config.n_jobs,
                config.n_machines
            )));
        }
        if inst.id != instances.len() {
            return Err(Error::Validation(format!(
                "instance ids must be consecutive from 0: found {} at position {}",
                inst.id,
                instances.len()
            )));
        }
        instances.push(inst);
    }
    if instances.len() != header.count {
        return Err(Error::Validation(format!(
            "header declares {} instances, file has {}",
            header.count,
            instances.len()
        )));
    }
    Ok(Dataset {
        config: Some(config),
        instances,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset(&io::read_to_string(path)?, path)
}
