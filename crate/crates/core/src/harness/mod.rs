//! Training runs, the experiment grid and learning-curve analysis.

mod analysis;
mod grid;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use analysis::{
    detect_first_dip, detect_first_dip_with, parse_eval_csv, rank_analysis, read_eval_csv, second_half_impact,
    summarize, Curve, DeltaKey, DipDetector, DipRegistry, LocalMinimum, RankTable, Report, RunSummary,
    WindowMinimum, PLOT_SCRIPT,
};
pub use grid::{experiment_grid, GridConfig, GridOutcome, Scale};

use crate::agent::{
    collect_episode, greedy_makespan, ppo_update, write_checkpoint, Adam, AgentConfig, Checkpoint, Policy,
    PpoConfig, SelectMode, Trajectory,
};
use crate::curriculum::Curriculum;
use crate::error::{Error, Result};
use crate::exact::{gap, proved_optima, read_optima, OptimumRecord};
use crate::instance::{read_dataset, Dataset, JsspInstance, Time};
use crate::io;
use crate::seed;

pub const MANIFEST_VERSION: u32 = 1;
pub const EVAL_CSV_HEADER: &str =
    "run_id,curriculum_first,curriculum_second,dataset_seed,init_seed,instances_seen,mean_gap,mean_makespan";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub run_id: String,
    pub dataset: PathBuf,
    pub curriculum: PathBuf,
    pub test_set: PathBuf,
    pub test_optima: PathBuf,
    /// Leading test instances used for validation.
    pub test_size: usize,
    pub validation_every: usize,
    pub layers: usize,
    pub hidden: usize,
    pub init_seed: u64,
    /// Seed of the per-episode action-sampling streams.
    pub rollout_seed: u64,
    pub ppo: PpoConfig,
    pub out_dir: PathBuf,
    /// Stores elapsed seconds in the manifest; off for byte-stable manifests.
    pub record_wall_clock: bool,
}

impl TrainConfig {
    pub fn new(run_id: impl Into<String>, dataset: PathBuf, curriculum: PathBuf, test_set: PathBuf, test_optima: PathBuf, out_dir: PathBuf) -> Self {
        TrainConfig {
            run_id: run_id.into(),
            dataset,
            curriculum,
            test_set,
            test_optima,
            test_size: 1000,
            validation_every: 2000,
            layers: 2,
            hidden: 64,
            init_seed: 0,
            rollout_seed: 0,
            ppo: PpoConfig::default(),
            out_dir,
            record_wall_clock: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.validation_every == 0 || self.test_size == 0 {
            return Err(Error::Config("validation_every and test_size must be >= 1".into()));
        }
        if self.run_id.is_empty() || self.run_id.contains([',', '/', '\n']) {
            return Err(Error::Config(format!("unusable run id {:?}", self.run_id)));
        }
        self.ppo.validate()
    }

    pub fn hash(&self) -> String {
        io::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Labels attached to every evaluation row of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLabels {
    pub run_id: String,
    pub curriculum_first: String,
    pub curriculum_second: String,
    pub dataset_seed: Option<u64>,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instances_seen: usize,
    pub mean_gap: f64,
    pub mean_makespan: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Aborted { instances_seen: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub code_version: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    pub curriculum_hash: String,
    pub test_hash: String,
    pub optima_hash: String,
    pub labels: RunLabels,
    pub status: RunStatus,
    /// Test instances without a proved optimum, left out of every mean.
    pub unproved_excluded: usize,
    pub episodes_trained: usize,
    pub updates: usize,
    pub evals: Vec<EvalRecord>,
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
}

impl RunManifest {
    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&io::read_to_string(path)?)?)
    }

    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn eval_csv(&self) -> String {
        eval_rows(&self.labels, &self.evals)
    }
}

/// Evaluation rows without the header line.
pub fn eval_rows(labels: &RunLabels, evals: &[EvalRecord]) -> String {
    let mut out = String::new();
    for e in evals {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            labels.run_id,
            labels.curriculum_first,
            labels.curriculum_second,
            labels.dataset_seed.map(|s| s.to_string()).unwrap_or_default(),
            labels.init_seed,
            e.instances_seen,
            e.mean_gap,
            e.mean_makespan
        );
    }
    out
}

/// Test instances paired with proved optima; unproved ones are dropped.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub instances: Vec<Arc<JsspInstance>>,
    pub optima: Vec<Time>,
    pub unproved_excluded: usize,
}

impl TestSet {
    pub fn new(instances: &[JsspInstance], optima: &[Option<Time>]) -> Result<Self> {
        if instances.len() != optima.len() {
            return Err(Error::Validation(format!(
                "{} test instances but {} optima",
                instances.len(),
                optima.len()
            )));
        }
        let mut set = TestSet {
            instances: Vec::new(),
            optima: Vec::new(),
            unproved_excluded: 0,
        };
        for (inst, opt) in instances.iter().zip(optima) {
            match opt {
                Some(o) => {
                    set.instances.push(Arc::new(inst.clone()));
                    set.optima.push(*o);
                }
                None => set.unproved_excluded += 1,
            }
        }
        if set.instances.is_empty() {
            return Err(Error::Validation("no test instance has a proved optimum".into()));
        }
        Ok(set)
    }

    pub fn from_records(instances: &[JsspInstance], records: &[OptimumRecord]) -> Result<Self> {
        Self::new(instances, &proved_optima(records, instances.len()))
    }
}

/// Greedy rollouts over the test set. Never produces training data.
pub fn evaluate(policy: &Policy, test: &TestSet, instances_seen: usize) -> Result<EvalRecord> {
    let makespans: Vec<Time> = test
        .instances
        .par_iter()
        .map(|inst| greedy_makespan(policy, inst.clone()))
        .collect();
    let n = makespans.len() as f64;
    let mut gap_sum = 0.0;
    for (&ms, &opt) in makespans.iter().zip(&test.optima) {
        gap_sum += gap(ms, opt)?;
    }
    Ok(EvalRecord {
        instances_seen,
        mean_gap: gap_sum / n,
        mean_makespan: makespans.iter().map(|&m| m as f64).sum::<f64>() / n,
    })
}

type Fingerprint = (Vec<Vec<usize>>, Vec<Vec<Time>>);

fn instance_fingerprints(instances: &[JsspInstance]) -> HashSet<Fingerprint> {
    instances
        .iter()
        .map(|i| (i.machine_order.clone(), i.proc_time.clone()))
        .collect()
}

/// Rejects a test set that equals or shares instances with the training data.
pub fn check_disjoint(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.content_hash() == test.content_hash() {
        return Err(Error::Validation("test set has the same content hash as the training dataset".into()));
    }
    let seen = instance_fingerprints(&train.instances);
    let shared = test
        .instances
        .iter()
        .filter(|i| seen.contains(&(i.machine_order.clone(), i.proc_time.clone())))
        .count();
    if shared > 0 {
        return Err(Error::Validation(format!("{shared} test instances also occur in the training dataset")));
    }
    Ok(())
}

fn clb_scale(dataset: &Dataset) -> f64 {
    let n_machines = dataset.instances[0].n_machines() as f64;
    let upper = match &dataset.config {
        Some(cfg) => cfg.time_dist.upper(),
        None => dataset
            .instances
            .iter()
            .flat_map(|i| i.proc_time.iter().flatten())
            .copied()
            .max()
            .unwrap_or(1),
    };
    n_machines * upper.max(1) as f64
}

/// In-memory inputs of one run.
pub struct RunInputs<'a> {
    pub train: &'a Dataset,
    pub curriculum: &'a Curriculum,
    pub test: &'a TestSet,
}

/// Everything `train_loop` produces besides the manifest bookkeeping.
pub struct RunResult {
    pub policy: Policy,
    pub adam: Adam,
    pub evals: Vec<EvalRecord>,
    pub episodes_trained: usize,
    pub updates: usize,
    pub aborted: Option<(usize, String, Policy)>,
}

/// Plays the curriculum once and validates on the cadence. `on_eval` sees
/// every record as soon as it exists.
pub fn train_loop(
    cfg: &TrainConfig,
    inputs: &RunInputs<'_>,
    mut on_eval: impl FnMut(&EvalRecord, &Policy, &Adam) -> Result<()>,
) -> Result<RunResult> {
    cfg.validate()?;
    let RunInputs { train, curriculum, test } = *inputs;
    if train.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    curriculum.validate_against(train.len())?;
    let instances: Vec<Arc<JsspInstance>> = train.instances.iter().cloned().map(Arc::new).collect();

    let agent = AgentConfig {
        layers: cfg.layers,
        hidden: cfg.hidden,
        clb_scale: clb_scale(train),
        seed: cfg.init_seed,
    };
    let mut policy = Policy::new(agent)?;
    let mut adam = Adam::new(&policy.params);
    let mut evals = Vec::new();
    let mut pending: Vec<usize> = Vec::new();
    let (mut episodes_trained, mut updates) = (0usize, 0usize);

    let order = &curriculum.order;
    for i in 0..order.len() {
        pending.push(i);
        let seen = i + 1;
        let at_eval = seen % cfg.validation_every == 0;
        if pending.len() == cfg.ppo.episodes_per_update || at_eval || seen == order.len() {
            let batch: Vec<Trajectory> = pending
                .par_iter()
                .map(|&k| {
                    let mut rng = seed::rng_for(cfg.rollout_seed, k as u64);
                    collect_episode(&policy, instances[order[k]].clone(), SelectMode::Sample, &mut rng)
                })
                .collect();
            debug_assert!(batch.iter().zip(&pending).all(|(t, &k)| t.instance_id == train.instances[order[k]].id));
            let last_good = policy.clone();
            if let Err(e) = ppo_update(&mut policy, &mut adam, &batch, &cfg.ppo) {
                return match e {
                    Error::NonFinite(msg) => Ok(RunResult {
                        policy: last_good.clone(),
                        adam,
                        evals,
                        episodes_trained,
                        updates,
                        aborted: Some((seen, msg, last_good)),
                    }),
                    other => Err(other),
                };
            }
            episodes_trained += batch.len();
            updates += 1;
            pending.clear();
        }
        if at_eval {
            let rec = evaluate(&policy, test, seen)?;
            on_eval(&rec, &policy, &adam)?;
            evals.push(rec);
        }
    }
    Ok(RunResult {
        policy,
        adam,
        evals,
        episodes_trained,
        updates,
        aborted: None,
    })
}

/// Runs one configured training run from files and leaves a manifest,
/// an evaluation CSV and a checkpoint in `cfg.out_dir`.
pub fn train_run(cfg: &TrainConfig) -> Result<RunManifest> {
    let started = Instant::now();
    cfg.validate()?;
    let train = read_dataset(&cfg.dataset)?;
    let curriculum = Curriculum::read(&cfg.curriculum)?;
    let test_data = read_dataset(&cfg.test_set)?;
    let optima = read_optima(&cfg.test_optima)?;
    if train.is_empty() {
        return Err(Error::Validation(format!("training dataset {} is empty", cfg.dataset.display())));
    }
    let dataset_hash = train.content_hash();
    if curriculum.dataset_hash != dataset_hash {
        return Err(Error::Validation(format!(
            "curriculum {} was built for dataset {}, not {}",
            cfg.curriculum.display(),
            curriculum.dataset_hash,
            dataset_hash
        )));
    }
    if test_data.len() < cfg.test_size {
        return Err(Error::Validation(format!(
            "test set has {} instances, {} requested",
            test_data.len(),
            cfg.test_size
        )));
    }
    check_disjoint(&train, &test_data)?;
    let test_instances = &test_data.instances[..cfg.test_size];
    let test = TestSet::from_records(test_instances, &optima)?;

    let labels = RunLabels {
        run_id: cfg.run_id.clone(),
        curriculum_first: curriculum.first.clone(),
        curriculum_second: curriculum.second.clone(),
        dataset_seed: train.config.as_ref().map(|c| c.seed),
        init_seed: cfg.init_seed,
    };
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let manifest_path = RunManifest::path_in(&cfg.out_dir);
    let csv_path = cfg.out_dir.join("eval.csv");
    let checkpoint_path = cfg.out_dir.join("checkpoint.json");
    let mut manifest = RunManifest {
        version: MANIFEST_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        dataset_hash,
        curriculum_hash: io::sha256_hex(curriculum.to_json()?.as_bytes()),
        test_hash: test_data.content_hash(),
        optima_hash: io::sha256_hex(serde_json::to_string(&optima)?.as_bytes()),
        labels,
        status: RunStatus::Running,
        unproved_excluded: test.unproved_excluded,
        episodes_trained: 0,
        updates: 0,
        evals: Vec::new(),
        checkpoint: None,
        wall_clock_secs: None,
    };
    manifest.write(&manifest_path)?;

    let inputs = RunInputs {
        train: &train,
        curriculum: &curriculum,
        test: &test,
    };
    let result = train_loop(cfg, &inputs, |rec, _, _| {
        manifest.evals.push(rec.clone());
        io::write_atomic(&csv_path, format!("{EVAL_CSV_HEADER}\n{}", manifest.eval_csv()).as_bytes())?;
        manifest.write(&manifest_path)
    })?;

    let step = result.updates as u64;
    manifest.episodes_trained = result.episodes_trained;
    manifest.updates = result.updates;
    manifest.evals = result.evals;
    match result.aborted {
        Some((seen, reason, last_good)) => {
            let path = cfg.out_dir.join("checkpoint_last_good.json");
            write_checkpoint(&Checkpoint::capture(&last_good, None, step, cfg.rollout_seed), &path)?;
            manifest.checkpoint = Some(path);
            manifest.status = RunStatus::Aborted { instances_seen: seen, reason };
        }
        None => {
            write_checkpoint(
                &Checkpoint::capture(&result.policy, Some(&result.adam), step, cfg.rollout_seed),
                &checkpoint_path,
            )?;
            manifest.checkpoint = Some(checkpoint_path);
            manifest.status = RunStatus::Completed;
        }
    }
    io::write_atomic(&csv_path, format!("{EVAL_CSV_HEADER}\n{}", manifest.eval_csv()).as_bytes())?;
    if cfg.record_wall_clock {
        manifest.wall_clock_secs = Some(started.elapsed().as_secs_f64());
    }
    manifest.write(&manifest_path)?;
    Ok(manifest)
}
