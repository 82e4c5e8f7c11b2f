use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_run, RunManifest, TrainConfig, EVAL_CSV_HEADER};
use crate::agent::PpoConfig;
use crate::curriculum::{all_curricula, build_elements, compute_dts, shuffled_baseline, Curriculum};
use crate::error::{Error, Result};
use crate::exact::{read_optima, solve_all, write_optima, SolveLimits};
use crate::instance::{dataset_to_string, generate_dataset, GenConfig, TimeDist};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Full,
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            _ => Err(Error::Config(format!("unknown scale {s:?}; expected desk or full"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Desk => "desk",
            Scale::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub out_dir: PathBuf,
    pub n_jobs: usize,
    pub n_machines: usize,
    pub time_dist: TimeDist,
    /// One training dataset per seed.
    pub dataset_seeds: Vec<u64>,
    pub train_size: usize,
    pub test_seed: u64,
    pub test_size: usize,
    pub validation_every: usize,
    /// Init seed shared by the sixteen curriculum runs of a dataset.
    pub curriculum_init_seed: u64,
    /// One shuffled baseline run per seed; the seed drives both order and init.
    pub baseline_seeds: Vec<u64>,
    pub layers: usize,
    pub hidden: usize,
    pub ppo: PpoConfig,
    /// Concurrent runs.
    pub parallel: usize,
    pub record_wall_clock: bool,
}

impl GridConfig {
    pub fn preset(scale: Scale, out_dir: PathBuf) -> Self {
        let base = GridConfig {
            out_dir,
            n_jobs: 6,
            n_machines: 6,
            time_dist: TimeDist::default(),
            dataset_seeds: vec![1, 2, 3],
            train_size: 40_000,
            test_seed: 0,
            test_size: 1000,
            validation_every: 2000,
            curriculum_init_seed: 0,
            baseline_seeds: vec![0, 1, 2],
            layers: 2,
            hidden: 64,
            ppo: PpoConfig::default(),
            parallel: 1,
            record_wall_clock: true,
        };
        match scale {
            Scale::Full => base,
            Scale::Desk => GridConfig {
                dataset_seeds: vec![1],
                train_size: 4000,
                test_size: 200,
                validation_every: 500,
                ppo: PpoConfig::desk(),
                ..base
            },
        }
    }

    pub fn n_runs(&self) -> usize {
        self.dataset_seeds.len() * (16 + self.baseline_seeds.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_seeds.is_empty() || self.train_size < 2 || !self.train_size.is_multiple_of(2) {
            return Err(Error::Config("grid needs at least one dataset of an even size >= 2".into()));
        }
        if self.dataset_seeds.contains(&self.test_seed) {
            return Err(Error::Config(format!("test seed {} is also a training seed", self.test_seed)));
        }
        if self.parallel == 0 || self.validation_every == 0 || self.test_size == 0 {
            return Err(Error::Config("parallel, validation_every and test_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub manifests: Vec<RunManifest>,
    /// Runs whose completed manifest already matched their config.
    pub skipped: usize,
    pub eval_csv: PathBuf,
}

fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<()> {
    match std::fs::read(path) {
        Ok(existing) if existing == bytes => Ok(()),
        _ => io::write_atomic(path, bytes),
    }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn gen_config(cfg: &GridConfig, seed: u64) -> GenConfig {
    GenConfig {
        n_jobs: cfg.n_jobs,
        n_machines: cfg.n_machines,
        time_dist: cfg.time_dist,
        seed,
    }
}

/// Prepares data, curricula and run configs, then trains every run that is
/// not already complete. Rerunning with an unchanged config trains nothing.
pub fn experiment_grid(cfg: &GridConfig) -> Result<GridOutcome> {
    cfg.validate()?;
    let data_dir = cfg.out_dir.join("data");
    let cur_dir = cfg.out_dir.join("curricula");
    let runs_dir = cfg.out_dir.join("runs");
    for d in [&data_dir, &cur_dir, &runs_dir] {
        mkdir(d)?;
    }

    let test = generate_dataset(&gen_config(cfg, cfg.test_seed), cfg.test_size)?;
    let test_path = data_dir.join("test.jsonl");
    write_if_changed(&test_path, dataset_to_string(&test)?.as_bytes())?;
    let optima_path = data_dir.join("test_optima.jsonl");
    let cached_ok = read_optima(&optima_path)
        .map(|o| o.len() == test.len() && o.iter().enumerate().all(|(i, r)| r.id == i))
        .unwrap_or(false);
    if !cached_ok {
        write_optima(&solve_all(&test.instances, SolveLimits::default()), &optima_path)?;
    }

    let mut configs = Vec::with_capacity(cfg.n_runs());
    for &seed in &cfg.dataset_seeds {
        let train = generate_dataset(&gen_config(cfg, seed), cfg.train_size)?;
        let train_path = data_dir.join(format!("train_s{seed}.jsonl"));
        write_if_changed(&train_path, dataset_to_string(&train)?.as_bytes())?;
        let dts = compute_dts(&train, None)?;
        write_if_changed(
            &data_dir.join(format!("dts_s{seed}.json")),
            (serde_json::to_string(&dts)? + "\n").as_bytes(),
        )?;
        let elements = build_elements(&dts.records)?;

        let mut planned: Vec<(Curriculum, u64)> = all_curricula(&elements, &dts)
            .into_iter()
            .map(|c| (c, cfg.curriculum_init_seed))
            .collect();
        planned.extend(cfg.baseline_seeds.iter().map(|&s| (shuffled_baseline(&train, s), s)));

        for (cur, init_seed) in planned {
            let run_id = format!("s{seed}-{}-{}-i{init_seed}", cur.first, cur.second);
            let cur_path = cur_dir.join(format!("{run_id}.json"));
            write_if_changed(&cur_path, cur.to_json()?.as_bytes())?;
            configs.push(TrainConfig {
                test_size: cfg.test_size,
                validation_every: cfg.validation_every,
                layers: cfg.layers,
                hidden: cfg.hidden,
                init_seed,
                rollout_seed: init_seed,
                ppo: cfg.ppo.clone(),
                record_wall_clock: cfg.record_wall_clock,
                ..TrainConfig::new(
                    run_id.clone(),
                    train_path.clone(),
                    cur_path,
                    test_path.clone(),
                    optima_path.clone(),
                    runs_dir.join(&run_id),
                )
            });
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let results: Vec<Result<(RunManifest, bool)>> = pool.install(|| {
        configs
            .par_iter()
            .with_max_len(1)
            .map(|tc| {
                let path = RunManifest::path_in(&tc.out_dir);
                if let Ok(m) = RunManifest::read(&path) {
                    if m.is_completed() && m.config_hash == tc.hash() {
                        return Ok((m, true));
                    }
                }
                train_run(tc).map(|m| (m, false))
            })
            .collect()
    });

    let mut manifests = Vec::with_capacity(results.len());
    let mut skipped = 0;
    for r in results {
        let (m, was_skipped) = r?;
        skipped += usize::from(was_skipped);
        manifests.push(m);
    }
    let mut csv = format!("{EVAL_CSV_HEADER}\n");
    for m in &manifests {
        csv.push_str(&m.eval_csv());
    }
    let eval_csv = cfg.out_dir.join("eval.csv");
    write_if_changed(&eval_csv, csv.as_bytes())?;
    Ok(GridOutcome {
        manifests,
        skipped,
        eval_csv,
    })
}
