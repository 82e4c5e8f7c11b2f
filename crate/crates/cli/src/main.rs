//! `jsspcl`: generate instances, solve and grade them, build curricula,
//! train agents and analyze learning curves. Commands talk only via files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use jssp_curriculum::agent::PpoConfig;
use jssp_curriculum::curriculum::{build_curriculum, build_elements, compute_dts, shuffled_baseline, CurriculumElement, DtsTable};
use jssp_curriculum::exact::{proved_optima, read_optima, solve_all, write_optima, SolveLimits};
use jssp_curriculum::harness::{
    experiment_grid, rank_analysis, read_eval_csv, second_half_impact, summarize, train_run, Curve, DeltaKey,
    DipRegistry, GridConfig, RunStatus, Scale, TrainConfig, PLOT_SCRIPT,
};
use jssp_curriculum::instance::{generate_dataset, read_dataset, write_dataset, GenConfig, JsspInstance, Time, TimeDist};
use jssp_curriculum::io::write_atomic;
use jssp_curriculum::pdr::{evaluate_suite, makespan_table, PdrKind};
use jssp_curriculum::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "jsspcl", version, about = "Curriculum experiments for learned job shop dispatching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset of random instances.
    Gen(GenArgs),
    /// Evaluate every dispatching rule on a dataset.
    Pdr(PdrArgs),
    /// Solve instances to optimality and cache the optima.
    Exact(ExactArgs),
    /// Grade instances by the makespan of the dataset's best rule.
    Dts(DtsArgs),
    /// Build a curriculum from a graded dataset, or a shuffled baseline.
    Curriculum(CurriculumArgs),
    /// Train one agent on one curriculum.
    Train(Box<TrainArgs>),
    /// Run the whole experiment grid.
    Grid(GridArgs),
    /// Summarize evaluation CSVs.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug, Serialize)]
struct Workers {
    /// Worker threads (0 = all cores).
    #[arg(short = 'j', long, default_value_t = 0)]
    parallel: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum DistKind {
    Uniform,
    Normal,
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[arg(long, default_value_t = 6)]
    jobs: usize,
    #[arg(long, default_value_t = 6)]
    machines: usize,
    #[arg(short = 'n', long)]
    count: usize,
    #[arg(short, long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = DistKind::Uniform)]
    dist: DistKind,
    #[arg(long, default_value_t = 1)]
    low: Time,
    #[arg(long, default_value_t = 99)]
    high: Time,
    /// Mean of the normal distribution.
    #[arg(long, default_value_t = 50.0)]
    mean: f64,
    /// Standard deviation of the normal distribution.
    #[arg(long, default_value_t = 20.0)]
    stddev: f64,
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    workers: Workers,
}

#[derive(Args, Debug, Serialize)]
struct PdrArgs {
    #[arg(short, long)]
    data: PathBuf,
    /// Optima cache; without it only makespans are reported.
    #[arg(long)]
    optima: Option<PathBuf>,
    /// Seed of the RANDOM rule.
    #[arg(short, long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    workers: Workers,
}

#[derive(Args, Debug, Serialize)]
struct ExactArgs {
    #[arg(short, long)]
    data: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000_000)]
    node_limit: u64,
    /// Per-instance time limit in seconds.
    #[arg(long, default_value_t = 60.0)]
    time_limit: f64,
    #[command(flatten)]
    workers: Workers,
}

#[derive(Args, Debug, Serialize)]
struct DtsArgs {
    #[arg(short, long)]
    data: PathBuf,
    /// Pick the best rule by mean gap against these optima instead of mean makespan.
    #[arg(long)]
    optima: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    workers: Workers,
}

#[derive(Args, Debug, Serialize)]
struct CurriculumArgs {
    /// Graded dataset; required unless --shuffled.
    #[arg(long, required_unless_present = "shuffled")]
    dts: Option<PathBuf>,
    #[arg(long, required_unless_present = "shuffled")]
    first: Option<CurriculumElement>,
    #[arg(long, required_unless_present = "shuffled")]
    second: Option<CurriculumElement>,
    /// Build a shuffled baseline of --data instead.
    #[arg(long, requires = "data", conflicts_with_all = ["dts", "first", "second"])]
    shuffled: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Shuffle seed.
    #[arg(short, long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum PpoPreset {
    /// Documented defaults: one episode per update, step size 2e-4.
    Standard,
    /// Four episodes per update, step size 5e-4; steadier on short runs.
    Desk,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(short, long)]
    data: PathBuf,
    #[arg(short, long)]
    curriculum: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    test_optima: PathBuf,
    #[arg(long, default_value_t = 1000)]
    test_size: usize,
    #[arg(long, default_value_t = 2000)]
    validation_every: usize,
    #[arg(short, long)]
    out: PathBuf,
    /// Defaults to the output directory name.
    #[arg(long)]
    run_id: Option<String>,
    /// Parameter-initialization seed.
    #[arg(short, long, default_value_t = 0)]
    seed: u64,
    /// Action-sampling seed; defaults to --seed.
    #[arg(long)]
    rollout_seed: Option<u64>,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, value_enum, default_value_t = PpoPreset::Standard)]
    preset: PpoPreset,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    episodes_per_update: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    entropy_coef: Option<f64>,
    #[arg(long)]
    value_coef: Option<f64>,
    #[arg(long)]
    gae_lambda: Option<f64>,
    /// Global gradient-norm clip; 0 disables it.
    #[arg(long)]
    max_grad_norm: Option<f64>,
    /// Leave elapsed time out of the manifest.
    #[arg(long)]
    no_wall_clock: bool,
    /// Worker threads for rollouts and evaluation.
    #[arg(short = 'j', long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args, Debug, Serialize)]
struct GridArgs {
    #[arg(long, default_value = "desk")]
    scale: Scale,
    #[arg(short, long)]
    out: PathBuf,
    /// Concurrent runs.
    #[arg(short = 'j', long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    no_wall_clock: bool,
}

#[derive(Args, Debug, Serialize)]
struct AnalyzeArgs {
    /// Evaluation CSVs, concatenated.
    #[arg(required = true)]
    eval: Vec<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value = DipRegistry::DEFAULT)]
    detector: String,
    /// Rank second-element impact across the boundary at this many instances
    /// (defaults to half of each curve).
    #[arg(long)]
    halfway: Option<usize>,
    /// Require and emit the second-element rank table.
    #[arg(long)]
    ranks: bool,
}

fn announce<T: Serialize>(command: &str, resolved: &T) {
    eprintln!(
        "{command} config: {}",
        serde_json::to_string(resolved).expect("config serializes")
    );
}

fn install_workers(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    write_atomic(path, text.as_bytes())
}

fn gen(a: GenArgs) -> Result<()> {
    announce("gen", &a);
    install_workers(a.workers.parallel)?;
    let time_dist = match a.dist {
        DistKind::Uniform => TimeDist::Uniform { low: a.low, high: a.high },
        DistKind::Normal => TimeDist::Normal {
            mean: a.mean,
            stddev: a.stddev,
            low: a.low,
            high: a.high,
        },
    };
    let cfg = GenConfig {
        n_jobs: a.jobs,
        n_machines: a.machines,
        time_dist,
        seed: a.seed,
    };
    let ds = generate_dataset(&cfg, a.count)?;
    write_dataset(&ds, &a.out)?;
    println!("wrote {} instances to {} (content hash {})", ds.len(), a.out.display(), ds.content_hash());
    Ok(())
}

fn makespan_only_csv(instances: &[JsspInstance], seed: u64) -> String {
    let table = makespan_table(instances, &PdrKind::ALL, seed);
    let mut out = String::from("kind,mean_gap,mean_makespan,n_instances\n");
    for (k, row) in PdrKind::ALL.iter().zip(&table) {
        let mean = row.iter().map(|&m| m as f64).sum::<f64>() / row.len() as f64;
        out.push_str(&format!("{k},,{mean:.4},{}\n", row.len()));
    }
    out
}

fn pdr(a: PdrArgs) -> Result<()> {
    announce("pdr", &a);
    install_workers(a.workers.parallel)?;
    let ds = read_dataset(&a.data)?;
    if ds.is_empty() {
        return Err(Error::Validation(format!("{} holds no instances", a.data.display())));
    }
    let csv = match &a.optima {
        None => makespan_only_csv(&ds.instances, a.seed),
        Some(path) => {
            let optima = proved_optima(&read_optima(path)?, ds.len());
            let (instances, opt): (Vec<JsspInstance>, Vec<Time>) = ds
                .instances
                .iter()
                .zip(&optima)
                .filter_map(|(i, o)| o.map(|o| (i.clone(), o)))
                .unzip();
            let skipped = ds.len() - instances.len();
            if skipped > 0 {
                eprintln!("pdr: {skipped} instances without a proved optimum excluded");
            }
            if instances.is_empty() {
                return Err(Error::Validation("no instance has a proved optimum".into()));
            }
            let table = evaluate_suite(&instances, &opt, a.seed)?;
            eprintln!("pdr: best rule {}", table.best);
            table.to_csv()
        }
    };
    match &a.out {
        Some(path) => write_text(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn exact(a: ExactArgs) -> Result<()> {
    announce("exact", &a);
    install_workers(a.workers.parallel)?;
    if !(a.time_limit > 0.0 && a.time_limit.is_finite()) {
        return Err(Error::Config(format!("time limit must be positive, got {}", a.time_limit)));
    }
    let ds = read_dataset(&a.data)?;
    let limits = SolveLimits {
        node_limit: a.node_limit,
        time_limit: Duration::from_secs_f64(a.time_limit),
    };
    let records = solve_all(&ds.instances, limits);
    write_optima(&records, &a.out)?;
    let proved = records.iter().filter(|r| r.proved).count();
    println!("solved {} instances, {proved} proved optimal, cache {}", records.len(), a.out.display());
    Ok(())
}

fn dts(a: DtsArgs) -> Result<()> {
    announce("dts", &a);
    install_workers(a.workers.parallel)?;
    let ds = read_dataset(&a.data)?;
    let optima = a.optima.as_deref().map(read_optima).transpose()?;
    let table = compute_dts(&ds, optima.as_deref())?;
    table.write(&a.out)?;
    let scores: Vec<String> = table.rule_scores.iter().map(|(k, s)| format!("{k}={s:.4}")).collect();
    println!(
        "graded {} instances with {} ({}), wrote {}",
        table.records.len(),
        table.rule_used,
        scores.join(" "),
        a.out.display()
    );
    Ok(())
}

fn curriculum(a: CurriculumArgs) -> Result<()> {
    announce("curriculum", &a);
    let cur = if a.shuffled {
        let data = a.data.as_ref().expect("clap enforces --data");
        shuffled_baseline(&read_dataset(data)?, a.seed)
    } else {
        let table = DtsTable::read(a.dts.as_ref().expect("clap enforces --dts"))?;
        let elements = build_elements(&table.records)?;
        build_curriculum(&elements, a.first.expect("required"), a.second.expect("required"), &table)
    };
    cur.write(&a.out)?;
    println!("curriculum {} of {} instances, wrote {}", cur.label(), cur.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<bool> {
    install_workers(a.parallel)?;
    let mut ppo = match a.preset {
        PpoPreset::Standard => PpoConfig::default(),
        PpoPreset::Desk => PpoConfig::desk(),
    };
    if let Some(v) = a.lr {
        ppo.learning_rate = v;
    }
    if let Some(v) = a.episodes_per_update {
        ppo.episodes_per_update = v;
    }
    if let Some(v) = a.epochs {
        ppo.epochs = v;
    }
    if let Some(v) = a.clip {
        ppo.clip = v;
    }
    if let Some(v) = a.entropy_coef {
        ppo.entropy_coef = v;
    }
    if let Some(v) = a.value_coef {
        ppo.value_coef = v;
    }
    if let Some(v) = a.gae_lambda {
        ppo.gae_lambda = v;
    }
    if let Some(v) = a.max_grad_norm {
        ppo.max_grad_norm = (v > 0.0).then_some(v);
    }
    let run_id = a.run_id.clone().unwrap_or_else(|| {
        a.out
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    });
    let cfg = TrainConfig {
        test_size: a.test_size,
        validation_every: a.validation_every,
        layers: a.layers,
        hidden: a.hidden,
        init_seed: a.seed,
        rollout_seed: a.rollout_seed.unwrap_or(a.seed),
        ppo,
        record_wall_clock: !a.no_wall_clock,
        ..TrainConfig::new(run_id, a.data, a.curriculum, a.test, a.test_optima, a.out)
    };
    announce("train", &cfg);
    let m = train_run(&cfg)?;
    for e in &m.evals {
        println!("seen {:>7}  gap {:.4}  makespan {:.2}", e.instances_seen, e.mean_gap, e.mean_makespan);
    }
    if m.unproved_excluded > 0 {
        eprintln!("train: {} test instances without a proved optimum excluded", m.unproved_excluded);
    }
    match &m.status {
        RunStatus::Aborted { instances_seen, reason } => {
            eprintln!("train: aborted after {instances_seen} instances: {reason}");
            Ok(false)
        }
        _ => {
            println!("run {} complete, manifest {}", m.labels.run_id, cfg.out_dir.join("manifest.json").display());
            Ok(true)
        }
    }
}

fn grid(a: GridArgs) -> Result<bool> {
    let cfg = GridConfig {
        parallel: a.parallel,
        record_wall_clock: !a.no_wall_clock,
        ..GridConfig::preset(a.scale, a.out)
    };
    announce("grid", &cfg);
    let outcome = experiment_grid(&cfg)?;
    let aborted = outcome.manifests.iter().filter(|m| !m.is_completed()).count();
    println!(
        "{} runs ({} already complete, {} aborted), curves in {}",
        outcome.manifests.len(),
        outcome.skipped,
        aborted,
        outcome.eval_csv.display()
    );
    Ok(aborted == 0)
}

fn spacing(c: &Curve) -> Option<usize> {
    match c.records.as_slice() {
        [a, b, ..] => b.instances_seen.checked_sub(a.instances_seen).filter(|&d| d > 0),
        _ => None,
    }
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    announce("analyze", &a);
    let registry = DipRegistry::default();
    let detector = registry.get(&a.detector)?;
    let mut curves = Vec::new();
    for path in &a.eval {
        curves.extend(read_eval_csv(path)?);
    }
    if curves.is_empty() {
        return Err(Error::Validation("no evaluation rows found".into()));
    }
    let report = summarize(&curves, detector.as_ref());
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write_text(&a.out.join("runs.csv"), &report.runs_csv())?;
    write_text(&a.out.join("curricula.csv"), &report.curricula_csv())?;
    write_text(&a.out.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write_text(&a.out.join("plot_curves.py"), PLOT_SCRIPT)?;
    print!("{}", report.text());

    if a.ranks {
        let mut deltas: BTreeMap<DeltaKey, f64> = BTreeMap::new();
        for c in curves.iter().filter(|c| !c.is_baseline()) {
            let every = spacing(c)
                .ok_or_else(|| Error::Validation(format!("run {} has fewer than two evaluations", c.labels.run_id)))?;
            let halfway = a
                .halfway
                .unwrap_or_else(|| c.records.last().map_or(0, |r| r.instances_seen) / 2);
            let first: CurriculumElement = c.labels.curriculum_first.parse()?;
            let second: CurriculumElement = c.labels.curriculum_second.parse()?;
            let dataset = c.labels.dataset_seed.map(|s| s.to_string()).unwrap_or_default();
            deltas.insert((dataset, first, second), second_half_impact(&c.records, halfway, every)?);
        }
        let table = rank_analysis(&deltas)?;
        write_text(&a.out.join("ranks.csv"), &table.to_csv())?;
        print!("second-element ranks over {} groups\n{}", table.groups, table.to_csv());
    }
    println!("report written to {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a).map(|()| true),
        Command::Pdr(a) => pdr(a).map(|()| true),
        Command::Exact(a) => exact(a).map(|()| true),
        Command::Dts(a) => dts(a).map(|()| true),
        Command::Curriculum(a) => curriculum(a).map(|()| true),
        Command::Train(a) => train(*a),
        Command::Grid(a) => grid(a),
        Command::Analyze(a) => analyze(a).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
