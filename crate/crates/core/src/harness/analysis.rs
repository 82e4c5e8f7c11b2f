use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{EvalRecord, RunLabels, EVAL_CSV_HEADER};
use crate::curriculum::{CurriculumElement, SHUFFLED};
use crate::error::{Error, Result};
use crate::io;

/// Picks the index of the first dip in a gap curve of at least three points.
pub trait DipDetector: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, gaps: &[f64]) -> usize;
}

/// Earliest point not above its neighbours; the last point if none qualifies.
pub struct LocalMinimum;

impl DipDetector for LocalMinimum {
    fn name(&self) -> &str {
        "local-min"
    }

    fn detect(&self, gaps: &[f64]) -> usize {
        let n = gaps.len();
        (0..n)
            .find(|&i| (i == 0 || gaps[i] <= gaps[i - 1]) && (i + 1 == n || gaps[i] <= gaps[i + 1]))
            .unwrap_or(n - 1)
    }
}

/// Earliest point not above any point within `radius` positions on either side.
pub struct WindowMinimum {
    pub radius: usize,
}

impl DipDetector for WindowMinimum {
    fn name(&self) -> &str {
        "window"
    }

    fn detect(&self, gaps: &[f64]) -> usize {
        let n = gaps.len();
        (0..n)
            .find(|&i| {
                let lo = i.saturating_sub(self.radius);
                let hi = (i + self.radius + 1).min(n);
                gaps[lo..hi].iter().all(|&g| gaps[i] <= g)
            })
            .unwrap_or(n - 1)
    }
}

pub struct DipRegistry {
    detectors: BTreeMap<String, Arc<dyn DipDetector>>,
}

impl Default for DipRegistry {
    fn default() -> Self {
        let mut reg = DipRegistry {
            detectors: BTreeMap::new(),
        };
        reg.register(LocalMinimum);
        reg.register(WindowMinimum { radius: 2 });
        reg
    }
}

impl DipRegistry {
    pub const DEFAULT: &'static str = "local-min";

    pub fn register<D: DipDetector + 'static>(&mut self, detector: D) {
        self.detectors.insert(detector.name().to_string(), Arc::new(detector));
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn DipDetector>> {
        self.detectors.get(name).cloned().ok_or_else(|| {
            Error::Config(format!(
                "unknown dip detector {name:?}; known: {}",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.detectors.keys().map(String::as_str)
    }
}

/// `(instances_seen, gap)` of the first dip under `detector`.
pub fn detect_first_dip_with(detector: &dyn DipDetector, curve: &[EvalRecord]) -> Result<(usize, f64)> {
    if curve.len() < 3 {
        return Err(Error::Validation(format!(
            "first-dip detection needs at least 3 evaluations, got {}",
            curve.len()
        )));
    }
    let gaps: Vec<f64> = curve.iter().map(|r| r.mean_gap).collect();
    let i = detector.detect(&gaps);
    Ok((curve[i].instances_seen, curve[i].mean_gap))
}

pub fn detect_first_dip(curve: &[EvalRecord]) -> Result<(usize, f64)> {
    detect_first_dip_with(&LocalMinimum, curve)
}

/// Gap change over the validation interval that starts at `halfway`.
/// Negative is a drop (improvement).
pub fn second_half_impact(curve: &[EvalRecord], halfway: usize, validation_every: usize) -> Result<f64> {
    let at = |seen: usize| {
        curve
            .iter()
            .find(|r| r.instances_seen == seen)
            .map(|r| r.mean_gap)
            .ok_or_else(|| Error::Validation(format!("no evaluation at {seen} instances seen")))
    };
    Ok(at(halfway + validation_every)? - at(halfway)?)
}

/// `(dataset, first element, second element)`.
pub type DeltaKey = (String, CurriculumElement, CurriculumElement);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankTable {
    /// `rank_counts[e][r]`: how often second element `e` took rank `r + 1`.
    pub rank_counts: [[usize; 4]; 4],
    pub drops: [usize; 4],
    pub rises: [usize; 4],
    pub zeros: [usize; 4],
    pub groups: usize,
}

impl RankTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("element,rank1,rank2,rank3,rank4,drops,rises,zeros\n");
        for e in CurriculumElement::ALL {
            let k = e.index();
            let r = self.rank_counts[k];
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.label(),
                r[0],
                r[1],
                r[2],
                r[3],
                self.drops[k],
                self.rises[k],
                self.zeros[k]
            );
        }
        out
    }
}

/// Ranks the four second-element deltas within every `(dataset, first)` group.
/// Rank 1 is the largest drop; tied deltas share the lower rank.
pub fn rank_analysis(deltas: &BTreeMap<DeltaKey, f64>) -> Result<RankTable> {
    let datasets: BTreeSet<&String> = deltas.keys().map(|k| &k.0).collect();
    let mut missing = Vec::new();
    for d in &datasets {
        for first in CurriculumElement::ALL {
            for second in CurriculumElement::ALL {
                if !deltas.contains_key(&((*d).clone(), first, second)) {
                    missing.push(format!("({d}, {first}, {second})"));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!("incomplete rank groups, missing {}", missing.join(", "))));
    }

    let mut table = RankTable {
        rank_counts: [[0; 4]; 4],
        drops: [0; 4],
        rises: [0; 4],
        zeros: [0; 4],
        groups: 0,
    };
    for d in &datasets {
        for first in CurriculumElement::ALL {
            let vals: Vec<f64> = CurriculumElement::ALL
                .iter()
                .map(|&s| deltas[&((*d).clone(), first, s)])
                .collect();
            for (k, &v) in vals.iter().enumerate() {
                let rank = vals.iter().filter(|&&o| o < v).count();
                table.rank_counts[k][rank] += 1;
                if v < 0.0 {
                    table.drops[k] += 1;
                } else if v > 0.0 {
                    table.rises[k] += 1;
                } else {
                    table.zeros[k] += 1;
                }
            }
            table.groups += 1;
        }
    }
    Ok(table)
}

/// One run's learning curve with its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub labels: RunLabels,
    pub records: Vec<EvalRecord>,
}

impl Curve {
    pub fn is_baseline(&self) -> bool {
        self.labels.curriculum_first == SHUFFLED
    }

    pub fn curriculum(&self) -> String {
        if self.is_baseline() {
            SHUFFLED.to_string()
        } else {
            format!("[{}, {}]", self.labels.curriculum_first, self.labels.curriculum_second)
        }
    }
}

/// Groups evaluation CSV rows into curves, in order of first appearance.
pub fn parse_eval_csv(text: &str, path: &Path) -> Result<Vec<Curve>> {
    let mut curves: Vec<Curve> = Vec::new();
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line == EVAL_CSV_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(perr(i + 1, format!("expected 8 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| perr(i + 1, format!("bad {what} {s:?}")))
        };
        let labels = RunLabels {
            run_id: f[0].to_string(),
            curriculum_first: f[1].to_string(),
            curriculum_second: f[2].to_string(),
            dataset_seed: if f[3].is_empty() {
                None
            } else {
                Some(f[3].parse().map_err(|_| perr(i + 1, format!("bad dataset_seed {:?}", f[3])))?)
            },
            init_seed: f[4].parse().map_err(|_| perr(i + 1, format!("bad init_seed {:?}", f[4])))?,
        };
        let rec = EvalRecord {
            instances_seen: f[5].parse().map_err(|_| perr(i + 1, format!("bad instances_seen {:?}", f[5])))?,
            mean_gap: num(f[6], "mean_gap")?,
            mean_makespan: num(f[7], "mean_makespan")?,
        };
        match curves.iter_mut().find(|c| c.labels.run_id == labels.run_id) {
            Some(c) if c.labels == labels => c.records.push(rec),
            Some(_) => return Err(perr(i + 1, format!("run {} has inconsistent labels", labels.run_id))),
            None => curves.push(Curve {
                labels,
                records: vec![rec],
            }),
        }
    }
    Ok(curves)
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<Curve>> {
    parse_eval_csv(&io::read_to_string(path)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub curriculum: String,
    pub best_gap: f64,
    pub final_gap: f64,
    /// Absent for curves shorter than three points.
    pub dip: Option<(usize, f64)>,
    pub min_in_first_dip: Option<bool>,
}

/// Per-curriculum means plus the comparison against the shuffled baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSummary {
    pub curriculum: String,
    pub runs: usize,
    pub best_gap: f64,
    pub final_gap: f64,
    pub dip_gap: Option<f64>,
    /// Relative best-gap improvement over the baseline, in percent.
    pub best_improvement_pct: Option<f64>,
    /// Absolute best-gap improvement over the baseline, in percentage points.
    pub best_improvement_pp: Option<f64>,
    pub dip_improvement_pct: Option<f64>,
    pub dip_improvement_pp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunSummary>,
    pub curricula: Vec<CurriculumSummary>,
    /// Share of runs whose global minimum is their first dip.
    pub share_min_in_first_dip: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn improvement(baseline: Option<f64>, value: Option<f64>) -> (Option<f64>, Option<f64>) {
    match (baseline, value) {
        (Some(b), Some(v)) if b > 0.0 => (Some((b - v) / b * 100.0), Some((b - v) * 100.0)),
        _ => (None, None),
    }
}

pub fn summarize(curves: &[Curve], detector: &dyn DipDetector) -> Report {
    let runs: Vec<RunSummary> = curves
        .iter()
        .filter(|c| !c.records.is_empty())
        .map(|c| {
            let best = c.records.iter().map(|r| r.mean_gap).fold(f64::INFINITY, f64::min);
            let dip = detect_first_dip_with(detector, &c.records).ok();
            RunSummary {
                run_id: c.labels.run_id.clone(),
                curriculum: c.curriculum(),
                best_gap: best,
                final_gap: c.records.last().map(|r| r.mean_gap).unwrap_or(f64::NAN),
                dip,
                min_in_first_dip: dip.map(|(_, g)| g <= best),
            }
        })
        .collect();

    let mut labels: Vec<String> = Vec::new();
    for r in &runs {
        if !labels.contains(&r.curriculum) {
            labels.push(r.curriculum.clone());
        }
    }
    let group = |label: &str| runs.iter().filter(|r| r.curriculum == label).collect::<Vec<_>>().into_iter();
    let base_best = mean(group(SHUFFLED).map(|r| r.best_gap));
    let base_dip = mean(group(SHUFFLED).filter_map(|r| r.dip.map(|d| d.1)));

    let curricula = labels
        .iter()
        .map(|label| {
            let best = mean(group(label).map(|r| r.best_gap));
            let dip = mean(group(label).filter_map(|r| r.dip.map(|d| d.1)));
            let (bp, bpp) = if label == SHUFFLED { (None, None) } else { improvement(base_best, best) };
            let (dp, dpp) = if label == SHUFFLED { (None, None) } else { improvement(base_dip, dip) };
            CurriculumSummary {
                curriculum: label.clone(),
                runs: group(label).count(),
                best_gap: best.unwrap_or(f64::NAN),
                final_gap: mean(group(label).map(|r| r.final_gap)).unwrap_or(f64::NAN),
                dip_gap: dip,
                best_improvement_pct: bp,
                best_improvement_pp: bpp,
                dip_improvement_pct: dp,
                dip_improvement_pp: dpp,
            }
        })
        .collect();

    let flags: Vec<bool> = runs.iter().filter_map(|r| r.min_in_first_dip).collect();
    let share = (!flags.is_empty()).then(|| flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64);
    Report {
        runs,
        curricula,
        share_min_in_first_dip: share,
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl Report {
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("run_id,curriculum,best_gap,final_gap,dip_instances,dip_gap,min_in_first_dip\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},\"{}\",{:.6},{:.6},{},{},{}",
                r.run_id,
                r.curriculum,
                r.best_gap,
                r.final_gap,
                r.dip.map(|d| d.0.to_string()).unwrap_or_default(),
                opt(r.dip.map(|d| d.1)),
                r.min_in_first_dip.map(|b| b.to_string()).unwrap_or_default()
            );
        }
        out
    }

    pub fn curricula_csv(&self) -> String {
        let mut out = String::from(
            "curriculum,runs,best_gap,final_gap,dip_gap,best_improvement_pct,best_improvement_pp,dip_improvement_pct,dip_improvement_pp\n",
        );
        for c in &self.curricula {
            let _ = writeln!(
                out,
                "\"{}\",{},{:.6},{:.6},{},{},{},{},{}",
                c.curriculum,
                c.runs,
                c.best_gap,
                c.final_gap,
                opt(c.dip_gap),
                opt(c.best_improvement_pct),
                opt(c.best_improvement_pp),
                opt(c.dip_improvement_pct),
                opt(c.dip_improvement_pp)
            );
        }
        out
    }

    /// Human-readable digest.
    pub fn text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:>4} {:>9} {:>9} {:>9} {:>16} {:>16}", "curriculum", "runs", "best", "final", "dip", "best vs base", "dip vs base");
        for c in &self.curricula {
            let cmp = |pct: Option<f64>, pp: Option<f64>| match (pct, pp) {
                (Some(a), Some(b)) => format!("{a:+.1}% ({b:+.2}pp)"),
                _ => "-".into(),
            };
            let _ = writeln!(
                out,
                "{:<14} {:>4} {:>9.4} {:>9.4} {:>9} {:>16} {:>16}",
                c.curriculum,
                c.runs,
                c.best_gap,
                c.final_gap,
                c.dip_gap.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into()),
                cmp(c.best_improvement_pct, c.best_improvement_pp),
                cmp(c.dip_improvement_pct, c.dip_improvement_pp)
            );
        }
        if let Some(s) = self.share_min_in_first_dip {
            let _ = writeln!(out, "runs with their global minimum in the first dip: {:.1}%", s * 100.0);
        }
        out
    }
}

/// Plots every curve of an evaluation CSV given as the first argument.
pub const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "eval.csv"
out = sys.argv[2] if len(sys.argv) > 2 else "curves.png"
curves = defaultdict(list)
labels = {}
with open(path) as f:
    for row in csv.DictReader(f):
        curves[row["run_id"]].append((int(row["instances_seen"]), float(row["mean_gap"])))
        first, second = row["curriculum_first"], row["curriculum_second"]
        labels[row["run_id"]] = "shuffled" if first == "shuffled" else f"[{first}, {second}]"

fig, ax = plt.subplots(figsize=(9, 5))
for run, pts in curves.items():
    pts.sort()
    style = "--" if labels[run] == "shuffled" else "-"
    ax.plot([p[0] for p in pts], [p[1] for p in pts], style, label=f"{run} {labels[run]}")
ax.set_xlabel("training instances seen")
ax.set_ylabel("mean optimality gap")
if len(curves) <= 20:
    ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(out, dpi=150)
"#;
