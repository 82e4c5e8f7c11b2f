//! Difficulty grading and curriculum construction.
//!
//! An instance's difficulty to solve (DTS) is the makespan the dataset's best
//! deterministic dispatching rule reaches on it. Sorting by DTS and halving the
//! order yields four curriculum elements (easy/hard, normal/reversed); a
//! curriculum is two elements played back to back.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{gap, OptimumRecord};
use crate::instance::{Dataset, Time};
use crate::io;
use crate::pdr::{makespan_table, PdrKind};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DtsRecord {
    pub instance_id: usize,
    pub dts: Time,
    pub rule_used: PdrKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CurriculumElement {
    #[serde(rename = "e_n")]
    EasyNormal,
    #[serde(rename = "e_r")]
    EasyReversed,
    #[serde(rename = "h_n")]
    HardNormal,
    #[serde(rename = "h_r")]
    HardReversed,
}

impl CurriculumElement {
    pub const ALL: [CurriculumElement; 4] = [
        CurriculumElement::EasyNormal,
        CurriculumElement::EasyReversed,
        CurriculumElement::HardNormal,
        CurriculumElement::HardReversed,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CurriculumElement::EasyNormal => "e_n",
            CurriculumElement::EasyReversed => "e_r",
            CurriculumElement::HardNormal => "h_n",
            CurriculumElement::HardReversed => "h_r",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for CurriculumElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CurriculumElement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CurriculumElement::ALL
            .into_iter()
            .find(|e| e.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown curriculum element {s:?} (expected e_n, e_r, h_n or h_r)")))
    }
}

/// One training order. `first`/`second` are element labels, or `"shuffled"` for the baseline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Curriculum {
    pub dataset_hash: String,
    pub rule_used: Option<PdrKind>,
    pub first: String,
    pub second: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub order: Vec<usize>,
}

pub const SHUFFLED: &str = "shuffled";

impl Curriculum {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn label(&self) -> String {
        if self.is_baseline() {
            format!("shuffled(seed={})", self.seed.unwrap_or_default())
        } else {
            format!("[{}, {}]", self.first, self.second)
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.first == SHUFFLED
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&io::read_to_string(path)?)?)
    }

    /// Checks that every id exists in a dataset of `n` instances.
    pub fn validate_against(&self, n: usize) -> Result<()> {
        if let Some(&bad) = self.order.iter().find(|&&id| id >= n) {
            return Err(Error::Validation(format!(
                "curriculum references instance {bad}, dataset has {n}"
            )));
        }
        Ok(())
    }
}

/// The dataset's best deterministic rule and its per-instance makespans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtsTable {
    pub dataset_hash: String,
    pub rule_used: PdrKind,
    /// Mean makespan (or mean gap when optima were supplied) per candidate rule.
    pub rule_scores: Vec<(PdrKind, f64)>,
    pub records: Vec<DtsRecord>,
}

impl DtsTable {
    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, (serde_json::to_string(self)? + "\n").as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&io::read_to_string(path)?)?)
    }
}

/// Grades every instance with the dataset's most competitive deterministic rule.
///
/// The best rule minimizes the mean makespan, or the mean gap over proved
/// optima when `optima` is given. Ties go to the earlier rule in
/// [`PdrKind::DETERMINISTIC`].
pub fn compute_dts(dataset: &Dataset, optima: Option<&[OptimumRecord]>) -> Result<DtsTable> {
    if dataset.is_empty() {
        return Err(Error::Validation("cannot grade an empty dataset".into()));
    }
    let kinds = PdrKind::DETERMINISTIC;
    let table = makespan_table(&dataset.instances, &kinds, 0);
    let n = dataset.len();
    let proved = optima.map(|recs| crate::exact::proved_optima(recs, n));
    let mut scores = Vec::with_capacity(kinds.len());
    for (kind, makespans) in kinds.iter().zip(&table) {
        let score = match &proved {
            Some(opt) => {
                let mut sum = 0.0;
                let mut count = 0usize;
                for (&ms, o) in makespans.iter().zip(opt) {
                    if let Some(o) = o {
                        sum += gap(ms, *o)?;
                        count += 1;
                    }
                }
                if count == 0 {
                    return Err(Error::Validation("optima cache has no proved entries for this dataset".into()));
                }
                sum / count as f64
            }
            None => makespans.iter().map(|&m| m as f64).sum::<f64>() / n as f64,
        };
        scores.push((*kind, score));
    }
    let (best_idx, _) = scores
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bs), (i, &(_, s))| if s < bs { (i, s) } else { (bi, bs) });
    let rule_used = kinds[best_idx];
    let records = dataset
        .instances
        .iter()
        .zip(&table[best_idx])
        .map(|(inst, &dts)| DtsRecord {
            instance_id: inst.id,
            dts,
            rule_used,
        })
        .collect();
    Ok(DtsTable {
        dataset_hash: dataset.content_hash(),
        rule_used,
        rule_scores: scores,
        records,
    })
}

/// Id sequences for the four curriculum elements, indexed by [`CurriculumElement::index`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Elements {
    seqs: [Vec<usize>; 4],
}

impl Elements {
    pub fn get(&self, e: CurriculumElement) -> &[usize] {
        &self.seqs[e.index()]
    }
}

/// Sorts by `(dts, instance_id)` and splits at the median index.
pub fn build_elements(records: &[DtsRecord]) -> Result<Elements> {
    if !records.len().is_multiple_of(2) {
        return Err(Error::Validation(format!(
            "curriculum elements need an even number of instances, got {}",
            records.len()
        )));
    }
    let mut sorted: Vec<_> = records.iter().map(|r| (r.dts, r.instance_id)).collect();
    sorted.sort_unstable();
    let ids: Vec<usize> = sorted.into_iter().map(|(_, id)| id).collect();
    let (easy, hard) = ids.split_at(ids.len() / 2);
    let rev = |s: &[usize]| s.iter().rev().copied().collect::<Vec<_>>();
    Ok(Elements {
        seqs: [easy.to_vec(), rev(easy), hard.to_vec(), rev(hard)],
    })
}

pub fn build_curriculum(
    elements: &Elements,
    first: CurriculumElement,
    second: CurriculumElement,
    table: &DtsTable,
) -> Curriculum {
    let mut order = elements.get(first).to_vec();
    order.extend_from_slice(elements.get(second));
    Curriculum {
        dataset_hash: table.dataset_hash.clone(),
        rule_used: Some(table.rule_used),
        first: first.label().into(),
        second: second.label().into(),
        seed: None,
        order,
    }
}

/// All 16 curricula, first element major, in [`CurriculumElement::ALL`] order.
pub fn all_curricula(elements: &Elements, table: &DtsTable) -> Vec<Curriculum> {
    CurriculumElement::ALL
        .iter()
        .flat_map(|&a| CurriculumElement::ALL.iter().map(move |&b| (a, b)))
        .map(|(a, b)| build_curriculum(elements, a, b, table))
        .collect()
}

pub fn shuffled_baseline(dataset: &Dataset, seed: u64) -> Curriculum {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seed::rng_for(seed, 0x5348_5546));
    Curriculum {
        dataset_hash: dataset.content_hash(),
        rule_used: None,
        first: SHUFFLED.into(),
        second: SHUFFLED.into(),
        seed: Some(seed),
        order,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{generate_dataset, GenConfig, JsspInstance};
    use proptest::prelude::*;
    use CurriculumElement::*;

    fn recs(dts: &[Time]) -> Vec<DtsRecord> {
        dts.iter()
            .enumerate()
            .map(|(i, &d)| DtsRecord { instance_id: i, dts: d, rule_used: PdrKind::Mtr })
            .collect()
    }

    fn table(dts: &[Time]) -> DtsTable {
        DtsTable { dataset_hash: "h".into(), rule_used: PdrKind::Mtr, rule_scores: vec![], records: recs(dts) }
    }

    #[test]
    fn hand_traced_elements() {
        let e = build_elements(&recs(&[3, 1, 2, 4])).unwrap();
        assert_eq!(e.get(EasyNormal), &[1, 2]);
        assert_eq!(e.get(EasyReversed), &[2, 1]);
        assert_eq!(e.get(HardNormal), &[0, 3]);
        assert_eq!(e.get(HardReversed), &[3, 0]);
    }

    #[test]
    fn equal_dts_split_by_id() {
        let e = build_elements(&recs(&[7; 6])).unwrap();
        assert_eq!(e.get(EasyNormal), &[0, 1, 2]);
        assert_eq!(e.get(HardNormal), &[3, 4, 5]);
    }

    #[test]
    fn odd_count_rejected() {
        assert!(matches!(build_elements(&recs(&[1, 2, 3])), Err(Error::Validation(_))));
    }

    #[test]
    fn curriculum_shapes() {
        let dts = [5, 9, 1, 7, 3, 8];
        let t = table(&dts);
        let e = build_elements(&t.records).unwrap();
        let en = build_curriculum(&e, EasyNormal, EasyNormal, &t);
        assert_eq!(en.len(), 6);
        assert_eq!(&en.order[..3], &en.order[3..]);
        let hr = build_curriculum(&e, HardReversed, EasyNormal, &t);
        assert_eq!(dts[hr.order[0]], 9);
        let all = all_curricula(&e, &t);
        assert_eq!(all.len(), 16);
        let mut labels: Vec<_> = all.iter().map(|c| (c.first.clone(), c.second.clone())).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 16);
        assert_eq!(all[0].label(), "[e_n, e_n]");
        assert_eq!(all[15].label(), "[h_r, h_r]");
    }

    #[test]
    fn element_labels_parse() {
        for e in CurriculumElement::ALL {
            assert_eq!(e.label().parse::<CurriculumElement>().unwrap(), e);
            assert_eq!(serde_json::to_string(&e).unwrap(), format!("\"{}\"", e.label()));
        }
        assert!("x_y".parse::<CurriculumElement>().is_err());
    }

    #[test]
    fn dts_of_single_task() {
        let inst = JsspInstance::new(0, vec![vec![0]], vec![vec![4]]).unwrap();
        let ds = Dataset { config: None, instances: vec![inst] };
        let t = compute_dts(&ds, None).unwrap();
        assert_eq!(t.records[0].dts, 4);
        assert!(compute_dts(&Dataset { config: None, instances: vec![] }, None).is_err());
    }

    #[test]
    fn best_rule_minimizes_mean_makespan() {
        let ds = generate_dataset(&GenConfig::uniform(6, 6, 1, 99, 21), 200).unwrap();
        let t = compute_dts(&ds, None).unwrap();
        let best = t.rule_scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        assert_eq!(t.rule_scores.iter().find(|s| s.0 == t.rule_used).unwrap().1, best);
        assert!(t.records.iter().all(|r| r.rule_used == t.rule_used && r.dts >= 1));
        assert_eq!(t.rule_scores.len(), 6);
    }

    #[test]
    fn baseline_is_seeded_permutation() {
        let ds = generate_dataset(&GenConfig::uniform(2, 2, 1, 9, 0), 1).unwrap();
        assert_eq!(shuffled_baseline(&ds, 3).order, vec![0]);
        let ds = generate_dataset(&GenConfig::uniform(2, 2, 1, 9, 0), 50).unwrap();
        let a = shuffled_baseline(&ds, 3);
        assert_eq!(a, shuffled_baseline(&ds, 3));
        assert_ne!(a.order, shuffled_baseline(&ds, 4).order);
        let mut sorted = a.order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert!(a.is_baseline());
        assert_eq!(a.first, "shuffled");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = table(&[4, 2, 6, 1]);
        let e = build_elements(&t.records).unwrap();
        let c = build_curriculum(&e, HardReversed, EasyReversed, &t);
        let p = dir.path().join("c.json");
        c.write(&p).unwrap();
        assert_eq!(Curriculum::read(&p).unwrap(), c);
        let json = c.to_json().unwrap();
        for key in ["dataset_hash", "rule_used", "first", "second", "order"] {
            assert!(json.contains(key), "{key}");
        }
        assert!(c.validate_against(4).is_ok());
        assert!(c.validate_against(3).is_err());
    }

    proptest! {
        #[test]
        fn element_properties(dts in proptest::collection::vec(1u32..50, 1..40).prop_map(|mut v| { if v.len() % 2 == 1 { v.pop(); } v })) {
            prop_assume!(!dts.is_empty());
            let t = table(&dts);
            let e = build_elements(&t.records).unwrap();
            let d = |ids: &[usize]| ids.iter().map(|&i| dts[i]).collect::<Vec<_>>();
            let max_easy = d(e.get(EasyNormal)).into_iter().max().unwrap();
            let min_hard = d(e.get(HardNormal)).into_iter().min().unwrap();
            prop_assert!(max_easy <= min_hard);
            for el in [EasyNormal, HardNormal] {
                prop_assert!(d(e.get(el)).windows(2).all(|w| w[0] <= w[1]));
            }
            for el in [EasyReversed, HardReversed] {
                prop_assert!(d(e.get(el)).windows(2).all(|w| w[0] >= w[1]));
            }
            for c in all_curricula(&e, &t) {
                prop_assert_eq!(c.len(), dts.len());
                let mut ids = c.order.clone();
                ids.sort_unstable();
                let half = dts.len() / 2;
                let mut h = c.order[..half].to_vec();
                h.sort_unstable();
                h.dedup();
                prop_assert_eq!(h.len(), half);
                if c.first == c.second {
                    prop_assert_eq!(&c.order[half..], &c.order[..half]);
                }
                if c.first[..1] == c.second[..1] {
                    let mut tail = c.order[half..].to_vec();
                    tail.sort_unstable();
                    prop_assert_eq!(tail, h);
                } else {
                    prop_assert_eq!(ids, (0..dts.len()).collect::<Vec<_>>());
                }
            }
        }
    }
}
