use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Train/validation/test slice proportions of 1711/428/300 out of 2439.
pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [1711.0 / 2439.0, 428.0 / 2439.0, 300.0 / 2439.0];

/// Disjoint patient sets for training, validation and testing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub ratios: [f64; 3],
    /// Slice counts actually assigned to each split.
    pub slice_counts: [usize; 3],
}

impl SplitAssignment {
    pub fn realized_ratios(&self) -> [f64; 3] {
        let total = self.slice_counts.iter().sum::<usize>().max(1) as f64;
        self.slice_counts.map(|c| c as f64 / total)
    }

    pub fn split_of(&self, patient: &str) -> Option<usize> {
        [&self.train, &self.validation, &self.test]
            .iter()
            .position(|s| s.contains(patient))
    }
}

/// Splits patients so each split's share of 2D slices approximates `ratios`.
///
/// Patients are shuffled with `seed`, ordered largest-first (ties keep the
/// shuffled order), and each is assigned to the split currently furthest
/// below its target slice count. No patient ever lands in two splits.
pub fn patient_aware_split(
    patients: &[(String, usize)],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::config("ratios", "must be in [0,1] and sum to 1"));
    }
    let unique: BTreeSet<&str> = patients.iter().map(|(id, _)| id.as_str()).collect();
    if unique.len() != patients.len() {
        return Err(Error::Invalid("patient ids must be unique".into()));
    }
    let needed = ratios.iter().filter(|&&r| r > 0.0).count();
    if patients.len() < needed.max(3) {
        return Err(Error::Invalid(format!(
            "{} patients cannot fill {} splits",
            patients.len(),
            needed.max(3)
        )));
    }
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.shuffle(&mut seed::rng_for(seed, &[b"patient-split"]));
    order.sort_by(|&a, &b| patients[b].1.cmp(&patients[a].1));

    let total: usize = patients.iter().map(|p| p.1).sum();
    let targets = ratios.map(|r| r * total as f64);
    let mut counts = [0usize; 3];
    let mut members: [BTreeSet<String>; 3] = Default::default();
    for (rank, &i) in order.iter().enumerate() {
        let remaining_patients = order.len() - rank;
        let empty: Vec<usize> = (0..3)
            .filter(|&s| ratios[s] > 0.0 && members[s].is_empty())
            .collect();
        let candidates: Vec<usize> = if empty.len() >= remaining_patients {
            empty
        } else {
            (0..3).filter(|&s| ratios[s] > 0.0).collect()
        };
        let pick = candidates
            .into_iter()
            .max_by(|&a, &b| {
                let da = targets[a] - counts[a] as f64;
                let db = targets[b] - counts[b] as f64;
                // Larger deficit wins; on ties the lower split index wins.
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("at least one split has a positive ratio");
        counts[pick] += patients[i].1;
        members[pick].insert(patients[i].0.clone());
    }
    let [train, validation, test] = members;
    Ok(SplitAssignment {
        train,
        validation,
        test,
        ratios,
        slice_counts: counts,
    })
}
