use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::augment::hflip_image;
use crate::data::{SampleId, SliceSample};
use crate::error::{Error, Result};
use crate::metrics::{dice_coefficient, LabelMask};
use crate::nn::Segmenter;
use crate::trainer::predict;

/// Acceptance thresholds for predicted masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelFilter {
    pub min_confidence: f64,
    pub flip_consistency_min_dice: f64,
    pub foreground_fraction_bounds: (f64, f64),
    pub require_all_classes: bool,
}

impl Default for PseudoLabelFilter {
    fn default() -> Self {
        Self {
            min_confidence: 0.9,
            flip_consistency_min_dice: 0.8,
            foreground_fraction_bounds: (0.005, 0.5),
            require_all_classes: false,
        }
    }
}

impl PseudoLabelFilter {
    /// Accepts every prediction.
    pub fn vacuous() -> Self {
        Self {
            min_confidence: 0.0,
            flip_consistency_min_dice: 0.0,
            foreground_fraction_bounds: (0.0, 1.0),
            require_all_classes: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.foreground_fraction_bounds;
        for (field, v) in [
            ("min_confidence", self.min_confidence),
            ("flip_consistency_min_dice", self.flip_consistency_min_dice),
            ("foreground_fraction_bounds", lo),
            ("foreground_fraction_bounds", hi),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, format!("{v} is outside [0, 1]")));
            }
        }
        if lo > hi {
            return Err(Error::config("foreground_fraction_bounds", "bounds are not ordered"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum RejectionReason {
    LowConfidence,
    FlipInconsistent,
    ForegroundFraction,
    MissingClasses,
}

impl fmt::Display for RejectionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectionReason::LowConfidence => "low_confidence",
            RejectionReason::FlipInconsistent => "flip_inconsistent",
            RejectionReason::ForegroundFraction => "foreground_fraction",
            RejectionReason::MissingClasses => "missing_classes",
        })
    }
}

/// The filter statistics of one unlabeled slice.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelRecord {
    pub id: SampleId,
    pub confidence: f64,
    pub flip_dice: f64,
    pub foreground_fraction: f64,
    pub reasons: Vec<RejectionReason>,
    /// Dice against the withheld truth, filled in by an explicit audit.
    pub hidden_dice: Option<f64>,
}

impl PseudoLabelRecord {
    pub fn accepted(&self) -> bool {
        self.reasons.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct PseudoLabeledSet {
    /// Pool samples carrying predicted masks, flagged as pseudo-labeled.
    pub accepted: Vec<SliceSample>,
    pub rejected: Vec<(SampleId, Vec<RejectionReason>)>,
    /// One record per pool sample, in pool order.
    pub records: Vec<PseudoLabelRecord>,
}

impl PseudoLabeledSet {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted.len() as f64 / self.records.len().max(1) as f64
    }

    /// Reveals the withheld truth of accepted samples and stores each dice in
    /// the matching record. Returns the mean over samples with hidden masks.
    pub fn audit(&mut self, num_classes: usize) -> Result<Option<f64>> {
        let mut scores = Vec::new();
        for sample in &self.accepted {
            let (Some(hidden), Some(pred)) = (&sample.hidden_mask, &sample.mask) else {
                continue;
            };
            let d = average_dice(pred, hidden.reveal(), num_classes)?;
            let id = sample.id();
            if let Some(r) = self.records.iter_mut().find(|r| r.id == id) {
                r.hidden_dice = Some(d);
            }
            scores.push(d);
        }
        Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
    }

    /// `id,accepted,reasons,confidence,flip_dice,foreground_fraction,hidden_dice`.
    pub fn audit_csv(&self) -> String {
        let mut out =
            String::from("id,accepted,reasons,confidence,flip_dice,foreground_fraction,hidden_dice\n");
        for r in &self.records {
            let reasons: Vec<String> = r.reasons.iter().map(|x| x.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{}\n",
                r.id,
                r.accepted(),
                reasons.join(";"),
                r.confidence,
                r.flip_dice,
                r.foreground_fraction,
                r.hidden_dice.map(|d| format!("{d:.6}")).unwrap_or_default()
            ));
        }
        out
    }
}

/// Mean per-class dice over foreground classes present in either mask;
/// 1.0 when neither has foreground.
pub fn average_dice(a: &LabelMask, b: &LabelMask, num_classes: usize) -> Result<f64> {
    let mut scores = Vec::new();
    for class in 1..num_classes as u8 {
        if a.contains(class) || b.contains(class) {
            scores.push(dice_coefficient(a, b, class)?);
        }
    }
    Ok(if scores.is_empty() {
        1.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    })
}

/// Mean max-probability over predicted-foreground pixels, or over all pixels
/// when nothing is predicted as foreground.
fn confidence(mask: &LabelMask, probs: &[f64], classes: usize) -> f64 {
    let plane = mask.data().len();
    let max_prob =
        |i: usize| (0..classes).map(|c| probs[c * plane + i]).fold(f64::NEG_INFINITY, f64::max);
    let fg: Vec<usize> = (0..plane).filter(|&i| mask.data()[i] != 0).collect();
    if fg.is_empty() {
        (0..plane).map(max_prob).sum::<f64>() / plane.max(1) as f64
    } else {
        fg.iter().map(|&i| max_prob(i)).sum::<f64>() / fg.len() as f64
    }
}

/// Predicts masks for unlabeled samples and keeps those passing `filter`.
pub fn pseudo_label<S: Segmenter + ?Sized>(
    net: &S,
    unlabeled: &[SliceSample],
    filter: &PseudoLabelFilter,
) -> Result<PseudoLabeledSet> {
    filter.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::Invalid("unlabeled pool is empty".into()));
    }
    if let Some(s) = unlabeled.iter().find(|s| s.mask.is_some()) {
        return Err(Error::Invalid(format!("pool sample {} already has a mask", s.id())));
    }
    let classes = net.num_classes();
    let direct = predict(net, unlabeled)?;
    let flipped_inputs: Vec<SliceSample> = unlabeled
        .iter()
        .map(|s| SliceSample {
            image: hflip_image(&s.image),
            hidden_mask: None,
            ..s.clone()
        })
        .collect();
    let flipped = predict(net, &flipped_inputs)?;
    let (lo, hi) = filter.foreground_fraction_bounds;
    let mut out = PseudoLabeledSet {
        accepted: Vec::new(),
        rejected: Vec::new(),
        records: Vec::with_capacity(unlabeled.len()),
    };
    for (i, sample) in unlabeled.iter().enumerate() {
        let mask = &direct.masks[i];
        let unflipped = crate::augment::hflip_mask(&flipped.masks[i]);
        let conf = confidence(mask, direct.probabilities[i].data(), classes);
        let flip_dice = average_dice(mask, &unflipped, classes)?;
        let fraction = mask.foreground_fraction();
        let mut reasons = Vec::new();
        if conf < filter.min_confidence {
            reasons.push(RejectionReason::LowConfidence);
        }
        if flip_dice < filter.flip_consistency_min_dice {
            reasons.push(RejectionReason::FlipInconsistent);
        }
        if fraction < lo || fraction > hi {
            reasons.push(RejectionReason::ForegroundFraction);
        }
        if filter.require_all_classes && !(1..classes as u8).all(|c| mask.contains(c)) {
            reasons.push(RejectionReason::MissingClasses);
        }
        out.records.push(PseudoLabelRecord {
            id: sample.id(),
            confidence: conf,
            flip_dice,
            foreground_fraction: fraction,
            reasons: reasons.clone(),
            hidden_dice: None,
        });
        if reasons.is_empty() {
            out.accepted.push(SliceSample {
                mask: Some(mask.clone()),
                pseudo: true,
                ..sample.clone()
            });
        } else {
            out.rejected.push((sample.id(), reasons));
        }
    }
    Ok(out)
}

/// Labeled samples followed by accepted pseudo-labeled ones.
pub fn merge_datasets(labeled: &[SliceSample], pseudo: &PseudoLabeledSet) -> Result<Vec<SliceSample>> {
    let mut seen = BTreeSet::new();
    for s in labeled.iter().chain(&pseudo.accepted) {
        if !seen.insert(s.id()) {
            return Err(Error::Invalid(format!("sample {} appears twice in the merge", s.id())));
        }
    }
    Ok(labeled.iter().chain(&pseudo.accepted).cloned().collect())
}
