//! Label masks and dice overlap scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const LV: u8 = 1;
pub const MYO: u8 = 2;
pub const RV: u8 = 3;
pub const NUM_CLASSES: usize = 4;

/// Display name of a label class.
pub fn class_name(class: u8) -> String {
    match class {
        BACKGROUND => "BG".into(),
        LV => "LV".into(),
        MYO => "MYO".into(),
        RV => "RV".into(),
        k => format!("class{k}"),
    }
}

/// An `H×W` integer segmentation mask (0 background, 1 LV, 2 MYO, 3 RV).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} labels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LabelMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    /// Rejects any label outside `0..num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize >= num_classes) {
            Some(i) => Err(Error::LabelOutOfRange {
                label: self.data[i],
                classes: num_classes,
                sample: 0,
                row: i / self.width,
                col: i % self.width,
            }),
            None => Ok(()),
        }
    }

    pub fn contains(&self, class: u8) -> bool {
        self.data.contains(&class)
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// Fraction of non-background pixels.
    pub fn foreground_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().filter(|&&v| v != BACKGROUND).count() as f64 / self.data.len() as f64
    }
}

fn overlap(a: &LabelMask, b: &LabelMask, class: u8) -> Result<(usize, usize, usize)> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "dice: masks {}x{} and {}x{} differ",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut na, mut nb) = (0, 0, 0);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (ia, ib) = (x == class, y == class);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    Ok((inter, na, nb))
}

fn dice_from_counts(inter: usize, na: usize, nb: usize) -> f64 {
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// `2|A∩B| / (|A|+|B|)` for the pixel sets labelled `class`; 1.0 when both
/// sets are empty.
pub fn dice_coefficient(a: &LabelMask, b: &LabelMask, class: u8) -> Result<f64> {
    let (i, na, nb) = overlap(a, b, class)?;
    Ok(dice_from_counts(i, na, nb))
}

/// How per-sample scores are combined into a set-level score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceAggregation {
    /// Mean of per-slice dice over slices whose truth contains the class.
    #[default]
    PerSlice,
    /// Intersections and set sizes summed over the whole set first.
    Pooled,
}

/// Per-class and average dice for a set of predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// Foreground classes present in at least one ground-truth mask.
    pub per_class: BTreeMap<u8, f64>,
    /// Mean of `per_class`.
    pub average: f64,
    pub samples: usize,
}

impl DiceReport {
    pub fn class(&self, class: u8) -> Option<f64> {
        self.per_class.get(&class).copied()
    }

    /// CSV rows `scenario,split,class,dice`, with the average last.
    pub fn csv_rows(&self, scenario: &str, split: &str) -> String {
        let mut out = String::new();
        for (&k, &d) in &self.per_class {
            let _ = writeln!(out, "{scenario},{split},{},{d:.6}", class_name(k));
        }
        let _ = writeln!(out, "{scenario},{split},avg,{:.6}", self.average);
        out
    }
}

pub fn evaluate_set(
    predictions: &[LabelMask],
    truths: &[LabelMask],
    num_classes: usize,
) -> Result<DiceReport> {
    evaluate_set_with(predictions, truths, num_classes, DiceAggregation::PerSlice)
}

pub fn evaluate_set_with(
    predictions: &[LabelMask],
    truths: &[LabelMask],
    num_classes: usize,
    mode: DiceAggregation,
) -> Result<DiceReport> {
    if predictions.is_empty() {
        return Err(Error::Invalid("evaluate_set: no samples".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::Invalid(format!(
            "evaluate_set: {} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut per_class = BTreeMap::new();
    let mut fallback = Vec::new();
    for class in 1..num_classes as u8 {
        let mut scores = Vec::new();
        let (mut si, mut sa, mut sb) = (0, 0, 0);
        let mut all = 0.0;
        for (p, t) in predictions.iter().zip(truths) {
            let (i, nt, np) = overlap(t, p, class)?;
            all += dice_from_counts(i, nt, np);
            if nt > 0 {
                scores.push(dice_from_counts(i, nt, np));
            }
            si += i;
            sa += nt;
            sb += np;
        }
        fallback.push(all / predictions.len() as f64);
        if scores.is_empty() {
            continue;
        }
        let d = match mode {
            DiceAggregation::PerSlice => scores.iter().sum::<f64>() / scores.len() as f64,
            DiceAggregation::Pooled => dice_from_counts(si, sa, sb),
        };
        per_class.insert(class, d);
    }
    let average = if per_class.is_empty() {
        fallback.iter().sum::<f64>() / fallback.len().max(1) as f64
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(DiceReport {
        per_class,
        average,
        samples: predictions.len(),
    })
}

/// Per-slice reports averaged within each patient, then across patients.
pub fn evaluate_per_patient(
    predictions: &[LabelMask],
    truths: &[LabelMask],
    patient_ids: &[String],
    num_classes: usize,
) -> Result<DiceReport> {
    if patient_ids.len() != predictions.len() {
        return Err(Error::Invalid("one patient id per prediction required".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, id) in patient_ids.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    let mut sums: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
    for idx in groups.values() {
        let p: Vec<_> = idx.iter().map(|&i| predictions[i].clone()).collect();
        let t: Vec<_> = idx.iter().map(|&i| truths[i].clone()).collect();
        let r = evaluate_set(&p, &t, num_classes)?;
        for (k, d) in r.per_class {
            let e = sums.entry(k).or_insert((0.0, 0));
            e.0 += d;
            e.1 += 1;
        }
    }
    let per_class: BTreeMap<u8, f64> = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    let average = if per_class.is_empty() {
        evaluate_set(predictions, truths, num_classes)?.average
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(DiceReport {
        per_class,
        average,
        samples: predictions.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&[u8]]) -> LabelMask {
        let w = rows[0].len();
        LabelMask::new(rows.len(), w, rows.concat()).unwrap()
    }

    #[test]
    fn hand_values() {
        let a = mask(&[&[1, 1, 0], &[0, 0, 0]]);
        let b = mask(&[&[0, 1, 1], &[0, 0, 0]]);
        assert_eq!(dice_coefficient(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dice_coefficient(&a, &a, 1).unwrap(), 1.0);
        let c = mask(&[&[0, 0, 0], &[1, 1, 1]]);
        assert_eq!(dice_coefficient(&a, &c, 1).unwrap(), 0.0);
        assert_eq!(dice_coefficient(&a, &c, 3).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = LabelMask::zeros(2, 2);
        let b = LabelMask::zeros(2, 3);
        assert!(dice_coefficient(&a, &b, 1).is_err());
    }

    #[test]
    fn presence_rule_and_identity() {
        let t = mask(&[&[1, 3], &[0, 3]]);
        let r = evaluate_set(std::slice::from_ref(&t), std::slice::from_ref(&t), NUM_CLASSES).unwrap();
        assert_eq!(r.per_class.keys().copied().collect::<Vec<_>>(), vec![1, 3]);
        assert!(r.class(MYO).is_none());
        assert_eq!(r.average, 1.0);
    }

    #[test]
    fn empty_and_mismatched_sets_rejected() {
        assert!(evaluate_set(&[], &[], 4).is_err());
        let t = LabelMask::zeros(2, 2);
        assert!(evaluate_set(std::slice::from_ref(&t), &[t.clone(), t.clone()], 4).is_err());
    }

    #[test]
    fn pooled_differs_from_per_slice() {
        let t1 = mask(&[&[1, 1, 1, 1]]);
        let p1 = mask(&[&[1, 1, 1, 1]]);
        let t2 = mask(&[&[1, 0, 0, 0]]);
        let p2 = mask(&[&[0, 0, 0, 0]]);
        let ps = evaluate_set(&[p1.clone(), p2.clone()], &[t1.clone(), t2.clone()], 2).unwrap();
        let pooled =
            evaluate_set_with(&[p1, p2], &[t1, t2], 2, DiceAggregation::Pooled).unwrap();
        assert_eq!(ps.average, 0.5);
        assert!((pooled.average - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn per_patient_averages_patients_equally() {
        let good = mask(&[&[1, 1]]);
        let bad = mask(&[&[0, 0]]);
        let preds = vec![good.clone(), good.clone(), bad];
        let truths = vec![good.clone(), good.clone(), good];
        let ids: Vec<String> = ["a", "a", "b"].iter().map(|s| s.to_string()).collect();
        let r = evaluate_per_patient(&preds, &truths, &ids, 2).unwrap();
        assert_eq!(r.class(LV), Some(0.5));
    }

    #[test]
    fn out_of_range_label_reports_position() {
        let m = mask(&[&[0, 1], &[7, 0]]);
        match m.validate(4) {
            Err(Error::LabelOutOfRange { row, col, .. }) => assert_eq!((row, col), (1, 0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_rows_end_with_average() {
        let t = mask(&[&[1, 2]]);
        let r = evaluate_set(std::slice::from_ref(&t), std::slice::from_ref(&t), 4).unwrap();
        let csv = r.csv_rows("FS", "val");
        assert_eq!(csv.lines().last().unwrap(), "FS,val,avg,1.000000");
        assert!(csv.starts_with("FS,val,LV,1.000000\n"));
    }
}
