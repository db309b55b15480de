//! Segmentation training losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[serde(alias = "ce")]
    CrossEntropy,
    Dice,
    #[default]
    SumOfBoth,
}

impl LossKind {
    /// Column label used in metric streams.
    pub fn column(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce_loss",
            LossKind::Dice => "dice_loss",
            LossKind::SumOfBoth => "ce_dice_loss",
        }
    }
}

/// `[B,C,H,W]` one-hot encoding of a batch of masks.
pub fn one_hot(masks: &[&LabelMask], num_classes: usize) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Invalid("one_hot: empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let plane = h * w;
    let mut data = vec![0.0; masks.len() * num_classes * plane];
    for (b, m) in masks.iter().enumerate() {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Shape("one_hot: masks differ in size".into()));
        }
        for (p, &label) in m.data().iter().enumerate() {
            if label as usize >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: num_classes,
                    sample: b,
                    row: p / w,
                    col: p % w,
                });
            }
            data[(b * num_classes + label as usize) * plane + p] = 1.0;
        }
    }
    Tensor::new(vec![masks.len(), num_classes, h, w], data)
}

/// Mean per-pixel cross-entropy of logits against integer masks.
pub fn categorical_cross_entropy(tape: &mut Tape, logits: Var, targets: &[&LabelMask]) -> Result<Var> {
    let flat: Vec<u8> = targets.iter().flat_map(|m| m.data().iter().copied()).collect();
    tape.cross_entropy(logits, &flat)
}

/// Soft dice loss over foreground classes of softmax probabilities.
pub fn soft_dice_loss(tape: &mut Tape, probs: Var, target_one_hot: &Tensor) -> Result<Var> {
    tape.soft_dice(probs, target_one_hot)
}

/// The configured training objective on raw logits.
pub fn training_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[&LabelMask],
    kind: LossKind,
) -> Result<Var> {
    let classes = tape.value(logits).dims4()?.1;
    let dice = |tape: &mut Tape| -> Result<Var> {
        let probs = tape.softmax_channels(logits)?;
        let target = one_hot(targets, classes)?;
        soft_dice_loss(tape, probs, &target)
    };
    match kind {
        LossKind::CrossEntropy => categorical_cross_entropy(tape, logits, targets),
        LossKind::Dice => dice(tape),
        LossKind::SumOfBoth => {
            let ce = categorical_cross_entropy(tape, logits, targets)?;
            let d = dice(tape)?;
            tape.add(ce, d)
        }
    }
}
