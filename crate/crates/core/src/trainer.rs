//! Mini-batch training, prediction and evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::augment::{apply_policy, AugmentationPolicy};
use crate::autodiff::softmax_data;
use crate::data::SliceSample;
use crate::error::{Error, Result};
use crate::loss::{training_loss, LossKind};
use crate::metrics::{class_name, evaluate_set, DiceReport, LabelMask};
use crate::nn::{NetworkInstance, Segmenter};
use crate::optim::Adam;
use crate::seed;
use crate::{Tape, Tensor};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
    /// Validation runs every `eval_every` epochs and after the last one.
    pub eval_every: usize,
    /// Restore the parameters with the best validation average dice.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 8,
            loss: LossKind::SumOfBoth,
            seed: 0,
            augmentation: AugmentationPolicy::default(),
            eval_every: 1,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        self.augmentation.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: Option<DiceReport>,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub net: NetworkInstance,
    pub history: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept, when validation ran.
    pub best_epoch: Option<usize>,
}

fn image_batch(samples: &[&SliceSample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (h, w) = (first.image.height(), first.image.width());
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.image.height(), s.image.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "sample {} is {}x{}, batch expects {h}x{w}",
                s.id(),
                s.image.height(),
                s.image.width()
            )));
        }
        if s.image.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("sample {} has non-finite pixels", s.id())));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::new(vec![samples.len(), 1, h, w], data)
}

fn require_mask(s: &SliceSample) -> Result<&LabelMask> {
    s.mask
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("sample {} has no mask", s.id())))
}

/// Trains `net` on `train_set`, validating on `val_set` when it is non-empty.
pub fn train(
    mut net: NetworkInstance,
    train_set: &[SliceSample],
    val_set: &[SliceSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let classes = net.config().num_classes;
    for s in train_set.iter().chain(val_set) {
        require_mask(s)?.validate(classes).map_err(|e| match e {
            Error::LabelOutOfRange { label, classes, row, col, .. } => Error::Invalid(format!(
                "sample {}: label {label} at ({row},{col}) exceeds {classes} classes",
                s.id()
            )),
            other => other,
        })?;
    }
    let adam = Adam::with_lr(config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, NetworkInstance)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut rng = seed::rng_for(config.seed, &[b"shuffle", &(epoch as u64).to_le_bytes()]);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let augmented = chunk
                .iter()
                .map(|&i| apply_policy(&train_set[i], &config.augmentation, epoch as u64))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&SliceSample> = augmented.iter().collect();
            let masks = refs.iter().map(|s| require_mask(s)).collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let x = tape.leaf(image_batch(&refs)?, false);
            let (logits, bindings) = net.forward(&mut tape, x)?;
            let loss = training_loss(&mut tape, logits, &masks, config.loss)?;
            let value = tape.value(loss).data()[0];
            let non_finite = || Error::NonFiniteLoss {
                epoch,
                batch: batch_index,
            };
            if !value.is_finite() {
                return Err(non_finite());
            }
            loss_sum += value * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            let finite = bindings
                .vars()
                .iter()
                .all(|&v| grads.get(v).is_none_or(|g| g.iter().all(|x| x.is_finite())));
            if !finite {
                return Err(non_finite());
            }
            net.accumulate_grads(&grads, &bindings)?;
            adam.step(net.params_mut())?;
        }
        let validate = !val_set.is_empty() && (epoch % config.eval_every == 0 || epoch == config.epochs);
        let val_dice = if validate { Some(evaluate(&net, val_set)?) } else { None };
        if let Some(report) = &val_dice {
            if best.as_ref().is_none_or(|(score, _, _)| report.average > *score) {
                best = Some((report.average, epoch, net.clone()));
            }
        }
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_dice,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    let best_epoch = best.as_ref().map(|(_, e, _)| *e);
    if config.keep_best {
        if let Some((_, _, kept)) = best {
            net = kept;
        }
    }
    Ok(TrainOutcome {
        net,
        history,
        best_epoch,
    })
}

/// Per-sample label masks and `[C,H,W]` probability maps.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub masks: Vec<LabelMask>,
    pub probabilities: Vec<Tensor>,
}

const PREDICT_BATCH: usize = 8;

/// Argmax over softmax probabilities; ties go to the lower class index.
pub fn predict<S: Segmenter + ?Sized>(net: &S, samples: &[SliceSample]) -> Result<Prediction> {
    let mut masks = Vec::with_capacity(samples.len());
    let mut probabilities = Vec::with_capacity(samples.len());
    let refs: Vec<&SliceSample> = samples.iter().collect();
    for chunk in refs.chunks(PREDICT_BATCH) {
        let logits = net.logits(&image_batch(chunk)?)?;
        let (b, c, h, w) = logits.dims4()?;
        let plane = h * w;
        let probs = softmax_data(logits.data(), b, c, plane);
        for bi in 0..b {
            let p = &probs[bi * c * plane..(bi + 1) * c * plane];
            let labels = (0..plane)
                .map(|i| {
                    let mut arg = 0;
                    for ch in 1..c {
                        if p[ch * plane + i] > p[arg * plane + i] {
                            arg = ch;
                        }
                    }
                    arg as u8
                })
                .collect();
            masks.push(LabelMask::new(h, w, labels)?);
            probabilities.push(Tensor::new(vec![c, h, w], p.to_vec())?);
        }
    }
    Ok(Prediction {
        masks,
        probabilities,
    })
}

/// Dice of predictions against the samples' masks.
pub fn evaluate<S: Segmenter + ?Sized>(net: &S, labeled_set: &[SliceSample]) -> Result<DiceReport> {
    let truths = labeled_set
        .iter()
        .map(|s| require_mask(s).cloned())
        .collect::<Result<Vec<_>>>()?;
    let pred = predict(net, labeled_set)?;
    evaluate_set(&pred.masks, &truths, net.num_classes())
}

/// `epoch,split,class,dice,<loss column>` rows; training rows carry the loss.
pub fn metrics_csv(history: &[EpochMetrics], loss: LossKind) -> String {
    let mut out = format!("epoch,split,class,dice,{}\n", loss.column());
    for m in history {
        let _ = writeln!(out, "{},train,all,,{:.6}", m.epoch, m.train_loss);
        if let Some(report) = &m.val_dice {
            for (&class, d) in &report.per_class {
                let _ = writeln!(out, "{},val,{},{:.6},", m.epoch, class_name(class), d);
            }
            let _ = writeln!(out, "{},val,avg,{:.6},", m.epoch, report.average);
        }
    }
    out
}

/// A short structured-text summary of a training run.
pub fn run_summary(config: &TrainConfig, outcome: &TrainOutcome) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "epochs = {}", config.epochs);
    let _ = writeln!(out, "batch_size = {}", config.batch_size);
    let _ = writeln!(out, "learning_rate = {}", config.learning_rate);
    let _ = writeln!(out, "loss = \"{}\"", config.loss.column());
    let _ = writeln!(out, "seed = {}", config.seed);
    if let Some(last) = outcome.history.last() {
        let _ = writeln!(out, "final_train_loss = {:.6}", last.train_loss);
    }
    if let Some(best) = outcome.best_epoch {
        let _ = writeln!(out, "best_epoch = {best}");
        if let Some(report) = outcome
            .history
            .iter()
            .find(|m| m.epoch == best)
            .and_then(|m| m.val_dice.as_ref())
        {
            let _ = writeln!(out, "best_val_dice = {:.6}", report.average);
        }
    }
    out
}
