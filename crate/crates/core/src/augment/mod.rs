//! Seeded data augmentation: rotation, flipping, sharpening and histogram
//! matching.

mod geometry;
mod histogram;

use std::sync::Arc;

use rand::Rng as _;

pub use geometry::{
    binomial_blur, hflip, hflip_image, hflip_mask, rotate, rotate_image, rotate_mask, sharpen,
    sharpen_unclamped,
};
pub use histogram::{
    compute_histogram, histogram_match, histogram_match_with, histogram_of, ks_distance,
    IntensityHistogram, DEFAULT_BINS,
};

use crate::data::{Image, SliceSample, Vendor};
use crate::error::{Error, Result};
use crate::seed;

/// Reference histograms drawn from the unlabeled pool.
#[derive(Clone, Debug)]
pub struct ReferencePool {
    histograms: Vec<IntensityHistogram>,
    pooled: Option<IntensityHistogram>,
    exclude_zeros: bool,
    vendor: Option<Vendor>,
}

impl ReferencePool {
    /// One histogram per image; with `pooled`, matching targets their sum.
    pub fn from_images(
        images: &[&Image],
        bin_count: usize,
        exclude_zeros: bool,
        pooled: bool,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Invalid("histogram reference pool is empty".into()));
        }
        let histograms = images
            .iter()
            .map(|img| histogram_of(img.data(), bin_count, exclude_zeros))
            .collect::<Result<Vec<_>>>()?;
        let pooled = if pooled {
            Some(IntensityHistogram::pooled(&histograms)?)
        } else {
            None
        };
        Ok(Self {
            histograms,
            pooled,
            exclude_zeros,
            vendor: None,
        })
    }

    /// Marks the pool as drawn from `vendor`; samples of that vendor are
    /// left unmatched.
    pub fn with_vendor(mut self, vendor: Vendor) -> Self {
        self.vendor = Some(vendor);
        self
    }

    pub fn vendor(&self) -> Option<Vendor> {
        self.vendor
    }

    pub fn len(&self) -> usize {
        self.histograms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histograms.is_empty()
    }

    pub fn is_pooled(&self) -> bool {
        self.pooled.is_some()
    }

    pub fn exclude_zeros(&self) -> bool {
        self.exclude_zeros
    }

    /// The matching target for a draw index into the pool.
    pub fn reference(&self, index: usize) -> &IntensityHistogram {
        self.pooled
            .as_ref()
            .unwrap_or(&self.histograms[index % self.histograms.len()])
    }

    /// Matches `image` against the chosen reference.
    pub fn apply(&self, image: &Image, index: usize) -> Result<Image> {
        histogram_match_with(image, self.reference(index), self.exclude_zeros)
    }
}

/// Per-draw augmentation settings.
#[derive(Clone, Debug)]
pub struct AugmentationPolicy {
    /// Candidate rotation intervals in degrees; at most one is used per draw.
    pub rotation_ranges: Vec<(f64, f64)>,
    pub rotation_probability: f64,
    pub hflip_probability: f64,
    pub sharpen: bool,
    pub sharpen_probability: f64,
    pub histogram_match: Option<Arc<ReferencePool>>,
    pub histogram_match_probability: f64,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            rotation_ranges: vec![(-45.0, 45.0), (-90.0, 90.0)],
            rotation_probability: 0.5,
            hflip_probability: 0.5,
            sharpen: true,
            sharpen_probability: 0.5,
            histogram_match: None,
            histogram_match_probability: 0.5,
            seed: 0,
        }
    }
}

/// The random choices behind one augmented draw.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationDraw {
    pub reference: Option<usize>,
    pub rotation_degrees: Option<f64>,
    pub sharpen: bool,
    pub hflip: bool,
}

impl AugmentationPolicy {
    /// A policy that leaves every sample untouched.
    pub fn neutral(seed: u64) -> Self {
        Self {
            rotation_ranges: Vec::new(),
            rotation_probability: 0.0,
            hflip_probability: 0.0,
            sharpen: false,
            sharpen_probability: 0.0,
            histogram_match: None,
            histogram_match_probability: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, p) in [
            ("rotation_probability", self.rotation_probability),
            ("hflip_probability", self.hflip_probability),
            ("sharpen_probability", self.sharpen_probability),
            ("histogram_match_probability", self.histogram_match_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, format!("{p} is outside [0, 1]")));
            }
        }
        for &(lo, hi) in &self.rotation_ranges {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::config(
                    "rotation_ranges",
                    format!("[{lo}, {hi}] is not a finite ordered interval"),
                ));
            }
        }
        Ok(())
    }

    /// Draws the random choices for one sample. Every draw consumes the same
    /// number of variates so streams stay aligned across policy settings.
    pub fn draw(&self, sample: &SliceSample, draw_index: u64) -> AugmentationDraw {
        let mut rng = seed::rng_for(
            self.seed,
            &[
                b"augment",
                sample.patient_id.as_bytes(),
                sample.phase.to_string().as_bytes(),
                &(sample.z_index as u64).to_le_bytes(),
                &draw_index.to_le_bytes(),
            ],
        );
        let u_match: f64 = rng.random();
        let ref_pick: u64 = rng.random();
        let u_rot: f64 = rng.random();
        let range_pick: u64 = rng.random();
        let u_angle: f64 = rng.random();
        let u_sharpen: f64 = rng.random();
        let u_flip: f64 = rng.random();

        let reference = self.histogram_match.as_ref().and_then(|pool| {
            (u_match < self.histogram_match_probability
                && !pool.is_empty()
                && pool.vendor() != Some(sample.vendor))
                .then(|| (ref_pick % pool.len() as u64) as usize)
        });
        let rotation_degrees = (!self.rotation_ranges.is_empty()
            && u_rot < self.rotation_probability)
            .then(|| {
                let (lo, hi) =
                    self.rotation_ranges[(range_pick % self.rotation_ranges.len() as u64) as usize];
                lo + (hi - lo) * u_angle
            });
        AugmentationDraw {
            reference,
            rotation_degrees,
            sharpen: self.sharpen && u_sharpen < self.sharpen_probability,
            hflip: u_flip < self.hflip_probability,
        }
    }
}

/// Applies one seeded augmentation draw: histogram matching, then rotation,
/// sharpening and flipping. Geometry is shared by image and mask. The audit
/// mask is dropped because augmented copies are only used for training.
pub fn apply_policy(
    sample: &SliceSample,
    policy: &AugmentationPolicy,
    draw_index: u64,
) -> Result<SliceSample> {
    let draw = policy.draw(sample, draw_index);
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if let (Some(index), Some(pool)) = (draw.reference, &policy.histogram_match) {
        image = pool.apply(&image, index)?;
    }
    if let Some(angle) = draw.rotation_degrees {
        image = rotate_image(&image, angle);
        mask = mask.map(|m| rotate_mask(&m, angle));
    }
    if draw.sharpen {
        image = sharpen(&image);
    }
    if draw.hflip {
        image = hflip_image(&image);
        mask = mask.as_ref().map(hflip_mask);
    }
    Ok(SliceSample {
        patient_id: sample.patient_id.clone(),
        vendor: sample.vendor,
        phase: sample.phase,
        z_index: sample.z_index,
        image,
        mask,
        hidden_mask: None,
        pseudo: sample.pseudo,
    })
}
