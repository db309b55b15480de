//! Volumes, 2D slice samples, and their preprocessing.

mod manifest;
mod preprocess;
mod split;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelMask;

pub use manifest::{load_manifest, write_manifest, LoadMode, LoadedManifest, MANIFEST_FILE};
pub use preprocess::{
    center_crop, center_crop_mask, extract_ed_es_slices, normalize_intensity, percentile,
    preprocess_record, PreprocessConfig,
};
pub use split::{patient_aware_split, SplitAssignment, DEFAULT_SPLIT_RATIOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Vendor {
    A,
    B,
    C,
}

impl fmt::Display for Vendor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Vendor::A => "A",
            Vendor::B => "B",
            Vendor::C => "C",
        })
    }
}

impl FromStr for Vendor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Vendor::A),
            "B" | "b" => Ok(Vendor::B),
            "C" | "c" => Ok(Vendor::C),
            other => Err(Error::Invalid(format!("unknown vendor `{other}`"))),
        }
    }
}

/// Cardiac phase of an annotated frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    ED,
    ES,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::ED => "ED",
            Phase::ES => "ES",
        })
    }
}

/// A single-channel `H×W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Applies `f` to every pixel.
    pub fn map_values(mut self, f: impl Fn(f64) -> f64) -> Self {
        self.data.iter_mut().for_each(|v| *v = f(*v));
        self
    }
}

/// Counts reads of hidden audit masks.
#[derive(Clone, Debug, Default)]
pub struct AuditCounter(Arc<AtomicUsize>);

impl AuditCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reads(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }
}

/// Ground truth that exists but must not be used for training: the
/// vendor-C masks of a phantom cohort. Every [`HiddenLabels::reveal`] is
/// counted.
#[derive(Clone, Debug)]
pub struct HiddenLabels {
    labels: Arc<Vec<u8>>,
    counter: AuditCounter,
}

impl HiddenLabels {
    pub fn new(labels: Vec<u8>, counter: &AuditCounter) -> Self {
        HiddenLabels {
            labels: Arc::new(labels),
            counter: counter.clone(),
        }
    }

    pub fn reveal(&self) -> &[u8] {
        self.counter.0.fetch_add(1, Ordering::SeqCst);
        &self.labels
    }

    /// The same labels counted against a different counter.
    pub fn recount(&self, counter: &AuditCounter) -> Self {
        HiddenLabels {
            labels: Arc::clone(&self.labels),
            counter: counter.clone(),
        }
    }
}

/// Hidden mask of a single slice.
#[derive(Clone, Debug)]
pub struct HiddenMask {
    mask: Arc<LabelMask>,
    counter: AuditCounter,
}

impl HiddenMask {
    pub fn new(mask: LabelMask, counter: &AuditCounter) -> Self {
        HiddenMask {
            mask: Arc::new(mask),
            counter: counter.clone(),
        }
    }

    pub fn reveal(&self) -> &LabelMask {
        self.counter.0.fetch_add(1, Ordering::SeqCst);
        &self.mask
    }

    pub fn recount(&self, counter: &AuditCounter) -> Self {
        HiddenMask {
            mask: Arc::clone(&self.mask),
            counter: counter.clone(),
        }
    }
}

/// One patient's 4D cine volume `[T,Z,H,W]`.
#[derive(Clone, Debug)]
pub struct VolumeRecord {
    pub patient_id: String,
    pub vendor: Vendor,
    /// `[T, Z, H, W]`.
    pub dims: [usize; 4],
    /// Row-major voxel intensities.
    pub voxels: Vec<f32>,
    /// Pixel spacing in mm (informational only).
    pub spacing: (f64, f64),
    pub ed_frame: usize,
    pub es_frame: usize,
    /// Labels in `[T,Z,H,W]` order, meaningful at the ED/ES frames.
    pub labels: Option<Vec<u8>>,
    pub hidden_labels: Option<HiddenLabels>,
}

impl VolumeRecord {
    pub fn validate(&self) -> Result<()> {
        let [t, z, h, w] = self.dims;
        let n = t * z * h * w;
        let bad = |reason: String| Error::Manifest {
            entry: self.patient_id.clone(),
            reason,
        };
        if n == 0 {
            return Err(bad("all dimensions must be positive".into()));
        }
        if self.voxels.len() != n {
            return Err(bad(format!(
                "{} voxels for dims {:?}",
                self.voxels.len(),
                self.dims
            )));
        }
        if self.ed_frame >= t || self.es_frame >= t || self.ed_frame == self.es_frame {
            return Err(bad(format!(
                "ED/ES frames ({}, {}) invalid for {t} frames",
                self.ed_frame, self.es_frame
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(bad(format!("{} labels for dims {:?}", l.len(), self.dims)));
            }
            if let Some(v) = l.iter().find(|&&v| v > 3) {
                return Err(bad(format!("label value {v} outside 0..=3")));
            }
        }
        Ok(())
    }

    /// Number of annotated 2D slices (ED and ES for each z).
    pub fn slice_count(&self) -> usize {
        2 * self.dims[1]
    }

    pub fn frame_offset(&self, t: usize, z: usize) -> usize {
        let [_, zn, h, w] = self.dims;
        (t * zn + z) * h * w
    }
}

/// One 2D slice ready for training or inference.
#[derive(Clone, Debug)]
pub struct SliceSample {
    pub patient_id: String,
    pub vendor: Vendor,
    pub phase: Phase,
    pub z_index: usize,
    pub image: Image,
    pub mask: Option<LabelMask>,
    pub hidden_mask: Option<HiddenMask>,
    /// True when `mask` came from a model prediction.
    pub pseudo: bool,
}

/// Identity of a slice within a cohort.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleId {
    pub patient_id: String,
    pub phase: Phase,
    pub z_index: usize,
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/z{}", self.patient_id, self.phase, self.z_index)
    }
}

impl SliceSample {
    pub fn id(&self) -> SampleId {
        SampleId {
            patient_id: self.patient_id.clone(),
            phase: self.phase,
            z_index: self.z_index,
        }
    }

    pub fn is_pseudo_labeled(&self) -> bool {
        self.pseudo
    }
}
