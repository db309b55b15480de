//! Synthetic cardiac-like cine cohorts with per-vendor intensity shift.
//!
//! Each slice holds a bright left-ventricle disk, a dark myocardial annulus
//! around it, and a right-ventricle crescent hugging the annulus. Vendors
//! differ by class means, gamma and noise level.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{AuditCounter, HiddenLabels, Vendor, VolumeRecord};
use crate::error::{Error, Result};
use crate::seed;
use crate::viz::{write_grid, Tile};

/// One value per vendor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerVendor<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T> PerVendor<T> {
    pub fn get(&self, vendor: Vendor) -> &T {
        match vendor {
            Vendor::A => &self.a,
            Vendor::B => &self.b,
            Vendor::C => &self.c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VendorProfile {
    /// Background, LV, MYO, RV.
    pub class_means: [f64; 4],
    pub noise_sigma: f64,
    pub gamma: f64,
}

impl VendorProfile {
    /// Class means after the gamma warp.
    pub fn warped_means(&self) -> [f64; 4] {
        self.class_means.map(|m| m.powf(self.gamma))
    }
}

/// Anatomy ranges in pixels for a 64-pixel image; scaled with image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnatomyJitter {
    pub center_offset: f64,
    pub lv_radius: (f64, f64),
    pub myo_thickness: (f64, f64),
    pub rv_radius: (f64, f64),
    pub rv_angle_degrees: (f64, f64),
}

impl Default for AnatomyJitter {
    fn default() -> Self {
        Self {
            center_offset: 4.0,
            lv_radius: (7.0, 10.0),
            myo_thickness: (3.0, 4.5),
            rv_radius: (9.0, 12.0),
            rv_angle_degrees: (150.0, 210.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub frames: usize,
    pub slices: usize,
    pub ed_frame: usize,
    pub es_frame: usize,
    pub patients_per_vendor: PerVendor<usize>,
    pub vendor_profiles: PerVendor<VendorProfile>,
    pub anatomy_jitter: AnatomyJitter,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            frames: 4,
            slices: 3,
            ed_frame: 0,
            es_frame: 2,
            patients_per_vendor: PerVendor { a: 10, b: 10, c: 5 },
            vendor_profiles: PerVendor {
                a: VendorProfile {
                    class_means: [0.08, 0.85, 0.35, 0.62],
                    noise_sigma: 0.04,
                    gamma: 1.0,
                },
                b: VendorProfile {
                    class_means: [0.10, 0.80, 0.32, 0.60],
                    noise_sigma: 0.05,
                    gamma: 1.2,
                },
                c: VendorProfile {
                    class_means: [0.05, 1.0, 0.7746, 0.922],
                    noise_sigma: 0.045,
                    gamma: 2.0,
                },
            },
            anatomy_jitter: AnatomyJitter::default(),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// 75/75/25 patients.
    pub fn full_scale() -> Self {
        Self {
            patients_per_vendor: PerVendor { a: 75, b: 75, c: 25 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::config("image_size", "must be at least 16"));
        }
        if self.frames < 2 || self.slices == 0 {
            return Err(Error::config("frames", "need at least 2 frames and 1 slice"));
        }
        if self.ed_frame >= self.frames || self.es_frame >= self.frames || self.ed_frame == self.es_frame {
            return Err(Error::config("es_frame", "ED and ES must be distinct valid frames"));
        }
        for vendor in [Vendor::A, Vendor::B, Vendor::C] {
            let p = self.vendor_profiles.get(vendor);
            if !(p.gamma > 0.0 && p.gamma.is_finite()) || p.noise_sigma.is_nan() || p.noise_sigma < 0.0 {
                return Err(Error::config(
                    "vendor_profiles",
                    format!("vendor {vendor}: gamma must be positive and noise non-negative"),
                ));
            }
            if p.class_means.iter().any(|m| !(0.0..=1.0).contains(m)) {
                return Err(Error::config(
                    "vendor_profiles",
                    format!("vendor {vendor}: class means must lie in [0, 1]"),
                ));
            }
            let w = p.warped_means();
            for i in 0..4 {
                for j in i + 1..4 {
                    if (w[i] - w[j]).abs() < 3.0 * p.noise_sigma {
                        return Err(Error::config(
                            "vendor_profiles",
                            format!(
                                "vendor {vendor}: classes {i} and {j} are closer than 3 noise sigmas"
                            ),
                        ));
                    }
                }
            }
        }
        let (a, b, c) = (
            &self.vendor_profiles.a,
            &self.vendor_profiles.b,
            &self.vendor_profiles.c,
        );
        let same = |x: &VendorProfile| x.class_means == c.class_means && x.gamma == c.gamma;
        if same(a) || same(b) {
            return Err(Error::config(
                "vendor_profiles",
                "vendor C must differ from A and B in means or gamma",
            ));
        }
        let j = &self.anatomy_jitter;
        for (name, (lo, hi)) in [
            ("lv_radius", j.lv_radius),
            ("myo_thickness", j.myo_thickness),
            ("rv_radius", j.rv_radius),
            ("rv_angle_degrees", j.rv_angle_degrees),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(name, "range must be finite and ordered"));
            }
        }
        if j.lv_radius.0 <= 0.0 || j.myo_thickness.0 <= 0.0 || j.rv_radius.0 <= 0.0 {
            return Err(Error::config("anatomy_jitter", "radii must be positive"));
        }
        if j.center_offset < 0.0 {
            return Err(Error::config("center_offset", "must be non-negative"));
        }
        Ok(())
    }
}

/// Labeled vendors expose masks; vendor C keeps them behind the audit counter.
pub fn is_labeled_vendor(vendor: Vendor) -> bool {
    vendor != Vendor::C
}

fn uniform(rng: &mut seed::Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn patient_id(vendor: Vendor, index: usize) -> String {
    format!("{vendor}{index:03}")
}

struct Anatomy {
    cy: f64,
    cx: f64,
    lv_r: f64,
    myo_t: f64,
    rv_r: f64,
    rv_angle: f64,
}

/// Contraction in `[0, 1]`: 0 at ED, 1 at ES.
fn contraction(cfg: &PhantomConfig, t: usize) -> f64 {
    let period = 2.0 * (cfg.es_frame as f64 - cfg.ed_frame as f64).abs();
    let phase = (t as f64 - cfg.ed_frame as f64) / period;
    (1.0 - (2.0 * PI * phase).cos()) / 2.0
}

fn label_at(a: &Anatomy, y: f64, x: f64) -> u8 {
    let d_lv = ((y - a.cy).powi(2) + (x - a.cx).powi(2)).sqrt();
    if d_lv <= a.lv_r {
        return 1;
    }
    let outer = a.lv_r + a.myo_t;
    if d_lv <= outer {
        return 2;
    }
    // The RV disk overlaps the annulus; only its part outside the annulus
    // remains, which leaves a crescent.
    let reach = outer + 0.4 * a.rv_r;
    let (ry, rx) = (
        a.cy + reach * a.rv_angle.sin(),
        a.cx + reach * a.rv_angle.cos(),
    );
    if ((y - ry).powi(2) + (x - rx).powi(2)).sqrt() <= a.rv_r {
        3
    } else {
        0
    }
}

/// Generates one deterministic patient volume.
pub fn generate_patient(
    cfg: &PhantomConfig,
    vendor: Vendor,
    index: usize,
    audit: &AuditCounter,
) -> Result<VolumeRecord> {
    cfg.validate()?;
    let id = patient_id(vendor, index);
    let mut rng = seed::rng_for(cfg.seed, &[b"phantom", id.as_bytes()]);
    let n = cfg.image_size;
    let scale = n as f64 / 64.0;
    let j = &cfg.anatomy_jitter;
    let off = j.center_offset;
    let cy0 = (n as f64 - 1.0) / 2.0 + uniform(&mut rng, (-off, off)) * scale;
    let cx0 = (n as f64 - 1.0) / 2.0 + uniform(&mut rng, (-off, off)) * scale;
    let lv0 = uniform(&mut rng, j.lv_radius) * scale;
    let myo0 = uniform(&mut rng, j.myo_thickness) * scale;
    let rv0 = uniform(&mut rng, j.rv_radius) * scale;
    let angle0 = uniform(&mut rng, j.rv_angle_degrees).to_radians();

    let profile = cfg.vendor_profiles.get(vendor);
    let means = profile.warped_means();
    let noise = Normal::new(0.0, profile.noise_sigma.max(0.0))
        .map_err(|e| Error::config("noise_sigma", e.to_string()))?;

    let (t_count, z_count) = (cfg.frames, cfg.slices);
    let plane = n * n;
    let mut voxels = Vec::with_capacity(t_count * z_count * plane);
    let mut labels = Vec::with_capacity(t_count * z_count * plane);
    for t in 0..t_count {
        let c = contraction(cfg, t);
        let wobble_y = uniform(&mut rng, (-0.5, 0.5)) * scale;
        let wobble_x = uniform(&mut rng, (-0.5, 0.5)) * scale;
        for z in 0..z_count {
            let taper = if z_count > 1 {
                1.0 - 0.28 * z as f64 / (z_count - 1) as f64
            } else {
                1.0
            };
            let anatomy = Anatomy {
                cy: cy0 + wobble_y,
                cx: cx0 + wobble_x,
                lv_r: lv0 * taper * (1.0 - 0.25 * c),
                myo_t: myo0 * (1.0 + 0.3 * c),
                rv_r: rv0 * taper * (1.0 - 0.15 * c),
                rv_angle: angle0,
            };
            for r in 0..n {
                for col in 0..n {
                    let label = label_at(&anatomy, r as f64, col as f64);
                    let mut v = means[label as usize];
                    if profile.noise_sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    voxels.push(v.clamp(0.0, 1.0) as f32);
                    labels.push(label);
                }
            }
        }
    }
    let (labels, hidden_labels) = if is_labeled_vendor(vendor) {
        (Some(labels), None)
    } else {
        (None, Some(HiddenLabels::new(labels, audit)))
    };
    let rec = VolumeRecord {
        patient_id: id,
        vendor,
        dims: [t_count, z_count, n, n],
        voxels,
        spacing: (1.25 / scale, 1.25 / scale),
        ed_frame: cfg.ed_frame,
        es_frame: cfg.es_frame,
        labels,
        hidden_labels,
    };
    rec.validate()?;
    Ok(rec)
}

/// A generated cohort: labeled A∪B records and unlabeled C records.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub labeled: Vec<VolumeRecord>,
    pub unlabeled: Vec<VolumeRecord>,
    pub audit: AuditCounter,
}

impl Cohort {
    pub fn records(&self) -> impl Iterator<Item = &VolumeRecord> {
        self.labeled.iter().chain(&self.unlabeled)
    }
}

pub fn generate_cohort(cfg: &PhantomConfig) -> Result<Cohort> {
    cfg.validate()?;
    let audit = AuditCounter::new();
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for vendor in [Vendor::A, Vendor::B, Vendor::C] {
        for i in 0..*cfg.patients_per_vendor.get(vendor) {
            let rec = generate_patient(cfg, vendor, i, &audit)?;
            if is_labeled_vendor(vendor) {
                labeled.push(rec);
            } else {
                unlabeled.push(rec);
            }
        }
    }
    Ok(Cohort {
        labeled,
        unlabeled,
        audit,
    })
}

/// Writes a grid of ED then ES slices with label overlays beneath.
/// Hidden labels are not drawn.
pub fn write_preview(rec: &VolumeRecord, path: &Path) -> Result<()> {
    let slices = crate::data::extract_ed_es_slices(rec)?;
    let mut tiles: Vec<Tile<'_>> = slices.iter().map(|s| Tile::Gray(&s.image)).collect();
    tiles.extend(slices.iter().filter_map(|s| s.mask.as_ref().map(Tile::Labels)));
    write_grid(&tiles, rec.dims[1], path)
}
