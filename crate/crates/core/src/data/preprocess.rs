use serde::{Deserialize, Serialize};

use super::{HiddenMask, Image, Phase, SliceSample, VolumeRecord};
use crate::error::{Error, Result};
use crate::metrics::LabelMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub crop_height: usize,
    pub crop_width: usize,
    pub normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            crop_height: 64,
            crop_width: 64,
            normalize: true,
        }
    }
}

impl PreprocessConfig {
    /// 224x224 crops.
    pub fn full_scale() -> Self {
        PreprocessConfig {
            crop_height: 224,
            crop_width: 224,
            normalize: true,
        }
    }
}

/// The ED and ES slices of every z-index, ED first, each in z order.
/// Images carry raw voxel values; masks are attached where labels exist.
pub fn extract_ed_es_slices(rec: &VolumeRecord) -> Result<Vec<SliceSample>> {
    rec.validate()?;
    let [_, z_count, h, w] = rec.dims;
    let mut out = Vec::with_capacity(2 * z_count);
    for (phase, frame) in [(Phase::ED, rec.ed_frame), (Phase::ES, rec.es_frame)] {
        for z in 0..z_count {
            let off = rec.frame_offset(frame, z);
            let pixels = rec.voxels[off..off + h * w].iter().map(|&v| v as f64).collect();
            let mask = rec
                .labels
                .as_ref()
                .map(|l| LabelMask::new(h, w, l[off..off + h * w].to_vec()))
                .transpose()?;
            // Hidden masks are sliced without counting a read: nothing is
            // revealed until a consumer calls `reveal`.
            let hidden_mask = rec.hidden_labels.as_ref().map(|hl| {
                let all = &hl.labels;
                HiddenMask::new(
                    LabelMask::new(h, w, all[off..off + h * w].to_vec()).expect("sized"),
                    &hl.counter,
                )
            });
            out.push(SliceSample {
                patient_id: rec.patient_id.clone(),
                vendor: rec.vendor,
                phase,
                z_index: z,
                image: Image::new(h, w, pixels)?,
                mask,
                hidden_mask,
                pseudo: false,
            });
        }
    }
    Ok(out)
}

fn crop_plane<T: Copy>(
    data: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    fill: T,
) -> Vec<T> {
    // Window origin in source coordinates; negative when padding is needed.
    let origin = |size: usize, out: usize| -> isize {
        if size >= out {
            (size / 2 - out / 2) as isize
        } else {
            -(((out - size) / 2) as isize)
        }
    };
    let (top, left) = (origin(h, out_h), origin(w, out_w));
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h as isize {
        let sr = top + r;
        for c in 0..out_w as isize {
            let sc = left + c;
            let inside = sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w;
            out.push(if inside {
                data[sr as usize * w + sc as usize]
            } else {
                fill
            });
        }
    }
    out
}

/// Crops an `out_h×out_w` window centred on `(H/2, W/2)`, zero-padding
/// first (extra pixel bottom/right) when the image is smaller.
pub fn center_crop(image: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("crop size", "must be positive"));
    }
    let data = crop_plane(image.data(), image.height(), image.width(), out_h, out_w, 0.0);
    Image::new(out_h, out_w, data)
}

/// [`center_crop`] for label masks (padding is background).
pub fn center_crop_mask(mask: &LabelMask, out_h: usize, out_w: usize) -> Result<LabelMask> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("crop size", "must be positive"));
    }
    let data = crop_plane(mask.data(), mask.height(), mask.width(), out_h, out_w, 0u8);
    LabelMask::new(out_h, out_w, data)
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, q)
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-image robust min-max: clamp to the 1st/99th percentiles, then scale
/// to `[0, 1]`. A constant image maps to zeros.
pub fn normalize_intensity(image: &Image) -> Image {
    let mut sorted = image.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, 1.0);
    let hi = percentile_sorted(&sorted, 99.0);
    let span = hi - lo;
    let data = image
        .data()
        .iter()
        .map(|&v| {
            if span <= f64::EPSILON * hi.abs().max(1.0) {
                0.0
            } else {
                ((v.clamp(lo, hi) - lo) / span).clamp(0.0, 1.0)
            }
        })
        .collect();
    Image::new(image.height(), image.width(), data).expect("same size")
}

/// Slices, crops and normalises one record.
pub fn preprocess_record(rec: &VolumeRecord, cfg: &PreprocessConfig) -> Result<Vec<SliceSample>> {
    let (ch, cw) = (cfg.crop_height, cfg.crop_width);
    extract_ed_es_slices(rec)?
        .into_iter()
        .map(|mut s| {
            let cropped = center_crop(&s.image, ch, cw)?;
            s.image = if cfg.normalize {
                normalize_intensity(&cropped)
            } else {
                cropped
            };
            s.mask = s.mask.map(|m| center_crop_mask(&m, ch, cw)).transpose()?;
            if let Some(hm) = &s.hidden_mask {
                let counter = hm.counter.clone();
                let m = center_crop_mask(&hm.mask, ch, cw)?;
                s.hidden_mask = Some(HiddenMask::new(m, &counter));
            }
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AuditCounter, HiddenLabels, Vendor};

    fn record(z: usize, labeled: bool) -> VolumeRecord {
        let dims = [3, z, 4, 4];
        let n: usize = dims.iter().product();
        VolumeRecord {
            patient_id: "p".into(),
            vendor: Vendor::A,
            dims,
            voxels: (0..n).map(|i| i as f32).collect(),
            spacing: (1.0, 1.0),
            ed_frame: 0,
            es_frame: 2,
            labels: labeled.then(|| (0..n).map(|i| (i % 4) as u8).collect()),
            hidden_labels: None,
        }
    }

    #[test]
    fn extracts_two_slices_per_z() {
        let rec = record(5, true);
        let s = extract_ed_es_slices(&rec).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|x| x.mask.is_some()));
        let ed3 = s.iter().find(|x| x.phase == Phase::ED && x.z_index == 3).unwrap();
        let off = rec.frame_offset(rec.ed_frame, 3);
        let want: Vec<f64> = rec.voxels[off..off + 16].iter().map(|&v| v as f64).collect();
        assert_eq!(ed3.image.data(), &want[..]);
        let es1 = s.iter().find(|x| x.phase == Phase::ES && x.z_index == 1).unwrap();
        assert_eq!(es1.image.get(0, 0), rec.voxels[rec.frame_offset(2, 1)] as f64);
    }

    #[test]
    fn unlabeled_record_has_no_masks() {
        let s = extract_ed_es_slices(&record(2, false)).unwrap();
        assert!(s.iter().all(|x| x.mask.is_none()));
    }

    #[test]
    fn hidden_labels_are_not_read_by_preprocessing() {
        let counter = AuditCounter::new();
        let mut rec = record(2, false);
        let n = rec.voxels.len();
        rec.hidden_labels = Some(HiddenLabels::new(vec![1; n], &counter));
        let s = preprocess_record(
            &rec,
            &PreprocessConfig {
                crop_height: 4,
                crop_width: 4,
                normalize: true,
            },
        )
        .unwrap();
        assert_eq!(counter.reads(), 0);
        assert_eq!(s[0].hidden_mask.as_ref().unwrap().reveal().count(1), 16);
        assert_eq!(counter.reads(), 1);
    }

    #[test]
    fn crop_keeps_center_window() {
        let img = Image::new(10, 10, (0..100).map(f64::from).collect()).unwrap();
        let c = center_crop(&img, 4, 4).unwrap();
        for r in 0..4 {
            for col in 0..4 {
                assert_eq!(c.get(r, col), img.get(r + 3, col + 3));
            }
        }
        assert_eq!(center_crop(&img, 10, 10).unwrap(), img);
        assert!(center_crop(&img, 0, 4).is_err());
    }

    #[test]
    fn crop_pads_bottom_right_first() {
        let img = Image::new(3, 3, (1..=9).map(f64::from).collect()).unwrap();
        let c = center_crop(&img, 4, 4).unwrap();
        for r in 0..3 {
            for col in 0..3 {
                assert_eq!(c.get(r, col), img.get(r, col));
            }
            assert_eq!(c.get(r, 3), 0.0);
        }
        assert!((0..4).all(|col| c.get(3, col) == 0.0));
    }

    #[test]
    fn normalisation_edge_cases() {
        let constant = Image::filled(5, 5, 0.7);
        assert!(normalize_intensity(&constant).data().iter().all(|&v| v == 0.0));

        let ramp = Image::new(1, 101, (0..101).map(|i| i as f64 / 100.0).collect()).unwrap();
        let n = normalize_intensity(&ramp);
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[100], 1.0);
        assert!(n.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn outlier_is_clipped_against_sort_oracle() {
        let mut px: Vec<f64> = (0..400).map(|i| (i % 20) as f64 / 19.0).collect();
        px[17] = 1e6;
        let img = Image::new(20, 20, px.clone()).unwrap();
        let n = normalize_intensity(&img);
        // Oracle: rank-based percentile with linear interpolation.
        let mut s = px.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let at = |q: f64| {
            let pos = q * 399.0;
            let (l, h) = (pos.floor() as usize, pos.ceil() as usize);
            s[l] + (s[h] - s[l]) * (pos - l as f64)
        };
        let (lo, hi) = (at(0.01), at(0.99));
        assert_eq!(n.data()[17], 1.0);
        for (v, &raw) in n.data().iter().zip(&px) {
            let want = (raw.clamp(lo, hi) - lo) / (hi - lo);
            assert!((v - want).abs() < 1e-12);
        }
        let body_max = n.data().iter().enumerate().filter(|(i, _)| *i != 17).map(|(_, v)| *v).fold(0.0, f64::max);
        assert!(body_max > 0.9);
    }
}
