//! Brute-force reference implementations used to cross-check the library.

use std::collections::{BTreeMap, HashSet};

use cardioseg::data::Image;
use cardioseg::seed;
use cardioseg::LabelMask;
use rand::Rng as _;

fn pixel_set(mask: &LabelMask, class: u8) -> HashSet<(usize, usize)> {
    let mut set = HashSet::new();
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) == class {
                set.insert((r, c));
            }
        }
    }
    set
}

/// Dice by explicit set intersection; 1.0 when both sets are empty.
pub fn dice_by_sets(a: &LabelMask, b: &LabelMask, class: u8) -> f64 {
    let (sa, sb) = (pixel_set(a, class), pixel_set(b, class));
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

/// Per-class mean over slices whose truth contains the class, and the mean
/// of those per-class scores.
pub fn set_report_by_sets(
    predictions: &[LabelMask],
    truths: &[LabelMask],
    num_classes: u8,
) -> (BTreeMap<u8, f64>, f64) {
    let mut per_class = BTreeMap::new();
    for class in 1..num_classes {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (p, t) in predictions.iter().zip(truths) {
            if !pixel_set(t, class).is_empty() {
                sum += dice_by_sets(t, p, class);
                n += 1;
            }
        }
        if n > 0 {
            per_class.insert(class, sum / n as f64);
        }
    }
    let avg = per_class.values().sum::<f64>() / per_class.len() as f64;
    (per_class, avg)
}

pub fn random_mask(rng: &mut seed::Rng, h: usize, w: usize, classes: u8) -> LabelMask {
    LabelMask::new(h, w, (0..h * w).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

/// Continuous random images from a few differently shaped distributions.
pub fn random_image(rng: &mut seed::Rng, n: usize) -> Image {
    let kind = rng.random_range(0..4);
    let data = (0..n * n)
        .map(|_| {
            let u: f64 = rng.random();
            match kind {
                0 => u,
                1 => u * u * u,
                2 => u.sqrt() * 0.6 + 0.2,
                _ => {
                    if rng.random_bool(0.7) {
                        0.1 + 0.2 * u
                    } else {
                        0.6 + 0.35 * u
                    }
                }
            }
        })
        .collect();
    Image::new(n, n, data).unwrap()
}

/// Bin counts of `[0,1]` values, 1.0 landing in the last bin.
pub fn bin_counts(values: &[f64], bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for &v in values {
        let k = ((v * bins as f64).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
}

/// The reference CDF: linear within each bin, reaching the cumulative
/// fraction at each bin's upper edge.
pub fn piecewise_cdf(counts: &[u64], t: f64) -> f64 {
    let total: u64 = counts.iter().sum();
    let bins = counts.len() as f64;
    let x = (t.clamp(0.0, 1.0) * bins).min(bins);
    let k = (x.floor() as usize).min(counts.len() - 1);
    let below: u64 = counts[..k].iter().sum();
    (below as f64 + counts[k] as f64 * (x - k as f64)) / total as f64
}

/// Sup distance between the empirical CDF of `values` and `cdf`,
/// evaluated on both sides of every jump.
pub fn ks_brute_force(values: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut worst: f64 = 0.0;
    for &v in &sorted {
        let below = sorted.partition_point(|&x| x < v) as f64 / n;
        let at_or_below = sorted.partition_point(|&x| x <= v) as f64 / n;
        let f = cdf(v);
        worst = worst.max((f - below).abs()).max((f - at_or_below).abs());
    }
    worst
}
