use crate::data::Image;
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 256;

/// Uniform histogram over `[0, 1]` with its cumulative distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityHistogram {
    counts: Vec<u64>,
    cdf: Vec<f64>,
    total: u64,
}

impl IntensityHistogram {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if counts.is_empty() || total == 0 {
            return Err(Error::Invalid("histogram has no mass".into()));
        }
        let mut acc = 0u64;
        let mut cdf: Vec<f64> = counts
            .iter()
            .map(|&c| {
                acc += c;
                acc as f64 / total as f64
            })
            .collect();
        *cdf.last_mut().expect("non-empty") = 1.0;
        Ok(Self { counts, cdf, total })
    }

    /// Sums histograms with equal bin counts.
    pub fn pooled(histograms: &[IntensityHistogram]) -> Result<Self> {
        let first = histograms
            .first()
            .ok_or_else(|| Error::Invalid("cannot pool zero histograms".into()))?;
        let mut counts = vec![0u64; first.bin_count()];
        for h in histograms {
            if h.bin_count() != counts.len() {
                return Err(Error::Invalid("pooled histograms differ in bin count".into()));
            }
            counts.iter_mut().zip(&h.counts).for_each(|(a, b)| *a += b);
        }
        Self::from_counts(counts)
    }

    pub fn bin_count(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn bin_width(&self) -> f64 {
        1.0 / self.counts.len() as f64
    }

    /// Bin index of `v`; 1.0 lands in the last bin, out-of-range values clamp.
    pub fn bin_of(&self, v: f64) -> usize {
        bin_index(v, self.counts.len())
    }

    /// Piecewise-linear CDF through `(k/B, cdf[k-1])`.
    pub fn cdf_at(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= 1.0 {
            return 1.0;
        }
        let b = self.counts.len();
        let k = ((t * b as f64).floor() as usize).min(b - 1);
        let lo = if k == 0 { 0.0 } else { self.cdf[k - 1] };
        let frac = t * b as f64 - k as f64;
        lo + (self.cdf[k] - lo) * frac
    }

    /// Inverse of [`cdf_at`](Self::cdf_at). A reference whose mass sits in a
    /// single bin maps every level to that bin's centre.
    pub fn inverse_cdf(&self, u: f64) -> f64 {
        let b = self.counts.len() as f64;
        let occupied: Vec<usize> = self
            .counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(k, _)| k)
            .collect();
        if occupied.len() == 1 {
            return (occupied[0] as f64 + 0.5) / b;
        }
        let u = u.clamp(0.0, 1.0);
        if u <= 0.0 {
            return occupied[0] as f64 / b;
        }
        let k = self.cdf.partition_point(|&c| c < u).min(self.counts.len() - 1);
        let lo = if k == 0 { 0.0 } else { self.cdf[k - 1] };
        let mass = self.cdf[k] - lo;
        let frac = if mass > 0.0 { ((u - lo) / mass).clamp(0.0, 1.0) } else { 1.0 };
        ((k as f64 + frac) / b).clamp(0.0, 1.0)
    }
}

fn bin_index(v: f64, bins: usize) -> usize {
    if v.is_nan() || v <= 0.0 {
        return 0;
    }
    ((v * bins as f64).floor() as usize).min(bins - 1)
}

/// Histogram of every pixel.
pub fn compute_histogram(image: &Image, bin_count: usize) -> Result<IntensityHistogram> {
    histogram_of(image.data(), bin_count, false)
}

/// Histogram of `values`, optionally ignoring exact zeros.
pub fn histogram_of(values: &[f64], bin_count: usize, exclude_zeros: bool) -> Result<IntensityHistogram> {
    if bin_count == 0 {
        return Err(Error::config("bin_count", "must be at least 1"));
    }
    let mut counts = vec![0u64; bin_count];
    let mut any = false;
    for &v in values.iter().filter(|&&v| !(exclude_zeros && v == 0.0)) {
        counts[bin_index(v, bin_count)] += 1;
        any = true;
    }
    if !any {
        return Err(Error::Invalid("cannot build a histogram of an empty image".into()));
    }
    IntensityHistogram::from_counts(counts)
}

/// Matches `source` to `reference` through its exact empirical CDF.
pub fn histogram_match(source: &Image, reference: &IntensityHistogram) -> Result<Image> {
    histogram_match_with(source, reference, false)
}

/// As [`histogram_match`]; with `exclude_zeros`, zero pixels stay zero and do
/// not contribute to the source CDF.
pub fn histogram_match_with(
    source: &Image,
    reference: &IntensityHistogram,
    exclude_zeros: bool,
) -> Result<Image> {
    let data = source.data();
    let mut order: Vec<usize> = (0..data.len())
        .filter(|&i| !(exclude_zeros && data[i] == 0.0))
        .collect();
    if order.is_empty() {
        if data.is_empty() {
            return Err(Error::Invalid("cannot match an empty image".into()));
        }
        return Ok(source.clone());
    }
    order.sort_by(|&a, &b| data[a].total_cmp(&data[b]));
    let n = order.len() as f64;
    let mut out = data.to_vec();
    let mut start = 0;
    while start < order.len() {
        let value = data[order[start]];
        let mut end = start;
        while end < order.len() && data[order[end]] == value {
            end += 1;
        }
        let mapped = reference.inverse_cdf(end as f64 / n);
        for &i in &order[start..end] {
            out[i] = mapped;
        }
        start = end;
    }
    Image::new(source.height(), source.width(), out)
}

/// Kolmogorov–Smirnov distance between the empirical CDF of `image` and the
/// piecewise-linear CDF of `reference`.
pub fn ks_distance(image: &Image, reference: &IntensityHistogram) -> f64 {
    let mut values = image.data().to_vec();
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mut worst: f64 = 0.0;
    let mut i = 0;
    while i < values.len() {
        let mut j = i;
        while j < values.len() && values[j] == values[i] {
            j += 1;
        }
        let f = reference.cdf_at(values[i]);
        worst = worst.max((f - i as f64 / n).abs()).max((f - j as f64 / n).abs());
        i = j;
    }
    worst
}
