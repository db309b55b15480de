use crate::data::Image;
use crate::metrics::LabelMask;

/// Source coordinate for output pixel `(r, c)` under a rotation by `angle`
/// degrees about the image centre.
fn source_coord(r: usize, c: usize, cy: f64, cx: f64, sin: f64, cos: f64) -> (f64, f64) {
    let dy = r as f64 - cy;
    let dx = c as f64 - cx;
    (cy + dy * cos - dx * sin, cx + dy * sin + dx * cos)
}

fn centre(height: usize, width: usize) -> (f64, f64) {
    ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0)
}

/// Bilinear rotation with zero fill outside the source image.
pub fn rotate_image(image: &Image, angle_degrees: f64) -> Image {
    if angle_degrees == 0.0 {
        return image.clone();
    }
    let (h, w) = (image.height(), image.width());
    let (cy, cx) = centre(h, w);
    let (sin, cos) = angle_degrees.to_radians().sin_cos();
    let src = image.data();
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = source_coord(r, c, cy, cx, sin, cos);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Image::new(h, w, out).expect("rotation preserves shape")
}

/// Nearest-neighbour rotation; pixels sampled from outside become background.
pub fn rotate_mask(mask: &LabelMask, angle_degrees: f64) -> LabelMask {
    if angle_degrees == 0.0 {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let (cy, cx) = centre(h, w);
    let (sin, cos) = angle_degrees.to_radians().sin_cos();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = source_coord(r, c, cy, cx, sin, cos);
            let (y, x) = (sy.round(), sx.round());
            let inside = y >= 0.0 && x >= 0.0 && y < h as f64 && x < w as f64;
            out.push(if inside { mask.get(y as usize, x as usize) } else { 0 });
        }
    }
    LabelMask::new(h, w, out).expect("rotation preserves shape")
}

/// Rotates an image and, if given, its mask by the same angle.
pub fn rotate(
    image: &Image,
    mask: Option<&LabelMask>,
    angle_degrees: f64,
) -> (Image, Option<LabelMask>) {
    (
        rotate_image(image, angle_degrees),
        mask.map(|m| rotate_mask(m, angle_degrees)),
    )
}

fn flip_rows<T: Copy>(data: &[T], width: usize) -> Vec<T> {
    if width == 0 {
        return Vec::new();
    }
    data.chunks_exact(width)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

pub fn hflip_image(image: &Image) -> Image {
    Image::new(image.height(), image.width(), flip_rows(image.data(), image.width()))
        .expect("flip preserves shape")
}

pub fn hflip_mask(mask: &LabelMask) -> LabelMask {
    LabelMask::new(mask.height(), mask.width(), flip_rows(mask.data(), mask.width()))
        .expect("flip preserves shape")
}

/// Reverses column order in the image and, if given, the mask.
pub fn hflip(image: &Image, mask: Option<&LabelMask>) -> (Image, Option<LabelMask>) {
    (hflip_image(image), mask.map(hflip_mask))
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Separable 5-tap binomial blur (σ = 1) with edge replication.
pub fn binomial_blur(image: &Image) -> Image {
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 {
        return image.clone();
    }
    let src = image.data();
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = BINOMIAL5
                .iter()
                .enumerate()
                .map(|(k, wk)| {
                    let x = (c as isize + k as isize - 2).clamp(0, w as isize - 1) as usize;
                    wk * src[r * w + x]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = BINOMIAL5
                .iter()
                .enumerate()
                .map(|(k, wk)| {
                    let y = (r as isize + k as isize - 2).clamp(0, h as isize - 1) as usize;
                    wk * tmp[y * w + c]
                })
                .sum();
        }
    }
    Image::new(h, w, out).expect("blur preserves shape")
}

/// Unsharp mask with unit strength, clamped to `[0, 1]`.
pub fn sharpen(image: &Image) -> Image {
    sharpen_unclamped(image).map_values(|v| v.clamp(0.0, 1.0))
}

/// `2·x − blur(x)` before clamping.
pub fn sharpen_unclamped(image: &Image) -> Image {
    let blurred = binomial_blur(image);
    let data = image
        .data()
        .iter()
        .zip(blurred.data())
        .map(|(x, b)| x + (x - b))
        .collect();
    Image::new(image.height(), image.width(), data).expect("sharpen preserves shape")
}
