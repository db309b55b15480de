//! PNG previews of images and label masks.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::metrics::LabelMask;

const PALETTE: [[u8; 3]; 4] = [[0, 0, 0], [220, 50, 47], [133, 153, 0], [38, 139, 210]];
const GAP: u32 = 2;

/// A tile in a preview grid.
pub enum Tile<'a> {
    Gray(&'a Image),
    Labels(&'a LabelMask),
}

impl Tile<'_> {
    fn dims(&self) -> (u32, u32) {
        match self {
            Tile::Gray(i) => (i.height() as u32, i.width() as u32),
            Tile::Labels(m) => (m.height() as u32, m.width() as u32),
        }
    }

    fn pixel(&self, r: usize, c: usize) -> Rgb<u8> {
        match self {
            Tile::Gray(i) => {
                let v = (i.get(r, c).clamp(0.0, 1.0) * 255.0).round() as u8;
                Rgb([v, v, v])
            }
            Tile::Labels(m) => Rgb(PALETTE[(m.get(r, c) as usize).min(3)]),
        }
    }
}

/// Lays tiles out row-major with `columns` per row and writes a PNG.
pub fn write_grid(tiles: &[Tile<'_>], columns: usize, path: &Path) -> Result<()> {
    if tiles.is_empty() || columns == 0 {
        return Err(Error::Invalid("preview grid needs at least one tile".into()));
    }
    let (th, tw) = tiles
        .iter()
        .map(Tile::dims)
        .fold((0, 0), |(h, w), (a, b)| (h.max(a), w.max(b)));
    let rows = tiles.len().div_ceil(columns) as u32;
    let cols = columns.min(tiles.len()) as u32;
    let mut canvas = RgbImage::from_pixel(
        cols * tw + (cols - 1) * GAP,
        rows * th + (rows - 1) * GAP,
        Rgb([255, 255, 255]),
    );
    for (i, tile) in tiles.iter().enumerate() {
        let (x0, y0) = ((i % columns) as u32 * (tw + GAP), (i / columns) as u32 * (th + GAP));
        let (h, w) = tile.dims();
        for r in 0..h {
            for c in 0..w {
                canvas.put_pixel(x0 + c, y0 + r, tile.pixel(r as usize, c as usize));
            }
        }
    }
    canvas
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Invalid(format!("cannot write {}: {e}", path.display())))
}

/// Reads a PNG (any colour type) as a grayscale image in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?
        .to_luma16();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
    Image::new(h as usize, w as usize, data)
}
