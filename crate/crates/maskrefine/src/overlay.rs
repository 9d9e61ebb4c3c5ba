//! Side-by-side coarse and refined mask overlays on the box crop.

use maskrefine_core::features::{RgbImage, RoiBox};
use maskrefine_core::quadtree::{MaskGrid, FINE_LEVEL};

use crate::dataset::encode_rgb_png;
use crate::error::{Error, Result};

pub const SEPARATOR: usize = 4;
pub const ALPHA: f32 = 0.5;
const FILL: [u8; 3] = [255, 48, 32];
const CONTOUR: [u8; 3] = [255, 230, 0];
const SEPARATOR_COLOR: [u8; 3] = [255, 255, 255];

/// Integer pixel range `[x0, x1) × [y0, y1)` covered by a box.
pub fn crop_bounds(bbox: &RoiBox, width: usize, height: usize) -> Result<(usize, usize, usize, usize)> {
    let b = bbox.clipped(width, height)?;
    let x0 = b.x0.floor().max(0.0) as usize;
    let y0 = b.y0.floor().max(0.0) as usize;
    let x1 = (b.x1.ceil() as usize).clamp(x0 + 1, width);
    let y1 = (b.y1.ceil() as usize).clamp(y0 + 1, height);
    Ok((x0, y0, x1, y1))
}

/// Foreground of a 56×56 box-frame mask at each crop pixel, by nearest cell.
fn crop_mask(mask: &MaskGrid, bbox: &RoiBox, bounds: (usize, usize, usize, usize)) -> Vec<bool> {
    let (x0, y0, x1, y1) = bounds;
    let side = mask.side();
    let cell = |p: f32, lo: f32, extent: f32| -> Option<usize> {
        let u = (p - lo) / extent;
        (0.0..1.0).contains(&u).then(|| ((u * side as f32) as usize).min(side - 1))
    };
    let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
    for y in y0..y1 {
        let i = cell(y as f32 + 0.5, bbox.y0, bbox.height());
        for x in x0..x1 {
            let j = cell(x as f32 + 0.5, bbox.x0, bbox.width());
            out.push(matches!((i, j), (Some(i), Some(j)) if mask.get(i, j) >= 0.5));
        }
    }
    out
}

fn blend(base: u8, over: u8) -> u8 {
    ((1.0 - ALPHA) * base as f32 + ALPHA * over as f32).round() as u8
}

fn panel(image: &RgbImage, fg: &[bool], bounds: (usize, usize, usize, usize)) -> Vec<[u8; 3]> {
    let (x0, y0, x1, y1) = bounds;
    let (w, h) = (x1 - x0, y1 - y0);
    let at = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && fg[y as usize * w + x as usize];
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let base = image.pixel(x0 + x, y0 + y);
            let (xi, yi) = (x as isize, y as isize);
            px.push(if !at(xi, yi) {
                base
            } else if !(at(xi - 1, yi) && at(xi + 1, yi) && at(xi, yi - 1) && at(xi, yi + 1)) {
                CONTOUR
            } else {
                [0, 1, 2].map(|c| blend(base[c], FILL[c]))
            });
        }
    }
    px
}

/// Two panels over the box crop, coarse left and refined right, separated by
/// a white bar. Both use the same fill and contour colors so that identical
/// masks give identical panels.
pub fn overlay_image(image: &RgbImage, coarse: &MaskGrid, refined: &MaskGrid, bbox: &RoiBox) -> Result<RgbImage> {
    if refined.level() != FINE_LEVEL {
        return Err(Error::Data(format!("refined mask must be 56×56, got level {}", refined.level())));
    }
    let coarse = coarse.upsample_nearest(FINE_LEVEL)?;
    let bounds = crop_bounds(bbox, image.width, image.height)?;
    let (x0, y0, x1, y1) = bounds;
    let (w, h) = (x1 - x0, y1 - y0);
    let left = panel(image, &crop_mask(&coarse, bbox, bounds), bounds);
    let right = panel(image, &crop_mask(refined, bbox, bounds), bounds);
    let width = 2 * w + SEPARATOR;
    let mut pixels = Vec::with_capacity(width * h * 3);
    for y in 0..h {
        for x in 0..width {
            let p = if x < w {
                left[y * w + x]
            } else if x < w + SEPARATOR {
                SEPARATOR_COLOR
            } else {
                right[y * w + x - w - SEPARATOR]
            };
            pixels.extend_from_slice(&p);
        }
    }
    Ok(RgbImage::new(width, h, pixels)?)
}

/// PNG bytes of [`overlay_image`].
pub fn render_overlay(image: &RgbImage, coarse: &MaskGrid, refined: &MaskGrid, bbox: &RoiBox) -> Result<Vec<u8>> {
    encode_rgb_png(&overlay_image(image, coarse, refined, bbox)?)
}
