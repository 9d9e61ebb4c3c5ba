//! Mask IoU, COCO-style mask AP and throughput measurement.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::features::RoiBox;
use crate::quadtree::MaskGrid;
use crate::training::DamageClass;
use crate::{Error, Result};

/// Upper bounds of the small and medium size bands, in pixels.
pub const SMALL_AREA: usize = 32 * 32;
pub const MEDIUM_AREA: usize = 96 * 96;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Dimension(format!("{} bits for a {width}×{height} mask", bits.len())));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Intersection over union; 0 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Dimension(format!(
            "IoU of a {}×{} and a {}×{} mask",
            a.width, a.height, b.width, b.height
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// IoU of two grids at the same level after binarizing at 0.5.
pub fn grid_iou(a: &MaskGrid, b: &MaskGrid) -> Result<f64> {
    if a.level() != b.level() {
        return Err(Error::Dimension(format!("IoU across levels {} and {}", a.level(), b.level())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Pastes a box-frame probability grid into a `width × height` image frame:
/// each pixel centre inside the box samples the grid bilinearly and is set
/// when the sample is at least 0.5.
pub fn paste_mask(grid: &MaskGrid, bbox: &RoiBox, width: usize, height: usize) -> BinaryMask {
    let side = grid.side();
    let v = grid.values();
    let at = |i: usize, j: usize| v[i * side + j];
    let mut bits = vec![false; width * height];
    let (bw, bh) = (bbox.width(), bbox.height());
    if !(bw > 0.0 && bh > 0.0) {
        return BinaryMask { width, height, bits };
    }
    let x_lo = libm::floorf(bbox.x0).max(0.0) as usize;
    let y_lo = libm::floorf(bbox.y0).max(0.0) as usize;
    let x_hi = (libm::ceilf(bbox.x1).max(0.0) as usize).min(width);
    let y_hi = (libm::ceilf(bbox.y1).max(0.0) as usize).min(height);
    for y in y_lo..y_hi {
        let py = y as f32 + 0.5;
        if py < bbox.y0 || py >= bbox.y1 {
            continue;
        }
        let gy = ((py - bbox.y0) / bh * side as f32 - 0.5).clamp(0.0, (side - 1) as f32);
        let i0 = gy as usize;
        let i1 = (i0 + 1).min(side - 1);
        let fy = gy - i0 as f32;
        for x in x_lo..x_hi {
            let px = x as f32 + 0.5;
            if px < bbox.x0 || px >= bbox.x1 {
                continue;
            }
            let gx = ((px - bbox.x0) / bw * side as f32 - 0.5).clamp(0.0, (side - 1) as f32);
            let j0 = gx as usize;
            let j1 = (j0 + 1).min(side - 1);
            let fx = gx - j0 as f32;
            let top = at(i0, j0) * (1.0 - fx) + at(i0, j1) * fx;
            let bottom = at(i1, j0) * (1.0 - fx) + at(i1, j1) * fx;
            bits[y * width + x] = top * (1.0 - fy) + bottom * fy >= 0.5;
        }
    }
    BinaryMask { width, height, bits }
}

/// Confidence of a predicted mask: mean probability over its foreground
/// cells, or the overall mean when nothing is foreground.
pub fn mask_score(grid: &MaskGrid) -> f64 {
    let v = grid.values();
    let (sum, n) = v.iter().filter(|&&p| p >= 0.5).fold((0.0f64, 0usize), |(s, n), &p| (s + p as f64, n + 1));
    if n > 0 {
        sum / n as f64
    } else {
        v.iter().map(|&p| p as f64).sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: usize,
    pub class: DamageClass,
    pub score: f64,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub image_id: usize,
    pub class: DamageClass,
    pub mask: BinaryMask,
}

/// Area band filter for AP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub fn contains(self, area: usize) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_AREA,
            AreaRange::Medium => (SMALL_AREA..MEDIUM_AREA).contains(&area),
            AreaRange::Large => area >= MEDIUM_AREA,
        }
    }
}

/// 101-point interpolated precision of one class at one IoU threshold.
/// `None` when the class has no ground truth.
fn class_ap(preds: &[&PredictionRecord], gts: &[&GroundTruthRecord], threshold: f64) -> Result<Option<f64>> {
    if gts.is_empty() {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(preds.len());
    for &k in &order {
        let p = preds[k];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if matched[gi] || g.image_id != p.image_id {
                continue;
            }
            let iou = mask_iou(&p.mask, &g.mask)?;
            if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &t in &tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        precision.push(ctp as f64 / (ctp + cfp) as f64);
        recall.push(ctp as f64 / gts.len() as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    Ok(Some(total / 101.0))
}

/// Mean over classes with ground truth of the AP at one IoU threshold, with
/// predictions and ground truth restricted to an area band. `None` when no
/// class has ground truth in the band.
pub fn average_precision_in(
    preds: &[PredictionRecord],
    gts: &[GroundTruthRecord],
    threshold: f64,
    range: AreaRange,
) -> Result<Option<f64>> {
    let (mut sum, mut n) = (0.0, 0usize);
    for class in DamageClass::ALL {
        let p: Vec<_> = preds.iter().filter(|p| p.class == class && range.contains(p.mask.area())).collect();
        let g: Vec<_> = gts.iter().filter(|g| g.class == class && range.contains(g.mask.area())).collect();
        if let Some(ap) = class_ap(&p, &g, threshold)? {
            sum += ap;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

pub fn average_precision(preds: &[PredictionRecord], gts: &[GroundTruthRecord], threshold: f64) -> Result<Option<f64>> {
    average_precision_in(preds, gts, threshold, AreaRange::All)
}

/// The IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    core::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

fn mean_ap(preds: &[PredictionRecord], gts: &[GroundTruthRecord], range: AreaRange) -> Result<Option<f64>> {
    let mut sum = 0.0;
    for t in coco_thresholds() {
        match average_precision_in(preds, gts, t, range)? {
            Some(ap) => sum += ap,
            None => return Ok(None),
        }
    }
    Ok(Some(sum / 10.0))
}

/// AP metrics; a band with no ground truth is `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
}

pub fn coco_metrics(preds: &[PredictionRecord], gts: &[GroundTruthRecord]) -> Result<MetricReport> {
    for p in preds {
        if !(0.0..=1.0).contains(&p.score) {
            return Err(Error::Input(format!("prediction score {} outside [0, 1]", p.score)));
        }
    }
    Ok(MetricReport {
        ap: mean_ap(preds, gts, AreaRange::All)?,
        ap50: average_precision(preds, gts, 0.5)?,
        ap75: average_precision(preds, gts, 0.75)?,
        ap_small: mean_ap(preds, gts, AreaRange::Small)?,
        ap_medium: mean_ap(preds, gts, AreaRange::Medium)?,
        ap_large: mean_ap(preds, gts, AreaRange::Large)?,
    })
}

/// Monotonic time source in seconds.
pub trait Clock {
    fn now(&mut self) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpsStats {
    pub mean: f64,
    pub std: f64,
    pub per_repeat: Vec<f64>,
}

/// Throughput of `f` over `items`: `warmup` discarded calls, then `repeats`
/// timed passes over all items. Reports mean and sample standard deviation
/// of frames per second.
pub fn measure_fps<C, T, F>(clock: &mut C, items: &[T], warmup: usize, repeats: usize, mut f: F) -> Result<FpsStats>
where
    C: Clock,
    F: FnMut(&T) -> Result<()>,
{
    if items.is_empty() || repeats == 0 {
        return Err(Error::Input("throughput needs at least one item and one repeat".into()));
    }
    for k in 0..warmup {
        f(&items[k % items.len()])?;
    }
    let mut per_repeat = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = clock.now();
        for it in items {
            f(it)?;
        }
        let elapsed = clock.now() - start;
        if !(elapsed > 0.0) {
            return Err(Error::Numerical(format!("clock advanced by {elapsed} s over a pass")));
        }
        per_repeat.push(items.len() as f64 / elapsed);
    }
    let mean = per_repeat.iter().sum::<f64>() / repeats as f64;
    let std = if repeats > 1 {
        libm::sqrt(per_repeat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (repeats - 1) as f64)
    } else {
        0.0
    };
    Ok(FpsStats { mean, std, per_repeat })
}
