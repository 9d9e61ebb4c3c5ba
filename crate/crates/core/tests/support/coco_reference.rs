//! Straight-line COCO reference evaluator on axis-aligned rectangles, shared
//! by the eval tests and the acceptance suite.

#![allow(dead_code)]

use maskrefine_core::eval::{BinaryMask, GroundTruthRecord, PredictionRecord};
use maskrefine_core::training::DamageClass;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const W: usize = 128;

#[derive(Clone, Copy, Debug)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn area(self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn mask(self) -> BinaryMask {
        let mut bits = vec![false; W * W];
        for y in self.y0..self.y1 {
            for x in self.x0..self.x1 {
                bits[y * W + x] = true;
            }
        }
        BinaryMask::new(W, W, bits).unwrap()
    }
}

pub fn r(x0: usize, y0: usize, x1: usize, y1: usize) -> Rect {
    Rect { x0, y0, x1, y1 }
}

pub fn rect_iou(a: Rect, b: Rect) -> f64 {
    let w = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let h = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = w * h;
    inter as f64 / (a.area() + b.area() - inter) as f64
}

pub struct Micro {
    pub gts: Vec<(usize, DamageClass, Rect)>,
    pub preds: Vec<(usize, DamageClass, f64, Rect)>,
}

pub fn micro_set() -> Micro {
    use DamageClass::*;
    Micro {
        gts: vec![
            (0, CrackedPaint, r(10, 10, 110, 110)),
            (0, Dent, r(0, 0, 20, 20)),
            (1, Scrape, r(20, 20, 70, 60)),
            (2, Loose, r(30, 30, 80, 80)),
            (3, Dent, r(0, 0, 40, 40)),
            (3, CrackedPaint, r(100, 100, 120, 120)),
        ],
        preds: vec![
            (0, CrackedPaint, 0.9, r(12, 12, 110, 110)),
            (0, Dent, 0.6, r(2, 0, 22, 20)),
            (1, Scrape, 0.8, r(25, 20, 70, 60)),
            (1, Scrape, 0.85, r(80, 80, 100, 100)),
            (2, Loose, 0.7, r(30, 30, 80, 70)),
            (2, Loose, 0.5, r(30, 30, 80, 80)),
            (3, CrackedPaint, 0.4, r(100, 100, 120, 115)),
            (3, Dent, 0.95, r(100, 100, 120, 120)),
            (4, Scrape, 0.3, r(0, 0, 50, 50)),
            (4, Loose, 0.65, r(0, 0, 100, 100)),
        ],
    }
}

pub fn records(m: &Micro) -> (Vec<PredictionRecord>, Vec<GroundTruthRecord>) {
    let preds = m
        .preds
        .iter()
        .map(|&(image_id, class, score, rect)| PredictionRecord { image_id, class, score, mask: rect.mask() })
        .collect();
    let gts = m.gts.iter().map(|&(image_id, class, rect)| GroundTruthRecord { image_id, class, mask: rect.mask() }).collect();
    (preds, gts)
}

pub fn in_band(band: usize, area: usize) -> bool {
    match band {
        0 => true,
        1 => area < 1024,
        2 => area >= 1024 && area < 9216,
        _ => area >= 9216,
    }
}

// Straight-line reference: rectangle arithmetic for IoU, explicit max over
// the PR curve for interpolation.
pub fn reference_ap(m: &Micro, band: usize, t: f64) -> Option<f64> {
    let mut per_class = Vec::new();
    for class in DamageClass::ALL {
        let gts: Vec<_> = m.gts.iter().filter(|g| g.1 == class && in_band(band, g.2.area())).collect();
        if gts.is_empty() {
            continue;
        }
        let mut preds: Vec<_> = m.preds.iter().filter(|p| p.1 == class && in_band(band, p.3.area())).collect();
        preds.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
        let mut used = vec![false; gts.len()];
        let mut curve = Vec::new();
        let mut hits = 0.0;
        for (k, p) in preds.iter().enumerate() {
            let mut pick = None;
            let mut pick_iou = -1.0;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] || g.0 != p.0 {
                    continue;
                }
                let iou = rect_iou(p.3, g.2);
                if iou >= t && iou > pick_iou {
                    pick = Some(gi);
                    pick_iou = iou;
                }
            }
            if let Some(gi) = pick {
                used[gi] = true;
                hits += 1.0;
            }
            curve.push((hits / gts.len() as f64, hits / (k + 1) as f64));
        }
        let mut area = 0.0;
        for step in 0..=100 {
            let level = step as f64 / 100.0;
            let mut best: f64 = 0.0;
            for &(rec, prec) in &curve {
                if rec >= level {
                    best = best.max(prec);
                }
            }
            area += best;
        }
        per_class.push(area / 101.0);
    }
    if per_class.is_empty() {
        None
    } else {
        Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
    }
}

pub fn reference_mean(m: &Micro, band: usize) -> Option<f64> {
    let mut sum = 0.0;
    // Decimal thresholds: 0.5 + 0.05 * 7 rounds above 0.85.
    for k in 0..10 {
        sum += reference_ap(m, band, (50 + 5 * k) as f64 / 100.0)?;
    }
    Some(sum / 10.0)
}

pub fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
        (None, None) => true,
        _ => false,
    }
}

pub fn random_rect(rng: &mut ChaCha8Rng) -> Rect {
    let x0 = rng.gen_range(0..100);
    let y0 = rng.gen_range(0..100);
    let x1 = rng.gen_range(x0 + 1..=W);
    let y1 = rng.gen_range(y0 + 1..=W);
    r(x0, y0, x1, y1)
}

pub fn random_set(seed: u64) -> Micro {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Micro { gts: Vec::new(), preds: Vec::new() };
    for _ in 0..rng.gen_range(1..6) {
        let class = DamageClass::ALL[rng.gen_range(0..4)];
        let image = rng.gen_range(0..3);
        let g = random_rect(&mut rng);
        m.gts.push((image, class, g));
        if rng.gen_bool(0.7) {
            // A jittered copy so matches span a range of IoUs.
            let d = rng.gen_range(0..8);
            let p = r(g.x0 + d.min(g.x1 - g.x0 - 1), g.y0, g.x1, g.y1);
            m.preds.push((image, class, rng.gen::<f64>(), p));
        }
    }
    for _ in 0..rng.gen_range(0..4) {
        let class = DamageClass::ALL[rng.gen_range(0..4)];
        m.preds.push((rng.gen_range(0..3), class, rng.gen::<f64>(), random_rect(&mut rng)));
    }
    m
}

