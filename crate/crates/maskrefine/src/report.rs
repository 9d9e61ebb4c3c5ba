//! Split evaluation and the plain-text report.

use std::fmt::Write as _;
use std::time::Instant;

use maskrefine_core::eval::{coco_metrics, mask_score, measure_fps, paste_mask, Clock, FpsStats, GroundTruthRecord, MetricReport, PredictionRecord};
use maskrefine_core::model::{forward_refine, ModelParams, TreeSource};
use maskrefine_core::training::{evaluate_iou, InstanceSample};

use crate::error::Result;

/// Wall clock backed by [`Instant`].
#[derive(Debug)]
pub struct StdClock {
    origin: Instant,
}

impl Default for StdClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for StdClock {
    fn now(&mut self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

/// Frames per second of full inference over `samples`.
pub fn measure_refine_fps(params: &ModelParams, samples: &[InstanceSample], warmup: usize, repeats: usize) -> Result<FpsStats> {
    let mut clock = StdClock::default();
    Ok(measure_fps(&mut clock, samples, warmup, repeats, |s| {
        forward_refine(params, &s.image, &s.bbox, TreeSource::Predicted).map(drop)
    })?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub instances: usize,
    pub metrics: MetricReport,
    /// Mean box-frame IoU of the refined, coarse and empty-tree masks.
    pub refined_iou: f64,
    pub coarse_iou: f64,
    pub empty_tree_iou: f64,
    pub fps: Option<FpsStats>,
}

/// Prediction and ground-truth records in the image frame.
pub fn records(params: &ModelParams, samples: &[InstanceSample]) -> Result<(Vec<PredictionRecord>, Vec<GroundTruthRecord>)> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        let out = forward_refine(params, &s.image, &s.bbox, TreeSource::Predicted)?;
        let (w, h) = (s.image.width, s.image.height);
        preds.push(PredictionRecord {
            image_id: s.id,
            class: s.class,
            score: mask_score(&out.refined),
            mask: paste_mask(&out.refined, &s.bbox, w, h),
        });
        gts.push(GroundTruthRecord { image_id: s.id, class: s.class, mask: paste_mask(&s.gt_mask, &s.bbox, w, h) });
    }
    Ok((preds, gts))
}

pub fn evaluate_split(
    params: &ModelParams,
    split: &str,
    samples: &[InstanceSample],
    fps: Option<(usize, usize)>,
) -> Result<EvalReport> {
    let (preds, gts) = records(params, samples)?;
    let metrics = coco_metrics(&preds, &gts)?;
    let iou = evaluate_iou(params, samples, TreeSource::Predicted)?;
    let empty = evaluate_iou(params, samples, TreeSource::Empty)?;
    let fps = match fps {
        Some((warmup, repeats)) if !samples.is_empty() => Some(measure_refine_fps(params, samples, warmup, repeats)?),
        _ => None,
    };
    Ok(EvalReport {
        split: split.into(),
        instances: samples.len(),
        metrics,
        refined_iou: iou.refined,
        coarse_iou: iou.coarse,
        empty_tree_iou: empty.refined,
        fps,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{:.3}", 100.0 * x))
}

/// `key = value` lines, one per metric column, then a `row` line with the
/// columns in table order. AP values are percentages; bands without ground
/// truth read `undefined`. The FPS lines are the only timing-dependent ones.
pub fn render_report(r: &EvalReport) -> String {
    let m = &r.metrics;
    let cols = [("AP", m.ap), ("AP50", m.ap50), ("AP75", m.ap75), ("APs", m.ap_small), ("APm", m.ap_medium), ("APl", m.ap_large)];
    let mut s = String::new();
    let _ = writeln!(s, "split = {}", r.split);
    let _ = writeln!(s, "instances = {}", r.instances);
    for (k, v) in cols {
        let _ = writeln!(s, "{k} = {}", cell(v));
    }
    let fps = r.fps.as_ref().map_or_else(|| "undefined".into(), |f| format!("{:.2}", f.mean));
    let _ = writeln!(s, "FPS = {fps}");
    let _ = writeln!(s, "FPS_std = {}", r.fps.as_ref().map_or_else(|| "undefined".into(), |f| format!("{:.2}", f.std)));
    let _ = writeln!(s, "refined_iou = {}", r.refined_iou);
    let _ = writeln!(s, "coarse_iou = {}", r.coarse_iou);
    let _ = writeln!(s, "empty_tree_iou = {}", r.empty_tree_iou);
    let row: Vec<String> = cols.iter().map(|(_, v)| cell(*v)).chain([fps]).collect();
    let _ = writeln!(s, "columns = AP | AP50 | AP75 | APs | APm | APl | FPS");
    let _ = writeln!(s, "row = {}", row.join(" | "));
    s
}
