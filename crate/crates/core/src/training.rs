//! Multi-task loss, Adam, the training loop, the synthetic damage dataset and
//! flip augmentation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f32::consts::PI;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::eval::grid_iou;
use crate::features::{RgbImage, RoiBox};
use crate::model::{finish, forward_graph, ForwardPass, ModelParams, TreeSource};
use crate::numcore::{Graph, ParamStore, Taps, Var};
use crate::quadtree::{downsample_mask, gt_incoherence, MaskGrid, MaskKind, NodeSequence, CONTEXT_LEN, FINE_LEVEL};
use crate::{Error, Result};

/// Damage categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DamageClass {
    #[serde(rename = "Cracked Paint")]
    CrackedPaint,
    Dent,
    Loose,
    Scrape,
}

impl DamageClass {
    pub const ALL: [DamageClass; 4] = [DamageClass::CrackedPaint, DamageClass::Dent, DamageClass::Loose, DamageClass::Scrape];

    pub fn name(self) -> &'static str {
        match self {
            DamageClass::CrackedPaint => "Cracked Paint",
            DamageClass::Dent => "Dent",
            DamageClass::Loose => "Loose",
            DamageClass::Scrape => "Scrape",
        }
    }
}

impl fmt::Display for DamageClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DamageClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DamageClass::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            Error::Input(format!(
                "unknown class {s:?}; expected one of \"Cracked Paint\", \"Dent\", \"Loose\", \"Scrape\""
            ))
        })
    }
}

/// One instance: image, box, class and the 56×56 ground-truth mask in the box frame.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSample {
    pub id: usize,
    pub image: RgbImage,
    pub bbox: RoiBox,
    pub class: DamageClass,
    pub gt_mask: MaskGrid,
}

impl InstanceSample {
    pub fn new(id: usize, image: RgbImage, bbox: RoiBox, class: DamageClass, gt_mask: MaskGrid) -> Result<Self> {
        if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
            return Err(Error::Input(format!("sample {id}: box {bbox:?} has no area")));
        }
        if gt_mask.level() != FINE_LEVEL || gt_mask.kind() != MaskKind::Binary {
            return Err(Error::Input(format!("sample {id}: ground truth must be a binary 56×56 mask")));
        }
        Ok(Self { id, image, bbox, class, gt_mask })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<InstanceSample>,
    pub val: Vec<InstanceSample>,
    pub test: Vec<InstanceSample>,
}

/// Sizes of a 60/20/20 split of `n` samples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 6 / 10;
    let val = n * 2 / 10;
    (train, val, n - train - val)
}

/// Weights of the detection, coarse, refinement and incoherence terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub detect: f32,
    pub coarse: f32,
    pub refine: f32,
    pub incoherence: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { detect: 0.75, coarse: 0.75, refine: 0.8, incoherence: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.detect, self.coarse, self.refine, self.incoherence];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {w:?}")));
        }
        Ok(())
    }
}

/// Values of the four loss terms. Detection is out of scope and stays 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub detect: f32,
    pub coarse: f32,
    pub refine: f32,
    pub incoherence: f32,
}

/// `λ1·L_detect + λ2·L_coarse + λ3·L_refine + λ4·L_inc`.
pub fn loss_total(parts: &LossParts, w: &LossWeights) -> Result<f32> {
    w.validate()?;
    Ok(w.detect * parts.detect + w.coarse * parts.coarse + w.refine * parts.refine + w.incoherence * parts.incoherence)
}

/// Ground-truth label of every sequence entry: the majority-pooled GT value at
/// the entry's level and cell.
pub fn sequence_targets(seq: &NodeSequence, gt_fine: &MaskGrid) -> Result<Vec<f32>> {
    let pooled = [
        downsample_mask(gt_fine, 0)?,
        downsample_mask(gt_fine, 1)?,
        downsample_mask(gt_fine, 2)?,
        gt_fine.clone(),
    ];
    Ok(seq.entries().iter().map(|e| pooled[e.level as usize].get(e.cell.0, e.cell.1)).collect())
}

/// Mean L1 between decoded entry labels and their targets. Without
/// `include_context` only tree nodes count; an empty tree then gives 0.
pub fn loss_refine(g: &mut Graph, labels: Var, seq: &NodeSequence, gt_fine: &MaskGrid, include_context: bool) -> Result<Var> {
    let targets = sequence_targets(seq, gt_fine)?;
    if include_context {
        return g.l1_mean(labels, &targets);
    }
    if seq.len() == CONTEXT_LEN {
        return Ok(g.constant(crate::numcore::Tensor::scalar(0.0)));
    }
    let rows: Vec<usize> = (CONTEXT_LEN..seq.len()).collect();
    let nodes = g.gather(labels, alloc::rc::Rc::new(Taps::select(seq.len(), &rows)))?;
    g.l1_mean(nodes, &targets[CONTEXT_LEN..])
}

/// Mean BCE over all level-1 and level-2 cells against ground-truth incoherence.
pub fn loss_inc(g: &mut Graph, scores_l1: Var, scores_l2: Var, gt_fine: &MaskGrid) -> Result<Var> {
    let mut target = gt_incoherence(gt_fine, 1)?.values().to_vec();
    target.extend_from_slice(gt_incoherence(gt_fine, 2)?.values());
    let both = g.concat_rows(&[scores_l1, scores_l2])?;
    g.bce_mean(both, &target)
}

/// Mean BCE of the 14×14 coarse prediction against the pooled ground truth.
pub fn loss_coarse(g: &mut Graph, coarse: Var, gt_fine: &MaskGrid) -> Result<Var> {
    let target = downsample_mask(gt_fine, 1)?;
    g.bce_mean(coarse, target.values())
}

/// Records the weighted multi-task loss of a forward pass.
pub fn loss_graph(
    g: &mut Graph,
    pass: &ForwardPass,
    gt_fine: &MaskGrid,
    weights: &LossWeights,
    include_context: bool,
) -> Result<(Var, LossParts)> {
    weights.validate()?;
    let lc = loss_coarse(g, pass.coarse, gt_fine)?;
    let lr = loss_refine(g, pass.labels, &pass.sequence, gt_fine, include_context)?;
    let li = loss_inc(g, pass.incoherence[0], pass.incoherence[1], gt_fine)?;
    let parts = LossParts {
        detect: 0.0,
        coarse: g.value(lc).item(),
        refine: g.value(lr).item(),
        incoherence: g.value(li).item(),
    };
    let a = g.scale(lc, weights.coarse);
    let b = g.scale(lr, weights.refine);
    let c = g.scale(li, weights.incoherence);
    let ab = g.add(a, b)?;
    Ok((g.add(ab, c)?, parts))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update from per-parameter gradients in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f32>]) {
        self.step += 1;
        let c1 = 1.0 - libm::powf(self.beta1, self.step as f32);
        let c2 = 1.0 - libm::powf(self.beta2, self.step as f32);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((p, &gr), mv), vv) in store.get_mut(id).data_mut().iter_mut().zip(&grads[k]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gr;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gr * gr;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *p -= self.lr * mhat / (libm::sqrtf(vhat) + self.eps);
            }
        }
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub teacher_forced: bool,
    pub train_loss: LossParts,
    pub train_total: f32,
    pub mean_nodes: f64,
    pub val_refined_iou: f64,
    pub val_coarse_iou: f64,
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation refined IoU.
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    /// `None` when no epoch ran; the initial parameters are returned then.
    pub best_epoch: Option<usize>,
    pub best_val_iou: f64,
}

/// Mean refined and coarse IoU of a sample list in the box frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    pub refined: f64,
    pub coarse: f64,
}

pub fn evaluate_iou(params: &ModelParams, samples: &[InstanceSample], source: TreeSource<'_>) -> Result<IouSummary> {
    if samples.is_empty() {
        return Ok(IouSummary::default());
    }
    let (mut r, mut c) = (0.0, 0.0);
    for s in samples {
        let out = crate::model::forward_refine(params, &s.image, &s.bbox, source)?;
        r += grid_iou(&out.refined, &s.gt_mask)?;
        c += grid_iou(&out.coarse.upsample_nearest(FINE_LEVEL)?, &s.gt_mask)?;
    }
    let n = samples.len() as f64;
    Ok(IouSummary { refined: r / n, coarse: c / n })
}

/// Loss and gradients of one sample. Returns the parts, the tree size and
/// the gradient of every stored parameter in store order.
pub fn sample_gradients(
    params: &ModelParams,
    sample: &InstanceSample,
    source: TreeSource<'_>,
    weights: &LossWeights,
    include_context: bool,
) -> Result<(f32, LossParts, usize, Vec<Vec<f32>>)> {
    let mut g = Graph::new();
    let pass = forward_graph(&mut g, params, &sample.image, &sample.bbox, source)?;
    let (loss, parts) = loss_graph(&mut g, &pass, &sample.gt_mask, weights, include_context)?;
    let total = g.value(loss).item();
    if !total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss on sample {}", sample.id)));
    }
    let grads = g.backward(loss)?;
    let per_param = params
        .store
        .ids()
        .map(|id| grads.param(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; params.store.get(id).numel()]))
        .collect();
    Ok((total, parts, pass.tree.len(), per_param))
}

/// Seeded end-to-end training with Adam and gradient accumulation.
pub fn train(split: &DatasetSplit, config: &Config, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let tc = &config.training;
    let mut params = ModelParams::init(&config.model, tc.seed)?;
    let mut adam = Adam::new(&params.store, tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0f_7a41);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 0..tc.epochs {
        let teacher_forced = epoch < tc.teacher_forcing_epochs;
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut nodes = 0usize;
        for (step, chunk) in order.chunks(tc.batch).enumerate() {
            let mut acc: Vec<Vec<f32>> = params.store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            let inv = 1.0 / chunk.len() as f32;
            for &k in chunk {
                let sample = augment(&split.train[k], &mut rng);
                let source = if teacher_forced { TreeSource::GroundTruth(&sample.gt_mask) } else { TreeSource::Predicted };
                let (total, parts, n, grads) =
                    sample_gradients(&params, &sample, source, &tc.loss_weights, tc.refine_context).map_err(|e| {
                        Error::Numerical(format!("epoch {epoch} step {step}: {e}"))
                    })?;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (av, &gv) in a.iter_mut().zip(g) {
                        *av += gv * inv;
                    }
                }
                sums[0] += total as f64;
                sums[1] += parts.coarse as f64;
                sums[2] += parts.refine as f64;
                sums[3] += parts.incoherence as f64;
                nodes += n;
            }
            adam.step(&mut params.store, &acc);
            if !params.store.all_finite() {
                return Err(Error::Numerical(format!("epoch {epoch} step {step}: parameters became non-finite")));
            }
        }
        let n = split.train.len() as f64;
        let val = evaluate_iou(&params, &split.val, TreeSource::Predicted)?;
        let entry = EpochLog {
            epoch,
            teacher_forced,
            train_loss: LossParts {
                detect: 0.0,
                coarse: (sums[1] / n) as f32,
                refine: (sums[2] / n) as f32,
                incoherence: (sums[3] / n) as f32,
            },
            train_total: (sums[0] / n) as f32,
            mean_nodes: nodes as f64 / n,
            val_refined_iou: val.refined,
            val_coarse_iou: val.coarse,
        };
        on_epoch(&entry);
        if best.as_ref().map_or(true, |(_, b, _)| val.refined > *b) {
            best = Some((epoch, val.refined, params.store.clone()));
        }
        log.push(entry);
    }

    match best {
        Some((epoch, iou, store)) => {
            params.store = store;
            Ok(TrainOutcome { params, log, best_epoch: Some(epoch), best_val_iou: iou })
        }
        None => {
            let val = evaluate_iou(&params, &split.val, TreeSource::Predicted)?;
            Ok(TrainOutcome { params, log, best_epoch: None, best_val_iou: val.refined })
        }
    }
}

/// Refine-time summary used after training: forward with predicted trees.
pub fn refine_sample(params: &ModelParams, sample: &InstanceSample) -> Result<crate::model::RefineOutput> {
    let mut g = Graph::new();
    let pass = forward_graph(&mut g, params, &sample.image, &sample.bbox, TreeSource::Predicted)?;
    finish(&g, pass)
}

/// Horizontal flip of image, box and mask.
pub fn flip_sample(s: &InstanceSample) -> InstanceSample {
    InstanceSample {
        id: s.id,
        image: s.image.flip_horizontal(),
        bbox: s.bbox.flip_horizontal(s.image.width),
        class: s.class,
        gt_mask: s.gt_mask.flip_horizontal(),
    }
}

/// Flips with probability 0.5.
pub fn augment<R: Rng>(s: &InstanceSample, rng: &mut R) -> InstanceSample {
    if rng.gen_bool(0.5) {
        flip_sample(s)
    } else {
        s.clone()
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Blob { cx: f32, cy: f32, r: f32, harmonics: [(f32, f32); 3] },
    Stroke { points: Vec<(f32, f32)>, half_width: f32 },
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        match self {
            Shape::Blob { cx, cy, r, harmonics } => {
                let (dx, dy) = (x - cx, y - cy);
                let theta = libm::atan2f(dy, dx);
                let mut rad = *r;
                for (k, &(amp, phase)) in harmonics.iter().enumerate() {
                    rad += r * amp * libm::cosf((k + 2) as f32 * theta + phase);
                }
                dx * dx + dy * dy <= rad * rad
            }
            Shape::Stroke { points, half_width } => {
                points.windows(2).any(|w| segment_distance2(x, y, w[0], w[1]) <= half_width * half_width)
            }
        }
    }
}

fn segment_distance2(x: f32, y: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((x - a.0) * vx + (y - a.1) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (px, py) = (a.0 + t * vx, a.1 + t * vy);
    (x - px) * (x - px) + (y - py) * (y - py)
}

fn random_shape<R: Rng>(rng: &mut R, class: DamageClass, size: f32) -> Shape {
    let scale = size / 128.0;
    match class {
        DamageClass::Scrape => {
            let len = rng.gen_range(60.0..95.0) * scale;
            let half_width = rng.gen_range(5.0..9.0) * scale;
            let angle = rng.gen_range(0.0..PI);
            let bend = rng.gen_range(-0.25..0.25) * len;
            let reach = len / 2.0 + half_width + 4.0 * scale;
            let cx = rng.gen_range(reach..size - reach);
            let cy = rng.gen_range(reach..size - reach);
            let (ux, uy) = (libm::cosf(angle), libm::sinf(angle));
            let p0 = (cx - ux * len / 2.0, cy - uy * len / 2.0);
            let p1 = (cx + ux * len / 2.0, cy + uy * len / 2.0);
            let ctrl = (cx - uy * bend, cy + ux * bend);
            let points = (0..=24)
                .map(|k| {
                    let t = k as f32 / 24.0;
                    let a = (1.0 - t) * (1.0 - t);
                    let b = 2.0 * (1.0 - t) * t;
                    let c = t * t;
                    (a * p0.0 + b * ctrl.0 + c * p1.0, a * p0.1 + b * ctrl.1 + c * p1.1)
                })
                .collect();
            Shape::Stroke { points, half_width }
        }
        _ => {
            let (lo, hi) = if class == DamageClass::Loose { (28.0, 40.0) } else { (22.0, 38.0) };
            let r = rng.gen_range(lo..hi) * scale;
            let harmonics = [0, 1, 2].map(|_| (rng.gen_range(0.0..0.1), rng.gen_range(0.0..2.0 * PI)));
            let reach = r * 1.35 + 4.0 * scale;
            Shape::Blob { cx: rng.gen_range(reach..size - reach), cy: rng.gen_range(reach..size - reach), r, harmonics }
        }
    }
}

fn luminance(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn render<R: Rng>(rng: &mut R, shape: &Shape, class: DamageClass, size: usize) -> RgbImage {
    // Damage is darker than the surrounding paint.
    let bg = loop {
        let c: [f32; 3] = [0, 1, 2].map(|_| rng.gen_range(110.0..225.0));
        if luminance(c) >= 135.0 {
            break c;
        }
    };
    let fg = loop {
        let c: [f32; 3] = [0, 1, 2].map(|_| rng.gen_range(10.0..200.0));
        if luminance(c) <= luminance(bg) - 60.0 {
            break c;
        }
    };
    let (fa, fb) = (rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2));
    let (pa, pb) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let shade = rng.gen_range(0.0..2.0 * PI);
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
            let inside = shape.contains(xf, yf);
            let (base, tex) = if inside {
                let t = match class {
                    DamageClass::Dent => 22.0 * libm::sinf(libm::cosf(shade) * xf * 0.08 + libm::sinf(shade) * yf * 0.08),
                    DamageClass::CrackedPaint => {
                        if libm::fabsf(libm::sinf(xf * 0.45 + 3.0 * libm::sinf(yf * 0.21))) < 0.12 { -40.0 } else { 0.0 }
                    }
                    DamageClass::Loose => 14.0 * libm::sinf((xf + yf) * 0.6),
                    DamageClass::Scrape => 0.0,
                };
                (fg, t)
            } else {
                (bg, 12.0 * libm::sinf(xf * fa + pa) * libm::cosf(yf * fb + pb))
            };
            for c in base {
                let noise = rng.gen_range(-9.0..9.0);
                pixels.push((c + tex + noise).clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage { width: size, height: size, pixels }
}

/// Samples of the generated set, before splitting, in id order.
pub fn generate_samples(n: usize, seed: u64, image_size: usize) -> Result<Vec<InstanceSample>> {
    let size = image_size as f32;
    let mut out = Vec::with_capacity(n);
    for id in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(id as u64));
        loop {
            let class = DamageClass::ALL[rng.gen_range(0..4)];
            let shape = random_shape(&mut rng, class, size);
            let (mut xmin, mut ymin, mut xmax, mut ymax) = (usize::MAX, usize::MAX, 0usize, 0usize);
            for y in 0..image_size {
                for x in 0..image_size {
                    if shape.contains(x as f32 + 0.5, y as f32 + 0.5) {
                        (xmin, ymin, xmax, ymax) = (xmin.min(x), ymin.min(y), xmax.max(x), ymax.max(y));
                    }
                }
            }
            if xmin == usize::MAX {
                continue;
            }
            let (w, h) = ((xmax + 1 - xmin) as f32, (ymax + 1 - ymin) as f32);
            let bbox = RoiBox::new(
                libm::floorf(xmin as f32 - 0.1 * w).max(0.0),
                libm::floorf(ymin as f32 - 0.1 * h).max(0.0),
                libm::ceilf((xmax + 1) as f32 + 0.1 * w).min(size),
                libm::ceilf((ymax + 1) as f32 + 0.1 * h).min(size),
            );
            let mut mask = Vec::with_capacity(56 * 56);
            for v in 0..56 {
                for u in 0..56 {
                    let px = bbox.x0 + (u as f32 + 0.5) * bbox.width() / 56.0;
                    let py = bbox.y0 + (v as f32 + 0.5) * bbox.height() / 56.0;
                    mask.push(if shape.contains(px, py) { 1.0 } else { 0.0 });
                }
            }
            let fg = mask.iter().filter(|&&m| m == 1.0).count();
            if fg == 0 || fg == mask.len() {
                continue;
            }
            let image = render(&mut rng, &shape, class, image_size);
            let gt = MaskGrid::new(FINE_LEVEL, MaskKind::Binary, mask)?;
            out.push(InstanceSample::new(id, image, bbox, class, gt)?);
            break;
        }
    }
    Ok(out)
}

/// Seeded 60/20/20 split of a sample list.
pub fn split_samples(samples: Vec<InstanceSample>, seed: u64) -> DatasetSplit {
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x0005_9117));
    let (tr, va, _) = split_sizes(n);
    let mut slots: Vec<Option<InstanceSample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<InstanceSample> { idx.iter().map(|&k| slots[k].take().unwrap()).collect() };
    let train = take(&order[..tr]);
    let val = take(&order[tr..tr + va]);
    let test = take(&order[tr + va..]);
    DatasetSplit { train, val, test }
}

/// Synthetic damage set of `n ≥ 10` instances split 60/20/20.
pub fn generate_synthetic_dataset(n: usize, seed: u64, image_size: usize) -> Result<DatasetSplit> {
    if n < 10 {
        return Err(Error::Config(format!("need at least 10 samples, got {n}")));
    }
    if image_size < 64 || image_size % 32 != 0 {
        return Err(Error::Config(format!("image size {image_size} must be at least 64 and divisible by 32")));
    }
    Ok(split_samples(generate_samples(n, seed, image_size)?, seed))
}

impl DatasetSplit {
    pub fn get(&self, name: &str) -> Result<&[InstanceSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Input(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `name` of a split for manifests.
pub fn split_name(k: usize) -> String {
    String::from(["train", "val", "test"][k])
}

/// Seed of the gradient probe's instance and weights.
pub const PROBE_SEED: u64 = 11;

/// Small model used by the gradient probe so every parameter can be
/// perturbed in reasonable time.
pub fn probe_config() -> crate::config::ModelConfig {
    crate::config::ModelConfig { d_model: 8, heads: 2, layers: 1, channels: 4, ..Default::default() }
}

/// Central-difference check of the full training loss over every parameter
/// on one seeded 64×64 instance. The tree is grown from ground truth once and
/// held fixed so perturbations cannot change the sequence.
pub fn gradient_probe(eps: f32) -> Result<crate::numcore::GradcheckReport> {
    let config = probe_config();
    let sample = generate_samples(1, PROBE_SEED, 64)?.remove(0);
    let mut params = ModelParams::init(&config, PROBE_SEED)?;
    let tree = crate::quadtree::gt_quadtree(&sample.gt_mask, config.threshold, config.node_cap)?;
    let weights = LossWeights::default();
    let ids: Vec<_> = params.store.ids().collect();
    let template = params.clone();
    crate::numcore::gradcheck(&mut params.store, &ids, eps, |g, store| {
        let p = template.with_store(store.clone())?;
        let pass = forward_graph(g, &p, &sample.image, &sample.bbox, TreeSource::Fixed(&tree))?;
        Ok(loss_graph(g, &pass, &sample.gt_mask, &weights, true)?.0)
    })
}
