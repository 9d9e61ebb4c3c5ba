//! The refinement head: coarse and incoherence heads, node encoder with
//! self-attention channel recalibration, relative-position biased sequence
//! encoder and the pixel decoder.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::features::{bilinear_taps, roi_ladder, xavier_uniform, Backbone, Conv, RgbImage, RoiBox, RoiFeatureSet};
use crate::numcore::{Graph, ParamId, ParamStore, Taps, TapsBuilder, Tensor, Var};
use crate::quadtree::{
    build_quadtree, gt_quadtree, propagate_labels, serialize_sequence, side, EntrySource, MaskGrid, MaskKind,
    NodeSequence, Quadtree, CONTEXT_LEN,
};
use crate::{Error, Result};

/// Buckets per displacement axis: `0, ±1, ±(2–3), ±(4–7), ±(≥8)`.
pub const DISPLACEMENT_BUCKETS: usize = 9;
/// Buckets for the level difference `−3..=3`.
pub const LEVEL_BUCKETS: usize = 7;
pub const POSITION_BUCKETS: usize = DISPLACEMENT_BUCKETS * DISPLACEMENT_BUCKETS * LEVEL_BUCKETS;

const LN_EPS: f32 = 1e-5;

/// Bucket of a displacement in fine-grid units. The magnitude is floored
/// first, so `|Δ| < 1` lands in the centre bucket 4.
pub fn displacement_bucket(delta: f32) -> usize {
    let m = libm::floorf(delta.abs());
    let k = if m < 1.0 {
        0
    } else if m < 2.0 {
        1
    } else if m < 4.0 {
        2
    } else if m < 8.0 {
        3
    } else {
        4
    };
    if delta < 0.0 {
        4 - k
    } else {
        4 + k
    }
}

pub fn level_bucket(delta_level: i32) -> usize {
    (delta_level.clamp(-3, 3) + 3) as usize
}

/// Flat index into a head's bias table.
pub fn bucket_index(bx: usize, by: usize, bl: usize) -> usize {
    (bx * DISPLACEMENT_BUCKETS + by) * LEVEL_BUCKETS + bl
}

/// Position metadata of a sequence entry in fine-grid units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntryPosition {
    pub x: f32,
    pub y: f32,
    pub level: u8,
}

impl EntryPosition {
    pub fn of(seq: &NodeSequence) -> Vec<EntryPosition> {
        seq.entries()
            .iter()
            .map(|e| {
                let (x, y) = e.fine_position();
                EntryPosition { x, y, level: e.level }
            })
            .collect()
    }
}

/// Bias-table bucket for every ordered pair `(a, b)`, row-major `[len·len]`.
pub fn relative_buckets(positions: &[EntryPosition]) -> Vec<usize> {
    let mut out = Vec::with_capacity(positions.len() * positions.len());
    for a in positions {
        for b in positions {
            let bx = displacement_bucket(a.x - b.x);
            let by = displacement_bucket(a.y - b.y);
            let bl = level_bucket(a.level as i32 - b.level as i32);
            out.push(bucket_index(bx, by, bl));
        }
    }
    out
}

#[derive(Clone, Debug)]
struct Recalibration {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    gate1: ParamId,
    gate2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1_scale: ParamId,
    ln1_shift: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_scale: ParamId,
    ln2_shift: ParamId,
    ffn1_w: ParamId,
    ffn1_b: ParamId,
    ffn2_w: ParamId,
    ffn2_b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    backbone: Backbone,
    coarse: [Conv; 3],
    incoherence: [[Conv; 2]; 2],
    embed_w: ParamId,
    embed_b: ParamId,
    recal: Recalibration,
    layers: Vec<EncoderLayer>,
    position_bias: ParamId,
    norm_scale: ParamId,
    norm_shift: ParamId,
    dec1_w: ParamId,
    dec1_b: ParamId,
    dec2_w: ParamId,
    dec2_b: ParamId,
}

/// All learned tensors of the model plus the id layout addressing them.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    layout: Layout,
}

impl PartialEq for ModelParams {
    /// The layout is a function of the config, so comparing it is redundant.
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.store == other.store
    }
}

impl ModelParams {
    /// Seeded initialization.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut s = ParamStore::new();
        let (c, d, h) = (config.channels, config.d_model, config.heads);

        let backbone = Backbone::register(&mut s, rng, c);
        let coarse = [
            Conv::register(&mut s, rng, "coarse.conv0", c, c, 3, 1),
            Conv::register(&mut s, rng, "coarse.conv1", c, c, 3, 1),
            Conv::register(&mut s, rng, "coarse.out", c, 1, 1, 1),
        ];
        let incoherence = [1, 2].map(|l| {
            [
                Conv::register(&mut s, rng, &format!("incoherence{l}.conv"), c, c, 3, 1),
                Conv::register(&mut s, rng, &format!("incoherence{l}.out"), c, 1, 1, 1),
            ]
        });

        let din = c + 4;
        let embed_w = s.add("node.embed.weight", xavier_uniform(rng, &[din, d], din, d));
        let embed_b = s.add("node.embed.bias", Tensor::zeros(&[d]));
        let r = (d / 4).max(1);
        let recal = Recalibration {
            wq: s.add("recalibrate.wq", xavier_uniform(rng, &[d, d], d, d)),
            wk: s.add("recalibrate.wk", xavier_uniform(rng, &[d, d], d, d)),
            wv: s.add("recalibrate.wv", xavier_uniform(rng, &[d, d], d, d)),
            gate1: s.add("recalibrate.gate1", xavier_uniform(rng, &[d, r], d, r)),
            gate2: s.add("recalibrate.gate2", xavier_uniform(rng, &[r, d], r, d)),
        };
        let mut layers = Vec::with_capacity(config.layers);
        for n in 0..config.layers {
            let p = |k: &str| format!("encoder{n}.{k}");
            layers.push(EncoderLayer {
                ln1_scale: s.add(&p("ln1.scale"), Tensor::full(&[d], 1.0)),
                ln1_shift: s.add(&p("ln1.shift"), Tensor::zeros(&[d])),
                wq: s.add(&p("wq"), xavier_uniform(rng, &[d, d], d, d)),
                wk: s.add(&p("wk"), xavier_uniform(rng, &[d, d], d, d)),
                wv: s.add(&p("wv"), xavier_uniform(rng, &[d, d], d, d)),
                wo: s.add(&p("wo"), xavier_uniform(rng, &[d, d], d, d)),
                ln2_scale: s.add(&p("ln2.scale"), Tensor::full(&[d], 1.0)),
                ln2_shift: s.add(&p("ln2.shift"), Tensor::zeros(&[d])),
                ffn1_w: s.add(&p("ffn1.weight"), xavier_uniform(rng, &[d, 2 * d], d, 2 * d)),
                ffn1_b: s.add(&p("ffn1.bias"), Tensor::zeros(&[2 * d])),
                ffn2_w: s.add(&p("ffn2.weight"), xavier_uniform(rng, &[2 * d, d], 2 * d, d)),
                ffn2_b: s.add(&p("ffn2.bias"), Tensor::zeros(&[d])),
            });
        }
        let position_bias = s.add("encoder.position_bias", Tensor::zeros(&[h, POSITION_BUCKETS]));
        let hd = (d / 2).max(1);
        let norm_scale = s.add("decoder.norm.scale", Tensor::full(&[d], 1.0));
        let norm_shift = s.add("decoder.norm.shift", Tensor::zeros(&[d]));
        let dec1_w = s.add("decoder.fc1.weight", xavier_uniform(rng, &[d, hd], d, hd));
        let dec1_b = s.add("decoder.fc1.bias", Tensor::zeros(&[hd]));
        // Small output weights keep the initial labels near 0.5, where the
        // sigmoid still passes the L1 gradient.
        let mut w2 = xavier_uniform(rng, &[hd, 1], hd, 1);
        w2.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        let dec2_w = s.add("decoder.fc2.weight", w2);
        let dec2_b = s.add("decoder.fc2.bias", Tensor::zeros(&[1]));

        let layout = Layout {
            backbone,
            coarse,
            incoherence,
            embed_w,
            embed_b,
            recal,
            layers,
            position_bias,
            norm_scale,
            norm_shift,
            dec1_w,
            dec1_b,
            dec2_w,
            dec2_b,
        };
        Ok(Self { config: config.clone(), store: s, layout })
    }

    /// Rebuilds parameters for `config` from named tensors, which must match
    /// the layout's names and shapes exactly.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(alloc::string::String, Tensor)>) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        if tensors.len() != params.store.len() {
            return Err(Error::Input(format!(
                "expected {} parameter tensors, found {}",
                params.store.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = params
                .store
                .find(&name)
                .ok_or_else(|| Error::Input(format!("unknown parameter tensor {name}")))?;
            if params.store.get(id).shape() != t.shape() {
                return Err(Error::Input(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    params.store.get(id).shape()
                )));
            }
            *params.store.get_mut(id) = t;
        }
        Ok(params)
    }

    pub fn position_bias_id(&self) -> ParamId {
        self.layout.position_bias
    }

    /// Ids of the recalibration gate weights.
    pub fn gate_ids(&self) -> [ParamId; 2] {
        [self.layout.recal.gate1, self.layout.recal.gate2]
    }

    /// Ids of the node-embedding weight rows fed by the `x`, `y` coordinates.
    pub fn embed_weight_id(&self) -> ParamId {
        self.layout.embed_w
    }

    /// Same layout over a different store of identical shapes.
    pub fn with_store(&self, store: ParamStore) -> Result<Self> {
        let same = store.len() == self.store.len()
            && store.iter().zip(self.store.iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
        if !same {
            return Err(Error::Contract("parameter store does not match the model layout".into()));
        }
        Ok(Self { config: self.config.clone(), store, layout: self.layout.clone() })
    }

    pub fn decoder_ids(&self) -> [ParamId; 4] {
        [self.layout.dec1_w, self.layout.dec1_b, self.layout.dec2_w, self.layout.dec2_b]
    }
}

/// Where the quadtree of a forward pass comes from.
#[derive(Clone, Copy, Debug)]
pub enum TreeSource<'a> {
    /// Grown from the predicted incoherence scores.
    Predicted,
    /// Grown from ground-truth incoherence (teacher forcing).
    GroundTruth(&'a MaskGrid),
    /// A fixed tree, labels ignored.
    Fixed(&'a Quadtree),
    /// No refinement nodes.
    Empty,
}

/// Graph handles and discrete structure of one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// `[196, 1]` coarse probabilities.
    pub coarse: Var,
    /// `[196, 1]` and `[784, 1]` incoherence scores.
    pub incoherence: [Var; 2],
    pub tree: Quadtree,
    pub sequence: NodeSequence,
    /// `[len, 1]` decoded label per sequence entry.
    pub labels: Var,
    /// Every attention weight matrix computed on the way, recalibration first.
    pub attention: Vec<Var>,
}

fn conv_head(g: &mut Graph, store: &ParamStore, convs: &[Conv], x: Var, s: usize) -> Result<Var> {
    let mut cur = x;
    for (k, conv) in convs.iter().enumerate() {
        let y = conv.forward(g, store, cur, s, s)?;
        cur = if k + 1 == convs.len() { g.sigmoid(y) } else { g.relu(y) };
    }
    Ok(cur)
}

/// 14×14 coarse mask probabilities, `[196, 1]`.
pub fn coarse_head(g: &mut Graph, params: &ModelParams, roi: &RoiFeatureSet) -> Result<Var> {
    conv_head(g, &params.store, &params.layout.coarse, roi.grids[1], side(1))
}

/// Incoherence scores at level 1 or 2, `[side², 1]`.
pub fn incoherence_head(g: &mut Graph, params: &ModelParams, roi: &RoiFeatureSet, level: u8) -> Result<Var> {
    if !(1..=2).contains(&level) {
        return Err(Error::Contract(format!("incoherence head exists for levels 1 and 2, not {level}")));
    }
    let convs = &params.layout.incoherence[level as usize - 1];
    conv_head(g, &params.store, convs, roi.grids[level as usize], side(level))
}

/// Per-entry embedding `[len, D]` from RoI features, the bilinearly sampled
/// coarse probability, normalized position and level.
pub fn encode_nodes(
    g: &mut Graph,
    params: &ModelParams,
    seq: &NodeSequence,
    roi: &RoiFeatureSet,
    coarse: Var,
) -> Result<Var> {
    for e in seq.entries() {
        let s = side(e.level);
        if e.cell.0 >= s || e.cell.1 >= s {
            return Err(Error::Contract(format!("entry cell {:?} is off the level-{} grid", e.cell, e.level)));
        }
    }
    let stacked = g.concat_rows(&roi.grids)?;
    let rows: Vec<usize> = seq.entries().iter().map(|e| e.feature_slot()).collect();
    let feats = g.gather(stacked, Rc::new(Taps::select(g.value(stacked).dims2()?.0, &rows)))?;

    let positions = EntryPosition::of(seq);
    let pts: Vec<(f64, f64)> =
        positions.iter().map(|p| (p.y as f64 / 4.0 - 0.5, p.x as f64 / 4.0 - 0.5)).collect();
    let coarse_at = g.gather(coarse, Rc::new(bilinear_taps(side(1), side(1), &pts)))?;

    let mut meta = Vec::with_capacity(positions.len() * 3);
    for p in &positions {
        meta.extend_from_slice(&[p.x / 56.0, p.y / 56.0, p.level as f32 / 3.0]);
    }
    let meta = g.constant(Tensor::new(&[positions.len(), 3], meta)?);
    let x = g.concat_cols(&[feats, coarse_at, meta])?;
    let w = g.param(&params.store, params.layout.embed_w);
    let b = g.param(&params.store, params.layout.embed_b);
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, b)
}

/// Single-head self-attention followed by a gated residual:
/// `X' = X ⊙ sigmoid(relu(A·G1)·G2) + A` with `A = softmax(QKᵀ/√D)·V`.
/// Returns the output and the attention weight matrix.
pub fn channel_recalibrate(g: &mut Graph, params: &ModelParams, x: Var) -> Result<(Var, Var)> {
    let r = &params.layout.recal;
    let st = &params.store;
    let d = g.value(x).dims2()?.1;
    let (wq, wk, wv) = (g.param(st, r.wq), g.param(st, r.wk), g.param(st, r.wv));
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let logits = g.matmul_t(q, k)?;
    let logits = g.scale(logits, 1.0 / libm::sqrtf(d as f32));
    let weights = g.softmax_rows(logits)?;
    let a = g.matmul(weights, v)?;
    let (g1, g2) = (g.param(st, r.gate1), g.param(st, r.gate2));
    let hidden = g.matmul(a, g1)?;
    let hidden = g.relu(hidden);
    let gate = g.matmul(hidden, g2)?;
    let gate = g.sigmoid(gate);
    let gated = g.mul(x, gate)?;
    Ok((g.add(gated, a)?, weights))
}

/// Per-head `[len, len]` bias matrices gathered from the learned table.
pub fn relative_position_bias(g: &mut Graph, params: &ModelParams, positions: &[EntryPosition]) -> Result<Vec<Var>> {
    let heads = params.config.heads;
    let len = positions.len();
    let buckets = relative_buckets(positions);
    let table = g.param(&params.store, params.layout.position_bias);
    let flat = g.reshape(table, &[heads * POSITION_BUCKETS, 1])?;
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut b = TapsBuilder::new(heads * POSITION_BUCKETS);
        for &k in &buckets {
            b.push(h * POSITION_BUCKETS + k, 1.0);
            b.finish_row();
        }
        let col = g.gather(flat, Rc::new(b.build()))?;
        out.push(g.reshape(col, &[len, len])?);
    }
    Ok(out)
}

/// Pre-norm transformer layers with additive per-head attention bias.
/// Appends every attention weight matrix to `attention`.
pub fn sequence_encoder(
    g: &mut Graph,
    params: &ModelParams,
    x: Var,
    bias: &[Var],
    attention: &mut Vec<Var>,
) -> Result<Var> {
    let st = &params.store;
    let (d, heads) = (params.config.d_model, params.config.heads);
    let dh = d / heads;
    let scale = 1.0 / libm::sqrtf(dh as f32);
    let mut x = x;
    for layer in &params.layout.layers {
        let (s1, b1) = (g.param(st, layer.ln1_scale), g.param(st, layer.ln1_shift));
        let h = g.layer_norm_rows(x, s1, b1, LN_EPS)?;
        let (wq, wk, wv, wo) = (g.param(st, layer.wq), g.param(st, layer.wk), g.param(st, layer.wv), g.param(st, layer.wo));
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let logits = g.matmul_t(qh, kh)?;
            let logits = g.scale(logits, scale);
            let logits = g.add(logits, bias[hd])?;
            let w = g.softmax_rows(logits)?;
            attention.push(w);
            outs.push(g.matmul(w, vh)?);
        }
        let cat = g.concat_cols(&outs)?;
        let attn = g.matmul(cat, wo)?;
        x = g.add(x, attn)?;

        let (s2, b2) = (g.param(st, layer.ln2_scale), g.param(st, layer.ln2_shift));
        let h = g.layer_norm_rows(x, s2, b2, LN_EPS)?;
        let (w1, bb1) = (g.param(st, layer.ffn1_w), g.param(st, layer.ffn1_b));
        let f = g.matmul(h, w1)?;
        let f = g.add_row_bias(f, bb1)?;
        let f = g.relu(f);
        let (w2, bb2) = (g.param(st, layer.ffn2_w), g.param(st, layer.ffn2_b));
        let f = g.matmul(f, w2)?;
        let f = g.add_row_bias(f, bb2)?;
        x = g.add(x, f)?;
    }
    Ok(x)
}

/// Final layer norm, then a two-layer MLP to one probability per entry, `[len, 1]`.
pub fn pixel_decode(g: &mut Graph, params: &ModelParams, x: Var) -> Result<Var> {
    let st = &params.store;
    let l = &params.layout;
    let (s, b) = (g.param(st, l.norm_scale), g.param(st, l.norm_shift));
    let x = g.layer_norm_rows(x, s, b, LN_EPS)?;
    let (w1, b1, w2, b2) = (g.param(st, l.dec1_w), g.param(st, l.dec1_b), g.param(st, l.dec2_w), g.param(st, l.dec2_b));
    let h = g.matmul(x, w1)?;
    let h = g.add_row_bias(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    let o = g.add_row_bias(o, b2)?;
    Ok(g.sigmoid(o))
}

fn grid_of(g: &Graph, v: Var, level: u8) -> Result<MaskGrid> {
    MaskGrid::new(level, MaskKind::Probability, g.value(v).data().to_vec())
}

/// Records the full pipeline for one instance on `g`.
pub fn forward_graph(
    g: &mut Graph,
    params: &ModelParams,
    image: &RgbImage,
    bx: &RoiBox,
    source: TreeSource<'_>,
) -> Result<ForwardPass> {
    let pyramid = params.layout.backbone.forward(g, &params.store, image)?;
    let roi = roi_ladder(g, &pyramid, bx, (image.width, image.height))?;
    let coarse = coarse_head(g, params, &roi)?;
    let inc1 = incoherence_head(g, params, &roi, 1)?;
    let inc2 = incoherence_head(g, params, &roi, 2)?;
    g.check_finite()?;

    let cfg = &params.config;
    let tree = match source {
        TreeSource::Predicted => {
            build_quadtree(&grid_of(g, inc1, 1)?, &grid_of(g, inc2, 2)?, cfg.threshold, cfg.node_cap)?
        }
        TreeSource::GroundTruth(gt) => gt_quadtree(gt, cfg.threshold, cfg.node_cap)?,
        TreeSource::Fixed(t) => {
            let cells = t.nodes().iter().map(|n| (n.level, n.cell, n.incoherence_score)).collect();
            Quadtree::from_cells(cells)?
        }
        TreeSource::Empty => Quadtree::empty(),
    };
    let sequence = serialize_sequence(&tree)?;

    let x = encode_nodes(g, params, &sequence, &roi, coarse)?;
    let mut attention = Vec::new();
    let (x, recal_weights) = channel_recalibrate(g, params, x)?;
    attention.push(recal_weights);
    let bias = relative_position_bias(g, params, &EntryPosition::of(&sequence))?;
    let x = sequence_encoder(g, params, x, &bias, &mut attention)?;
    let labels = pixel_decode(g, params, x)?;
    g.check_finite()?;
    Ok(ForwardPass { coarse, incoherence: [inc1, inc2], tree, sequence, labels, attention })
}

/// Materialized inference result.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutput {
    pub coarse: MaskGrid,
    pub incoherence: [MaskGrid; 2],
    /// Tree with `refined_label` set on every node.
    pub tree: Quadtree,
    pub refined: MaskGrid,
    /// Decoded label of every sequence entry, context entries first.
    pub node_labels: Vec<f32>,
}

/// Inference: coarse mask, tree, node labels and the propagated 56×56 mask.
pub fn forward_refine(params: &ModelParams, image: &RgbImage, bx: &RoiBox, source: TreeSource<'_>) -> Result<RefineOutput> {
    let mut g = Graph::new();
    let pass = forward_graph(&mut g, params, image, bx, source)?;
    finish(&g, pass)
}

/// Turns a recorded pass into concrete masks.
pub fn finish(g: &Graph, pass: ForwardPass) -> Result<RefineOutput> {
    let coarse = grid_of(g, pass.coarse, 1)?;
    let incoherence = [grid_of(g, pass.incoherence[0], 1)?, grid_of(g, pass.incoherence[1], 2)?];
    let node_labels = g.value(pass.labels).data().to_vec();
    let mut tree = pass.tree;
    let mut per_node = vec![0.0; tree.len()];
    for (e, &l) in pass.sequence.entries().iter().zip(&node_labels).skip(CONTEXT_LEN) {
        if let EntrySource::Node(k) = e.source {
            per_node[k] = l;
        }
    }
    tree.set_labels(&per_node)?;
    let refined = propagate_labels(&coarse, &tree)?;
    Ok(RefineOutput { coarse, incoherence, tree, refined, node_labels })
}
