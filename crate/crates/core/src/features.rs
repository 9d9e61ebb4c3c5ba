//! Tiny trainable feature pyramid and bilinear RoI sampling.
//!
//! Feature maps are `[h·w, C]` matrices in row-major spatial order, so every
//! spatial resampling (im2col, nearest upsampling, RoI bilinear sampling) is a
//! [`Taps`] gather and differentiates through the same rule.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;

use crate::numcore::{Graph, ParamId, ParamStore, Taps, TapsBuilder, Tensor, Var};
use crate::quadtree::LEVEL_SIDES;
use crate::{Error, Result};

/// Strides of the four pyramid levels, finest first.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const DEFAULT_CHANNELS: usize = 16;

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let k = (y * self.width + x) * 3;
        [self.pixels[k], self.pixels[k + 1], self.pixels[k + 2]]
    }

    /// `[h·w, 3]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        Tensor::new(&[self.width * self.height, 3], data).expect("non-empty image")
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut pixels = self.pixels.clone();
        for row in pixels.chunks_mut(self.width * 3) {
            let w = self.width;
            for x in 0..w / 2 {
                for c in 0..3 {
                    row.swap(x * 3 + c, (w - 1 - x) * 3 + c);
                }
            }
        }
        RgbImage { width: self.width, height: self.height, pixels }
    }
}

/// Axis-aligned box in image pixels, `x0 < x1`, `y0 < y1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl RoiBox {
    pub fn new(x0: f32, y0: f32, x1: f32, y1: f32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f32 {
        self.y1 - self.y0
    }

    /// Intersection with `[0, w] × [0, h]`; errors when nothing of positive area is left.
    pub fn clipped(&self, w: usize, h: usize) -> Result<RoiBox> {
        let c = RoiBox {
            x0: self.x0.clamp(0.0, w as f32),
            y0: self.y0.clamp(0.0, h as f32),
            x1: self.x1.clamp(0.0, w as f32),
            y1: self.y1.clamp(0.0, h as f32),
        };
        if !(c.x1 > c.x0 && c.y1 > c.y0) {
            return Err(Error::Input(format!("box {self:?} has no area inside the {w}×{h} image")));
        }
        Ok(c)
    }

    /// Mirror image under a horizontal flip of an image of width `w`.
    pub fn flip_horizontal(&self, w: usize) -> RoiBox {
        RoiBox { x0: w as f32 - self.x1, y0: self.y0, x1: w as f32 - self.x0, y1: self.y1 }
    }
}

/// One spatial feature map.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub values: Var,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

/// Four maps at strides 4, 8, 16, 32.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [FeatureMap; 4],
}

/// Per-instance RoI grids of sides 7, 14, 28, 56, each `[side², C]`.
#[derive(Clone, Copy, Debug)]
pub struct RoiFeatureSet {
    pub grids: [Var; 4],
}

/// `k×k` convolution with zero padding `k/2`, weights `[k·k·Cin, Cout]`
/// in `(ky, kx, cin)` row order.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        let weight = store.add(&format!("{name}.weight"), he_uniform(rng, &[fan_in, cout], fan_in));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, kernel, stride }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    /// Applies the convolution to an `[h·w, Cin]` map, without activation.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize) -> Result<Var> {
        let cin = g.value(x).dims2()?.1;
        let (ho, wo) = self.output_size(h, w);
        let cols = if self.kernel == 1 && self.stride == 1 {
            x
        } else {
            let taps = Rc::new(im2col_taps(h, w, self.kernel, self.stride));
            let patches = g.gather(x, taps)?;
            g.reshape(patches, &[ho * wo, self.kernel * self.kernel * cin])?
        };
        let wv = g.param(store, self.weight);
        let bv = g.param(store, self.bias);
        let y = g.matmul(cols, wv)?;
        g.add_row_bias(y, bv)
    }
}

/// Uniform init with bound `sqrt(6 / fan_in)`.
pub fn he_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = libm::sqrtf(6.0 / fan_in as f32);
    uniform(rng, shape, bound)
}

/// Uniform init with bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = libm::sqrtf(6.0 / (fan_in + fan_out) as f32);
    uniform(rng, shape, bound)
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("non-empty parameter shape")
}

/// Patch extraction for a `k×k` kernel with zero padding `k/2`. Output row
/// `p·k² + t` holds input pixel `t` of output position `p`, or nothing when
/// the tap falls in the padding.
pub fn im2col_taps(h: usize, w: usize, k: usize, stride: usize) -> Taps {
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let pad = (k / 2) as isize;
    let mut b = TapsBuilder::new(h * w);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad;
                    let ix = (ox * stride + kx) as isize - pad;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        b.push(iy as usize * w + ix as usize, 1.0);
                    }
                    b.finish_row();
                }
            }
        }
    }
    b.build()
}

/// Nearest 2× upsampling from `[hs·ws]` to `[h·w]` with `hs = ceil(h/2)`.
pub fn upsample2_taps(hs: usize, ws: usize, h: usize, w: usize) -> Taps {
    let rows: Vec<usize> = (0..h * w).map(|k| (k / w / 2) * ws + (k % w) / 2).collect();
    Taps::select(hs * ws, &rows)
}

/// Bilinear interpolation taps over an `h×w` grid at fractional `(y, x)`
/// positions in cell-index units (cell centres at integers). Positions
/// outside the grid clamp to the border.
pub fn bilinear_taps(h: usize, w: usize, points: &[(f64, f64)]) -> Taps {
    let mut b = TapsBuilder::new(h * w);
    for &(y, x) in points {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (libm::floor(y) as usize, libm::floor(x) as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let corners = [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x1, (1.0 - fy) * fx),
            (y1, x0, fy * (1.0 - fx)),
            (y1, x1, fy * fx),
        ];
        for (cy, cx, wgt) in corners {
            if wgt != 0.0 {
                b.push(cy * w + cx, wgt as f32);
            }
        }
        b.finish_row();
    }
    b.build()
}

/// Sample positions of an `side×side` RoI grid on a map with the given
/// stride, in the map's cell-index units, row-major.
pub fn roi_sample_points(bx: &RoiBox, stride: usize, side: usize) -> Vec<(f64, f64)> {
    let s = stride as f64;
    let (x0, y0) = (bx.x0 as f64, bx.y0 as f64);
    let (bw, bh) = (bx.width() as f64, bx.height() as f64);
    let mut pts = Vec::with_capacity(side * side);
    for v in 0..side {
        for u in 0..side {
            let py = y0 + (v as f64 + 0.5) * bh / side as f64;
            let px = x0 + (u as f64 + 0.5) * bw / side as f64;
            pts.push((py / s - 0.5, px / s - 0.5));
        }
    }
    pts
}

/// Bilinear RoI sampling of `map` into a `side×side` grid, `[side², C]`.
/// `image_size` is `(width, height)` and bounds the box before sampling.
pub fn roi_align(g: &mut Graph, map: &FeatureMap, bx: &RoiBox, image_size: (usize, usize), side: usize) -> Result<Var> {
    let clipped = bx.clipped(image_size.0, image_size.1)?;
    let pts = roi_sample_points(&clipped, map.stride, side);
    let taps = Rc::new(bilinear_taps(map.height, map.width, &pts));
    g.gather(map.values, taps)
}

/// Stride-4 stem of two stride-2 convs, three further stride-2 stages and a
/// top-down pathway with 1×1 laterals.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: [Conv; 2],
    pub stages: [Conv; 3],
    pub laterals: [Conv; 4],
    pub channels: usize,
}

impl Backbone {
    pub fn register<R: Rng>(store: &mut ParamStore, rng: &mut R, channels: usize) -> Self {
        let c = channels;
        let stem = [
            Conv::register(store, rng, "backbone.stem0", 3, c, 3, 2),
            Conv::register(store, rng, "backbone.stem1", c, c, 3, 2),
        ];
        let stages = [
            Conv::register(store, rng, "backbone.stage1", c, c, 3, 2),
            Conv::register(store, rng, "backbone.stage2", c, c, 3, 2),
            Conv::register(store, rng, "backbone.stage3", c, c, 3, 2),
        ];
        let laterals = [
            Conv::register(store, rng, "backbone.lateral0", c, c, 1, 1),
            Conv::register(store, rng, "backbone.lateral1", c, c, 1, 1),
            Conv::register(store, rng, "backbone.lateral2", c, c, 1, 1),
            Conv::register(store, rng, "backbone.lateral3", c, c, 1, 1),
        ];
        Self { stem, stages, laterals, channels }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &RgbImage) -> Result<FeaturePyramid> {
        let (h, w) = (image.height, image.width);
        if h < 64 || w < 64 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Input(format!(
                "image is {w}×{h}; both sides must be at least 64 and divisible by 32 (pad to a multiple of 32)"
            )));
        }
        let x = g.constant(image.to_tensor());
        let mut sizes = [(0usize, 0usize); 4];
        let mut bottom_up = Vec::with_capacity(4);

        let (mut cur, mut ch, mut cw) = (x, h, w);
        for conv in &self.stem {
            let y = conv.forward(g, store, cur, ch, cw)?;
            cur = g.relu(y);
            (ch, cw) = conv.output_size(ch, cw);
        }
        sizes[0] = (ch, cw);
        bottom_up.push(cur);
        for (k, conv) in self.stages.iter().enumerate() {
            let y = conv.forward(g, store, cur, ch, cw)?;
            cur = g.relu(y);
            (ch, cw) = conv.output_size(ch, cw);
            sizes[k + 1] = (ch, cw);
            bottom_up.push(cur);
        }

        let mut merged: [Option<Var>; 4] = [None; 4];
        for l in (0..4).rev() {
            let (lh, lw) = sizes[l];
            let lat = self.laterals[l].forward(g, store, bottom_up[l], lh, lw)?;
            merged[l] = Some(match merged.get(l + 1).copied().flatten() {
                None => lat,
                Some(above) => {
                    let (uh, uw) = sizes[l + 1];
                    let up = g.gather(above, Rc::new(upsample2_taps(uh, uw, lh, lw)))?;
                    g.add(lat, up)?
                }
            });
        }
        let levels = core::array::from_fn(|l| FeatureMap {
            values: merged[l].unwrap(),
            height: sizes[l].0,
            width: sizes[l].1,
            stride: PYRAMID_STRIDES[l],
        });
        Ok(FeaturePyramid { levels })
    }
}

/// RoI ladder: the 7×7 grid from stride 32 down to the 56×56 grid from stride 4.
pub fn roi_ladder(g: &mut Graph, pyramid: &FeaturePyramid, bx: &RoiBox, image_size: (usize, usize)) -> Result<RoiFeatureSet> {
    let mut grids = [None; 4];
    for (l, &side) in LEVEL_SIDES.iter().enumerate() {
        let map = &pyramid.levels[3 - l];
        grids[l] = Some(roi_align(g, map, bx, image_size, side)?);
    }
    Ok(RoiFeatureSet { grids: grids.map(Option::unwrap) })
}
