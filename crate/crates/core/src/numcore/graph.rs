use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{add_into, axpy, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, sigmoid};
use super::{ParamId, ParamStore, Tensor, BCE_CLAMP};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse row-mixing table: output row `r` is `Σ weight·input[index]` over
/// the taps of `r`. Bilinear sampling, nearest upsampling, row gathers and
/// im2col are all expressed with it.
#[derive(Clone, Debug, PartialEq)]
pub struct Taps {
    offsets: Vec<u32>,
    index: Vec<u32>,
    weight: Vec<f32>,
    input_rows: usize,
}

impl Taps {
    pub fn output_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn input_rows(&self) -> usize {
        self.input_rows
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let (lo, hi) = (self.offsets[r] as usize, self.offsets[r + 1] as usize);
        self.index[lo..hi].iter().zip(&self.weight[lo..hi]).map(|(&i, &w)| (i as usize, w))
    }

    /// Pure gather: output row `r` copies input row `rows[r]`.
    pub fn select(input_rows: usize, rows: &[usize]) -> Self {
        let mut b = TapsBuilder::new(input_rows);
        for &r in rows {
            b.push(r, 1.0);
            b.finish_row();
        }
        b.build()
    }
}

pub struct TapsBuilder {
    taps: Taps,
}

impl TapsBuilder {
    pub fn new(input_rows: usize) -> Self {
        Self { taps: Taps { offsets: vec![0], index: Vec::new(), weight: Vec::new(), input_rows } }
    }

    pub fn push(&mut self, row: usize, weight: f32) {
        assert!(row < self.taps.input_rows, "tap row {row} out of range");
        self.taps.index.push(row as u32);
        self.taps.weight.push(weight);
    }

    pub fn finish_row(&mut self) {
        self.taps.offsets.push(self.taps.index.len() as u32);
    }

    pub fn build(self) -> Taps {
        self.taps
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, rstd: Vec<f32> },
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Gather { x: Var, taps: Rc<Taps> },
    BceMean { p: Var, target: Vec<f32> },
    L1Mean { p: Var, target: Vec<f32> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather",
            Op::BceMean { .. } => "bce_mean",
            Op::L1Mean { .. } => "l1_mean",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Define-by-run computation record. Nodes are appended in execution order,
/// which is a topological order; backward walks it in reverse once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    first_nonfinite: Option<usize>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f32>>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter that took part in the graph.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to any node that required one.
    pub fn var(&self, v: Var) -> Option<&[f32]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(parameter name, gradient)` for every parameter that took part in the graph.
    pub fn named<'a>(&'a self, store: &'a ParamStore) -> Vec<(&'a str, &'a Tensor)> {
        store
            .ids()
            .filter_map(|id| self.param(id).map(|g| (store.name(id), g)))
            .collect()
    }
}

fn mismatch(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {:?} and {:?}", a.shape(), b.shape()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(self.nodes.len());
        }
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First node whose forward value contained NaN or ±Inf.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            None => Ok(()),
            Some(i) => Err(Error::Numerical(format!(
                "non-finite value produced by node {i} ({})",
                self.nodes[i].op.name()
            ))),
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient but is not a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf holding a copy of a stored parameter. Repeated calls with the same
    /// id return the same node so fan-out gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (ta.dims2()?, tb.dims2()?);
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (ta.dims2()?, tb.dims2()?);
        if k != k2 {
            return Err(mismatch("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulT(a, b), rg))
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = tx.dims2()?;
        if tb.numel() != n {
            return Err(mismatch("add_row_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            add_into(tb.data(), row);
        }
        let t = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRowBias(x, bias), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let tx = self.value(x);
        Tensor::new(tx.shape(), tx.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let t = self.map(x, |v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let t = self.map(x, |v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.map(x, f32::abs);
        let rg = self.rg(x);
        self.push(t, Op::Abs(x), rg)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, n) = tx.dims2()?;
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SoftmaxRows(x), rg))
    }

    /// Per-row standardization followed by a learned scale and shift.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = tx.dims2()?;
        if tg.numel() != n || tb.numel() != n {
            return Err(mismatch("layer_norm_rows", tx, tg));
        }
        let mut out = vec![0.0; m * n];
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for (row, o) in tx.data().chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let rstd = 1.0 / libm::sqrtf(var + eps);
            for (j, ov) in o.iter_mut().enumerate() {
                *ov = (row[j] - mean) * rstd * tg.data()[j] + tb.data()[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::new(&[m, n], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNormRows { x, gamma, beta, mean: means, rstd: rstds };
        Ok(self.push(t, op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s: f64 = tx.data().iter().map(|&v| v as f64).sum();
        let m = s / tx.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m as f32), Op::Mean(x), rg)
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != m {
                return Err(mismatch("concat_cols", self.value(parts[0]), self.value(p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Vertical stacking of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2()?.1;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.dims2()?.1 != n {
                return Err(mismatch("concat_rows", self.value(parts[0]), t));
            }
            out.extend_from_slice(t.data());
        }
        let m = out.len() / n;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::Dimension(format!(
                "slice_cols: columns {start}..{} out of range for shape {:?}",
                start + len,
                tx.shape()
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for row in tx.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Mixes rows of an `[r, c]` matrix through `taps`, producing `[taps.output_rows(), c]`.
    pub fn gather(&mut self, x: Var, taps: Rc<Taps>) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        if r != taps.input_rows() {
            return Err(Error::Dimension(format!(
                "gather: taps expect {} input rows, got shape {:?}",
                taps.input_rows(),
                tx.shape()
            )));
        }
        let rows = taps.output_rows();
        let mut out = vec![0.0; rows * c];
        let src = tx.data();
        for (o, dst) in out.chunks_mut(c).enumerate() {
            for (i, w) in taps.row(o) {
                axpy(w, &src[i * c..(i + 1) * c], dst);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[rows, c], out)?, Op::Gather { x, taps }, rg))
    }

    /// Mean binary cross-entropy of probabilities `p` against fixed targets,
    /// with `p` clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_mean(&mut self, p: Var, target: &[f32]) -> Result<Var> {
        let tp = self.value(p);
        if tp.numel() != target.len() {
            return Err(Error::Dimension(format!(
                "bce_mean: {} predictions vs {} targets",
                tp.numel(),
                target.len()
            )));
        }
        let mut s = 0.0f64;
        for (&pv, &tv) in tp.data().iter().zip(target) {
            let q = (pv as f64).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let t = tv as f64;
            s -= t * libm::log(q) + (1.0 - t) * libm::log(1.0 - q);
        }
        let loss = (s / target.len() as f64) as f32;
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(loss), Op::BceMean { p, target: target.to_vec() }, rg))
    }

    /// Mean absolute error of `p` against fixed targets.
    pub fn l1_mean(&mut self, p: Var, target: &[f32]) -> Result<Var> {
        let tp = self.value(p);
        if tp.numel() != target.len() {
            return Err(Error::Dimension(format!(
                "l1_mean: {} predictions vs {} targets",
                tp.numel(),
                target.len()
            )));
        }
        let s: f64 = tp.data().iter().zip(target).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
        let loss = (s / target.len() as f64) as f32;
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(loss), Op::L1Mean { p, target: target.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients add up across fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            if let Some(bad) = dy.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at node {idx} ({}), element {bad}",
                    self.nodes[idx].op.name()
                )));
            }
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let mut params = vec![None; self.param_vars.len()];
        for (pid, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                let shape = self.value(*v).shape();
                let g = grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.value(*v).numel()]);
                params[pid] = Some(Tensor::new(shape, g)?);
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.rg(v) {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(g);
    }

    fn propagate(&self, idx: usize, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| matmul_nt_acc(dy, bd, g, m, n, k));
                self.accumulate(grads, *b, |g| matmul_tn_acc(ad, dy, g, m, k, n));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().0;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| matmul_acc(dy, bd, g, m, n, k));
                self.accumulate(grads, *b, |g| matmul_tn_acc(dy, ad, g, m, n, k));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(dy, g));
                self.accumulate(grads, *b, |g| add_into(dy, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| add_into(dy, g));
                self.accumulate(grads, *b, |g| axpy(-1.0, dy, g));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| {
                    for ((gv, &d), &bv) in g.iter_mut().zip(dy).zip(bd) {
                        *gv += d * bv;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((gv, &d), &av) in g.iter_mut().zip(dy).zip(ad) {
                        *gv += d * av;
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                let n = self.value(*b).numel();
                self.accumulate(grads, *x, |g| add_into(dy, g));
                self.accumulate(grads, *b, |g| {
                    for row in dy.chunks(n) {
                        add_into(row, g);
                    }
                });
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, |g| axpy(*c, dy, g)),
            Op::AddScalar(x) => self.accumulate(grads, *x, |g| add_into(dy, g)),
            Op::Sigmoid(x) => self.accumulate(grads, *x, |g| {
                for ((gv, &d), &s) in g.iter_mut().zip(dy).zip(y) {
                    *gv += d * s * (1.0 - s);
                }
            }),
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for ((gv, &d), &v) in g.iter_mut().zip(dy).zip(xd) {
                        if v > 0.0 {
                            *gv += d;
                        }
                    }
                })
            }
            Op::Abs(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for ((gv, &d), &v) in g.iter_mut().zip(dy).zip(xd) {
                        if v > 0.0 {
                            *gv += d;
                        } else if v < 0.0 {
                            *gv -= d;
                        }
                    }
                })
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.dims2().unwrap().1;
                self.accumulate(grads, *x, |g| {
                    for ((gr, dr), yr) in g.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                        let inner = dot(dr, yr);
                        for ((gv, &d), &s) in gr.iter_mut().zip(dr).zip(yr) {
                            *gv += s * (d - inner);
                        }
                    }
                })
            }
            Op::LayerNormRows { x, gamma, beta, mean, rstd } => {
                let n = node.value.dims2().unwrap().1;
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let xhat = |i: usize, j: usize| (xd[i * n + j] - mean[i]) * rstd[i];
                self.accumulate(grads, *gamma, |g| {
                    for (i, dr) in dy.chunks(n).enumerate() {
                        for (j, gv) in g.iter_mut().enumerate() {
                            *gv += dr[j] * xhat(i, j);
                        }
                    }
                });
                self.accumulate(grads, *beta, |g| {
                    for dr in dy.chunks(n) {
                        add_into(dr, g);
                    }
                });
                self.accumulate(grads, *x, |g| {
                    let mut dxhat = vec![0.0f32; n];
                    for (i, (gr, dr)) in g.chunks_mut(n).zip(dy.chunks(n)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            dxhat[j] = dr[j] * gd[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat(i, j);
                        }
                        m1 /= n as f32;
                        m2 /= n as f32;
                        for j in 0..n {
                            gr[j] += rstd[i] * (dxhat[j] - m1 - xhat(i, j) * m2);
                        }
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |g| g.iter_mut().for_each(|v| *v += dy[0])),
            Op::Mean(x) => {
                let scale = dy[0] / self.value(*x).numel() as f32;
                self.accumulate(grads, *x, |g| g.iter_mut().for_each(|v| *v += scale))
            }
            Op::ConcatCols(parts) => {
                let n = node.value.dims2().unwrap().1;
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    self.accumulate(grads, p, |g| {
                        for (gr, dr) in g.chunks_mut(w).zip(dy.chunks(n)) {
                            add_into(&dr[off..off + w], gr);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |g| add_into(&dy[off..off + len], g));
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).dims2().unwrap().1;
                let w = node.value.dims2().unwrap().1;
                self.accumulate(grads, *x, |g| {
                    for (gr, dr) in g.chunks_mut(n).zip(dy.chunks(w)) {
                        add_into(dr, &mut gr[*start..*start + w]);
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |g| add_into(dy, g)),
            Op::Gather { x, taps } => {
                let c = node.value.dims2().unwrap().1;
                self.accumulate(grads, *x, |g| {
                    for (o, dr) in dy.chunks(c).enumerate() {
                        for (i, w) in taps.row(o) {
                            axpy(w, dr, &mut g[i * c..(i + 1) * c]);
                        }
                    }
                });
            }
            Op::BceMean { p, target } => {
                let pd = self.value(*p).data();
                let inv = dy[0] as f64 / target.len() as f64;
                self.accumulate(grads, *p, |g| {
                    for ((gv, &pv), &tv) in g.iter_mut().zip(pd).zip(target) {
                        let q = pv as f64;
                        if q > BCE_CLAMP && q < 1.0 - BCE_CLAMP {
                            let t = tv as f64;
                            *gv += ((-t / q + (1.0 - t) / (1.0 - q)) * inv) as f32;
                        }
                    }
                });
            }
            Op::L1Mean { p, target } => {
                let pd = self.value(*p).data();
                let inv = dy[0] / target.len() as f32;
                self.accumulate(grads, *p, |g| {
                    for ((gv, &pv), &tv) in g.iter_mut().zip(pd).zip(target) {
                        if pv > tv {
                            *gv += inv;
                        } else if pv < tv {
                            *gv -= inv;
                        }
                    }
                });
            }
        }
    }

    /// Every recorded variable in execution order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// Which side of its non-differentiable point every piecewise op input
    /// lies on: ReLU and abs inputs, L1 residual signs and BCE clamp states.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<i8> {
        let sign = |v: f32| (v > 0.0) as i8 - (v < 0.0) as i8;
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::Abs(x) => out.extend(self.value(*x).data().iter().map(|&v| sign(v))),
                Op::L1Mean { p, target } => {
                    out.extend(self.value(*p).data().iter().zip(target).map(|(&a, &b)| sign(a - b)))
                }
                Op::BceMean { p, .. } => out.extend(self.value(*p).data().iter().map(|&v| {
                    let q = v as f64;
                    (q > BCE_CLAMP && q < 1.0 - BCE_CLAMP) as i8
                })),
                _ => {}
            }
        }
        out
    }

    /// Human-readable op name of a node, used in error messages.
    pub fn op_name(&self, v: Var) -> String {
        String::from(self.nodes[v.0].op.name())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0f32;
    for v in row.iter_mut() {
        *v = libm::expf(*v - max);
        s += *v;
    }
    let inv = 1.0 / s;
    row.iter_mut().for_each(|v| *v *= inv);
}
