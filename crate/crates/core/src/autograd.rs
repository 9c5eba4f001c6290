//! Tape-based reverse-mode differentiation for the handful of operations the
//! detection heads need.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order, so [`Graph::backward`] is a single reverse sweep.
//! Gradients accumulate (`+=`): a parameter used by several paths receives the
//! sum of their contributions.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::param::{GradMap, ParamStore, Parameter};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    Relu(Var),
    LinComb(Vec<(Var, f64)>),
    Reshape(Var),
    SelectRows { x: Var, rows: Vec<usize> },
    SumAll(Var),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SmoothL1 { pred: Var, diff: Vec<f64>, beta: f64 },
    RoiPool { feature: Var, taps: Vec<[(usize, f64); 4]>, channels: usize, plane: usize, cell: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation over tensors and parameters.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    per_node: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient with respect to any node that requires grad; `None` when no
    /// path reaches it.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.per_node.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Gradient for every parameter in `store`; parameters the loss does not
    /// reach get zeros.
    pub fn to_param_map(&self, store: &ParamStore) -> GradMap {
        let by_name: HashMap<&str, Var> = self.params.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        store
            .iter()
            .map(|p| {
                let g = by_name
                    .get(p.name.as_str())
                    .and_then(|v| self.wrt(*v))
                    .map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec);
                (p.name.clone(), g)
            })
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is not tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (exposed through [`Gradients::wrt`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The graph's leaf for `param`; repeated calls return the same node so that
    /// every use accumulates into one gradient.
    pub fn param(&mut self, param: &Parameter) -> Var {
        if let Some(&v) = self.params.get(&param.name) {
            return v;
        }
        let v = self.input(param.tensor.clone());
        self.params.insert(param.name.clone(), v);
        v
    }

    /// A copy of `var`'s value with no gradient path back to it.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.nodes[var.0].value.clone();
        self.constant(value)
    }

    /// `x [N, D_in] * w [D_in, D_out] + b [D_out]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::dim(
                "fully_connected",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(n * dout);
        let bias = self.value(b).data();
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), false, &mut out, true);
        let rg = self.grad_of(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Cross-correlation of `x [N, C_in, H, W]` with `k [C_out, C_in, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(x), self.shape(k), self.shape(b));
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || bs != [ks[0]] || stride == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("input {xs:?}, kernel {ks:?}, bias {bs:?}, stride {stride}"),
            ));
        }
        let span_h = (xs[2] + 2 * pad) as isize - ks[2] as isize;
        let span_w = (xs[3] + 2 * pad) as isize - ks[3] as isize;
        if span_h < 0 || span_w < 0 {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {ks:?} with pad {pad} leaves no output on input {xs:?}"),
            ));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ks[0],
            kernel_h: ks[2],
            kernel_w: ks[3],
            stride,
            pad,
            out_h: span_h as usize / stride + 1,
            out_w: span_w as usize / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let ncols = geom.columns();
        let mut res = vec![0.0; geom.out_channels * ncols];
        gemm(
            geom.out_channels,
            geom.patch_len(),
            ncols,
            self.value(k).data(),
            false,
            &cols,
            false,
            &mut res,
            false,
        );
        let plane = geom.out_h * geom.out_w;
        let bias = self.value(b).data();
        let mut out = vec![0.0; geom.batch * geom.out_channels * plane];
        for n in 0..geom.batch {
            for co in 0..geom.out_channels {
                let src = &res[co * ncols + n * plane..][..plane];
                let dst = &mut out[(n * geom.out_channels + co) * plane..][..plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[co];
                }
            }
        }
        let rg = self.grad_of(&[x, k, b]);
        let shape = vec![geom.batch, geom.out_channels, geom.out_h, geom.out_w];
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, k, b, geom, cols }, rg))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.grad_of(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Componentwise sum of equally shaped tensors.
    pub fn elementwise_sum(&mut self, xs: &[Var]) -> Result<Var> {
        let terms: Vec<(Var, f64)> = xs.iter().map(|&v| (v, 1.0)).collect();
        self.linear_combination(&terms)
    }

    /// `sum_i c_i * x_i` over equally shaped tensors.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::dim("elementwise_sum", "empty input list"));
        };
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &(v, c) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::dim(
                    "elementwise_sum",
                    format!("shape {:?} does not match {shape:?}", self.shape(v)),
                ));
            }
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.grad_of(&vars);
        Ok(self.push(Tensor::new(shape, out)?, Op::LinComb(terms.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Views `[N, ...]` as `[N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, vec![n, rest])
    }

    /// Gathers rows (first axis) in the given order; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let n = src.shape()[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim("select_rows", format!("row {bad} out of range for {n} rows")));
        }
        let mut shape = src.shape().to_vec();
        shape[0] = rows.len();
        let data: Vec<f64> = rows.iter().flat_map(|&r| src.row(r).iter().copied()).collect();
        let rg = self.grad_of(&[x]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.grad_of(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`, stabilized by
    /// subtracting each row's maximum. An empty batch yields 0.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: k,
                    row,
                });
            }
            let z = lv.row(row);
            let p = &mut probs[row * k..(row + 1) * k];
            let (lse, _) = log_softmax_into(z, p);
            loss += lse - z[label];
        }
        let mean = if n == 0 { 0.0 } else { loss / n as f64 };
        let rg = self.grad_of(&[logits]);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over elements of the smooth-L1 penalty on `pred - target`.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, beta: f64) -> Result<Var> {
        if beta <= 0.0 || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!("smooth_l1 beta {beta} must be > 0")));
        }
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::dim(
                "smooth_l1",
                format!("prediction {:?} vs target {:?}", pv.shape(), target.shape()),
            ));
        }
        let diff: Vec<f64> = pv.data().iter().zip(target.data()).map(|(p, t)| p - t).collect();
        let total: f64 = diff
            .iter()
            .map(|&d| {
                if d.abs() < beta {
                    0.5 * d * d / beta
                } else {
                    d.abs() - 0.5 * beta
                }
            })
            .sum();
        let mean = if diff.is_empty() { 0.0 } else { total / diff.len() as f64 };
        let rg = self.grad_of(&[pred]);
        Ok(self.push(Tensor::scalar(mean), Op::SmoothL1 { pred, diff, beta }, rg))
    }

    /// Bilinear RoI pooling of `feature [1, C, H, W]` onto an `out x out` grid
    /// per box, sampling once at each bin center with the half-pixel alignment
    /// offset. `spatial_scale` maps image coordinates onto the feature grid.
    /// Box coordinates are constants; only the feature receives gradient.
    pub fn roi_pool(&mut self, feature: Var, boxes: &[BBox], out: usize, spatial_scale: f64) -> Result<Var> {
        let fs = self.shape(feature);
        if fs.len() != 4 || fs[0] != 1 || out == 0 {
            return Err(Error::dim(
                "roi_pool",
                format!("feature {fs:?} (need [1, C, H, W]), out size {out}"),
            ));
        }
        let (c, h, w) = (fs[1], fs[2], fs[3]);
        let plane = h * w;
        let mut taps = Vec::with_capacity(boxes.len() * out * out);
        for b in boxes {
            let x0 = b.x1 * spatial_scale - 0.5;
            let y0 = b.y1 * spatial_scale - 0.5;
            let bin_w = b.width() * spatial_scale / out as f64;
            let bin_h = b.height() * spatial_scale / out as f64;
            for py in 0..out {
                let y = y0 + (py as f64 + 0.5) * bin_h;
                for px in 0..out {
                    let x = x0 + (px as f64 + 0.5) * bin_w;
                    taps.push(bilinear_taps(y, x, h, w));
                }
            }
        }
        let fd = self.value(feature).data();
        let cell = out * out;
        let mut data = vec![0.0; boxes.len() * c * cell];
        for n in 0..boxes.len() {
            let bt = &taps[n * cell..(n + 1) * cell];
            for ch in 0..c {
                let src = &fd[ch * plane..(ch + 1) * plane];
                let dst = &mut data[(n * c + ch) * cell..][..cell];
                for (d, t) in dst.iter_mut().zip(bt) {
                    *d = t.iter().map(|&(i, wgt)| wgt * src[i]).sum();
                }
            }
        }
        let rg = self.grad_of(&[feature]);
        Ok(self.push(
            Tensor::new(vec![boxes.len(), c, out, out], data)?,
            Op::RoiPool {
                feature,
                taps,
                channels: c,
                plane,
                cell,
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let mut params: Vec<(String, Var)> = self.params.iter().map(|(n, v)| (n.clone(), *v)).collect();
        params.sort();
        Ok(Gradients {
            per_node: grads,
            params,
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[1];
                if needs(*x) {
                    let dx = slot(grads, *x, n * din);
                    gemm(n, dout, din, g, false, self.value(*w).data(), true, dx, true);
                }
                if needs(*w) {
                    let dw = slot(grads, *w, din * dout);
                    gemm(din, n, dout, self.value(*x).data(), true, g, false, dw, true);
                }
                if needs(*b) {
                    let db = slot(grads, *b, dout);
                    for row in g.chunks_exact(dout) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b, geom, cols } => {
                let plane = geom.out_h * geom.out_w;
                let ncols = geom.columns();
                // Regroup upstream gradient from [N, C_out, P] into [C_out, N*P].
                let mut dres = vec![0.0; geom.out_channels * ncols];
                for n in 0..geom.batch {
                    for co in 0..geom.out_channels {
                        dres[co * ncols + n * plane..][..plane]
                            .copy_from_slice(&g[(n * geom.out_channels + co) * plane..][..plane]);
                    }
                }
                if needs(*k) {
                    let dk = slot(grads, *k, geom.out_channels * geom.patch_len());
                    gemm(geom.out_channels, ncols, geom.patch_len(), &dres, false, cols, true, dk, true);
                }
                if needs(*b) {
                    let db = slot(grads, *b, geom.out_channels);
                    for (co, d) in db.iter_mut().enumerate() {
                        *d += dres[co * ncols..(co + 1) * ncols].iter().sum::<f64>();
                    }
                }
                if needs(*x) {
                    let mut dcols = vec![0.0; geom.patch_len() * ncols];
                    gemm(
                        geom.patch_len(),
                        geom.out_channels,
                        ncols,
                        self.value(*k).data(),
                        true,
                        &dres,
                        false,
                        &mut dcols,
                        false,
                    );
                    let len = self.value(*x).len();
                    col2im(&dcols, geom, slot(grads, *x, len));
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let xv = self.value(*x).data();
                    let dx = slot(grads, *x, xv.len());
                    for ((d, &v), &gv) in dx.iter_mut().zip(xv).zip(g) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    if needs(v) {
                        let dx = slot(grads, v, g.len());
                        for (d, &gv) in dx.iter_mut().zip(g) {
                            *d += c * gv;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    for (d, &gv) in slot(grads, *x, g.len()).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if needs(*x) {
                    let xv = self.value(*x);
                    let width = xv.len() / xv.shape()[0].max(1);
                    let dx = slot(grads, *x, xv.len());
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, &gv) in dx[r * width..(r + 1) * width].iter_mut().zip(&g[k * width..]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if needs(*x) {
                    let len = self.value(*x).len();
                    for d in slot(grads, *x, len) {
                        *d += g[0];
                    }
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                if needs(*logits) && !labels.is_empty() {
                    let k = probs.len() / labels.len();
                    let scale = g[0] / labels.len() as f64;
                    let dl = slot(grads, *logits, probs.len());
                    for (row, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dl[row * k + j] += scale * (probs[row * k + j] - onehot);
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, diff, beta } => {
                if needs(*pred) && !diff.is_empty() {
                    let scale = g[0] / diff.len() as f64;
                    let dp = slot(grads, *pred, diff.len());
                    for (d, &r) in dp.iter_mut().zip(diff) {
                        let local = if r.abs() < *beta { r / beta } else { r.signum() };
                        *d += scale * local;
                    }
                }
            }
            Op::RoiPool {
                feature,
                taps,
                channels,
                plane,
                cell,
            } => {
                if needs(*feature) {
                    let cell = *cell;
                    let nboxes = taps.len() / cell;
                    let df = slot(grads, *feature, channels * plane);
                    for n in 0..nboxes {
                        let bt = &taps[n * cell..(n + 1) * cell];
                        for ch in 0..*channels {
                            let src = &g[(n * channels + ch) * cell..][..cell];
                            let dst = &mut df[ch * plane..(ch + 1) * plane];
                            for (gv, t) in src.iter().zip(bt) {
                                for &(i, wgt) in t {
                                    dst[i] += wgt * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Writes `softmax(z)` into `p` and returns `(logsumexp(z), max(z))`.
pub(crate) fn log_softmax_into(z: &[f64], p: &mut [f64]) -> (f64, f64) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (pi, &zi) in p.iter_mut().zip(z) {
        *pi = (zi - m).exp();
        s += *pi;
    }
    for pi in p.iter_mut() {
        *pi /= s;
    }
    (m + s.ln(), m)
}

/// Row-wise softmax of a `[N, K]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut out = vec![0.0; logits.len()];
    for (z, p) in logits.data().chunks_exact(k.max(1)).zip(out.chunks_exact_mut(k.max(1))) {
        log_softmax_into(z, p);
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// Bilinear interpolation taps at `(y, x)` on an `h x w` grid, zero outside
/// `[-1, h] x [-1, w]` and clamped to the border inside it.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return [(0, 0.0); 4];
    }
    let (y_lo, y_hi, ly) = axis_taps(y.max(0.0), h);
    let (x_lo, x_hi, lx) = axis_taps(x.max(0.0), w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    [
        (y_lo * w + x_lo, hy * hx),
        (y_lo * w + x_hi, hy * lx),
        (y_hi * w + x_lo, ly * hx),
        (y_hi * w + x_hi, ly * lx),
    ]
}

fn axis_taps(v: f64, n: usize) -> (usize, usize, f64) {
    let lo = v.floor() as usize;
    if lo >= n - 1 {
        (n - 1, n - 1, 0.0)
    } else {
        (lo, lo + 1, v - lo as f64)
    }
}
