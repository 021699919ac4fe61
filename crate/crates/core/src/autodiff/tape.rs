use std::sync::Arc;
use std::time::{Duration, Instant};

use super::array::DenseArray;
use super::kernels::{self, ConvDims};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape bookkeeping for a batched 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub filters: usize,
    pub dims: ConvDims,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(Error::shape("conv2d", x, w));
        }
        if stride == 0 {
            return Err(Error::Input("conv2d stride must be positive".into()));
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape("conv2d", x, w));
        }
        if !(h + 2 * pad - kh).is_multiple_of(stride) || !(wd + 2 * pad - kw).is_multiple_of(stride) {
            return Err(Error::shape("conv2d (stride does not tile input)", x, w));
        }
        let dims = ConvDims {
            c: x[1],
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        Ok(Self {
            batch: x[0],
            filters: w[0],
            dims,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.dims.oh, self.dims.ow]
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    BiasAdd { x: Var, bias: Var, inner: usize },
    Scale { x: Var, s: Var },
    ScaleConst { x: Var, c: f32 },
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Reshape { x: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f32>, labels: Vec<usize> },
    Sum { x: Var },
    StraightThrough { logits: Var, surrogate_grad: Arc<Vec<f32>> },
}

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f32>>,
    op: Op,
    needs_grad: bool,
    rescale: bool,
}

/// Records operations for one forward pass.
///
/// Leaves created with `trainable = true` receive gradients; everything
/// derived from them is tracked, everything else is treated as a constant.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    profiling: bool,
    rescale_time: Duration,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into the gradient buffer of `param`.
    pub fn accumulate_into(&self, v: Var, param: &mut DenseArray) -> Result<()> {
        match self.get(v) {
            Some(g) => param.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn check_finite(op: &'static str, values: &[f32]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn add_into(slot: &mut Option<Vec<f32>>, g: &[f32]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
        None => *slot = Some(g.to_vec()),
    }
}

fn add_scaled_into(slot: &mut Option<Vec<f32>>, g: &[f32], c: f32) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v * c),
        None => *slot = Some(g.iter().map(|v| v * c).collect()),
    }
}

/// Elements per block of [`dot_blocked`]. Within
/// a block the products are summed in sixteen `f32` lanes; block totals are
/// added in `f64`.
const DOT_BLOCK: usize = 1024;
const DOT_LANES: usize = 16;

fn lanes_total(acc: &[f32; DOT_LANES]) -> f64 {
    acc.iter().map(|&v| f64::from(v)).sum()
}

/// `Σ a·b` over blocks of [`DOT_BLOCK`] elements, in a fixed order.
fn dot_blocked(a: &[f32], b: &[f32]) -> f64 {
    let mut total = 0f64;
    for (ab, bb) in a.chunks(DOT_BLOCK).zip(b.chunks(DOT_BLOCK)) {
        let mut acc = [0f32; DOT_LANES];
        let mut ca = ab.chunks_exact(DOT_LANES);
        let mut cb = bb.chunks_exact(DOT_LANES);
        for (x, y) in (&mut ca).zip(&mut cb) {
            for k in 0..DOT_LANES {
                acc[k] += x[k] * y[k];
            }
        }
        for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
            acc[0] += x * y;
        }
        total += lanes_total(&acc);
    }
    total
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape that accumulates the time spent on rescale nodes (see
    /// [`Tape::mark_rescale`]).
    pub fn profiled() -> Self {
        Self {
            profiling: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        check_finite(name, &value)?;
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            needs_grad,
            rescale: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn leaf(&mut self, array: &DenseArray, trainable: bool) -> Var {
        self.nodes.push(Node {
            shape: array.shape().to_vec(),
            value: array.shared(),
            op: Op::Leaf,
            needs_grad: trainable,
            rescale: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, array: &DenseArray) -> Var {
        self.leaf(array, false)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn array(&self, v: Var) -> DenseArray {
        let n = self.node(v);
        DenseArray::from_shared(n.shape.clone(), Arc::clone(&n.value))
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.value(v)[0]
    }

    pub fn mark_rescale(&mut self, v: Var) {
        self.nodes[v.0].rescale = true;
    }

    pub fn add_rescale_time(&mut self, d: Duration) {
        if self.profiling {
            self.rescale_time += d;
        }
    }

    pub fn is_profiling(&self) -> bool {
        self.profiling
    }

    /// Time spent on rescale work so far, forward and backward.
    pub fn rescale_time(&self) -> Duration {
        self.rescale_time
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::gemm(self.value(a), self.value(b), m, k, n);
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, ng, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let out = kernels::transpose(self.value(x), rows, cols);
        let ng = self.node(x).needs_grad;
        self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }, ng, "transpose")
    }

    /// Hadamard product of two same-shape arrays.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("elementwise_mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Mul { a, b }, ng, "elementwise_mul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Add { a, b }, ng, "add")
    }

    /// Adds `bias[d]` along axis 1 of `x[N×d×…]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.value(bias).len() != sx[1] {
            return Err(Error::shape("add_bias", &sx, self.shape(bias)));
        }
        let d = sx[1];
        let inner: usize = sx[2..].iter().product();
        let b = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[(i / inner) % d])
            .collect();
        let ng = self.node(x).needs_grad || self.node(bias).needs_grad;
        self.push(sx, out, Op::BiasAdd { x, bias, inner }, ng, "add_bias")
    }

    /// Multiplies every entry of `x` by the single-entry array `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * sv).collect();
        let ng = self.node(x).needs_grad || self.node(s).needs_grad;
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, s }, ng, "scale")
    }

    pub fn scale_const(&mut self, x: Var, c: f32) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let ng = self.node(x).needs_grad;
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::ScaleConst { x, c }, ng, "scale_const")
    }

    /// Cross-correlation of `x[N×C×H×W]` with `w[F×C×kh×kw]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        let out = kernels::conv2d_forward(self.value(x), self.value(w), geom.batch, geom.filters, &geom.dims);
        let ng = self.node(x).needs_grad || self.node(w).needs_grad;
        self.push(geom.output_shape(), out, Op::Conv2d { x, w, geom }, ng, "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let ng = self.node(x).needs_grad;
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu { x }, ng, "relu")
    }

    /// Non-overlapping `size×size` max pooling over the last two axes;
    /// trailing rows/columns that do not fill a window are dropped.
    pub fn maxpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(Error::shape("maxpool2d", &s, &[size, size]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / size, w / size);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let i = base + (oy * size + dy) * w + ox * size + dx;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.node(x).needs_grad;
        self.push(vec![s[0], s[1], oh, ow], out, Op::MaxPool { x, argmax }, ng, "maxpool2d")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let n = self.node(x);
        let (value, ng) = (Arc::clone(&n.value), n.needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Reshape { x },
            needs_grad: ng,
            rescale: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Collapses everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let shape = vec![s[0], s[1..].iter().product()];
        self.reshape(x, shape)
    }

    /// Batch-mean cross-entropy of `logits[N×C]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0f32; n * c];
        let mut total = 0.0f64;
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&v| f64::from(v - max).exp()).sum();
            for (j, &v) in row.iter().enumerate() {
                probs[i * c + j] = (f64::from(v - max).exp() / z) as f32;
            }
            total += z.ln() - f64::from(row[labels[i]] - max);
        }
        let loss = (total / n as f64) as f32;
        let ng = self.node(logits).needs_grad;
        self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            ng,
            "softmax_cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).iter().map(|&v| f64::from(v)).sum();
        let ng = self.node(x).needs_grad;
        self.push(vec![1], vec![total as f32], Op::Sum { x }, ng, "sum")
    }

    /// Emits `forward` (same shape as `logits`) but routes the incoming
    /// gradient to `logits` scaled elementwise by `surrogate_grad`.
    pub fn straight_through(&mut self, logits: Var, forward: Vec<f32>, surrogate_grad: Arc<Vec<f32>>) -> Result<Var> {
        let n = self.value(logits).len();
        if forward.len() != n || surrogate_grad.len() != n {
            return Err(Error::shape("straight_through", self.shape(logits), &[forward.len(), surrogate_grad.len()]));
        }
        let ng = self.node(logits).needs_grad;
        let shape = self.shape(logits).to_vec();
        self.push(shape, forward, Op::StraightThrough { logits, surrogate_grad }, ng, "straight_through")
    }

    /// Reverse sweep from a single-entry `loss`. Gradients are returned, not
    /// written anywhere; callers fold them into their parameters.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut rescale_time = Duration::ZERO;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let started = (self.profiling && self.nodes[i].rescale).then(Instant::now);
            self.propagate(i, &g, &mut grads);
            if let Some(t) = started {
                rescale_time += t.elapsed();
            }
            grads[i] = Some(g);
        }
        self.rescale_time += rescale_time;
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let bt = kernels::transpose(self.value(b), k, n);
                    add_into(&mut grads[a.0], &kernels::gemm(g, &bt, m, n, k));
                }
                if wants(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn_acc(&mut db, self.value(a), g, m, k, n);
                    add_into(&mut grads[b.0], &db);
                }
            }
            &Op::Transpose { x, rows, cols } => {
                add_into(&mut grads[x.0], &kernels::transpose(g, cols, rows));
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    let d: Vec<f32> = g.iter().zip(self.value(b)).map(|(g, v)| g * v).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if wants(b) {
                    let d: Vec<f32> = g.iter().zip(self.value(a)).map(|(g, v)| g * v).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            &Op::Add { a, b } => {
                if wants(a) {
                    add_into(&mut grads[a.0], g);
                }
                if wants(b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            &Op::BiasAdd { x, bias, inner } => {
                if wants(x) {
                    add_into(&mut grads[x.0], g);
                }
                if wants(bias) {
                    let d = self.value(bias).len();
                    let mut db = vec![0.0; d];
                    for (j, gv) in g.iter().enumerate() {
                        db[(j / inner) % d] += gv;
                    }
                    add_into(&mut grads[bias.0], &db);
                }
            }
            &Op::Scale { x, s } => {
                let sv = self.value(s)[0];
                if wants(x) {
                    add_scaled_into(&mut grads[x.0], g, sv);
                }
                if wants(s) {
                    let ds = dot_blocked(g, self.value(x));
                    add_into(&mut grads[s.0], &[ds as f32]);
                }
            }
            &Op::ScaleConst { x, c } => add_scaled_into(&mut grads[x.0], g, c),
            Op::Conv2d { x, w, geom } => {
                let mut dx = wants(*x).then(|| vec![0.0; self.value(*x).len()]);
                let mut dw = wants(*w).then(|| vec![0.0; self.value(*w).len()]);
                kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    geom.batch,
                    geom.filters,
                    &geom.dims,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    add_into(&mut grads[x.0], &dx);
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[w.0], &dw);
                }
            }
            &Op::Relu { x } => {
                let out = &self.nodes[i].value;
                let d: Vec<f32> = g.iter().zip(out.iter()).map(|(g, &o)| if o > 0.0 { *g } else { 0.0 }).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    d[src] += gv;
                }
                add_into(&mut grads[x.0], &d);
            }
            &Op::Reshape { x } => add_into(&mut grads[x.0], g),
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let c = self.nodes[logits.0].shape[1];
                let scale = g[0] / labels.len() as f32;
                let mut d: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (row, &l) in labels.iter().enumerate() {
                    d[row * c + l] -= scale;
                }
                add_into(&mut grads[logits.0], &d);
            }
            &Op::Sum { x } => {
                let d = vec![g[0]; self.value(x).len()];
                add_into(&mut grads[x.0], &d);
            }
            Op::StraightThrough { logits, surrogate_grad } => {
                let d: Vec<f32> = g.iter().zip(surrogate_grad.iter()).map(|(g, s)| g * s).collect();
                add_into(&mut grads[logits.0], &d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f32]) -> DenseArray {
        DenseArray::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(&arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = t.constant(&arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = t.matmul(a, i).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0, 3.0, 4.0]);
        let c = t.constant(&arr(&[2, 1], &[5.0, 7.0]));
        let y = t.matmul(i, c).unwrap();
        assert_eq!(t.value(y), &[5.0, 7.0]);
        assert_eq!(t.shape(y), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(&DenseArray::zeros(&[2, 3]));
        let b = t.constant(&DenseArray::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_cases() {
        let mut t = Tape::new();
        let a = t.constant(&arr(&[2], &[2.0, 3.0]));
        let b = t.constant(&arr(&[2], &[4.0, 5.0]));
        let y = t.mul(a, b).unwrap();
        assert_eq!(t.value(y), &[8.0, 15.0]);
        let ones = t.constant(&DenseArray::ones(&[2]));
        let y = t.mul(a, ones).unwrap();
        assert_eq!(t.value(y), &[2.0, 3.0]);
        let zeros = t.constant(&DenseArray::zeros(&[2]));
        let y = t.mul(a, zeros).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0]);
        let c = t.constant(&DenseArray::zeros(&[3]));
        assert!(matches!(t.mul(a, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_sum_of_ones_and_delta_kernel() {
        let mut t = Tape::new();
        let x = t.constant(&DenseArray::ones(&[1, 1, 3, 3]));
        let w = t.constant(&DenseArray::ones(&[1, 1, 3, 3]));
        let y = t.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1]);
        assert_eq!(t.value(y), &[9.0]);

        let img: Vec<f32> = (0..2 * 5 * 4).map(|v| v as f32 * 0.5 - 3.0).collect();
        let x = t.constant(&arr(&[1, 2, 5, 4], &img));
        // two filters, each picking the centre of one input channel
        let mut k = vec![0.0; 2 * 2 * 9];
        k[4] = 1.0;
        k[(2 + 1) * 9 + 4] = 1.0;
        let w = t.constant(&arr(&[2, 2, 3, 3], &k));
        let y = t.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(t.value(y), img.as_slice());
    }

    #[test]
    fn conv_rejects_untiled_stride() {
        let mut t = Tape::new();
        let x = t.constant(&DenseArray::ones(&[1, 1, 4, 4]));
        let w = t.constant(&DenseArray::ones(&[1, 1, 3, 3]));
        assert!(matches!(t.conv2d(x, w, 2, 0), Err(Error::Shape { .. })));
        let w5 = t.constant(&DenseArray::ones(&[1, 1, 5, 5]));
        assert!(t.conv2d(x, w5, 1, 0).is_err());
        assert!(t.conv2d(x, w5, 1, 1).is_ok());
    }

    #[test]
    fn relu_and_uniform_cross_entropy() {
        let mut t = Tape::new();
        let x = t.constant(&arr(&[3], &[-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 2.0]);

        let logits = t.constant(&DenseArray::full(&[2, 7], 0.3));
        let l = t.softmax_cross_entropy(logits, &[0, 6]).unwrap();
        assert!((t.scalar(l) - (7.0f32).ln()).abs() < 1e-6);
        assert!(matches!(t.softmax_cross_entropy(logits, &[0, 7]), Err(Error::Input(_))));
    }

    #[test]
    fn maxpool_routes_gradient_to_max() {
        let mut t = Tape::new();
        let x = t.leaf(&arr(&[1, 1, 2, 2], &[1.0, 4.0, 3.0, 2.0]), true);
        let p = t.maxpool2d(x, 2).unwrap();
        assert_eq!(t.value(p), &[4.0]);
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(&DenseArray::ones(&[2]), true);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let w = t.constant(&DenseArray::ones(&[2]));
        let m = t.leaf(&DenseArray::full(&[2], 3.0), true);
        let y = t.mul(w, m).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(m).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_outputs_are_rejected() {
        let mut t = Tape::new();
        let a = t.constant(&DenseArray::full(&[1, 2], 3e38));
        let b = t.constant(&DenseArray::full(&[2, 1], 3e38));
        assert!(matches!(t.matmul(a, b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn large_but_finite_inputs_stay_finite() {
        let mut t = Tape::new();
        let a = t.constant(&DenseArray::full(&[4, 8], 1e6));
        let b = t.constant(&DenseArray::full(&[8, 3], -1e6));
        assert!(t.matmul(a, b).is_ok());
        let logits = t.constant(&arr(&[1, 3], &[1e6, -1e6, 0.0]));
        let l = t.softmax_cross_entropy(logits, &[1]).unwrap();
        assert!(t.scalar(l).is_finite());
    }
}
