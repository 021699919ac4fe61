//! Independent oracles.
//!
//! Nothing here records onto the tape. Gradients are checked against 64-bit
//! central differences of plain-loop reference functions, sampling against
//! closed-form marginals, and masked forwards against networks whose pruned
//! weights have been physically removed.

use std::time::Instant;

use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::autodiff::{DenseArray, Tape, Var};
use crate::error::{Error, Result};
use crate::mask::{self, GumbelNoise, MaskParameters};
use crate::nn::{self, Activation, LayerKind, MaskSource, Network, NetworkOptions, ScalePlacement, Stage};
use crate::rescale::{self, DwrReading, RescaleStrategy};
use crate::rng::{self, Rng};

/// Central differences `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε`, in 64-bit.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let hi = f(&p);
            p[i] = orig - eps;
            let lo = f(&p);
            p[i] = orig;
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// `max|a − b| / max(max|b|, 1e-6)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-6);
    diff / scale
}

fn sigmoid(x: f64) -> f64 {
    mask::sigmoid(x)
}

/// Reference operators on flat row-major `f64` buffers.
pub mod reference {
    /// `a[m×k] · b[k×n]`.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
            }
        }
        out
    }

    pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = a[r * cols + c];
            }
        }
        out
    }

    /// Direct cross-correlation of `x[n×c×h×w]` with `k[f×c×kh×kw]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(x: &[f64], k: &[f64], n: usize, c: usize, h: usize, w: usize, f: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Vec<f64> {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        for b in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                        continue;
                                    }
                                    acc += x[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k[((fi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn relu(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| v.max(0.0)).collect()
    }

    /// Non-overlapping 2×2 max pooling over `planes` planes of `h×w`.
    pub fn maxpool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x[(p * h + 2 * oy + dy) * w + 2 * ox + dx]);
                        }
                    }
                    out.push(m);
                }
            }
        }
        out
    }

    /// Batch-mean softmax cross-entropy of `logits[n×c]`.
    pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], c: usize) -> f64 {
        let n = labels.len();
        let mut total = 0.0;
        for i in 0..n {
            let row = &logits[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
        }
        total / n as f64
    }
}

/// Operators covered by [`gradcheck_op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpUnderTest {
    MatMul,
    Transpose,
    Mul,
    Add,
    AddBias,
    Scale,
    ScaleConst,
    Conv2d { stride: usize, pad: usize },
    Relu,
    MaxPool2,
    Flatten,
    SoftmaxCrossEntropy,
    Sum,
    StraightThrough,
}

impl OpUnderTest {
    pub const ALL: [OpUnderTest; 15] = [
        OpUnderTest::MatMul,
        OpUnderTest::Transpose,
        OpUnderTest::Mul,
        OpUnderTest::Add,
        OpUnderTest::AddBias,
        OpUnderTest::Scale,
        OpUnderTest::ScaleConst,
        OpUnderTest::Conv2d { stride: 1, pad: 1 },
        OpUnderTest::Conv2d { stride: 2, pad: 0 },
        OpUnderTest::Relu,
        OpUnderTest::MaxPool2,
        OpUnderTest::Flatten,
        OpUnderTest::SoftmaxCrossEntropy,
        OpUnderTest::Sum,
        OpUnderTest::StraightThrough,
    ];

    pub fn name(self) -> String {
        match self {
            OpUnderTest::Conv2d { stride, pad } => format!("conv2d(stride={stride},pad={pad})"),
            other => format!("{other:?}").to_lowercase(),
        }
    }
}

fn normal_values(n: usize, rng: &mut Rng) -> Vec<f64> {
    // values are rounded through f32 so the tape and the oracle see the same point
    (0..n).map(|_| f64::from(rng.sample::<f64, _>(StandardNormal) as f32)).collect()
}

/// Values at least `margin` away from zero.
fn away_from_zero(n: usize, margin: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() + margin;
            let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            f64::from((s * u) as f32)
        })
        .collect()
}

/// Distinct values spaced `gap` apart in random order.
fn distinct_values(n: usize, gap: f64, rng: &mut Rng) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..n).map(|i| f64::from((i as f64 * gap - n as f64 * gap / 2.0) as f32)).collect();
    v.shuffle(rng);
    v
}

type TapeFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type RefFn = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

struct Case {
    inputs: Vec<(Vec<usize>, Vec<f64>)>,
    tape_fn: TapeFn,
    ref_fn: RefFn,
}

fn case(op: OpUnderTest, rng: &mut Rng) -> Case {
    let boxed = |t: TapeFn, r: RefFn, inputs| Case { inputs, tape_fn: t, ref_fn: r };
    match op {
        OpUnderTest::MatMul => boxed(
            Box::new(|t, v| t.matmul(v[0], v[1])),
            Box::new(|x| reference::matmul(&x[0], &x[1], 3, 4, 5)),
            vec![(vec![3, 4], normal_values(12, rng)), (vec![4, 5], normal_values(20, rng))],
        ),
        OpUnderTest::Transpose => boxed(
            Box::new(|t, v| t.transpose(v[0])),
            Box::new(|x| reference::transpose(&x[0], 3, 4)),
            vec![(vec![3, 4], normal_values(12, rng))],
        ),
        OpUnderTest::Mul => boxed(
            Box::new(|t, v| t.mul(v[0], v[1])),
            Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
            vec![(vec![2, 3], normal_values(6, rng)), (vec![2, 3], normal_values(6, rng))],
        ),
        OpUnderTest::Add => boxed(
            Box::new(|t, v| t.add(v[0], v[1])),
            Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
            vec![(vec![2, 3], normal_values(6, rng)), (vec![2, 3], normal_values(6, rng))],
        ),
        OpUnderTest::AddBias => boxed(
            Box::new(|t, v| t.add_bias(v[0], v[1])),
            Box::new(|x| x[0].iter().enumerate().map(|(i, a)| a + x[1][(i / 4) % 3]).collect()),
            vec![(vec![2, 3, 2, 2], normal_values(24, rng)), (vec![3], normal_values(3, rng))],
        ),
        OpUnderTest::Scale => boxed(
            Box::new(|t, v| t.scale(v[0], v[1])),
            Box::new(|x| x[0].iter().map(|a| a * x[1][0]).collect()),
            vec![(vec![2, 3], normal_values(6, rng)), (vec![1], normal_values(1, rng))],
        ),
        OpUnderTest::ScaleConst => boxed(
            Box::new(|t, v| t.scale_const(v[0], 1.75)),
            Box::new(|x| x[0].iter().map(|a| a * 1.75).collect()),
            vec![(vec![2, 3], normal_values(6, rng))],
        ),
        OpUnderTest::Conv2d { stride, pad } => boxed(
            Box::new(move |t, v| t.conv2d(v[0], v[1], stride, pad)),
            Box::new(move |x| reference::conv2d(&x[0], &x[1], 2, 2, 5, 5, 3, 3, 3, stride, pad)),
            vec![(vec![2, 2, 5, 5], normal_values(100, rng)), (vec![3, 2, 3, 3], normal_values(54, rng))],
        ),
        OpUnderTest::Relu => boxed(
            Box::new(|t, v| t.relu(v[0])),
            Box::new(|x| reference::relu(&x[0])),
            vec![(vec![3, 4], away_from_zero(12, 0.1, rng))],
        ),
        OpUnderTest::MaxPool2 => boxed(
            Box::new(|t, v| t.maxpool2d(v[0], 2)),
            Box::new(|x| reference::maxpool2(&x[0], 2, 4, 4)),
            vec![(vec![1, 2, 4, 4], distinct_values(32, 0.05, rng))],
        ),
        OpUnderTest::Flatten => boxed(
            Box::new(|t, v| t.flatten(v[0])),
            Box::new(|x| x[0].clone()),
            vec![(vec![2, 3, 2], normal_values(12, rng))],
        ),
        OpUnderTest::SoftmaxCrossEntropy => {
            let labels = [0usize, 2, 1, 2];
            boxed(
                Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
                Box::new(move |x| vec![reference::softmax_cross_entropy(&x[0], &labels, 3)]),
                vec![(vec![4, 3], normal_values(12, rng))],
            )
        }
        OpUnderTest::Sum => boxed(
            Box::new(|t, v| t.sum(v[0])),
            Box::new(|x| vec![x[0].iter().sum()]),
            vec![(vec![2, 3], normal_values(6, rng))],
        ),
        OpUnderTest::StraightThrough => {
            // relaxed forward σ((l + d) / τ) with its exact derivative as surrogate
            let d = normal_values(6, rng);
            let tau = 0.7;
            let d2 = d.clone();
            boxed(
                Box::new(move |t, v| {
                    let l = t.value(v[0]).to_vec();
                    let s: Vec<f64> = l.iter().zip(&d).map(|(&li, di)| sigmoid((f64::from(li) + di) / tau)).collect();
                    let fwd = s.iter().map(|&v| v as f32).collect();
                    let grad = s.iter().map(|&v| (v * (1.0 - v) / tau) as f32).collect();
                    t.straight_through(v[0], fwd, std::sync::Arc::new(grad))
                }),
                Box::new(move |x| x[0].iter().zip(&d2).map(|(l, di)| sigmoid((l + di) / tau)).collect()),
                vec![(vec![6], normal_values(6, rng))],
            )
        }
    }
}

/// Tape gradient of `Σ R ⊙ op(inputs)` against central differences of the
/// reference operator. Returns the relative error.
pub fn gradcheck_op(op: OpUnderTest, seed: u64) -> Result<f64> {
    let mut r = rng::indexed_stream(seed, &op.name(), 0);
    let c = case(op, &mut r);
    let mut tape = Tape::new();
    let leaves: Vec<Var> = c
        .inputs
        .iter()
        .map(|(shape, v)| {
            let a = DenseArray::new(shape.clone(), v.iter().map(|&x| x as f32).collect()).expect("case shape");
            tape.leaf(&a, true)
        })
        .collect();
    let out = (c.tape_fn)(&mut tape, &leaves)?;
    let n_out = tape.value(out).len();
    let weights = normal_values(n_out, &mut r);
    let wa = DenseArray::new(tape.shape(out).to_vec(), weights.iter().map(|&x| x as f32).collect())?;
    let wv = tape.constant(&wa);
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod)?;
    let grads = tape.backward(loss)?;
    let mut analytic = Vec::new();
    for &l in &leaves {
        analytic.extend(grads.get(l).expect("leaf gradient").iter().map(|&g| f64::from(g)));
    }

    let sizes: Vec<usize> = c.inputs.iter().map(|(_, v)| v.len()).collect();
    let flat: Vec<f64> = c.inputs.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let f = |p: &[f64]| {
        let mut parts = Vec::new();
        let mut off = 0;
        for &s in &sizes {
            parts.push(p[off..off + s].to_vec());
            off += s;
        }
        (c.ref_fn)(&parts).iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
    };
    let numeric = finite_diff_grad(f, &flat, 1e-6);
    Ok(relative_error(&analytic, &numeric))
}

/// One instance of the relaxed two-layer MLP check.
#[derive(Clone, Debug)]
pub struct RelaxedMlpCheck {
    pub rel_err: f64,
    /// Draws rejected because a pre-activation sat too close to a ReLU kink.
    pub rejected: usize,
}

struct MlpInstance {
    net: Network,
    x: DenseArray,
    y: Vec<usize>,
    noise: Vec<GumbelNoise>,
    tau: f64,
}

/// f64 loss of the relaxed masked MLP, `params = [m̂ of every layer…, s of
/// every layer…]`. Also returns the smallest |pre-activation| of the hidden
/// layers.
fn relaxed_mlp_loss(inst: &MlpInstance, params: &[f64]) -> (f64, f64) {
    let layers: Vec<_> = inst.net.layers().collect();
    let n = inst.y.len();
    let mut z: Vec<f64> = inst.x.values().iter().map(|&v| f64::from(v)).collect();
    let mut d_in = inst.x.shape()[1];
    let mut off = 0;
    let scale_base: usize = layers.iter().map(|l| l.weights.len()).sum();
    let mut min_pre = f64::INFINITY;
    for (li, l) in layers.iter().enumerate() {
        let (o, i) = (l.weights.shape()[0], l.weights.shape()[1]);
        let s = params[scale_base + li];
        let w: Vec<f64> = (0..o * i)
            .map(|j| {
                let m = params[off + j];
                let g = f64::from(inst.noise[li].keep.values()[j]) - f64::from(inst.noise[li].drop.values()[j]);
                s * sigmoid((m + g) / inst.tau) * f64::from(l.weights.values()[j])
            })
            .collect();
        off += o * i;
        let wt = reference::transpose(&w, o, i);
        let mut pre = reference::matmul(&z, &wt, n, d_in, o);
        if let Some(b) = &l.bias {
            for (j, p) in pre.iter_mut().enumerate() {
                *p += f64::from(b.values()[j % o]);
            }
        }
        if l.activation == Activation::Relu {
            min_pre = pre.iter().map(|p| p.abs()).fold(min_pre, f64::min);
            pre = reference::relu(&pre);
        }
        z = pre;
        d_in = o;
    }
    (reference::softmax_cross_entropy(&z, &inst.y, d_in), min_pre)
}

fn mlp_instance(seed: u64, attempt: u64) -> Result<MlpInstance> {
    let mut r = rng::indexed_stream(seed, "gradcheck-mlp", attempt);
    let opts = NetworkOptions {
        rescale: RescaleStrategy::Smart,
        biases: true,
        ..NetworkOptions::default()
    };
    let mut net = nn::build_mlp_with(&[4, 5, 3], r.random(), &opts)?;
    for l in net.layers_mut() {
        for v in l.mask.m_hat.values_mut() {
            *v = r.sample::<f64, _>(StandardNormal) as f32;
        }
        l.rescale.scale.values_mut()[0] = r.random_range(0.5f32..2.0);
    }
    let x = DenseArray::new(vec![6, 4], (0..24).map(|_| r.sample::<f64, _>(StandardNormal) as f32).collect())?;
    let y = (0..6).map(|_| r.random_range(0..3)).collect();
    let noise = net.layers().map(|l| GumbelNoise::sample(l.weights.shape(), &mut r)).collect();
    Ok(MlpInstance {
        net,
        x,
        y,
        noise,
        tau: f64::from(r.random_range(0.5f32..1.5)),
    })
}

/// Tape gradient of the relaxed masked forward of a 4-5-3 MLP with smart
/// rescale and frozen biases, w.r.t. every `m̂` and `s`, against central
/// differences of a 64-bit reference. Instances with a hidden
/// pre-activation closer than `1e-4` to zero are redrawn.
pub fn gradcheck_relaxed_mlp(seed: u64) -> Result<RelaxedMlpCheck> {
    const MARGIN: f64 = 1e-4;
    for attempt in 0..100 {
        let inst = mlp_instance(seed, attempt)?;
        let mut params: Vec<f64> = inst.net.layers().flat_map(|l| l.mask.m_hat.values().iter().map(|&v| f64::from(v))).collect();
        params.extend(inst.net.layers().map(|l| f64::from(l.rescale.scale.values()[0])));
        if relaxed_mlp_loss(&inst, &params).1 < MARGIN {
            continue;
        }

        let layers: Vec<_> = inst
            .net
            .layers()
            .zip(&inst.noise)
            .map(|(l, nz)| mask::stgs_with_noise(&l.mask, nz, inst.tau as f32))
            .collect::<Result<_>>()?;
        let topo = mask::SampledTopology {
            layers,
            temperature: inst.tau as f32,
            seed_record: Vec::new(),
        };
        let mut tape = Tape::new();
        let xv = tape.constant(&inst.x);
        let out = inst.net.forward(&mut tape, xv, MaskSource::Relaxed(&topo))?;
        let loss = tape.softmax_cross_entropy(out.logits, &inst.y)?;
        let grads = tape.backward(loss)?;
        let mut analytic = Vec::new();
        for v in &out.m_hat_vars {
            let v = v.ok_or_else(|| Error::Contract("mask without a tape handle".into()))?;
            analytic.extend(grads.get(v).expect("m̂ gradient").iter().map(|&g| f64::from(g)));
        }
        for v in &out.scale_vars {
            let v = v.ok_or_else(|| Error::Contract("scale without a tape handle".into()))?;
            analytic.push(f64::from(grads.get(v).expect("s gradient")[0]));
        }
        let numeric = finite_diff_grad(|p| relaxed_mlp_loss(&inst, p).0, &params, 1e-6);
        return Ok(RelaxedMlpCheck {
            rel_err: relative_error(&analytic, &numeric),
            rejected: attempt as usize,
        });
    }
    Err(Error::Numerical("no kink-free instance in 100 draws".into()))
}

/// Fraction of `n_samples` straight-through draws that keep the connection.
pub fn monte_carlo_keep_rate(m_hat: f32, n_samples: usize, rng: &mut Rng) -> Result<f64> {
    let m = MaskParameters::new(&[n_samples], m_hat);
    let s = mask::stgs_sample(&m, 1.0, rng)?;
    Ok(s.hard.values().iter().filter(|&&v| v == 1.0).count() as f64 / n_samples as f64)
}

/// Draw with both logits shifted by `c` in 64-bit arithmetic: `[m̂ + c, c]`.
pub fn stgs_shifted(m: &MaskParameters, noise: &GumbelNoise, temperature: f32, c: f32) -> (Vec<f32>, Vec<f32>) {
    let c = f64::from(c);
    let mut hard = Vec::with_capacity(m.len());
    let mut soft = Vec::with_capacity(m.len());
    for ((&mh, &g1), &g2) in m.m_hat.values().iter().zip(noise.keep.values()).zip(noise.drop.values()) {
        let (keep, s) = mask::sample_from_logits(f64::from(mh) + c, 0.0 + c, f64::from(g1), f64::from(g2), f64::from(temperature));
        hard.push(if keep { 1.0 } else { 0.0 });
        soft.push((s as f32).clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0));
    }
    (hard, soft)
}

/// Forward pass of the subnetwork left after physically removing every
/// pruned weight. Each layer is rebuilt as per-output lists of surviving
/// `(input index, weight)` pairs, and the products are summed in input
/// order in `f32`, exactly as the dense kernels accumulate them.
pub fn brute_force_subnetwork_forward(net: &Network, masks: &[DenseArray], x: &DenseArray) -> Result<DenseArray> {
    if masks.len() != net.depth() {
        return Err(Error::Contract(format!("{} masks for {} layers", masks.len(), net.depth())));
    }
    let mut shape = x.shape().to_vec();
    let mut z = x.values().to_vec();
    let mut li = 0;
    for stage in &net.stages {
        match stage {
            Stage::Flatten => shape = vec![shape[0], shape[1..].iter().product()],
            Stage::MaxPool2 => {
                let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Vec::with_capacity(planes * oh * ow);
                for p in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut m = f32::NEG_INFINITY;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    m = m.max(z[(p * h + 2 * oy + dy) * w + 2 * ox + dx]);
                                }
                            }
                            out.push(m);
                        }
                    }
                }
                z = out;
                shape = vec![shape[0], shape[1], oh, ow];
            }
            Stage::Masked(l) => {
                let mask = &masks[li];
                li += 1;
                let factor = l.rescale.factor(mask);
                let f = l.weights.shape()[0];
                let patch: usize = l.weights.shape()[1..].iter().product();
                let (out_shape, inner) = match l.kind {
                    LayerKind::Dense => (vec![shape[0], f], 1),
                    LayerKind::Conv2d { stride, padding } => {
                        let (kh, kw) = (l.weights.shape()[2], l.weights.shape()[3]);
                        let oh = (shape[2] + 2 * padding - kh) / stride + 1;
                        let ow = (shape[3] + 2 * padding - kw) / stride + 1;
                        (vec![shape[0], f, oh, ow], oh * ow)
                    }
                };
                let out_len: usize = out_shape.iter().product();
                let placement = ScalePlacement::choose(l.weights.len(), out_len);
                let scaled = l.rescale.strategy != RescaleStrategy::None;
                // compacted rows: surviving (patch index, weight) pairs per output unit
                let rows: Vec<Vec<(usize, f32)>> = (0..f)
                    .map(|o| {
                        (0..patch)
                            .filter(|&k| mask.values()[o * patch + k] != 0.0)
                            .map(|k| {
                                let w = l.weights.values()[o * patch + k];
                                (k, if scaled && placement == ScalePlacement::Weights { w * factor } else { w })
                            })
                            .collect()
                    })
                    .collect();
                let mut out = vec![0.0f32; out_len];
                match l.kind {
                    LayerKind::Dense => {
                        let d = shape[1];
                        for n in 0..shape[0] {
                            for (o, row) in rows.iter().enumerate() {
                                let mut acc = 0.0f32;
                                for &(k, w) in row {
                                    acc += z[n * d + k] * w;
                                }
                                out[n * f + o] = acc;
                            }
                        }
                    }
                    LayerKind::Conv2d { stride, padding } => {
                        let (c, h, w) = (shape[1], shape[2], shape[3]);
                        let (kh, kw) = (l.weights.shape()[2], l.weights.shape()[3]);
                        let (oh, ow) = (out_shape[2], out_shape[3]);
                        for n in 0..shape[0] {
                            for (o, row) in rows.iter().enumerate() {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        let mut acc = 0.0f32;
                                        for &(k, wv) in row {
                                            let (ci, ky, kx) = (k / (kh * kw), (k / kw) % kh, k % kw);
                                            let iy = (oy * stride + ky) as isize - padding as isize;
                                            let ix = (ox * stride + kx) as isize - padding as isize;
                                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                                continue;
                                            }
                                            acc += z[((n * c + ci) * h + iy as usize) * w + ix as usize] * wv;
                                        }
                                        out[((n * f + o) * oh + oy) * ow + ox] = acc;
                                    }
                                }
                            }
                        }
                    }
                }
                if scaled && placement == ScalePlacement::Output {
                    for v in &mut out {
                        *v *= factor;
                    }
                }
                if let Some(b) = &l.bias {
                    for (i, v) in out.iter_mut().enumerate() {
                        *v += b.values()[(i / inner) % f];
                    }
                }
                if l.activation == Activation::Relu {
                    for v in &mut out {
                        *v = if *v > 0.0 { *v } else { 0.0 };
                    }
                }
                z = out;
                shape = out_shape;
            }
        }
    }
    DenseArray::new(shape, z)
}

/// Monte-Carlo check of dynamic weight rescale on one dense layer.
#[derive(Clone, Debug)]
pub struct DwrCheck {
    pub keep_prob: f64,
    /// `‖E[rescaled masked W x] − W x‖ / ‖W x‖`.
    pub rel_err: f64,
}

/// Averages `factor · (m ⊙ W) x` over `draws` sampled masks of a `size×size`
/// layer with keep probability `p`, and compares with `W x`.
pub fn dwr_monte_carlo(p: f64, size: usize, draws: usize, seed: u64, reading: DwrReading) -> Result<DwrCheck> {
    let mut r = rng::indexed_stream(seed, "dwr-check", (p * 1e6) as u64);
    let std = (2.0 / size as f64).sqrt();
    let w: Vec<f64> = (0..size * size).map(|_| f64::from((r.sample::<f64, _>(StandardNormal) * std) as f32)).collect();
    let x: Vec<f64> = (0..size).map(|_| f64::from(r.sample::<f64, _>(StandardNormal) as f32)).collect();
    let exact = reference::matmul(&w, &x, size, size, 1);
    let m = MaskParameters::new(&[size, size], (p / (1.0 - p)).ln() as f32);
    let mut mean = vec![0.0f64; size];
    for _ in 0..draws {
        let s = mask::stgs_sample(&m, 1.0, &mut r)?;
        let factor = f64::from(rescale::dwr_factor_with(&s.hard, reading));
        let hv = s.hard.values();
        for (j, acc) in mean.iter_mut().enumerate() {
            let mut pre = 0.0;
            for k in 0..size {
                if hv[j * size + k] != 0.0 {
                    pre += w[j * size + k] * x[k];
                }
            }
            *acc += factor * pre;
        }
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = mean.iter().zip(&exact).map(|(a, b)| a / draws as f64 - b).collect();
    Ok(DwrCheck {
        keep_prob: p,
        rel_err: norm(&diff) / norm(&exact),
    })
}

/// Random MLP with random keep logits and smart-rescale factors, for the
/// subnetwork equivalence check.
pub fn random_masked_mlp(sizes: &[usize], seed: u64, strategy: RescaleStrategy) -> Result<Network> {
    let opts = NetworkOptions {
        rescale: strategy,
        biases: true,
        ..NetworkOptions::default()
    };
    let mut net = nn::build_mlp_with(sizes, seed, &opts)?;
    let mut r = rng::stream(seed, "random-masks");
    for l in net.layers_mut() {
        for v in l.mask.m_hat.values_mut() {
            *v = r.sample::<f64, _>(StandardNormal) as f32;
        }
        if strategy == RescaleStrategy::Smart {
            l.rescale.scale.values_mut()[0] = r.random_range(0.5f32..3.0);
        }
    }
    Ok(net)
}

/// Row of the `verify` table.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Runs every oracle at its prescribed size.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(check("finite differences of Σx²", || {
        let x = [0.3, -1.2, 2.5];
        let g = finite_diff_grad(|p| p.iter().map(|v| v * v).sum(), &x, 1e-5);
        let err = g.iter().zip(&x).map(|(a, b)| (a - 2.0 * b).abs()).fold(0.0, f64::max);
        Ok((err < 1e-6, format!("max abs err {err:.2e}")))
    }));
    out.push(check("operator gradients", || {
        let mut worst = (0.0f64, String::new());
        for op in OpUnderTest::ALL {
            for s in 0..3 {
                let e = gradcheck_op(op, seed.wrapping_add(s))?;
                if e > worst.0 {
                    worst = (e, op.name());
                }
            }
        }
        Ok((worst.0 < 1e-3, format!("worst rel err {:.2e} ({})", worst.0, worst.1)))
    }));
    out.push(check("relaxed masked MLP gradient (20 seeds)", || {
        let mut worst = 0.0f64;
        for s in 0..20 {
            worst = worst.max(gradcheck_relaxed_mlp(seed.wrapping_add(s))?.rel_err);
        }
        Ok((worst < 1e-3, format!("worst rel err {worst:.2e}")))
    }));
    out.push(check("Gumbel-max keep marginal", || {
        let mut r = Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for m in [-3.0f32, -1.0, 0.0, 1.0, 3.0] {
            let rate = monte_carlo_keep_rate(m, 100_000, &mut r)?;
            worst = worst.max((rate - sigmoid(f64::from(m))).abs());
        }
        Ok((worst <= 0.01, format!("max |rate − σ(m̂)| {worst:.4}")))
    }));
    out.push(check("shift invariance", || {
        let mut r = Rng::seed_from_u64(seed);
        let m = MaskParameters::from_logits(DenseArray::new(vec![4096], normal_values(4096, &mut r).iter().map(|&v| (3.0 * v) as f32).collect())?);
        let noise = GumbelNoise::sample(m.shape(), &mut r);
        let base = mask::stgs_with_noise(&m, &noise, 1.0)?;
        let ok = [-100.0f32, 0.37, 1e3].iter().all(|&c| {
            let (h, s) = stgs_shifted(&m, &noise, 1.0, c);
            h == base.hard.values() && s == base.soft.values()
        });
        Ok((ok, "c ∈ {−100, 0.37, 1e3}".into()))
    }));
    out.push(check("threshold forward equals compacted subnetwork", || {
        let net = random_masked_mlp(&[20, 32, 24, 5], seed, RescaleStrategy::Smart)?;
        let mut r = Rng::seed_from_u64(seed);
        let x = DenseArray::new(vec![16, 20], normal_values(320, &mut r).iter().map(|&v| v as f32).collect())?;
        let masked = net.logits(&x, MaskSource::Threshold)?;
        let brute = brute_force_subnetwork_forward(&net, &net.threshold_masks(), &x)?;
        Ok((masked.values() == brute.values(), format!("{} logits compared", masked.len())))
    }));
    out.push(check("dynamic rescale unbiasedness", || {
        let mut worst = 0.0f64;
        for p in [0.3, 0.5, 0.8] {
            worst = worst.max(dwr_monte_carlo(p, 64, 10_000, seed, DwrReading::Keep)?.rel_err);
        }
        Ok((worst <= 0.02, format!("worst rel err {:.4}", worst)))
    }));
    out
}

/// Text table of [`run_all`] results.
pub fn format_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.chars().count()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        let pad = width - r.name.chars().count();
        s.push_str(&format!(
            "{}{}  {}  {:>7.2}s  {}\n",
            r.name,
            " ".repeat(pad),
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_differences_closed_forms() {
        let x = [0.5, -2.0, 3.25];
        let g = finite_diff_grad(|p| p.iter().map(|v| v * v).sum(), &x, 1e-5);
        for (a, b) in g.iter().zip(&x) {
            assert!((a - 2.0 * b).abs() < 1e-6);
        }
        let g = finite_diff_grad(|_| 4.2, &x, 1e-5);
        assert!(g.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn reference_conv_matches_tape_forward() {
        let mut r = Rng::seed_from_u64(3);
        let x = normal_values(2 * 2 * 5 * 5, &mut r);
        let k = normal_values(3 * 2 * 9, &mut r);
        let mut t = Tape::new();
        let xv = t.constant(&DenseArray::new(vec![2, 2, 5, 5], x.iter().map(|&v| v as f32).collect()).unwrap());
        let kv = t.constant(&DenseArray::new(vec![3, 2, 3, 3], k.iter().map(|&v| v as f32).collect()).unwrap());
        let y = t.conv2d(xv, kv, 1, 1).unwrap();
        let want = reference::conv2d(&x, &k, 2, 2, 5, 5, 3, 3, 3, 1, 1);
        let got: Vec<f64> = t.value(y).iter().map(|&v| f64::from(v)).collect();
        assert!(relative_error(&got, &want) < 1e-5);
    }

    #[test]
    fn every_operator_gradient() {
        for op in OpUnderTest::ALL {
            let e = gradcheck_op(op, 1).unwrap();
            assert!(e < 1e-3, "{}: {e}", op.name());
        }
    }

    #[test]
    fn compacted_conv_subnetwork_matches() {
        use crate::nn::{build_conv_family_with, ConvShape, ConvVariant};
        for strategy in [RescaleStrategy::None, RescaleStrategy::Smart, RescaleStrategy::Dynamic] {
            let opts = NetworkOptions {
                rescale: strategy,
                biases: true,
                ..NetworkOptions::default()
            };
            let shape = ConvShape {
                channels: 2,
                height: 8,
                width: 8,
                width_divisor: 16,
            };
            let mut net = build_conv_family_with(ConvVariant::Conv2, 3, 5, &shape, &opts).unwrap();
            let mut r = Rng::seed_from_u64(9);
            for l in net.layers_mut() {
                for v in l.mask.m_hat.values_mut() {
                    *v = r.sample::<f64, _>(StandardNormal) as f32;
                }
            }
            let x = DenseArray::new(vec![3, 2, 8, 8], (0..384).map(|_| r.random::<f32>()).collect()).unwrap();
            let a = net.logits(&x, MaskSource::Threshold).unwrap();
            let b = brute_force_subnetwork_forward(&net, &net.threshold_masks(), &x).unwrap();
            assert_eq!(a.values(), b.values(), "{strategy:?}");
        }
    }
}
