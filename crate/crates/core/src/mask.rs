//! Stochastic topology sampling.
//!
//! Each connection has a latent logit `m̂`. A topology is drawn with the
//! Gumbel-max trick on the logit pair `[m̂, 0]`: the connection is kept when
//! `m̂ + g_keep > 0 + g_drop`. Because argmax and softmax only see logit
//! differences, `[m̂, 0]` stands for `[log p + c, log(1 - p) + c]` for some
//! shift `c` that never has to be computed, and the keep probability is
//! `σ(m̂)`.
//!
//! The forward pass uses the hard sample. The backward pass uses the
//! tempered two-way softmax `σ((m̂ + g_keep - g_drop) / τ)`, whose derivative
//! w.r.t. `m̂` is stored alongside the sample as `surrogate_grad`.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::DenseArray;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Uniform draws are clamped to `[ε, 1 - ε]` so `-ln(-ln u)` stays finite.
pub const UNIFORM_CLAMP: f64 = f64::EPSILON * 16.0;

const SOFT_MIN: f32 = f32::MIN_POSITIVE;
const SOFT_MAX: f32 = 1.0 - f32::EPSILON / 2.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Standard Gumbel draw from a uniform sample.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

/// I.i.d. standard Gumbel noise of the given shape.
pub fn sample_gumbel(shape: &[usize], rng: &mut Rng) -> DenseArray {
    let n = shape.iter().product();
    let values = (0..n).map(|_| gumbel_from_uniform(rng.random::<f64>()) as f32).collect();
    DenseArray::new(shape.to_vec(), values).expect("shape product matches")
}

/// How the two-class log-probabilities are formed from `m̂`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parametrization {
    /// Logits `[m̂, 0]`.
    #[default]
    ShiftedLog,
    /// Logits `[log σ(m̂), log(1 - σ(m̂))]`, computed explicitly.
    Sigmoid,
}

/// Latent keep logits of one prunable layer.
///
/// A non-trainable mask is exempt from pruning: it always keeps every
/// connection and never receives gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskParameters {
    pub m_hat: DenseArray,
    pub trainable: bool,
}

impl MaskParameters {
    pub fn new(shape: &[usize], init: f32) -> Self {
        Self {
            m_hat: DenseArray::full(shape, init).with_grad(),
            trainable: true,
        }
    }

    pub fn from_logits(m_hat: DenseArray) -> Self {
        Self {
            m_hat: m_hat.with_grad(),
            trainable: true,
        }
    }

    pub fn exempt(shape: &[usize]) -> Self {
        Self {
            m_hat: DenseArray::zeros(shape),
            trainable: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.m_hat.shape()
    }

    pub fn len(&self) -> usize {
        self.m_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_hat.is_empty()
    }
}

/// `p = σ(m̂)`, elementwise.
pub fn keep_probability(m: &MaskParameters) -> DenseArray {
    if !m.trainable {
        return DenseArray::ones(m.shape());
    }
    m.m_hat.map(|v| sigmoid(f64::from(v)) as f32)
}

/// Deterministic topology keeping connections with `p > 0.5`, i.e. `m̂ > 0`.
pub fn threshold_mask(m: &MaskParameters) -> DenseArray {
    if !m.trainable {
        return DenseArray::ones(m.shape());
    }
    m.m_hat.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

fn binary_count(mask: &DenseArray) -> Result<usize> {
    let mut kept = 0;
    for &v in mask.values() {
        if v == 1.0 {
            kept += 1;
        } else if v != 0.0 {
            return Err(Error::Contract(format!("mask entry {v} is not binary")));
        }
    }
    Ok(kept)
}

/// Fraction of entries of a binary mask that are zero.
pub fn pruning_rate(mask: &DenseArray) -> Result<f64> {
    let kept = binary_count(mask)?;
    Ok(1.0 - kept as f64 / mask.len() as f64)
}

/// Fraction of entries of a binary mask that are one.
pub fn keep_rate(mask: &DenseArray) -> Result<f64> {
    Ok(binary_count(mask)? as f64 / mask.len() as f64)
}

/// One Gumbel-max draw over a two-class logit pair.
///
/// Returns the hard decision (ties keep) and the tempered softmax weight of
/// the keep class. Only logit differences enter the computation, so adding
/// the same constant to both logits leaves the result unchanged.
pub fn sample_from_logits(keep_logit: f64, drop_logit: f64, g_keep: f64, g_drop: f64, temperature: f64) -> (bool, f64) {
    let d = (keep_logit - drop_logit) + (g_keep - g_drop);
    (d >= 0.0, sigmoid(d / temperature))
}

/// Paired Gumbel draws for the keep and drop logits of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise {
    pub keep: DenseArray,
    pub drop: DenseArray,
}

impl GumbelNoise {
    pub fn sample(shape: &[usize], rng: &mut Rng) -> Self {
        let keep = sample_gumbel(shape, rng);
        let drop = sample_gumbel(shape, rng);
        Self { keep, drop }
    }
}

/// One layer's draw: the hard mask used in the forward pass, the soft
/// surrogate, and `d soft / d m̂` for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSample {
    pub hard: DenseArray,
    pub soft: DenseArray,
    pub surrogate_grad: Arc<Vec<f32>>,
}

impl LayerSample {
    fn exempt(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            hard: DenseArray::ones(shape),
            soft: DenseArray::ones(shape),
            surrogate_grad: Arc::new(vec![0.0; n]),
        }
    }
}

fn check_temperature(t: f32) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {t}")))
    }
}

fn check_noise(m: &MaskParameters, noise: &GumbelNoise) -> Result<()> {
    if noise.keep.shape() != m.shape() || noise.drop.shape() != m.shape() {
        return Err(Error::shape("stgs noise", m.shape(), noise.keep.shape()));
    }
    Ok(())
}

/// Straight-through Gumbel-softmax sample on the logit pair `[m̂, 0]`, given
/// fixed noise.
pub fn stgs_with_noise(m: &MaskParameters, noise: &GumbelNoise, temperature: f32) -> Result<LayerSample> {
    check_temperature(temperature)?;
    check_noise(m, noise)?;
    if !m.trainable {
        return Ok(LayerSample::exempt(m.shape()));
    }
    let tau = f64::from(temperature);
    let n = m.len();
    let (mut hard, mut soft, mut grad) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for ((&mh, &g1), &g2) in m.m_hat.values().iter().zip(noise.keep.values()).zip(noise.drop.values()) {
        let (keep, s) = sample_from_logits(f64::from(mh), 0.0, f64::from(g1), f64::from(g2), tau);
        hard.push(if keep { 1.0 } else { 0.0 });
        soft.push((s as f32).clamp(SOFT_MIN, SOFT_MAX));
        grad.push((s * (1.0 - s) / tau) as f32);
    }
    let shape = m.shape().to_vec();
    Ok(LayerSample {
        hard: DenseArray::new(shape.clone(), hard)?,
        soft: DenseArray::new(shape, soft)?,
        surrogate_grad: Arc::new(grad),
    })
}

/// Same draw as [`stgs_with_noise`] but through the explicit log-sigmoid
/// logits `[log σ(m̂), log(1 - σ(m̂))]`, with the chain rule taken through
/// both log-sigmoid terms.
pub fn stgs_sigmoid_with_noise(m: &MaskParameters, noise: &GumbelNoise, temperature: f32) -> Result<LayerSample> {
    check_temperature(temperature)?;
    check_noise(m, noise)?;
    if !m.trainable {
        return Ok(LayerSample::exempt(m.shape()));
    }
    let tau = f64::from(temperature);
    let n = m.len();
    let (mut hard, mut soft, mut grad) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for ((&mh, &g1), &g2) in m.m_hat.values().iter().zip(noise.keep.values()).zip(noise.drop.values()) {
        let mh = f64::from(mh);
        let log_p = -softplus(-mh);
        let log_q = -softplus(mh);
        let (keep, s) = sample_from_logits(log_p, log_q, f64::from(g1), f64::from(g2), tau);
        let p = sigmoid(mh);
        // d log σ(m̂)/dm̂ = 1 - σ(m̂), d log(1 - σ(m̂))/dm̂ = -σ(m̂)
        let ds_dkeep = s * (1.0 - s) / tau;
        let ds_ddrop = -ds_dkeep;
        hard.push(if keep { 1.0 } else { 0.0 });
        soft.push((s as f32).clamp(SOFT_MIN, SOFT_MAX));
        grad.push((ds_dkeep * (1.0 - p) + ds_ddrop * (-p)) as f32);
    }
    let shape = m.shape().to_vec();
    Ok(LayerSample {
        hard: DenseArray::new(shape.clone(), hard)?,
        soft: DenseArray::new(shape, soft)?,
        surrogate_grad: Arc::new(grad),
    })
}

pub fn stgs_sample(m: &MaskParameters, temperature: f32, rng: &mut Rng) -> Result<LayerSample> {
    check_temperature(temperature)?;
    let noise = GumbelNoise::sample(m.shape(), rng);
    stgs_with_noise(m, &noise, temperature)
}

pub fn stgs_sample_sigmoid_param(m: &MaskParameters, temperature: f32, rng: &mut Rng) -> Result<LayerSample> {
    check_temperature(temperature)?;
    let noise = GumbelNoise::sample(m.shape(), rng);
    stgs_sigmoid_with_noise(m, &noise, temperature)
}

/// A full-network topology: one [`LayerSample`] per prunable layer.
#[derive(Clone, Debug)]
pub struct SampledTopology {
    pub layers: Vec<LayerSample>,
    pub temperature: f32,
    /// Per-layer stream state right before the draw; replaying these
    /// streams reproduces the topology.
    pub seed_record: Vec<Rng>,
}

impl SampledTopology {
    pub fn hard_masks(&self) -> impl Iterator<Item = &DenseArray> {
        self.layers.iter().map(|l| &l.hard)
    }

    pub fn soft_surrogates(&self) -> impl Iterator<Item = &DenseArray> {
        self.layers.iter().map(|l| &l.soft)
    }

    /// Pruning rate over all layers, weighted by layer size.
    pub fn pruning_rate(&self) -> Result<f64> {
        let (mut zeros, mut total) = (0.0, 0usize);
        for l in &self.layers {
            zeros += pruning_rate(&l.hard)? * l.hard.len() as f64;
            total += l.hard.len();
        }
        Ok(zeros / total as f64)
    }
}

/// Draws topologies with one independent Gumbel stream per layer, all
/// derived from a master seed.
#[derive(Clone, Debug)]
pub struct TopologySampler {
    streams: Vec<Rng>,
    temperature: f32,
    parametrization: Parametrization,
}

impl TopologySampler {
    pub fn new(seed: u64, label: &str, layers: usize, temperature: f32) -> Result<Self> {
        check_temperature(temperature)?;
        let streams = (0..layers as u64).map(|l| rng::indexed_stream(seed, label, l)).collect();
        Ok(Self {
            streams,
            temperature,
            parametrization: Parametrization::ShiftedLog,
        })
    }

    pub fn with_parametrization(mut self, p: Parametrization) -> Self {
        self.parametrization = p;
        self
    }

    pub fn temperature(&self) -> f32 {
        self.temperature
    }

    pub fn sample<'a>(&mut self, masks: impl IntoIterator<Item = &'a MaskParameters>) -> Result<SampledTopology> {
        let mut layers = Vec::new();
        let mut seed_record = Vec::new();
        for (i, m) in masks.into_iter().enumerate() {
            let rng = self
                .streams
                .get_mut(i)
                .ok_or_else(|| Error::Contract(format!("sampler has no stream for layer {i}")))?;
            seed_record.push(rng.clone());
            let sample = match self.parametrization {
                Parametrization::ShiftedLog => stgs_sample(m, self.temperature, rng)?,
                Parametrization::Sigmoid => stgs_sample_sigmoid_param(m, self.temperature, rng)?,
            };
            layers.push(sample);
        }
        Ok(SampledTopology {
            layers,
            temperature: self.temperature,
            seed_record,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params(v: &[f32]) -> MaskParameters {
        MaskParameters::from_logits(DenseArray::from_vec(v.to_vec()))
    }

    #[test]
    fn threshold_examples() {
        let m = params(&[-1.0, 0.0, 2.0]);
        assert_eq!(threshold_mask(&m).values(), &[0.0, 0.0, 1.0]);
        assert!((pruning_rate(&threshold_mask(&m)).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let all = MaskParameters::new(&[3, 4], 5.0);
        assert!(threshold_mask(&all).values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn keep_probability_examples() {
        let p = keep_probability(&params(&[0.0, 1e4, -1e4]));
        assert_eq!(p.values()[0], 0.5);
        assert!((p.values()[1] - 1.0).abs() < 1e-6);
        assert!(p.values()[2].abs() < 1e-6);
    }

    #[test]
    fn pruning_rate_rejects_non_binary() {
        let m = DenseArray::from_vec(vec![0.0, 0.5, 1.0]);
        assert!(matches!(pruning_rate(&m), Err(Error::Contract(_))));
        let m = DenseArray::from_vec(vec![0.0, 1.0, 1.0, 1.0]);
        assert_eq!(pruning_rate(&m).unwrap(), 0.25);
    }

    #[test]
    fn temperature_must_be_positive() {
        let mut rng = Rng::seed_from_u64(0);
        let m = params(&[0.0]);
        assert!(matches!(stgs_sample(&m, 0.0, &mut rng), Err(Error::Config(_))));
        assert!(matches!(stgs_sample(&m, -1.0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn ties_keep() {
        let (keep, soft) = sample_from_logits(0.5, 0.0, 0.0, 0.5, 1.0);
        assert!(keep);
        assert_eq!(soft, 0.5);
    }

    #[test]
    fn hard_mask_follows_argmax_rule() {
        let mut rng = Rng::seed_from_u64(11);
        let m = params(&[-2.0, -0.5, 0.0, 0.3, 1.7, 4.0]);
        for _ in 0..50 {
            let noise = GumbelNoise::sample(m.shape(), &mut rng);
            let s = stgs_with_noise(&m, &noise, 0.7).unwrap();
            for i in 0..m.len() {
                let keep = m.m_hat.values()[i] as f64 + noise.keep.values()[i] as f64 >= noise.drop.values()[i] as f64;
                assert_eq!(s.hard.values()[i], if keep { 1.0 } else { 0.0 });
                let soft = s.soft.values()[i];
                assert!(soft > 0.0 && soft < 1.0);
            }
        }
    }

    #[test]
    fn saturated_logits_always_keep() {
        let mut rng = Rng::seed_from_u64(3);
        let m = MaskParameters::new(&[100], 20.0);
        for _ in 0..100 {
            let s = stgs_sample(&m, 1.0, &mut rng).unwrap();
            assert!(s.hard.values().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn exempt_masks_keep_everything() {
        let m = MaskParameters::exempt(&[2, 3]);
        let mut rng = Rng::seed_from_u64(0);
        let s = stgs_sample(&m, 1.0, &mut rng).unwrap();
        assert!(s.hard.values().iter().all(|&v| v == 1.0));
        assert!(threshold_mask(&m).values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gumbel_is_deterministic_per_seed() {
        let a = sample_gumbel(&[64], &mut Rng::seed_from_u64(5));
        let b = sample_gumbel(&[64], &mut Rng::seed_from_u64(5));
        let bits = |x: &DenseArray| x.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn sampler_replays_from_seed_record() {
        let masks = [MaskParameters::new(&[10], 0.0), MaskParameters::new(&[4, 4], 0.5)];
        let mut sampler = TopologySampler::new(9, "gumbel-layer", 2, 1.0).unwrap();
        let t = sampler.sample(masks.iter()).unwrap();
        for (i, m) in masks.iter().enumerate() {
            let mut replay = t.seed_record[i].clone();
            let again = stgs_sample(m, 1.0, &mut replay).unwrap();
            assert_eq!(again.hard, t.layers[i].hard);
        }
        let t2 = sampler.sample(masks.iter()).unwrap();
        assert_ne!(t.layers[1].soft, t2.layers[1].soft);
    }
}
