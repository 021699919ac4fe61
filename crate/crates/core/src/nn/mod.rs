//! Masked layers and networks.
//!
//! A prunable layer computes `g(s · (m ⊙ w) ⊗ z)`: `w` frozen, `m` a binary
//! (or, on the relaxed path, soft) mask, `s` the rescale factor. Biases are
//! off by default; when enabled they are frozen and added after the
//! product, unmasked and unscaled.

mod arch;
pub mod checkpoint;
mod init;

pub use arch::{build_conv_family, build_conv_family_with, build_mlp, build_mlp_with, ConvShape, ConvVariant};
pub use init::{init_bias, init_weights, WeightScheme};

use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseArray, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::mask::{self, MaskParameters, SampledTopology, TopologySampler};
use crate::rescale::{self, DwrReading, RescaleState, RescaleStrategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Dense,
    Conv2d { stride: usize, padding: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Frozen weights plus everything trained on top of them.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLayer {
    pub kind: LayerKind,
    /// `[out, in]` for dense layers, `[F, C, kh, kw]` for convolutions.
    pub weights: DenseArray,
    pub bias: Option<DenseArray>,
    pub mask: MaskParameters,
    pub rescale: RescaleState,
    pub activation: Activation,
}

impl MaskedLayer {
    pub fn new(kind: LayerKind, weights: DenseArray, activation: Activation) -> Self {
        let shape = weights.shape().to_vec();
        Self {
            kind,
            weights,
            bias: None,
            mask: MaskParameters::new(&shape, 0.0),
            rescale: RescaleState::none(),
            activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Masked(MaskedLayer),
    MaxPool2,
    Flatten,
}

/// Construction knobs shared by the architecture builders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkOptions {
    pub weights: WeightScheme,
    pub biases: bool,
    /// Initial value of every `m̂`.
    pub mask_init: f32,
    pub rescale: RescaleStrategy,
    /// Initial smart-rescale factor; defaults to `1 / σ(mask_init)`.
    pub smart_init: Option<f32>,
    pub dwr_reading: DwrReading,
    /// Whether the classifier layer is pruned too.
    pub mask_last_layer: bool,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        Self {
            weights: WeightScheme::Kaiming,
            biases: false,
            mask_init: 0.0,
            rescale: RescaleStrategy::None,
            smart_init: None,
            dwr_reading: DwrReading::Keep,
            mask_last_layer: true,
        }
    }
}

impl NetworkOptions {
    pub fn smart_init_value(&self) -> f32 {
        self.smart_init
            .unwrap_or_else(|| (1.0 / mask::sigmoid(f64::from(self.mask_init))) as f32)
    }
}

/// Where the scalar rescale factor is multiplied in. The two placements are
/// algebraically identical; the smaller operand is cheaper.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalePlacement {
    Weights,
    Output,
}

impl ScalePlacement {
    pub fn choose(weight_len: usize, output_len: usize) -> Self {
        if output_len < weight_len {
            Self::Output
        } else {
            Self::Weights
        }
    }
}

/// Which masks a forward pass uses.
#[derive(Clone, Copy, Debug)]
pub enum MaskSource<'a> {
    /// Hard sampled masks; gradients reach `m̂` straight through the soft
    /// surrogate.
    Sampled(&'a SampledTopology),
    /// Soft surrogates in the forward pass, so the tape gradient is the true
    /// gradient of a smooth function (used by gradient checks).
    Relaxed(&'a SampledTopology),
    /// Deterministic `p > 0.5` topology.
    Threshold,
    /// Caller-supplied binary masks, one per prunable layer.
    Fixed(&'a [DenseArray]),
    /// Plain frozen network: no masks, no rescale.
    Unmasked,
}

/// Tape handles produced by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub m_hat_vars: Vec<Option<Var>>,
    pub scale_vars: Vec<Option<Var>>,
    /// Rescale factor applied in each prunable layer.
    pub factors: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub stages: Vec<Stage>,
    /// Shape of one input sample (without the batch axis).
    pub input_shape: Vec<usize>,
}

impl Network {
    pub fn new(stages: Vec<Stage>, input_shape: Vec<usize>) -> Self {
        Self { stages, input_shape }
    }

    pub fn layers(&self) -> impl Iterator<Item = &MaskedLayer> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Masked(l) => Some(l),
            _ => None,
        })
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut MaskedLayer> {
        self.stages.iter_mut().filter_map(|s| match s {
            Stage::Masked(l) => Some(l),
            _ => None,
        })
    }

    /// Number of prunable layers.
    pub fn depth(&self) -> usize {
        self.layers().count()
    }

    pub fn masks(&self) -> impl Iterator<Item = &MaskParameters> {
        self.layers().map(|l| &l.mask)
    }

    pub fn weight_count(&self) -> usize {
        self.layers().map(|l| l.weights.len()).sum()
    }

    /// Hash over every frozen array (weights and biases).
    pub fn frozen_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for l in self.layers() {
            l.weights.content_hash().hash(&mut h);
            l.bias.as_ref().map(DenseArray::content_hash).hash(&mut h);
        }
        h.finish()
    }

    pub fn sample_topology(&self, sampler: &mut TopologySampler) -> Result<SampledTopology> {
        sampler.sample(self.masks())
    }

    pub fn threshold_masks(&self) -> Vec<DenseArray> {
        self.masks().map(mask::threshold_mask).collect()
    }

    /// Size-weighted pruning rate of the threshold topology.
    pub fn threshold_pruning_rate(&self) -> f64 {
        let mut zeros = 0usize;
        for m in self.masks() {
            zeros += mask::threshold_mask(m).values().iter().filter(|&&v| v == 0.0).count();
        }
        zeros as f64 / self.weight_count() as f64
    }

    /// Current per-layer factor under the threshold topology (learned `s`
    /// for smart rescale, inverse keep rate for dynamic, 1 otherwise).
    pub fn scale_factors(&self) -> Vec<f32> {
        self.layers()
            .map(|l| l.rescale.factor(&mask::threshold_mask(&l.mask)))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for l in self.layers_mut() {
            l.mask.m_hat.zero_grad();
            l.rescale.scale.zero_grad();
        }
    }

    /// Folds tape gradients into the `m̂` and `s` gradient buffers.
    pub fn accumulate_grads(&mut self, out: &ForwardOutput, grads: &Gradients) -> Result<()> {
        for (i, l) in self.layers_mut().enumerate() {
            if let Some(v) = out.m_hat_vars[i] {
                grads.accumulate_into(v, &mut l.mask.m_hat)?;
            }
            if let Some(v) = out.scale_vars[i] {
                grads.accumulate_into(v, &mut l.rescale.scale)?;
            }
        }
        Ok(())
    }

    fn check_mask_count(&self, got: usize) -> Result<()> {
        let want = self.depth();
        if got != want {
            return Err(Error::Contract(format!(
                "topology has {got} masks but the network has {want} prunable layers"
            )));
        }
        Ok(())
    }

    /// Records the forward pass of a batch `x` onto `tape`.
    pub fn forward(&self, tape: &mut Tape, x: Var, source: MaskSource<'_>) -> Result<ForwardOutput> {
        match source {
            MaskSource::Sampled(t) | MaskSource::Relaxed(t) => self.check_mask_count(t.layers.len())?,
            MaskSource::Fixed(m) => self.check_mask_count(m.len())?,
            MaskSource::Threshold | MaskSource::Unmasked => {}
        }
        let thresholds = match source {
            MaskSource::Threshold => self.threshold_masks(),
            _ => Vec::new(),
        };

        let depth = self.depth();
        let mut out = ForwardOutput {
            logits: x,
            m_hat_vars: Vec::with_capacity(depth),
            scale_vars: Vec::with_capacity(depth),
            factors: Vec::with_capacity(depth),
        };
        let mut z = x;
        let mut li = 0;
        for stage in &self.stages {
            z = match stage {
                Stage::MaxPool2 => tape.maxpool2d(z, 2)?,
                Stage::Flatten => tape.flatten(z)?,
                Stage::Masked(layer) => {
                    let w = tape.constant(&layer.weights);
                    let (weights, binary, m_hat_var) = match source {
                        MaskSource::Unmasked => (w, None, None),
                        MaskSource::Sampled(t) | MaskSource::Relaxed(t) => {
                            let sample = &t.layers[li];
                            if sample.hard.shape() != layer.weights.shape() {
                                return Err(Error::shape("mask", sample.hard.shape(), layer.weights.shape()));
                            }
                            let relaxed = matches!(source, MaskSource::Relaxed(_));
                            let m_hat = tape.leaf(&layer.mask.m_hat, layer.mask.trainable);
                            let fwd = if relaxed { &sample.soft } else { &sample.hard };
                            let mv = tape.straight_through(m_hat, fwd.values().to_vec(), sample.surrogate_grad.clone())?;
                            let masked = tape.mul(mv, w)?;
                            (masked, Some(&sample.hard), layer.mask.trainable.then_some(m_hat))
                        }
                        MaskSource::Threshold | MaskSource::Fixed(_) => {
                            let m = match source {
                                MaskSource::Fixed(ms) => &ms[li],
                                _ => &thresholds[li],
                            };
                            if m.shape() != layer.weights.shape() {
                                return Err(Error::shape("mask", m.shape(), layer.weights.shape()));
                            }
                            let mv = tape.constant(m);
                            (tape.mul(mv, w)?, Some(m), None)
                        }
                    };
                    let (z_next, scale_var, factor) = self.apply_layer(tape, layer, z, weights, binary)?;
                    out.m_hat_vars.push(m_hat_var);
                    out.scale_vars.push(scale_var);
                    out.factors.push(factor);
                    li += 1;
                    z_next
                }
            };
        }
        out.logits = z;
        Ok(out)
    }

    fn apply_layer(
        &self,
        tape: &mut Tape,
        layer: &MaskedLayer,
        z: Var,
        weights: Var,
        binary: Option<&DenseArray>,
    ) -> Result<(Var, Option<Var>, f32)> {
        let batch = tape.shape(z)[0];
        let out_len = match layer.kind {
            LayerKind::Dense => batch * layer.weights.shape()[0],
            LayerKind::Conv2d { stride, padding } => {
                let g = crate::autodiff::ConvGeometry::new(tape.shape(z), layer.weights.shape(), stride, padding)?;
                g.output_shape().iter().product()
            }
        };
        let placement = ScalePlacement::choose(layer.weights.len(), out_len);
        let mut scale_var = None;
        let mut factor = 1.0;

        let mut weights = weights;
        if let (Some(mask), ScalePlacement::Weights) = (binary, placement) {
            let r = rescale::apply_rescale(tape, &layer.rescale, weights, mask)?;
            (weights, scale_var, factor) = (r.out, r.scale, r.factor);
        }
        let mut y = match layer.kind {
            LayerKind::Dense => {
                let s = tape.shape(z);
                if s.len() != 2 || s[1] != layer.weights.shape()[1] {
                    return Err(Error::shape("dense", s, layer.weights.shape()));
                }
                let wt = tape.transpose(weights)?;
                tape.matmul(z, wt)?
            }
            LayerKind::Conv2d { stride, padding } => tape.conv2d(z, weights, stride, padding)?,
        };
        if let (Some(mask), ScalePlacement::Output) = (binary, placement) {
            let r = rescale::apply_rescale(tape, &layer.rescale, y, mask)?;
            (y, scale_var, factor) = (r.out, r.scale, r.factor);
        }
        if let Some(b) = &layer.bias {
            let bv = tape.constant(b);
            y = tape.add_bias(y, bv)?;
        }
        if layer.activation == Activation::Relu {
            y = tape.relu(y)?;
        }
        Ok((y, scale_var, factor))
    }

    /// Runs a batch through the network and returns the logits.
    pub fn logits(&self, x: &DenseArray, source: MaskSource<'_>) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, xv, source)?;
        Ok(tape.array(out.logits))
    }

    pub fn predict(&self, x: &DenseArray, source: MaskSource<'_>) -> Result<Vec<usize>> {
        let logits = self.logits(x, source)?;
        Ok(argmax_rows(&logits))
    }
}

/// Row-wise argmax of a `[N×C]` array; first index wins ties.
pub fn argmax_rows(logits: &DenseArray) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .values()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn random_batch(n: usize, d: usize, seed: u64) -> DenseArray {
        let mut r = rng::stream(seed, "batch");
        DenseArray::new(vec![n, d], (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn all_ones_masks_match_unmasked() {
        let net = build_mlp(&[5, 7, 3], 1).unwrap();
        let x = random_batch(4, 5, 2);
        let ones: Vec<DenseArray> = net.layers().map(|l| DenseArray::ones(l.weights.shape())).collect();
        let a = net.logits(&x, MaskSource::Fixed(&ones)).unwrap();
        let b = net.logits(&x, MaskSource::Unmasked).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn all_zero_masks_leave_only_biases() {
        let opts = NetworkOptions { biases: true, ..NetworkOptions::default() };
        let net = build_mlp_with(&[4, 6, 3], 3, &opts).unwrap();
        let x = random_batch(2, 4, 4);
        let zeros: Vec<DenseArray> = net.layers().map(|l| DenseArray::zeros(l.weights.shape())).collect();
        let y = net.logits(&x, MaskSource::Fixed(&zeros)).unwrap();
        let last_bias = net.layers().last().unwrap().bias.clone().unwrap();
        for row in y.values().chunks(3) {
            assert_eq!(row, last_bias.values());
        }
        let net = build_mlp(&[4, 6, 3], 3).unwrap();
        let y = net.logits(&x, MaskSource::Fixed(&zeros)).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_count_mismatch_is_contract_error() {
        let net = build_mlp(&[4, 6, 3], 3).unwrap();
        let x = random_batch(2, 4, 4);
        let one = vec![DenseArray::ones(&[6, 4])];
        assert!(matches!(net.logits(&x, MaskSource::Fixed(&one)), Err(Error::Contract(_))));
    }

    #[test]
    fn threshold_forward_is_deterministic() {
        let mut net = build_mlp(&[3, 8, 2], 5).unwrap();
        let mut r = rng::stream(0, "m");
        for l in net.layers_mut() {
            l.mask.m_hat.values_mut().iter_mut().for_each(|v| *v = r.random_range(-2.0..2.0));
        }
        let x = random_batch(5, 3, 6);
        let a = net.logits(&x, MaskSource::Threshold).unwrap();
        let b = net.logits(&x, MaskSource::Threshold).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn saturated_positive_masks_equal_scaled_unmasked_forward() {
        let opts = NetworkOptions {
            mask_init: 5.0,
            rescale: RescaleStrategy::Smart,
            smart_init: Some(1.0),
            ..NetworkOptions::default()
        };
        let net = build_mlp_with(&[3, 8, 2], 5, &opts).unwrap();
        let x = random_batch(5, 3, 6);
        let a = net.logits(&x, MaskSource::Threshold).unwrap();
        let b = net.logits(&x, MaskSource::Unmasked).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn scale_placement_prefers_smaller_operand() {
        assert_eq!(ScalePlacement::choose(100, 10), ScalePlacement::Output);
        assert_eq!(ScalePlacement::choose(10, 100), ScalePlacement::Weights);
        assert_eq!(ScalePlacement::choose(10, 10), ScalePlacement::Weights);
    }
}
