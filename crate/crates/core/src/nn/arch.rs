//! Reference architectures.
//!
//! The convolutional family follows the small VGG-style networks of the
//! lottery-ticket line of work, with 3×3 convolutions (stride 1, pad 1),
//! ReLU, and 2×2 max pooling after every pair of convolutions:
//!
//! | variant | conv blocks                     | dense      |
//! |---------|---------------------------------|------------|
//! | conv2   | 64, 64, pool                    | 256, 256, n |
//! | conv4   | 64, 64, pool, 128, 128, pool    | 256, 256, n |
//! | conv6   | ... 256, 256, pool              | 256, 256, n |
//!
//! The input width of the first dense layer comes from shape propagation.
//! On 32×32×3 inputs conv2 has 4.30M weights, almost all in its first dense
//! layer (16·16·64 → 256).

use serde::{Deserialize, Serialize};

use super::init::{init_bias, init_weights};
use super::{Activation, LayerKind, MaskedLayer, NetworkOptions, Network, Stage};
use crate::error::{Error, Result};
use crate::mask::MaskParameters;
use crate::rescale::RescaleState;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvVariant {
    Conv2,
    Conv4,
    Conv6,
}

impl ConvVariant {
    pub fn block_widths(self) -> &'static [usize] {
        match self {
            ConvVariant::Conv2 => &[64],
            ConvVariant::Conv4 => &[64, 128],
            ConvVariant::Conv6 => &[64, 128, 256],
        }
    }
}

impl std::str::FromStr for ConvVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv2" => Ok(Self::Conv2),
            "conv4" => Ok(Self::Conv4),
            "conv6" => Ok(Self::Conv6),
            _ => Err(Error::Config(format!("unknown conv variant `{s}`"))),
        }
    }
}

pub const DENSE_WIDTHS: [usize; 2] = [256, 256];

/// Input geometry and channel thinning for the convolutional family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Every channel / unit count is divided by this (desk-scale runs).
    pub width_divisor: usize,
}

impl Default for ConvShape {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            width_divisor: 1,
        }
    }
}

fn make_layer(
    index: usize,
    kind: LayerKind,
    shape: &[usize],
    activation: Activation,
    last: bool,
    seed: u64,
    opts: &NetworkOptions,
) -> MaskedLayer {
    let mut wrng = rng::indexed_stream(seed, "init", index as u64);
    let weights = init_weights(shape, opts.weights, &mut wrng);
    let bias = opts.biases.then(|| {
        let mut brng = rng::indexed_stream(seed, "init-bias", index as u64);
        init_bias(shape[0], shape[1..].iter().product(), &mut brng)
    });
    let mask = if last && !opts.mask_last_layer {
        MaskParameters::exempt(shape)
    } else {
        MaskParameters::new(shape, opts.mask_init)
    };
    MaskedLayer {
        kind,
        weights,
        bias,
        mask,
        rescale: RescaleState::new(opts.rescale, opts.smart_init_value(), opts.dwr_reading),
        activation,
    }
}

pub fn build_mlp(layer_sizes: &[usize], init_seed: u64) -> Result<Network> {
    build_mlp_with(layer_sizes, init_seed, &NetworkOptions::default())
}

/// Fully-connected ReLU network; the last layer has no activation.
pub fn build_mlp_with(layer_sizes: &[usize], init_seed: u64, opts: &NetworkOptions) -> Result<Network> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(Error::Config(format!("invalid MLP layer sizes {layer_sizes:?}")));
    }
    let n = layer_sizes.len() - 1;
    let stages = (0..n)
        .map(|i| {
            let last = i + 1 == n;
            let act = if last { Activation::Identity } else { Activation::Relu };
            Stage::Masked(make_layer(
                i,
                LayerKind::Dense,
                &[layer_sizes[i + 1], layer_sizes[i]],
                act,
                last,
                init_seed,
                opts,
            ))
        })
        .collect();
    Ok(Network::new(stages, vec![layer_sizes[0]]))
}

pub fn build_conv_family(variant: ConvVariant, n_classes: usize, init_seed: u64) -> Result<Network> {
    build_conv_family_with(variant, n_classes, init_seed, &ConvShape::default(), &NetworkOptions::default())
}

pub fn build_conv_family_with(
    variant: ConvVariant,
    n_classes: usize,
    init_seed: u64,
    shape: &ConvShape,
    opts: &NetworkOptions,
) -> Result<Network> {
    if shape.width_divisor == 0 || n_classes == 0 {
        return Err(Error::Config("width divisor and class count must be positive".into()));
    }
    let thin = |c: usize| (c / shape.width_divisor).max(1);
    let (mut c, mut h, mut w) = (shape.channels, shape.height, shape.width);
    let mut stages = Vec::new();
    let mut index = 0;
    for &width in variant.block_widths() {
        for _ in 0..2 {
            let f = thin(width);
            stages.push(Stage::Masked(make_layer(
                index,
                LayerKind::Conv2d { stride: 1, padding: 1 },
                &[f, c, 3, 3],
                Activation::Relu,
                false,
                init_seed,
                opts,
            )));
            index += 1;
            c = f;
        }
        if h < 2 || w < 2 {
            return Err(Error::Config(format!("input {}×{} too small for {variant:?}", shape.height, shape.width)));
        }
        stages.push(Stage::MaxPool2);
        h /= 2;
        w /= 2;
    }
    stages.push(Stage::Flatten);
    let mut d = c * h * w;
    let dense: Vec<usize> = DENSE_WIDTHS.iter().map(|&u| thin(u)).chain([n_classes]).collect();
    for (i, &units) in dense.iter().enumerate() {
        let last = i + 1 == dense.len();
        let act = if last { Activation::Identity } else { Activation::Relu };
        stages.push(Stage::Masked(make_layer(index, LayerKind::Dense, &[units, d], act, last, init_seed, opts)));
        index += 1;
        d = units;
    }
    Ok(Network::new(stages, vec![shape.channels, shape.height, shape.width]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::DenseArray;
    use crate::nn::MaskSource;

    #[test]
    fn conv2_layout_and_parameter_count() {
        let net = build_conv_family(ConvVariant::Conv2, 10, 0).unwrap();
        let kinds: Vec<_> = net.layers().map(|l| l.kind).collect();
        assert_eq!(kinds.iter().filter(|k| matches!(k, LayerKind::Conv2d { .. })).count(), 2);
        assert_eq!(kinds.iter().filter(|k| matches!(k, LayerKind::Dense)).count(), 3);
        // 1728 + 36864 + 16384·256 + 256·256 + 256·10
        assert_eq!(net.weight_count(), 4_300_992);
    }

    #[test]
    fn conv4_and_conv6_depths() {
        let thin = ConvShape { width_divisor: 8, ..ConvShape::default() };
        let o = NetworkOptions::default();
        assert_eq!(build_conv_family_with(ConvVariant::Conv4, 10, 0, &thin, &o).unwrap().depth(), 7);
        assert_eq!(build_conv_family_with(ConvVariant::Conv6, 10, 0, &thin, &o).unwrap().depth(), 9);
    }

    #[test]
    fn output_shape_is_batch_by_classes() {
        let shape = ConvShape { width_divisor: 16, ..ConvShape::default() };
        let net = build_conv_family_with(ConvVariant::Conv6, 10, 1, &shape, &NetworkOptions::default()).unwrap();
        let x = DenseArray::full(&[2, 3, 32, 32], 0.5);
        let y = net.logits(&x, MaskSource::Threshold).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
    }

    #[test]
    fn same_seed_same_weights() {
        let shape = ConvShape { width_divisor: 8, ..ConvShape::default() };
        let o = NetworkOptions::default();
        let a = build_conv_family_with(ConvVariant::Conv4, 10, 42, &shape, &o).unwrap();
        let b = build_conv_family_with(ConvVariant::Conv4, 10, 42, &shape, &o).unwrap();
        let c = build_conv_family_with(ConvVariant::Conv4, 10, 43, &shape, &o).unwrap();
        assert_eq!(a.frozen_hash(), b.frozen_hash());
        assert_ne!(a.frozen_hash(), c.frozen_hash());
    }

    #[test]
    fn last_layer_can_be_exempt() {
        let opts = NetworkOptions { mask_last_layer: false, ..NetworkOptions::default() };
        let net = build_mlp_with(&[2, 4, 2], 0, &opts).unwrap();
        let flags: Vec<bool> = net.masks().map(|m| m.trainable).collect();
        assert_eq!(flags, vec![true, false]);
    }
}
