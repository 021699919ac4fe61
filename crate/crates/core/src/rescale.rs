//! Weight adaptation after masking.
//!
//! - Smart rescale: one learned scalar per layer multiplies the masked
//!   weights.
//! - Dynamic weight rescale: the scalar is recomputed from every sampled
//!   mask as the inverse observed keep rate and never trained.
//! - Signed constant: a weight transform applied once at initialisation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseArray, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RescaleStrategy {
    None,
    #[default]
    Smart,
    Dynamic,
}

impl std::str::FromStr for RescaleStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "smart" | "sr" => Ok(Self::Smart),
            "dynamic" | "dwr" => Ok(Self::Dynamic),
            _ => Err(Error::Config(format!("unknown rescale strategy `{s}` (none|smart|dynamic)"))),
        }
    }
}

/// Which rate the dynamic rescale inverts. `Keep` compensates the removed
/// mass; `Prune` is the literal "inverse pruning rate" reading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DwrReading {
    #[default]
    Keep,
    Prune,
}

impl std::str::FromStr for DwrReading {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keep" => Ok(Self::Keep),
            "prune" => Ok(Self::Prune),
            _ => Err(Error::Config(format!("unknown dwr reading `{s}` (keep|prune)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RescaleState {
    pub strategy: RescaleStrategy,
    /// Learned factor `s` (single entry). Carries a gradient buffer only
    /// under [`RescaleStrategy::Smart`].
    pub scale: DenseArray,
    pub dwr_reading: DwrReading,
}

impl RescaleState {
    pub fn none() -> Self {
        Self {
            strategy: RescaleStrategy::None,
            scale: DenseArray::scalar(1.0),
            dwr_reading: DwrReading::Keep,
        }
    }

    pub fn smart(init: f32) -> Self {
        Self {
            strategy: RescaleStrategy::Smart,
            scale: DenseArray::scalar(init).with_grad(),
            dwr_reading: DwrReading::Keep,
        }
    }

    pub fn dynamic(reading: DwrReading) -> Self {
        Self {
            strategy: RescaleStrategy::Dynamic,
            scale: DenseArray::scalar(1.0),
            dwr_reading: reading,
        }
    }

    pub fn new(strategy: RescaleStrategy, smart_init: f32, reading: DwrReading) -> Self {
        match strategy {
            RescaleStrategy::None => Self::none(),
            RescaleStrategy::Smart => Self::smart(smart_init),
            RescaleStrategy::Dynamic => Self::dynamic(reading),
        }
    }

    /// The factor this state applies for a given binary mask.
    pub fn factor(&self, mask: &DenseArray) -> f32 {
        match self.strategy {
            RescaleStrategy::None => 1.0,
            RescaleStrategy::Smart => self.scale.values()[0],
            RescaleStrategy::Dynamic => dwr_factor_with(mask, self.dwr_reading),
        }
    }
}

/// Inverse keep rate of a binary mask, floored at one kept weight.
pub fn dwr_factor(mask: &DenseArray) -> f32 {
    dwr_factor_with(mask, DwrReading::Keep)
}

pub fn dwr_factor_with(mask: &DenseArray, reading: DwrReading) -> f32 {
    let n = mask.len();
    // u32 lanes vectorise; chunks keep each partial count far below 2^32, so
    // the wrapping add never wraps and needs no overflow check
    let kept: usize = mask
        .values()
        .chunks(1 << 20)
        .map(|c| c.iter().fold(0u32, |a, &v| a.wrapping_add(u32::from(v != 0.0))) as usize)
        .sum();
    let counted = match reading {
        DwrReading::Keep => kept,
        DwrReading::Prune => n - kept,
    };
    let floor = 1.0 / n as f64;
    let mut rate = counted as f64 / n as f64;
    if rate < floor {
        log::warn!("dynamic rescale: observed rate 0 over {n} weights, flooring at 1/{n}");
        rate = floor;
    }
    (1.0 / rate) as f32
}

/// Output of [`apply_rescale`].
#[derive(Clone, Copy, Debug)]
pub struct Rescaled {
    pub out: Var,
    /// Tape handle of the learned factor under smart rescale.
    pub scale: Option<Var>,
    /// Factor that was applied.
    pub factor: f32,
}

/// Multiplies `x` by the layer factor. `x` is normally the masked weight
/// array; because the factor is a scalar it may equally be the layer's
/// pre-activation. `mask` is the binary mask used in this forward.
pub fn apply_rescale(tape: &mut Tape, state: &RescaleState, x: Var, mask: &DenseArray) -> Result<Rescaled> {
    let started = tape.is_profiling().then(Instant::now);
    let res = match state.strategy {
        RescaleStrategy::None => Rescaled {
            out: x,
            scale: None,
            factor: 1.0,
        },
        RescaleStrategy::Smart => {
            let s = tape.leaf(&state.scale, true);
            let out = tape.scale(x, s)?;
            tape.mark_rescale(out);
            Rescaled {
                out,
                scale: Some(s),
                factor: state.scale.values()[0],
            }
        }
        RescaleStrategy::Dynamic => {
            let factor = dwr_factor_with(mask, state.dwr_reading);
            let out = tape.scale_const(x, factor)?;
            tape.mark_rescale(out);
            Rescaled {
                out,
                scale: None,
                factor,
            }
        }
    };
    if let Some(t) = started {
        tape.add_rescale_time(t.elapsed());
    }
    Ok(res)
}

/// Replaces every weight by `sign(w) · σ_w`, with `sign(0) = +1` and `σ_w`
/// the population standard deviation of the layer about zero, the mean of
/// the initialisation distribution.
pub fn signed_constant_transform(w: &DenseArray) -> DenseArray {
    let n = w.len() as f64;
    let std = (w.values().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / n).sqrt() as f32;
    if std == 0.0 {
        log::warn!("signed constant transform on a layer with zero spread; returning zeros");
        return DenseArray::zeros(w.shape());
    }
    w.map(|v| if v < 0.0 { -std } else { std })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dwr_examples() {
        assert_eq!(dwr_factor(&DenseArray::ones(&[8])), 1.0);
        assert_eq!(dwr_factor(&DenseArray::from_vec(vec![1.0, 0.0, 1.0, 0.0])), 2.0);
        assert!((dwr_factor(&DenseArray::from_vec(vec![1.0, 1.0, 0.0, 1.0])) - 4.0 / 3.0).abs() < 1e-7);
        // all pruned: floor at one kept weight
        assert_eq!(dwr_factor(&DenseArray::zeros(&[5])), 5.0);
        // literal reading: inverse pruning rate
        assert_eq!(dwr_factor_with(&DenseArray::from_vec(vec![1.0, 1.0, 1.0, 0.0]), DwrReading::Prune), 4.0);
    }

    #[test]
    fn apply_rescale_examples() {
        let w = DenseArray::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        let mask = DenseArray::from_vec(vec![1.0, 1.0, 0.0, 1.0]);
        let mut t = Tape::new();
        let x = t.constant(&w);

        let r = apply_rescale(&mut t, &RescaleState::none(), x, &mask).unwrap();
        assert_eq!(t.value(r.out), w.values());

        let r = apply_rescale(&mut t, &RescaleState::smart(1.0), x, &mask).unwrap();
        assert_eq!(t.value(r.out), w.values());
        assert!(r.scale.is_some());

        let r = apply_rescale(&mut t, &RescaleState::dynamic(DwrReading::Keep), x, &mask).unwrap();
        assert!((r.factor - 4.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn smart_scale_gradient_is_sum_of_products() {
        let w = DenseArray::from_vec(vec![1.0, -2.0, 3.0]);
        let mut t = Tape::new();
        let x = t.constant(&w);
        let r = apply_rescale(&mut t, &RescaleState::smart(2.0), x, &DenseArray::ones(&[3])).unwrap();
        let l = t.sum(r.out).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(r.scale.unwrap()).unwrap(), &[2.0]);
    }

    #[test]
    fn signed_constant_examples() {
        let w = DenseArray::from_vec(vec![-2.0, 2.0]);
        assert_eq!(signed_constant_transform(&w).values(), &[-2.0, 2.0]);
        let w = DenseArray::from_vec(vec![0.0, -1.0, 3.0, 0.5]);
        let sc = signed_constant_transform(&w);
        let mag = sc.values()[0];
        assert!(mag > 0.0);
        assert!(sc.values().iter().all(|v| v.abs() == mag));
        assert_eq!(sc.values()[1], -mag);
        assert_eq!(signed_constant_transform(&DenseArray::zeros(&[3])).values(), &[0.0; 3]);
    }
}
