use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::DenseArray;
use crate::error::{Error, Result};
use crate::rescale::signed_constant_transform;
use crate::rng::Rng;

/// Distribution of the frozen weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// `N(0, 2 / fan_in)`.
    #[default]
    Kaiming,
    /// Kaiming normal with the std divided by `sqrt(0.5)`, the keep
    /// probability of a fresh mask.
    KaimingScaled,
    /// Kaiming draw followed by the signed constant transform.
    SignedConstant,
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kaiming" | "kaiming-normal" => Ok(Self::Kaiming),
            "kaiming-scaled" => Ok(Self::KaimingScaled),
            "signed-constant" | "sc" => Ok(Self::SignedConstant),
            _ => Err(Error::Config(format!(
                "unknown weight scheme `{s}` (kaiming|kaiming-scaled|signed-constant)"
            ))),
        }
    }
}

const SCALED_KEEP_PROB: f64 = 0.5;

/// Draws a weight array; `fan_in` is the product of all axes after the first.
pub fn init_weights(shape: &[usize], scheme: WeightScheme, rng: &mut Rng) -> DenseArray {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let mut std = (2.0 / fan_in as f64).sqrt();
    if scheme == WeightScheme::KaimingScaled {
        std /= SCALED_KEEP_PROB.sqrt();
    }
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
        .collect();
    let w = DenseArray::new(shape.to_vec(), values).expect("shape product matches");
    match scheme {
        WeightScheme::SignedConstant => signed_constant_transform(&w),
        _ => w,
    }
}

/// Frozen bias, uniform on `±1/sqrt(fan_in)`.
pub fn init_bias(len: usize, fan_in: usize, rng: &mut Rng) -> DenseArray {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    DenseArray::from_vec((0..len).map(|_| rng.random_range(-bound..bound)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn std_of(a: &DenseArray) -> f64 {
        let n = a.len() as f64;
        let mean = a.sum() / n;
        (a.values().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn kaiming_std_matches_fan_in() {
        let w = init_weights(&[500, 200], WeightScheme::Kaiming, &mut Rng::seed_from_u64(1));
        let s = std_of(&w);
        assert!((s - 0.1).abs() / 0.1 < 0.02, "std {s}");
    }

    #[test]
    fn scaled_kaiming_is_sqrt2_wider() {
        let a = init_weights(&[500, 200], WeightScheme::Kaiming, &mut Rng::seed_from_u64(1));
        let b = init_weights(&[500, 200], WeightScheme::KaimingScaled, &mut Rng::seed_from_u64(1));
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((y - x * 2f32.sqrt()).abs() <= 1e-6 * y.abs().max(1e-3));
        }
    }

    #[test]
    fn signed_constant_has_one_magnitude() {
        let w = init_weights(&[16, 3, 3, 3], WeightScheme::SignedConstant, &mut Rng::seed_from_u64(4));
        let mag = w.values()[0].abs();
        assert!(w.values().iter().all(|v| v.abs() == mag));
        assert!(w.values().iter().any(|&v| v < 0.0));
    }
}
