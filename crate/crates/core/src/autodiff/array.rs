use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Row-major `f32` array with an optional gradient buffer.
///
/// Values sit behind an `Arc` so a tape can hold a frozen weight array
/// without copying it; [`DenseArray::values_mut`] copies on write only while
/// such a reference is alive.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    values: Arc<Vec<f32>>,
    grad: Option<Vec<f32>>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Input(format!("array extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Input(format!(
                "shape {shape:?} holds {n} values but {} were given",
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values: Arc::new(values),
            grad: None,
        })
    }

    pub(crate) fn from_shared(shape: Vec<usize>, values: Arc<Vec<f32>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape,
            values,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("positive extents")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_vec(values: Vec<f32>) -> Self {
        let n = values.len();
        Self::new(vec![n], values).expect("non-empty vector")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.values).as_mut_slice()
    }

    pub(crate) fn shared(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.values)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Allocates a zeroed gradient buffer, marking the array as trainable.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.len()]);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if g.len() != self.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Hash of shape and value bits; used to assert that frozen weights stay
    /// frozen.
    pub fn content_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.shape.hash(&mut h);
        for v in self.values.iter() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_shared(self.shape.clone(), Arc::new(self.values.iter().map(|&v| f(v)).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_length() {
        assert!(DenseArray::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(DenseArray::new(vec![2, 0], vec![]).is_err());
        assert!(DenseArray::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grads_accumulate() {
        let mut a = DenseArray::zeros(&[3]).with_grad();
        a.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        a.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(a.grad().unwrap(), &[2.0, 3.0, 4.0]);
        a.zero_grad();
        assert_eq!(a.grad().unwrap(), &[0.0, 0.0, 0.0]);
        assert!(a.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn copy_on_write_keeps_shared_values_intact() {
        let mut a = DenseArray::ones(&[4]);
        let held = a.shared();
        a.values_mut()[0] = 5.0;
        assert_eq!(held[0], 1.0);
        assert_eq!(a.values()[0], 5.0);
    }

    #[test]
    fn hash_tracks_bits() {
        let a = DenseArray::from_vec(vec![1.0, 2.0]);
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.values_mut()[1] = f32::from_bits(2.0f32.to_bits() + 1);
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
