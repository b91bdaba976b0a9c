//! Dense row-major tensors and named parameter collections.

use std::collections::BTreeMap;

use num_traits::Float;

use crate::{Error, Result};

/// Scalar type the tensor core is generic over: f32 for training storage,
/// f64 for gradient checks.
pub trait Scalar:
    Float + std::ops::AddAssign + std::iter::Sum + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense multidimensional float array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::new(shape, data.iter().map(|&x| S::from_f64(x)).collect())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Errors unless every stored value is finite.
    pub fn validate_finite(&self, what: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Contract(format!(
                    "{what}: non-finite value {:?} at flat index {i}",
                    v
                )));
            }
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Named tensor collection with deterministic (sorted) iteration order.
/// Holds model parameters, their gradients, and optimizer moment buffers.
pub type NamedTensors<S> = BTreeMap<String, Tensor<S>>;

/// Sum `other` into `acc` entry-wise, inserting missing names.
pub fn accumulate_named<S: Scalar>(acc: &mut NamedTensors<S>, other: &NamedTensors<S>) {
    for (name, t) in other {
        match acc.get_mut(name) {
            Some(a) => {
                debug_assert_eq!(a.shape, t.shape, "gradient shape drift for {name}");
                for (x, y) in a.data.iter_mut().zip(&t.data) {
                    *x += *y;
                }
            }
            None => {
                acc.insert(name.clone(), t.clone());
            }
        }
    }
}
