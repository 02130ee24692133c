//! Named parameter storage and initializers.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Flat named parameter set. Registration order is the canonical order used
/// by checkpoints and the optimizer, so model constructors must register in
/// a deterministic order.
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn register(&mut self, name: &str, value: ArrayD<F>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name: {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Replace a value, keeping the shape contract.
    pub fn load(&mut self, name: &str, value: ArrayD<F>) -> Result<(), String> {
        let id = self
            .id_by_name(name)
            .ok_or_else(|| format!("unknown parameter {name}"))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(format!(
                "shape mismatch for {name}: expected {:?}, got {:?}",
                self.values[id.0].shape(),
                value.shape()
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Uniform Kaiming fan-in initialization, the default for conv and linear
/// weights feeding ReLU-family activations.
pub fn kaiming_uniform<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    sample_uniform(rng, shape, bound)
}

/// Xavier/Glorot uniform, for saturating activations and output layers.
pub fn xavier_uniform<F: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> ArrayD<F> {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    sample_uniform(rng, shape, bound)
}

/// Uniform in `[-1/sqrt(hidden), 1/sqrt(hidden)]`, used for recurrent weights.
pub fn recurrent_uniform<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], hidden: usize) -> ArrayD<F> {
    let bound = 1.0 / (hidden.max(1) as f64).sqrt();
    sample_uniform(rng, shape, bound)
}

fn sample_uniform<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::of(rng.random_range(-bound..bound))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), F::one())
}
