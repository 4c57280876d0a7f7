//! Small parameterized building blocks shared by the encoder and the heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::Result;

pub const INIT_STDDEV: f64 = 0.02;

/// Normal samples with standard deviation `std`, redrawn until they fall
/// within two standard deviations.
pub fn truncated_normal(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive stddev");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

/// Affine map `x·W + b` with `W: [input, output]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = Tensor::new(vec![input, output], truncated_normal(rng, input * output, INIT_STDDEV))?;
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]))?;
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            weight: store.expect(&format!("{name}.weight"), &[input, output])?,
            bias: store.expect(&format!("{name}.bias"), &[output])?,
            input,
            output,
        })
    }

    /// Infers the shape from the stored weight.
    pub fn bind_any(store: &ParamStore, name: &str) -> Option<Result<Self>> {
        let w = store.id_of(&format!("{name}.weight"))?;
        let shape = store.get(w).shape().to_vec();
        if shape.len() != 2 {
            return Some(Err(crate::Error::Data(format!(
                "{name}.weight must be a matrix, got {shape:?}"
            ))));
        }
        Some(Self::bind(store, name, shape[0], shape[1]))
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Layer-norm gain and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub const EPS: f64 = 1e-6;

    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.expect(&format!("{name}.gain"), &[dim])?,
            bias: store.expect(&format!("{name}.bias"), &[dim])?,
        })
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: NodeId) -> Result<NodeId> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, Self::EPS)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_stays_within_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xs = truncated_normal(&mut rng, 10_000, 0.02);
        assert!(xs.iter().all(|v| v.abs() <= 0.04));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn dense_bind_checks_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Dense::init(&mut store, "d", 3, 2, &mut rng).unwrap();
        assert!(Dense::bind(&store, "d", 3, 2).is_ok());
        assert!(Dense::bind(&store, "d", 2, 3).is_err());
        assert_eq!(Dense::bind_any(&store, "d").unwrap().unwrap().output, 2);
        assert!(Dense::bind_any(&store, "missing").is_none());
    }
}
