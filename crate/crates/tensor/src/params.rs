//! Named parameter storage and initializers.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Gradients, Var};
use crate::tensor::Tensor;

/// Ordered map of parameter name to value. Insertion order is the canonical
/// order used by optimizers and checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Parameter handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.values[i]),
            None => Err(TensorError::UnknownParam(name.to_string())),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a differentiable leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, true)
    }

    /// Records every parameter as a constant; for inference.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Gradients for every parameter, in store order.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Tensor> {
        bound.vars.iter().map(|&v| grads.take(v)).collect()
    }

    /// Order-sensitive FNV-1a digest over names and value bits.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            feed(name.as_bytes());
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Normal(0, std) truncated to ±2·std by resampling.
pub fn truncated_normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            let z = standard_normal(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

/// Glorot/Xavier uniform for a `fan_in × fan_out` weight.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Tensor::from_vec(fan_in, fan_out, data).expect("shape")
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn insertion_order_is_kept() {
        let mut p = ParamStore::new();
        p.insert("b", Tensor::scalar(1.0));
        p.insert("a", Tensor::scalar(2.0));
        p.insert("b", Tensor::scalar(3.0));
        assert_eq!(p.names(), &["b".to_string(), "a".to_string()]);
        assert_eq!(p.get("b").unwrap().item().unwrap(), 3.0);
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = truncated_normal(50, 50, 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.002);
    }

    #[test]
    fn digest_changes_with_values() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::row(&[1.0, 2.0]));
        let d0 = p.digest();
        p.get_mut("w").unwrap().data_mut()[1] = 2.5;
        assert_ne!(d0, p.digest());
    }
}
