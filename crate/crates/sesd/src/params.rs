//! Named parameter storage with gradient accumulators and seeded init.

use crate::tensor::{Dtype, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Truncated normal (resampled beyond two standard deviations).
    TruncNormal { std: f64 },
    Zeros,
    Ones,
}

/// Declares one parameter: name, shape, init and whether weight decay
/// applies (biases, norm gains and embeddings are excluded).
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub decay: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init, decay: bool) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), init, decay }
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub decay: bool,
}

/// Map from hierarchical dot-separated names to tensors plus gradient
/// accumulators. Iteration order is the name order, which makes gradient
/// accumulation, optimizer updates and checkpoints deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Parameter>,
}

/// Seed for one tensor derived from the global seed and the tensor name, so
/// that adding or removing parameters elsewhere never shifts another
/// tensor's initialization stream.
pub fn name_seed(global_seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn trunc_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng, dtype: Dtype) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let x: f64 = rng.sample::<f64, _>(StandardNormal);
        if x.abs() <= 2.0 {
            data.push(x * std);
        }
    }
    Tensor::new(shape.to_vec(), data, dtype).unwrap()
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materialize a layout of specs with per-name deterministic init.
    pub fn from_specs(specs: &[ParamSpec], global_seed: u64, dtype: Dtype) -> Result<Self> {
        let mut store = ParameterStore::new();
        for spec in specs {
            let value = match spec.init {
                Init::TruncNormal { std } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(global_seed, &spec.name));
                    trunc_normal(&spec.shape, std, &mut rng, dtype)
                }
                Init::Zeros => Tensor::zeros(&spec.shape, dtype),
                Init::Ones => Tensor::full(&spec.shape, 1.0, dtype),
            };
            store.register(&spec.name, value, spec.decay)?;
        }
        Ok(store)
    }

    pub fn register(&mut self, name: &str, value: Tensor, decay: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Internal(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape(), Dtype::Double);
        self.entries.insert(name.to_string(), Parameter { value, grad, decay });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Adds `delta` into the gradient accumulator of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.shape() != delta.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} vs parameter {:?} for {name}",
                delta.shape(),
                p.grad.shape()
            )));
        }
        crate::tensor::axpy(1.0, delta.data(), p.grad.data_mut());
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 of all values in name order; stable identity for frozen state.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update(name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_name_init_is_stable_under_layout_changes() {
        let a = vec![
            ParamSpec::new("w1", &[4, 4], Init::TruncNormal { std: 0.02 }, true),
            ParamSpec::new("w2", &[4, 4], Init::TruncNormal { std: 0.02 }, true),
        ];
        let b = vec![ParamSpec::new("w2", &[4, 4], Init::TruncNormal { std: 0.02 }, true)];
        let sa = ParameterStore::from_specs(&a, 1, Dtype::Double).unwrap();
        let sb = ParameterStore::from_specs(&b, 1, Dtype::Double).unwrap();
        assert_eq!(sa.get("w2").unwrap().value, sb.get("w2").unwrap().value);
        assert_ne!(
            sa.get("w1").unwrap().value.data(),
            sa.get("w2").unwrap().value.data()
        );
    }

    #[test]
    fn trunc_normal_bounded() {
        let spec = vec![ParamSpec::new("w", &[1000], Init::TruncNormal { std: 0.02 }, true)];
        let s = ParameterStore::from_specs(&spec, 9, Dtype::Double).unwrap();
        let v = &s.get("w").unwrap().value;
        assert!(v.max_abs() <= 0.04 + 1e-12);
        assert!(v.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.register("a.b", Tensor::zeros(&[2], Dtype::Double), true).unwrap();
        assert!(s.register("a.b", Tensor::zeros(&[2], Dtype::Double), true).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParameterStore::new();
        s.register("a", Tensor::full(&[2], 1.0, Dtype::Double), true).unwrap();
        let c1 = s.checksum();
        s.get_mut("a").unwrap().value.data_mut()[0] = 2.0;
        assert_ne!(c1, s.checksum());
    }
}
