use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Param {
    value: Tensor,
    grad: Vec<Real>,
}

/// Named trainable tensors plus the generator that initialized them.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter {name:?}")));
        }
        let grad = vec![0.0; value.numel()];
        self.params.insert(
            name.to_string(),
            Param {
                value: value.with_grad(true),
                grad,
            },
        );
        Ok(())
    }

    fn uniform(&mut self, shape: &[usize], bound: Real) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = self.rng.gen_range(-bound..=bound);
        }
        t
    }

    /// Lookup table initialized uniformly in ±0.1.
    pub fn add_embedding(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        let t = self.uniform(&[rows, cols], 0.1);
        self.insert(name, t)
    }

    /// Weight matrix initialized uniformly in ±sqrt(6 / (rows + cols)).
    pub fn add_matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        let bound = (6.0 / (rows + cols) as Real).sqrt();
        let t = self.uniform(&[rows, cols], bound);
        self.insert(name, t)
    }

    /// Weight vector, scaled as a matrix with one output.
    pub fn add_vector(&mut self, name: &str, len: usize) -> Result<()> {
        let bound = (6.0 / (len + 1) as Real).sqrt();
        let t = self.uniform(&[len], bound);
        self.insert(name, t)
    }

    pub fn add_bias(&mut self, name: &str, len: usize) -> Result<()> {
        self.insert(name, Tensor::zeros(&[len]))
    }

    pub fn add_scalar(&mut self, name: &str, value: Real) -> Result<()> {
        self.insert(name, Tensor::scalar(value))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    /// Replaces the value of an existing parameter of the same shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set",
                shapes: format!("{:?} vs {:?}", p.value.shape(), value.shape()),
            });
        }
        p.value = value.with_grad(true);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn grad(&self, name: &str) -> Option<&[Real]> {
        self.params.get(name).map(|p| p.grad.as_slice())
    }

    pub fn add_grad(&mut self, name: &str, g: &[Real]) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        if p.grad.len() != g.len() {
            return Err(Error::Shape {
                op: "add_grad",
                shapes: format!("{:?} vs [{}]", p.value.shape(), g.len()),
            });
        }
        for (a, b) in p.grad.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> Real {
        self.params
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<Real>()
            .sqrt()
    }

    pub(crate) fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut [Real], &mut [Real])) {
        for (name, p) in self.params.iter_mut() {
            f(name, p.value.data_mut(), &mut p.grad);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_ranges_and_determinism() {
        let build = || {
            let mut s = ParamStore::new(7);
            s.add_embedding("e", 10, 4).unwrap();
            s.add_matrix("w", 4, 2).unwrap();
            s.add_bias("b", 2).unwrap();
            s
        };
        let (a, b) = (build(), build());
        assert_eq!(a.get("e"), b.get("e"));
        assert!(a.get("e").unwrap().data().iter().all(|v| v.abs() <= 0.1));
        let bound = (6.0 as Real / 6.0).sqrt();
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(a.get("b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.iter().all(|(_, t)| t.requires_grad()));
        assert_ne!(ParamStore::new(8).clone().seed(), a.seed());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(0);
        s.add_bias("b", 2).unwrap();
        assert!(s.add_bias("b", 2).is_err());
    }
}
