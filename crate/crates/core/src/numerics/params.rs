use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Initialization scheme for a declared parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[−s, s]`, `s = sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    Zeros,
    Constant(f64),
    Uniform(f64),
}

impl Init {
    /// Half-width of the interval the initial values are drawn from.
    pub fn bound(self, shape: &[usize]) -> f64 {
        match self {
            Init::Glorot => {
                let (fan_out, fan_in) = match shape {
                    [n] => (1, *n),
                    [o, i] => (*o, *i),
                    [o, rest @ ..] => (*o, rest.iter().product()),
                    [] => (1, 1),
                };
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            }
            Init::Zeros => 0.0,
            Init::Constant(c) => c.abs(),
            Init::Uniform(s) => s,
        }
    }
}

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    rng_seed: u64,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; only needs to be stable across runs and platforms.
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.rng_seed
    }

    /// Declares and initializes a parameter. Each parameter draws from its own
    /// stream keyed by `(seed, name)`, so declaration order does not matter.
    pub fn declare(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::contract(format!("parameter `{name}` declared twice")));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!("parameter `{name}` has shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Glorot | Init::Uniform(_) => {
                let s = init.bound(shape);
                let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed ^ name_hash(name));
                (0..n).map(|_| rng.gen_range(-s..=s)).collect()
            }
        };
        self.entries
            .insert(name.to_string(), Tensor::new(shape.to_vec(), data)?);
        Ok(())
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.entries.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rounds every value to `f32` precision, the precision of `OCF1` files.
    pub fn round_to_f32(&mut self) {
        for t in self.entries.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = f64::from(*x as f32));
        }
    }

    pub fn clear_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::clear_grad);
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Same values, ignoring gradient slots.
    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, a), (n2, b))| n1 == n2 && a.shape() == b.shape() && a.data() == b.data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_within_declared_bounds() {
        let mut p = ParamStore::new(11);
        p.declare("w", &[8, 4], Init::Glorot).unwrap();
        p.declare("b", &[8], Init::Zeros).unwrap();
        p.declare("lambda", &[1], Init::Constant(0.0)).unwrap();
        let s = Init::Glorot.bound(&[8, 4]);
        assert!((s - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(p.get("w").unwrap().data().iter().all(|v| v.abs() <= s && v.is_finite()));
        assert!(p.get("b").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["b", "lambda", "w"]);
    }

    #[test]
    fn declaration_order_does_not_change_values() {
        let mut a = ParamStore::new(3);
        a.declare("x", &[3, 3], Init::Glorot).unwrap();
        a.declare("y", &[2, 3], Init::Glorot).unwrap();
        let mut b = ParamStore::new(3);
        b.declare("y", &[2, 3], Init::Glorot).unwrap();
        b.declare("x", &[3, 3], Init::Glorot).unwrap();
        assert!(a.values_equal(&b));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::new(0);
        p.declare("w", &[1], Init::Zeros).unwrap();
        assert!(p.declare("w", &[1], Init::Zeros).is_err());
    }
}
