//! Named parameter storage with deterministic iteration order.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Ordered collection of named parameter tensors. Iteration follows
/// insertion order, which fixes the optimizer update order and the
/// checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<(String, ArrayD<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    /// Insertion position of a name, usable to index aligned tensor lists.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::InvalidArgument(format!("unknown parameter {name}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

/// Uniform fan-in initialization: weights and bias drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn init_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut draw = |n: usize| -> ArrayD<f64> {
        ArrayD::from_shape_vec(
            IxDyn(&[n]),
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
        )
        .unwrap()
    };
    let w = draw(fan_in * fan_out)
        .into_shape_with_order(IxDyn(&[fan_in, fan_out]))
        .unwrap();
    let b = draw(fan_out);
    store.insert(&format!("{prefix}.w"), w);
    store.insert(&format!("{prefix}.b"), b);
}

/// Zero-initialized linear layer with an arbitrary bias vector; used for
/// the final pose projection so refinement starts from a fixed pose.
pub(crate) fn init_linear_zero(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    bias: &[f64],
) {
    store.insert(
        &format!("{prefix}.w"),
        ArrayD::zeros(IxDyn(&[fan_in, bias.len()])),
    );
    store.insert(
        &format!("{prefix}.b"),
        ArrayD::from_shape_vec(IxDyn(&[bias.len()]), bias.to_vec()).unwrap(),
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn insertion_order_is_preserved() {
        let mut store = ParamStore::new();
        store.insert("b", ArrayD::zeros(IxDyn(&[2])));
        store.insert("a", ArrayD::zeros(IxDyn(&[3])));
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(store.total_elements(), 5);
    }

    #[test]
    fn unknown_name_is_an_error() {
        let store = ParamStore::new();
        assert!(store.get("missing").is_err());
    }

    #[test]
    fn init_linear_respects_fan_in_bound() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(7);
        init_linear(&mut store, &mut rng, "l", 16, 8);
        let bound = 1.0 / 4.0;
        let w = store.get("l.w").unwrap();
        assert_eq!(w.shape(), [16, 8]);
        assert!(w.iter().all(|v| v.abs() < bound));
        assert!(w.iter().any(|v| v.abs() > bound / 10.0));
    }
}
