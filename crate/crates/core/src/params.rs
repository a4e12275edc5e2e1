//! Named parameter storage.
//!
//! Parameters live as plain value buffers between steps. Each training
//! step binds them to fresh graph leaves, runs forward/backward, then
//! reads gradients back by name. The momentum branch binds its values
//! with `requires_grad = false`, so no gradient can ever reach it.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::PixproError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// BN scale/shift and biases: excluded from weight decay and LARS
    /// trust adaptation.
    pub decay_exempt: bool,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<ParamDef>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>, decay_exempt: bool) {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(ParamDef {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
            decay_exempt,
        });
    }

    pub fn get(&self, name: &str) -> &ParamDef {
        &self.params[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamDef {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamDef> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamDef> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Bind every parameter to a fresh graph leaf for one step.
    pub fn bind(&self, requires_grad: bool) -> LeafSet {
        let mut leaves = Vec::with_capacity(self.params.len());
        let mut index = HashMap::new();
        for p in &self.params {
            index.insert(p.name.clone(), leaves.len());
            leaves.push(Tensor::leaf(&p.shape, p.values.clone(), requires_grad));
        }
        LeafSet { leaves, index }
    }

    /// Exponential moving average towards `online`:
    /// `self <- m * self + (1-m) * online`, elementwise.
    pub fn momentum_update(&mut self, online: &ParamSet, m: f64) -> Result<(), PixproError> {
        assert!((0.0..=1.0).contains(&m), "momentum m={m} out of [0,1]");
        for target in self.params.iter_mut() {
            let src = online
                .index
                .get(&target.name)
                .map(|i| &online.params[*i])
                .ok_or_else(|| {
                    PixproError::Config(format!("momentum source missing `{}`", target.name))
                })?;
            if src.shape != target.shape {
                return Err(PixproError::Tensor(
                    crate::error::TensorError::ShapeMismatch {
                        op: "momentum_update",
                        lhs: target.shape.clone(),
                        rhs: src.shape.clone(),
                    },
                ));
            }
            for (t, o) in target.values.iter_mut().zip(&src.values) {
                *t = m * *t + (1.0 - m) * o;
            }
        }
        Ok(())
    }
}

/// Graph leaves bound from a [`ParamSet`] for one forward/backward pass.
pub struct LeafSet {
    leaves: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl LeafSet {
    /// Build a leaf set from externally created tensors (used by the
    /// gradient oracle to differentiate through named-parameter forwards).
    pub fn from_named(pairs: Vec<(String, Tensor)>) -> LeafSet {
        let mut leaves = Vec::with_capacity(pairs.len());
        let mut index = HashMap::new();
        for (name, tensor) in pairs {
            index.insert(name, leaves.len());
            leaves.push(tensor);
        }
        LeafSet { leaves, index }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.leaves[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown leaf `{name}`"))]
    }

    /// Gradient of each parameter after backward, in definition order.
    pub fn grads(&self) -> Vec<(String, Option<Vec<f64>>)> {
        let mut by_pos: Vec<(&String, usize)> = self.index.iter().map(|(n, i)| (n, *i)).collect();
        by_pos.sort_by_key(|(_, i)| *i);
        by_pos
            .into_iter()
            .map(|(n, i)| (n.clone(), self.leaves[i].grad()))
            .collect()
    }
}

/// Named non-learnable buffers (BN running statistics).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BufferSet {
    buffers: Vec<(String, Vec<f64>)>,
    index: HashMap<String, usize>,
}

impl BufferSet {
    pub fn new() -> BufferSet {
        BufferSet::default()
    }

    pub fn add(&mut self, name: &str, values: Vec<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate buffer name `{name}`"
        );
        self.index.insert(name.to_string(), self.buffers.len());
        self.buffers.push((name.to_string(), values));
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.buffers[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer `{name}`"))]
        .1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer `{name}`"));
        &mut self.buffers[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.buffers.iter().map(|(n, v)| (n.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }
}

/// He-style init for a conv kernel `[K,C,kh,kw]`.
pub fn he_init(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    // Box-Muller from uniform draws keeps the stream stable across rand versions
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

/// Identity-plus-noise init for a square 1x1 conv `[d,d,1,1]`.
pub fn identity_plus_noise(d: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for x in v.iter_mut() {
        *x += rng.gen_range(-noise..noise);
    }
    v
}
