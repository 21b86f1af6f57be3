//! Named parameter storage shared by encoders, fusion, and heads.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Scalar, Tensor};

pub type ParamMap<F> = BTreeMap<String, Tensor<F>>;

/// Graph ids of bound parameters for one forward pass.
pub struct ParamBinding {
    ids: BTreeMap<String, NodeId>,
}

impl ParamBinding {
    pub fn new() -> Self {
        ParamBinding { ids: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn insert(&mut self, name: String, id: NodeId) {
        self.ids.insert(name, id);
    }

    /// name -> node id pairs, for mapping gradients back to names.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

impl Default for ParamBinding {
    fn default() -> Self {
        Self::new()
    }
}

/// Bind every parameter whose name starts with `prefix` into the graph.
/// Frozen bindings enter as constants and receive no gradients.
pub fn bind_params<F: Scalar>(
    graph: &mut Graph<F>,
    params: &ParamMap<F>,
    prefix: &str,
    frozen: bool,
    binding: &mut ParamBinding,
) {
    for (name, tensor) in params.iter() {
        if name.starts_with(prefix) {
            let id = if frozen {
                graph.frozen(tensor.clone())
            } else {
                graph.parameter(tensor.clone())
            };
            binding.insert(name.clone(), id);
        }
    }
}

/// Translate a backward pass result into name-keyed gradients.
pub fn named_grads<F: Scalar>(
    binding: &ParamBinding,
    grads: &BTreeMap<crate::numerics::NodeId, Tensor<F>>,
) -> BTreeMap<String, Tensor<F>> {
    let mut out = BTreeMap::new();
    for (name, id) in binding.iter() {
        if let Some(g) = grads.get(id) {
            out.insert(name.clone(), g.clone());
        }
    }
    out
}

/// Initialization rule, chosen per parameter by its role.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zero,
    One,
    /// Kaiming-uniform with the given fan-in.
    KaimingUniform(usize),
    /// normal(0, 0.02), used for embeddings and the class token.
    Embedding,
}

pub fn init_tensor<F: Scalar>(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let numel: usize = shape.iter().product();
    let data: Vec<F> = match init {
        Init::Zero => vec![F::ZERO; numel],
        Init::One => vec![F::ONE; numel],
        Init::KaimingUniform(fan_in) => {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..numel)
                .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
                .collect()
        }
        Init::Embedding => (0..numel)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                F::from_f64(0.02 * v)
            })
            .collect(),
    };
    Tensor::from_vec(shape.to_vec(), data).expect("init shape is valid")
}

/// Check a parameter map against an expected shape table; names both
/// missing parameters and shape mismatches.
pub fn validate_shapes<F: Scalar>(
    params: &ParamMap<F>,
    expected: &BTreeMap<String, Vec<usize>>,
) -> Result<()> {
    for (name, shape) in expected {
        match params.get(name) {
            None => return Err(Error::Format(format!("missing parameter `{name}`"))),
            Some(t) if t.shape() != &shape[..] => {
                return Err(Error::shape(
                    "checkpoint",
                    format!("parameter `{name}`: stored {:?}, expected {shape:?}", t.shape()),
                ));
            }
            _ => {}
        }
    }
    for name in params.keys() {
        if !expected.contains_key(name) {
            return Err(Error::Format(format!("unexpected parameter `{name}`")));
        }
    }
    Ok(())
}
