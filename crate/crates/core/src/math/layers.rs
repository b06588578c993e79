use rand::Rng;

use super::{Activation, Bound, NodeId, ParamId, ParamStore, Tape};
use crate::error::Result;

/// Fully connected layer `act(x·W + b)` whose parameters live in a store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.w"), input_dim, output_dim, input_dim, rng);
        let bias = store.add_uniform(format!("{name}.b"), 1, output_dim, input_dim, rng);
        Self { weight, bias, activation, input_dim, output_dim }
    }

    /// Re-attaches a layer to groups already present in `store` (checkpoint load).
    pub fn lookup(store: &ParamStore, name: &str, activation: Activation) -> Option<Self> {
        let weight = store.find(&format!("{name}.w"))?;
        let bias = store.find(&format!("{name}.b"))?;
        let (input_dim, output_dim) = store.value(weight).shape();
        Some(Self { weight, bias, activation, input_dim, output_dim })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, params: &Bound, x: NodeId) -> Result<NodeId> {
        let z = tape.affine(x, params[self.weight], Some(params[self.bias]))?;
        Ok(tape.activation(z, self.activation))
    }
}
