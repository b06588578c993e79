//! Modality attention: a 4-way softmax over input blocks computed from the
//! previous hidden state and the current input, multiplied block-wise into
//! the input before it reaches the recurrent cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{activation_forward, affine_forward, Activation, Bound, Dense, Matrix, NodeId, ParamStore, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Joints,
    Torques,
    WholeTactile,
    ThumbTactile,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Joints, Modality::Torques, Modality::WholeTactile, Modality::ThumbTactile];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Joints => "joint",
            Modality::Torques => "torque",
            Modality::WholeTactile => "whole_tactile",
            Modality::ThumbTactile => "thumb_tactile",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub modality: Modality,
    pub offset: usize,
    pub width: usize,
}

/// Position of each modality inside the model input vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityLayout {
    pub blocks: Vec<Block>,
}

impl ModalityLayout {
    /// `[joints, torques, whole latent, thumb latent]`, contiguous.
    pub fn new(joints: usize, whole_latent: usize, thumb_latent: usize) -> Self {
        let widths = [joints, joints, whole_latent, thumb_latent];
        let mut offset = 0;
        let blocks = Modality::ALL
            .iter()
            .zip(widths)
            .map(|(&modality, width)| {
                let b = Block { modality, offset, width };
                offset += width;
                b
            })
            .collect();
        Self { blocks }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != 4 {
            return Err(Error::Config(format!("modality layout needs 4 blocks, has {}", self.blocks.len())));
        }
        let mut next = 0;
        for b in &self.blocks {
            if b.offset != next || b.width == 0 {
                return Err(Error::Config(format!("block {:?} is not contiguous", b.modality)));
            }
            next += b.width;
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.blocks.iter().map(|b| b.width).sum()
    }

    pub fn block(&self, m: Modality) -> &Block {
        self.blocks.iter().find(|b| b.modality == m).expect("layout holds every modality")
    }

    pub fn spans(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().map(|b| (b.offset, b.width)).collect()
    }

    /// Input width when the thumb block is dropped (no attention).
    pub fn width_without_thumb(&self) -> usize {
        self.width() - self.block(Modality::ThumbTactile).width
    }
}

/// Two-layer attention head: `softmax(W2 · tanh(W1 · [h, x] + b1) + b2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionNet {
    pub hidden: Dense,
    pub output: Dense,
}

impl AttentionNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        state_dim: usize,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = Dense::new(store, "att.hidden", state_dim + input_dim, hidden_dim, Activation::Tanh, rng);
        let output = Dense::new(store, "att.out", hidden_dim, 4, Activation::Softmax, rng);
        Self { hidden, output }
    }

    pub fn lookup(store: &ParamStore) -> Option<Self> {
        Some(Self {
            hidden: Dense::lookup(store, "att.hidden", Activation::Tanh)?,
            output: Dense::lookup(store, "att.out", Activation::Softmax)?,
        })
    }

    /// Attention weights `B × 4` on a tape.
    pub fn forward_on_tape(&self, tape: &mut Tape<'_>, bound: &Bound, h_prev: NodeId, x: NodeId) -> Result<NodeId> {
        let z = tape.concat(&[h_prev, x])?;
        let a = self.hidden.forward(tape, bound, z)?;
        self.output.forward(tape, bound, a)
    }
}

/// Attention weights for a batch of `(h_prev, x_in)` rows.
pub fn attention_forward(store: &ParamStore, net: &AttentionNet, h_prev: &Matrix, x_in: &Matrix) -> Result<Matrix> {
    let z = Matrix::hstack(&[h_prev, x_in])?;
    let a = activation_forward(&affine_forward(&z, store.value(net.hidden.weight), store.value(net.hidden.bias))?, Activation::Tanh);
    let logits = affine_forward(&a, store.value(net.output.weight), store.value(net.output.bias))?;
    Ok(activation_forward(&logits, Activation::Softmax))
}

/// Multiplies every element of block `k` of each row by `weights[row, k]`.
pub fn apply_attention(x_in: &Matrix, weights: &Matrix, layout: &ModalityLayout) -> Result<Matrix> {
    if x_in.cols() != layout.width() || weights.cols() != 4 || weights.rows() != x_in.rows() {
        return Err(Error::shape("apply_attention", x_in.shape(), weights.shape()));
    }
    let mut out = x_in.clone();
    for r in 0..out.rows() {
        for (k, b) in layout.blocks.iter().enumerate() {
            let a = weights.get(r, k);
            out.row_mut(r)[b.offset..b.offset + b.width].iter_mut().for_each(|v| *v *= a);
        }
    }
    Ok(out)
}
