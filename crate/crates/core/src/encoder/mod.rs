//! Small trainable transformer encoder with hand-written backpropagation,
//! the entity-marker relation representation and an MLM head.

mod checkpoint;
mod model;
mod optim;
mod params;
mod scalar;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use model::{Encoder, ForwardPass, Mode};
pub use optim::{Adam, AdamConfig};
pub use params::{EncoderConfig, LayerSlots, Layout, ParameterSet, Slot};
pub use scalar::Scalar;

use crate::error::{LpdError, Result};
use crate::tokenizer::EncodedInput;

/// Concatenated final-layer states at the `[E1]` and `[E2]` markers.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationRepresentation {
    pub values: Vec<f64>,
}

impl RelationRepresentation {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LpdError::NonFinite("relation representation".into()));
        }
        Ok(RelationRepresentation { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.values.iter().zip(other).map(|(a, b)| a * b).sum()
    }
}

/// `[hidden[e1_open_pos]; hidden[e2_open_pos]]`.
pub fn relation_representation<T: Scalar>(
    hidden: &[T],
    width: usize,
    encoded: &EncodedInput,
) -> Result<RelationRepresentation> {
    let len = hidden.len() / width;
    let (e1, e2) = (encoded.e1_open_pos, encoded.e2_open_pos);
    if e1 >= len || e2 >= len {
        return Err(LpdError::Shape(format!("marker positions ({e1}, {e2}) outside {len} states")));
    }
    let values = hidden[e1 * width..(e1 + 1) * width]
        .iter()
        .chain(&hidden[e2 * width..(e2 + 1) * width])
        .map(|v| v.as_f64())
        .collect();
    RelationRepresentation::new(values)
}

/// Scatter a representation gradient back onto the two marker rows of a
/// `len x width` hidden-state gradient.
pub fn representation_grad_into<T: Scalar>(
    d_rep: &[f64],
    encoded: &EncodedInput,
    width: usize,
    d_hidden: &mut [T],
) {
    debug_assert_eq!(d_rep.len(), 2 * width);
    let (e1, e2) = (encoded.e1_open_pos, encoded.e2_open_pos);
    for j in 0..width {
        d_hidden[e1 * width + j] += T::of(d_rep[j]);
        d_hidden[e2 * width + j] += T::of(d_rep[width + j]);
    }
}
