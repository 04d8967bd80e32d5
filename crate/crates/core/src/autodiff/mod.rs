//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records one forward pass; [`Graph::backward`] sweeps it in
//! reverse and returns gradients for every leaf registered with
//! [`Graph::param`]. Values are stored as `f32` (or `f64` for gradient
//! checks); every op computes and reduces in `f64`.

mod graph;
mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Var, MASKED_SCORE};
pub use tensor::{Scalar, Tensor};

use crate::error::{PmpError, Result};
use crate::model::FlatParamLayout;

/// Concatenates parameter gradients into one vector ordered by `layout`.
/// Entries of `grads` that are not part of the layout (heads, adapters) are
/// ignored; the ones that are must appear in layout order.
pub fn flatten_grads<S: Scalar>(grads: &Gradients<S>, layout: &FlatParamLayout) -> Result<Vec<S>> {
    let mut out = Vec::with_capacity(layout.d());
    for entry in layout.entries() {
        let g = grads
            .get(&entry.name)
            .ok_or_else(|| PmpError::State(format!("no gradient for parameter {}", entry.name)))?;
        if g.shape() != entry.shape.as_slice() {
            return Err(PmpError::dim("flatten_grads", g.shape(), &entry.shape));
        }
    }
    let seen = grads
        .iter()
        .filter(|(name, _)| layout.entry(name).is_some())
        .map(|(name, t)| (name, t.shape()));
    let hash = FlatParamLayout::digest(seen);
    if hash != layout.layout_hash() {
        return Err(PmpError::Compatibility(format!(
            "gradient layout hash {hash:#018x} does not match layout {:#018x}",
            layout.layout_hash()
        )));
    }
    for entry in layout.entries() {
        out.extend_from_slice(grads.get(&entry.name).expect("checked above").data());
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
