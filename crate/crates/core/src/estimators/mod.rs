//! Estimators from anthropometry: the prototype DNN, the full-grid HRTF DNN baseline,
//! the prototype training targets they share with the diffusion model, and parameter counting.

mod hrtf_dnn;
mod proto_dnn;
mod targets;

pub use hrtf_dnn::{train_hrtf_dnn, HrtfDnn, HrtfDnnConfig, HrtfDnnOutcome};
pub use proto_dnn::{train_prototype_dnn, ProtoDnnConfig, PrototypeDnn};
pub use targets::{EarExample, PrototypeTargets};

use crate::checkpoint::ParamLayout;
use crate::nn::{FcBlock, Linear};

/// Trainable scalars of a declared parameter layout.
pub fn count_parameters(layout: &[ParamLayout]) -> usize {
    layout
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

pub(crate) fn linear_layout(name: &str, in_dim: usize, out_dim: usize) -> Vec<ParamLayout> {
    vec![
        ParamLayout {
            name: format!("{name}.weight"),
            shape: vec![in_dim, out_dim],
        },
        ParamLayout {
            name: format!("{name}.bias"),
            shape: vec![out_dim],
        },
    ]
}

/// Layout matching [`FcBlock::new`].
pub(crate) fn fc_block_layout(name: &str, in_dim: usize, out_dim: usize) -> Vec<ParamLayout> {
    let mut v = linear_layout(&format!("{name}.fc"), in_dim, out_dim);
    v.push(ParamLayout {
        name: format!("{name}.norm.weight"),
        shape: vec![out_dim],
    });
    v.push(ParamLayout {
        name: format!("{name}.norm.bias"),
        shape: vec![out_dim],
    });
    v
}

/// Two FC blocks followed by a dense output layer.
#[derive(Clone, Debug)]
pub(crate) struct FcStack {
    pub blocks: [FcBlock; 2],
    pub output: Linear,
}

impl FcStack {
    pub fn forward(
        &self,
        g: &mut crate::numerics::Graph,
        store: &crate::numerics::ParamStore,
        x: crate::numerics::Var,
    ) -> crate::numerics::Var {
        let h = self.blocks[0].forward(g, store, x);
        let h = self.blocks[1].forward(g, store, h);
        self.output.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_layout_counts_zero() {
        assert_eq!(count_parameters(&[]), 0);
    }
}
