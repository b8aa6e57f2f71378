//! Declarative trunks, hypercolumn heads, field-of-view extension and
//! receptive-field arithmetic.

mod head;
mod network;
mod spec;

pub use head::{hypercolumn_extract, hypercolumn_width, map_coordinate, Mlp, MlpSpec};
pub use network::{
    input_tensor, Activations, Bound, Mode, Network, ParamSet, RunningStats, BN_EPS, BN_MOMENTUM, INPUT_SHIFT,
};
pub use spec::{add_fov_blocks, compute_receptive_field, FeatureShape, LayerKind, LayerSpec, NetworkSpec};

#[cfg(test)]
mod tests;
