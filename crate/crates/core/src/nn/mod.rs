//! Differentiable layer toolkit: tensors, the fixed layer menu, losses,
//! optimizers and finite-difference gradient checking.

pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod optim;
mod real;
mod tensor;

pub use layer::{concat_channels, split_channels, Cache, Conv2dSpec, Layer, LayerKind, Mode, NamedTensors};
pub use optim::{OptimizerKind, OptimizerState, ParamStore};
pub use real::{gemm, Real, Trans};
pub use tensor::Tensor;

/// Number of trainable scalars; buffers such as running statistics are not
/// part of the map and so never counted.
pub fn param_count<T: Real>(params: &NamedTensors<T>) -> usize {
    params.values().map(Tensor::len).sum()
}
