//! Minimal reverse-mode differentiation core and the layer set used by the
//! drag surrogate: 3D convolution, group and batch normalization, csSE gating,
//! multi-head attention, dropout, stochastic depth, RAdam and a cyclic
//! learning-rate schedule.

pub mod error;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{
    dropout, stochastic_depth, BatchNorm1d, Conv3d, ForwardCtx, GroupNorm, Linear, Mode,
    MultiHeadAttention, Scse,
};
pub use ops::ConvGeom;
pub use optim::{CyclicLr, RAdam, RAdamConfig, UpdateKind};
pub use params::{Bound, BufferId, Param, ParamId, ParamStore};
pub use tensor::Tensor;
