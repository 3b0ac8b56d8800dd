//! Reverse-mode differentiation engine: tensors flow through a [`Graph`],
//! parameters live in a [`ParamStore`], gradients accumulate in a [`GradStore`].

mod check;
mod graph;
mod params;

pub use check::{finite_diff_check, relative_error, GradCheckReport, GroupCheck};
pub use graph::{sigmoid, softmax, Graph, NodeId, Op, LOG_FLOOR, MASKED_SCORE};
pub use params::{
    clip_global_norm, clip_gradient_norm, GradStore, GroupId, ParamCategory, ParamGroup, ParamId, ParamStore,
};
