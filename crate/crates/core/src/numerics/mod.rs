//! Deterministic f64 tensor substrate.
//!
//! Every differentiable kernel used by the model lives here as a
//! forward/backward pair. Backward functions accumulate into [`Grads`] and
//! return the gradient with respect to their input; there is no tape.

mod attention;
mod gradcheck;
mod layers;
mod linalg;
mod norm;
mod resize;
mod store;
mod tensor;

pub use attention::{BlockCache, TransformerBlock};
pub use gradcheck::{finite_difference_gradient, FdOptions, GradReport, ParamGradCheck};
pub use layers::{gelu, gelu_backward, gelu_grad, l2_normalize, l2_normalize_backward, Linear, LinearInit};
pub use linalg::{gemm, transpose};
pub use norm::{
    layer_norm, layer_norm_rows, layer_norm_rows_backward, LayerNorm, LnCache, LN_EPS,
};
pub use resize::{bilinear_resize, bilinear_resize_backward};
pub use store::{Grads, Param, ParamId, ParameterStore};
pub use tensor::Tensor;
