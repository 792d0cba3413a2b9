//! Forward and adjoint kernels over raw slices.
//!
//! Every function here is pure: it reads its inputs and writes a freshly
//! allocated (or caller-provided) output. The graph layer in [`crate::graph`]
//! wires them together for reverse-mode differentiation.

pub mod attention;
pub mod conv;
pub mod interp;
pub mod pool;
pub mod softmax;

pub use attention::{window_attention_backward, window_attention_forward, window_tiles, Tile};
pub use conv::{
    col2im, conv2d_backward, conv2d_backward_input, conv2d_forward, conv_s2_depthwise,
    depthwise_conv2d_backward, depthwise_conv2d_forward, im2col, transposed_conv_s2_backward,
    transposed_conv_s2_forward,
};
pub use interp::{bicubic_up2, cubic_weight, reflect_index, BICUBIC_A};
pub use pool::{avg_pool2_backward, avg_pool2_forward};
pub use softmax::{softmax_backward, softmax_forward};
