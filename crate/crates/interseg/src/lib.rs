//! CPU inference library for an interactive-segmentation decoder that
//! allocates computation adaptively over dense prompt tokens.
//!
//! The decoder derives an edge map from the previous mask and routes
//! boundary tokens through full attention while the rest take a linear-time
//! attention over an implicit 2^S binary-spherical-quantization codebook.
//! The FFN stage mirrors the split: a shared expert for everything plus a
//! top-1 routed expert for edge tokens, dispatched as contiguous blocked
//! matmuls. Prompt embedding and mask upsampling both operate on dynamic
//! crops around the detected object. Every fast path has a dense reference
//! oracle next to it, and the benchmark helpers measure how each piece
//! scales.
//!
//! Modules map one-to-one onto the pieces above:
//!
//! - [`kernels`]: matmul/softmax/convolution primitives (f32, deterministic)
//! - [`prompt`]: reference mask state and dynamic prompt embedding
//! - [`routing`]: edge-map computation, token partition/scatter
//! - [`attention`]: full attention, BSQ quantization, linear BSQ attention,
//!   hybrid dispatch
//! - [`moe`]: hybrid mixture of experts with token rearrangement
//! - [`upsample`]: Canny, the residual edge CNN and dynamic local upsampling
//! - [`pipeline`]: decoder assembly, weights, sessions, click simulation
//! - [`bench`]: timing and complexity-slope helpers
//!
//! The `examples/` directory holds one runnable example per capability; the
//! `interseg` binary wraps the same library behind a small set of
//! subcommands. See the README for both.

pub mod attention;
pub mod bench;
pub mod counters;
pub mod error;
pub mod io;
pub mod kernels;
pub mod moe;
pub mod pipeline;
pub mod prompt;
pub mod routing;
pub mod tensor;
pub mod upsample;

pub use error::{Error, Result};
pub use tensor::Tensor;
