//! Small f64 reverse-mode autodiff library used by the dvco codec.
//!
//! Scope is deliberately narrow: dense CPU tensors, the handful of ops the
//! codec networks need (convolution, bilinear warp and resize, group norm,
//! elementwise math), AdamW, and flat parameter serialization. Everything is
//! deterministic and single-threaded; double precision keeps finite-difference
//! gradient checks tight.

pub mod check;
pub mod conv;
pub mod nn;
pub mod optim;
pub mod serialize;
pub mod tensor;
pub mod warp;

pub use conv::{avg_pool2, conv2d, resize_bilinear, upsample_nearest2};
pub use nn::{he_normal, uniform_init, Conv2d, GroupNorm, LoraPair, Param, ParamStore};
pub use optim::AdamW;
pub use tensor::{mse, Arr, ArrRc, Gradients, LeafId, Tensor};
pub use warp::warp_bilinear;
