//! Minimal numerical machinery: dense matrices, a reverse-mode tape, Adam and
//! the checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod matrix;
pub mod params;
pub mod tape;

pub use adam::{clip_grad_norm, Adam, ParamMask};
pub use checkpoint::Checkpoint;
pub use matrix::Matrix;
pub use params::{Grads, Param, ParamId, ParamStore};
pub use tape::{PolicyToken, Support, Tape, TokenTarget, Var};
