//! Minimal neural-network stack: convolution kernels, a reverse-mode tape,
//! parameter storage, initialization, and Adam.

pub mod adam;
pub mod conv;
pub mod init;
pub mod params;
pub mod tape;

pub use adam::Adam;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
