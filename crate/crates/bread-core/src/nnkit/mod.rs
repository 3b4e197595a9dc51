//! Minimal neural-network toolkit: dense 3-D tensors, a tape-based reverse-mode
//! autodiff over a fixed primitive set, the shared U-shaped network topology,
//! an Adam optimizer, checkpoint serialization, and a finite-difference
//! gradient checker.
//!
//! Everything is generic over [`Real`]; the product path instantiates `f32`,
//! while gradient checks and loss oracles instantiate the identical code at
//! `f64`. Reductions accumulate in `f64` regardless of the element type.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod network;
pub mod optim;
pub mod real;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StageTag};
pub use graph::{Gradients, Tape, ValueId};
pub use network::{FinalActivation, NetworkSpec, TapeForward, UNet};
pub use optim::Adam;
pub use real::Real;
pub use tensor::Tensor;
