//! Differentiable denoiser network and uncertainty heads with hand-written
//! reverse passes.

mod denoiser;
pub mod ops;
mod uhead;

pub use denoiser::{frame_mask, DenoiserNet, NetConfig, Tape};
pub use ops::FourierBank;
pub use uhead::{HeadConfig, HeadTape, UncertaintyHead};
