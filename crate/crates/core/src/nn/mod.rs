//! Shared neural-network plumbing on top of candle: a deterministic
//! parameter store, an Adam optimizer whose state lives in checkpoints, and
//! the conv/attention building blocks used by the model stacks.

pub mod adam;
pub mod blocks;
pub mod init;
pub mod transformer;
pub mod vars;

pub use adam::{Adam, PlateauDecay};
pub use vars::{ParamStore, Scope};

use candle_core::Device;

/// All compute in this crate runs on the CPU device.
pub fn device() -> Device {
    Device::Cpu
}
