//! Decision-transformer resource management for simulated wireless tasks.

pub mod numerics;
pub mod transformer;
pub mod dt;
pub mod env;
pub mod ppo;
pub mod pipeline;
