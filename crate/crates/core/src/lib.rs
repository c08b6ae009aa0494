//! Modality-routed mixture-of-experts transformer whose experts communicate
//! only through causal attention over a shared key/value cache, together with
//! the interleaved block stream it consumes, a synthetic duplex micro-world,
//! a staged trainer and an evaluation harness.

pub mod check;
pub mod cli;
pub mod codec;
pub mod eval;
pub mod model;
pub mod num;
pub mod sim;
pub mod train;
