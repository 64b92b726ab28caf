//! File formats, configuration plumbing, the training loop, and the layer
//! sweep built on top of `pixelvae-core`.  The core crate owns all math and
//! byte layouts; this crate owns files, wall clocks, and workflows.

pub mod config;
pub mod io;
pub mod sweep;
pub mod train;
