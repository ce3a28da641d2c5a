//! IO companion for the gated-ReLU laboratory: binary checkpoint, gate-cache
//! and dataset formats, CSV/SVG emission, sweep orchestration, and the
//! command-line interface.

pub mod cli;
pub mod csvio;
pub mod formats;
pub mod svg;
pub mod sweep;
