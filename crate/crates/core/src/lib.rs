//! Dialogue state tracking with per-slot dynamic selection of history turns.
//!
//! Each slot predicted to change at the current turn scores every earlier
//! turn from three perspectives (slot-name attention, current-turn attention
//! and a gated relational graph over turns and slot-value pairs), keeps the
//! top-k turns, re-encodes them together with the current turn, and produces
//! the value by span extraction with a classification fallback.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod harness;
pub mod model;
pub mod selector;
pub mod synth;
pub mod text;
pub mod update;
pub mod vocab;

pub use config::Config;
pub use error::{DstError, Result};
pub use model::DstModel;
