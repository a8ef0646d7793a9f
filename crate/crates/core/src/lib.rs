//! Graph-based probabilistic multi-agent trajectory prediction.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod gradcheck;
pub mod gnn;
pub mod metrics;
pub mod mixture;
pub mod model;
pub mod motion;
pub mod recurrent;
pub mod scenegraph;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
