//! Radar and LiDAR joint scene-flow estimation: preprocessing, label
//! generation, a BEV cross-modal fusion network trained with exact
//! gradients, losses, metrics and a synthetic scene generator.

pub mod bevgrid;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod geom;
pub mod labelgen;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod synthgen;

pub use error::{Error, Result};
