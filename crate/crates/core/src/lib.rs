//! Parameter-efficient spatio-temporal video grounding at desk scale.
//!
//! A frozen, seed-deterministic backbone stub is adapted with lightweight
//! residual adapters and LoRA, followed by query-guided refinement, a
//! temporal decoder with relative-position attention, and box/boundary
//! heads. Everything runs on a small reverse-mode tensor engine in `f64`.

pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use model::StgdModel;
pub use tensor::{Graph, ParamId, ParamStore, Tape, Tensor, Var};
