//! Two-stage cross-modal correlation learning.
//!
//! Stage one turns raw image and text features (whole instances and their
//! patches) into per-modality *separate* representations: DBN pretraining,
//! a pair of linked two-pathway correlation networks, and a joint RBM that
//! fuses the instance and patch grains. Stage two maps those into a shared
//! space with a contrastive cross-modal branch and a per-modality
//! classification branch. Retrieval runs on cosine similarity in that space.

pub mod checkpoint;
pub mod config;
pub mod corrnet;
pub mod dataset;
pub mod dbn;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod multitask;
pub mod nn;
pub mod numeric;
pub mod pipeline;
pub mod rbm;
pub mod synthdata;

pub use error::{Error, Result};
pub use numeric::{FeatureMatrix, SeededRng};
