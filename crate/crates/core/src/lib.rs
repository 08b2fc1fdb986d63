//! Hierarchical, annealing-quantized graph autoencoder.
//!
//! A GNN encoder produces node embeddings `H`; each embedding is quantized
//! onto a level-1 codebook whose codes are chosen by temperature-annealed
//! sampling, and level-1 codes are themselves clustered by a smaller level-2
//! codebook. A GAT decoder reconstructs features from the quantized codes
//! while an MLP edge decoder reconstructs adjacency from `H`. `H` is the
//! exported representation.

pub mod autodiff;
pub mod checkpoint;
pub mod eval;
pub mod graph;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod vq;

pub use graph::{SbmParams, SparseGraph};
pub use model::{ModelConfig, ModelState};
pub use tensor::Matrix;
