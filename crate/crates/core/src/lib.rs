//! Analog retrieval for gridded radar archives.
//!
//! Images are reduced to short embeddings (PCA in-crate, or externally
//! computed embeddings read from `ANLE` files), concatenated in time order,
//! and searched with an FFT distance profile. The `k` best aligned profile
//! matches are then reordered by sequence MSE on the original images and the
//! top `a` are returned as analogs.
//!
//! The [`eval`] module holds the brute-force MSE ground truth and the ranking
//! metrics (Jaccard distance, top-k Canberra stability indicator) used to
//! judge how well an embedding preserves the MSE ordering, and [`bench`]
//! times each stage of the search against a linear MSE scan.

pub mod archive;
pub mod bench;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod grid;
pub mod mass;
pub mod reduction;
pub mod search;
pub mod synth;

pub use archive::{EmbeddingArchive, Provenance};
pub use dataset::{Chunk, ChunkedArchive, ChunkingConfig, ZrRelation};
pub use error::{Error, Result};
pub use grid::ScanGrid;
pub use mass::{AlignmentMask, DistanceProfile, ProfileMode};
pub use reduction::{Embedder, IdentityEmbedder, LambdaMode, PcaConfig, PcaModel};
pub use search::{AnalogMatch, QuerySequence, SearchConfig, SearchOutcome, SearchStatus};
