//! Building blocks for class-incremental replay training of text-conditioned
//! generators.
//!
//! The crate covers three jobs:
//!
//! * building a compact replay memory from a base-stage dataset
//!   ([`allocation`] decides how many exemplars each class gets,
//!   [`selection`] picks them by greedy k-center in caption-embedding space,
//!   [`replay`] wires the two together and emits a [`ReplayManifest`]);
//! * carving class-incremental benchmark splits out of a long-tailed asset
//!   inventory ([`benchmark`]);
//! * scoring continual-learning outcomes ([`metrics`]: CLIP-score
//!   aggregation, Fréchet distance, forgetting).
//!
//! Embeddings come from an [`provider::TextEmbedder`], either a local
//! [`EmbeddingTable`] file or a remote HTTP service.

pub mod allocation;
pub mod benchmark;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod provider;
pub mod replay;
mod rng;
pub mod selection;

pub use error::{Error, ErrorKind, Result};
pub use model::{
    validate_inventory, AllocationPlan, AssetRecord, ClassAllocation, ClassInventory, Direction,
    EmbeddingTable, ManifestMetadata, MetricReport, ReplayManifest, ReplayParams, Split, Strategy,
};

/// Version string recorded in manifests.
pub const TOOL_VERSION: &str = concat!("replaykit ", env!("CARGO_PKG_VERSION"));
