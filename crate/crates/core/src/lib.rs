//! Compositional 3D scene assembly from per-frame perception data.
//!
//! The library turns a bundle of posed frames (depth maps, instance masks,
//! camera models) into an editable scene: a set of per-object meshes with
//! similarity transforms and spatial relations. The stages are
//!
//! 1. category discovery over a farthest-point sample of frames,
//! 2. spatial deduplication of fragmented instance tracks,
//! 3. optimal-view selection by visible surface area,
//! 4. render-match-optimize pose alignment, and
//! 5. gravity / support refinement.
//!
//! Foundation-model dependencies (open-vocabulary labeling, single-view asset
//! generation, dense 2D matching, relation inference) sit behind provider
//! traits. [`synth`] generates deterministic synthetic scenes together with
//! oracle providers so the whole cascade runs hermetically.

pub mod align;
pub mod bundle;
pub mod dedup;
pub mod discovery;
mod error;
pub mod geom;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod refine;
pub mod synth;
pub mod viewsel;

pub use error::Error;

/// Crate-wide result type.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Frame identifier within a bundle. Unique and strictly increasing in
/// capture order, but not necessarily contiguous.
pub type FrameId = u32;

/// Per-frame instance-track identifier assigned by the upstream tracker.
pub type TrackId = u32;

/// Scene-level instance identifier. After deduplication this is the smallest
/// track id of the merged group, which keeps ids stable under input
/// reordering.
pub type InstanceId = u32;
