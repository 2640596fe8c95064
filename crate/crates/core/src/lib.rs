//! Dataset debiasing toolkit for object detection.
//!
//! * [`dataset`]: COCO ingest, data groups `(class, size bin, position bin)`,
//!   position regions and frequency tiers.
//! * [`scoring`]: per-group representation scores from frequency, visual
//!   diversity and context diversity.
//! * [`recalibration`]: inverse-score resampling of seed layouts.
//! * [`dynamics`]: EMA refinement of scores from detection losses.
//! * [`blueprint`]: deterministic class-coloured layout canvases and PNG IO.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pick `f64`, with `*F32` variants for single precision.

pub mod blueprint;
pub mod dataset;
pub mod digest;
pub mod dynamics;
pub mod error;
pub mod layout;
pub mod recalibration;
pub mod scalar;
pub mod scoring;

pub use blueprint::{build_palette, render_blueprint, Canvas, FillAlpha, Palette};
pub use dataset::{load_annotations, BBox, BinningConfig, Dataset, GroupKey, Instance, Region};
pub use error::{Error, Result};
pub use layout::{Layout, LayoutEntry, Provenance};
pub use recalibration::LayoutPriors;
pub use scalar::Scalar;

pub type RsTable = scoring::RsTable<f64>;
pub type RsTableF32 = scoring::RsTable<f32>;
pub type GroupStats = scoring::GroupStats<f64>;
pub type EmbeddingStore = scoring::EmbeddingStore<f64>;
pub type EmbeddingStoreF32 = scoring::EmbeddingStore<f32>;
pub type RecalibConfig = recalibration::RecalibConfig<f64>;
pub type RecalibConfigF32 = recalibration::RecalibConfig<f32>;
pub type DynamicsConfig = dynamics::DynamicsConfig<f64>;
pub type ErrorRecord = dynamics::ErrorRecord<f64>;
pub type UpdateReport = dynamics::UpdateReport<f64>;
pub type Snapshot = dynamics::Snapshot<f64>;
