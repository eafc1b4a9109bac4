//! Joint panoptic-part fusion.
//!
//! Combines independently produced semantic, instance and part segmentation
//! predictions into one consistent per-pixel `(semantic, instance, part)`
//! label map, treating the three sources as equals instead of overlaying
//! parts on a finished panoptic prediction. The crate also ships the
//! top-down merging baseline, PartPQ / PQ / mIoU / density evaluation, a
//! synthetic scene harness with a naive reference fusion, and the file
//! formats plus CLI gluing it all together.

pub mod fixtures;
pub mod fusion;
pub mod instance;
pub mod io;
pub mod label;
pub mod logits;
pub mod merge;
pub mod metrics;
pub mod synth;
pub mod taxonomy;

pub use fusion::{jppf_pipeline, panoptic_fuse, FusionConfig};
pub use label::{decode_label, encode_label, PanopticPartLabel, PanopticPartMap};
pub use merge::{merge_top_down, PanopticMap};
pub use taxonomy::ClassTaxonomy;
