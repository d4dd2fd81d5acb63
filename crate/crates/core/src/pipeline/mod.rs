//! Frame ingestion, flow caching, input fusion, augmentation and dataset
//! assembly.

pub mod augment;
pub mod cache;
pub mod dataset;
pub mod frames;
pub mod fusion;
pub mod manifest;
pub mod synthetic;

pub use augment::{augment, flip_horizontal, scale_about_center, AugmentOps};
pub use cache::{CacheReport, FlowCache};
pub use dataset::{fuse_clip_frame, Batch, Dataset, DatasetOptions, DatasetSplit, SampleKey, SplitPolicy};
pub use frames::{load_frame, resize_frame, save_png, TARGET_SIZE};
pub use fusion::{fuse_inputs, usable_frames, FusedSample, FIRST_USABLE_FRAME};
pub use manifest::{load_manifest, ClipManifest, CorpusStats, Split};
pub use synthetic::SyntheticCorpus;
