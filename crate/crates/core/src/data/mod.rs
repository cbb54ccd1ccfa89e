//! Image ingest, bicubic degradation and deterministic batching.

pub mod bicubic;
pub mod dataset;
pub mod image;

pub use self::bicubic::{bicubic_resample, bicubic_upsample, make_pair, DegradationSpec};
pub use self::dataset::{
    iterate_batches, prepare_dataset, synth_dataset, synth_dataset_split, synth_face, Batch, BatchStream, Dataset,
    DatasetManifest, ManifestEntry, Split,
};
pub use self::image::{center_crop_resize, load_image, ImageTensor};
