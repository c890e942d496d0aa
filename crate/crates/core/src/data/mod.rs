//! Annotations, sample extraction, synthetic frames and dataset statistics.

pub mod bbox;
pub mod frame;
pub mod grid;
pub mod image;
pub mod samples;
pub mod stats;
pub mod synth;

pub use bbox::{iou, max_iou, BoundingBox};
pub use frame::{read_annotations, write_annotations, AnnotatedFrame, AnnotationRecord, DiskDataset, FrameSource, Subset};
pub use grid::{grid_partition, label_zones, GRID_SIZE};
pub use image::{crops_to_tensor, RgbImage, CROP_SIZE};
pub use samples::{
    extract_pedestrian_samples, extract_zone_samples, CropPolicy, Label, LabeledCrop, PedestrianSampling,
    PedestrianSamples, ZoneSampling,
};
pub use stats::{stats, DatasetStats, Histogram};
pub use synth::{synth_generate, SynthConfig, SynthDataset};
