//! Video-as-cuboid data model: slicing, degradation and the `.cubv` container.

pub mod container;
mod cuboid;
mod degrade;

pub use container::{decode_cubv, encode_cubv, read_cubv, write_cubv, SampleType};
pub use cuboid::{reassemble, slice, Plane, SliceAxis, SliceSet, VideoCuboid, BT601_LUMA};
pub use degrade::{
    bicubic_baseline, bicubic_baseline_values, crop_patch_pair, degrade, kept_frames,
    upsampled_frames, PatchPair, PatchSampler, SPATIAL_FACTOR,
};
