//! SLIC superpixels and the per-image superpixel mask group.

mod lab;
mod mask;
mod slic;
mod vis;

pub use lab::rgb_to_lab;
pub use mask::{build_mask_group, downsample_mask_group, MaskGroup};
pub use slic::{slic_segment, SlicParams, Source, SuperpixelLabelMap};
pub use vis::{label_color, label_visualization};
