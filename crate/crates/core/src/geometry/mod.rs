//! Box arithmetic, crop-local coordinate transforms and raster resampling.
//!
//! All coordinates are continuous pixels; rasterization happens only in
//! [`crop_resample`].

mod boxes;
mod resample;

pub use boxes::{
    area_ratio, clamp_shift, clamp_shift_into, giou, iou, to_global, to_local, BBox, ImageSize,
    NormBox,
};
pub use resample::{crop_resample, FloatImage, PixelSource, RgbImage};
