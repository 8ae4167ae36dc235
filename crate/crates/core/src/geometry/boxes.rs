use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in continuous pixel coordinates.
///
/// `x` grows to the right and `y` grows downwards; `(x0, y0)` is the top-left
/// corner and `(x1, y1)` the bottom-right corner. Serialized as
/// `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite or zero-area coordinates.
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    /// Box of the given size centered at `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        BBox::new(
            cx - width / 2.0,
            cy - height / 2.0,
            cx + width / 2.0,
            cy + height / 2.0,
        )
    }

    /// The box `(0, 0, W, H)`.
    pub fn full(img: ImageSize) -> Self {
        BBox {
            x0: 0.0,
            y0: 0.0,
            x1: img.width as f64,
            y1: img.height as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x1 <= self.x0 || self.y1 <= self.y0 {
            return Err(Error::DegenerateBox(self.to_string()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn min_edge(&self) -> f64 {
        self.width().min(self.height())
    }

    /// Whether `other` lies entirely within `self`, up to `tol` pixels.
    pub fn contains(&self, other: &BBox, tol: f64) -> bool {
        other.x0 >= self.x0 - tol
            && other.y0 >= self.y0 - tol
            && other.x1 <= self.x1 + tol
            && other.y1 <= self.y1 + tol
    }

    pub fn is_inside(&self, img: ImageSize) -> bool {
        BBox::full(img).contains(self, 0.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x0, self.y0, self.x1, self.y1)
    }
}

/// Image dimensions in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 2]", into = "[u32; 2]")]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        Ok(ImageSize { width, height })
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }

    pub fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }
}

impl TryFrom<[u32; 2]> for ImageSize {
    type Error = Error;

    fn try_from(v: [u32; 2]) -> Result<Self> {
        ImageSize::new(v[0], v[1])
    }
}

impl From<ImageSize> for [u32; 2] {
    fn from(s: ImageSize) -> Self {
        [s.width, s.height]
    }
}

/// Box expressed as fractions of an enclosing crop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct NormBox {
    pub u0: f64,
    pub v0: f64,
    pub u1: f64,
    pub v1: f64,
}

impl NormBox {
    pub fn new(u0: f64, v0: f64, u1: f64, v1: f64) -> Result<Self> {
        let ok = [u0, v0, u1, v1].iter().all(|v| v.is_finite())
            && (0.0..u1).contains(&u0)
            && u1 <= 1.0
            && (0.0..v1).contains(&v0)
            && v1 <= 1.0;
        if !ok {
            return Err(Error::DegenerateBox(format!(
                "normalized box ({u0}, {v0}, {u1}, {v1})"
            )));
        }
        Ok(NormBox { u0, v0, u1, v1 })
    }

    pub const UNIT: NormBox = NormBox {
        u0: 0.0,
        v0: 0.0,
        u1: 1.0,
        v1: 1.0,
    };

    /// Same rectangle in the unit square as a `BBox`; convenient for IoU.
    pub fn as_bbox(&self) -> BBox {
        BBox {
            x0: self.u0,
            y0: self.v0,
            x1: self.u1,
            y1: self.v1,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.u0, self.v0, self.u1, self.v1]
    }
}

impl TryFrom<[f64; 4]> for NormBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        NormBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<NormBox> for [f64; 4] {
    fn from(b: NormBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Zero for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    w * h
}

/// Generalized IoU: IoU minus the fraction of the smallest enclosing box not
/// covered by the union. Lies in (-1, 1].
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let hull = (a.x1.max(b.x1) - a.x0.min(b.x0)) * (a.y1.max(b.y1) - a.y0.min(b.y0));
    Ok(inter / union - (hull - union) / hull)
}

/// `|b| / (W * H)`.
pub fn area_ratio(b: &BBox, img: ImageSize) -> Result<f64> {
    b.validate()?;
    if !b.is_inside(img) {
        return Err(Error::OutOfBounds {
            bbox: b.to_string(),
            width: img.width,
            height: img.height,
        });
    }
    Ok(b.area() / img.area())
}

/// Maps a crop-normalized box into the coordinate frame of `crop`.
pub fn to_global(n: &NormBox, crop: &BBox) -> BBox {
    let (w, h) = (crop.width(), crop.height());
    BBox {
        x0: crop.x0 + n.u0 * w,
        y0: crop.y0 + n.v0 * h,
        x1: crop.x0 + n.u1 * w,
        y1: crop.y0 + n.v1 * h,
    }
}

/// Inverse of [`to_global`]; fails when `b` is not inside `crop`.
pub fn to_local(b: &BBox, crop: &BBox) -> Result<NormBox> {
    let (w, h) = (crop.width(), crop.height());
    let clip = |v: f64| {
        // absorb float noise from the forward map
        if v.abs() < 1e-12 {
            0.0
        } else if (v - 1.0).abs() < 1e-12 {
            1.0
        } else {
            v
        }
    };
    NormBox::new(
        clip((b.x0 - crop.x0) / w),
        clip((b.y0 - crop.y0) / h),
        clip((b.x1 - crop.x0) / w),
        clip((b.y1 - crop.y0) / h),
    )
}

/// Translates `b` by the smallest shift that places it inside `region`.
/// Axes on which `b` is longer than `region` are clipped to the region.
pub fn clamp_shift_into(b: &BBox, region: &BBox) -> BBox {
    let (x0, x1) = shift_interval(b.x0, b.x1, region.x0, region.x1);
    let (y0, y1) = shift_interval(b.y0, b.y1, region.y0, region.y1);
    BBox { x0, y0, x1, y1 }
}

/// [`clamp_shift_into`] with the full image as the region.
pub fn clamp_shift(b: &BBox, img: ImageSize) -> BBox {
    clamp_shift_into(b, &BBox::full(img))
}

fn shift_interval(lo: f64, hi: f64, min: f64, max: f64) -> (f64, f64) {
    let len = hi - lo;
    if len >= max - min {
        return (min, max);
    }
    if lo < min {
        (min, min + len)
    } else if hi > max {
        (max - len, max)
    } else {
        (lo, hi)
    }
}
