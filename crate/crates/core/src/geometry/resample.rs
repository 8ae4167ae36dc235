use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

use super::boxes::{BBox, ImageSize};

/// Anything that can be sampled pixel by pixel: decoded rasters, or
/// procedural scenes that evaluate pixels on demand.
pub trait PixelSource {
    fn size(&self) -> ImageSize;

    /// RGB value of the pixel at integer coordinates; callers guarantee
    /// `x < width` and `y < height`.
    fn rgb(&self, x: u32, y: u32) -> [u8; 3];
}

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    size: ImageSize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(size: ImageSize, pixels: Vec<u8>) -> Result<Self> {
        let expected = size.width as usize * size.height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::DimMismatch {
                expected,
                found: pixels.len(),
            });
        }
        Ok(RgbImage { size, pixels })
    }

    pub fn filled(size: ImageSize, rgb: [u8; 3]) -> Self {
        let n = size.width as usize * size.height as usize;
        let pixels = rgb.iter().copied().cycle().take(n * 3).collect();
        RgbImage { size, pixels }
    }

    /// Materializes any pixel source into a raster.
    pub fn render<S: PixelSource + ?Sized>(src: &S) -> Self {
        let size = src.size();
        let mut pixels = Vec::with_capacity(size.width as usize * size.height as usize * 3);
        for y in 0..size.height {
            for x in 0..size.width {
                pixels.extend_from_slice(&src.rgb(x, y));
            }
        }
        RgbImage { size, pixels }
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.size.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.size.width, self.size.height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        w.write_image_data(&self.pixels)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Decodes an 8-bit RGB or RGBA PNG (alpha is dropped).
    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: &dyn std::fmt::Display| Error::Image(format!("{}: {e}", path.display()));
        let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| bad(&e))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| bad(&e))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(bad(&"only 8-bit images are supported"));
        }
        let data = &buf[..info.buffer_size()];
        let pixels = match info.color_type {
            png::ColorType::Rgb => data.to_vec(),
            png::ColorType::Rgba => data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => data.iter().flat_map(|v| [*v, *v, *v]).collect(),
            other => return Err(bad(&format!("unsupported colour type {other:?}"))),
        };
        RgbImage::new(ImageSize::new(info.width, info.height)?, pixels)
    }
}

impl PixelSource for RgbImage {
    fn size(&self) -> ImageSize {
        self.size
    }

    fn rgb(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.size.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Floating point RGB raster with values in `[0, 1]`, row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn to_rgb(&self) -> RgbImage {
        let pixels = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage {
            size: ImageSize {
                width: self.width as u32,
                height: self.height as u32,
            },
            pixels,
        }
    }
}

/// Bilinearly resamples region `b` of `src` to an `out_size` x `out_size`
/// image. Output pixel centers are spread uniformly over `b`; source pixels
/// are sampled at their centers with edge replication.
pub fn crop_resample<S: PixelSource + ?Sized>(
    src: &S,
    b: &BBox,
    out_size: usize,
) -> Result<FloatImage> {
    b.validate()?;
    let size = src.size();
    let tol = 1e-6;
    if !BBox::full(size).contains(b, tol) {
        return Err(Error::OutOfBounds {
            bbox: b.to_string(),
            width: size.width,
            height: size.height,
        });
    }
    if b.width() < 1.0 || b.height() < 1.0 {
        return Err(Error::DegenerateBox(format!(
            "crop {b} is smaller than one pixel"
        )));
    }
    if out_size == 0 {
        return Err(Error::invalid("output size must be positive"));
    }

    let xs = sample_axis(b.x0, b.width(), out_size, size.width);
    let ys = sample_axis(b.y0, b.height(), out_size, size.height);
    let mut data = Vec::with_capacity(out_size * out_size * 3);
    let mut top = vec![[0u8; 3]; 2 * out_size];
    let mut bottom = vec![[0u8; 3]; 2 * out_size];
    for &(y0, y1, ty) in &ys {
        for (j, &(x0, x1, _)) in xs.iter().enumerate() {
            top[2 * j] = src.rgb(x0, y0);
            top[2 * j + 1] = src.rgb(x1, y0);
            bottom[2 * j] = src.rgb(x0, y1);
            bottom[2 * j + 1] = src.rgb(x1, y1);
        }
        for (j, &(_, _, tx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let p00 = top[2 * j][c] as f32 / 255.0;
                let p01 = top[2 * j + 1][c] as f32 / 255.0;
                let p10 = bottom[2 * j][c] as f32 / 255.0;
                let p11 = bottom[2 * j + 1][c] as f32 / 255.0;
                let upper = p00 + tx * (p01 - p00);
                let lower = p10 + tx * (p11 - p10);
                data.push(upper + ty * (lower - upper));
            }
        }
    }
    Ok(FloatImage {
        width: out_size,
        height: out_size,
        data,
    })
}

/// Per output index: the two neighbouring source indices and the weight of
/// the second one.
fn sample_axis(start: f64, len: f64, out: usize, limit: u32) -> Vec<(u32, u32, f32)> {
    let step = len / out as f64;
    let max = limit as i64 - 1;
    (0..out)
        .map(|k| {
            let pos = start + (k as f64 + 0.5) * step - 0.5;
            let base = pos.floor();
            let t = (pos - base) as f32;
            let i0 = (base as i64).clamp(0, max) as u32;
            let i1 = (base as i64 + 1).clamp(0, max) as u32;
            (i0, i1, t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: u32, h: u32) -> ImageSize {
        ImageSize::new(w, h).unwrap()
    }

    #[test]
    fn full_crop_at_native_size_is_identity() {
        let sq = RgbImage::new(img(6, 6), (0..108).map(|i| (i * 11 % 256) as u8).collect()).unwrap();
        let out = crop_resample(&sq, &BBox::full(sq.size()), 6).unwrap();
        assert_eq!(out.to_rgb(), sq);
        for (a, b) in out.data.iter().zip(sq.pixels()) {
            assert_eq!(*a, *b as f32 / 255.0);
        }
    }

    #[test]
    fn uniform_region_stays_uniform() {
        let src = RgbImage::filled(img(50, 40), [10, 200, 77]);
        let b = BBox::new(3.3, 4.7, 31.9, 22.1).unwrap();
        let out = crop_resample(&src, &b, 17).unwrap();
        for px in out.data.chunks(3) {
            assert_eq!(px, [10.0 / 255.0, 200.0 / 255.0, 77.0 / 255.0]);
        }
    }

    #[test]
    fn checkerboard_upsample_matches_reference_bilinear() {
        let mut src = RgbImage::filled(img(2, 2), [0, 0, 0]);
        src.put(1, 0, [255, 255, 255]);
        src.put(0, 1, [255, 255, 255]);
        let out = crop_resample(&src, &BBox::full(src.size()), 4).unwrap();
        // Reference: sample position p = (k + 0.5) / 2 - 0.5 clamped into [0, 1].
        let value = |x: f64, y: f64| -> f64 {
            let f = |i: usize, j: usize| if (i + j) % 2 == 1 { 1.0 } else { 0.0 };
            let cx = x.clamp(0.0, 1.0);
            let cy = y.clamp(0.0, 1.0);
            (1.0 - cx) * (1.0 - cy) * f(0, 0)
                + cx * (1.0 - cy) * f(1, 0)
                + (1.0 - cx) * cy * f(0, 1)
                + cx * cy * f(1, 1)
        };
        for i in 0..4 {
            for j in 0..4 {
                let px = (j as f64 + 0.5) / 2.0 - 0.5;
                let py = (i as f64 + 0.5) / 2.0 - 0.5;
                let want = value(px, py);
                assert!((out.get(j, i, 0) as f64 - want).abs() < 1e-6, "({i},{j})");
            }
        }
    }

    #[test]
    fn sub_pixel_region_is_rejected() {
        let src = RgbImage::filled(img(10, 10), [0, 0, 0]);
        let b = BBox::new(1.0, 1.0, 1.5, 5.0).unwrap();
        assert!(crop_resample(&src, &b, 8).is_err());
        let outside = BBox::new(5.0, 5.0, 12.0, 9.0).unwrap();
        assert!(crop_resample(&src, &outside, 8).is_err());
    }
}
