use std::path::Path;

use image::{ImageReader, RgbImage};

use crate::data::bicubic::{bicubic_resample, DegradationSpec};
use crate::error::{FurnError, Result};
use crate::tensor::Tensor;

/// Smallest side accepted at ingest.
pub const MIN_SIDE: usize = 8;

/// Three-channel image with values in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(FurnError::ShapeMismatch(format!(
                "3x{height}x{width} image needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if height == 0 || width == 0 {
            return Err(FurnError::InvalidDims { height, width });
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        ImageTensor {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    /// Builds an image from a per-pixel function returning RGB.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut data = vec![0.0; 3 * height * width];
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for (c, v) in px.iter().enumerate() {
                    data[(c * height + y) * width + x] = *v;
                }
            }
        }
        ImageTensor { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        ImageTensor::from_fn(h, w, |y, x| {
            let p = img.get_pixel(x as u32, y as u32).0;
            [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]
        })
    }

    /// Clamps to `[0, 1]` and rounds to the nearest 8-bit level.
    pub fn to_rgb8(&self) -> RgbImage {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [0, 1, 2].map(|c| quantize(self.get(c, y, x)));
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img
    }

    /// The image after an 8-bit export round trip.
    pub fn quantized(&self) -> Self {
        ImageTensor {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize(v) as f64 / 255.0).collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        ImageTensor {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| FurnError::io(parent.display(), e))?;
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| FurnError::io(path.display(), e))
    }

    /// `[3, H, W]`
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new_unchecked(vec![3, self.height, self.width], self.data.clone())
    }

    /// Accepts `[3, H, W]` or `[1, 3, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            _ => {
                return Err(FurnError::ShapeMismatch(format!("expected a 3xHxW image, got {s:?}")));
            }
        };
        ImageTensor::new(h, w, t.data().to_vec())
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decodes an 8-bit image file into `[0, 1]` values (division by 255).
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let reader = ImageReader::open(path).map_err(|e| FurnError::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let reader = reader.with_guessed_format().map_err(|e| FurnError::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let decoded = reader.decode().map_err(|e| FurnError::UnsupportedFormat {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    use image::DynamicImage::*;
    let rgb = match decoded {
        ImageRgb8(img) => img,
        img @ (ImageLuma8(_) | ImageLumaA8(_) | ImageRgba8(_)) => img.to_rgb8(),
        other => {
            return Err(FurnError::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("{:?} is not an 8-bit format", other.color()),
            })
        }
    };
    Ok(ImageTensor::from_rgb8(&rgb))
}

/// Center-crops the longer side to a square, then resamples to `size×size`.
pub fn center_crop_resize(img: &ImageTensor, size: usize) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    if h.min(w) < MIN_SIDE {
        return Err(FurnError::DegenerateImage {
            height: h,
            width: w,
            min: MIN_SIDE,
        });
    }
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let cropped = if side == h && side == w {
        img.clone()
    } else {
        ImageTensor::from_fn(side, side, |y, x| {
            [0, 1, 2].map(|c| img.get(c, y + y0, x + x0))
        })
    };
    if side == size {
        return Ok(cropped);
    }
    bicubic_resample(&cropped, size, size, &DegradationSpec::resize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(dir: &Path, name: &str, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> std::path::PathBuf {
        let img = RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y)));
        let p = dir.join(name);
        img.save(&p).unwrap();
        p
    }

    #[test]
    fn load_maps_bytes_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let black = load_image(&write_png(dir.path(), "b.png", 16, 16, |_, _| [0; 3])).unwrap();
        assert_eq!((black.height(), black.width()), (16, 16));
        assert!(black.data().iter().all(|&v| v == 0.0));
        let white = load_image(&write_png(dir.path(), "w.png", 16, 16, |_, _| [255; 3])).unwrap();
        assert!(white.data().iter().all(|&v| v == 1.0));
        let mid = load_image(&write_png(dir.path(), "m.png", 8, 8, |_, _| [128, 0, 255])).unwrap();
        assert_eq!(mid.get(0, 3, 3), 128.0 / 255.0);
        assert!((mid.get(0, 0, 0) - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(&dir.path().join("nope.png")),
            Err(FurnError::UnreadableFile { .. })
        ));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"definitely not an image").unwrap();
        assert!(matches!(load_image(&junk), Err(FurnError::UnsupportedFormat { .. })));
    }

    #[test]
    fn crop_identity_and_crop_only() {
        let img = ImageTensor::from_fn(32, 32, |y, x| [y as f64 / 31.0, x as f64 / 31.0, 0.5]);
        assert_eq!(center_crop_resize(&img, 32).unwrap(), img);
        // 64 wide, 32 tall: the central 32 columns survive untouched
        let wide = ImageTensor::from_fn(32, 64, |y, x| [x as f64 / 63.0, y as f64 / 31.0, 0.0]);
        let out = center_crop_resize(&wide, 32).unwrap();
        assert_eq!(out.width(), 32);
        assert_eq!(out.get(0, 5, 0), wide.get(0, 5, 16));
        assert_eq!(out.get(0, 5, 31), wide.get(0, 5, 47));
    }

    #[test]
    fn crop_resize_preserves_constants() {
        let img = ImageTensor::constant(200, 300, 0.5);
        let out = center_crop_resize(&img, 256).unwrap();
        assert_eq!((out.height(), out.width()), (256, 256));
        assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn crop_rejects_tiny_images() {
        let img = ImageTensor::constant(7, 40, 0.1);
        assert!(matches!(center_crop_resize(&img, 8), Err(FurnError::DegenerateImage { .. })));
    }

    #[test]
    fn png_round_trip_is_lossless_for_quantized_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(9, 11, |y, x| [(y * 11 + x) as f64 / 255.0, 0.2, 0.9]).quantized();
        let p = dir.path().join("rt.png");
        img.save_png(&p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }
}
