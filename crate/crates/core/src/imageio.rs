//! Image samples, sketches and PNG conversion.

use std::io::Cursor;
use std::path::Path;

use base64::Engine;
use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{RegoError, Result};
use crate::tensor::Tensor;

/// An RGB image with values in `[0, 1]`, stored as a `[1, 3, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pixels: Tensor,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Tensor) -> Result<Self> {
        let [n, c, h, w] = pixels.shape();
        if n != 1 || c != 3 || h == 0 || w == 0 {
            return Err(RegoError::Shape(format!("image must be [1,3,H,W], got {:?}", pixels.shape())));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(RegoError::InvalidValue("pixel values must lie in [0,1]".into()));
        }
        Ok(ImageSample { id: id.into(), pixels })
    }

    pub fn from_rgb(id: impl Into<String>, img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let pixels = Tensor::from_fn([1, 3, h as usize, w as usize], |_, c, y, x| {
            img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
        });
        ImageSample { id: id.into(), pixels }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self::from_rgb(id, &img))
    }

    pub fn height(&self) -> usize {
        self.pixels.h()
    }

    pub fn width(&self) -> usize {
        self.pixels.w()
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    fn check_even(&self) -> Result<()> {
        if self.width() % 2 != 0 {
            return Err(RegoError::Shape(format!(
                "image `{}` has odd width {}; halves must split exactly",
                self.id,
                self.width()
            )));
        }
        Ok(())
    }

    pub fn left_half(&self) -> Result<Tensor> {
        self.check_even()?;
        Ok(self.pixels.slice_width(0, self.width() / 2))
    }

    pub fn right_half(&self) -> Result<Tensor> {
        self.check_even()?;
        let half = self.width() / 2;
        Ok(self.pixels.slice_width(half, half))
    }

    pub fn to_rgb(&self) -> RgbImage {
        tensor_to_rgb(&self.pixels)
    }
}

/// A binary `[1, 1, H, W]` edge mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sketch {
    mask: Tensor,
}

impl Sketch {
    pub fn new(mask: Tensor) -> Result<Self> {
        let [n, c, _, _] = mask.shape();
        if n != 1 || c != 1 {
            return Err(RegoError::Shape(format!("sketch must be [1,1,H,W], got {:?}", mask.shape())));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(RegoError::InvalidValue("sketch entries must be exactly 0 or 1".into()));
        }
        Ok(Sketch { mask })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Sketch {
            mask: Tensor::zeros([1, 1, h, w]),
        }
    }

    /// Binarizes a grayscale image: ones where the value is at least `threshold`.
    pub fn from_gray(img: &GrayImage, threshold: f64) -> Self {
        let (w, h) = img.dimensions();
        let mask = Tensor::from_fn([1, 1, h as usize, w as usize], |_, _, y, x| {
            let v = img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0;
            if v >= threshold {
                1.0
            } else {
                0.0
            }
        });
        Sketch { mask }
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.mask.h()
    }

    pub fn width(&self) -> usize {
        self.mask.w()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask.at(0, 0, y, x) == 1.0
    }

    pub fn right_half(&self) -> Result<Sketch> {
        if self.width() % 2 != 0 {
            return Err(RegoError::Shape(format!("sketch width {} is odd", self.width())));
        }
        let half = self.width() / 2;
        Ok(Sketch {
            mask: self.mask.slice_width(half, half),
        })
    }

    pub fn to_gray(&self) -> GrayImage {
        let (h, w) = (self.height(), self.width());
        GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }
}

/// Quantizes a `[1,3,H,W]` tensor in `[0,1]` to 8-bit RGB.
pub fn tensor_to_rgb(t: &Tensor) -> RgbImage {
    let (h, w) = (t.h(), t.w());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (t.at(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn encode_png_gray(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_base64_image(data: &str) -> Result<image::DynamicImage> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data.trim())
        .map_err(|e| RegoError::InvalidValue(format!("bad base64: {e}")))?;
    Ok(image::load_from_memory(&bytes)?)
}

pub fn base64_png_rgb(img: &RgbImage) -> Result<String> {
    Ok(base64::engine::general_purpose::STANDARD.encode(encode_png_rgb(img)?))
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}
