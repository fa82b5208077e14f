//! Edge maps and their binarization into sketches.

use crate::error::{RegoError, Result};
use crate::imageio::{ImageSample, Sketch};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.6;

/// Produces an edge-strength map in `[0, 1]` with the image's spatial size.
pub trait EdgePlugin: Send + Sync {
    fn id(&self) -> &str;
    /// Returns a `[1, 1, H, W]` tensor.
    fn detect(&self, pixels: &Tensor) -> Result<Tensor>;
}

/// Gradient magnitude of luminance from 3×3 horizontal and vertical difference
/// kernels, with replicated borders, divided by the image's strongest response.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradientEdges;

impl GradientEdges {
    /// Unnormalized magnitude at every pixel.
    pub fn magnitude(pixels: &Tensor) -> Tensor {
        let (h, w) = (pixels.h(), pixels.w());
        let luma = Tensor::from_fn([1, 1, h, w], |_, _, y, x| {
            0.299 * pixels.at(0, 0, y, x) + 0.587 * pixels.at(0, 1, y, x) + 0.114 * pixels.at(0, 2, y, x)
        });
        let at = |y: isize, x: isize| {
            let yy = y.clamp(0, h as isize - 1) as usize;
            let xx = x.clamp(0, w as isize - 1) as usize;
            luma.at(0, 0, yy, xx)
        };
        Tensor::from_fn([1, 1, h, w], |_, _, y, x| {
            let (y, x) = (y as isize, x as isize);
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            (gx * gx + gy * gy).sqrt()
        })
    }
}

impl EdgePlugin for GradientEdges {
    fn id(&self) -> &str {
        "gradient-3x3"
    }

    fn detect(&self, pixels: &Tensor) -> Result<Tensor> {
        let mag = Self::magnitude(pixels);
        let max = mag.data().iter().cloned().fold(0.0, f64::max);
        if max < 1e-9 {
            return Ok(Tensor::zeros(mag.shape()));
        }
        Ok(mag.map(|v| v / max))
    }
}

/// Ones wherever the detector output reaches `threshold`.
pub fn binarize(edge_map: &Tensor, threshold: f64) -> Result<Sketch> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(RegoError::Config(format!("threshold {threshold} must lie in (0,1)")));
    }
    Sketch::new(edge_map.map(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

pub fn extract_sketch(image: &ImageSample, detector: &dyn EdgePlugin, threshold: f64) -> Result<Sketch> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(RegoError::Config(format!("threshold {threshold} must lie in (0,1)")));
    }
    let edges = detector.detect(image.pixels())?;
    let expected = [1, 1, image.height(), image.width()];
    if edges.shape() != expected {
        return Err(RegoError::Shape(format!(
            "detector `{}` returned {:?}, expected {expected:?}",
            detector.id(),
            edges.shape()
        )));
    }
    if edges.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(RegoError::InvalidValue(format!(
            "detector `{}` returned values outside [0,1]",
            detector.id()
        )));
    }
    binarize(&edges, threshold)
}
