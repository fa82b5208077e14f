//! Image embeddings used for reference retrieval.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::pool_bin;
use crate::error::{RegoError, Result};
use crate::tensor::Tensor;

pub trait EmbeddingPlugin: Send + Sync {
    /// Stable identifier recorded in the index so queries use the same embedder.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    /// Maps a `[1, 3, H, W]` image to a vector of length [`dim`](Self::dim).
    fn embed(&self, pixels: &Tensor) -> Result<Vec<f64>>;
}

/// Area-downsampled, centered pixels multiplied by a fixed seeded Gaussian matrix.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    seed: u64,
    grid: usize,
    dim: usize,
    matrix: Vec<f64>,
}

impl RandomProjection {
    pub const DEFAULT_DIM: usize = 128;
    pub const DEFAULT_GRID: usize = 16;

    pub fn new(seed: u64) -> Self {
        Self::with_shape(seed, Self::DEFAULT_GRID, Self::DEFAULT_DIM)
    }

    pub fn with_shape(seed: u64, grid: usize, dim: usize) -> Self {
        let inputs = 3 * grid * grid;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let matrix = (0..dim * inputs)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        RandomProjection {
            seed,
            grid,
            dim,
            matrix,
        }
    }

    /// Rebuilds an embedder from an id produced by [`EmbeddingPlugin::id`].
    pub fn from_id(id: &str) -> Result<Self> {
        let parts: Vec<&str> = id.split('-').collect();
        match parts.as_slice() {
            ["randproj", dim, grid, seed] => {
                let parse = |s: &str, prefix: &str| {
                    s.strip_prefix(prefix)
                        .and_then(|v| v.parse::<u64>().ok())
                        .ok_or_else(|| RegoError::Config(format!("unrecognized embedder id `{id}`")))
                };
                let dim = parse(dim, "d")? as usize;
                let grid = parse(grid, "g")? as usize;
                let seed = parse(seed, "s")?;
                Ok(Self::with_shape(seed, grid, dim))
            }
            _ => Err(RegoError::Config(format!("unrecognized embedder id `{id}`"))),
        }
    }
}

impl EmbeddingPlugin for RandomProjection {
    fn id(&self) -> String {
        format!("randproj-d{}-g{}-s{}", self.dim, self.grid, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, pixels: &Tensor) -> Result<Vec<f64>> {
        let [n, c, h, w] = pixels.shape();
        if n != 1 || c != 3 || h < self.grid || w < self.grid {
            return Err(RegoError::Shape(format!(
                "embedder needs [1,3,H,W] with H,W >= {}, got {:?}",
                self.grid,
                pixels.shape()
            )));
        }
        let g = self.grid;
        let mut small = Vec::with_capacity(3 * g * g);
        for ch in 0..3 {
            for gy in 0..g {
                let (y0, y1) = pool_bin(gy, g, h);
                for gx in 0..g {
                    let (x0, x1) = pool_bin(gx, g, w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += pixels.at(0, ch, y, x);
                        }
                    }
                    small.push(acc / ((y1 - y0) * (x1 - x0)) as f64 - 0.5);
                }
            }
        }
        Ok(self
            .matrix
            .chunks_exact(small.len())
            .map(|row| row.iter().zip(&small).map(|(a, b)| a * b).sum())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_round_trip() {
        let e = RandomProjection::with_shape(42, 8, 16);
        let back = RandomProjection::from_id(&e.id()).unwrap();
        assert_eq!(back.matrix, e.matrix);
        assert!(RandomProjection::from_id("hed").is_err());
    }

    #[test]
    fn embedding_is_deterministic_and_sized() {
        let e = RandomProjection::new(1);
        let img = Tensor::from_fn([1, 3, 32, 32], |_, c, y, x| ((c + y + x) % 7) as f64 / 7.0);
        let a = e.embed(&img).unwrap();
        assert_eq!(a.len(), 128);
        assert_eq!(a, e.embed(&img).unwrap());
    }
}
