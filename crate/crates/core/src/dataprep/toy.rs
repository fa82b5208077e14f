//! Procedural scenery images for smoke runs and tests.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
}

/// A landscape of sky, sun, two mountain ridges and ground, fully determined by `seed`.
pub fn scenery(seed: u64, height: usize, width: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dusk = rng.gen_bool(0.3);
    let (sky_top, sky_low) = if dusk {
        (jitter(&mut rng, [0.25, 0.2, 0.45], 0.1), jitter(&mut rng, [0.95, 0.6, 0.35], 0.1))
    } else {
        (jitter(&mut rng, [0.25, 0.5, 0.9], 0.1), jitter(&mut rng, [0.75, 0.87, 0.98], 0.05))
    };
    let far = jitter(&mut rng, [0.45, 0.5, 0.6], 0.12);
    let near = jitter(&mut rng, [0.2, 0.42, 0.22], 0.12);
    let ground = jitter(&mut rng, [0.35, 0.55, 0.25], 0.12);
    let sun = [1.0, 0.95, 0.7];
    let (h, w) = (height as f64, width as f64);
    let sun_x = rng.gen_range(0.1..0.9) * w;
    let sun_y = rng.gen_range(0.1..0.35) * h;
    let sun_r = rng.gen_range(0.04..0.08) * w;
    let ridge = |rng: &mut ChaCha8Rng, base: f64, amp: f64| {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|i| {
                (
                    amp / (i + 1) as f64 * rng.gen_range(0.5..1.0),
                    rng.gen_range(1.0..3.0) * (i + 1) as f64,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        move |x: f64| {
            base + waves
                .iter()
                .map(|(a, f, p)| a * (f * std::f64::consts::TAU * x / w + p).sin())
                .sum::<f64>()
        }
    };
    let far_base = rng.gen_range(0.4..0.5) * h;
    let far_ridge = ridge(&mut rng, far_base, 0.12 * h);
    let near_base = rng.gen_range(0.55..0.68) * h;
    let near_ridge = ridge(&mut rng, near_base, 0.08 * h);
    let ground_line = rng.gen_range(0.78..0.88) * h;
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut c = lerp(sky_top, sky_low, yf / h);
        if (xf - sun_x).powi(2) + (yf - sun_y).powi(2) < sun_r * sun_r {
            c = sun;
        }
        if yf > far_ridge(xf) {
            c = lerp(far, sky_low, 0.15);
        }
        if yf > near_ridge(xf) {
            c = lerp(near, [0.0, 0.0, 0.0], 0.3 * (yf / h));
        }
        if yf > ground_line {
            c = ground;
        }
        Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Writes `count` scenery images named `scene_000.png`, … into `dir`.
pub fn write_scenery_set(dir: &std::path::Path, count: usize, seed: u64, height: usize, width: usize) -> crate::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::RegoError::io(dir, e))?;
    for i in 0..count {
        scenery(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), height, width)
            .save(dir.join(format!("scene_{i:03}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_varied() {
        assert_eq!(scenery(3, 32, 64), scenery(3, 32, 64));
        assert_ne!(scenery(3, 32, 64), scenery(4, 32, 64));
    }
}
