//! Synthetic lesion-like samples: one or two filled ellipses on a noisy
//! textured background, with masks that are the exact ellipse indicator at
//! pixel centers.

use std::f64::consts::PI;

use super::SegmentationSample;
use crate::error::{Error, Result};
use crate::rng::{SeededRng, Stream};
use crate::tensor::Tensor;

/// Smallest accepted image side.
pub const MIN_SIZE: usize = 16;
/// Masks covering this fraction of the image or more are redrawn.
pub const MAX_COVERAGE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    pub b: f64,
    /// Rotation in radians.
    pub theta: f64,
}

impl Ellipse {
    /// Closed inequality test at a point in pixel coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample: SegmentationSample,
    pub ellipses: Vec<Ellipse>,
}

fn draw_ellipses(rng: &mut SeededRng, size: usize) -> Vec<Ellipse> {
    let s = size as f64;
    let count = 1 + rng.below(2);
    (0..count)
        .map(|_| Ellipse {
            cx: rng.uniform(0.2 * s, 0.8 * s),
            cy: rng.uniform(0.2 * s, 0.8 * s),
            a: rng.uniform(0.08 * s, 0.3 * s),
            b: rng.uniform(0.08 * s, 0.3 * s),
            theta: rng.uniform(0.0, PI),
        })
        .collect()
}

fn rasterize(ellipses: &[Ellipse], size: usize) -> Vec<f32> {
    let mut mask = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if ellipses.iter().any(|e| e.contains(px, py)) {
                mask[y * size + x] = 1.0;
            }
        }
    }
    mask
}

fn render(rng: &mut SeededRng, mask: &[f32], size: usize) -> Vec<f32> {
    let plane = size * size;
    let background: [f64; 3] = [rng.uniform(0.65, 0.9), rng.uniform(0.45, 0.7), rng.uniform(0.4, 0.65)];
    let darken = rng.uniform(0.35, 0.65);
    let lesion: Vec<f64> = background.iter().map(|c| c * darken).collect();
    let (fx, fy) = (rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5));
    let (px, py) = (rng.uniform(0.0, 2.0 * PI), rng.uniform(0.0, 2.0 * PI));
    let texture = rng.uniform(0.02, 0.08);
    let noise = rng.uniform(0.02, 0.06);

    let mut image = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let wave = texture * (fx * x as f64 + px).sin() * (fy * y as f64 + py).sin();
            let base = if mask[i] > 0.0 { &lesion[..] } else { &background[..] };
            for c in 0..3 {
                let v = base[c] + wave + noise * rng.normal();
                image[c * plane + i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    image
}

/// `n` samples of side `size` with their generating ellipses.
pub fn synth_blobs_with_shapes(n: usize, size: usize, seed: u64) -> Result<Vec<SynthSample>> {
    if size < MIN_SIZE {
        return Err(Error::InvalidArgument(format!("synthetic size {size} is below {MIN_SIZE}")));
    }
    let mut rng = SeededRng::new(seed, Stream::Synth);
    let plane = size * size;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (ellipses, mask) = loop {
            let ellipses = draw_ellipses(&mut rng, size);
            let mask = rasterize(&ellipses, size);
            let on = mask.iter().filter(|&&v| v > 0.0).count();
            if on > 0 && (on as f64) < MAX_COVERAGE * plane as f64 {
                break (ellipses, mask);
            }
        };
        let image = render(&mut rng, &mask, size);
        let sample = SegmentationSample::new(
            format!("blob_{i:04}"),
            Tensor::new(&[3, size, size], image)?,
            Tensor::new(&[1, size, size], mask)?,
        )?;
        out.push(SynthSample { sample, ellipses });
    }
    Ok(out)
}

/// `n` samples of side `size`, deterministic in `seed`.
pub fn synth_blobs(n: usize, size: usize, seed: u64) -> Result<Vec<SegmentationSample>> {
    Ok(synth_blobs_with_shapes(n, size, seed)?
        .into_iter()
        .map(|s| s.sample)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = synth_blobs(4, 32, 9).unwrap();
        let b = synth_blobs(4, 32, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].image.shape(), &[3, 32, 32]);
        assert_eq!(a[3].id, "blob_0003");
        assert_ne!(a, synth_blobs(4, 32, 10).unwrap());
    }

    #[test]
    fn coverage_bounds() {
        for s in synth_blobs(30, 24, 3).unwrap() {
            let on = s.mask.data().iter().filter(|&&v| v == 1.0).count();
            assert!(on > 0 && (on as f64) < 0.6 * 576.0);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn too_small_rejected() {
        assert!(synth_blobs(1, 8, 0).is_err());
    }

    #[test]
    fn rotated_ellipse_membership() {
        let e = Ellipse {
            cx: 0.0,
            cy: 0.0,
            a: 2.0,
            b: 1.0,
            theta: PI / 2.0,
        };
        // long axis now vertical
        assert!(e.contains(0.0, 1.9));
        assert!(!e.contains(1.9, 0.0));
    }
}
