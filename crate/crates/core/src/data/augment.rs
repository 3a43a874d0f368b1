//! Shift-and-rotate augmentation, plus the bilinear warp shared with the
//! geometric corruptions.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub max_shift_px: u32,
    pub max_rotate_deg: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            max_shift_px: 2,
            max_rotate_deg: 10.0,
        }
    }
}

/// Inverse-mapped affine transform about the image centre: output pixel `p`
/// samples the input at `A·(p − c − t) + c`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Affine {
    /// Row-major 2×2 matrix acting on `(x, y)`.
    pub a: [f64; 4],
    pub shift: (f64, f64),
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            a: [1.0, 0.0, 0.0, 1.0],
            shift: (0.0, 0.0),
        }
    }

    /// Rotation of the content by `deg` counter-clockwise.
    pub fn rotation(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Self {
            a: [c, -s, s, c],
            shift: (0.0, 0.0),
        }
    }

    /// Zoom of the content by `factor` (> 1 enlarges).
    pub fn scale(factor: f64) -> Self {
        Self {
            a: [1.0 / factor, 0.0, 0.0, 1.0 / factor],
            shift: (0.0, 0.0),
        }
    }

    pub fn shifted(mut self, dx: f64, dy: f64) -> Self {
        self.shift = (dx, dy);
        self
    }
}

/// Bilinear resampling of one `h×w` plane with zero fill outside.
pub(crate) fn warp_plane(src: &[f32], h: usize, w: usize, t: &Affine, out: &mut [f32]) {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let at = |x: isize, y: isize| -> f32 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 - cx - t.shift.0;
            let py = y as f64 - cy - t.shift.1;
            let sx = t.a[0] * px + t.a[1] * py + cx;
            let sy = t.a[2] * px + t.a[3] * py + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as isize, y0 as isize);
            out[y * w + x] = if fx == 0.0 && fy == 0.0 {
                at(x0, y0)
            } else {
                let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
                let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
                (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
            };
        }
    }
}

/// Applies `t` to every channel of sample `[C, H, W]`.
pub(crate) fn warp_sample(sample: &[f32], shape: &[usize], t: &Affine) -> Vec<f32> {
    let (h, w) = (shape[1], shape[2]);
    let mut out = vec![0.0f32; sample.len()];
    for (src, dst) in sample.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        warp_plane(src, h, w, t, dst);
    }
    out
}

/// Returns `multiplier·N` samples: the originals, then `multiplier − 1`
/// randomly shifted and rotated copies in original order.
pub fn augment(
    data: &Dataset,
    multiplier: usize,
    spec: &AugmentSpec,
    rng: &RngStream,
) -> Result<Dataset, DataError> {
    if multiplier == 0 {
        return Err(DataError::Malformed {
            what: "augmentation".into(),
            reason: "multiplier must be at least 1".into(),
        });
    }
    if multiplier == 1 {
        return Ok(data.clone());
    }
    let n = data.len();
    let shape = data.sample_shape().to_vec();
    let images = data.images();
    let mut parts = vec![images.clone()];
    for copy in 1..multiplier {
        let rows: Vec<Vec<f32>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = rng.derive(&[copy as u64, i as u64]).rng();
                let s = spec.max_shift_px as i64;
                let dx = r.random_range(-s..=s) as f64;
                let dy = r.random_range(-s..=s) as f64;
                let deg = if spec.max_rotate_deg > 0.0 {
                    r.random_range(-spec.max_rotate_deg..=spec.max_rotate_deg)
                } else {
                    0.0
                };
                warp_sample(images.row(i), &shape, &Affine::rotation(deg).shifted(dx, dy))
            })
            .collect();
        let mut full = vec![n];
        full.extend_from_slice(&shape);
        parts.push(Tensor::new(full, rows.concat())?);
    }
    let labels = data.labels().repeat(multiplier);
    Dataset::new(
        format!("{}-aug{multiplier}", data.name()),
        Tensor::concat_rows(&parts)?,
        labels,
        data.num_classes(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Dataset {
        let data: Vec<f32> = (0..n * 36).map(|i| ((i * 7) % 11) as f32 / 10.0).collect();
        let images = Tensor::new(vec![n, 1, 6, 6], data).unwrap();
        Dataset::new("ramp", images, (0..n).map(|i| i % 10).collect(), 10).unwrap()
    }

    #[test]
    fn multiplier_one_is_identity() {
        let d = ramp(5);
        assert_eq!(augment(&d, 1, &AugmentSpec::default(), &RngStream::new(0)).unwrap(), d);
    }

    #[test]
    fn labels_follow_generation_order() {
        let d = ramp(100);
        let a = augment(&d, 3, &AugmentSpec::default(), &RngStream::new(1)).unwrap();
        assert_eq!(a.len(), 300);
        for i in 0..300 {
            assert_eq!(a.labels()[i], d.labels()[i % 100]);
        }
        assert_eq!(a.images().slice_rows(0, 100), *d.images());
    }

    #[test]
    fn null_spec_copies_are_bitwise_equal() {
        let d = ramp(10);
        let spec = AugmentSpec {
            max_shift_px: 0,
            max_rotate_deg: 0.0,
        };
        let a = augment(&d, 4, &spec, &RngStream::new(2)).unwrap();
        for i in 0..40 {
            assert_eq!(a.images().row(i), d.images().row(i % 10));
        }
    }

    #[test]
    fn integer_shift_moves_pixels() {
        let mut src = vec![0.0f32; 25];
        src[12] = 1.0;
        let mut out = vec![0.0f32; 25];
        warp_plane(&src, 5, 5, &Affine::identity().shifted(1.0, -2.0), &mut out);
        // Centre (2,2) lands on (3,0).
        assert_eq!(out[3], 1.0);
        assert_eq!(out.iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn quarter_turn_is_exact() {
        let src: Vec<f32> = (0..9).map(|v| v as f32 / 8.0).collect();
        let mut out = vec![0.0f32; 9];
        warp_plane(&src, 3, 3, &Affine::rotation(90.0), &mut out);
        let mut sorted = out.clone();
        sorted.sort_by(f32::total_cmp);
        assert_eq!(out[4], src[4]);
        assert!((sorted.iter().sum::<f32>() - src.iter().sum::<f32>()).abs() < 1e-5);
    }
}
