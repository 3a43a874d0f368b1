//! Natively generated corruptions with severity-indexed magnitudes.
//!
//! Severity table (index = severity − 1):
//!
//! | kind             | parameter              | 1    | 2    | 3    | 4    | 5    |
//! |------------------|------------------------|------|------|------|------|------|
//! | `gaussian_noise` | σ                      | 0.04 | 0.08 | 0.12 | 0.18 | 0.26 |
//! | `shot_noise`     | photons per unit       | 60   | 25   | 12   | 5    | 3    |
//! | `impulse_noise`  | flip probability       | 0.03 | 0.06 | 0.09 | 0.17 | 0.27 |
//! | `brightness`     | additive shift         | 0.1  | 0.2  | 0.3  | 0.4  | 0.5  |
//! | `contrast`       | factor about the mean  | 0.4  | 0.3  | 0.2  | 0.1  | 0.05 |
//! | `translate`      | shift in pixels        | 1    | 2    | 3    | 4    | 6    |
//! | `rotate`         | angle in degrees (±)   | 10   | 20   | 30   | 45   | 60   |
//! | `scale`          | zoom factor            | 0.9  | 0.8  | 0.7  | 0.6  | 0.5  |
//! | `pixelate`       | block size in pixels   | 2    | 3    | 4    | 5    | 7    |
//! | `stripe`         | inverted band width    | 1    | 2    | 3    | 4    | 6    |
//!
//! Blur, weather and edge corruptions are not synthesized here; evaluate
//! those from precomputed NPY archives.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{warp_sample, Affine};
use super::{DataError, Dataset};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    Brightness,
    Contrast,
    Translate,
    Rotate,
    Scale,
    Pixelate,
    Stripe,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 10] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Translate,
        CorruptionKind::Rotate,
        CorruptionKind::Scale,
        CorruptionKind::Pixelate,
        CorruptionKind::Stripe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Translate => "translate",
            CorruptionKind::Rotate => "rotate",
            CorruptionKind::Scale => "scale",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Stripe => "stripe",
        }
    }

    /// Concrete transform for `severity` in `1..=5`.
    pub fn at_severity(self, severity: u8) -> Result<Corruption, DataError> {
        if !(1..=5).contains(&severity) {
            return Err(DataError::Severity(severity));
        }
        let s = severity as usize - 1;
        Ok(match self {
            CorruptionKind::GaussianNoise => Corruption::GaussianNoise {
                sigma: [0.04, 0.08, 0.12, 0.18, 0.26][s],
            },
            CorruptionKind::ShotNoise => Corruption::ShotNoise {
                photons: [60.0, 25.0, 12.0, 5.0, 3.0][s],
            },
            CorruptionKind::ImpulseNoise => Corruption::ImpulseNoise {
                prob: [0.03, 0.06, 0.09, 0.17, 0.27][s],
            },
            CorruptionKind::Brightness => Corruption::Brightness {
                delta: [0.1, 0.2, 0.3, 0.4, 0.5][s],
            },
            CorruptionKind::Contrast => Corruption::Contrast {
                factor: [0.4, 0.3, 0.2, 0.1, 0.05][s],
            },
            CorruptionKind::Translate => Corruption::Translate {
                px: [1, 2, 3, 4, 6][s],
            },
            CorruptionKind::Rotate => Corruption::Rotate {
                deg: [10.0, 20.0, 30.0, 45.0, 60.0][s],
            },
            CorruptionKind::Scale => Corruption::Scale {
                factor: [0.9, 0.8, 0.7, 0.6, 0.5][s],
            },
            CorruptionKind::Pixelate => Corruption::Pixelate {
                block: [2, 3, 4, 5, 7][s],
            },
            CorruptionKind::Stripe => Corruption::Stripe {
                width: [1, 2, 3, 4, 6][s],
            },
        })
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Names of archive-only corruptions, accepted so the error can say where
/// to get them.
const PRECOMPUTED: &[&str] = &[
    "motion_blur",
    "glass_blur",
    "defocus_blur",
    "zoom_blur",
    "gaussian_blur",
    "fog",
    "frost",
    "snow",
    "spatter",
    "canny_edges",
    "dotted_line",
    "zigzag",
    "shear",
    "elastic_transform",
    "jpeg_compression",
    "saturate",
    "speckle_noise",
];

impl FromStr for CorruptionKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        let key = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        if let Some(k) = CorruptionKind::ALL.iter().find(|k| k.name() == key) {
            return Ok(*k);
        }
        if PRECOMPUTED.contains(&key.as_str()) {
            return Err(DataError::UsePrecomputed(s.to_string()));
        }
        Err(DataError::UnknownCorruption(s.to_string()))
    }
}

/// A corruption with explicit magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    GaussianNoise { sigma: f64 },
    ShotNoise { photons: f64 },
    ImpulseNoise { prob: f64 },
    Brightness { delta: f64 },
    Contrast { factor: f64 },
    Translate { px: u32 },
    Rotate { deg: f64 },
    Scale { factor: f64 },
    Pixelate { block: usize },
    Stripe { width: usize },
}

impl Corruption {
    /// A scalar that grows with distortion strength.
    pub fn magnitude(&self) -> f64 {
        match *self {
            Corruption::GaussianNoise { sigma } => sigma,
            Corruption::ShotNoise { photons } => 1.0 / photons,
            Corruption::ImpulseNoise { prob } => prob,
            Corruption::Brightness { delta } => delta.abs(),
            Corruption::Contrast { factor } => 1.0 - factor,
            Corruption::Translate { px } => px as f64,
            Corruption::Rotate { deg } => deg.abs(),
            Corruption::Scale { factor } => 1.0 - factor,
            Corruption::Pixelate { block } => block as f64,
            Corruption::Stripe { width } => width as f64,
        }
    }

    fn apply(&self, x: &[f32], shape: &[usize], rng: &mut impl Rng) -> Vec<f32> {
        let (h, w) = (shape[1], shape[2]);
        let mut out = match *self {
            Corruption::GaussianNoise { sigma } => {
                let n = Normal::new(0.0, sigma).expect("finite sigma");
                x.iter().map(|&v| v + n.sample(rng) as f32).collect()
            }
            Corruption::ShotNoise { photons } => x
                .iter()
                .map(|&v| {
                    let lam = v as f64 * photons;
                    if lam <= 0.0 {
                        0.0
                    } else {
                        (Poisson::new(lam).expect("positive rate").sample(rng) / photons) as f32
                    }
                })
                .collect(),
            Corruption::ImpulseNoise { prob } => x
                .iter()
                .map(|&v| {
                    if prob > 0.0 && rng.random_bool(prob.min(1.0)) {
                        if rng.random_bool(0.5) {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        v
                    }
                })
                .collect(),
            Corruption::Brightness { delta } => x.iter().map(|&v| v + delta as f32).collect(),
            Corruption::Contrast { factor } => {
                let plane = h * w;
                let mut out = Vec::with_capacity(x.len());
                for ch in x.chunks_exact(plane) {
                    let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                    out.extend(ch.iter().map(|&v| ((v as f64 - mean) * factor + mean) as f32));
                }
                out
            }
            Corruption::Translate { px } => {
                // One of the eight compass directions.
                let dir = rng.random_range(0..8u32);
                let (dx, dy) = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)]
                    [dir as usize];
                let t = Affine::identity().shifted((dx * px as i64) as f64, (dy * px as i64) as f64);
                warp_sample(x, shape, &t)
            }
            Corruption::Rotate { deg } => {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                warp_sample(x, shape, &Affine::rotation(sign * deg))
            }
            Corruption::Scale { factor } => warp_sample(x, shape, &Affine::scale(factor)),
            Corruption::Pixelate { block } => {
                let mut out = x.to_vec();
                let b = block.max(1);
                for plane in out.chunks_exact_mut(h * w) {
                    for by in (0..h).step_by(b) {
                        for bx in (0..w).step_by(b) {
                            let (ye, xe) = ((by + b).min(h), (bx + b).min(w));
                            let mut s = 0.0f32;
                            for y in by..ye {
                                for x in bx..xe {
                                    s += plane[y * w + x];
                                }
                            }
                            let m = s / ((ye - by) * (xe - bx)) as f32;
                            for y in by..ye {
                                for x in bx..xe {
                                    plane[y * w + x] = m;
                                }
                            }
                        }
                    }
                }
                out
            }
            Corruption::Stripe { width } => {
                let mut out = x.to_vec();
                let width = width.min(w);
                let start = rng.random_range(0..=w - width);
                for plane in out.chunks_exact_mut(h * w) {
                    for y in 0..h {
                        for v in &mut plane[y * w + start..y * w + start + width] {
                            *v = 1.0 - *v;
                        }
                    }
                }
                out
            }
        };
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }
}

/// Applies `corruption` to every sample; sample `i` draws from `rng/[i]`.
pub fn apply_corruption(data: &Dataset, corruption: &Corruption, rng: &RngStream) -> Result<Dataset, DataError> {
    let shape = data.sample_shape().to_vec();
    let images = data.images();
    let rows: Vec<Vec<f32>> = (0..data.len())
        .into_par_iter()
        .map(|i| corruption.apply(images.row(i), &shape, &mut rng.derive(&[i as u64]).rng()))
        .collect();
    Dataset::new(
        data.name(),
        Tensor::new(images.shape().to_vec(), rows.concat())?,
        data.labels().to_vec(),
        data.num_classes(),
    )
}

pub fn corrupt(data: &Dataset, kind: CorruptionKind, severity: u8, rng: &RngStream) -> Result<Dataset, DataError> {
    let c = kind.at_severity(severity)?;
    Ok(apply_corruption(data, &c, rng)?.with_name(format!("{}-{kind}-{severity}", data.name())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(n: usize, v: f32) -> Dataset {
        Dataset::new("c", Tensor::full(&[n, 1, 28, 28], v), vec![0; n], 10).unwrap()
    }

    fn digits(n: usize) -> Dataset {
        let data: Vec<f32> = (0..n * 784).map(|i| ((i * 31 % 97) as f32) / 96.0).collect();
        Dataset::new("d", Tensor::new(vec![n, 1, 28, 28], data).unwrap(), (0..n).map(|i| i % 10).collect(), 10)
            .unwrap()
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let d = digits(4);
        let rng = RngStream::new(5);
        assert_eq!(apply_corruption(&d, &Corruption::ImpulseNoise { prob: 0.0 }, &rng).unwrap(), d);
        assert_eq!(apply_corruption(&d, &Corruption::Brightness { delta: 0.0 }, &rng).unwrap(), d);
        assert_eq!(apply_corruption(&d, &Corruption::Translate { px: 0 }, &rng).unwrap(), d);
        assert_eq!(apply_corruption(&d, &Corruption::Pixelate { block: 1 }, &rng).unwrap(), d);
    }

    #[test]
    fn gaussian_noise_statistics() {
        let d = constant(1000, 0.5);
        let c = apply_corruption(&d, &Corruption::GaussianNoise { sigma: 0.1 }, &RngStream::new(9)).unwrap();
        let px = c.images().data();
        let n = px.len() as f64;
        let mean = px.iter().map(|&v| v as f64).sum::<f64>() / n;
        let sd = (px.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((sd - 0.1).abs() < 0.01, "sd {sd}");
    }

    #[test]
    fn severity_tables_are_monotone() {
        for kind in CorruptionKind::ALL {
            let mags: Vec<f64> = (1..=5).map(|s| kind.at_severity(s).unwrap().magnitude()).collect();
            assert!(mags.windows(2).all(|w| w[0] < w[1]), "{kind}: {mags:?}");
        }
        assert!(matches!(CorruptionKind::Rotate.at_severity(0), Err(DataError::Severity(0))));
        assert!(matches!(CorruptionKind::Rotate.at_severity(6), Err(DataError::Severity(6))));
    }

    #[test]
    fn every_kind_keeps_range_and_labels() {
        let d = digits(8);
        for kind in CorruptionKind::ALL {
            for s in [1, 5] {
                let c = corrupt(&d, kind, s, &RngStream::new(1)).unwrap();
                assert_eq!(c.labels(), d.labels());
                assert!(c.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert_ne!(c.images(), d.images(), "{kind} severity {s} changed nothing");
            }
        }
    }

    #[test]
    fn archive_only_kinds_point_to_npy() {
        assert!(matches!("fog".parse::<CorruptionKind>(), Err(DataError::UsePrecomputed(_))));
        assert!(matches!("Motion Blur".parse::<CorruptionKind>(), Err(DataError::UsePrecomputed(_))));
        assert!(matches!("wobble".parse::<CorruptionKind>(), Err(DataError::UnknownCorruption(_))));
        assert_eq!("shot-noise".parse::<CorruptionKind>().unwrap(), CorruptionKind::ShotNoise);
    }

    #[test]
    fn corruption_is_seeded() {
        let d = digits(3);
        let a = corrupt(&d, CorruptionKind::ShotNoise, 3, &RngStream::new(4)).unwrap();
        assert_eq!(a, corrupt(&d, CorruptionKind::ShotNoise, 3, &RngStream::new(4)).unwrap());
    }
}
