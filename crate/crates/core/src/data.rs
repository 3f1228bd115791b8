//! Datasets: IDX image/label files, synthetic two-class blobs and the 1-d
//! three-class toy problem.
//!
//! Every loader returns inputs rescaled to `‖x‖² = d`, so that the first-layer
//! kernel `⟨x, x'⟩/d` is of order one whatever the input dimension.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Idx { images: String, labels: String },
    Synthetic { separation: f64, seed: u64 },
    Toy { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub points: Vec<DVector<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub source: DataSource,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }

    /// Subset with the given indices, in order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            points: idx.iter().map(|&i| self.points[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            source: self.source.clone(),
        }
    }

    /// Up to `per_class` points of every class drawn without replacement,
    /// interleaved class by class.
    pub fn balanced_subset(&self, per_class: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        for (c, v) in by_class.iter_mut().enumerate() {
            if v.len() < per_class {
                return Err(Error::InvalidArgument(format!("class {c} has {} points, need {per_class}", v.len())));
            }
            v.shuffle(&mut rng);
        }
        let idx: Vec<usize> = (0..per_class).flat_map(|j| by_class.iter().map(move |v| v[j])).collect();
        Ok(self.select(&idx))
    }
}

/// Rescales `x` in place to `‖x‖² = len(x)`; zero vectors are left alone.
pub fn normalize_rms(x: &mut DVector<f64>) {
    let n = x.norm();
    if n > 0.0 {
        *x *= (x.len() as f64).sqrt() / n;
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx("truncated header".into()))
}

/// Reads an unsigned-byte IDX image file; pixels are scaled to `[0, 1]`.
/// Returns the images (flattened row-major) and their dimension.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<(Vec<DVector<f64>>, usize)> {
    let bytes = fs::read(path)?;
    let magic = read_u32(&bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Idx(format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let count = read_u32(&bytes, 4)? as usize;
    let rows = read_u32(&bytes, 8)? as usize;
    let cols = read_u32(&bytes, 12)? as usize;
    let d = rows * cols;
    let body = &bytes[16..];
    if body.len() != count * d {
        return Err(Error::Idx(format!("expected {} pixel bytes, found {}", count * d, body.len())));
    }
    let images = body
        .chunks_exact(d)
        .map(|c| DVector::from_iterator(d, c.iter().map(|&p| p as f64 / 255.0)))
        .collect();
    Ok((images, d))
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let magic = read_u32(&bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Idx(format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let count = read_u32(&bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Idx(format!("expected {count} labels, found {}", body.len())));
    }
    Ok(body.to_vec())
}

/// Digits as a two-class odd/even problem, inputs rescaled to `‖x‖² = d`.
pub fn idx_parity(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (mut points, _) = read_idx_images(&images)?;
    let raw = read_idx_labels(&labels)?;
    if raw.len() != points.len() {
        return Err(Error::Idx(format!("{} images but {} labels", points.len(), raw.len())));
    }
    points.iter_mut().for_each(normalize_rms);
    Ok(Dataset {
        points,
        labels: raw.iter().map(|&l| (l % 2) as usize).collect(),
        classes: 2,
        source: DataSource::Idx {
            images: images.as_ref().display().to_string(),
            labels: labels.as_ref().display().to_string(),
        },
    })
}

/// Two Gaussian blobs in `ℝᵈ` with means `±(separation/2)·u` for a random
/// unit direction `u` and identity covariance, rescaled to `‖x‖² = d`.
/// Classes alternate: point `i` has label `i % 2`.
pub fn synthetic_blobs(n: usize, d: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if d == 0 {
        return Err(Error::InvalidArgument("input dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    u /= u.norm();
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
        let mut x = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng)) + &u * (sign * separation / 2.0);
        normalize_rms(&mut x);
        points.push(x);
        labels.push(i % 2);
    }
    Ok(Dataset {
        points,
        labels,
        classes: 2,
        source: DataSource::Synthetic { separation, seed },
    })
}

/// One-dimensional problem: `n` inputs spread over `[−3, 3]` with a small
/// seeded perturbation, split into `classes` contiguous label segments.
pub fn toy_1d(n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::InvalidArgument(format!("need n ≥ classes ≥ 2, got n = {n}, classes = {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 6.0 / n as f64;
    let points = (0..n)
        .map(|i| {
            let jitter: f64 = rng.random_range(-0.25..0.25);
            DVector::from_element(1, -3.0 + step * (i as f64 + 0.5 + jitter))
        })
        .collect();
    let labels = (0..n).map(|i| i * classes / n).collect();
    Ok(Dataset {
        points,
        labels,
        classes,
        source: DataSource::Toy { seed },
    })
}

/// `m` evenly spaced 1-d inputs on `[lo, hi]`.
pub fn grid_1d(lo: f64, hi: f64, m: usize) -> Vec<DVector<f64>> {
    match m {
        0 => Vec::new(),
        1 => vec![DVector::from_element(1, 0.5 * (lo + hi))],
        _ => (0..m)
            .map(|i| DVector::from_element(1, lo + (hi - lo) * i as f64 / (m - 1) as f64))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_files(dir: &Path, n: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let img = dir.join("img.idx");
        let lab = dir.join("lab.idx");
        let mut f = fs::File::create(&img).unwrap();
        f.write_all(&IDX_IMAGES.to_be_bytes()).unwrap();
        for v in [n as u32, 2, 2] {
            f.write_all(&v.to_be_bytes()).unwrap();
        }
        for i in 0..n {
            f.write_all(&[i as u8, 0, 255, 10]).unwrap();
        }
        let mut f = fs::File::create(&lab).unwrap();
        f.write_all(&IDX_LABELS.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&(0..n as u8).collect::<Vec<_>>()).unwrap();
        (img, lab)
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_files(dir.path(), 5);
        let (images, d) = read_idx_images(&img).unwrap();
        assert_eq!(d, 4);
        assert_eq!(images.len(), 5);
        assert_eq!(images[3].as_slice(), &[3.0 / 255.0, 0.0, 1.0, 10.0 / 255.0]);
        let ds = idx_parity(&img, &lab).unwrap();
        assert_eq!(ds.labels, vec![0, 1, 0, 1, 0]);
        for p in &ds.points {
            assert!((p.norm_squared() - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_files(dir.path(), 3);
        assert!(matches!(read_idx_images(&lab), Err(Error::Idx(_))));
        assert!(matches!(read_idx_labels(&img), Err(Error::Idx(_))));
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_idx_images(&img), Err(Error::Idx(_))));
        fs::write(&img, &bytes[..6]).unwrap();
        assert!(matches!(read_idx_images(&img), Err(Error::Idx(_))));
    }

    #[test]
    fn blobs_are_normalized_balanced_and_reproducible() {
        let a = synthetic_blobs(10, 784, 6.0, 3).unwrap();
        let b = synthetic_blobs(10, 784, 6.0, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 5);
        for p in &a.points {
            assert!((p.norm_squared() - 784.0).abs() < 1e-9);
        }
        let sub = a.balanced_subset(3, 1).unwrap();
        assert_eq!(sub.len(), 6);
        assert_eq!(sub.labels, vec![0, 1, 0, 1, 0, 1]);
        assert!(a.balanced_subset(6, 1).is_err());
    }

    #[test]
    fn toy_problem_layout() {
        let ds = toy_1d(12, 3, 0).unwrap();
        assert_eq!(ds.labels, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        assert!(ds.points.windows(2).all(|w| w[0][0] < w[1][0]));
        assert!(ds.points.iter().all(|p| p[0].abs() < 3.0));
        assert!(toy_1d(2, 3, 0).is_err());
        let g = grid_1d(-1.0, 1.0, 5);
        assert_eq!(g.iter().map(|p| p[0]).collect::<Vec<_>>(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(grid_1d(0.0, 1.0, 0).is_empty());
    }
}
