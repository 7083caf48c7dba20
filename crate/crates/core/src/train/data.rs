//! Synthetic shapes and on-disk datasets.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{io, NormalizationInfo, PointCloud};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Torus];
}

/// Torus radii inside the unit cube.
pub const TORUS_MAJOR: f64 = 0.35;
pub const TORUS_MINOR: f64 = 0.15;

/// Uniform surface samples of `shape`, already inside `[-0.5, 0.5]^3`.
pub fn sample_shape(shape: Shape, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = Tensor::zeros(n, 3);
    for i in 0..n {
        let p = match shape {
            Shape::Sphere => loop {
                let v: [f64; 3] = [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)];
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if len > 1e-12 {
                    break [0.5 * v[0] / len, 0.5 * v[1] / len, 0.5 * v[2] / len];
                }
            },
            Shape::Cube => {
                // Faces are taken round-robin so every face is populated.
                let face = i % 6;
                let (a, b) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
                let s = if face % 2 == 0 { -0.5 } else { 0.5 };
                match face / 2 {
                    0 => [s, a, b],
                    1 => [a, s, b],
                    _ => [a, b, s],
                }
            }
            Shape::Cylinder => {
                let r = 0.5;
                let side = 2.0 * PI * r;
                let caps = 2.0 * PI * r * r;
                let u: f64 = rng.gen_range(0.0..side + caps);
                if u < side {
                    let t = rng.gen_range(0.0..2.0 * PI);
                    [r * t.cos(), r * t.sin(), rng.gen_range(-0.5..0.5)]
                } else {
                    let t = rng.gen_range(0.0..2.0 * PI);
                    let rr = r * rng.gen_range(0.0f64..1.0).sqrt();
                    let z = if u - side < caps / 2.0 { -0.5 } else { 0.5 };
                    [rr * t.cos(), rr * t.sin(), z]
                }
            }
            Shape::Torus => loop {
                let t = rng.gen_range(0.0..2.0 * PI);
                let f = rng.gen_range(0.0..2.0 * PI);
                let w = (TORUS_MAJOR + TORUS_MINOR * f.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                if rng.gen_range(0.0..1.0) < w {
                    let ring = TORUS_MAJOR + TORUS_MINOR * f.cos();
                    break [ring * t.cos(), ring * t.sin(), TORUS_MINOR * f.sin()];
                }
            },
        };
        out.row_mut(i).copy_from_slice(&p);
    }
    out
}

/// `count` clouds cycling through `recipe`, each with `points` samples.
pub fn make_synthetic_dataset(recipe: &[Shape], count: usize, points: usize, seed: u64) -> Result<Vec<PointCloud>> {
    if points < 64 {
        return Err(Error::InvalidArgument(format!("synthetic clouds need at least 64 points, got {points}")));
    }
    if recipe.is_empty() {
        return Err(Error::InvalidArgument("empty shape recipe".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut pc = PointCloud::new(sample_shape(recipe[i % recipe.len()], points, &mut rng))?;
            pc.norm = Some(NormalizationInfo { center: [0.0; 3], scale: 1.0 });
            Ok(pc)
        })
        .collect()
}

/// Draws exactly `n` points: a random subset when the cloud is larger,
/// every point plus random repeats when it is smaller. Returns whether
/// points had to be repeated.
pub fn resample(pc: &PointCloud, n: usize, rng: &mut ChaCha8Rng) -> (PointCloud, bool) {
    let m = pc.len();
    if m == n {
        return (pc.clone(), false);
    }
    let mut idx: Vec<usize> = (0..m).collect();
    if m > n {
        idx.shuffle(rng);
        idx.truncate(n);
        idx.sort_unstable();
        (pc.select(&idx), false)
    } else {
        while idx.len() < n {
            idx.push(rng.gen_range(0..m));
        }
        (pc.select(&idx), true)
    }
}

fn is_cloud_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("ply" | "xyz" | "txt" | "pts" | "npy" | "npz")
    )
}

/// Loads every point file under `root` (sorted by path), normalizes each to
/// the unit cube and resamples it to `points`.
pub fn load_directory(root: &Path, points: usize, seed: u64) -> Result<Vec<PointCloud>> {
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if is_cloud_file(&p) {
                files.push(p);
            }
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no point files under {}", root.display())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let pc = io::load_any(&f)?.normalize_unit_cube()?;
        let (pc, repeated) = resample(&pc, points, &mut rng);
        if repeated {
            log::warn!("{}: fewer than {points} points, resampled with replacement", f.display());
        }
        out.push(pc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_radius_and_cube_faces() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_shape(Shape::Sphere, 200, &mut rng);
        for i in 0..200 {
            let r: f64 = s.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((r - 0.5).abs() < 1e-6);
        }
        let c = sample_shape(Shape::Cube, 64, &mut rng);
        let mut faces = [0usize; 6];
        for i in 0..64 {
            let p = c.row(i);
            for a in 0..3 {
                if p[a] == -0.5 {
                    faces[2 * a] += 1;
                } else if p[a] == 0.5 {
                    faces[2 * a + 1] += 1;
                }
            }
        }
        assert!(faces.iter().all(|&f| f >= 1), "{faces:?}");
    }

    #[test]
    fn resample_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pc = PointCloud::new(sample_shape(Shape::Torus, 100, &mut rng)).unwrap();
        let (a, rep) = resample(&pc, 64, &mut rng);
        assert_eq!((a.len(), rep), (64, false));
        let (b, rep) = resample(&pc, 150, &mut rng);
        assert_eq!((b.len(), rep), (150, true));
    }
}
