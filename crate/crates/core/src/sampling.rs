//! Fixed Monte Carlo sample pools and seeded minibatch draws.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::diffcalc::Point;
use crate::error::{Error, Result};
use crate::volume::voxel_center;

pub const DEFAULT_N_INT: usize = 10_000;
pub const FACE_SAMPLES: usize = 400;
pub const EDGE_SAMPLES: usize = 20;

/// One of the six faces of the unit cube: `x[axis] == level`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Face {
    pub axis: usize,
    pub level: f64,
}

/// One of the twelve edges: runs along `axis`, the other two coordinates
/// pinned to the given levels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub axis: usize,
    pub fixed: [(usize, f64); 2],
}

pub fn faces() -> [Face; 6] {
    let mut out = [Face { axis: 0, level: 0.0 }; 6];
    for axis in 0..3 {
        for (k, level) in [0.0, 1.0].into_iter().enumerate() {
            out[2 * axis + k] = Face { axis, level };
        }
    }
    out
}

pub fn edges() -> [Edge; 12] {
    let mut out = Vec::with_capacity(12);
    for axis in 0..3 {
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for l0 in [0.0, 1.0] {
            for l1 in [0.0, 1.0] {
                out.push(Edge {
                    axis,
                    fixed: [(others[0], l0), (others[1], l1)],
                });
            }
        }
    }
    out.try_into().unwrap()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePool {
    pub interior: Vec<Point>,
    pub image_dims: Option<[usize; 3]>,
    pub image_grid: Vec<Point>,
    pub face_samples: Vec<Vec<Point>>,
    pub edge_samples: Vec<Vec<Point>>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Interior,
    Image,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent RNG for `(seed, tags...)`.
pub fn derived_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let s = tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)));
    ChaCha8Rng::seed_from_u64(s)
}

fn interior_point(rng: &mut impl Rng) -> Point {
    let mut coord = || loop {
        let v: f64 = rng.gen();
        if v > 0.0 {
            return v;
        }
    };
    [coord(), coord(), coord()]
}

pub fn face_points(face: Face, n: usize, rng: &mut impl Rng) -> Vec<Point> {
    (0..n)
        .map(|_| {
            let mut p: Point = [rng.gen(), rng.gen(), rng.gen()];
            p[face.axis] = face.level;
            p
        })
        .collect()
}

pub fn edge_points(edge: Edge, n: usize, rng: &mut impl Rng) -> Vec<Point> {
    (0..n)
        .map(|_| {
            let mut p = [0.0; 3];
            p[edge.axis] = rng.gen();
            for (a, l) in edge.fixed {
                p[a] = l;
            }
            p
        })
        .collect()
}

/// Builds the per-run pool: `n_int` uniform interior points, voxel centers of
/// the image grid (if any), and the face/edge sets used by the soft boundary
/// penalty.
pub fn build_pool(n_int: usize, image_dims: Option<[usize; 3]>, seed: u64) -> Result<SamplePool> {
    if n_int == 0 {
        return Err(Error::config("n_int must be at least 1"));
    }
    let mut rng = derived_rng(seed, &[1]);
    let interior = (0..n_int).map(|_| interior_point(&mut rng)).collect();

    let image_grid = match image_dims {
        Some(d) => {
            let mut g = Vec::with_capacity(d[0] * d[1] * d[2]);
            for k in 0..d[2] {
                for j in 0..d[1] {
                    for i in 0..d[0] {
                        g.push(voxel_center(d, [i, j, k]));
                    }
                }
            }
            g
        }
        None => Vec::new(),
    };

    let mut rng = derived_rng(seed, &[2]);
    let face_samples = faces()
        .iter()
        .map(|&f| face_points(f, FACE_SAMPLES, &mut rng))
        .collect();
    let edge_samples = edges()
        .iter()
        .map(|&e| edge_points(e, EDGE_SAMPLES, &mut rng))
        .collect();

    Ok(SamplePool {
        interior,
        image_dims,
        image_grid,
        face_samples,
        edge_samples,
        seed,
    })
}

impl SamplePool {
    pub fn stream_len(&self, which: Stream) -> usize {
        match which {
            Stream::Interior => self.interior.len(),
            Stream::Image => self.image_grid.len(),
        }
    }

    pub fn points(&self, which: Stream) -> &[Point] {
        match which {
            Stream::Interior => &self.interior,
            Stream::Image => &self.image_grid,
        }
    }

    /// SHA-256 over every stored coordinate, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |pts: &[Point]| {
            h.update((pts.len() as u64).to_le_bytes());
            for p in pts {
                for c in p {
                    h.update(c.to_le_bytes());
                }
            }
        };
        feed(&self.interior);
        feed(&self.image_grid);
        for f in &self.face_samples {
            feed(f);
        }
        for e in &self.edge_samples {
            feed(e);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Uniform subsample without replacement of pool indices, a deterministic
/// function of `(seed, epoch, step, stream)`.
pub fn draw_batch(
    pool: &SamplePool,
    which: Stream,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    step: usize,
) -> Result<Vec<usize>> {
    let n = pool.stream_len(which);
    if batch_size > n {
        return Err(Error::config(format!(
            "batch of {batch_size} exceeds {which:?} pool of {n}"
        )));
    }
    let tag = match which {
        Stream::Interior => 11,
        Stream::Image => 12,
    };
    let mut rng = derived_rng(seed, &[tag, epoch as u64, step as u64]);
    Ok(index::sample(&mut rng, n, batch_size).into_vec())
}

/// Arithmetic mean in index order; on the unit cube this is the quadrature
/// estimate of the integral.
pub fn mc_estimate(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("Monte Carlo estimate of an empty sample"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_shapes() {
        let pool = build_pool(500, Some([2, 2, 2]), 3).unwrap();
        assert_eq!(pool.interior.len(), 500);
        assert!(pool.interior.iter().flatten().all(|&c| c > 0.0 && c < 1.0));
        assert_eq!(pool.image_grid.len(), 8);
        for p in &pool.image_grid {
            assert!(p.iter().all(|&c| c == 0.25 || c == 0.75));
        }
        assert_eq!(pool.face_samples.len(), 6);
        assert!(pool.face_samples.iter().all(|f| f.len() == FACE_SAMPLES));
        assert_eq!(pool.edge_samples.len(), 12);
        assert!(pool.edge_samples.iter().all(|e| e.len() == EDGE_SAMPLES));
        for (f, pts) in faces().iter().zip(&pool.face_samples) {
            assert!(pts.iter().all(|p| p[f.axis] == f.level));
        }
        for (e, pts) in edges().iter().zip(&pool.edge_samples) {
            assert!(pts.iter().all(|p| e.fixed.iter().all(|&(a, l)| p[a] == l)));
        }
        assert!(matches!(build_pool(0, None, 0), Err(Error::Config(_))));
    }

    #[test]
    fn edges_are_distinct() {
        let e = edges();
        for i in 0..12 {
            for j in i + 1..12 {
                assert_ne!(e[i], e[j]);
            }
        }
    }

    #[test]
    fn pool_is_seeded() {
        let a = build_pool(100, None, 7).unwrap();
        assert_eq!(a, build_pool(100, None, 7).unwrap());
        assert_eq!(a.digest(), build_pool(100, None, 7).unwrap().digest());
        assert_ne!(a.digest(), build_pool(100, None, 8).unwrap().digest());
    }

    #[test]
    fn full_batch_is_permutation() {
        let pool = build_pool(64, None, 1).unwrap();
        let mut idx = draw_batch(&pool, Stream::Interior, 64, 1, 0, 0).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..64).collect::<Vec<_>>());
        assert!(draw_batch(&pool, Stream::Interior, 65, 1, 0, 0).is_err());
        assert!(draw_batch(&pool, Stream::Image, 1, 1, 0, 0).is_err());
    }

    #[test]
    fn batches_are_reproducible_and_vary_by_step() {
        let pool = build_pool(2000, None, 5).unwrap();
        let a = draw_batch(&pool, Stream::Interior, 500, 5, 3, 1).unwrap();
        assert_eq!(a, draw_batch(&pool, Stream::Interior, 500, 5, 3, 1).unwrap());
        let b = draw_batch(&pool, Stream::Interior, 500, 5, 3, 2).unwrap();
        assert_ne!(a, b);
        // Overlap of two independent 500-of-2000 draws is hypergeometric with
        // mean 125 and sd ≈ 8.4.
        let set: std::collections::HashSet<_> = a.iter().collect();
        let overlap = b.iter().filter(|i| set.contains(i)).count() as f64;
        assert!((overlap - 125.0).abs() < 6.0 * 8.4, "overlap {overlap}");
    }

    #[test]
    fn mean_estimates() {
        assert_eq!(mc_estimate(&[0.75; 8]).unwrap(), 0.75);
        assert_eq!(mc_estimate(&[0.0, 1.0]).unwrap(), 0.5);
        assert!(mc_estimate(&[]).is_err());

        let pool = build_pool(1_000_000, None, 42).unwrap();
        let xs: Vec<f64> = pool.interior.iter().map(|p| p[0]).collect();
        let est = mc_estimate(&xs).unwrap();
        let stderr = (1.0f64 / 12.0).sqrt() / 1000.0;
        assert!((est - 0.5).abs() <= 3.0 * stderr);
    }
}
