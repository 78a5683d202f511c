//! Synthetic registration problems: landmark generators, the analytic
//! large-distortion map and its image pair, and the landmark text format.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::diffcalc::Point;
use crate::error::{Error, Result};
use crate::sampling::derived_rng;
use crate::volume::Volume3;

/// Pairs `(q, p)`: `q` in the target domain, `p` its expected image `f(q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pairs: Vec<(Point, Point)>,
}

impl LandmarkSet {
    pub fn new(pairs: Vec<(Point, Point)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::contract("landmark set must not be empty"));
        }
        for (k, (q, p)) in pairs.iter().enumerate() {
            if q.iter().chain(p).any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::config(format!("landmark pair {k} leaves the unit cube")));
            }
        }
        Ok(LandmarkSet { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(Point, Point)] {
        &self.pairs
    }

    pub fn sources(&self) -> Vec<Point> {
        self.pairs.iter().map(|(q, _)| *q).collect()
    }

    pub fn targets(&self) -> Vec<Point> {
        self.pairs.iter().map(|(_, p)| *p).collect()
    }
}

/// One line per pair: `qx,qy,qz,px,py,pz`, 17 significant digits.
pub fn format_landmarks(set: &LandmarkSet) -> String {
    let mut s = String::new();
    for (q, p) in &set.pairs {
        let cols: Vec<String> = q.iter().chain(p).map(|c| format!("{c:.16e}")).collect();
        writeln!(s, "{}", cols.join(",")).unwrap();
    }
    s
}

pub fn parse_landmarks(text: &str) -> Result<LandmarkSet> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config(format!("landmark line {}: {e}", lineno + 1)))?;
        if vals.len() != 6 {
            return Err(Error::config(format!(
                "landmark line {}: expected 6 values, found {}",
                lineno + 1,
                vals.len()
            )));
        }
        pairs.push(([vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]]));
    }
    LandmarkSet::new(pairs)
}

pub fn write_landmarks(set: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_landmarks(set))?;
    Ok(())
}

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    parse_landmarks(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Analytic map g(x) = x + D(x) ⊙ g̃(x) / 2 with D_i = x_i(1 − x_i) and
// g̃_i = cos(k_i · x).

/// Closed-form map of the unit cube with its Jacobian.
#[derive(Clone, Copy, Debug)]
pub struct AnalyticMap {
    freqs: [[f64; 3]; 3],
}

pub fn appendix_map() -> AnalyticMap {
    AnalyticMap {
        freqs: [[5.0, 6.0, -4.0], [-5.0, 4.0, 5.0], [3.0, 5.0, -6.0]],
    }
}

impl AnalyticMap {
    pub fn eval(&self, x: Point) -> Point {
        let mut out = [0.0; 3];
        for i in 0..3 {
            let arg = dot(self.freqs[i], x);
            out[i] = x[i] + x[i] * (1.0 - x[i]) * arg.cos() / 2.0;
        }
        out
    }

    pub fn jacobian(&self, x: Point) -> [[f64; 3]; 3] {
        let mut jac = [[0.0; 3]; 3];
        for i in 0..3 {
            let arg = dot(self.freqs[i], x);
            let d = x[i] * (1.0 - x[i]);
            let (s, c) = arg.sin_cos();
            for j in 0..3 {
                jac[i][j] = -d * self.freqs[i][j] * s / 2.0;
            }
            jac[i][i] += 1.0 + (1.0 - 2.0 * x[i]) * c / 2.0;
        }
        jac
    }

    pub fn det(&self, x: Point) -> f64 {
        crate::ansatz::det3(&self.jacobian(x))
    }
}

fn dot(a: [f64; 3], b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Source image `½ cos(4π |x|²) + ½`.
pub fn appendix_source(x: Point) -> f64 {
    0.5 * (4.0 * PI * dot(x, x)).cos() + 0.5
}

fn clamp_unit(p: Point) -> Point {
    p.map(|c| c.clamp(0.0, 1.0))
}

/// Source `S`, target `T = S ∘ g` (both sampled analytically at voxel
/// centers) and `grid_n³` landmark pairs `(q, g(q))` on an interior lattice.
pub fn appendix_dataset(image_dims: [usize; 3], grid_n: usize) -> Result<(Volume3, Volume3, LandmarkSet)> {
    if grid_n == 0 {
        return Err(Error::config("grid_n must be at least 1"));
    }
    let g = appendix_map();
    let source = Volume3::from_fn(image_dims, appendix_source)?;
    let target = Volume3::from_fn(image_dims, |q| appendix_source(g.eval(q)))?;
    let mut pairs = Vec::with_capacity(grid_n.pow(3));
    for k in 0..grid_n {
        for j in 0..grid_n {
            for i in 0..grid_n {
                let q = [i, j, k].map(|c| (c as f64 + 0.5) / grid_n as f64);
                pairs.push((q, clamp_unit(g.eval(q))));
            }
        }
    }
    Ok((source, target, LandmarkSet::new(pairs)?))
}

/// Eight landmarks in two horizontal quartets at z = 0.3 and z = 0.7. Each
/// corner moves to its anticlockwise neighbour.
pub fn twisted_pairs() -> LandmarkSet {
    // Corners of the square (0.5 ± 0.25, 0.5 ± 0.25) in anticlockwise order.
    let ring = [[0.25, 0.25], [0.75, 0.25], [0.75, 0.75], [0.25, 0.75]];
    let mut pairs = Vec::with_capacity(8);
    for z in [0.3, 0.7] {
        for k in 0..4 {
            let a = ring[k];
            let b = ring[(k + 1) % 4];
            pairs.push(([a[0], a[1], z], [b[0], b[1], z]));
        }
    }
    LandmarkSet::new(pairs).expect("fixed landmarks are valid")
}

const CENTER: Point = [0.5, 0.5, 0.5];

/// 90° anticlockwise rotation about the vertical line through the center.
pub fn rotate_quarter(q: Point) -> Point {
    [0.5 - (q[1] - 0.5), 0.5 + (q[0] - 0.5), q[2]]
}

/// `n_points` uniform points on the sphere of radius 0.25 around the center,
/// paired with their rotated positions.
pub fn rotated_sphere(n_points: usize, seed: u64) -> Result<LandmarkSet> {
    if n_points == 0 {
        return Err(Error::config("rotated sphere needs at least one point"));
    }
    let mut rng = derived_rng(seed, &[0x5fe4e]);
    let pairs = (0..n_points)
        .map(|_| {
            // Archimedes: uniform height and azimuth give a uniform sphere.
            let z: f64 = rng.gen_range(-1.0..=1.0);
            let phi: f64 = rng.gen_range(0.0..2.0 * PI);
            let r = (1.0 - z * z).max(0.0).sqrt();
            let dir = [r * phi.cos(), r * phi.sin(), z];
            let q = [0, 1, 2].map(|a| CENTER[a] + 0.25 * dir[a]);
            (q, rotate_quarter(q))
        })
        .collect();
    LandmarkSet::new(pairs)
}

pub const DISK_CENTER: Point = [0.5, 0.7, 0.5];
pub const DISK_SHIFT: Point = [0.0, -0.4, 0.0];

/// `n_points` uniform points on a flat disk of radius 0.25 in the plane
/// y = 0.7, each translated by (0, −0.4, 0).
pub fn translating_disk(n_points: usize, seed: u64) -> Result<LandmarkSet> {
    if n_points == 0 {
        return Err(Error::config("translating disk needs at least one point"));
    }
    let mut rng = derived_rng(seed, &[0xd15c]);
    let pairs = (0..n_points)
        .map(|_| {
            let r = 0.25 * rng.gen::<f64>().sqrt();
            let phi: f64 = rng.gen_range(0.0..2.0 * PI);
            let q = [
                DISK_CENTER[0] + r * phi.cos(),
                DISK_CENTER[1],
                DISK_CENTER[2] + r * phi.sin(),
            ];
            (q, [q[0] + DISK_SHIFT[0], q[1] + DISK_SHIFT[1], q[2] + DISK_SHIFT[2]])
        })
        .collect();
    LandmarkSet::new(pairs)
}
