//! The neural map `f_θ : [0,1]³ → [0,1]³`.
//!
//! Layout: an affine lift `3 → width`, `blocks` residual blocks
//! `h ↦ h + σ(W₂ σ(W₁ h + b₁) + b₂)`, an affine output `width → 3`, and
//! (in hard-boundary mode) the Hadamard wrap `f̃ ⊙ x ⊙ (1 − x) + x`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcalc::{self, Activation, Architecture, Boundary, Jet3, Point, FULL, VALUE};
use crate::error::{Error, Result};

/// Trainable weights and biases, stored flat in a fixed order:
/// lift W (row-major width×3), lift b, then per block W₁, b₁, W₂, b₂, then
/// output W (3×width), output b.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    arch: Architecture,
    theta: Vec<f64>,
}

impl NetParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(NetParams {
            arch,
            theta: vec![0.0; arch.param_count()],
        })
    }

    pub fn from_flat(arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.param_count() {
            return Err(Error::Dimension(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                theta.len()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::contract("parameters must be finite"));
        }
        Ok(NetParams { arch, theta })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.theta.clone()
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.theta
    }

    /// Same weights, different boundary treatment.
    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.arch.boundary = boundary;
        self
    }

    pub fn lift(&self) -> (&[f64], &[f64]) {
        let a = &self.arch;
        (&self.theta[a.lift_w()..a.lift_b()], &self.theta[a.lift_b()..a.lift_b() + a.width])
    }

    /// `(W₁, b₁, W₂, b₂)` of block `b`.
    pub fn block(&self, b: usize) -> (&[f64], &[f64], &[f64], &[f64]) {
        let o = self.arch.block(b);
        let w = self.arch.width;
        (
            &self.theta[o.w1..o.b1],
            &self.theta[o.b1..o.w2],
            &self.theta[o.w2..o.b2],
            &self.theta[o.b2..o.b2 + w],
        )
    }

    pub fn output(&self) -> (&[f64], &[f64]) {
        let a = &self.arch;
        (&self.theta[a.out_w()..a.out_b()], &self.theta[a.out_b()..a.out_b() + 3])
    }
}

/// Uniform fan-in initialization, zero biases.
pub fn init_params(width: usize, blocks: usize, activation: Activation, seed: u64) -> Result<NetParams> {
    let arch = Architecture {
        width,
        blocks,
        activation,
        boundary: Boundary::Hard,
    };
    let mut params = NetParams::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |theta: &mut [f64], range: std::ops::Range<usize>, fan_in: usize| {
        let bound = (1.0 / fan_in as f64).sqrt();
        for t in &mut theta[range] {
            *t = rng.gen_range(-bound..=bound);
        }
    };
    let theta = params.as_mut_slice();
    fill(theta, arch.lift_w()..arch.lift_b(), 3);
    for b in 0..blocks {
        let o = arch.block(b);
        fill(theta, o.w1..o.b1, width);
        fill(theta, o.w2..o.b2, width);
    }
    fill(theta, arch.out_w()..arch.out_b(), width);
    Ok(params)
}

/// Jet of the raw network output `f̃_θ(x)` (no boundary wrap).
pub fn raw_forward(params: &NetParams, x: Point) -> Jet3 {
    let arch = Architecture {
        boundary: Boundary::Soft,
        ..params.arch
    };
    let mut cache = vec![0.0; arch.cache_len(FULL)];
    let mut out = vec![0.0; 3 * FULL];
    diffcalc::forward_point::<FULL>(&arch, &params.theta, x, &mut cache, &mut out);
    Jet3::from_packed(3, out)
}

/// Map value, Jacobian, Laplacian and Jacobian determinant at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapEval {
    pub f: Point,
    pub jac: [[f64; 3]; 3],
    pub lap: [f64; 3],
    pub det: f64,
}

impl MapEval {
    /// Unpacks a 3-wide full jet.
    pub fn from_packed(out: &[f64]) -> Self {
        let mut f = [0.0; 3];
        let mut jac = [[0.0; 3]; 3];
        let mut lap = [0.0; 3];
        for i in 0..3 {
            let o = &out[i * FULL..(i + 1) * FULL];
            f[i] = o[0];
            jac[i] = [o[1], o[2], o[3]];
            lap[i] = o[4];
        }
        MapEval {
            f,
            jac,
            lap,
            det: det3(&jac),
        }
    }

    pub fn identity(x: Point) -> Self {
        MapEval {
            f: x,
            jac: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            lap: [0.0; 3],
            det: 1.0,
        }
    }

    pub fn from_jacobian(f: Point, jac: [[f64; 3]; 3], lap: [f64; 3]) -> Self {
        MapEval {
            f,
            jac,
            lap,
            det: det3(&jac),
        }
    }
}

pub fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Cofactor matrix, i.e. ∂det/∂m.
pub fn cofactor3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
        ],
        [
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
        ],
        [
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ]
}

/// Full evaluation of the map at `x`, honoring the boundary mode of `params`.
pub fn forward(params: &NetParams, x: Point) -> MapEval {
    let mut cache = vec![0.0; params.arch.cache_len(FULL)];
    let mut out = [0.0; 3 * FULL];
    diffcalc::forward_point::<FULL>(&params.arch, &params.theta, x, &mut cache, &mut out);
    MapEval::from_packed(&out)
}

/// Reusable buffer for repeated value-only evaluations.
pub struct Evaluator<'a> {
    params: &'a NetParams,
    cache: Vec<f64>,
    cache_full: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(params: &'a NetParams) -> Self {
        Evaluator {
            params,
            cache: vec![0.0; params.arch.cache_len(VALUE)],
            cache_full: vec![0.0; params.arch.cache_len(FULL)],
        }
    }

    pub fn map(&mut self, x: Point) -> Point {
        let mut out = [0.0; 3];
        diffcalc::forward_point::<VALUE>(&self.params.arch, &self.params.theta, x, &mut self.cache, &mut out);
        out
    }

    pub fn eval(&mut self, x: Point) -> MapEval {
        let mut out = [0.0; 3 * FULL];
        diffcalc::forward_point::<FULL>(
            &self.params.arch,
            &self.params.theta,
            x,
            &mut self.cache_full,
            &mut out,
        );
        MapEval::from_packed(&out)
    }
}

/// Map value only.
pub fn map_point(params: &NetParams, x: Point) -> Point {
    Evaluator::new(params).map(x)
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line, then the parameters as little-endian f64.

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    width: usize,
    blocks: usize,
    activation: Activation,
    param_count: usize,
    #[serde(default)]
    boundary: Boundary,
}

pub fn write_checkpoint(params: &NetParams, path: impl AsRef<Path>) -> Result<()> {
    let a = params.arch;
    let header = CheckpointHeader {
        width: a.width,
        blocks: a.blocks,
        activation: a.activation,
        param_count: params.param_count(),
        boundary: a.boundary,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for t in &params.theta {
        w.write_all(&t.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<NetParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(Error::Checkpoint("missing header line".into()));
    }
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    let arch = Architecture {
        width: header.width,
        blocks: header.blocks,
        activation: header.activation,
        boundary: header.boundary,
    };
    arch.validate()?;
    if arch.param_count() != header.param_count {
        return Err(Error::Checkpoint(format!(
            "header declares {} parameters but architecture has {}",
            header.param_count,
            arch.param_count()
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * header.param_count {
        return Err(Error::Checkpoint(format!(
            "expected {} payload bytes, found {}",
            8 * header.param_count,
            bytes.len()
        )));
    }
    let theta = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    NetParams::from_flat(arch, theta).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_params(seed: u64, act: Activation) -> NetParams {
        init_params(20, 3, act, seed).unwrap()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(init_params(20, 3, Activation::Tanh, 0).unwrap().param_count(), 2663);
        // (3·3+3) + 2·(9+3) + (9+3)
        assert_eq!(init_params(3, 1, Activation::Tanh, 0).unwrap().param_count(), 48);
        assert!(matches!(init_params(2, 1, Activation::Tanh, 0), Err(Error::Config(_))));
        assert!(matches!(init_params(5, 0, Activation::Tanh, 0), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = random_params(0, Activation::Tanh);
        assert_eq!(a, random_params(0, Activation::Tanh));
        assert_ne!(a, random_params(1, Activation::Tanh));
        let (w, b) = a.lift();
        let bound = (1.0f64 / 3.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_weights_give_identity() {
        let p = NetParams::zeros(*random_params(0, Activation::Tanh).arch()).unwrap();
        let x = [0.3, 0.8, 0.1];
        let raw = raw_forward(&p, x);
        assert_eq!(raw.values(), vec![0.0; 3]);
        let m = forward(&p, x);
        assert_eq!(m, MapEval::identity(x));
    }

    #[test]
    fn faces_and_corners_are_pinned() {
        let p = random_params(9, Activation::Arctan);
        let m = forward(&p, [1.0, 1.0, 0.0]);
        assert_eq!(m.f, [1.0, 1.0, 0.0]);
        for a in [0.0, 1.0] {
            let m = forward(&p, [a, 0.37, 0.61]);
            assert_eq!(m.f[0].to_bits(), a.to_bits());
        }
    }

    #[test]
    fn face_tangency() {
        let p = random_params(4, Activation::Tanh);
        for (axis, level) in [(0, 0.0), (1, 1.0), (2, 0.0)] {
            let mut x = [0.3, 0.55, 0.72];
            x[axis] = level;
            let m = forward(&p, x);
            for j in 0..3 {
                if j != axis {
                    assert_eq!(m.jac[axis][j], 0.0);
                }
            }
        }
    }

    #[test]
    fn determinant_matches_cofactor_expansion() {
        let p = random_params(2, Activation::Tanh);
        let m = forward(&p, [0.2, 0.4, 0.6]);
        let cof = cofactor3(&m.jac);
        for i in 0..3 {
            let row: f64 = (0..3).map(|j| m.jac[i][j] * cof[i][j]).sum();
            assert!((row - m.det).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let p = random_params(1, Activation::Arctan).with_boundary(Boundary::Soft);
        write_checkpoint(&p, &path).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), p);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Checkpoint(_))));

        let bad = "{\"width\":20,\"blocks\":3,\"activation\":\"tanh\",\"param_count\":7}\n";
        std::fs::write(&path, bad).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn flatten_round_trip(seed in 0u64..1000, width in 3usize..8, blocks in 1usize..4) {
            let p = init_params(width, blocks, Activation::Tanh, seed).unwrap();
            let back = NetParams::from_flat(*p.arch(), p.to_flat()).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn jets_are_finite(seed in 0u64..200, x in prop::array::uniform3(0.0f64..=1.0)) {
            let p = random_params(seed, Activation::Tanh);
            let m = forward(&p, x);
            prop_assert!(m.f.iter().chain(m.lap.iter()).all(|v| v.is_finite()));
            prop_assert!(m.jac.iter().flatten().all(|v| v.is_finite()));
        }
    }
}
