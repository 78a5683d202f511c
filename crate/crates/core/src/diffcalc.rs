//! Spatial jets and the reverse pass over the jet-extended network.
//!
//! A full jet packs five slots per unit: the value, the three partials with
//! respect to the input point, and the Laplacian. A value-only pass uses one
//! slot per unit. Every layer kernel is generic over that stride so the same
//! code serves both the interior (jet) evaluations and the cheap value-only
//! evaluations used for landmarks, image samples and boundary samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Slots per unit for a full jet: value, d/dx, d/dy, d/dz, Laplacian.
pub const FULL: usize = 5;
/// Slots per unit when only values are propagated.
pub const VALUE: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Arctan,
}

impl Activation {
    /// σ(u) and its first three derivatives.
    #[inline(always)]
    pub fn eval(self, u: f64) -> [f64; 4] {
        match self {
            Activation::Tanh => {
                let t = u.tanh();
                let s = 1.0 - t * t;
                [t, s, -2.0 * t * s, s * (6.0 * t * t - 2.0)]
            }
            Activation::Arctan => {
                let q = 1.0 / (1.0 + u * u);
                [u.atan(), q, -2.0 * u * q * q, (6.0 * u * u - 2.0) * q * q * q]
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Arctan => "arctan",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "arctan" => Ok(Activation::Arctan),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Value, spatial Jacobian and Laplacian of a bundle of `width` scalar fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet3 {
    width: usize,
    data: Vec<f64>,
}

impl Jet3 {
    pub fn zeros(width: usize) -> Self {
        Jet3 {
            width,
            data: vec![0.0; width * FULL],
        }
    }

    pub fn from_parts(value: &[f64], jac: &[[f64; 3]], lap: &[f64]) -> Result<Self> {
        let width = value.len();
        if jac.len() != width || lap.len() != width {
            return Err(Error::Dimension(format!(
                "jet parts disagree: value {}, jac {}, lap {}",
                width,
                jac.len(),
                lap.len()
            )));
        }
        let mut data = Vec::with_capacity(width * FULL);
        for i in 0..width {
            data.extend_from_slice(&[value[i], jac[i][0], jac[i][1], jac[i][2], lap[i]]);
        }
        Ok(Jet3 { width, data })
    }

    pub(crate) fn from_packed(width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * FULL);
        Jet3 { width, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn value(&self, i: usize) -> f64 {
        self.data[i * FULL]
    }

    /// ∂value_i/∂x_j
    pub fn jac(&self, i: usize, j: usize) -> f64 {
        self.data[i * FULL + 1 + j]
    }

    pub fn lap(&self, i: usize) -> f64 {
        self.data[i * FULL + 4]
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.width).map(|i| self.value(i)).collect()
    }

    pub fn jac_rows(&self) -> Vec<[f64; 3]> {
        (0..self.width)
            .map(|i| [self.jac(i, 0), self.jac(i, 1), self.jac(i, 2)])
            .collect()
    }

    pub fn laps(&self) -> Vec<f64> {
        (0..self.width).map(|i| self.lap(i)).collect()
    }

    pub fn as_packed(&self) -> &[f64] {
        &self.data
    }
}

/// The identity jet at `x`.
pub fn seed_jet(x: Point) -> Jet3 {
    let mut data = vec![0.0; 3 * FULL];
    seed_into::<FULL>(x, &mut data);
    Jet3 { width: 3, data }
}

/// Applies `out = W·in + b` to a jet; `w` is row-major `rows × in.width()`.
pub fn affine_jet(w: &[f64], b: &[f64], rows: usize, input: &Jet3) -> Result<Jet3> {
    let cols = input.width;
    if w.len() != rows * cols || b.len() != rows {
        return Err(Error::Dimension(format!(
            "affine layer expects W {rows}x{cols} and b {rows}, got {} and {}",
            w.len(),
            b.len()
        )));
    }
    let mut out = vec![0.0; rows * FULL];
    affine_forward::<FULL>(w, b, rows, cols, &input.data, &mut out);
    Ok(Jet3::from_packed(rows, out))
}

pub fn activation_jet(act: Activation, input: &Jet3) -> Jet3 {
    let mut out = vec![0.0; input.data.len()];
    activation_forward::<FULL>(act, input.width, &input.data, &mut out);
    Jet3::from_packed(input.width, out)
}

/// Wraps a raw 3-wide jet `g` as `g ⊙ x ⊙ (1 − x) + x`.
pub fn hadamard_boundary_jet(g: &Jet3, x: Point) -> Result<Jet3> {
    if g.width != 3 {
        return Err(Error::Dimension(format!(
            "boundary wrap needs a 3-wide jet, got {}",
            g.width
        )));
    }
    let mut out = vec![0.0; 3 * FULL];
    boundary_forward::<FULL>(x, &g.data, &mut out);
    Ok(Jet3::from_packed(3, out))
}

// ---------------------------------------------------------------------------
// Layer kernels. `S` is the stride (FULL or VALUE).

#[inline]
pub(crate) fn seed_into<const S: usize>(x: Point, out: &mut [f64]) {
    for i in 0..3 {
        let o = &mut out[i * S..(i + 1) * S];
        o.fill(0.0);
        o[0] = x[i];
        if S == FULL {
            o[1 + i] = 1.0;
        }
    }
}

#[inline]
pub(crate) fn affine_forward<const S: usize>(
    w: &[f64],
    b: &[f64],
    rows: usize,
    cols: usize,
    input: &[f64],
    out: &mut [f64],
) {
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        let mut acc = [0.0; S];
        acc[0] = b[i];
        for (k, &wk) in row.iter().enumerate() {
            let src = &input[k * S..(k + 1) * S];
            for c in 0..S {
                acc[c] += wk * src[c];
            }
        }
        out[i * S..(i + 1) * S].copy_from_slice(&acc);
    }
}

/// Adjoint of [`affine_forward`]. Parameter adjoints are accumulated; the
/// input adjoint (when requested) is overwritten.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn affine_backward<const S: usize>(
    w: &[f64],
    rows: usize,
    cols: usize,
    input: &[f64],
    out_bar: &[f64],
    in_bar: Option<&mut [f64]>,
    w_bar: &mut [f64],
    b_bar: &mut [f64],
) {
    for i in 0..rows {
        let ob = &out_bar[i * S..(i + 1) * S];
        b_bar[i] += ob[0];
        let wb = &mut w_bar[i * cols..(i + 1) * cols];
        for k in 0..cols {
            let src = &input[k * S..(k + 1) * S];
            let mut dot = 0.0;
            for c in 0..S {
                dot += ob[c] * src[c];
            }
            wb[k] += dot;
        }
    }
    if let Some(in_bar) = in_bar {
        in_bar[..cols * S].fill(0.0);
        for i in 0..rows {
            let ob = &out_bar[i * S..(i + 1) * S];
            let row = &w[i * cols..(i + 1) * cols];
            for (k, &wk) in row.iter().enumerate() {
                let dst = &mut in_bar[k * S..(k + 1) * S];
                for c in 0..S {
                    dst[c] += wk * ob[c];
                }
            }
        }
    }
}

#[inline]
pub(crate) fn activation_forward<const S: usize>(
    act: Activation,
    width: usize,
    input: &[f64],
    out: &mut [f64],
) {
    for i in 0..width {
        let u = &input[i * S..(i + 1) * S];
        let [s0, s1, s2, _] = act.eval(u[0]);
        let o = &mut out[i * S..(i + 1) * S];
        o[0] = s0;
        if S == FULL {
            let n2 = u[1] * u[1] + u[2] * u[2] + u[3] * u[3];
            o[1] = s1 * u[1];
            o[2] = s1 * u[2];
            o[3] = s1 * u[3];
            o[4] = s2 * n2 + s1 * u[4];
        }
    }
}

/// Adjoint of [`activation_forward`]; overwrites `in_bar`.
#[inline]
pub(crate) fn activation_backward<const S: usize>(
    act: Activation,
    width: usize,
    input: &[f64],
    out_bar: &[f64],
    in_bar: &mut [f64],
) {
    for i in 0..width {
        let u = &input[i * S..(i + 1) * S];
        let yb = &out_bar[i * S..(i + 1) * S];
        let dst = &mut in_bar[i * S..(i + 1) * S];
        if S == FULL {
            let [_, s1, s2, s3] = act.eval(u[0]);
            let n2 = u[1] * u[1] + u[2] * u[2] + u[3] * u[3];
            let grad_dot = yb[1] * u[1] + yb[2] * u[2] + yb[3] * u[3];
            dst[0] = yb[0] * s1 + s2 * grad_dot + yb[4] * (s3 * n2 + s2 * u[4]);
            let two_s2_l = 2.0 * s2 * yb[4];
            dst[1] = yb[1] * s1 + two_s2_l * u[1];
            dst[2] = yb[2] * s1 + two_s2_l * u[2];
            dst[3] = yb[3] * s1 + two_s2_l * u[3];
            dst[4] = yb[4] * s1;
        } else {
            let s1 = act.eval(u[0])[1];
            dst[0] = yb[0] * s1;
        }
    }
}

/// `f = g ⊙ x ⊙ (1 − x) + x`. The product `x_i(1 − x_i)` is exactly zero
/// when `x_i` is 0 or 1, so pinned coordinates come out bit-exact.
#[inline]
pub(crate) fn boundary_forward<const S: usize>(x: Point, g: &[f64], out: &mut [f64]) {
    for i in 0..3 {
        let w = x[i] * (1.0 - x[i]);
        let slope = 1.0 - 2.0 * x[i];
        let gi = &g[i * S..(i + 1) * S];
        let o = &mut out[i * S..(i + 1) * S];
        o[0] = gi[0] * w + x[i];
        if S == FULL {
            for j in 0..3 {
                o[1 + j] = w * gi[1 + j];
            }
            o[1 + i] += gi[0] * slope + 1.0;
            o[4] = w * gi[4] + 2.0 * slope * gi[1 + i] - 2.0 * gi[0];
        }
    }
}

/// Adjoint of [`boundary_forward`]; overwrites `g_bar`.
#[inline]
pub(crate) fn boundary_backward<const S: usize>(x: Point, out_bar: &[f64], g_bar: &mut [f64]) {
    for i in 0..3 {
        let w = x[i] * (1.0 - x[i]);
        let slope = 1.0 - 2.0 * x[i];
        let ob = &out_bar[i * S..(i + 1) * S];
        let gb = &mut g_bar[i * S..(i + 1) * S];
        gb[0] = ob[0] * w;
        if S == FULL {
            gb[0] += ob[1 + i] * slope - 2.0 * ob[4];
            for j in 0..3 {
                gb[1 + j] = w * ob[1 + j];
            }
            gb[1 + i] += 2.0 * slope * ob[4];
            gb[4] = w * ob[4];
        }
    }
}

// ---------------------------------------------------------------------------
// Whole-network evaluation.

/// How the raw network output is turned into the map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Hadamard wrap that pins every face of the unit cube.
    #[default]
    Hard,
    /// The raw network is the map; faces are only penalized by the loss.
    Soft,
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Boundary::Hard),
            "soft" => Ok(Boundary::Soft),
            other => Err(Error::config(format!("unknown boundary mode `{other}`"))),
        }
    }
}

/// Lifting layer, residual blocks, output layer, and the boundary treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub width: usize,
    pub blocks: usize,
    pub activation: Activation,
    #[serde(default)]
    pub boundary: Boundary,
}

/// Offsets of one residual block inside the flat parameter vector.
#[derive(Clone, Copy, Debug)]
pub struct BlockOffsets {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.width < 3 {
            return Err(Error::config(format!("width must be >= 3, got {}", self.width)));
        }
        if self.blocks < 1 {
            return Err(Error::config("at least one residual block is required"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let w = self.width;
        (3 * w + w) + self.blocks * 2 * (w * w + w) + (3 * w + 3)
    }

    pub fn lift_w(&self) -> usize {
        0
    }

    pub fn lift_b(&self) -> usize {
        3 * self.width
    }

    pub fn block(&self, b: usize) -> BlockOffsets {
        let w = self.width;
        let base = 4 * w + b * 2 * (w * w + w);
        BlockOffsets {
            w1: base,
            b1: base + w * w,
            w2: base + w * w + w,
            b2: base + 2 * w * w + w,
        }
    }

    pub fn out_w(&self) -> usize {
        let w = self.width;
        4 * w + self.blocks * 2 * (w * w + w)
    }

    pub fn out_b(&self) -> usize {
        self.out_w() + 3 * self.width
    }

    // Cache layout per point: h_0..h_B, then (u1, a1, u2) per block, then the
    // raw output g.
    fn h_off(&self, b: usize, s: usize) -> usize {
        b * self.width * s
    }

    fn block_off(&self, b: usize, s: usize) -> usize {
        (self.blocks + 1 + 3 * b) * self.width * s
    }

    fn g_off(&self, s: usize) -> usize {
        (4 * self.blocks + 1) * self.width * s
    }

    pub(crate) fn cache_len(&self, s: usize) -> usize {
        self.g_off(s) + 3 * s
    }
}

/// Runs the network at `x`, filling `cache` and writing the map output
/// (3 units of stride `S`) into `out`.
pub(crate) fn forward_point<const S: usize>(
    arch: &Architecture,
    theta: &[f64],
    x: Point,
    cache: &mut [f64],
    out: &mut [f64],
) {
    let w = arch.width;
    let ws = w * S;
    let mut seed = [0.0; 15];
    seed_into::<S>(x, &mut seed);

    {
        let h0 = &mut cache[0..ws];
        affine_forward::<S>(
            &theta[arch.lift_w()..arch.lift_b()],
            &theta[arch.lift_b()..arch.lift_b() + w],
            w,
            3,
            &seed,
            h0,
        );
    }
    for b in 0..arch.blocks {
        let off = arch.block(b);
        let (hs, rest) = cache.split_at_mut(arch.block_off(0, S));
        let h_in = &hs[arch.h_off(b, S)..arch.h_off(b, S) + ws];
        let blk = &mut rest[3 * b * ws..3 * (b + 1) * ws];
        let (u1, blk) = blk.split_at_mut(ws);
        let (a1, u2) = blk.split_at_mut(ws);
        affine_forward::<S>(&theta[off.w1..off.b1], &theta[off.b1..off.w2], w, w, h_in, u1);
        activation_forward::<S>(arch.activation, w, u1, a1);
        affine_forward::<S>(&theta[off.w2..off.b2], &theta[off.b2..off.b2 + w], w, w, a1, u2);
        // h_{b+1} = h_b + σ(u2)
        let (lo, hi) = hs.split_at_mut(arch.h_off(b + 1, S));
        let h_prev = &lo[arch.h_off(b, S)..];
        let h_next = &mut hi[..ws];
        activation_forward::<S>(arch.activation, w, u2, h_next);
        for (n, p) in h_next.iter_mut().zip(h_prev) {
            *n += *p;
        }
    }
    let g_off = arch.g_off(S);
    let (front, g) = cache.split_at_mut(g_off);
    let h_last = &front[arch.h_off(arch.blocks, S)..arch.h_off(arch.blocks, S) + ws];
    affine_forward::<S>(
        &theta[arch.out_w()..arch.out_b()],
        &theta[arch.out_b()..arch.out_b() + 3],
        3,
        w,
        h_last,
        &mut g[..3 * S],
    );
    match arch.boundary {
        Boundary::Hard => boundary_forward::<S>(x, &g[..3 * S], out),
        Boundary::Soft => out[..3 * S].copy_from_slice(&g[..3 * S]),
    }
}

/// Scratch buffers for [`backward_point`].
pub(crate) struct Scratch {
    h_bar: Vec<f64>,
    t1: Vec<f64>,
    t2: Vec<f64>,
    g_bar: [f64; 15],
}

impl Scratch {
    pub(crate) fn new(arch: &Architecture) -> Self {
        let n = arch.width * FULL;
        Scratch {
            h_bar: vec![0.0; n],
            t1: vec![0.0; n],
            t2: vec![0.0; n],
            g_bar: [0.0; 15],
        }
    }
}

/// Accumulates ∂/∂θ of `⟨out_bar, output⟩` into `grad`, given the cache from
/// [`forward_point`].
pub(crate) fn backward_point<const S: usize>(
    arch: &Architecture,
    theta: &[f64],
    x: Point,
    cache: &[f64],
    out_bar: &[f64],
    grad: &mut [f64],
    scratch: &mut Scratch,
) {
    let w = arch.width;
    let ws = w * S;
    let g_bar = &mut scratch.g_bar[..3 * S];
    match arch.boundary {
        Boundary::Hard => boundary_backward::<S>(x, out_bar, g_bar),
        Boundary::Soft => g_bar.copy_from_slice(&out_bar[..3 * S]),
    }

    let h_bar = &mut scratch.h_bar[..ws];
    {
        let h_last = &cache[arch.h_off(arch.blocks, S)..arch.h_off(arch.blocks, S) + ws];
        let (head, tail) = grad.split_at_mut(arch.out_b());
        affine_backward::<S>(
            &theta[arch.out_w()..arch.out_b()],
            3,
            w,
            h_last,
            g_bar,
            Some(h_bar),
            &mut head[arch.out_w()..],
            &mut tail[..3],
        );
    }

    let t1 = &mut scratch.t1[..ws];
    let t2 = &mut scratch.t2[..ws];
    for b in (0..arch.blocks).rev() {
        let off = arch.block(b);
        let base = arch.block_off(b, S);
        let u1 = &cache[base..base + ws];
        let a1 = &cache[base + ws..base + 2 * ws];
        let u2 = &cache[base + 2 * ws..base + 3 * ws];
        let h_in = &cache[arch.h_off(b, S)..arch.h_off(b, S) + ws];

        // residual: h_{b+1} = h_b + σ(u2); h_bar carries through unchanged.
        activation_backward::<S>(arch.activation, w, u2, h_bar, t1);
        {
            let (head, tail) = grad.split_at_mut(off.b2);
            affine_backward::<S>(
                &theta[off.w2..off.b2],
                w,
                w,
                a1,
                t1,
                Some(t2),
                &mut head[off.w2..],
                &mut tail[..w],
            );
        }
        activation_backward::<S>(arch.activation, w, u1, t2, t1);
        {
            let (head, tail) = grad.split_at_mut(off.b1);
            affine_backward::<S>(
                &theta[off.w1..off.b1],
                w,
                w,
                h_in,
                t1,
                Some(t2),
                &mut head[off.w1..],
                &mut tail[..w],
            );
        }
        for (hb, add) in h_bar.iter_mut().zip(t2.iter()) {
            *hb += *add;
        }
    }

    let (head, tail) = grad.split_at_mut(arch.lift_b());
    let mut seed = [0.0; 15];
    seed_into::<S>(x, &mut seed);
    affine_backward::<S>(
        &theta[arch.lift_w()..arch.lift_b()],
        w,
        3,
        &seed,
        h_bar,
        None,
        &mut head[arch.lift_w()..],
        &mut tail[..w],
    );
}

// ---------------------------------------------------------------------------
// Tape.

/// A recorded scalar or field produced from the network outputs.
#[derive(Clone, Debug)]
enum TapeOutput {
    Scalar { name: String, value: f64 },
    /// Weighted sum of earlier scalar outputs.
    Combination {
        name: String,
        value: f64,
        parts: Vec<(usize, f64)>,
    },
    /// `Σ θ²` over the recorded parameters.
    ParamNormSq { value: f64 },
    /// Non-scalar diagnostic (one value per sample); not differentiable here.
    Field { name: String, values: Vec<f64> },
}

#[derive(Clone, Debug)]
struct TapeGroup {
    stride: usize,
    points: Vec<Point>,
    caches: Vec<f64>,
    outputs: Vec<f64>,
    /// (output index, ∂output/∂(network output) per point, flattened).
    seeds: Vec<(usize, Vec<f64>)>,
}

/// Record of one evaluation of the jet-extended network on sets of points,
/// plus the scalar outputs computed from it. Sufficient to produce ∂L/∂θ for
/// any recorded scalar without re-running the forward pass.
#[derive(Clone, Debug)]
pub struct GradTape {
    arch: Architecture,
    theta: Vec<f64>,
    groups: Vec<TapeGroup>,
    outputs: Vec<TapeOutput>,
}

impl GradTape {
    pub fn new(arch: Architecture, theta: &[f64]) -> Self {
        GradTape {
            arch,
            theta: theta.to_vec(),
            groups: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    /// Evaluates the network on `points` with the given stride and keeps the
    /// caches. Returns the group id.
    pub fn record_group(&mut self, points: &[Point], stride: usize) -> usize {
        assert!(stride == FULL || stride == VALUE, "unsupported stride {stride}");
        let clen = self.arch.cache_len(stride);
        let n = points.len();
        let mut caches = vec![0.0; n * clen];
        let mut outputs = vec![0.0; n * 3 * stride];
        for (k, &x) in points.iter().enumerate() {
            let cache = &mut caches[k * clen..(k + 1) * clen];
            let out = &mut outputs[k * 3 * stride..(k + 1) * 3 * stride];
            if stride == FULL {
                forward_point::<FULL>(&self.arch, &self.theta, x, cache, out);
            } else {
                forward_point::<VALUE>(&self.arch, &self.theta, x, cache, out);
            }
        }
        self.groups.push(TapeGroup {
            stride,
            points: points.to_vec(),
            caches,
            outputs,
            seeds: Vec::new(),
        });
        self.groups.len() - 1
    }

    /// Network outputs of a group, `3 * stride` slots per point.
    pub fn group_outputs(&self, group: usize) -> &[f64] {
        &self.groups[group].outputs
    }

    pub fn group_stride(&self, group: usize) -> usize {
        self.groups[group].stride
    }

    pub fn group_points(&self, group: usize) -> &[Point] {
        &self.groups[group].points
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, value: f64) -> usize {
        self.outputs.push(TapeOutput::Scalar {
            name: name.into(),
            value,
        });
        self.outputs.len() - 1
    }

    pub fn push_combination(&mut self, name: impl Into<String>, parts: Vec<(usize, f64)>) -> usize {
        let value = parts.iter().map(|&(i, c)| c * self.value(i).unwrap_or(0.0)).sum();
        self.outputs.push(TapeOutput::Combination {
            name: name.into(),
            value,
            parts,
        });
        self.outputs.len() - 1
    }

    pub fn push_param_norm_sq(&mut self) -> usize {
        let value = self.theta.iter().map(|t| t * t).sum();
        self.outputs.push(TapeOutput::ParamNormSq { value });
        self.outputs.len() - 1
    }

    pub fn push_field(&mut self, name: impl Into<String>, values: Vec<f64>) -> usize {
        self.outputs.push(TapeOutput::Field {
            name: name.into(),
            values,
        });
        self.outputs.len() - 1
    }

    /// Attaches the adjoint of scalar `output` with respect to the network
    /// outputs of `group`.
    pub fn add_seed(&mut self, group: usize, output: usize, seed: Vec<f64>) {
        let g = &mut self.groups[group];
        assert_eq!(seed.len(), g.outputs.len(), "seed length must match group outputs");
        g.seeds.push((output, seed));
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.outputs.iter().position(|o| match o {
            TapeOutput::Scalar { name: n, .. }
            | TapeOutput::Combination { name: n, .. }
            | TapeOutput::Field { name: n, .. } => n == name,
            TapeOutput::ParamNormSq { .. } => name == "param_norm_sq",
        })
    }

    /// Value of a scalar output.
    pub fn value(&self, index: usize) -> Result<f64> {
        match self.outputs.get(index) {
            Some(TapeOutput::Scalar { value, .. })
            | Some(TapeOutput::Combination { value, .. })
            | Some(TapeOutput::ParamNormSq { value }) => Ok(*value),
            Some(TapeOutput::Field { name, .. }) => {
                Err(Error::contract(format!("output `{name}` is not a scalar")))
            }
            None => Err(Error::contract(format!("no tape output with index {index}"))),
        }
    }

    pub fn field(&self, index: usize) -> Option<&[f64]> {
        match self.outputs.get(index) {
            Some(TapeOutput::Field { values, .. }) => Some(values),
            _ => None,
        }
    }

    /// Re-runs every recorded forward pass and reports whether all caches and
    /// outputs come out bit-identical.
    pub fn replay_matches(&self) -> bool {
        let mut probe = GradTape::new(self.arch, &self.theta);
        self.groups.iter().all(|g| {
            let id = probe.record_group(&g.points, g.stride);
            let p = &probe.groups[id];
            bits_equal(&p.caches, &g.caches) && bits_equal(&p.outputs, &g.outputs)
        })
    }

    fn expand(&self, index: usize, coef: f64, acc: &mut Vec<(usize, f64)>, direct: &mut f64) -> Result<()> {
        match self.outputs.get(index) {
            Some(TapeOutput::Scalar { .. }) => {
                acc.push((index, coef));
                Ok(())
            }
            Some(TapeOutput::Combination { parts, .. }) => {
                for &(i, c) in parts {
                    self.expand(i, coef * c, acc, direct)?;
                }
                Ok(())
            }
            Some(TapeOutput::ParamNormSq { .. }) => {
                *direct += coef;
                Ok(())
            }
            Some(TapeOutput::Field { name, .. }) => Err(Error::contract(format!(
                "cannot differentiate non-scalar output `{name}`"
            ))),
            None => Err(Error::contract(format!("no tape output with index {index}"))),
        }
    }
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// ∂L/∂θ for the scalar output `loss_index`, in flat parameter order.
pub fn backward(tape: &GradTape, loss_index: usize) -> Result<Vec<f64>> {
    backward_combination(tape, &[(loss_index, 1.0)])
}

/// ∂(Σ c_k L_k)/∂θ for recorded scalar outputs `L_k`.
pub fn backward_combination(tape: &GradTape, terms: &[(usize, f64)]) -> Result<Vec<f64>> {
    let mut parts = Vec::new();
    let mut norm_coef = 0.0;
    for &(i, c) in terms {
        tape.expand(i, c, &mut parts, &mut norm_coef)?;
    }
    let arch = &tape.arch;
    let mut grad = vec![0.0; arch.param_count()];
    let mut scratch = Scratch::new(arch);

    for g in &tape.groups {
        let active: Vec<(&[f64], f64)> = g
            .seeds
            .iter()
            .filter_map(|(out, seed)| {
                let c: f64 = parts.iter().filter(|(i, _)| i == out).map(|(_, c)| c).sum();
                (c != 0.0).then_some((seed.as_slice(), c))
            })
            .collect();
        if active.is_empty() {
            continue;
        }
        let s = g.stride;
        let clen = arch.cache_len(s);
        let mut out_bar = [0.0; 15];
        for (k, &x) in g.points.iter().enumerate() {
            let ob = &mut out_bar[..3 * s];
            ob.fill(0.0);
            let mut any = false;
            for &(seed, c) in &active {
                let src = &seed[k * 3 * s..(k + 1) * 3 * s];
                for (o, v) in ob.iter_mut().zip(src) {
                    if *v != 0.0 {
                        any = true;
                    }
                    *o += c * v;
                }
            }
            if !any {
                continue;
            }
            let cache = &g.caches[k * clen..(k + 1) * clen];
            if s == FULL {
                backward_point::<FULL>(arch, &tape.theta, x, cache, ob, &mut grad, &mut scratch);
            } else {
                backward_point::<VALUE>(arch, &tape.theta, x, cache, ob, &mut grad, &mut scratch);
            }
        }
    }
    if norm_coef != 0.0 {
        for (g, t) in grad.iter_mut().zip(&tape.theta) {
            *g += 2.0 * norm_coef * t;
        }
    }
    Ok(grad)
}
