//! Loss terms and the weighted objective.
//!
//! Every interior term is a Monte Carlo mean over the batch. The objective is
//!
//! ```text
//! α₃·conf + α₂/2·bij + α₁/2·smooth + α₄/2·vol + α₅/2·lm + α₆/2·int [+ α₇/2·soft]
//! ```
//!
//! where `lm` is the mean squared landmark mismatch. Conformality is only
//! integrated where `det ∇f > 0`; the remaining points feed the bijectivity
//! penalty instead.

use serde::{Deserialize, Serialize};

use crate::ansatz::{cofactor3, Evaluator, MapEval, NetParams};
use crate::diffcalc::{Boundary, GradTape, Point, FULL, VALUE};
use crate::error::{Error, Result};
use crate::sampling::{edges, faces};
use crate::synth::LandmarkSet;
use crate::volume::Volume3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// α₁
    #[serde(alias = "alpha1")]
    pub smoothness: f64,
    /// α₂
    #[serde(alias = "alpha2")]
    pub bijectivity: f64,
    /// α₃
    #[serde(alias = "alpha3")]
    pub conformality: f64,
    /// α₄
    #[serde(alias = "alpha4")]
    pub volumetric: f64,
    /// α₅
    #[serde(alias = "alpha5")]
    pub landmark: f64,
    /// α₆
    #[serde(alias = "alpha6")]
    pub intensity: f64,
    /// α₇, only used with the soft boundary.
    #[serde(alias = "alpha7")]
    pub soft_boundary: f64,
    /// Target volume ratio of the volumetric prior.
    pub v_bar: f64,
    /// Exponent of `|det ∇f|` in the bijectivity penalty.
    pub bijectivity_power: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            smoothness: 0.01,
            bijectivity: 50.0,
            conformality: 1.0,
            volumetric: 0.0,
            landmark: 500.0,
            intensity: 500.0,
            soft_boundary: 0.0,
            v_bar: 1.0,
            bijectivity_power: 2.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            smoothness: 0.0,
            bijectivity: 0.0,
            conformality: 0.0,
            volumetric: 0.0,
            landmark: 0.0,
            intensity: 0.0,
            soft_boundary: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("smoothness", self.smoothness),
            ("bijectivity", self.bijectivity),
            ("conformality", self.conformality),
            ("volumetric", self.volumetric),
            ("landmark", self.landmark),
            ("intensity", self.intensity),
            ("soft_boundary", self.soft_boundary),
        ];
        for (name, w) in named {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("weights.{name} must be a finite value >= 0, got {w}")));
            }
        }
        if !(self.v_bar > 0.0 && self.v_bar.is_finite()) {
            return Err(Error::config(format!("weights.v_bar must be > 0, got {}", self.v_bar)));
        }
        if !(self.bijectivity_power >= 1.0) {
            return Err(Error::config("weights.bijectivity_power must be >= 1"));
        }
        Ok(())
    }

    /// Coefficient of each term in the objective, indexed like [`LossTerm`].
    pub fn coefficients(&self, formulation: Formulation, boundary: Boundary) -> [f64; 7] {
        let lm = if formulation.uses_landmarks() { self.landmark } else { 0.0 };
        let int = if formulation.uses_images() { self.intensity / 2.0 } else { 0.0 };
        let soft = if boundary == Boundary::Soft { self.soft_boundary / 2.0 } else { 0.0 };
        [
            self.conformality,
            self.bijectivity / 2.0,
            self.smoothness / 2.0,
            self.volumetric / 2.0,
            lm,
            int,
            soft,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    Landmark,
    Intensity,
    Hybrid,
}

impl Formulation {
    pub fn uses_landmarks(self) -> bool {
        matches!(self, Formulation::Landmark | Formulation::Hybrid)
    }

    pub fn uses_images(self) -> bool {
        matches!(self, Formulation::Intensity | Formulation::Hybrid)
    }
}

impl std::str::FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "landmark" => Ok(Formulation::Landmark),
            "intensity" => Ok(Formulation::Intensity),
            "hybrid" => Ok(Formulation::Hybrid),
            other => Err(Error::config(format!("unknown formulation `{other}`"))),
        }
    }
}

/// Scalar outputs recorded on the tape by [`total_loss`], in tape order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossTerm {
    Conformality,
    Bijectivity,
    Smoothness,
    Volumetric,
    Landmark,
    Intensity,
    SoftBoundary,
    Total,
}

impl LossTerm {
    pub const COMPONENTS: [LossTerm; 7] = [
        LossTerm::Conformality,
        LossTerm::Bijectivity,
        LossTerm::Smoothness,
        LossTerm::Volumetric,
        LossTerm::Landmark,
        LossTerm::Intensity,
        LossTerm::SoftBoundary,
    ];

    /// Tape index of this output.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Conformality => "conformality",
            LossTerm::Bijectivity => "bijectivity",
            LossTerm::Smoothness => "smoothness",
            LossTerm::Volumetric => "volumetric",
            LossTerm::Landmark => "landmark",
            LossTerm::Intensity => "intensity",
            LossTerm::SoftBoundary => "soft_boundary",
            LossTerm::Total => "total",
        }
    }
}

/// Tape index of the per-sample determinant field.
pub const DET_FIELD: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub conformality: f64,
    pub bijectivity: f64,
    pub smoothness: f64,
    pub volumetric: f64,
    pub landmark: f64,
    pub intensity: f64,
    pub soft_boundary: f64,
    pub total: f64,
    pub omega_plus_fraction: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 7] {
        [
            self.conformality,
            self.bijectivity,
            self.smoothness,
            self.volumetric,
            self.landmark,
            self.intensity,
            self.soft_boundary,
        ]
    }

    fn set(&mut self, term: LossTerm, v: f64) {
        match term {
            LossTerm::Conformality => self.conformality = v,
            LossTerm::Bijectivity => self.bijectivity = v,
            LossTerm::Smoothness => self.smoothness = v,
            LossTerm::Volumetric => self.volumetric = v,
            LossTerm::Landmark => self.landmark = v,
            LossTerm::Intensity => self.intensity = v,
            LossTerm::SoftBoundary => self.soft_boundary = v,
            LossTerm::Total => self.total = v,
        }
    }

    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Total => self.total,
            t => self.components()[t.index()],
        }
    }

    /// The weighted sum of the components.
    pub fn recompose(&self, weights: &LossWeights, formulation: Formulation, boundary: Boundary) -> f64 {
        weights
            .coefficients(formulation, boundary)
            .iter()
            .zip(self.components())
            .map(|(c, v)| c * v)
            .sum()
    }

    /// Componentwise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.conformality += b.conformality;
            out.bijectivity += b.bijectivity;
            out.smoothness += b.smoothness;
            out.volumetric += b.volumetric;
            out.landmark += b.landmark;
            out.intensity += b.intensity;
            out.soft_boundary += b.soft_boundary;
            out.total += b.total;
            out.omega_plus_fraction += b.omega_plus_fraction;
        }
        out.conformality /= n;
        out.bijectivity /= n;
        out.smoothness /= n;
        out.volumetric /= n;
        out.landmark /= n;
        out.intensity /= n;
        out.soft_boundary /= n;
        out.total /= n;
        out.omega_plus_fraction /= n;
        out
    }
}

// ---------------------------------------------------------------------------
// Pointwise terms.

/// Conformality dilation `‖A‖_F² / (3 det(A)^{2/3})`; `+∞` unless `det > 0`.
pub fn conformality_k(jac: &[[f64; 3]; 3], det: f64) -> f64 {
    if det > 0.0 {
        let c = det.cbrt();
        frob2(jac) / (3.0 * c * c)
    } else {
        f64::INFINITY
    }
}

fn frob2(m: &[[f64; 3]; 3]) -> f64 {
    m.iter().flatten().map(|v| v * v).sum()
}

/// ∂K/∂A for `det > 0`.
pub fn conformality_k_grad(jac: &[[f64; 3]; 3], det: f64) -> [[f64; 3]; 3] {
    let c = det.cbrt();
    let scale = 1.0 / (c * c);
    let k = frob2(jac) * scale / 3.0;
    let cof = cofactor3(jac);
    let mut g = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            g[i][j] = 2.0 / 3.0 * (jac[i][j] * scale - k * cof[i][j] / det);
        }
    }
    g
}

fn nonempty<T>(batch: &[T], what: &str) -> Result<()> {
    if batch.is_empty() {
        Err(Error::contract(format!("{what} of an empty batch")))
    } else {
        Ok(())
    }
}

/// Mean of `K·[det > 0]` with the full batch size as denominator.
pub fn conformality_loss(batch: &[MapEval]) -> Result<f64> {
    nonempty(batch, "conformality loss")?;
    let s: f64 = batch
        .iter()
        .map(|m| if m.det > 0.0 { conformality_k(&m.jac, m.det) } else { 0.0 })
        .sum();
    Ok(s / batch.len() as f64)
}

pub fn bijectivity_loss(batch: &[MapEval]) -> Result<f64> {
    bijectivity_loss_pow(batch, 2.0)
}

/// Mean of `|det|^power · [det ≤ 0]`.
pub fn bijectivity_loss_pow(batch: &[MapEval], power: f64) -> Result<f64> {
    nonempty(batch, "bijectivity loss")?;
    let s: f64 = batch
        .iter()
        .map(|m| if m.det <= 0.0 { m.det.abs().powf(power) } else { 0.0 })
        .sum();
    Ok(s / batch.len() as f64)
}

pub fn smoothness_loss(batch: &[MapEval]) -> Result<f64> {
    nonempty(batch, "smoothness loss")?;
    let s: f64 = batch.iter().map(|m| m.lap.iter().map(|l| l * l).sum::<f64>()).sum();
    Ok(s / batch.len() as f64)
}

pub fn volumetric_loss(batch: &[MapEval], v_bar: f64) -> Result<f64> {
    nonempty(batch, "volumetric loss")?;
    let s: f64 = batch.iter().map(|m| (m.det - v_bar).powi(2)).sum();
    Ok(s / batch.len() as f64)
}

/// Fraction of the batch with `det > 0`.
pub fn omega_plus_fraction(batch: &[MapEval]) -> f64 {
    batch.iter().filter(|m| m.det > 0.0).count() as f64 / batch.len().max(1) as f64
}

fn sq_dist(a: Point, b: Point) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Mean squared mismatch `|f(q) − p|²` over all pairs.
pub fn landmark_loss(params: &NetParams, landmarks: &LandmarkSet) -> Result<f64> {
    nonempty(landmarks.pairs(), "landmark loss")?;
    let mut ev = Evaluator::new(params);
    let s: f64 = landmarks.pairs().iter().map(|(q, p)| sq_dist(ev.map(*q), *p)).sum();
    Ok(s / landmarks.len() as f64)
}

fn clamp_unit(p: Point) -> Point {
    p.map(|c| c.clamp(0.0, 1.0))
}

/// Mean of `(S(f(q)) − T(q))²` over the batch, both images sampled
/// trilinearly.
pub fn intensity_loss(params: &NetParams, source: &Volume3, target: &Volume3, batch: &[Point]) -> Result<f64> {
    if source.dims() != target.dims() {
        return Err(Error::config(format!(
            "source {:?} and target {:?} volumes differ in shape",
            source.dims(),
            target.dims()
        )));
    }
    nonempty(batch, "intensity loss")?;
    let mut ev = Evaluator::new(params);
    let s: f64 = batch
        .iter()
        .map(|&q| (source.sample(clamp_unit(ev.map(q))) - target.sample(q)).powi(2))
        .sum();
    Ok(s / batch.len() as f64)
}

/// Sum over faces of the mean squared normal displacement, plus the same over
/// edges with both normals. Only meaningful for a soft-boundary map.
pub fn soft_boundary_loss(params: &NetParams, face_samples: &[Vec<Point>], edge_samples: &[Vec<Point>]) -> Result<f64> {
    if params.arch().boundary == Boundary::Hard {
        return Err(Error::contract(
            "soft boundary loss requested for a hard-constrained map",
        ));
    }
    boundary_penalty(params, face_samples, edge_samples)
}

/// Same quantity as [`soft_boundary_loss`] for either boundary mode.
pub fn boundary_penalty(params: &NetParams, face_samples: &[Vec<Point>], edge_samples: &[Vec<Point>]) -> Result<f64> {
    check_boundary_sets(face_samples, edge_samples)?;
    let mut ev = Evaluator::new(params);
    let mut total = 0.0;
    for (face, pts) in faces().iter().zip(face_samples) {
        let s: f64 = pts.iter().map(|&q| (ev.map(q)[face.axis] - q[face.axis]).powi(2)).sum();
        total += s / pts.len() as f64;
    }
    for (edge, pts) in edges().iter().zip(edge_samples) {
        let s: f64 = pts
            .iter()
            .map(|&q| {
                let f = ev.map(q);
                edge.fixed.iter().map(|&(a, _)| (f[a] - q[a]).powi(2)).sum::<f64>()
            })
            .sum();
        total += s / pts.len() as f64;
    }
    Ok(total)
}

fn check_boundary_sets(face_samples: &[Vec<Point>], edge_samples: &[Vec<Point>]) -> Result<()> {
    if face_samples.len() != 6 || edge_samples.len() != 12 {
        return Err(Error::Dimension(format!(
            "expected 6 face and 12 edge sample sets, got {} and {}",
            face_samples.len(),
            edge_samples.len()
        )));
    }
    if face_samples.iter().chain(edge_samples).any(|s| s.is_empty()) {
        return Err(Error::contract("empty boundary sample set"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Objective.

/// Image-matching samples: query points with their target intensities.
#[derive(Clone, Debug)]
pub struct ImageBatch<'a> {
    pub source: &'a Volume3,
    pub points: Vec<Point>,
    pub target: Vec<f64>,
}

impl<'a> ImageBatch<'a> {
    /// Exact grid reads of `target` at the given voxel indices.
    pub fn from_voxels(source: &'a Volume3, target: &Volume3, voxels: &[usize]) -> Result<Self> {
        if source.dims() != target.dims() {
            return Err(Error::config(format!(
                "source {:?} and target {:?} volumes differ in shape",
                source.dims(),
                target.dims()
            )));
        }
        Ok(ImageBatch {
            source,
            points: voxels.iter().map(|&i| target.center_of(i)).collect(),
            target: voxels.iter().map(|&i| target.at(i)).collect(),
        })
    }

    /// Trilinear reads of `target` at arbitrary points.
    pub fn from_points(source: &'a Volume3, target: &Volume3, points: &[Point]) -> Result<Self> {
        if source.dims() != target.dims() {
            return Err(Error::config("source and target volumes differ in shape"));
        }
        Ok(ImageBatch {
            source,
            points: points.to_vec(),
            target: points.iter().map(|&q| target.sample(q)).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundarySamples<'a> {
    pub faces: &'a [Vec<Point>],
    pub edges: &'a [Vec<Point>],
}

/// Everything one evaluation of the objective consumes.
#[derive(Clone, Debug)]
pub struct Samples<'a> {
    pub interior: &'a [Point],
    pub landmarks: Option<&'a LandmarkSet>,
    pub image: Option<ImageBatch<'a>>,
    pub boundary: Option<BoundarySamples<'a>>,
}

/// Evaluates the weighted objective and records a tape for
/// [`crate::diffcalc::backward`]. Scalar outputs sit at [`LossTerm::index`];
/// the per-sample determinants are at [`DET_FIELD`].
pub fn total_loss(
    params: &NetParams,
    weights: &LossWeights,
    formulation: Formulation,
    samples: &Samples<'_>,
) -> Result<(LossBreakdown, GradTape)> {
    weights.validate()?;
    let arch = *params.arch();
    let boundary = arch.boundary;
    nonempty(samples.interior, "objective")?;
    if formulation.uses_landmarks() && samples.landmarks.is_none() {
        return Err(Error::config(format!("{formulation:?} formulation needs landmarks")));
    }
    if formulation.uses_images() && samples.image.is_none() {
        return Err(Error::config(format!("{formulation:?} formulation needs source/target images")));
    }
    if boundary == Boundary::Soft && weights.soft_boundary > 0.0 && samples.boundary.is_none() {
        return Err(Error::config("soft boundary mode needs face and edge samples"));
    }

    let mut tape = GradTape::new(arch, params.as_slice());
    let mut values = [0.0; 7];
    let mut seeds: Vec<(usize, LossTerm, Vec<f64>)> = Vec::new();

    // Interior jets.
    let gi = tape.record_group(samples.interior, FULL);
    let n = samples.interior.len();
    let inv = 1.0 / n as f64;
    let mut dets = Vec::with_capacity(n);
    let mut s_conf = vec![0.0; n * 3 * FULL];
    let mut s_bij = vec![0.0; n * 3 * FULL];
    let mut s_smooth = vec![0.0; n * 3 * FULL];
    let mut s_vol = vec![0.0; n * 3 * FULL];
    let mut positive = 0usize;
    {
        let out = tape.group_outputs(gi);
        let p = weights.bijectivity_power;
        for k in 0..n {
            let o = &out[k * 3 * FULL..(k + 1) * 3 * FULL];
            let m = MapEval::from_packed(o);
            let base = k * 3 * FULL;
            dets.push(m.det);
            let cof = cofactor3(&m.jac);

            for i in 0..3 {
                values[LossTerm::Smoothness.index()] += m.lap[i] * m.lap[i];
                s_smooth[base + i * FULL + 4] = 2.0 * m.lap[i] * inv;
            }

            let dv = m.det - weights.v_bar;
            values[LossTerm::Volumetric.index()] += dv * dv;
            for i in 0..3 {
                for j in 0..3 {
                    s_vol[base + i * FULL + 1 + j] = 2.0 * dv * cof[i][j] * inv;
                }
            }

            if m.det > 0.0 {
                positive += 1;
                values[LossTerm::Conformality.index()] += conformality_k(&m.jac, m.det);
                let g = conformality_k_grad(&m.jac, m.det);
                for i in 0..3 {
                    for j in 0..3 {
                        s_conf[base + i * FULL + 1 + j] = g[i][j] * inv;
                    }
                }
            } else {
                let a = m.det.abs();
                values[LossTerm::Bijectivity.index()] += a.powf(p);
                // d|det|^p/d det = −p |det|^{p−1} for det ≤ 0
                let d = if a > 0.0 { -p * a.powf(p - 1.0) } else if p == 1.0 { -1.0 } else { 0.0 };
                for i in 0..3 {
                    for j in 0..3 {
                        s_bij[base + i * FULL + 1 + j] = d * cof[i][j] * inv;
                    }
                }
            }
        }
        for t in [
            LossTerm::Conformality,
            LossTerm::Bijectivity,
            LossTerm::Smoothness,
            LossTerm::Volumetric,
        ] {
            values[t.index()] *= inv;
        }
    }
    seeds.push((gi, LossTerm::Conformality, s_conf));
    seeds.push((gi, LossTerm::Bijectivity, s_bij));
    seeds.push((gi, LossTerm::Smoothness, s_smooth));
    seeds.push((gi, LossTerm::Volumetric, s_vol));

    // Terms outside the formulation are still evaluated (with a zero
    // coefficient) whenever their data is supplied.
    if let Some(lm) = samples.landmarks {
        nonempty(lm.pairs(), "landmark loss")?;
        let g = tape.record_group(&lm.sources(), VALUE);
        let out = tape.group_outputs(g);
        let inv = 1.0 / lm.len() as f64;
        let mut seed = vec![0.0; lm.len() * 3];
        let mut sum = 0.0;
        for (k, (_, p)) in lm.pairs().iter().enumerate() {
            for i in 0..3 {
                let d = out[k * 3 + i] - p[i];
                sum += d * d;
                seed[k * 3 + i] = 2.0 * d * inv;
            }
        }
        values[LossTerm::Landmark.index()] = sum * inv;
        seeds.push((g, LossTerm::Landmark, seed));
    }

    if let Some(img) = samples.image.as_ref() {
        nonempty(&img.points, "intensity loss")?;
        if img.points.len() != img.target.len() {
            return Err(Error::Dimension("image batch points and targets differ in length".into()));
        }
        let g = tape.record_group(&img.points, VALUE);
        let out = tape.group_outputs(g);
        let inv = 1.0 / img.points.len() as f64;
        let mut seed = vec![0.0; img.points.len() * 3];
        let mut sum = 0.0;
        for k in 0..img.points.len() {
            let f = [out[k * 3], out[k * 3 + 1], out[k * 3 + 2]];
            let (val, grad) = img.source.sample_grad(clamp_unit(f));
            let r = val - img.target[k];
            sum += r * r;
            for i in 0..3 {
                let inside = (0.0..=1.0).contains(&f[i]);
                seed[k * 3 + i] = if inside { 2.0 * r * grad[i] * inv } else { 0.0 };
            }
        }
        values[LossTerm::Intensity.index()] = sum * inv;
        seeds.push((g, LossTerm::Intensity, seed));
    }

    if boundary == Boundary::Soft {
        if let Some(bs) = samples.boundary {
            check_boundary_sets(bs.faces, bs.edges)?;
            let mut pts = Vec::new();
            for s in bs.faces.iter().chain(bs.edges) {
                pts.extend_from_slice(s);
            }
            let g = tape.record_group(&pts, VALUE);
            let out = tape.group_outputs(g);
            let mut seed = vec![0.0; pts.len() * 3];
            let mut total = 0.0;
            let mut k = 0;
            let mut visit = |set: &[Point], axes: &[usize]| {
                let inv = 1.0 / set.len() as f64;
                let mut sum = 0.0;
                for q in set {
                    for &a in axes {
                        let d = out[k * 3 + a] - q[a];
                        sum += d * d;
                        seed[k * 3 + a] = 2.0 * d * inv;
                    }
                    k += 1;
                }
                total += sum * inv;
            };
            for (face, set) in faces().iter().zip(bs.faces) {
                visit(set, &[face.axis]);
            }
            for (edge, set) in edges().iter().zip(bs.edges) {
                visit(set, &[edge.fixed[0].0, edge.fixed[1].0]);
            }
            values[LossTerm::SoftBoundary.index()] = total;
            seeds.push((g, LossTerm::SoftBoundary, seed));
        }
    }

    for t in LossTerm::COMPONENTS {
        let idx = tape.push_scalar(t.name(), values[t.index()]);
        debug_assert_eq!(idx, t.index());
    }
    let coefs = weights.coefficients(formulation, boundary);
    let parts = LossTerm::COMPONENTS.iter().map(|t| (t.index(), coefs[t.index()])).collect();
    let total_idx = tape.push_combination("total", parts);
    debug_assert_eq!(total_idx, LossTerm::Total.index());
    let det_idx = tape.push_field("det", dets);
    debug_assert_eq!(det_idx, DET_FIELD);
    for (g, t, seed) in seeds {
        tape.add_seed(g, t.index(), seed);
    }

    let mut breakdown = LossBreakdown::default();
    for t in LossTerm::COMPONENTS {
        breakdown.set(t, values[t.index()]);
    }
    breakdown.total = tape.value(total_idx)?;
    breakdown.omega_plus_fraction = positive as f64 / n as f64;
    Ok((breakdown, tape))
}
