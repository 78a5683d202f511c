#![allow(dead_code)]

use diffeo_core::ansatz::{forward, init_params};
use diffeo_core::losses::{total_loss, BoundarySamples, ImageBatch, Samples};
use diffeo_core::sampling::{build_pool, derived_rng, SamplePool};
use diffeo_core::synth::{appendix_dataset, twisted_pairs};
use diffeo_core::{backward, Activation, Boundary, Formulation, LandmarkSet, LossTerm, LossWeights, NetParams, Point, Volume3};
use rand::seq::index;
use rand::Rng;

/// Initialised parameters with every coordinate (biases included) perturbed
/// by uniform noise of half-width `noise`, then scaled by `scale`.
pub fn random_params(width: usize, blocks: usize, act: Activation, seed: u64, noise: f64, scale: f64) -> NetParams {
    let mut p = init_params(width, blocks, act, seed).unwrap();
    let mut rng = derived_rng(seed, &[0x7e57]);
    for t in p.as_mut_slice() {
        *t = scale * (*t + rng.gen_range(-noise..=noise));
    }
    p
}

pub fn interior_points(n: usize, seed: u64) -> Vec<Point> {
    let mut rng = derived_rng(seed, &[0x1a7]);
    (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
}

/// Worst normwise relative error of the jet Jacobian and Laplacian against
/// central differences with step `h`, over the given points.
pub fn jet_fd_error(params: &NetParams, points: &[Point], h: f64) -> (f64, f64) {
    let f = |x: Point| forward(params, x).f;
    let mut worst_jac: f64 = 0.0;
    let mut worst_lap: f64 = 0.0;
    for &x in points {
        let m = forward(params, x);
        let fx = m.f;
        let mut jac_fd = [[0.0; 3]; 3];
        let mut lap_fd = [0.0; 3];
        for j in 0..3 {
            let (mut xp, mut xm) = (x, x);
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (f(xp), f(xm));
            for i in 0..3 {
                jac_fd[i][j] = (fp[i] - fm[i]) / (2.0 * h);
                lap_fd[i] += (fp[i] - 2.0 * fx[i] + fm[i]) / (h * h);
            }
        }
        let jac_scale = jac_fd.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        let jac_err = (0..9).fold(0.0f64, |a, k| a.max((m.jac[k / 3][k % 3] - jac_fd[k / 3][k % 3]).abs()));
        let lap_scale = lap_fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let lap_err = (0..3).fold(0.0f64, |a, i| a.max((m.lap[i] - lap_fd[i]).abs()));
        worst_jac = worst_jac.max(jac_err / jac_scale);
        worst_lap = worst_lap.max(lap_err / lap_scale);
    }
    (worst_jac, worst_lap)
}

/// Fixed inputs for evaluating every loss term.
pub struct GradFixture {
    pub pool: SamplePool,
    pub interior: Vec<Point>,
    pub landmarks: LandmarkSet,
    pub source: Volume3,
    pub target: Volume3,
    pub voxels: Vec<usize>,
}

impl GradFixture {
    pub fn new(n_interior: usize, seed: u64) -> Self {
        let (source, target, _) = appendix_dataset([16, 16, 16], 2).unwrap();
        let mut rng = derived_rng(seed, &[0x60]);
        let voxels = index::sample(&mut rng, source.len(), n_interior).into_vec();
        GradFixture {
            pool: build_pool(16, None, seed).unwrap(),
            interior: interior_points(n_interior, seed),
            landmarks: twisted_pairs(),
            source,
            target,
            voxels,
        }
    }

    pub fn samples(&self) -> Samples<'_> {
        Samples {
            interior: &self.interior,
            landmarks: Some(&self.landmarks),
            image: Some(ImageBatch::from_voxels(&self.source, &self.target, &self.voxels).unwrap()),
            boundary: Some(BoundarySamples {
                faces: &self.pool.face_samples,
                edges: &self.pool.edge_samples,
            }),
        }
    }
}

/// Weights with every term switched on, so the total exercises all seeds.
pub fn all_on_weights() -> LossWeights {
    LossWeights {
        volumetric: 3.0,
        soft_boundary: 7.0,
        ..LossWeights::default()
    }
}

/// Normwise relative error of the reverse-mode gradient of `term` against
/// central differences on `n_coords` random coordinates. Returns
/// `(error, fd_scale)`.
pub fn grad_fd_error(params: &NetParams, fixture: &GradFixture, term: LossTerm, n_coords: usize, h: f64, seed: u64) -> (f64, f64) {
    let weights = all_on_weights();
    let samples = fixture.samples();
    let eval = |p: &NetParams| {
        total_loss(p, &weights, Formulation::Hybrid, &samples)
            .unwrap()
            .0
            .get(term)
    };
    let (_, tape) = total_loss(params, &weights, Formulation::Hybrid, &samples).unwrap();
    let grad = backward(&tape, term.index()).unwrap();
    let mut rng = derived_rng(seed, &[0x9c, term.index() as u64]);
    let coords = index::sample(&mut rng, params.param_count(), n_coords);
    let mut err: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let mut p = params.clone();
    for c in coords {
        let t0 = p.as_slice()[c];
        p.as_mut_slice()[c] = t0 + h;
        let lp = eval(&p);
        p.as_mut_slice()[c] = t0 - h;
        let lm = eval(&p);
        p.as_mut_slice()[c] = t0;
        let fd = (lp - lm) / (2.0 * h);
        err = err.max((grad[c] - fd).abs());
        scale = scale.max(fd.abs());
    }
    if scale == 0.0 {
        (err, scale)
    } else {
        (err / scale, scale)
    }
}

/// Scales `base` up until the map folds on some but not all of `points`.
pub fn folded_params(base: &NetParams, points: &[Point]) -> NetParams {
    for k in 1..40 {
        let s = 1.0 + 0.25 * k as f64;
        let mut p = base.clone();
        p.as_mut_slice().iter_mut().for_each(|t| *t *= s);
        let neg = points.iter().filter(|&&x| forward(&p, x).det <= 0.0).count();
        if neg * 5 >= points.len() && neg < points.len() {
            return p;
        }
    }
    panic!("no folding scale found");
}

pub fn soft(p: &NetParams) -> NetParams {
    p.clone().with_boundary(Boundary::Soft)
}
