//! Adam and the training loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ansatz::{init_params, map_point, NetParams};
use crate::diffcalc::{backward, Activation, Boundary, Point};
use crate::error::{Error, Result};
use crate::losses::{
    total_loss, BoundarySamples, Formulation, ImageBatch, LossBreakdown, LossTerm, LossWeights, Samples,
};
use crate::sampling::{build_pool, derived_rng, draw_batch, face_points, faces, SamplePool, Stream};
use crate::synth::LandmarkSet;
use crate::volume::Volume3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub formulation: Formulation,
    pub boundary_mode: Boundary,
    pub epochs: usize,
    pub interior_batch: usize,
    pub image_batch: usize,
    /// Use the whole interior pool every step.
    pub full_batch: bool,
    pub lr: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub n_int: usize,
    pub seed: u64,
    pub width: usize,
    pub blocks: usize,
    pub activation: Activation,
    /// Epoch cadence for checkpoints written by observers; 0 disables.
    pub checkpoint_every: usize,
    /// Fill the `wall_ms` history column. Off by default so that histories
    /// are bit-reproducible.
    pub record_wall_ms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            formulation: Formulation::Landmark,
            boundary_mode: Boundary::Hard,
            epochs: 8000,
            interior_batch: 1000,
            image_batch: 8192,
            full_batch: false,
            lr: 1e-3,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            n_int: 10_000,
            seed: 0,
            width: 20,
            blocks: 3,
            activation: Activation::Tanh,
            checkpoint_every: 0,
            record_wall_ms: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs < 1 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        for (k, b) in self.adam_betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return Err(Error::config(format!("adam_betas[{k}] must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps must be > 0"));
        }
        if self.n_int < 1 {
            return Err(Error::config("n_int must be >= 1"));
        }
        if !self.full_batch && !(1..=self.n_int).contains(&self.interior_batch) {
            return Err(Error::config(format!(
                "interior_batch must lie in 1..={}, got {}",
                self.n_int, self.interior_batch
            )));
        }
        if self.image_batch < 1 {
            return Err(Error::config("image_batch must be >= 1"));
        }
        if self.boundary_mode == Boundary::Soft && !(self.weights.soft_boundary > 0.0) {
            return Err(Error::config("boundary_mode soft requires weights.soft_boundary > 0"));
        }
        if self.width < 3 || self.blocks < 1 {
            return Err(Error::config("width must be >= 3 and blocks >= 1"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        if self.full_batch {
            1
        } else {
            self.n_int.div_ceil(self.interior_batch)
        }
    }
}

/// Adam moments over the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `theta` in place.
pub fn adam_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: [f64; 2],
    eps: f64,
) -> Result<()> {
    if theta.len() != grad.len() || state.m.len() != grad.len() || state.v.len() != grad.len() {
        return Err(Error::Dimension(format!(
            "adam: theta {}, grad {}, moments {}/{}",
            theta.len(),
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            step: state.t as usize,
            term: "gradient".into(),
            detail: format!("non-finite gradient component {i}"),
        });
    }
    let [b1, b2] = betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Registration data. Which parts are required depends on the formulation.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub landmarks: Option<LandmarkSet>,
    pub source: Option<Volume3>,
    pub target: Option<Volume3>,
}

impl TrainData {
    pub fn landmarks(lm: LandmarkSet) -> Self {
        TrainData {
            landmarks: Some(lm),
            ..Default::default()
        }
    }

    fn check(&self, formulation: Formulation) -> Result<()> {
        if formulation.uses_landmarks() && self.landmarks.is_none() {
            return Err(Error::config(format!(
                "landmarks: required by the {formulation:?} formulation"
            )));
        }
        if formulation.uses_images() {
            match (&self.source, &self.target) {
                (Some(s), Some(t)) if s.dims() == t.dims() => {}
                (Some(_), Some(_)) => return Err(Error::config("source/target: volume shapes differ")),
                (None, _) => return Err(Error::config(format!("source: required by the {formulation:?} formulation"))),
                (_, None) => return Err(Error::config(format!("target: required by the {formulation:?} formulation"))),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub wall_ms: u64,
}

pub const HISTORY_HEADER: &str = "epoch,conformality,bijectivity,smoothness,volumetric,landmark,intensity,soft_boundary,total,omega_plus_fraction,wall_ms";

/// History as CSV. Floats use the shortest representation that parses back
/// to the same bits.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let l = &r.loss;
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}\n",
            r.epoch,
            l.conformality,
            l.bijectivity,
            l.smoothness,
            l.volumetric,
            l.landmark,
            l.intensity,
            l.soft_boundary,
            l.total,
            l.omega_plus_fraction,
            r.wall_ms
        ));
    }
    s
}

pub fn parse_history_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == HISTORY_HEADER => {}
        _ => return Err(Error::config("history CSV: unexpected header")),
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 11 {
            return Err(Error::config(format!("history CSV row {}: expected 11 columns", n + 1)));
        }
        let bad = |e: &dyn std::fmt::Display| Error::config(format!("history CSV row {}: {e}", n + 1));
        let f = |i: usize| cols[i].parse::<f64>().map_err(|e| bad(&e));
        out.push(EpochRecord {
            epoch: cols[0].parse().map_err(|e| bad(&e))?,
            loss: LossBreakdown {
                conformality: f(1)?,
                bijectivity: f(2)?,
                smoothness: f(3)?,
                volumetric: f(4)?,
                landmark: f(5)?,
                intensity: f(6)?,
                soft_boundary: f(7)?,
                total: f(8)?,
                omega_plus_fraction: f(9)?,
            },
            wall_ms: cols[10].parse().map_err(|e| bad(&e))?,
        });
    }
    Ok(out)
}

/// Hooks into the training loop, e.g. for checkpointing or progress output.
pub trait TrainObserver {
    fn on_epoch(&mut self, _params: &NetParams, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetParams,
    pub history: Vec<EpochRecord>,
    pub pool_digest: String,
    pub steps_per_epoch: usize,
}

impl TrainOutcome {
    pub fn last(&self) -> &LossBreakdown {
        &self.history.last().expect("at least one epoch").loss
    }
}

pub fn train(config: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    train_with(config, data, &mut ())
}

pub fn train_with(config: &TrainConfig, data: &TrainData, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    config.validate()?;
    data.check(config.formulation)?;
    let use_images = config.formulation.uses_images();
    let image_dims = if use_images { data.target.as_ref().map(|t| t.dims()) } else { None };
    let pool = build_pool(config.n_int, image_dims, config.seed)?;
    if use_images && config.image_batch > pool.image_grid.len() {
        return Err(Error::config(format!(
            "image_batch {} exceeds the {} voxels of the target image",
            config.image_batch,
            pool.image_grid.len()
        )));
    }
    let params = init_params(config.width, config.blocks, config.activation, config.seed)?
        .with_boundary(config.boundary_mode);
    run_loop(config, data, &pool, params, observer)
}

fn run_loop(
    config: &TrainConfig,
    data: &TrainData,
    pool: &SamplePool,
    mut params: NetParams,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let steps = config.steps_per_epoch();
    let use_images = config.formulation.uses_images();
    let mut adam = AdamState::new(params.param_count());
    let mut history = Vec::with_capacity(config.epochs);
    let start = Instant::now();
    let mut global_step = 0usize;
    let mut interior: Vec<Point> = Vec::with_capacity(config.interior_batch);

    for epoch in 0..config.epochs {
        let mut step_losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let interior_pts: &[Point] = if config.full_batch {
                &pool.interior
            } else {
                let idx = draw_batch(pool, Stream::Interior, config.interior_batch, config.seed, epoch, step)?;
                interior.clear();
                interior.extend(idx.iter().map(|&i| pool.interior[i]));
                &interior
            };
            let image = if use_images {
                let (s, t) = (data.source.as_ref().unwrap(), data.target.as_ref().unwrap());
                let idx = draw_batch(pool, Stream::Image, config.image_batch, config.seed, epoch, step)?;
                Some(ImageBatch::from_voxels(s, t, &idx)?)
            } else {
                None
            };
            let samples = Samples {
                interior: interior_pts,
                landmarks: if config.formulation.uses_landmarks() { data.landmarks.as_ref() } else { None },
                image,
                boundary: (config.boundary_mode == Boundary::Soft).then_some(BoundarySamples {
                    faces: &pool.face_samples,
                    edges: &pool.edge_samples,
                }),
            };
            let (loss, tape) = total_loss(&params, &config.weights, config.formulation, &samples)?;
            if !loss.total.is_finite() {
                let term = LossTerm::COMPONENTS
                    .iter()
                    .find(|t| !loss.get(**t).is_finite())
                    .map_or("total", |t| t.name());
                return Err(Error::Numeric {
                    step: global_step,
                    term: term.into(),
                    detail: format!("loss became {} in epoch {}", loss.total, epoch + 1),
                });
            }
            let grad = backward(&tape, LossTerm::Total.index())?;
            adam_step(
                params.as_mut_slice(),
                &grad,
                &mut adam,
                config.lr,
                config.adam_betas,
                config.adam_eps,
            )
            .map_err(|e| match e {
                Error::Numeric { detail, .. } => Error::Numeric {
                    step: global_step,
                    term: "gradient".into(),
                    detail,
                },
                other => other,
            })?;
            step_losses.push(loss);
            global_step += 1;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: LossBreakdown::mean(&step_losses),
            wall_ms: if config.record_wall_ms { start.elapsed().as_millis() as u64 } else { 0 },
        };
        observer.on_epoch(&params, &record)?;
        history.push(record);
    }

    Ok(TrainOutcome {
        params,
        history,
        pool_digest: pool.digest(),
        steps_per_epoch: steps,
    })
}

// ---------------------------------------------------------------------------
// Boundary-treatment comparison.

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub label: String,
    pub boundary_mode: Boundary,
    pub soft_boundary_weight: f64,
    /// Largest face-normal displacement over the diagnostic boundary samples.
    pub boundary_error: f64,
    /// Mean squared landmark mismatch of the final map.
    pub landmark_loss: f64,
    /// Conformality loss of the final epoch.
    pub conformality_loss: f64,
    /// Soft boundary loss of the final epoch (0 for the hard run).
    pub final_boundary_loss: f64,
    pub pool_digest: String,
    #[serde(skip)]
    pub outcome: Option<TrainOutcome>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn shared_pool(&self) -> bool {
        self.runs.windows(2).all(|w| w[0].pool_digest == w[1].pool_digest)
    }
}

pub const BOUNDARY_DIAGNOSTIC_SAMPLES: usize = 10_000;

/// Uniform points on the cube surface, each tagged with its face.
pub fn boundary_diagnostic_points(n: usize, seed: u64) -> Vec<(usize, Point)> {
    let mut rng = derived_rng(seed, &[0xb0d1]);
    let fs = faces();
    (0..n)
        .map(|_| {
            use rand::Rng;
            let f = rng.gen_range(0..6);
            (fs[f].axis, face_points(fs[f], 1, &mut rng)[0])
        })
        .collect()
}

/// Max |f_a(q) − q_a| over points q on faces normal to axis a.
pub fn boundary_error(params: &NetParams, n: usize, seed: u64) -> f64 {
    let mut ev = crate::ansatz::Evaluator::new(params);
    boundary_diagnostic_points(n, seed)
        .into_iter()
        .map(|(axis, q)| (ev.map(q)[axis] - q[axis]).abs())
        .fold(0.0, f64::max)
}

/// Trains the landmark formulation three times on a shared pool: soft
/// boundary with α₇ = 50, soft with α₇ = 500, and the hard wrap.
pub fn ablate_boundary(base: &TrainConfig, data: &TrainData) -> Result<AblationReport> {
    ablate_boundary_with(base, data, &mut |_, _| Box::new(()))
}

pub fn ablate_boundary_with(
    base: &TrainConfig,
    data: &TrainData,
    observers: &mut dyn FnMut(&str, &TrainConfig) -> Box<dyn TrainObserver>,
) -> Result<AblationReport> {
    let landmarks = data
        .landmarks
        .as_ref()
        .ok_or_else(|| Error::config("landmarks: required for the boundary ablation"))?;
    let variants = [
        ("soft_alpha7_50", Boundary::Soft, 50.0),
        ("soft_alpha7_500", Boundary::Soft, 500.0),
        ("hard", Boundary::Hard, 0.0),
    ];
    let mut runs = Vec::new();
    for (label, mode, a7) in variants {
        let mut cfg = base.clone();
        cfg.formulation = Formulation::Landmark;
        cfg.weights.intensity = 0.0;
        cfg.boundary_mode = mode;
        cfg.weights.soft_boundary = a7;
        let mut obs = observers(label, &cfg);
        let outcome = train_with(&cfg, data, obs.as_mut())?;
        let final_params = &outcome.params;
        let lm = landmarks
            .pairs()
            .iter()
            .map(|(q, p)| {
                let f = map_point(final_params, *q);
                (0..3).map(|i| (f[i] - p[i]).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / landmarks.len() as f64;
        let last = *outcome.last();
        runs.push(AblationRun {
            label: label.into(),
            boundary_mode: mode,
            soft_boundary_weight: a7,
            boundary_error: boundary_error(final_params, BOUNDARY_DIAGNOSTIC_SAMPLES, base.seed),
            landmark_loss: lm,
            conformality_loss: last.conformality,
            final_boundary_loss: last.soft_boundary,
            pool_digest: outcome.pool_digest.clone(),
            outcome: Some(outcome),
        });
    }
    Ok(AblationReport { seed: base.seed, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::twisted_pairs;

    #[test]
    fn adam_zero_gradient_keeps_theta() {
        let mut theta = vec![0.3, -1.2];
        let mut st = AdamState::new(2);
        adam_step(&mut theta, &[0.0, 0.0], &mut st, 1e-3, [0.9, 0.999], 1e-8).unwrap();
        assert_eq!(theta, vec![0.3, -1.2]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_oracle() {
        // m = 0.1, v = 0.001; bias correction gives m̂ = v̂ = 1.
        let mut theta = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut theta, &[1.0], &mut st, 1e-3, [0.9, 0.999], 1e-8).unwrap();
        let expected = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_drifts_against_gradient_sign() {
        let mut theta = vec![0.0, 0.0];
        let mut st = AdamState::new(2);
        let mut prev = theta.clone();
        for _ in 0..2 {
            adam_step(&mut theta, &[2.0, -0.5], &mut st, 1e-3, [0.9, 0.999], 1e-8).unwrap();
            assert!(theta[0] < prev[0] && theta[1] > prev[1]);
            prev = theta.clone();
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut theta = vec![0.0];
        let mut st = AdamState::new(1);
        let r = adam_step(&mut theta, &[f64::NAN], &mut st, 1e-3, [0.9, 0.999], 1e-8);
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        assert_eq!(ok.steps_per_epoch(), 10);
        for bad in [
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { adam_betas: [1.0, 0.9], ..ok.clone() },
            TrainConfig { boundary_mode: Boundary::Soft, ..ok.clone() },
            TrainConfig { interior_batch: 20_000, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let json = serde_json::to_string(&ok).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), ok);
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            n_int: 64,
            interior_batch: 32,
            width: 8,
            blocks: 1,
            ..Default::default()
        }
    }

    #[test]
    fn one_epoch_smoke() {
        let out = train(&tiny_config(), &TrainData::landmarks(twisted_pairs())).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.steps_per_epoch, 2);
        let csv = history_csv(&out.history);
        assert_eq!(parse_history_csv(&csv).unwrap(), out.history);
    }

    #[test]
    fn missing_data_fails_before_training() {
        let cfg = TrainConfig {
            formulation: Formulation::Hybrid,
            ..tiny_config()
        };
        let err = train(&cfg, &TrainData::landmarks(twisted_pairs())).unwrap_err();
        assert!(err.to_string().contains("source"), "{err}");
        let err = train(&tiny_config(), &TrainData::default()).unwrap_err();
        assert!(err.to_string().contains("landmarks"), "{err}");
    }

    #[test]
    fn identity_data_stays_at_floor() {
        let lm = LandmarkSet::new(vec![([0.3, 0.4, 0.5], [0.3, 0.4, 0.5]), ([0.7, 0.6, 0.2], [0.7, 0.6, 0.2])])
            .unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            n_int: 128,
            interior_batch: 128,
            width: 8,
            blocks: 1,
            ..Default::default()
        };
        let out = train(&cfg, &TrainData::landmarks(lm)).unwrap();
        let first = out.history[0].loss.total;
        for r in &out.history {
            assert!(r.loss.total <= 1.05 * first, "epoch {} total {}", r.epoch, r.loss.total);
        }
    }

    #[test]
    fn boundary_diagnostics() {
        let p = init_params(8, 1, Activation::Tanh, 3).unwrap();
        assert_eq!(boundary_error(&p, 2000, 1), 0.0);
        let soft = p.with_boundary(Boundary::Soft);
        assert!(boundary_error(&soft, 2000, 1) > 0.0);
    }
}
