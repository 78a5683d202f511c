//! Post-training diagnostics and their file formats.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ansatz::{Evaluator, NetParams};
use crate::diffcalc::Point;
use crate::error::{Error, Result};
use crate::sampling::derived_rng;
use crate::trainer::EpochRecord;
use crate::volume::Volume3;

pub const DEFAULT_HIST_SAMPLES: usize = 100_000;
pub const DEFAULT_BINS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetHistogram {
    pub sample_count: usize,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub min_det: f64,
    pub max_det: f64,
    pub negative_fraction: f64,
}

impl DetHistogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// `bin_lo,bin_hi,count` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{:?},{:?},{}", self.bin_edges[k], self.bin_edges[k + 1], c);
        }
        s
    }
}

/// Bins determinants uniformly over `[min, max]`. A degenerate range is
/// widened by ±0.5 so the single value lands in a real bin.
pub fn histogram_from_dets(dets: &[f64], bins: usize) -> Result<DetHistogram> {
    if dets.is_empty() {
        return Err(Error::contract("histogram of zero samples"));
    }
    if bins == 0 {
        return Err(Error::config("histogram needs at least one bin"));
    }
    if let Some(d) = dets.iter().find(|d| !d.is_finite()) {
        return Err(Error::Numeric {
            step: 0,
            term: "det".into(),
            detail: format!("non-finite determinant {d}"),
        });
    }
    let min = dets.iter().copied().fold(f64::INFINITY, f64::min);
    let max = dets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if min < max { (min, max) } else { (min - 0.5, max + 0.5) };
    let width = (hi - lo) / bins as f64;
    let mut bin_edges: Vec<f64> = (0..=bins).map(|k| lo + width * k as f64).collect();
    bin_edges[bins] = hi;
    let mut counts = vec![0usize; bins];
    for &d in dets {
        let k = (((d - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let negative = dets.iter().filter(|&&d| d <= 0.0).count();
    Ok(DetHistogram {
        sample_count: dets.len(),
        bin_edges,
        counts,
        min_det: min,
        max_det: max,
        negative_fraction: negative as f64 / dets.len() as f64,
    })
}

/// Uniform points in the open unit cube for diagnostics.
pub fn uniform_points(n: usize, seed: u64) -> Vec<Point> {
    let mut rng = derived_rng(seed, &[0xd17]);
    (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
}

pub fn sample_dets(params: &NetParams, points: &[Point]) -> Vec<f64> {
    let mut ev = Evaluator::new(params);
    points.iter().map(|&p| ev.eval(p).det).collect()
}

pub fn det_histogram(params: &NetParams, n_samples: usize, bins: usize, seed: u64) -> Result<DetHistogram> {
    if n_samples == 0 {
        return Err(Error::config("n_samples must be >= 1"));
    }
    histogram_from_dets(&sample_dets(params, &uniform_points(n_samples, seed)), bins)
}

/// `tanh(ln 3 / 2 · det)`, which maps det = 1 to 0.5.
pub fn jacobian_color(det: f64) -> f64 {
    (0.5 * 3f64.ln() * det).tanh()
}

/// Resamples `source` through the map: the output voxel at center q holds
/// S(f(q)).
pub fn warp_image(params: &NetParams, source: &Volume3, out_dims: [usize; 3]) -> Result<Volume3> {
    let mut ev = Evaluator::new(params);
    Volume3::from_fn(out_dims, |q| source.sample(ev.map(q).map(|c| c.clamp(0.0, 1.0))))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionRow {
    pub input: Point,
    pub output: Point,
    pub det: f64,
    pub color: f64,
}

pub const POINT_CLOUD_HEADER: &str = "in_x,in_y,in_z,out_x,out_y,out_z,det,color";

/// Maps an `grid_n × grid_n` lattice (spacing 1/(grid_n−1), corners included)
/// on each plane `x[axis] = level`.
pub fn cross_sections(params: &NetParams, axis: usize, levels: &[f64], grid_n: usize) -> Result<Vec<SectionRow>> {
    if axis > 2 {
        return Err(Error::config(format!("axis must be 0, 1 or 2, got {axis}")));
    }
    if grid_n < 2 {
        return Err(Error::config("grid_n must be >= 2"));
    }
    if let Some(l) = levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::config(format!("section level {l} outside [0, 1]")));
    }
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let step = 1.0 / (grid_n - 1) as f64;
    let mut ev = Evaluator::new(params);
    let mut rows = Vec::with_capacity(levels.len() * grid_n * grid_n);
    for &level in levels {
        for j in 0..grid_n {
            for i in 0..grid_n {
                let mut x = [0.0; 3];
                x[axis] = level;
                x[a] = i as f64 * step;
                x[b] = j as f64 * step;
                let m = ev.eval(x);
                rows.push(SectionRow {
                    input: x,
                    output: m.f,
                    det: m.det,
                    color: jacobian_color(m.det),
                });
            }
        }
    }
    Ok(rows)
}

pub fn point_cloud_csv(rows: &[SectionRow]) -> String {
    let mut s = String::from(POINT_CLOUD_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.input[0], r.input[1], r.input[2], r.output[0], r.output[1], r.output[2], r.det, r.color
        );
    }
    s
}

/// Final-epoch values in the layout of the results tables.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTable {
    pub epoch: usize,
    #[serde(rename = "Landmark loss")]
    pub landmark: f64,
    #[serde(rename = "Intensity loss")]
    pub intensity: f64,
    #[serde(rename = "Conformality loss")]
    pub conformality: f64,
    #[serde(rename = "Smoothness loss")]
    pub smoothness: f64,
}

pub fn loss_table(history: &[EpochRecord]) -> Result<LossTable> {
    let last = history
        .last()
        .ok_or_else(|| Error::contract("loss table of an empty history"))?;
    Ok(LossTable {
        epoch: last.epoch,
        landmark: last.loss.landmark,
        intensity: last.loss.intensity,
        conformality: last.loss.conformality,
        smoothness: last.loss.smoothness,
    })
}

pub fn summary_json(table: &LossTable) -> Result<String> {
    Ok(serde_json::to_string_pretty(table)?)
}
