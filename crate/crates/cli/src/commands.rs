use std::path::{Path, PathBuf};
use std::time::Instant;

use diffeo_core::ansatz::{read_checkpoint, write_checkpoint};
use diffeo_core::report::{self, cross_sections, det_histogram, loss_table, point_cloud_csv, summary_json, warp_image};
use diffeo_core::synth::{appendix_dataset, read_landmarks, rotated_sphere, translating_disk, twisted_pairs, write_landmarks};
use diffeo_core::trainer::{self, history_csv, parse_history_csv, EpochRecord, TrainObserver};
use diffeo_core::volume::{read_volume, write_volume};
use diffeo_core::{Error, NetParams, Result, TrainData};
use serde_json::json;

use crate::manifest::{RunConfig, RunManifest};
use crate::{Common, SynthKind};

/// Prefixes I/O errors with the offending path.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    at(dir, std::fs::create_dir_all(dir).map_err(Error::from))
}

pub fn synth(kind: SynthKind, n: usize, image_dims: usize, grid_n: usize, common: &Common) -> Result<()> {
    let seed = common.seed.unwrap_or(0);
    let out = &common.out;
    create_dir(out)?;
    let mut manifest = RunManifest::new("synth", Some(seed));
    let landmarks = match kind {
        SynthKind::Twisted => twisted_pairs(),
        SynthKind::Sphere => rotated_sphere(n, seed)?,
        SynthKind::Disk => translating_disk(n, seed)?,
        SynthKind::Appendix => {
            let d = [image_dims; 3];
            let (s, t, lm) = appendix_dataset(d, grid_n)?;
            for (name, v) in [("S.vol", &s), ("T.vol", &t)] {
                let p = out.join(name);
                write_volume(v, &p)?;
                manifest.add_output(&p);
            }
            lm
        }
    };
    let lm_path = out.join("landmarks.csv");
    write_landmarks(&landmarks, &lm_path)?;
    manifest.add_output(&lm_path);
    manifest.options = Some(json!({
        "kind": format!("{kind:?}").to_lowercase(),
        "n": n,
        "image_dims": image_dims,
        "grid_n": grid_n,
        "landmark_pairs": landmarks.len(),
    }));
    manifest.write(out)
}

fn load_config(path: &Path, common: &Common) -> Result<(RunConfig, PathBuf)> {
    let text = at(path, std::fs::read_to_string(path).map_err(Error::from))?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let t = &mut cfg.train;
    if let Some(s) = common.seed {
        t.seed = s;
    }
    if let Some(e) = common.epochs {
        t.epochs = e;
    }
    if let Some(f) = common.formulation {
        t.formulation = f;
    }
    if let Some(b) = common.boundary {
        t.boundary_mode = b;
    }
    for p in [&mut cfg.data.landmarks, &mut cfg.data.source, &mut cfg.data.target]
        .into_iter()
        .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok((cfg, base))
}

fn load_data(cfg: &RunConfig, manifest: &mut RunManifest) -> Result<TrainData> {
    let f = cfg.train.formulation;
    let d = &cfg.data;
    if f.uses_landmarks() && d.landmarks.is_none() {
        return Err(Error::Config(format!("data.landmarks: required by the {f:?} formulation")));
    }
    if f.uses_images() {
        if d.source.is_none() {
            return Err(Error::Config(format!("data.source: required by the {f:?} formulation")));
        }
        if d.target.is_none() {
            return Err(Error::Config(format!("data.target: required by the {f:?} formulation")));
        }
    }
    let mut data = TrainData::default();
    if let Some(p) = &d.landmarks {
        manifest.add_input(p)?;
        data.landmarks = Some(at(p, read_landmarks(p))?);
    }
    if f.uses_images() {
        for (p, slot) in [(&d.source, &mut data.source), (&d.target, &mut data.target)] {
            let p = p.as_ref().unwrap();
            manifest.add_input(p)?;
            *slot = Some(at(p, read_volume(p))?);
        }
    }
    Ok(data)
}

/// Writes the checkpoint at the configured cadence and keeps the history so
/// far, so an aborted run still leaves both behind.
struct RunObserver {
    dir: PathBuf,
    every: usize,
    history: Vec<EpochRecord>,
}

impl RunObserver {
    fn new(dir: &Path, every: usize) -> Self {
        RunObserver {
            dir: dir.to_path_buf(),
            every,
            history: Vec::new(),
        }
    }

    fn flush_history(&self) -> Result<()> {
        std::fs::write(self.dir.join("history.csv"), history_csv(&self.history))?;
        Ok(())
    }
}

impl TrainObserver for RunObserver {
    fn on_epoch(&mut self, params: &NetParams, record: &EpochRecord) -> Result<()> {
        self.history.push(*record);
        if self.every > 0 && record.epoch % self.every == 0 {
            write_checkpoint(params, self.dir.join("checkpoint.bin"))?;
        }
        Ok(())
    }
}

fn finish_run(dir: &Path, outcome: &trainer::TrainOutcome, manifest: &mut RunManifest) -> Result<()> {
    for (name, body) in [
        ("history.csv", history_csv(&outcome.history)),
        ("summary.json", summary_json(&loss_table(&outcome.history)?)? + "\n"),
    ] {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        manifest.add_output(&p);
    }
    let p = dir.join("checkpoint.bin");
    write_checkpoint(&outcome.params, &p)?;
    manifest.add_output(&p);
    Ok(())
}

pub fn train(config: &Path, common: &Common) -> Result<()> {
    let start = Instant::now();
    let (cfg, _) = load_config(config, common)?;
    cfg.train.validate()?;
    let mut manifest = RunManifest::new("train", Some(cfg.train.seed));
    manifest.add_input(config)?;
    let data = load_data(&cfg, &mut manifest)?;
    manifest.config = Some(cfg.clone());
    let out = &common.out;
    create_dir(out)?;

    let mut obs = RunObserver::new(out, cfg.train.checkpoint_every);
    let outcome = match trainer::train_with(&cfg.train, &data, &mut obs) {
        Ok(o) => o,
        Err(e) => {
            obs.flush_history()?;
            return Err(e);
        }
    };
    finish_run(out, &outcome, &mut manifest)?;
    manifest.pool_digest = Some(outcome.pool_digest.clone());
    manifest.timing.wall_ms = start.elapsed().as_millis() as u64;
    manifest.timing.steps_per_epoch = Some(outcome.steps_per_epoch);
    manifest.write(out)
}

pub struct ReportTasks {
    pub hist: Option<usize>,
    pub bins: usize,
    pub slices: Vec<String>,
    pub slice_n: usize,
    pub warp: Option<PathBuf>,
    pub dims: usize,
    pub history: Option<PathBuf>,
}

fn parse_slice(spec: &str) -> Result<(usize, f64)> {
    let bad = || Error::Config(format!("slice `{spec}`: expected axis=level, e.g. x=0.2"));
    let (axis, level) = spec.trim().split_once('=').ok_or_else(bad)?;
    let axis = match axis.trim() {
        "x" => 0,
        "y" => 1,
        "z" => 2,
        _ => return Err(bad()),
    };
    let level: f64 = level.trim().parse().map_err(|_| bad())?;
    Ok((axis, level))
}

pub fn report(checkpoint: &Path, tasks: &ReportTasks, common: &Common) -> Result<()> {
    let start = Instant::now();
    let params = at(checkpoint, read_checkpoint(checkpoint))?;
    let seed = common.seed.unwrap_or(0);
    let out = &common.out;
    create_dir(out)?;
    let mut manifest = RunManifest::new("report", Some(seed));
    manifest.add_input(checkpoint)?;
    let slices = tasks.slices.iter().map(|s| parse_slice(s)).collect::<Result<Vec<_>>>()?;

    let nothing_requested = tasks.hist.is_none() && slices.is_empty() && tasks.warp.is_none() && tasks.history.is_none();
    let hist_n = tasks.hist.or(nothing_requested.then_some(report::DEFAULT_HIST_SAMPLES));
    if let Some(n) = hist_n {
        let h = det_histogram(&params, n, tasks.bins, seed)?;
        let p = out.join("det_histogram.csv");
        std::fs::write(&p, h.to_csv())?;
        manifest.add_output(&p);
        let p = out.join("det_histogram.json");
        std::fs::write(&p, serde_json::to_string_pretty(&h)? + "\n")?;
        manifest.add_output(&p);
    }
    for &(axis, level) in &slices {
        let rows = cross_sections(&params, axis, &[level], tasks.slice_n)?;
        let p = out.join(format!("section_{}_{level}.csv", ["x", "y", "z"][axis]));
        std::fs::write(&p, point_cloud_csv(&rows))?;
        manifest.add_output(&p);
    }
    if let Some(src) = &tasks.warp {
        manifest.add_input(src)?;
        let s = at(src, read_volume(src))?;
        let w = warp_image(&params, &s, [tasks.dims; 3])?;
        let p = out.join("warped.vol");
        write_volume(&w, &p)?;
        manifest.add_output(&p);
    }
    if let Some(hp) = &tasks.history {
        manifest.add_input(hp)?;
        let history = parse_history_csv(&at(hp, std::fs::read_to_string(hp).map_err(Error::from))?)?;
        let p = out.join("summary.json");
        std::fs::write(&p, summary_json(&loss_table(&history)?)? + "\n")?;
        manifest.add_output(&p);
    }
    manifest.options = Some(json!({
        "hist": hist_n,
        "bins": tasks.bins,
        "slices": tasks.slices,
        "slice_n": tasks.slice_n,
        "warp_dims": tasks.warp.as_ref().map(|_| tasks.dims),
    }));
    manifest.timing.wall_ms = start.elapsed().as_millis() as u64;
    manifest.write(out)
}

pub fn ablate(config: &Path, common: &Common) -> Result<()> {
    let start = Instant::now();
    let (cfg, _) = load_config(config, common)?;
    let mut manifest = RunManifest::new("ablate", Some(cfg.train.seed));
    manifest.add_input(config)?;
    let mut probe = cfg.clone();
    probe.train.formulation = diffeo_core::Formulation::Landmark;
    let data = load_data(&probe, &mut manifest)?;
    manifest.config = Some(cfg.clone());
    let out = &common.out;
    create_dir(out)?;

    let mut dirs = Vec::new();
    let report = trainer::ablate_boundary_with(&cfg.train, &data, &mut |label, run_cfg| {
        let dir = out.join(label);
        dirs.push(dir.clone());
        let _ = std::fs::create_dir_all(&dir);
        Box::new(RunObserver::new(&dir, run_cfg.checkpoint_every))
    })?;
    let mut rows = Vec::new();
    for (run, dir) in report.runs.iter().zip(&dirs) {
        let outcome = run.outcome.as_ref().expect("ablation keeps outcomes");
        finish_run(dir, outcome, &mut manifest)?;
        rows.push(json!({
            "label": run.label,
            "boundary_mode": run.boundary_mode,
            "soft_boundary_weight": run.soft_boundary_weight,
            "boundary_error": run.boundary_error,
            "landmark_loss": run.landmark_loss,
            "conformality_loss": run.conformality_loss,
            "final_boundary_loss": run.final_boundary_loss,
            "dir": dir.display().to_string(),
        }));
    }
    let p = out.join("comparison.json");
    let comparison = json!({
        "seed": report.seed,
        "pool_digest": report.runs[0].pool_digest,
        "shared_pool": report.shared_pool(),
        "runs": rows,
    });
    std::fs::write(&p, serde_json::to_string_pretty(&comparison)? + "\n")?;
    manifest.add_output(&p);
    manifest.pool_digest = Some(report.runs[0].pool_digest.clone());
    manifest.timing.wall_ms = start.elapsed().as_millis() as u64;
    manifest.write(out)
}
