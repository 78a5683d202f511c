use std::path::Path;
use std::process::{Command, Output};

fn diffeo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffeo"))
        .args(args)
        .output()
        .expect("spawn diffeo")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{"data": {"landmarks": "lm/landmarks.csv"},
 "train": {"epochs": 2, "n_int": 64, "interior_batch": 32, "width": 6, "blocks": 1}}"#;

#[test]
fn synth_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tw");
    ok(&diffeo(&["synth", "twisted", "--out", p(&out)]));
    assert_eq!(std::fs::read_to_string(out.join("landmarks.csv")).unwrap().lines().count(), 8);

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        ok(&diffeo(&["synth", "sphere", "--n", "200", "--seed", "7", "--out", p(d)]));
    }
    let la = std::fs::read(a.join("landmarks.csv")).unwrap();
    assert_eq!(la, std::fs::read(b.join("landmarks.csv")).unwrap());
    assert_eq!(String::from_utf8(la).unwrap().lines().count(), 200);

    let app = dir.path().join("app");
    ok(&diffeo(&["synth", "appendix", "--image-dims", "16", "--grid-n", "8", "--out", p(&app)]));
    assert_eq!(std::fs::read_to_string(app.join("landmarks.csv")).unwrap().lines().count(), 512);
    let s = diffeo_core::volume::read_volume(app.join("S.vol")).unwrap();
    assert_eq!(s.dims(), [16, 16, 16]);
    assert!(app.join("T.vol").exists());
    assert_eq!(json(&app.join("manifest.json"))["options"]["landmark_pairs"], 512);
}

#[test]
fn train_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    ok(&diffeo(&["synth", "twisted", "--out", p(&dir.path().join("lm"))]));
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    ok(&diffeo(&["train", p(&cfg), "--out", p(&run), "--epochs", "3", "--seed", "5"]));

    let m = json(&run.join("manifest.json"));
    assert_eq!(m["config"]["train"]["epochs"], 3);
    assert_eq!(m["config"]["train"]["seed"], 5);
    assert_eq!(m["config"]["train"]["lr"], 0.001);
    assert_eq!(m["pool_digest"].as_str().unwrap().len(), 64);
    assert_eq!(m["inputs"].as_object().unwrap().len(), 2);
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);

    let rep = dir.path().join("rep");
    let ckpt = run.join("checkpoint.bin");
    let hist = run.join("history.csv");
    let src = dir.path().join("S.vol");
    diffeo_core::volume::write_volume(&diffeo_core::Volume3::constant([4, 4, 4], 0.5).unwrap(), &src).unwrap();
    ok(&diffeo(&[
        "report",
        p(&ckpt),
        "--out",
        p(&rep),
        "--hist",
        "2000",
        "--slices",
        "x=0.2,x=0.8",
        "--slice-n",
        "6",
        "--warp",
        p(&src),
        "--dims",
        "8",
        "--history",
        p(&hist),
    ]));
    let h = std::fs::read_to_string(rep.join("det_histogram.csv")).unwrap();
    let total: usize = h.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 2000);
    for level in ["0.2", "0.8"] {
        let s = std::fs::read_to_string(rep.join(format!("section_x_{level}.csv"))).unwrap();
        assert_eq!(s.lines().count(), 1 + 36);
    }
    let w = diffeo_core::volume::read_volume(rep.join("warped.vol")).unwrap();
    assert_eq!(w.dims(), [8, 8, 8]);
    let summary = json(&rep.join("summary.json"));
    assert_eq!(summary["epoch"], 3);
    assert!(summary["Landmark loss"].is_number());
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");

    std::fs::write(&cfg, r#"{"train": {"epochs": 1}}"#).unwrap();
    let out = diffeo(&["train", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.landmarks"));

    std::fs::write(&cfg, r#"{"train": {"epochs": 0}}"#).unwrap();
    assert_eq!(diffeo(&["train", p(&cfg)]).status.code(), Some(2));

    std::fs::write(&cfg, r#"{"train": {"epoch": 10}}"#).unwrap();
    let out = diffeo(&["train", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));

    let out = diffeo(&["report", p(&dir.path().join("missing.bin"))]);
    assert_eq!(out.status.code(), Some(4));

    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"{\"width\": 4}\n").unwrap();
    assert_eq!(diffeo(&["report", p(&bad)]).status.code(), Some(4));
}

#[test]
fn ablation_layout() {
    let dir = tempfile::tempdir().unwrap();
    ok(&diffeo(&["synth", "twisted", "--out", p(&dir.path().join("lm"))]));
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("abl");
    ok(&diffeo(&["ablate", p(&cfg), "--out", p(&out), "--seed", "3"]));
    let cmp = json(&out.join("comparison.json"));
    assert_eq!(cmp["seed"], 3);
    assert_eq!(cmp["shared_pool"], true);
    let runs = cmp["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    for (run, label) in runs.iter().zip(["soft_alpha7_50", "soft_alpha7_500", "hard"]) {
        assert_eq!(run["label"], label);
        assert!(out.join(label).join("history.csv").exists());
    }
    assert_eq!(runs[2]["boundary_error"], 0.0);
    assert!(runs[0]["final_boundary_loss"].as_f64().unwrap() > 0.0);
    let soft_hist = std::fs::read_to_string(out.join("soft_alpha7_50/history.csv")).unwrap();
    let last = soft_hist.lines().last().unwrap();
    assert!(last.split(',').nth(7).unwrap().parse::<f64>().unwrap() > 0.0);
}
