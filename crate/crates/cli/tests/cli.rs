use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wavec2r::checkpoint::{Checkpoint, Section};
use wavec2r::config::RunConfig;
use wavec2r::data::{self, load_archive};
use wavec2r::pipeline::{self, Stage1Model};
use wavec2r::tensor_file::{Dtype, TensorData};

const TINY: &str = "[data]\ncount = 4\nsplit = [0.5, 0.0, 0.5]\n[data.spec]\nheight = 16\nwidth = 16\n\
                    [run]\nstage1_steps = 3\nstage2_steps = 3\nbatch_size = 2\n[diffusion]\nsampler_steps = 4\n";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_wavec2r"))
            .arg("--config")
            .arg(self.path("run.toml"))
            .args(args)
            .env_remove("WAVEC2R_CHECKPOINT_DIR")
            .output()
            .unwrap()
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn archive(&self) -> String {
        let out = self.run(&["make-data", "--out", &self.s("events.wca")]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        self.s("events.wca")
    }

    fn train(&self, stage: &str) {
        let a = self.s("events.wca");
        let out = self.run(&["train", "--stage", stage, "--archive", &a, "--checkpoint-dir", &self.s("ckpt")]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn make_data_recreates_bitwise_and_reports_counts() {
    let ws = Workspace::new();
    let mut bytes = Vec::new();
    for (name, seed) in [("a.wca", "5"), ("b.wca", "5"), ("c.wca", "6")] {
        let out = ws.run(&["make-data", "--out", &ws.s(name), "--count", "3", "--seed", seed]);
        assert!(out.status.success(), "{}", stderr(&out));
        let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
        let count_219 = stdout
            .split_whitespace()
            .find_map(|w| w.strip_prefix("219:"))
            .and_then(|v| v.parse::<u64>().ok())
            .unwrap();
        assert!(count_219 > 0, "{stdout}");
        bytes.push(std::fs::read(ws.path(name)).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_ne!(bytes[0], bytes[2]);
}

#[test]
fn make_data_rejects_an_empty_archive() {
    let ws = Workspace::new();
    let out = ws.run(&["make-data", "--out", &ws.s("x.wca"), "--count", "0"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!ws.path("x.wca").exists());
}

#[test]
fn usage_errors_use_clap_code() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["train", "--stage", "3"]).status.code(), Some(2));
    assert_eq!(ws.run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bad_config_is_a_config_error() {
    let ws = Workspace::new();
    std::fs::write(ws.path("run.toml"), "[model]\nwidths = [8, 16]\nbogus = 1\n").unwrap();
    let out = ws.run(&["make-data", "--out", &ws.s("x.wca")]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn stage2_requires_stage1_checkpoint() {
    let ws = Workspace::new();
    let a = ws.archive();
    let out = ws.run(&["train", "--stage", "2", "--archive", &a, "--checkpoint-dir", &ws.s("ckpt")]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("train --stage 1"), "{}", stderr(&out));
}

#[test]
fn retrieval_outputs() {
    let ws = Workspace::new();
    let a = ws.archive();
    ws.train("1");
    ws.train("2");
    for f in ["stage1.ckpt", "stage1.log.jsonl", "stage1.timing.jsonl", "stage2.ckpt", "stage2.config.toml"] {
        assert!(ws.path("ckpt").join(f).exists(), "{f}");
    }
    let ck = ws.s("ckpt");
    let out = ws.run(&["retrieve", "--coarse-only", "--archive", &a, "--checkpoint-dir", &ck, "--out", &ws.s("coarse")]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = ws.run(&["retrieve", "--archive", &a, "--checkpoint-dir", &ck, "--out", &ws.s("refined")]);
    assert!(out.status.success(), "{}", stderr(&out));

    let ck1 = Checkpoint::load(&ws.path("ckpt").join("stage1.ckpt"), Section::Stage1).unwrap();
    let cfg = RunConfig::from_toml(&ck1.config).unwrap();
    let s1 = Stage1Model::from_checkpoint(&cfg, &ck1).unwrap();
    let records = load_archive(Path::new(&a), None).unwrap();
    for r in &records {
        let direct = pipeline::retrieve(&data::normalize(r).unwrap(), &s1, None, &cfg).unwrap();
        let direct = TensorData::from_raster(&direct, Dtype::F32).to_raster().unwrap();
        let written = TensorData::read(&ws.path("coarse").join(format!("{}.wct", r.id))).unwrap().to_raster().unwrap();
        assert_eq!(written.values(), direct.values());
        let refined = TensorData::read(&ws.path("refined").join(format!("{}.wct", r.id))).unwrap().to_raster().unwrap();
        assert!(refined.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    let out = ws.run(&[
        "retrieve", "--coarse-only", "--archive", &a, "--checkpoint-dir", &ck, "--out", &ws.s("partial"),
        "--ids", &records[0].id, "--ids", "nope",
    ]);
    assert_eq!(out.status.code(), Some(7), "{}", stderr(&out));
    assert!(ws.path("partial").join(format!("{}.wct", records[0].id)).exists());
}

#[test]
fn retrieve_uses_checkpoint_dir_from_env() {
    let ws = Workspace::new();
    let a = ws.archive();
    let out = Command::new(env!("CARGO_BIN_EXE_wavec2r"))
        .args(["retrieve", "--coarse-only", "--archive", &a, "--out", &ws.s("o")])
        .env("WAVEC2R_CHECKPOINT_DIR", ws.path("missing"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("missing"), "{}", stderr(&out));
}

#[test]
fn evaluate_scores_perfect_predictions() {
    let ws = Workspace::new();
    let a = ws.archive();
    std::fs::create_dir(ws.path("pred")).unwrap();
    for r in load_archive(Path::new(&a), None).unwrap() {
        let t = data::normalize(&r).unwrap().target;
        TensorData::from_raster(&t, Dtype::F64).write(&ws.path("pred").join(format!("{}.wct", r.id))).unwrap();
    }
    let out = ws.run(&["evaluate", "--pred", &ws.s("pred"), "--archive", &a, "--out", &ws.s("rep")]);
    assert!(out.status.success(), "{}", stderr(&out));
    let json = std::fs::read_to_string(ws.path("rep").join("report.json")).unwrap();
    let rep = wavec2r::metrics::MetricReport::from_json(&json).unwrap();
    assert_eq!(rep.samples, 4);
    assert_eq!(rep.avg_csi, Some(1.0));
    assert_eq!(rep.avg_hss, Some(1.0));
    assert_eq!(rep.csi_pool4, Some(1.0));
    assert!((rep.ssim - 1.0).abs() < 1e-12);
    assert!(ws.path("rep").join("report.txt").exists());
}

#[test]
fn evaluate_names_the_missing_prediction() {
    let ws = Workspace::new();
    let a = ws.archive();
    std::fs::create_dir(ws.path("pred")).unwrap();
    let id = &load_archive(Path::new(&a), None).unwrap()[0].id.clone();
    let out = ws.run(&["evaluate", "--pred", &ws.s("pred"), "--archive", &a, "--out", &ws.s("rep")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains(id.as_str()), "{}", stderr(&out));
}

#[test]
fn missing_archive_is_an_io_error() {
    let ws = Workspace::new();
    let out = ws.run(&["train", "--stage", "1", "--archive", &ws.s("nowhere.wca"), "--checkpoint-dir", &ws.s("c")]);
    assert_eq!(out.status.code(), Some(5), "{}", stderr(&out));
}

#[test]
fn corrupt_archive_is_reported() {
    let ws = Workspace::new();
    std::fs::write(ws.path("bad.wca"), b"not an archive at all").unwrap();
    let out = ws.run(&["train", "--stage", "1", "--archive", &ws.s("bad.wca"), "--checkpoint-dir", &ws.s("c")]);
    assert_eq!(out.status.code(), Some(6), "{}", stderr(&out));
}

#[test]
fn plot_writes_event_panels() {
    let ws = Workspace::new();
    let a = ws.archive();
    let out = ws.run(&["plot", "--archive", &a, "--out", &ws.s("fig")]);
    assert!(out.status.success(), "{}", stderr(&out));
    let pngs: Vec<_> = std::fs::read_dir(ws.path("fig")).unwrap().collect();
    assert_eq!(pngs.len(), 4);
    for p in pngs {
        let img = image::open(p.unwrap().path()).unwrap();
        assert!(img.width() > 16 && img.height() > 16);
    }
}
