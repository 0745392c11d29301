use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use wavec2r::checkpoint::{Checkpoint, Section};
use wavec2r::config::{DataSource, RunConfig};
use wavec2r::data::{self, VIL_THRESHOLDS};
use wavec2r::metrics::{self, MetricReport};
use wavec2r::pipeline::{self, Stage1Model, Stage2Model};
use wavec2r::tensor_file::{Dtype, TensorData};
use wavec2r::{Error, Raster, Result};

use crate::{EvaluateArgs, MakeDataArgs, PlotArgs, RetrieveArgs, TrainArgs};

pub enum Status {
    Complete,
    /// Number of events that failed.
    Partial(usize),
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(&row).expect("log rows serialise");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Timing {
    step: usize,
    wall_seconds: f64,
}

pub fn make_data(mut cfg: RunConfig, args: &MakeDataArgs) -> Result<Status> {
    if let Some(n) = args.count {
        cfg.data.count = n;
    }
    if let Some(s) = args.seed {
        cfg.data.spec.seed = s;
    }
    let records = data::generate_synthetic(&cfg.data.spec, cfg.data.count)?;
    data::write_fixture(&args.out, &records)?;
    let counts = data::threshold_counts(&records);
    println!("wrote {} events to {}", records.len(), args.out.display());
    let stats: Vec<String> = VIL_THRESHOLDS
        .iter()
        .zip(counts)
        .map(|(t, c)| format!("{t:.0}:{c}"))
        .collect();
    println!("pixels at or above threshold: {}", stats.join(" "));
    Ok(Status::Complete)
}

fn checkpoint_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.run.checkpoint_dir.clone())
}

/// Replaces the model section with the one a Stage-I checkpoint was trained with.
fn adopt_stage1(cfg: &mut RunConfig, ck: &Checkpoint) -> Result<()> {
    let trained = RunConfig::from_toml(&ck.config)?;
    cfg.model = trained.model;
    Ok(())
}

pub fn train(mut cfg: RunConfig, args: &TrainArgs) -> Result<Status> {
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(steps) = args.steps {
        match args.stage {
            1 => cfg.run.stage1_steps = steps,
            _ => cfg.run.stage2_steps = steps,
        }
    }
    if let Some(a) = &args.archive {
        cfg.data.source = DataSource::Archive;
        cfg.data.archive = Some(a.clone());
    }
    let dir = checkpoint_dir(&args.checkpoint_dir, &cfg);
    cfg.run.checkpoint_dir = dir.clone();

    let stage1_ck = if args.stage == 2 {
        let path = args.stage1_checkpoint.clone().unwrap_or_else(|| dir.join("stage1.ckpt"));
        let ck = Checkpoint::load(&path, Section::Stage1)?;
        adopt_stage1(&mut cfg, &ck)?;
        Some(ck)
    } else {
        None
    };
    cfg.validate()?;
    let splits = pipeline::prepare(&cfg)?;
    create_dir(&dir)?;

    let tag = if args.stage == 1 { "stage1" } else { "stage2" };
    let (ck, timings, summary) = match stage1_ck {
        None => {
            let (s1, outcome) = pipeline::train_stage1(&cfg, &splits.train)?;
            write_jsonl(&dir.join("stage1.log.jsonl"), &outcome.history)?;
            let last = outcome.history.last().expect("at least one step");
            let summary = format!("final fibl {:.6} fgl {:.6}", last.fibl, last.fgl);
            (s1.checkpoint(&cfg, outcome.history.len() as u64)?, outcome.wall_seconds, summary)
        }
        Some(ck1) => {
            let s1 = Stage1Model::from_checkpoint(&cfg, &ck1)?;
            let (s2, outcome) = pipeline::train_stage2(&cfg, &s1, &splits.train)?;
            write_jsonl(&dir.join("stage2.log.jsonl"), &outcome.history)?;
            let last = outcome.history.last().expect("at least one step");
            let summary = format!("final diff {:.6} wavelet {:.6}", last.diff, last.wavelet);
            (s2.checkpoint(&cfg, outcome.history.len() as u64)?, outcome.wall_seconds, summary)
        }
    };
    ck.save(&dir.join(format!("{tag}.ckpt")))?;
    write_text(&dir.join(format!("{tag}.config.toml")), &cfg.to_toml())?;
    write_jsonl(
        &dir.join(format!("{tag}.timing.jsonl")),
        timings.iter().enumerate().map(|(step, &wall_seconds)| Timing { step, wall_seconds }),
    )?;
    println!("{tag}: {} steps, {summary}; checkpoint in {}", ck.step, dir.display());
    Ok(Status::Complete)
}

/// Model settings come from the checkpoints' config snapshots; the run
/// config only supplies the default checkpoint directory.
pub fn retrieve(base: RunConfig, args: &RetrieveArgs) -> Result<Status> {
    let dir = checkpoint_dir(&args.checkpoint_dir, &base);
    let p1 = args.stage1_checkpoint.clone().unwrap_or_else(|| dir.join("stage1.ckpt"));
    let ck1 = Checkpoint::load(&p1, Section::Stage1)?;
    let ck2 = if args.coarse_only {
        None
    } else {
        let p2 = args.stage2_checkpoint.clone().unwrap_or_else(|| dir.join("stage2.ckpt"));
        Some(Checkpoint::load(&p2, Section::Stage2)?)
    };
    let mut cfg = RunConfig::from_toml(&ck2.as_ref().unwrap_or(&ck1).config)?;
    adopt_stage1(&mut cfg, &ck1)?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(steps) = args.sampler_steps {
        cfg.diffusion.sampler_steps = steps;
    }
    cfg.validate()?;
    let s1 = Stage1Model::from_checkpoint(&cfg, &ck1)?;
    let s2 = ck2.as_ref().map(|ck| Stage2Model::from_checkpoint(&cfg, ck)).transpose()?;

    let mut events = data::archive::load_each(&args.archive)?;
    let mut failures = 0;
    if !args.ids.is_empty() {
        for id in &args.ids {
            if !events.iter().any(|(e, _)| e == id) {
                log::error!("event `{id}` not found in {}", args.archive.display());
                failures += 1;
            }
        }
        events.retain(|(id, _)| args.ids.contains(id));
    }
    create_dir(&args.out)?;
    write_text(&args.out.join("retrieve.config.toml"), &cfg.to_toml())?;
    for (id, record) in events {
        let result = record
            .and_then(|r| data::normalize(&r))
            .and_then(|r| pipeline::retrieve(&r, &s1, s2.as_ref(), &cfg));
        match result {
            Ok(pred) => TensorData::from_raster(&pred, Dtype::F32).write(&args.out.join(format!("{id}.wct")))?,
            Err(e) => {
                log::error!("event `{id}`: {e}");
                failures += 1;
            }
        }
    }
    Ok(if failures == 0 { Status::Complete } else { Status::Partial(failures) })
}

pub fn read_prediction(dir: &Path, id: &str) -> Result<Raster> {
    let path = dir.join(format!("{id}.wct"));
    if !path.exists() {
        return Err(Error::Validation(format!(
            "no prediction for event `{id}` (expected {})",
            path.display()
        )));
    }
    TensorData::read(&path)?.to_raster()
}

pub fn evaluate(args: &EvaluateArgs) -> Result<Status> {
    let ids = (!args.ids.is_empty()).then_some(args.ids.as_slice());
    let records = data::load_archive(&args.archive, ids)?;
    let mut preds = Vec::with_capacity(records.len());
    let mut targets = Vec::with_capacity(records.len());
    for r in &records {
        preds.push(read_prediction(&args.pred, &r.id)?);
        targets.push(data::normalize(r)?.target);
    }
    let report: MetricReport = metrics::report(&preds, &targets)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("report.txt"), &report.to_text())?;
    write_text(&args.out.join("report.json"), &report.to_json())?;
    print!("{}", report.to_text());
    Ok(Status::Complete)
}

pub fn plot(args: &PlotArgs) -> Result<Status> {
    let mut wrote = false;
    if let Some(path) = &args.report {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report = MetricReport::from_json(&text)?;
        create_dir(&args.out)?;
        crate::plot::save(&crate::plot::score_chart(&report), &args.out.join("scores.png"))?;
        wrote = true;
    }
    if let Some(archive) = &args.archive {
        let ids = (!args.ids.is_empty()).then_some(args.ids.as_slice());
        let records = data::load_archive(archive, ids)?;
        create_dir(&args.out)?;
        for r in &records {
            let load = |dir: &Option<PathBuf>| -> Result<Option<Raster>> {
                dir.as_ref()
                    .map(|d| TensorData::read(&d.join(format!("{}.wct", r.id)))?.to_raster())
                    .transpose()
            };
            let panel = crate::plot::event_panel(r, load(&args.coarse)?.as_ref(), load(&args.pred)?.as_ref())?;
            crate::plot::save(&panel, &args.out.join(format!("{}.png", r.id)))?;
        }
        wrote = true;
    }
    if !wrote {
        return Err(Error::Validation("plot needs --report or --archive".into()));
    }
    Ok(Status::Complete)
}
