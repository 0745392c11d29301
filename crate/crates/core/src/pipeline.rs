//! End-to-end orchestration shared by the command-line tool and the
//! ablation harness.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Section};
use crate::config::{AlphaMode, DataSource, RunConfig};
use crate::data::{self, EventRecord};
use crate::diffusion::{self, Denoiser, Stage2Example, Stage2Outcome};
use crate::error::{ensure, Result};
use crate::losses::{alpha_from_energy, AlphaBounds, FiblConfig};
use crate::metrics::{self, MetricReport};
use crate::nn::ParamStore;
use crate::raster::{Modality, ObservationStack, Raster};
use crate::wtformer::{self, CoarseEstimate, Stage1Outcome, TrainingPair, Wtformer};

/// Models are trained and run in single precision.
pub const MODEL_DTYPE: DType = DType::F32;

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<EventRecord>,
    pub val: Vec<EventRecord>,
    pub test: Vec<EventRecord>,
}

/// Raw-scale events from the configured source.
pub fn load_events(cfg: &RunConfig) -> Result<Vec<EventRecord>> {
    match cfg.data.source {
        DataSource::Synthetic => data::generate_synthetic(&cfg.data.spec, cfg.data.count),
        DataSource::Archive => {
            let path = cfg.data.archive.as_ref().expect("validated");
            data::load_archive(path, None)
        }
    }
}

/// Normalised train/validation/test splits.
pub fn prepare(cfg: &RunConfig) -> Result<Splits> {
    let events = load_events(cfg)?
        .iter()
        .map(data::normalize)
        .collect::<Result<Vec<_>>>()?;
    let (train, val, test) = data::split(events, cfg.data.split, cfg.data.split_seed)?;
    Ok(Splits { train, val, test })
}

/// The observation stack the models see, honouring the visible-channel toggle.
pub fn model_stack(record: &EventRecord, cfg: &RunConfig) -> Result<ObservationStack> {
    if cfg.model.use_vis {
        Ok(record.inputs.clone())
    } else {
        record.inputs.without(Modality::Vis)
    }
}

/// FIBL weights with α resolved against the training targets in energy mode.
pub fn resolve_fibl(cfg: &RunConfig, train: &[EventRecord]) -> Result<FiblConfig> {
    let base = cfg.fibl_base();
    match cfg.loss.alpha_mode {
        AlphaMode::Fixed => Ok(base),
        AlphaMode::Energy => {
            let targets: Vec<Raster> = train.iter().map(|r| r.target.clone()).collect();
            let est = alpha_from_energy(&targets, base.basis, AlphaBounds::default())?;
            if est.zero_high_energy {
                log::warn!("some training targets have no detail energy; alpha clamped to {}", est.alpha);
            }
            Ok(base.with_alpha(est.alpha))
        }
    }
}

pub struct Stage1Model {
    pub store: ParamStore,
    pub model: Wtformer,
    pub fibl: FiblConfig,
}

impl Stage1Model {
    pub fn init(cfg: &RunConfig, fibl: FiblConfig) -> Result<Self> {
        let store = ParamStore::new(cfg.run.seed, MODEL_DTYPE, true);
        let model = Wtformer::new(&store.root().pp("wtformer"), &cfg.wtformer())?;
        Ok(Self { store, model, fibl })
    }

    pub fn from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let s = Self::init(cfg, cfg.fibl_base())?;
        s.store.load(&ck.params)?;
        Ok(s)
    }

    pub fn checkpoint(&self, cfg: &RunConfig, step: u64) -> Result<Checkpoint> {
        Checkpoint::from_store(Section::Stage1, step, cfg.to_toml(), &self.store)
    }

    pub fn coarse(&self, record: &EventRecord, cfg: &RunConfig) -> Result<CoarseEstimate> {
        wtformer::wtformer_forward(&model_stack(record, cfg)?, &self.model, MODEL_DTYPE)
    }
}

pub fn stage1_pairs(records: &[EventRecord], cfg: &RunConfig) -> Result<Vec<TrainingPair>> {
    records
        .iter()
        .map(|r| {
            Ok(TrainingPair {
                stack: model_stack(r, cfg)?,
                target: r.target.clone(),
            })
        })
        .collect()
}

pub fn train_stage1(cfg: &RunConfig, train: &[EventRecord]) -> Result<(Stage1Model, Stage1Outcome)> {
    let fibl = resolve_fibl(cfg, train)?;
    let s1 = Stage1Model::init(cfg, fibl)?;
    let pairs = stage1_pairs(train, cfg)?;
    let outcome = wtformer::train_stage1(&s1.model, &s1.store, &pairs, &cfg.stage1(fibl))?;
    Ok((s1, outcome))
}

pub struct Stage2Model {
    pub store: ParamStore,
    pub denoiser: Denoiser,
}

impl Stage2Model {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let store = ParamStore::new(cfg.run.seed.wrapping_add(1), MODEL_DTYPE, true);
        let denoiser = Denoiser::new(&store.root().pp("denoiser"), &cfg.denoiser())?;
        Ok(Self { store, denoiser })
    }

    pub fn from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let s = Self::init(cfg)?;
        s.store.load(&ck.params)?;
        Ok(s)
    }

    pub fn checkpoint(&self, cfg: &RunConfig, step: u64) -> Result<Checkpoint> {
        Checkpoint::from_store(Section::Stage2, step, cfg.to_toml(), &self.store)
    }
}

pub fn stage2_examples(records: &[EventRecord], s1: &Stage1Model, cfg: &RunConfig) -> Result<Vec<Stage2Example>> {
    records
        .iter()
        .map(|r| {
            Ok(Stage2Example {
                stack: model_stack(r, cfg)?,
                target: r.target.clone(),
                mu: s1.coarse(r, cfg)?.0,
            })
        })
        .collect()
}

pub fn train_stage2(cfg: &RunConfig, s1: &Stage1Model, train: &[EventRecord]) -> Result<(Stage2Model, Stage2Outcome)> {
    let fibl = resolve_fibl(cfg, train)?;
    let s2 = Stage2Model::init(cfg)?;
    let examples = stage2_examples(train, s1, cfg)?;
    let outcome = diffusion::train_stage2(&s2.denoiser, &s2.store, &examples, &cfg.stage2(fibl))?;
    Ok((s2, outcome))
}

/// Sampling seed of one event, independent of its position in a batch.
pub fn event_seed(run_seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ run_seed
}

/// Retrieval of one event: the refined field, or μ without a Stage-II model.
pub fn retrieve(record: &EventRecord, s1: &Stage1Model, s2: Option<&Stage2Model>, cfg: &RunConfig) -> Result<Raster> {
    let mu = s1.coarse(record, cfg)?;
    match s2 {
        None => Ok(mu.0),
        Some(s2) => diffusion::refine(
            &mu,
            &model_stack(record, cfg)?,
            &s2.denoiser,
            &cfg.diffusion(),
            event_seed(cfg.run.seed, &record.id),
            MODEL_DTYPE,
        ),
    }
}

/// Per-event energy-ratio comparison between refined output and μ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRatioRow {
    pub id: String,
    pub target: f64,
    pub coarse: f64,
    pub refined: f64,
}

impl EnergyRatioRow {
    pub fn refined_closer(&self) -> bool {
        (self.refined - self.target).abs() < (self.coarse - self.target).abs()
    }
}

/// Detail-band share of total energy under one DWT level.
pub fn high_frequency_ratio(r: &Raster, cfg: &RunConfig) -> Result<f64> {
    Ok(crate::wavelet::dwt2_padded(r, cfg.model.basis)?.high_energy_ratio())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoWtf,
    NoVis,
    NoDedr,
    NoHlf,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::NoWtf, Ablation::NoVis, Ablation::NoDedr, Ablation::NoHlf];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoWtf => "no-wtf",
            Ablation::NoVis => "no-vis",
            Ablation::NoDedr => "no-dedr",
            Ablation::NoHlf => "no-hlf",
        }
    }

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoWtf => c.model.use_wtf = false,
            Ablation::NoVis => c.model.use_vis = false,
            Ablation::NoDedr => c.diffusion.enabled = false,
            Ablation::NoHlf => c.diffusion.use_freq_prior = false,
        }
        c
    }
}

pub struct RunOutcome {
    pub report: MetricReport,
    pub stage1: Stage1Outcome,
    pub stage2: Option<Stage2Outcome>,
    pub energy: Vec<EnergyRatioRow>,
    pub predictions: Vec<(String, Raster)>,
}

/// Trains both stages on the train split and scores the test split.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let splits = prepare(cfg)?;
    ensure!(!splits.test.is_empty(), Validation, "the test split is empty");
    let (s1, stage1) = train_stage1(cfg, &splits.train)?;
    let stage2 = if cfg.diffusion.enabled {
        Some(train_stage2(cfg, &s1, &splits.train)?)
    } else {
        None
    };
    let s2 = stage2.as_ref().map(|(m, _)| m);
    let mut predictions = Vec::new();
    let mut energy = Vec::new();
    for r in &splits.test {
        let pred = retrieve(r, &s1, s2, cfg)?;
        if s2.is_some() {
            let mu = s1.coarse(r, cfg)?;
            energy.push(EnergyRatioRow {
                id: r.id.clone(),
                target: high_frequency_ratio(&r.target, cfg)?,
                coarse: high_frequency_ratio(&mu.0, cfg)?,
                refined: high_frequency_ratio(&pred, cfg)?,
            });
        }
        predictions.push((r.id.clone(), pred));
    }
    let preds: Vec<Raster> = predictions.iter().map(|(_, p)| p.clone()).collect();
    let targets: Vec<Raster> = splits.test.iter().map(|r| r.target.clone()).collect();
    Ok(RunOutcome {
        report: metrics::report(&preds, &targets)?,
        stage1,
        stage2: stage2.map(|(_, o)| o),
        energy,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablations_toggle_one_switch_each() {
        let base = RunConfig::default();
        assert_eq!(Ablation::Full.apply(&base), base);
        assert!(!Ablation::NoWtf.apply(&base).model.use_wtf);
        assert_eq!(Ablation::NoVis.apply(&base).input_channels(), 3);
        assert!(!Ablation::NoDedr.apply(&base).diffusion.enabled);
        assert!(!Ablation::NoHlf.apply(&base).diffusion.use_freq_prior);
    }

    #[test]
    fn event_seed_depends_on_id_and_seed() {
        assert_eq!(event_seed(1, "a"), event_seed(1, "a"));
        assert_ne!(event_seed(1, "a"), event_seed(1, "b"));
        assert_ne!(event_seed(1, "a"), event_seed(2, "a"));
    }
}
