//! Stage II: conditional denoising diffusion that refines the coarse
//! estimate.
//!
//! Diffusion runs in pixel space over the normalised radar field (or over
//! the residual `y − μ` in residual mode). The denoiser sees
//! `[z_t, μ, X]` concatenated at full resolution and the wavelet frequency
//! priors added at half resolution.

use std::time::Instant;

use candle_core::{DType, Device, Module, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::losses::{self, FiblConfig};
use crate::nn::{self, Conv2d, ConvSpec, GroupNorm, Linear, ParamStore, Scope, Trainer};
use crate::raster::{ObservationStack, Raster};
use crate::wavelet::tensor::dwt2;
use crate::wtformer::{raster_tensor, stack_tensor, tensor_raster, CoarseEstimate, ResBlock2d, Upsample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

/// β and ᾱ tables indexed by step `t ∈ [1, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// Training-time step each entry corresponds to; the identity unless
    /// the schedule was respaced.
    source_steps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        ensure!(steps >= 2, Validation, "a schedule needs at least 2 steps");
        ensure!(
            0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0,
            Validation,
            "need 0 < beta_start <= beta_end < 1"
        );
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        Ok(Self::from_betas(ScheduleKind::Linear, beta))
    }

    pub fn cosine(steps: usize) -> Result<Self> {
        ensure!(steps >= 2, Validation, "a schedule needs at least 2 steps");
        let s = 0.008;
        let f = |t: f64| (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let beta = (1..=steps)
            .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, 0.999))
            .collect();
        Ok(Self::from_betas(ScheduleKind::Cosine, beta))
    }

    fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let source_steps = (1..=beta.len()).collect();
        Self {
            kind,
            beta,
            alpha_bar,
            source_steps,
        }
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        match cfg.schedule {
            ScheduleKind::Linear => Self::linear(cfg.train_steps, cfg.beta_start, cfg.beta_end),
            ScheduleKind::Cosine => Self::cosine(cfg.train_steps),
        }
    }

    /// Strided sub-schedule of `steps` evenly spaced steps including 1 and T.
    pub fn respaced(&self, steps: usize) -> Result<Self> {
        let t = self.steps();
        ensure!(
            (2..=t).contains(&steps),
            Validation,
            "sampler steps must lie in [2, {t}], got {steps}"
        );
        let picked: Vec<usize> = (0..steps)
            .map(|i| 1 + ((i * (t - 1)) as f64 / (steps - 1) as f64).round() as usize)
            .collect();
        let alpha_bar: Vec<f64> = picked.iter().map(|&s| self.alpha_bar(s)).collect();
        let beta = alpha_bar
            .iter()
            .enumerate()
            .map(|(i, &a)| 1.0 - a / if i == 0 { 1.0 } else { alpha_bar[i - 1] })
            .collect();
        Ok(Self {
            kind: self.kind,
            beta,
            alpha_bar,
            source_steps: picked.iter().map(|&s| self.source_steps[s - 1]).collect(),
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn source_step(&self, t: usize) -> usize {
        self.source_steps[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.steps()).contains(&t),
            Validation,
            "step {t} outside [1, {}]",
            self.steps()
        );
        Ok(())
    }

    /// Posterior variance β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// `z_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Raster, t: usize, eps: &Raster, schedule: &NoiseSchedule) -> Result<Raster> {
    schedule.check_step(t)?;
    let a = schedule.alpha_bar(t);
    x0.zip_map(eps, |x, e| a.sqrt() * x + (1.0 - a).sqrt() * e)
}

fn q_sample_tensor(x0: &Tensor, eps: &Tensor, alpha_bar: &[f64]) -> Result<Tensor> {
    let (b, _, _, _) = x0.dims4()?;
    let dev = x0.device();
    let sa: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
    let sb: Vec<f64> = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
    let sa = Tensor::from_vec(sa, (b, 1, 1, 1), dev)?.to_dtype(x0.dtype())?;
    let sb = Tensor::from_vec(sb, (b, 1, 1, 1), dev)?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&sa)? + eps.broadcast_mul(&sb)?)?)
}

pub fn normal_tensor(shape: &[usize], rng: &mut impl Rng, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Observation channels in X.
    pub in_channels: usize,
    /// Full- and half-resolution widths.
    pub widths: [usize; 2],
    /// Output width of each frequency branch.
    pub feature_width: usize,
    pub time_dim: usize,
    /// Inject the wavelet frequency priors.
    pub use_freq_prior: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            widths: [32, 64],
            feature_width: 16,
            time_dim: 64,
            use_freq_prior: true,
        }
    }
}

/// `Conv1×1 → GELU → DWConv3×3 → Conv1×1`.
#[derive(Debug, Clone)]
struct FreqBranch {
    expand: Conv2d,
    depthwise: Conv2d,
    project: Conv2d,
}

impl FreqBranch {
    fn new(vb: &Scope, in_ch: usize, width: usize) -> Result<Self> {
        Ok(Self {
            expand: Conv2d::new(&vb.pp("expand"), ConvSpec::new(in_ch, width, 1))?,
            depthwise: Conv2d::new(&vb.pp("depthwise"), ConvSpec::depthwise(width, 3))?,
            project: Conv2d::new(&vb.pp("project"), ConvSpec::new(width, width, 1))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = nn::gelu(&self.expand.forward(x)?)?;
        Ok(self.project.forward(&self.depthwise.forward(&h)?)?)
    }
}

/// Wavelet frequency-prior extractor producing half-resolution
/// `(f_lf, f_hf)` from the observation stack.
#[derive(Debug, Clone)]
pub struct FreqExtractor {
    low: FreqBranch,
    high: FreqBranch,
}

impl FreqExtractor {
    pub fn new(vb: &Scope, in_channels: usize, width: usize) -> Result<Self> {
        Ok(Self {
            low: FreqBranch::new(&vb.pp("low"), in_channels, width)?,
            high: FreqBranch::new(&vb.pp("high"), in_channels, width)?,
        })
    }

    /// Pre-activation inputs `(ll, lh + hl + hh)` of the two branches.
    pub fn band_inputs(stack: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = stack.dims4()?;
        ensure!(h % 2 == 0 && w % 2 == 0, Validation, "frequency extractor needs even dimensions, got {h}x{w}");
        let bands = dwt2(stack)?;
        let high = bands.aggregate_high()?;
        Ok((bands.ll, high))
    }

    pub fn forward(&self, stack: &Tensor) -> Result<(Tensor, Tensor)> {
        let (ll, high) = Self::band_inputs(stack)?;
        Ok((self.low.forward(&ll)?, self.high.forward(&high)?))
    }
}

/// `freq_feature_extract` on a single observation stack.
pub fn freq_feature_extract(stack: &ObservationStack, extractor: &FreqExtractor, dtype: DType) -> Result<(Tensor, Tensor)> {
    extractor.forward(&stack_tensor(stack, dtype, &Device::Cpu)?)
}

/// The conditioning bundle `C = [μ, X, F̃_LF, F̃_HF]` as batched tensors.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub mu: Tensor,
    pub stack: Tensor,
    pub f_lf: Option<Tensor>,
    pub f_hf: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    extractor: Option<FreqExtractor>,
    time1: Linear,
    time2: Linear,
    stem: Conv2d,
    enc: ResBlock2d,
    down: ResBlock2d,
    inject_lf: Option<Conv2d>,
    inject_hf: Option<Conv2d>,
    mid: ResBlock2d,
    up: Upsample,
    dec: ResBlock2d,
    head_norm: GroupNorm,
    head: Conv2d,
}

impl Denoiser {
    pub fn new(vb: &Scope, cfg: &DenoiserConfig) -> Result<Self> {
        let [c0, c1] = cfg.widths;
        let (td, f) = (cfg.time_dim, cfg.feature_width);
        ensure!(
            cfg.in_channels > 0 && c0 > 0 && c1 > 0 && td >= 2 && f > 0,
            Config,
            "denoiser widths must be positive"
        );
        let prior = cfg.use_freq_prior;
        Ok(Self {
            cfg: cfg.clone(),
            extractor: prior
                .then(|| FreqExtractor::new(&vb.pp("freq"), cfg.in_channels, f))
                .transpose()?,
            time1: Linear::new(&vb.pp("time1"), td, td)?,
            time2: Linear::new(&vb.pp("time2"), td, td)?,
            stem: Conv2d::new(&vb.pp("stem"), ConvSpec::new(cfg.in_channels + 2, c0, 3))?,
            enc: ResBlock2d::new(&vb.pp("enc"), c0, c0, 1, Some(td))?,
            down: ResBlock2d::new(&vb.pp("down"), c0, c1, 2, Some(td))?,
            inject_lf: prior
                .then(|| Conv2d::new(&vb.pp("inject_lf"), ConvSpec::new(f, c1, 1)))
                .transpose()?,
            inject_hf: prior
                .then(|| Conv2d::new(&vb.pp("inject_hf"), ConvSpec::new(f, c1, 1)))
                .transpose()?,
            mid: ResBlock2d::new(&vb.pp("mid"), c1, c1, 1, Some(td))?,
            up: Upsample::new(&vb.pp("up"), c1, c0)?,
            dec: ResBlock2d::new(&vb.pp("dec"), 2 * c0, c0, 1, Some(td))?,
            head_norm: GroupNorm::new(&vb.pp("head_norm"), c0)?,
            head: Conv2d::new(&vb.pp("head"), ConvSpec::new(c0, 1, 3))?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Builds the bundle for batched `μ (B,1,H,W)` and `X (B,C,H,W)`.
    pub fn condition(&self, mu: &Tensor, stack: &Tensor) -> Result<ConditioningBundle> {
        let c = stack.dims4()?.1;
        ensure!(
            c == self.cfg.in_channels,
            Validation,
            "denoiser expects {} observation channels, got {c}",
            self.cfg.in_channels
        );
        let (f_lf, f_hf) = match &self.extractor {
            Some(e) => {
                let (l, h) = e.forward(stack)?;
                (Some(l), Some(h))
            }
            None => (None, None),
        };
        Ok(ConditioningBundle {
            mu: mu.clone(),
            stack: stack.clone(),
            f_lf,
            f_hf,
        })
    }

    /// ε̂ for `z_t (B,1,H,W)` at training-time steps `t` (one per batch item).
    pub fn forward(&self, z: &Tensor, cond: &ConditioningBundle, t: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = z.dims4()?;
        ensure!(c == 1, Validation, "z_t must have one channel, got {c}");
        ensure!(t.len() == b, Validation, "{} steps for a batch of {b}", t.len());
        ensure!(h % 2 == 0 && w % 2 == 0, Validation, "denoiser needs even dimensions, got {h}x{w}");
        ensure!(
            cond.mu.dims() == z.dims(),
            Validation,
            "μ {:?} does not match z_t {:?}",
            cond.mu.dims(),
            z.dims()
        );
        let (sb, sc, sh, sw) = cond.stack.dims4()?;
        ensure!(
            sb == b && sc == self.cfg.in_channels && (sh, sw) == (h, w),
            Validation,
            "observation stack {:?} does not match z_t {:?} with {} channels",
            cond.stack.dims(),
            z.dims(),
            self.cfg.in_channels
        );
        let temb = nn::timestep_embedding(t, self.cfg.time_dim, z.dtype(), z.device())?;
        let temb = self.time2.forward(&nn::gelu(&self.time1.forward(&temb)?)?)?;

        let x = Tensor::cat(&[z, &cond.mu, &cond.stack], 1)?;
        let s = self.enc.forward(&self.stem.forward(&x)?, Some(&temb))?;
        let mut d = self.down.forward(&s, Some(&temb))?;
        if let (Some(il), Some(ih)) = (&self.inject_lf, &self.inject_hf) {
            let (Some(fl), Some(fh)) = (&cond.f_lf, &cond.f_hf) else {
                return Err(Error::Validation("conditioning bundle lacks frequency priors".into()));
            };
            d = ((d + il.forward(fl)?)? + ih.forward(fh)?)?;
        }
        let m = self.mid.forward(&d, Some(&temb))?;
        let u = Tensor::cat(&[&self.up.forward(&m)?, &s], 1)?;
        let o = self.dec.forward(&u, Some(&temb))?;
        Ok(self.head.forward(&nn::gelu(&self.head_norm.forward(&o)?)?)?)
    }
}

/// Anything that predicts ε̂ from `z_t` at a sampler step.
pub trait EpsPredictor {
    /// `t` is the sampler step, `source_t` the training-time step it maps to.
    fn predict_eps(&self, z: &Tensor, t: usize, source_t: usize) -> Result<Tensor>;
}

/// A denoiser bound to one conditioning bundle.
pub struct Conditioned<'a> {
    pub denoiser: &'a Denoiser,
    pub cond: &'a ConditioningBundle,
}

impl EpsPredictor for Conditioned<'_> {
    fn predict_eps(&self, z: &Tensor, _t: usize, source_t: usize) -> Result<Tensor> {
        let b = z.dims()[0];
        self.denoiser.forward(z, self.cond, &vec![source_t; b])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// Posterior-mean step plus posterior-variance noise.
    #[default]
    Ancestral,
    /// Deterministic η = 0 update.
    Ddim,
}

#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub z: Tensor,
    pub t: usize,
}

/// Range x̂0 is clamped to for the wavelet term during training.
pub const X0_CLAMP: (f64, f64) = (-1.0, 2.0);

/// Valid range of the diffused field in pixel space.
pub const PIXEL_RANGE: (f64, f64) = (0.0, 1.0);
/// Valid range of the diffused field in residual mode.
pub const RESIDUAL_RANGE: (f64, f64) = (-1.0, 1.0);

fn x0_from_eps(z: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    Ok(((z - (eps * (1.0 - alpha_bar).sqrt())?)? / alpha_bar.sqrt())?)
}

/// One reverse step `t → t−1`, with x̂0 clipped to `x0_range`. No noise is
/// added at `t = 1`.
pub fn p_sample_step(
    state: DiffusionState,
    model: &dyn EpsPredictor,
    schedule: &NoiseSchedule,
    sampler: Sampler,
    x0_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<DiffusionState> {
    let t = state.t;
    ensure!(t >= 1, Validation, "cannot step below t = 0");
    schedule.check_step(t)?;
    let eps = model.predict_eps(&state.z, t, schedule.source_step(t))?;
    let (a, a_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
    let x0 = x0_from_eps(&state.z, &eps, a)?.clamp(x0_range.0, x0_range.1)?;
    let z = match sampler {
        Sampler::Ancestral => {
            let beta = schedule.beta(t);
            let c0 = a_prev.sqrt() * beta / (1.0 - a);
            let ct = (1.0 - beta).sqrt() * (1.0 - a_prev) / (1.0 - a);
            let mean = ((&x0 * c0)? + (&state.z * ct)?)?;
            if t > 1 {
                let noise = normal_tensor(state.z.dims(), rng, state.z.dtype())?;
                (mean + (noise * schedule.posterior_variance(t).sqrt())?)?
            } else {
                mean
            }
        }
        Sampler::Ddim => {
            let eps = ((&state.z - (&x0 * a.sqrt())?)? / (1.0 - a).sqrt())?;
            ((&x0 * a_prev.sqrt())? + (eps * (1.0 - a_prev).sqrt())?)?
        }
    };
    Ok(DiffusionState { z, t: t - 1 })
}

/// Full reverse chain from `z_T` down to `z_0`.
pub fn sample_chain(
    z_t: Tensor,
    model: &dyn EpsPredictor,
    schedule: &NoiseSchedule,
    sampler: Sampler,
    x0_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut state = DiffusionState { z: z_t, t: schedule.steps() };
    while state.t > 0 {
        state = p_sample_step(state, model, schedule, sampler, x0_range, rng)?;
    }
    Ok(state.z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub train_steps: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampler_steps: usize,
    pub sampler: Sampler,
    /// Diffuse `y − μ` instead of `y`.
    pub residual: bool,
}

impl DiffusionConfig {
    /// Range the sampler clips x̂0 to.
    pub fn x0_range(&self) -> (f64, f64) {
        if self.residual { RESIDUAL_RANGE } else { PIXEL_RANGE }
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            schedule: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.02,
            sampler_steps: 50,
            sampler: Sampler::Ancestral,
            residual: false,
        }
    }
}

/// Stage-II inference: samples ŷ given μ and X, clamped to `[0, 1]`.
pub fn refine(
    mu: &CoarseEstimate,
    stack: &ObservationStack,
    denoiser: &Denoiser,
    cfg: &DiffusionConfig,
    seed: u64,
    dtype: DType,
) -> Result<Raster> {
    ensure!(mu.raster().shape() == stack.shape(), Validation, "μ and stack differ in shape");
    let device = Device::Cpu;
    let mu_t = raster_tensor(mu.raster(), dtype, &device)?;
    let cond = denoiser.condition(&mu_t, &stack_tensor(stack, dtype, &device)?)?;
    let schedule = NoiseSchedule::from_config(cfg)?.respaced(cfg.sampler_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_t = normal_tensor(mu_t.dims(), &mut rng, dtype)?;
    let model = Conditioned { denoiser, cond: &cond };
    let mut z0 = sample_chain(z_t, &model, &schedule, cfg.sampler, cfg.x0_range(), &mut rng)?;
    if cfg.residual {
        z0 = (z0 + &mu_t)?;
    }
    tensor_raster(&z0.clamp(0.0, 1.0)?)
}

/// One Stage-II example: inputs, target and the frozen Stage-I estimate.
#[derive(Debug, Clone)]
pub struct Stage2Example {
    pub stack: ObservationStack,
    pub target: Raster,
    pub mu: Raster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub lambda_freq: f64,
    pub fibl: FiblConfig,
    pub diffusion: DiffusionConfig,
    /// Build the x̂0 branch and its wavelet term; off gives pure denoising.
    pub wavelet_term: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            learning_rate: 1e-3,
            grad_clip: 1.0,
            seed: 0,
            lambda_freq: 0.1,
            fibl: FiblConfig::default(),
            diffusion: DiffusionConfig::default(),
            wavelet_term: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Record {
    pub step: usize,
    pub loss: f64,
    pub diff: f64,
    pub wavelet: f64,
    pub grad_norm: f64,
    pub timesteps: Vec<usize>,
}

pub struct Stage2Outcome {
    pub history: Vec<Stage2Record>,
    pub wall_seconds: Vec<f64>,
}

/// Uniform draws from `[1, T]`.
pub struct TimestepSampler {
    rng: ChaCha8Rng,
    steps: usize,
}

impl TimestepSampler {
    pub fn new(steps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self { rng, steps }
    }

    pub fn draw(&mut self) -> usize {
        self.rng.random_range(1..=self.steps)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Trains the denoiser in place on `L_Diff + λ·FIBL(x̂0, y)`.
pub fn train_stage2(
    denoiser: &Denoiser,
    store: &ParamStore,
    data: &[Stage2Example],
    cfg: &Stage2Config,
) -> Result<Stage2Outcome> {
    ensure!(!data.is_empty(), Validation, "stage-2 training needs a non-empty dataset");
    ensure!(cfg.steps > 0 && cfg.batch_size > 0, Validation, "steps and batch size must be positive");
    ensure!(cfg.lambda_freq >= 0.0, Validation, "lambda_freq must be non-negative");
    cfg.fibl.validate()?;
    let schedule = NoiseSchedule::from_config(&cfg.diffusion)?;
    let dtype = store.dtype();
    let device = Device::Cpu;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draws = TimestepSampler::new(schedule.steps(), cfg.seed);
    let mut trainer = Trainer::new(store, cfg.learning_rate, cfg.grad_clip)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut wall_seconds = Vec::with_capacity(cfg.steps);
    let start = Instant::now();

    for step in 0..cfg.steps {
        let bs = cfg.batch_size.min(data.len());
        if cursor + bs > order.len() {
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let batch: Vec<&Stage2Example> = order[cursor..cursor + bs].iter().map(|&i| &data[i]).collect();
        cursor += bs;
        let cat = |f: &dyn Fn(&Stage2Example) -> Result<Tensor>| -> Result<Tensor> {
            let ts: Vec<Tensor> = batch.iter().map(|e| f(e)).collect::<Result<_>>()?;
            Ok(Tensor::cat(&ts, 0)?)
        };
        let x = cat(&|e| stack_tensor(&e.stack, dtype, &device))?;
        let y = cat(&|e| raster_tensor(&e.target, dtype, &device))?;
        let mu = cat(&|e| raster_tensor(&e.mu, dtype, &device))?;
        let x0 = if cfg.diffusion.residual { (&y - &mu)? } else { y.clone() };

        let ts: Vec<usize> = (0..bs).map(|_| draws.draw()).collect();
        let eps = normal_tensor(x0.dims(), draws.rng(), dtype)?;
        let abar: Vec<f64> = ts.iter().map(|&t| schedule.alpha_bar(t)).collect();
        let z = q_sample_tensor(&x0, &eps, &abar)?;

        let cond = denoiser.condition(&mu, &x)?;
        let eps_hat = denoiser.forward(&z, &cond, &ts)?;
        let (loss, diff, wavelet) = if cfg.wavelet_term {
            let (b, _, _, _) = z.dims4()?;
            let sa = Tensor::from_vec(abar.iter().map(|a| a.sqrt()).collect::<Vec<_>>(), (b, 1, 1, 1), &device)?.to_dtype(dtype)?;
            let sb = Tensor::from_vec(abar.iter().map(|a| (1.0 - a).sqrt()).collect::<Vec<_>>(), (b, 1, 1, 1), &device)?.to_dtype(dtype)?;
            let x0_hat = (&z - eps_hat.broadcast_mul(&sb)?)?.broadcast_div(&sa)?.clamp(X0_CLAMP.0, X0_CLAMP.1)?;
            let refined = if cfg.diffusion.residual { (x0_hat + &mu)? } else { x0_hat };
            let parts = losses::tensor::stage2_loss(&eps_hat, &eps, &refined, &y, cfg.lambda_freq, &cfg.fibl)?;
            (parts.total, scalar(&parts.diff)?, scalar(&parts.wavelet)?)
        } else {
            let d = (&eps_hat - &eps)?.sqr()?.mean_all()?;
            let v = scalar(&d)?;
            (d, v, 0.0)
        };
        let loss_value = scalar(&loss)?;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("stage-2 loss is {loss_value} (diff {diff}, wavelet {wavelet}, t {ts:?})"),
            });
        }
        let grad_norm = trainer.step(&loss)?;
        history.push(Stage2Record {
            step,
            loss: loss_value,
            diff,
            wavelet,
            grad_norm,
            timesteps: ts,
        });
        wall_seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(Stage2Outcome { history, wall_seconds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{random_raster, random_values, relative_error, tensor_central_difference};

    #[test]
    fn schedules_are_monotone() {
        for s in [NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(), NoiseSchedule::cosine(1000).unwrap()] {
            assert!((1..s.steps()).all(|t| s.alpha_bar(t + 1) < s.alpha_bar(t)));
            assert!(s.alpha_bar(1) > 0.97);
            assert!(s.alpha_bar(s.steps()) < 1e-3);
            let r = s.respaced(50).unwrap();
            assert_eq!(r.steps(), 50);
            assert_eq!((r.source_step(1), r.source_step(50)), (1, 1000));
            assert_eq!(r.alpha_bar(50), s.alpha_bar(1000));
            assert!((1..50).all(|t| r.alpha_bar(t + 1) < r.alpha_bar(t)));
        }
        assert!(NoiseSchedule::linear(10, 0.5, 0.1).is_err());
    }

    #[test]
    fn q_sample_closed_form() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x0 = random_raster(4, 4, 1);
        let eps = Raster::filled(4, 4, 1.0);
        let z = q_sample(&x0, 3, &eps, &s).unwrap();
        let a = s.alpha_bar(3);
        for (zi, xi) in z.values().iter().zip(x0.values()) {
            assert_eq!(*zi, a.sqrt() * xi + (1.0 - a).sqrt());
        }
        assert!(q_sample(&x0, 0, &eps, &s).is_err());
        assert!(q_sample(&x0, 11, &eps, &s).is_err());

        let half = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.5, 0.5]);
        let z = q_sample(&Raster::zeros(4, 4), 1, &eps, &half).unwrap();
        assert!(z.values().iter().all(|v| (v - 0.5f64.sqrt()).abs() < 1e-15));
    }

    #[test]
    fn forward_terminal_moments() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(1000) <= 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Raster::filled(100, 100, 1.0);
        let eps = Raster::generic(100, 100, (0..10_000).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let z = q_sample(&x0, 1000, &eps, &s).unwrap();
        let mean = z.mean();
        let var = z.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10_000.0;
        assert!(mean.abs() <= 0.05 && (var - 1.0).abs() <= 0.05, "mean {mean} var {var}");
    }

    struct Oracle {
        x0: Tensor,
        schedule: NoiseSchedule,
    }

    impl EpsPredictor for Oracle {
        fn predict_eps(&self, z: &Tensor, t: usize, _source_t: usize) -> Result<Tensor> {
            let a = self.schedule.alpha_bar(t);
            Ok(((z - (&self.x0 * a.sqrt())?)? / (1.0 - a).sqrt())?)
        }
    }

    #[test]
    fn oracle_reverse_chain_recovers_x0() {
        let x0 = Tensor::from_vec(random_values(64, 4), (1, 1, 8, 8), &Device::Cpu).unwrap();
        for schedule in [
            NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(),
            NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap().respaced(50).unwrap(),
        ] {
            for sampler in [Sampler::Ancestral, Sampler::Ddim] {
                let oracle = Oracle { x0: x0.clone(), schedule: schedule.clone() };
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let z_t = normal_tensor(&[1, 1, 8, 8], &mut rng, DType::F64).unwrap();
                let out = sample_chain(z_t, &oracle, &schedule, sampler, RESIDUAL_RANGE, &mut rng).unwrap();
                let mse = (out - &x0).unwrap().sqr().unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(mse <= 1e-3, "mse {mse}");
            }
        }
    }

    #[test]
    fn last_step_is_deterministic_and_t0_rejected() {
        let schedule = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x0 = Tensor::zeros((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let oracle = Oracle { x0, schedule: schedule.clone() };
        let z = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            p_sample_step(DiffusionState { z: z.clone(), t: 1 }, &oracle, &schedule, Sampler::Ancestral, RESIDUAL_RANGE, &mut rng)
                .unwrap()
                .z
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()
        };
        assert_eq!(run(1), run(2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(p_sample_step(DiffusionState { z, t: 0 }, &oracle, &schedule, Sampler::Ancestral, RESIDUAL_RANGE, &mut rng).is_err());
    }

    #[test]
    fn extractor_shapes_constant_input_and_gradient() {
        let store = ParamStore::new(2, DType::F64, false);
        let ex = FreqExtractor::new(&store.root().pp("f"), 4, 6).unwrap();
        let x = Tensor::from_vec(random_values(4 * 16 * 12, 1), (1, 4, 16, 12), &Device::Cpu).unwrap();
        let (lf, hf) = ex.forward(&x).unwrap();
        assert_eq!(lf.dims(), &[1, 6, 8, 6]);
        assert_eq!(hf.dims(), &[1, 6, 8, 6]);

        let c = Tensor::full(0.7f64, (1, 4, 8, 8), &Device::Cpu).unwrap();
        let (_, high) = FreqExtractor::band_inputs(&c).unwrap();
        assert_eq!(high.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let zero = Tensor::zeros((1, 4, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let (_, hf_c) = ex.forward(&c).unwrap();
        let bias_only = ex.high.forward(&zero).unwrap();
        let d = (hf_c - bias_only).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);

        assert!(ex.forward(&Tensor::zeros((1, 4, 5, 4), DType::F64, &Device::Cpu).unwrap()).is_err());

        let small = Tensor::from_vec(random_values(2 * 16, 3), (1, 2, 4, 4), &Device::Cpu).unwrap();
        let store = ParamStore::new(4, DType::F64, false);
        let ex = FreqExtractor::new(&store.root().pp("f"), 2, 3).unwrap();
        let f = |t: &Tensor| -> candle_core::Result<Tensor> {
            let (l, h) = ex.forward(t).map_err(candle_core::Error::wrap)?;
            l.sqr()?.sum_all()? + h.sqr()?.sum_all()?
        };
        let var = candle_core::Var::from_tensor(&small).unwrap();
        let g = f(var.as_tensor()).unwrap().backward().unwrap();
        let analytic: Vec<f64> = g.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let fd = tensor_central_difference(&small, |t| f(t)?.to_scalar::<f64>()).unwrap();
        assert!(relative_error(&analytic, &fd) <= 1e-4);
    }

    fn toy_config() -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 4,
            widths: [8, 16],
            feature_width: 4,
            time_dim: 16,
            use_freq_prior: true,
        }
    }

    #[test]
    fn denoiser_shape_determinism_and_validation() {
        let store = ParamStore::new(1, DType::F32, false);
        let d = Denoiser::new(&store.root().pp("d"), &toy_config()).unwrap();
        let dev = Device::Cpu;
        let z = Tensor::randn(0f32, 1.0, (1, 1, 64, 64), &dev).unwrap();
        let mu = Tensor::zeros((1, 1, 64, 64), DType::F32, &dev).unwrap();
        let x = Tensor::ones((1, 4, 64, 64), DType::F32, &dev).unwrap();
        let cond = d.condition(&mu, &x).unwrap();
        let a = d.forward(&z, &cond, &[10]).unwrap();
        let b = d.forward(&z, &cond, &[10]).unwrap();
        assert_eq!(a.dims(), &[1, 1, 64, 64]);
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        assert!(d.forward(&z, &cond, &[1, 2]).is_err());
        assert!(d.condition(&mu, &Tensor::ones((1, 3, 64, 64), DType::F32, &dev).unwrap()).is_err());
    }

    #[test]
    fn timestep_draws_are_uniform() {
        let t_max = 1000;
        let bins = 10;
        let mut draws = TimestepSampler::new(t_max, 9);
        let mut counts = vec![0usize; bins];
        for _ in 0..10_000 {
            let t = draws.draw();
            assert!((1..=t_max).contains(&t));
            counts[(t - 1) * bins / t_max] += 1;
        }
        let expected = 1000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 9 degrees of freedom.
        assert!(chi2 < 21.666, "chi2 {chi2}");
    }
}
