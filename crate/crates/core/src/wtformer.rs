//! Stage I: the coarse estimator.
//!
//! A two-level encoder–decoder. Each level stacks a residual block, windowed
//! self-attention and a WTF block (a convolutional branch plus wavelet
//! cross-frequency attention). Its output is the coarse estimate μ.

use std::time::Instant;

use candle_core::{DType, Device, Module, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::losses::{self, FiblConfig, LossKind, ScheduleDirection, ScheduleState};
use crate::nn::{self, Conv2d, ConvSpec, GroupNorm, Linear, ParamStore, Scope};
use crate::raster::{Modality, ObservationStack, Raster};
use crate::wavelet::tensor::{dwt2, idwt2, Bands};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WtformerConfig {
    pub in_channels: usize,
    pub widths: [usize; 2],
    pub heads: usize,
    pub window: usize,
    /// Channel expansion of the WTF convolutional branch.
    pub expansion: usize,
    /// Ablation switch: without it, levels carry no WTF block.
    pub use_wtf: bool,
}

impl Default for WtformerConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            widths: [32, 64],
            heads: 4,
            window: 8,
            expansion: 2,
            use_wtf: true,
        }
    }
}

/// Non-overlapping window multi-head self-attention.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    window: usize,
}

impl WindowAttention {
    pub fn new(vb: &Scope, channels: usize, heads: usize, window: usize) -> Result<Self> {
        ensure!(window > 0, Config, "window must be positive");
        ensure!(
            heads > 0 && channels % heads == 0,
            Config,
            "{channels} channels cannot be split into {heads} heads"
        );
        Ok(Self {
            qkv: Linear::new(&vb.pp("qkv"), channels, 3 * channels)?,
            proj: Linear::residual_out(&vb.pp("proj"), channels, channels)?,
            heads,
            window,
        })
    }

    fn window_for(&self, h: usize, w: usize) -> Result<usize> {
        let win = self.window.min(h).min(w);
        ensure!(
            h % win == 0 && w % win == 0,
            Validation,
            "{h}x{w} grid is not divisible by attention window {win}"
        );
        Ok(win)
    }

    /// Output and the `(B·windows, heads, win², win²)` attention weights.
    pub fn forward_with_weights(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = x.dims4()?;
        let win = self.window_for(h, w)?;
        let (nh, nw) = (h / win, w / win);
        let tokens = x
            .reshape(vec![b, c, nh, win, nw, win])?
            .permute(vec![0, 2, 4, 3, 5, 1])?
            .contiguous()?
            .reshape((b * nh * nw, win * win, c))?;
        let qkv = self.qkv.forward(&tokens)?;
        let q = nn::split_heads(&qkv.narrow(2, 0, c)?, self.heads)?;
        let k = nn::split_heads(&qkv.narrow(2, c, c)?, self.heads)?;
        let v = nn::split_heads(&qkv.narrow(2, 2 * c, c)?, self.heads)?;
        let weights = nn::attention_weights(&q, &k)?;
        let out = nn::merge_heads(&weights.matmul(&v)?)?;
        let out = self
            .proj
            .forward(&out)?
            .reshape(vec![b, nh, nw, win, win, c])?
            .permute(vec![0, 5, 1, 3, 2, 4])?
            .contiguous()?
            .reshape((b, c, h, w))?;
        Ok((out, weights))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(x)?.0)
    }
}

/// Cross-frequency attention: low-frequency queries against aggregated
/// high-frequency keys, reconstructed to full resolution by the inverse
/// transform.
#[derive(Debug, Clone)]
pub struct WthlAttention {
    query: Linear,
    key: Linear,
    value_low: Linear,
    value_high: Linear,
    /// Maps the fused features to the four sub-bands.
    to_bands: Conv2d,
    heads: usize,
    channels: usize,
}

impl WthlAttention {
    pub fn new(vb: &Scope, channels: usize, heads: usize) -> Result<Self> {
        ensure!(
            heads > 0 && channels % heads == 0,
            Config,
            "{channels} channels cannot be split into {heads} heads"
        );
        Ok(Self {
            query: Linear::new(&vb.pp("query"), channels, channels)?,
            key: Linear::new(&vb.pp("key"), channels, channels)?,
            value_low: Linear::new(&vb.pp("value_low"), channels, channels)?,
            value_high: Linear::new(&vb.pp("value_high"), channels, channels)?,
            to_bands: Conv2d::residual_out(&vb.pp("to_bands"), ConvSpec::new(channels, 4 * channels, 3))?,
            heads,
            channels,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Output and the `(B, heads, N, N)` attention weights, `N = H/2 · W/2`.
    pub fn forward_with_weights(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = x.dims4()?;
        ensure!(
            h % 2 == 0 && w % 2 == 0,
            Validation,
            "wavelet attention needs even spatial dimensions, got {h}x{w}"
        );
        ensure!(c == self.channels, Validation, "expected {} channels, got {c}", self.channels);
        let bands = dwt2(x)?;
        let low = nn::to_tokens(&bands.ll)?;
        let high = nn::to_tokens(&bands.aggregate_high()?)?;
        let q = nn::split_heads(&self.query.forward(&low)?, self.heads)?;
        let k = nn::split_heads(&self.key.forward(&high)?, self.heads)?;
        let weights = nn::attention_weights(&q, &k)?;
        let a_low = weights.matmul(&nn::split_heads(&self.value_low.forward(&low)?, self.heads)?)?;
        let a_high = weights.matmul(&nn::split_heads(&self.value_high.forward(&high)?, self.heads)?)?;
        let fused = nn::gelu(&nn::merge_heads(&(a_high + a_low)?)?)?;
        let fused = nn::from_tokens(&fused, h / 2, w / 2)?;
        let sub = self.to_bands.forward(&fused)?;
        let out = idwt2(&Bands {
            ll: sub.narrow(1, 0, c)?,
            lh: sub.narrow(1, c, c)?,
            hl: sub.narrow(1, 2 * c, c)?,
            hh: sub.narrow(1, 3 * c, c)?,
        })?;
        Ok((out, weights))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(x)?.0)
    }
}

/// Dual-branch block: `x + conv_branch(x) + wthl(x)`, both branches reading
/// group-normalised features.
#[derive(Debug, Clone)]
pub struct WtfBlock {
    norm: GroupNorm,
    expand: Conv2d,
    depthwise: Conv2d,
    reduce: Conv2d,
    wthl: WthlAttention,
}

impl WtfBlock {
    pub fn new(vb: &Scope, channels: usize, heads: usize, expansion: usize) -> Result<Self> {
        let hidden = channels * expansion.max(1);
        Ok(Self {
            norm: GroupNorm::new(&vb.pp("norm"), channels)?,
            expand: Conv2d::new(&vb.pp("expand"), ConvSpec::new(channels, hidden, 1))?,
            depthwise: Conv2d::new(&vb.pp("depthwise"), ConvSpec::depthwise(hidden, 3))?,
            reduce: Conv2d::residual_out(&vb.pp("reduce"), ConvSpec::new(hidden, channels, 1))?,
            wthl: WthlAttention::new(&vb.pp("wthl"), channels, heads)?,
        })
    }

    pub fn conv_branch(&self, normed: &Tensor) -> Result<Tensor> {
        let h = nn::gelu(&self.expand.forward(normed)?)?;
        let h = nn::gelu(&self.depthwise.forward(&h)?)?;
        Ok(self.reduce.forward(&h)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = self.norm.forward(x)?;
        let conv = self.conv_branch(&normed)?;
        let wave = self.wthl.forward(&normed)?;
        Ok(((x + conv)? + wave)?)
    }
}

/// Pre-activation residual block, optionally strided, optionally
/// conditioned on a time embedding.
#[derive(Debug, Clone)]
pub struct ResBlock2d {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    time: Option<Linear>,
}

impl ResBlock2d {
    pub fn new(vb: &Scope, in_ch: usize, out_ch: usize, stride: usize, time_dim: Option<usize>) -> Result<Self> {
        let skip = if in_ch != out_ch || stride != 1 {
            Some(Conv2d::new(&vb.pp("skip"), ConvSpec::new(in_ch, out_ch, 1).stride(stride))?)
        } else {
            None
        };
        Ok(Self {
            norm1: GroupNorm::new(&vb.pp("norm1"), in_ch)?,
            conv1: Conv2d::new(&vb.pp("conv1"), ConvSpec::new(in_ch, out_ch, 3).stride(stride))?,
            norm2: GroupNorm::new(&vb.pp("norm2"), out_ch)?,
            conv2: Conv2d::residual_out(&vb.pp("conv2"), ConvSpec::new(out_ch, out_ch, 3))?,
            skip,
            time: time_dim
                .map(|d| Linear::new(&vb.pp("time"), d, out_ch))
                .transpose()?,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&nn::gelu(&self.norm1.forward(x)?)?)?;
        if let (Some(proj), Some(t)) = (&self.time, temb) {
            let t = proj.forward(&nn::gelu(t)?)?;
            h = h.broadcast_add(&t.unsqueeze(2)?.unsqueeze(3)?)?;
        }
        let h = self.conv2.forward(&nn::gelu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Nearest-neighbour 2× upsampling followed by a 3×3 convolution.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(vb: &Scope, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&vb.pp("conv"), ConvSpec::new(in_ch, out_ch, 3))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        Ok(self.conv.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?)
    }
}

/// Residual block, residual windowed attention and (optionally) a WTF block.
#[derive(Debug, Clone)]
struct Level {
    res: ResBlock2d,
    attn_norm: GroupNorm,
    attn: WindowAttention,
    wtf: Option<WtfBlock>,
}

impl Level {
    fn new(vb: &Scope, in_ch: usize, ch: usize, cfg: &WtformerConfig, with_wtf: bool) -> Result<Self> {
        Ok(Self {
            res: ResBlock2d::new(&vb.pp("res"), in_ch, ch, 1, None)?,
            attn_norm: GroupNorm::new(&vb.pp("attn_norm"), ch)?,
            attn: WindowAttention::new(&vb.pp("attn"), ch, cfg.heads, cfg.window)?,
            wtf: if with_wtf {
                Some(WtfBlock::new(&vb.pp("wtf"), ch, cfg.heads, cfg.expansion)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(x, None)?;
        let h = (&h + self.attn.forward(&self.attn_norm.forward(&h)?)?)?;
        match &self.wtf {
            Some(wtf) => wtf.forward(&h),
            None => Ok(h),
        }
    }
}

/// The coarse estimator network.
pub struct Wtformer {
    cfg: WtformerConfig,
    stem: Conv2d,
    enc1: Level,
    down1: ResBlock2d,
    enc2: Level,
    down2: ResBlock2d,
    mid: Level,
    up2: Upsample,
    dec2: Level,
    up1: Upsample,
    dec1: Level,
    head_norm: GroupNorm,
    head: Conv2d,
}

impl Wtformer {
    pub fn new(vb: &Scope, cfg: &WtformerConfig) -> Result<Self> {
        let [w0, w1] = cfg.widths;
        ensure!(cfg.in_channels > 0 && w0 > 0 && w1 > 0, Config, "channel counts must be positive");
        Ok(Self {
            cfg: cfg.clone(),
            stem: Conv2d::new(&vb.pp("stem"), ConvSpec::new(cfg.in_channels, w0, 3))?,
            enc1: Level::new(&vb.pp("enc1"), w0, w0, cfg, cfg.use_wtf)?,
            down1: ResBlock2d::new(&vb.pp("down1"), w0, w1, 2, None)?,
            enc2: Level::new(&vb.pp("enc2"), w1, w1, cfg, cfg.use_wtf)?,
            down2: ResBlock2d::new(&vb.pp("down2"), w1, w1, 2, None)?,
            mid: Level::new(&vb.pp("mid"), w1, w1, cfg, false)?,
            up2: Upsample::new(&vb.pp("up2"), w1, w1)?,
            dec2: Level::new(&vb.pp("dec2"), 2 * w1, w1, cfg, cfg.use_wtf)?,
            up1: Upsample::new(&vb.pp("up1"), w1, w0)?,
            dec1: Level::new(&vb.pp("dec1"), 2 * w0, w0, cfg, cfg.use_wtf)?,
            head_norm: GroupNorm::new(&vb.pp("head_norm"), w0)?,
            head: Conv2d::new(&vb.pp("head"), ConvSpec::new(w0, 1, 3))?,
        })
    }

    pub fn config(&self) -> &WtformerConfig {
        &self.cfg
    }

    /// Unclamped output `(B, 1, H, W)` for a `(B, C, H, W)` input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        ensure!(
            c == self.cfg.in_channels,
            Validation,
            "model expects {} input channels, got {c}",
            self.cfg.in_channels
        );
        ensure!(
            h % 4 == 0 && w % 4 == 0,
            Validation,
            "input {h}x{w} must be divisible by 4"
        );
        let s1 = self.enc1.forward(&self.stem.forward(x)?)?;
        let s2 = self.enc2.forward(&self.down1.forward(&s1, None)?)?;
        let m = self.mid.forward(&self.down2.forward(&s2, None)?)?;
        let d2 = self.dec2.forward(&Tensor::cat(&[&self.up2.forward(&m)?, &s2], 1)?)?;
        let d1 = self.dec1.forward(&Tensor::cat(&[&self.up1.forward(&d2)?, &s1], 1)?)?;
        Ok(self.head.forward(&nn::gelu(&self.head_norm.forward(&d1)?)?)?)
    }
}

/// Stage-I output: one normalised radar field.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseEstimate(pub Raster);

impl CoarseEstimate {
    pub fn raster(&self) -> &Raster {
        &self.0
    }
}

/// `(1, C, H, W)` tensor of a stack.
pub fn stack_tensor(stack: &ObservationStack, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = stack.shape();
    Ok(Tensor::from_vec(stack.flat_values(), (1, stack.num_channels(), h, w), device)?.to_dtype(dtype)?)
}

pub fn raster_tensor(r: &Raster, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(r.values(), (1, 1, r.height(), r.width()), device)?.to_dtype(dtype)?)
}

/// Converts a `(1, 1, H, W)` or `(H, W)` tensor back to a raster.
pub fn tensor_raster(t: &Tensor) -> Result<Raster> {
    let dims = t.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    ensure!(t.elem_count() == h * w, Dimension, "expected a single-channel tensor, got {dims:?}");
    let values = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Raster::new(h, w, values, Modality::Vil)
}

/// Inference: μ clamped to the normalised range.
pub fn wtformer_forward(stack: &ObservationStack, model: &Wtformer, dtype: DType) -> Result<CoarseEstimate> {
    let x = stack_tensor(stack, dtype, &Device::Cpu)?;
    let out = model.forward(&x)?.clamp(0.0, 1.0)?;
    Ok(CoarseEstimate(tensor_raster(&out)?))
}

/// One supervised example.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub stack: ObservationStack,
    pub target: Raster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub fibl: FiblConfig,
    pub direction: ScheduleDirection,
    /// Annealing horizon T; `0` uses `steps`.
    pub schedule_horizon: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            learning_rate: 2e-4,
            grad_clip: 1.0,
            seed: 0,
            fibl: FiblConfig::default(),
            direction: ScheduleDirection::AsDescribed,
            schedule_horizon: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub step: usize,
    pub tag: LossKind,
    pub threshold: f64,
    pub loss: f64,
    pub fibl: f64,
    pub fibl_low: f64,
    pub fibl_high: f64,
    pub fgl: f64,
    pub grad_norm: f64,
}

pub struct Stage1Outcome {
    pub history: Vec<Stage1Record>,
    pub wall_seconds: Vec<f64>,
}

fn batch_tensors(pairs: &[&TrainingPair], dtype: DType) -> Result<(Tensor, Tensor)> {
    let device = Device::Cpu;
    let xs: Vec<Tensor> = pairs
        .iter()
        .map(|p| stack_tensor(&p.stack, dtype, &device))
        .collect::<Result<_>>()?;
    let ys: Vec<Tensor> = pairs
        .iter()
        .map(|p| raster_tensor(&p.target, dtype, &device))
        .collect::<Result<_>>()?;
    Ok((Tensor::cat(&xs, 0)?, Tensor::cat(&ys, 0)?))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// FIBL of the model's raw output over a whole dataset.
pub fn dataset_fibl(model: &Wtformer, data: &[TrainingPair], cfg: &FiblConfig, dtype: DType) -> Result<f64> {
    let refs: Vec<&TrainingPair> = data.iter().collect();
    let (x, y) = batch_tensors(&refs, dtype)?;
    scalar(&losses::tensor::fibl(&model.forward(&x)?, &y, cfg)?.total)
}

/// Trains in place under the stochastic FGL/FIBL schedule.
pub fn train_stage1(
    model: &Wtformer,
    store: &ParamStore,
    data: &[TrainingPair],
    cfg: &Stage1Config,
) -> Result<Stage1Outcome> {
    ensure!(!data.is_empty(), Validation, "stage-1 training needs a non-empty dataset");
    ensure!(cfg.steps > 0 && cfg.batch_size > 0, Validation, "steps and batch size must be positive");
    cfg.fibl.validate()?;
    let horizon = if cfg.schedule_horizon == 0 { cfg.steps } else { cfg.schedule_horizon };
    let mut schedule = ScheduleState::new(horizon, cfg.seed ^ 0x5eed_5c4e, cfg.direction)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = nn::Trainer::new(store, cfg.learning_rate, cfg.grad_clip)?;
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
        let batch: Vec<&TrainingPair> = order[cursor..cursor + bs].iter().map(|&i| &data[i]).collect();
        cursor += bs;
        let (x, y) = batch_tensors(&batch, store.dtype())?;

        schedule.set_step(step.min(horizon))?;
        let tag = schedule.select();
        let pred = model.forward(&x)?;
        let fibl = losses::tensor::fibl(&pred, &y, &cfg.fibl)?;
        let fgl = losses::tensor::fgl(&pred, &y)?;
        let loss = match tag {
            LossKind::Fibl => &fibl.total,
            LossKind::Fgl => &fgl,
        };
        let loss_value = scalar(loss)?;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("{} loss is {loss_value}", tag.tag()),
            });
        }
        let grad_norm = trainer.step(loss)?;
        history.push(Stage1Record {
            step,
            tag,
            threshold: schedule.threshold(),
            loss: loss_value,
            fibl: scalar(&fibl.total)?,
            fibl_low: scalar(&fibl.low)?,
            fibl_high: scalar(&fibl.high)?,
            fgl: scalar(&fgl)?,
            grad_norm,
        });
        wall_seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(Stage1Outcome { history, wall_seconds })
}
