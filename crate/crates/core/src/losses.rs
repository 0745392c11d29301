//! Training objectives.
//!
//! Every loss has two implementations: a plain [`Raster`] version with a
//! hand-derived gradient, and a candle version in [`tensor`] that training
//! loops differentiate automatically. Tests hold the two against each other
//! and against finite differences.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::raster::Raster;
use crate::wavelet::{dwt2, idwt2, Basis, SubBand, WaveletPyramid};

/// Weights of the frequency-decomposed intensity/boundary loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FiblConfig {
    pub alpha: f64,
    pub w_lh: f64,
    pub w_hl: f64,
    pub w_hh: f64,
    pub basis: Basis,
}

impl Default for FiblConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            w_lh: 1.0 / 3.0,
            w_hl: 1.0 / 3.0,
            w_hh: 1.0 / 3.0,
            basis: Basis::HaarOrthonormal,
        }
    }
}

impl FiblConfig {
    pub fn with_alpha(self, alpha: f64) -> Self {
        Self { alpha, ..self }
    }

    pub fn weight(&self, band: SubBand) -> f64 {
        match band {
            SubBand::Ll => 1.0,
            SubBand::Lh => self.w_lh,
            SubBand::Hl => self.w_hl,
            SubBand::Hh => self.w_hh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_lh, self.w_hl, self.w_hh];
        ensure!(
            self.alpha.is_finite() && self.alpha >= 0.0,
            Validation,
            "alpha must be a finite non-negative number, got {}",
            self.alpha
        );
        ensure!(
            ws.iter().all(|w| w.is_finite() && *w >= 0.0),
            Validation,
            "directional weights must be finite and non-negative, got {ws:?}"
        );
        ensure!(
            self.alpha == 0.0 || ws.iter().any(|&w| w > 0.0),
            Validation,
            "alpha > 0 needs at least one positive directional weight"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiblTerms {
    pub total: f64,
    pub low: f64,
    pub high: f64,
}

fn pyramids(pred: &Raster, target: &Raster, basis: Basis) -> Result<(WaveletPyramid, WaveletPyramid)> {
    pred.ensure_same_shape(target)?;
    Ok((dwt2(pred, basis)?, dwt2(target, basis)?))
}

pub fn fibl(pred: &Raster, target: &Raster, cfg: &FiblConfig) -> Result<FiblTerms> {
    cfg.validate()?;
    let (p, t) = pyramids(pred, target, cfg.basis)?;
    let low = p.ll.mse(&t.ll)?;
    let mut high = 0.0;
    for band in SubBand::DETAIL {
        high += cfg.weight(band) * p.band(band).mse(t.band(band))?;
    }
    Ok(FiblTerms {
        total: low + cfg.alpha * high,
        low,
        high,
    })
}

/// Gradient of [`fibl`] with respect to `pred`.
///
/// The transform is orthonormal, so the gradient is the inverse transform of
/// the per-band gradients.
pub fn fibl_grad(pred: &Raster, target: &Raster, cfg: &FiblConfig) -> Result<Raster> {
    cfg.validate()?;
    let (p, t) = pyramids(pred, target, cfg.basis)?;
    let n = p.ll.len() as f64;
    let band_grad = |band: SubBand| -> Result<Raster> {
        let scale = if band == SubBand::Ll {
            2.0 / n
        } else {
            2.0 * cfg.alpha * cfg.weight(band) / n
        };
        p.band(band).zip_map(t.band(band), |a, b| scale * (a - b))
    };
    idwt2(&WaveletPyramid {
        ll: band_grad(SubBand::Ll)?,
        lh: band_grad(SubBand::Lh)?,
        hl: band_grad(SubBand::Hl)?,
        hh: band_grad(SubBand::Hh)?,
        basis: cfg.basis,
        source_shape: pred.shape(),
    })
}

/// Unitary 2D DFT (forward, or inverse when `inverse` is set).
fn dft2(values: &[Complex64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut data = values.to_vec();
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            column[r] = data[r * w + c];
        }
        col_fft.process(&mut column);
        for r in 0..h {
            data[r * w + c] = column[r];
        }
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    data.iter_mut().for_each(|v| *v *= scale);
    data
}

fn spectrum(field: &Raster) -> Vec<Complex64> {
    let input: Vec<Complex64> = field.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft2(&input, field.height(), field.width(), false)
}

/// Fourier amplitude spectrum under the unitary DFT.
pub fn amplitude_spectrum(field: &Raster) -> Raster {
    let amp = spectrum(field).iter().map(|z| z.norm()).collect();
    Raster::generic(field.height(), field.width(), amp).expect("finite amplitudes")
}

/// Fourier global loss: squared distance between amplitude spectra.
///
/// Equivalently, the mean over frequencies of the squared amplitude difference
/// under the unnormalised DFT. A unit impulse against a zero field scores 1 on
/// any grid.
pub fn fgl(pred: &Raster, target: &Raster) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    let a = amplitude_spectrum(pred);
    let b = amplitude_spectrum(target);
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// Gradient of [`fgl`] with respect to `pred`. Frequencies where the predicted
/// amplitude vanishes contribute a zero subgradient.
pub fn fgl_grad(pred: &Raster, target: &Raster) -> Result<Raster> {
    pred.ensure_same_shape(target)?;
    let (h, w) = pred.shape();
    let f = spectrum(pred);
    let b = amplitude_spectrum(target);
    let weighted: Vec<Complex64> = f
        .iter()
        .zip(b.values())
        .map(|(z, &bk)| {
            let a = z.norm();
            if a == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                z * (2.0 * (a - bk) / a)
            }
        })
        .collect();
    let g = dft2(&weighted, h, w, true);
    Raster::generic(h, w, g.iter().map(|z| z.re).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for AlphaBounds {
    fn default() -> Self {
        Self { min: 0.1, max: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaEstimate {
    pub alpha: f64,
    /// Set when some field had no detail-band energy at all.
    pub zero_high_energy: bool,
}

/// Mean low-to-high sub-band energy ratio over a sample, clamped to `bounds`.
///
/// A field with no detail energy contributes `bounds.max`.
pub fn alpha_from_energy(sample: &[Raster], basis: Basis, bounds: AlphaBounds) -> Result<AlphaEstimate> {
    ensure!(!sample.is_empty(), Validation, "alpha estimation needs a non-empty sample");
    ensure!(
        bounds.min >= 0.0 && bounds.min <= bounds.max,
        Validation,
        "invalid alpha bounds [{}, {}]",
        bounds.min,
        bounds.max
    );
    let mut zero_high_energy = false;
    let mut acc = 0.0;
    for field in sample {
        let p = dwt2(field, basis)?;
        let high = p.high_energy();
        if high == 0.0 {
            zero_high_energy = true;
            acc += bounds.max;
        } else {
            acc += p.low_energy() / high;
        }
    }
    if zero_high_energy {
        log::warn!("alpha estimation: sample contains fields without detail-band energy");
    }
    Ok(AlphaEstimate {
        alpha: (acc / sample.len() as f64).clamp(bounds.min, bounds.max),
        zero_high_energy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Fgl,
    Fibl,
}

impl LossKind {
    pub fn tag(self) -> &'static str {
        match self {
            LossKind::Fgl => "fgl",
            LossKind::Fibl => "fibl",
        }
    }
}

/// How the cosine-annealed threshold maps to a loss choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleDirection {
    /// FGL iff p > P(t): FIBL early, FGL late.
    AsWritten,
    /// FIBL iff p > P(t): FGL early, FIBL late.
    #[default]
    AsDescribed,
}

/// Cosine annealing threshold P(t) = cos(πt / 2T).
pub fn selection_threshold(step: usize, total_steps: usize) -> f64 {
    (PI * step as f64 / (2.0 * total_steps as f64)).cos()
}

/// Stochastic FGL/FIBL switch driven by its own seeded stream.
#[derive(Debug, Clone)]
pub struct ScheduleState {
    step: usize,
    total_steps: usize,
    direction: ScheduleDirection,
    rng: ChaCha8Rng,
}

impl ScheduleState {
    pub fn new(total_steps: usize, seed: u64, direction: ScheduleDirection) -> Result<Self> {
        ensure!(total_steps > 0, Validation, "total_steps must be positive");
        Ok(Self {
            step: 0,
            total_steps,
            direction,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn direction(&self) -> ScheduleDirection {
        self.direction
    }

    pub fn set_step(&mut self, step: usize) -> Result<()> {
        ensure!(
            step <= self.total_steps,
            Validation,
            "step {step} exceeds total steps {}",
            self.total_steps
        );
        self.step = step;
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        selection_threshold(self.step, self.total_steps)
    }

    /// Probability that the next draw selects FGL.
    pub fn fgl_probability(&self) -> f64 {
        let p = self.threshold().clamp(0.0, 1.0);
        match self.direction {
            ScheduleDirection::AsWritten => 1.0 - p,
            ScheduleDirection::AsDescribed => p,
        }
    }

    pub fn select(&mut self) -> LossKind {
        let p: f64 = self.rng.random();
        let exceeds = p > self.threshold();
        match (self.direction, exceeds) {
            (ScheduleDirection::AsWritten, true) | (ScheduleDirection::AsDescribed, false) => LossKind::Fgl,
            _ => LossKind::Fibl,
        }
    }
}

/// Draws one loss choice for the state's current step.
pub fn schedule_select(state: &mut ScheduleState) -> LossKind {
    state.select()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Terms {
    pub total: f64,
    pub diff: f64,
    pub wavelet: f64,
}

/// Noise-prediction MSE plus `lambda_freq` times FIBL of the clean-sample
/// estimate against the target.
pub fn stage2_loss(
    eps_pred: &Raster,
    eps_true: &Raster,
    refined_estimate: &Raster,
    target: &Raster,
    lambda_freq: f64,
    cfg: &FiblConfig,
) -> Result<Stage2Terms> {
    ensure!(
        lambda_freq.is_finite() && lambda_freq >= 0.0,
        Validation,
        "lambda_freq must be finite and non-negative"
    );
    eps_pred.ensure_same_shape(refined_estimate)?;
    let diff = eps_pred.mse(eps_true)?;
    let wavelet = fibl(refined_estimate, target, cfg)?.total;
    Ok(Stage2Terms {
        total: diff + lambda_freq * wavelet,
        diff,
        wavelet,
    })
}

/// Gradients of [`stage2_loss`] with respect to `eps_pred` and
/// `refined_estimate`, treated as independent inputs.
pub fn stage2_grads(
    eps_pred: &Raster,
    eps_true: &Raster,
    refined_estimate: &Raster,
    target: &Raster,
    lambda_freq: f64,
    cfg: &FiblConfig,
) -> Result<(Raster, Raster)> {
    let n = eps_pred.len() as f64;
    let g_eps = eps_pred.zip_map(eps_true, |a, b| 2.0 * (a - b) / n)?;
    let g_ref = fibl_grad(refined_estimate, target, cfg)?.map(|g| lambda_freq * g);
    Ok((g_eps, g_ref))
}

/// The same objectives on `(B, C, H, W)` candle tensors, averaged over the batch.
pub mod tensor {
    use candle_core::{DType, Device, Result, Tensor};

    use super::FiblConfig;
    use crate::wavelet::tensor::dwt2;

    pub struct FiblParts {
        pub total: Tensor,
        pub low: Tensor,
        pub high: Tensor,
    }

    fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        (a - b)?.sqr()?.mean_all()
    }

    pub fn fibl(pred: &Tensor, target: &Tensor, cfg: &FiblConfig) -> Result<FiblParts> {
        let p = dwt2(pred)?;
        let t = dwt2(target)?;
        let low = mse(&p.ll, &t.ll)?;
        let high = ((mse(&p.lh, &t.lh)? * cfg.w_lh)? + (mse(&p.hl, &t.hl)? * cfg.w_hl)?)?;
        let high = (high + (mse(&p.hh, &t.hh)? * cfg.w_hh)?)?;
        let total = (&low + (&high * cfg.alpha)?)?;
        Ok(FiblParts { total, low, high })
    }

    fn dft_matrices(n: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let scale = 1.0 / (n as f64).sqrt();
        let mut cos = Vec::with_capacity(n * n);
        let mut sin = Vec::with_capacity(n * n);
        for k in 0..n {
            for m in 0..n {
                let angle = 2.0 * std::f64::consts::PI * ((k * m) % n) as f64 / n as f64;
                cos.push(angle.cos() * scale);
                sin.push(angle.sin() * scale);
            }
        }
        Ok((
            Tensor::from_vec(cos, (n, n), device)?.to_dtype(dtype)?,
            Tensor::from_vec(sin, (n, n), device)?.to_dtype(dtype)?,
        ))
    }

    /// Unitary-DFT amplitude spectrum of every `(H, W)` slice. `eps` keeps the
    /// square root differentiable at zero amplitude.
    pub fn amplitude(x: &Tensor, eps: f64) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let rank = dims.len();
        let (h, w) = (dims[rank - 2], dims[rank - 1]);
        let batch: usize = dims[..rank - 2].iter().product();
        let x = x.reshape((batch, h, w))?;
        let (ch, sh) = dft_matrices(h, x.dtype(), x.device())?;
        let (cw, sw) = dft_matrices(w, x.dtype(), x.device())?;
        let left = |m: &Tensor| m.unsqueeze(0)?.broadcast_as((batch, h, h))?.contiguous();
        let (ch, sh) = (left(&ch)?, left(&sh)?);
        let xc = x.broadcast_matmul(&cw)?;
        let xs = x.broadcast_matmul(&sw)?;
        let re = (ch.matmul(&xc)? - sh.matmul(&xs)?)?;
        let im = (ch.matmul(&xs)? + sh.matmul(&xc)?)?;
        ((re.sqr()? + im.sqr()?)? + eps)?.sqrt()?.reshape(dims)
    }

    pub const AMPLITUDE_EPS: f64 = 1e-12;

    pub fn fgl(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        let dims = pred.dims();
        let slices: usize = dims[..dims.len() - 2].iter().product();
        let a = amplitude(pred, AMPLITUDE_EPS)?;
        let b = amplitude(target, AMPLITUDE_EPS)?.detach();
        (a - b)?.sqr()?.sum_all()? / slices as f64
    }

    pub struct Stage2Parts {
        pub total: Tensor,
        pub diff: Tensor,
        pub wavelet: Tensor,
    }

    pub fn stage2_loss(
        eps_pred: &Tensor,
        eps_true: &Tensor,
        refined_estimate: &Tensor,
        target: &Tensor,
        lambda_freq: f64,
        cfg: &FiblConfig,
    ) -> Result<Stage2Parts> {
        let diff = mse(eps_pred, eps_true)?;
        let wavelet = fibl(refined_estimate, target, cfg)?.total;
        let total = (&diff + (&wavelet * lambda_freq)?)?;
        Ok(Stage2Parts { total, diff, wavelet })
    }
}
