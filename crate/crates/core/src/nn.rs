//! Minimal neural-network toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] that initialises them from its own
//! seeded stream, so two stores built with the same seed are bitwise equal.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

pub struct ParamStore {
    vars: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
    dtype: DType,
    device: Device,
    zero_residual: bool,
}

impl ParamStore {
    /// `zero_residual` zero-initialises the output projection of every
    /// residual branch, making those blocks exact identities at start.
    pub fn new(seed: u64, dtype: DType, zero_residual: bool) -> Self {
        Self {
            vars: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: Device::Cpu,
            zero_residual,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    /// Variables sorted by name.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.borrow().values().cloned().collect()
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.borrow().values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `values`; names and shapes must match exactly.
    pub fn load(&self, values: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        let vars = self.vars.borrow();
        ensure!(
            vars.len() == values.len(),
            Config,
            "checkpoint holds {} parameter arrays but the model expects {}",
            values.len(),
            vars.len()
        );
        for (name, var) in vars.iter() {
            let (shape, data) = values
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter `{name}`")))?;
            ensure!(
                shape.as_slice() == var.dims(),
                Config,
                "parameter `{name}` has shape {shape:?} in the checkpoint but {:?} in the model",
                var.dims()
            );
            let t = Tensor::from_slice(data, shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Snapshot of every parameter as `f32`.
    pub fn export(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        let mut out = BTreeMap::new();
        for (name, var) in self.vars.borrow().iter() {
            let data = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            out.insert(name.clone(), (var.dims().to_vec(), data));
        }
        Ok(out)
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => {
                let mut rng = self.rng.borrow_mut();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let mut vars = self.vars.borrow_mut();
        ensure!(
            !vars.contains_key(&name),
            Config,
            "parameter `{name}` registered twice"
        );
        let tensor = var.as_tensor().clone();
        vars.insert(name, var);
        Ok(tensor)
    }
}

/// Name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: &str) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn uniform(&self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.store.create(self.full(name), shape, Init::Uniform(bound))
    }

    fn residual(&self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        if self.store.zero_residual {
            self.store.create(self.full(name), shape, Init::Zeros)
        } else {
            self.uniform(name, shape, fan_in)
        }
    }

    fn zeros(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.store.create(self.full(name), shape, Init::Zeros)
    }

    fn ones(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.store.create(self.full(name), shape, Init::Ones)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            groups: 1,
        }
    }

    pub fn stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, kernel)
        }
    }
}

impl Conv2d {
    pub fn new(vb: &Scope, spec: ConvSpec) -> Result<Self> {
        Self::build(vb, spec, false)
    }

    /// Output projection of a residual branch.
    pub fn residual_out(vb: &Scope, spec: ConvSpec) -> Result<Self> {
        Self::build(vb, spec, true)
    }

    fn build(vb: &Scope, spec: ConvSpec, residual: bool) -> Result<Self> {
        ensure!(
            spec.in_channels % spec.groups == 0 && spec.out_channels % spec.groups == 0,
            Config,
            "channels {}→{} not divisible by {} groups",
            spec.in_channels,
            spec.out_channels,
            spec.groups
        );
        let shape = [
            spec.out_channels,
            spec.in_channels / spec.groups,
            spec.kernel,
            spec.kernel,
        ];
        let fan_in = spec.in_channels / spec.groups * spec.kernel * spec.kernel;
        let weight = if residual {
            vb.residual("weight", &shape, fan_in)?
        } else {
            vb.uniform("weight", &shape, fan_in)?
        };
        let bias = vb.zeros("bias", &[spec.out_channels])?;
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.kernel / 2,
            groups: spec.groups,
        })
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, self.groups)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(vb: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: vb.uniform("weight", &[out_dim, in_dim], in_dim)?,
            bias: vb.zeros("bias", &[out_dim])?,
        })
    }

    pub fn residual_out(vb: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: vb.residual("weight", &[out_dim, in_dim], in_dim)?,
            bias: vb.zeros("bias", &[out_dim])?,
        })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// Largest group count ≤ 8 that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(vb: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: vb.ones("weight", &[channels])?,
            bias: vb.zeros("bias", &[channels])?,
            groups: group_count(channels),
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        normed
            .reshape((b, c, h, w))?
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.gelu()
}

/// `softmax(q kᵀ / √d)` over the last axis; `q`, `k` are `(.., N, d)`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> candle_core::Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?)? / (d as f64).sqrt())?;
    candle_nn::ops::softmax(&scores, D::Minus1)
}

/// `(B, N, heads·d)` → `(B, heads, N, d)`.
pub fn split_heads(x: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    x.reshape((b, n, heads, c / heads))?.transpose(1, 2)?.contiguous()
}

/// `(B, heads, N, d)` → `(B, N, heads·d)`.
pub fn merge_heads(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, h, n, d) = x.dims4()?;
    x.transpose(1, 2)?.contiguous()?.reshape((b, n, h * d))
}

/// `(B, C, H, W)` → `(B, H·W, C)`.
pub fn to_tokens(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()
}

/// `(B, H·W, C)` → `(B, C, H, W)`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> candle_core::Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))
}

/// Sinusoidal embedding of integer steps; `t` is `(B,)`, output `(B, dim)`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step as f64 * freq).cos());
        }
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), device)?.to_dtype(dtype)?)
}

/// Adam with global gradient-norm clipping.
pub struct Trainer {
    opt: AdamW,
    vars: Vec<Var>,
    clip: f64,
}

impl Trainer {
    pub fn new(store: &ParamStore, lr: f64, clip: f64) -> Result<Self> {
        let vars = store.vars();
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )?;
        Ok(Self { opt, vars, clip })
    }

    /// One optimiser step; returns the pre-clipping gradient norm.
    pub fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let mut sq = 0.0;
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Validation(format!("non-finite gradient norm {norm}")));
        }
        if self.clip > 0.0 && norm > self.clip {
            let scale = self.clip / norm;
            for v in &self.vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
        self.opt.step(&grads)?;
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stores_with_same_seed_are_identical() {
        let build = || {
            let store = ParamStore::new(5, DType::F64, false);
            Conv2d::new(&store.root().pp("c"), ConvSpec::new(3, 4, 3)).unwrap();
            Linear::new(&store.root().pp("l"), 4, 2).unwrap();
            store.export().unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn duplicate_names_rejected() {
        let store = ParamStore::new(0, DType::F32, false);
        Linear::new(&store.root().pp("a"), 2, 2).unwrap();
        assert!(Linear::new(&store.root().pp("a"), 2, 2).is_err());
    }

    #[test]
    fn group_counts() {
        assert_eq!(group_count(32), 8);
        assert_eq!(group_count(12), 6);
        assert_eq!(group_count(7), 7);
        assert_eq!(group_count(11), 1);
    }

    #[test]
    fn group_norm_normalises_each_group() {
        let store = ParamStore::new(0, DType::F64, false);
        let gn = GroupNorm::new(&store.root().pp("gn"), 4).unwrap();
        let x = Tensor::from_vec(crate::testing::random_values(2 * 4 * 3 * 3, 1), (2, 4, 3, 3), &Device::Cpu).unwrap();
        let y = gn.forward(&((x * 5.0).unwrap() + 2.0).unwrap()).unwrap();
        let g = y.reshape((2, 4, 9)).unwrap();
        let mean: Vec<Vec<f64>> = g.mean(D::Minus1).unwrap().to_vec2().unwrap();
        assert!(mean.iter().flatten().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn load_roundtrip_and_mismatch() {
        let a = ParamStore::new(1, DType::F32, false);
        Linear::new(&a.root().pp("l"), 3, 2).unwrap();
        let b = ParamStore::new(2, DType::F32, false);
        Linear::new(&b.root().pp("l"), 3, 2).unwrap();
        b.load(&a.export().unwrap()).unwrap();
        assert_eq!(a.export().unwrap(), b.export().unwrap());

        let c = ParamStore::new(2, DType::F32, false);
        Linear::new(&c.root().pp("l"), 3, 3).unwrap();
        assert!(matches!(c.load(&a.export().unwrap()), Err(Error::Config(_))));
    }

    #[test]
    fn trainer_clips_and_descends() {
        let store = ParamStore::new(3, DType::F64, false);
        let lin = Linear::new(&store.root().pp("l"), 2, 1).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0], [-1.0, 0.5]], &Device::Cpu).unwrap();
        let y = Tensor::new(&[[3.0f64], [-1.0]], &Device::Cpu).unwrap();
        let loss_of = || (lin.forward(&x).unwrap() - &y).unwrap().sqr().unwrap().mean_all().unwrap();
        let mut trainer = Trainer::new(&store, 0.05, 1.0).unwrap();
        let first = loss_of().to_scalar::<f64>().unwrap();
        for _ in 0..50 {
            trainer.step(&loss_of()).unwrap();
        }
        assert!(loss_of().to_scalar::<f64>().unwrap() < first);
    }

    #[test]
    fn timestep_embedding_shape() {
        let e = timestep_embedding(&[0, 10, 999], 16, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(e.dims(), &[3, 16]);
        let row0: Vec<f32> = e.get(0).unwrap().to_vec1().unwrap();
        assert_eq!(&row0[..8], &[0.0; 8]);
        assert_eq!(&row0[8..], &[1.0; 8]);
    }
}
