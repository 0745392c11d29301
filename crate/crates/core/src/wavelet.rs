//! Single-level separable 2D discrete wavelet transform.
//!
//! Sub-band convention for a 2×2 block `[[a, b], [c, d]]` under the orthonormal
//! Haar basis:
//!
//! ```text
//! ll = (a + b + c + d) / 2
//! lh = (a + b - c - d) / 2   top/bottom difference, responds to horizontal edges
//! hl = (a - b + c - d) / 2   left/right difference, responds to vertical edges
//! hh = (a - b - c + d) / 2   diagonal
//! ```
//!
//! The transform is orthonormal, so it preserves energy and its inverse is its
//! transpose. [`tensor`] holds the same transform expressed on candle tensors
//! for use inside differentiable models.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[non_exhaustive]
pub enum Basis {
    #[default]
    HaarOrthonormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubBand {
    Ll,
    Lh,
    Hl,
    Hh,
}

impl SubBand {
    pub const ALL: [SubBand; 4] = [SubBand::Ll, SubBand::Lh, SubBand::Hl, SubBand::Hh];
    pub const DETAIL: [SubBand; 3] = [SubBand::Lh, SubBand::Hl, SubBand::Hh];
}

/// The four half-resolution sub-bands of one decomposition level.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid {
    pub ll: Raster,
    pub lh: Raster,
    pub hl: Raster,
    pub hh: Raster,
    pub basis: Basis,
    /// Shape of the raster that was decomposed, before any padding.
    pub source_shape: (usize, usize),
}

impl WaveletPyramid {
    pub fn band(&self, band: SubBand) -> &Raster {
        match band {
            SubBand::Ll => &self.ll,
            SubBand::Lh => &self.lh,
            SubBand::Hl => &self.hl,
            SubBand::Hh => &self.hh,
        }
    }

    pub fn band_shape(&self) -> (usize, usize) {
        self.ll.shape()
    }

    pub fn low_energy(&self) -> f64 {
        self.ll.sum_sq()
    }

    pub fn high_energy(&self) -> f64 {
        self.lh.sum_sq() + self.hl.sum_sq() + self.hh.sum_sq()
    }

    pub fn energy(&self) -> f64 {
        self.low_energy() + self.high_energy()
    }

    /// Detail-band share of total energy; zero for an all-zero pyramid.
    pub fn high_energy_ratio(&self) -> f64 {
        let total = self.energy();
        if total == 0.0 {
            0.0
        } else {
            self.high_energy() / total
        }
    }

    fn validate(&self) -> Result<()> {
        let shape = self.ll.shape();
        ensure!(
            self.lh.shape() == shape && self.hl.shape() == shape && self.hh.shape() == shape,
            Validation,
            "sub-band shapes differ: ll {:?}, lh {:?}, hl {:?}, hh {:?}",
            shape,
            self.lh.shape(),
            self.hl.shape(),
            self.hh.shape()
        );
        let (sh, sw) = self.source_shape;
        ensure!(
            sh <= 2 * shape.0 && sw <= 2 * shape.1 && sh + 1 >= 2 * shape.0 && sw + 1 >= 2 * shape.1,
            Validation,
            "source shape {:?} is inconsistent with sub-band shape {:?}",
            self.source_shape,
            shape
        );
        Ok(())
    }
}

/// Forward transform. Odd dimensions are rejected; see [`dwt2_padded`].
pub fn dwt2(field: &Raster, basis: Basis) -> Result<WaveletPyramid> {
    let (h, w) = field.shape();
    ensure!(
        h % 2 == 0 && w % 2 == 0,
        Dimension,
        "dwt2 needs even dimensions, got {h}x{w} (enable padding for ingestion paths)"
    );
    let Basis::HaarOrthonormal = basis;
    let (bh, bw) = (h / 2, w / 2);
    let n = bh * bw;
    let (mut ll, mut lh, mut hl, mut hh) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for r in 0..bh {
        for c in 0..bw {
            let a = field.get(2 * r, 2 * c);
            let b = field.get(2 * r, 2 * c + 1);
            let cc = field.get(2 * r + 1, 2 * c);
            let d = field.get(2 * r + 1, 2 * c + 1);
            ll.push(0.5 * (a + b + cc + d));
            lh.push(0.5 * (a + b - cc - d));
            hl.push(0.5 * (a - b + cc - d));
            hh.push(0.5 * (a - b - cc + d));
        }
    }
    Ok(WaveletPyramid {
        ll: Raster::generic(bh, bw, ll)?,
        lh: Raster::generic(bh, bw, lh)?,
        hl: Raster::generic(bh, bw, hl)?,
        hh: Raster::generic(bh, bw, hh)?,
        basis,
        source_shape: (h, w),
    })
}

/// Forward transform that mirror-pads odd dimensions first. [`idwt2`] crops
/// the padding back off.
pub fn dwt2_padded(field: &Raster, basis: Basis) -> Result<WaveletPyramid> {
    let mut pyramid = dwt2(&field.pad_to_even(), basis)?;
    pyramid.source_shape = field.shape();
    Ok(pyramid)
}

pub fn idwt2(pyramid: &WaveletPyramid) -> Result<Raster> {
    pyramid.validate()?;
    let Basis::HaarOrthonormal = pyramid.basis;
    let (bh, bw) = pyramid.band_shape();
    let (h, w) = (2 * bh, 2 * bw);
    let mut out = vec![0.0; h * w];
    for r in 0..bh {
        for c in 0..bw {
            let ll = pyramid.ll.get(r, c);
            let lh = pyramid.lh.get(r, c);
            let hl = pyramid.hl.get(r, c);
            let hh = pyramid.hh.get(r, c);
            out[2 * r * w + 2 * c] = 0.5 * (ll + lh + hl + hh);
            out[2 * r * w + 2 * c + 1] = 0.5 * (ll + lh - hl - hh);
            out[(2 * r + 1) * w + 2 * c] = 0.5 * (ll - lh + hl - hh);
            out[(2 * r + 1) * w + 2 * c + 1] = 0.5 * (ll - lh - hl + hh);
        }
    }
    let full = Raster::generic(h, w, out)?;
    let (sh, sw) = pyramid.source_shape;
    if (sh, sw) == (h, w) {
        Ok(full)
    } else {
        Raster::from_fn(sh, sw, |r, c| full.get(r, c))
    }
}

/// Inverse transform of the pyramid with every sub-band outside `keep` zeroed.
pub fn selective_reconstruct(pyramid: &WaveletPyramid, keep: &[SubBand]) -> Result<Raster> {
    ensure!(!keep.is_empty(), Validation, "keep set must not be empty");
    let (bh, bw) = pyramid.band_shape();
    let pick = |band: SubBand| {
        if keep.contains(&band) {
            pyramid.band(band).clone()
        } else {
            Raster::zeros(bh, bw)
        }
    };
    idwt2(&WaveletPyramid {
        ll: pick(SubBand::Ll),
        lh: pick(SubBand::Lh),
        hl: pick(SubBand::Hl),
        hh: pick(SubBand::Hh),
        basis: pyramid.basis,
        source_shape: pyramid.source_shape,
    })
}

/// Elementwise `lh + hl + hh` at half resolution.
pub fn aggregate_high(pyramid: &WaveletPyramid) -> Result<Raster> {
    pyramid.validate()?;
    pyramid
        .lh
        .zip_map(&pyramid.hl, |a, b| a + b)?
        .zip_map(&pyramid.hh, |a, b| a + b)
}

/// Applies [`dwt2`] independently to every channel.
pub fn dwt2_channels(channels: &[Raster], basis: Basis) -> Result<Vec<WaveletPyramid>> {
    channels.iter().map(|c| dwt2(c, basis)).collect()
}

/// Haar transform over the last two dimensions of a candle tensor.
pub mod tensor {
    use candle_core::{Result, Tensor, D};

    /// Differentiable sub-bands of a `(.., H, W)` tensor.
    #[derive(Debug, Clone)]
    pub struct Bands {
        pub ll: Tensor,
        pub lh: Tensor,
        pub hl: Tensor,
        pub hh: Tensor,
    }

    impl Bands {
        pub fn detail(&self) -> [&Tensor; 3] {
            [&self.lh, &self.hl, &self.hh]
        }

        /// `lh + hl + hh`.
        pub fn aggregate_high(&self) -> Result<Tensor> {
            (&self.lh + &self.hl)? + &self.hh
        }
    }

    fn split_dims(x: &Tensor) -> Result<(Vec<usize>, usize, usize)> {
        let dims = x.dims();
        if dims.len() < 2 {
            candle_core::bail!("dwt2 needs at least two dimensions, got {dims:?}");
        }
        let h = dims[dims.len() - 2];
        let w = dims[dims.len() - 1];
        if h % 2 != 0 || w % 2 != 0 {
            candle_core::bail!("dwt2 needs even spatial dimensions, got {h}x{w}");
        }
        Ok((dims[..dims.len() - 2].to_vec(), h, w))
    }

    pub fn dwt2(x: &Tensor) -> Result<Bands> {
        let (lead, h, w) = split_dims(x)?;
        let mut split = lead.clone();
        split.extend([h / 2, 2, w / 2, 2]);
        let x = x.reshape(split)?;
        let rank = x.rank();
        let mut band_shape = lead;
        band_shape.extend([h / 2, w / 2]);
        let corner = |i: usize, j: usize| -> Result<Tensor> {
            x.narrow(rank - 3, i, 1)?
                .narrow(rank - 1, j, 1)?
                .contiguous()?
                .reshape(band_shape.as_slice())
        };
        let a = corner(0, 0)?;
        let b = corner(0, 1)?;
        let c = corner(1, 0)?;
        let d = corner(1, 1)?;
        let ab_sum = (&a + &b)?;
        let ab_diff = (&a - &b)?;
        let cd_sum = (&c + &d)?;
        let cd_diff = (&c - &d)?;
        Ok(Bands {
            ll: ((&ab_sum + &cd_sum)? * 0.5)?,
            lh: ((&ab_sum - &cd_sum)? * 0.5)?,
            hl: ((&ab_diff + &cd_diff)? * 0.5)?,
            hh: ((&ab_diff - &cd_diff)? * 0.5)?,
        })
    }

    pub fn idwt2(bands: &Bands) -> Result<Tensor> {
        let Bands { ll, lh, hl, hh } = bands;
        let dims = ll.dims().to_vec();
        let rank = dims.len();
        let (bh, bw) = (dims[rank - 2], dims[rank - 1]);
        let s = (ll + lh)?;
        let t = (ll - lh)?;
        let u = (hl + hh)?;
        let v = (hl - hh)?;
        let a = ((&s + &u)? * 0.5)?;
        let b = ((&s - &u)? * 0.5)?;
        let c = ((&t + &v)? * 0.5)?;
        let d = ((&t - &v)? * 0.5)?;
        let mut row_shape = dims[..rank - 1].to_vec();
        row_shape.push(2 * bw);
        let top = Tensor::stack(&[a, b], D::Minus1)?.reshape(row_shape.as_slice())?;
        let bottom = Tensor::stack(&[c, d], D::Minus1)?.reshape(row_shape.as_slice())?;
        let mut out_shape = dims[..rank - 2].to_vec();
        out_shape.extend([2 * bh, 2 * bw]);
        Tensor::stack(&[top, bottom], rank - 1)?.reshape(out_shape)
    }
}
