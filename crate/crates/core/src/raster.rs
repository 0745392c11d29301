//! Single-channel gridded fields.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Sensor or product a raster came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vis,
    Ir069,
    Ir107,
    Lightning,
    Vil,
    Generic,
}

impl Modality {
    /// Canonical input channel order.
    pub const INPUTS: [Modality; 4] = [
        Modality::Vis,
        Modality::Ir069,
        Modality::Ir107,
        Modality::Lightning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Vis => "vis",
            Modality::Ir069 => "ir069",
            Modality::Ir107 => "ir107",
            Modality::Lightning => "lightning",
            Modality::Vil => "vil",
            Modality::Generic => "generic",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "vis" => Modality::Vis,
            "ir069" => Modality::Ir069,
            "ir107" => Modality::Ir107,
            "lightning" => Modality::Lightning,
            "vil" => Modality::Vil,
            "generic" => Modality::Generic,
            _ => return None,
        })
    }
}

/// Row-major H×W grid of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    values: Vec<f64>,
    height: usize,
    width: usize,
    modality: Modality,
}

impl Raster {
    pub fn new(height: usize, width: usize, values: Vec<f64>, modality: Modality) -> Result<Self> {
        ensure!(
            height > 0 && width > 0,
            Dimension,
            "raster dimensions must be positive, got {height}x{width}"
        );
        ensure!(
            values.len() == height * width,
            Dimension,
            "expected {} values for a {height}x{width} raster, got {}",
            height * width,
            values.len()
        );
        ensure!(
            values.iter().all(|v| v.is_finite()),
            Validation,
            "raster contains non-finite values"
        );
        Ok(Self {
            values,
            height,
            width,
            modality,
        })
    }

    pub fn generic(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(height, width, values, Modality::Generic)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && value.is_finite());
        Self {
            values: vec![value; height * width],
            height,
            width,
            modality: Modality::Generic,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::generic(height, width, values)
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Elementwise map; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        let values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Raster {
            values,
            ..*self
        }
    }

    pub fn zip_map(&self, other: &Raster, f: impl Fn(f64, f64) -> f64) -> Result<Raster> {
        self.ensure_same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Raster::new(self.height, self.width, values, self.modality)
    }

    pub fn ensure_same_shape(&self, other: &Raster) -> Result<()> {
        ensure!(
            self.shape() == other.shape(),
            Validation,
            "shape mismatch: {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        Ok(())
    }

    pub fn sum_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn mse(&self, other: &Raster) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Raster) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Symmetric (edge-mirroring) padding to even height and width.
    pub fn pad_to_even(&self) -> Raster {
        let h = self.height + self.height % 2;
        let w = self.width + self.width % 2;
        if (h, w) == self.shape() {
            return self.clone();
        }
        let mut values = Vec::with_capacity(h * w);
        for r in 0..h {
            let sr = r.min(self.height - 1);
            for c in 0..w {
                values.push(self.get(sr, c.min(self.width - 1)));
            }
        }
        Raster {
            values,
            height: h,
            width: w,
            modality: self.modality,
        }
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resample_bilinear(&self, height: usize, width: usize) -> Result<Raster> {
        ensure!(
            height > 0 && width > 0,
            Dimension,
            "target dimensions must be positive"
        );
        if (height, width) == self.shape() {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for c in 0..width {
                let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                let top = self.get(y0, x0) * (1.0 - tx) + self.get(y0, x1) * tx;
                let bottom = self.get(y1, x0) * (1.0 - tx) + self.get(y1, x1) * tx;
                values.push(top * (1.0 - ty) + bottom * ty);
            }
        }
        Raster::new(height, width, values, self.modality)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_lengths() {
        assert!(Raster::generic(2, 2, vec![0.0, 1.0, f64::NAN, 0.0]).is_err());
        assert!(Raster::generic(2, 2, vec![0.0; 3]).is_err());
        assert!(Raster::generic(0, 2, vec![]).is_err());
    }

    #[test]
    fn pad_mirrors_last_row_and_column() {
        let r = Raster::from_fn(3, 3, |i, j| (i * 3 + j) as f64).unwrap();
        let p = r.pad_to_even();
        assert_eq!(p.shape(), (4, 4));
        assert_eq!(p.get(3, 1), r.get(2, 1));
        assert_eq!(p.get(1, 3), r.get(1, 2));
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let c = Raster::filled(4, 6, 3.5);
        let up = c.resample_bilinear(8, 12).unwrap();
        assert!(up.values().iter().all(|&v| (v - 3.5).abs() < 1e-12));
        let r = Raster::from_fn(4, 4, |i, j| (i + j) as f64).unwrap();
        assert_eq!(r.resample_bilinear(4, 4).unwrap(), r);
    }

    #[test]
    fn bilinear_upsample_of_ramp_stays_monotone() {
        let r = Raster::from_fn(1, 4, |_, j| j as f64).unwrap();
        let up = r.resample_bilinear(1, 8).unwrap();
        assert!(up.values().windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(up.get(0, 0), 0.0);
        assert_eq!(up.get(0, 7), 3.0);
    }
}

/// Co-registered input channels, in canonical order with optional channels dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationStack {
    channels: Vec<Raster>,
}

impl ObservationStack {
    pub fn new(channels: Vec<Raster>) -> Result<Self> {
        ensure!(!channels.is_empty(), Validation, "observation stack needs at least one channel");
        let shape = channels[0].shape();
        ensure!(
            channels.iter().all(|c| c.shape() == shape),
            Validation,
            "all channels of an observation stack must share one shape"
        );
        let order: Vec<usize> = channels
            .iter()
            .map(|c| {
                Modality::INPUTS
                    .iter()
                    .position(|m| *m == c.modality())
                    .unwrap_or(usize::MAX)
            })
            .collect();
        ensure!(
            order.windows(2).all(|w| w[0] < w[1]) || order.iter().all(|&o| o == usize::MAX),
            Validation,
            "channels must follow the canonical order vis, ir069, ir107, lightning"
        );
        Ok(Self { channels })
    }

    pub fn channels(&self) -> &[Raster] {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.channels[0].shape()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.channels.iter().map(|c| c.modality()).collect()
    }

    /// The stack without the given modality.
    pub fn without(&self, modality: Modality) -> Result<Self> {
        Self::new(
            self.channels
                .iter()
                .filter(|c| c.modality() != modality)
                .cloned()
                .collect(),
        )
    }

    /// Flattened `C·H·W` values, channel-major.
    pub fn flat_values(&self) -> Vec<f64> {
        self.channels.iter().flat_map(|c| c.values().iter().copied()).collect()
    }
}
