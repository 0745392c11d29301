//! Storm events: synthetic generation, archive I/O, normalisation and
//! dataset splits.
//!
//! Raw scales follow the archive convention: VIL and visible reflectance on
//! 0–255, infrared as brightness temperature in kelvin, lightning as flash
//! counts per pixel.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::raster::{Modality, ObservationStack, Raster};

/// VIL thresholds on the raw 0–255 scale used throughout evaluation.
pub const VIL_THRESHOLDS: [f64; 5] = [74.0, 133.0, 160.0, 181.0, 219.0];

pub const RAW_MAX: f64 = 255.0;

/// Cross-channel couplings from the latent storm field to the input proxies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelCoupling {
    /// Visible reflectance gain of the cloud mask (0–255 units).
    pub vis_gain: f64,
    /// Cooling of the 6.9 µm band at full smoothed VIL (kelvin).
    pub ir069_cooling: f64,
    /// Cooling of the 10.7 µm band at full smoothed VIL (kelvin).
    pub ir107_cooling: f64,
    /// Mean flash count at saturated VIL.
    pub lightning_rate: f64,
    /// Standard deviation of the additive sensor noise, in raw units.
    pub noise: f64,
}

impl Default for ChannelCoupling {
    fn default() -> Self {
        Self {
            vis_gain: 190.0,
            ir069_cooling: 35.0,
            ir107_cooling: 80.0,
            lightning_rate: 4.0,
            noise: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticStormSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of storm cells per event.
    pub cells: (usize, usize),
    /// Peak cell amplitude on the raw VIL scale.
    pub amplitude: (f64, f64),
    /// Gaussian radius range along each principal axis, in pixels.
    pub radius: (f64, f64),
    /// Boundary steepness exponent; 1 leaves the mixture unchanged.
    pub front_sharpness: f64,
    pub coupling: ChannelCoupling,
}

impl Default for SyntheticStormSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 32,
            width: 32,
            cells: (2, 4),
            amplitude: (90.0, 250.0),
            radius: (2.0, 6.0),
            front_sharpness: 2.0,
            coupling: ChannelCoupling::default(),
        }
    }
}

impl SyntheticStormSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.height >= 2 && self.width >= 2, Validation, "grid must be at least 2x2");
        ensure!(
            self.cells.0 >= 1 && self.cells.0 <= self.cells.1,
            Validation,
            "cell count range {:?} is invalid",
            self.cells
        );
        let (lo, hi) = self.amplitude;
        ensure!(
            0.0 < lo && lo <= hi && hi <= RAW_MAX,
            Validation,
            "amplitude range {:?} must lie in (0, 255]",
            self.amplitude
        );
        ensure!(
            hi > VIL_THRESHOLDS[4],
            Validation,
            "amplitude upper bound {hi} cannot reach the top VIL threshold {}",
            VIL_THRESHOLDS[4]
        );
        ensure!(
            self.radius.0 > 0.0 && self.radius.0 <= self.radius.1,
            Validation,
            "radius range {:?} is invalid",
            self.radius
        );
        ensure!(
            self.front_sharpness >= 1.0 && self.front_sharpness.is_finite(),
            Validation,
            "front sharpness must be >= 1"
        );
        let c = &self.coupling;
        ensure!(
            [c.vis_gain, c.ir069_cooling, c.ir107_cooling, c.lightning_rate, c.noise]
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0),
            Validation,
            "coupling coefficients must be finite and non-negative"
        );
        Ok(())
    }
}

/// Affine map `normalised = (raw − offset) / scale` for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelScale {
    pub offset: f64,
    pub scale: f64,
}

impl ChannelScale {
    pub const UNIT_255: ChannelScale = ChannelScale { offset: 0.0, scale: RAW_MAX };

    fn min_max(r: &Raster) -> Self {
        let (lo, hi) = (r.min(), r.max());
        ChannelScale {
            offset: lo,
            scale: if hi > lo { hi - lo } else { 1.0 },
        }
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.scale + self.offset
    }
}

/// Constants used to normalise a record, one per input channel plus the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub inputs: Vec<ChannelScale>,
    pub target: ChannelScale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub id: String,
    pub inputs: ObservationStack,
    pub target: Raster,
    /// Unix seconds.
    pub timestamp: i64,
    /// Present once the record has been normalised.
    pub normalization: Option<Normalization>,
}

impl EventRecord {
    pub fn new(id: impl Into<String>, inputs: ObservationStack, target: Raster, timestamp: i64) -> Result<Self> {
        let id = id.into();
        ensure!(
            inputs.shape() == target.shape(),
            Validation,
            "event `{id}`: inputs {:?} and target {:?} differ in shape",
            inputs.shape(),
            target.shape()
        );
        Ok(Self {
            id,
            inputs,
            target: target.with_modality(Modality::Vil),
            timestamp,
            normalization: None,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.target.shape()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }
}

fn gaussian_blur(r: &Raster, sigma: f64) -> Raster {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = r.shape();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let o = k as isize - radius;
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + o).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + o).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += kv * src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    let once = pass(r.values(), true);
    Raster::generic(h, w, pass(&once, false)).expect("blur keeps values finite")
}

fn as_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn synth_event(spec: &SyntheticStormSpec, index: usize) -> Result<EventRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (h, w) = (spec.height, spec.width);
    let n_cells = rng.random_range(spec.cells.0..=spec.cells.1);
    let mut latent = vec![0.0; h * w];
    for k in 0..n_cells {
        // The first cell is the storm core; its peak sits on a pixel centre so
        // the maximum of the mixture is at least its amplitude.
        let amp = if k == 0 {
            rng.random_range(spec.amplitude.1.min(0.92 * RAW_MAX).max(spec.amplitude.0)..=spec.amplitude.1)
        } else {
            rng.random_range(spec.amplitude.0..=spec.amplitude.1)
        };
        let cy = rng.random_range(0..h) as f64;
        let cx = rng.random_range(0..w) as f64;
        let ry = rng.random_range(spec.radius.0..=spec.radius.1);
        let rx = rng.random_range(spec.radius.0..=spec.radius.1);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                latent[y * w + x] += amp * (-0.5 * (u * u / (rx * rx) + v * v / (ry * ry))).exp();
            }
        }
    }
    let p = spec.front_sharpness;
    let vil: Vec<f64> = latent
        .iter()
        .map(|&l| {
            let u = (l / RAW_MAX).clamp(0.0, 1.0);
            let up = u.powf(p);
            let sharp = up / (up + (1.0 - u).powf(p));
            (RAW_MAX * sharp).round()
        })
        .collect();
    let vil = Raster::new(h, w, vil, Modality::Vil)?;

    let c = spec.coupling;
    let noise = Normal::new(0.0, c.noise.max(1e-12)).expect("valid normal");
    let smooth = gaussian_blur(&vil, 2.0).map(|v| v / RAW_MAX);
    let cloud = gaussian_blur(&Raster::generic(h, w, latent.iter().map(|&l| if l > 20.0 { 1.0 } else { 0.0 }).collect())?, 1.5);
    let mut draw = |scale: f64| if c.noise > 0.0 { scale * noise.sample(&mut rng) } else { 0.0 };

    let vis: Vec<f64> = cloud
        .values()
        .iter()
        .map(|&m| (30.0 + c.vis_gain * m + draw(1.0)).round().clamp(0.0, RAW_MAX))
        .collect();
    let ir069: Vec<f64> = smooth
        .values()
        .iter()
        .map(|&s| as_f32(240.0 - c.ir069_cooling * s + draw(0.5)))
        .collect();
    let ir107: Vec<f64> = smooth
        .values()
        .iter()
        .map(|&s| as_f32(288.0 - c.ir107_cooling * s + draw(0.5)))
        .collect();
    let mut lightning = Vec::with_capacity(h * w);
    for &v in vil.values() {
        let excess = (v - VIL_THRESHOLDS[3]) / (RAW_MAX - VIL_THRESHOLDS[3]);
        let count = if excess > 0.0 && c.lightning_rate > 0.0 {
            Poisson::new(c.lightning_rate * excess).expect("positive rate").sample(&mut rng)
        } else {
            0.0
        };
        lightning.push(count);
    }

    let inputs = ObservationStack::new(vec![
        Raster::new(h, w, vis, Modality::Vis)?,
        Raster::new(h, w, ir069, Modality::Ir069)?,
        Raster::new(h, w, ir107, Modality::Ir107)?,
        Raster::new(h, w, lightning, Modality::Lightning)?,
    ])?;
    EventRecord::new(
        format!("S{:08x}{:04}", spec.seed as u32, index),
        inputs,
        vil,
        1_483_228_800 + 300 * index as i64,
    )
}

/// Generates `n` raw-scale events; record `i` depends only on `(spec, i)`.
pub fn generate_synthetic(spec: &SyntheticStormSpec, n: usize) -> Result<Vec<EventRecord>> {
    ensure!(n >= 1, Validation, "number of events must be at least 1");
    spec.validate()?;
    (0..n).map(|i| synth_event(spec, i)).collect()
}

/// Count of target pixels at or above each VIL threshold.
pub fn threshold_counts(records: &[EventRecord]) -> [usize; 5] {
    let mut counts = [0; 5];
    for r in records {
        let scale = r.normalization.as_ref().map(|n| n.target).unwrap_or(ChannelScale { offset: 0.0, scale: 1.0 });
        for &v in r.target.values() {
            let raw = scale.inverse(v);
            for (k, t) in VIL_THRESHOLDS.iter().enumerate() {
                if raw >= *t {
                    counts[k] += 1;
                }
            }
        }
    }
    counts
}

/// Maps a raw record to `[0, 1]`: VIL and visible by `/255`, infrared and
/// lightning by per-record min–max.
pub fn normalize(record: &EventRecord) -> Result<EventRecord> {
    ensure!(!record.is_normalized(), Validation, "event `{}` is already normalised", record.id);
    let mut scales = Vec::with_capacity(record.inputs.num_channels());
    let mut channels = Vec::with_capacity(record.inputs.num_channels());
    for ch in record.inputs.channels() {
        let scale = match ch.modality() {
            Modality::Vis | Modality::Vil => ChannelScale::UNIT_255,
            _ => ChannelScale::min_max(ch),
        };
        channels.push(ch.map(|v| scale.forward(v)));
        scales.push(scale);
    }
    Ok(EventRecord {
        id: record.id.clone(),
        inputs: ObservationStack::new(channels)?,
        target: record.target.map(|v| ChannelScale::UNIT_255.forward(v)),
        timestamp: record.timestamp,
        normalization: Some(Normalization {
            inputs: scales,
            target: ChannelScale::UNIT_255,
        }),
    })
}

pub fn denormalize(record: &EventRecord) -> Result<EventRecord> {
    let norm = record
        .normalization
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("event `{}` is not normalised", record.id)))?;
    let channels = record
        .inputs
        .channels()
        .iter()
        .zip(&norm.inputs)
        .map(|(ch, s)| ch.map(|v| s.inverse(v)))
        .collect();
    Ok(EventRecord {
        id: record.id.clone(),
        inputs: ObservationStack::new(channels)?,
        target: record.target.map(|v| norm.target.inverse(v)),
        timestamp: record.timestamp,
        normalization: None,
    })
}

/// Seeded partition into train/validation/test by event id.
pub fn split(
    records: Vec<EventRecord>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<EventRecord>, Vec<EventRecord>, Vec<EventRecord>)> {
    ensure!(
        fractions.iter().all(|f| f.is_finite() && *f >= 0.0) && (fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9,
        Validation,
        "split fractions {fractions:?} must be non-negative and sum to 1"
    );
    let ids: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    ensure!(ids.len() == records.len(), Validation, "event ids must be unique");

    let mut records = records;
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    let n = records.len();
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let test = records.split_off(n_train + n_val);
    let val = records.split_off(n_train);
    Ok((records, val, test))
}

/// Binary fixture archive.
///
/// Layout, all integers little-endian:
///
/// ```text
/// magic     8 bytes   "WC2RARCH"
/// version   u32       1
/// count     u32       number of event groups
/// per event group:
///   id        u16 length + UTF-8 bytes
///   timestamp i64 (unix seconds)
///   arrays    u16 count
///   per array:
///     name    u16 length + UTF-8 bytes (vis, ir069, ir107, lightning, vil)
///     dtype   u8   1 = unsigned 8-bit, 2 = 32-bit float
///     height  u32
///     width   u32
///     payload height·width elements, row-major
/// ```
///
/// Arrays whose values are all integers in 0–255 are stored as u8, others as f32.
pub mod archive {
    use super::*;

    pub const MAGIC: &[u8; 8] = b"WC2RARCH";
    pub const VERSION: u32 = 1;
    const DTYPE_U8: u8 = 1;
    const DTYPE_F32: u8 = 2;

    fn push_str(buf: &mut Vec<u8>, s: &str) {
        buf.extend((s.len() as u16).to_le_bytes());
        buf.extend(s.as_bytes());
    }

    fn push_array(buf: &mut Vec<u8>, r: &Raster) {
        push_str(buf, r.modality().name());
        let as_u8 = r.values().iter().all(|&v| v.fract() == 0.0 && (0.0..=255.0).contains(&v));
        buf.push(if as_u8 { DTYPE_U8 } else { DTYPE_F32 });
        buf.extend((r.height() as u32).to_le_bytes());
        buf.extend((r.width() as u32).to_le_bytes());
        for &v in r.values() {
            if as_u8 {
                buf.push(v as u8);
            } else {
                buf.extend((v as f32).to_le_bytes());
            }
        }
    }

    pub fn encode(records: &[EventRecord]) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend(MAGIC);
        buf.extend(VERSION.to_le_bytes());
        buf.extend((records.len() as u32).to_le_bytes());
        for r in records {
            ensure!(!r.is_normalized(), Validation, "event `{}`: archives hold raw-scale values", r.id);
            push_str(&mut buf, &r.id);
            buf.extend(r.timestamp.to_le_bytes());
            buf.extend((r.inputs.num_channels() as u16 + 1).to_le_bytes());
            for ch in r.inputs.channels() {
                push_array(&mut buf, ch);
            }
            push_array(&mut buf, &r.target);
        }
        Ok(buf)
    }

    /// Writes raw-scale records to `path`.
    pub fn write_fixture(path: &Path, records: &[EventRecord]) -> Result<()> {
        let bytes = encode(records)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
        context: String,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.pos + n > self.bytes.len() {
                return Err(Error::Corrupt {
                    id: self.context.clone(),
                    reason: format!("unexpected end of file at byte {}", self.pos),
                });
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        fn u8(&mut self) -> Result<u8> {
            Ok(self.take(1)?[0])
        }

        fn u16(&mut self) -> Result<u16> {
            Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
        }

        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }

        fn i64(&mut self) -> Result<i64> {
            Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }

        fn string(&mut self) -> Result<String> {
            let n = self.u16()? as usize;
            String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.corrupt("invalid UTF-8 string"))
        }

        fn corrupt(&self, reason: &str) -> Error {
            Error::Corrupt {
                id: self.context.clone(),
                reason: reason.to_string(),
            }
        }
    }

    struct RawGroup {
        id: String,
        timestamp: i64,
        arrays: Vec<(String, Raster)>,
    }

    fn read_group(rd: &mut Reader) -> Result<RawGroup> {
        rd.context = "<group header>".into();
        let id = rd.string()?;
        rd.context = id.clone();
        let timestamp = rd.i64()?;
        let n = rd.u16()? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let name = rd.string()?;
            let dtype = rd.u8()?;
            let h = rd.u32()? as usize;
            let w = rd.u32()? as usize;
            let values: Vec<f64> = match dtype {
                DTYPE_U8 => rd.take(h * w)?.iter().map(|&b| b as f64).collect(),
                DTYPE_F32 => rd
                    .take(4 * h * w)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                other => return Err(rd.corrupt(&format!("array `{name}` has unknown dtype {other}"))),
            };
            let modality = Modality::from_name(&name).unwrap_or(Modality::Generic);
            let raster = Raster::new(h, w, values, modality).map_err(|e| rd.corrupt(&format!("array `{name}`: {e}")))?;
            arrays.push((name, raster));
        }
        Ok(RawGroup { id, timestamp, arrays })
    }

    fn assemble(group: RawGroup) -> Result<EventRecord> {
        let find = |m: Modality| -> Result<Raster> {
            group
                .arrays
                .iter()
                .find(|(n, _)| n == m.name())
                .map(|(_, r)| r.clone())
                .ok_or_else(|| Error::MissingModality {
                    id: group.id.clone(),
                    modality: m.name().into(),
                })
        };
        let target = find(Modality::Vil)?;
        ensure!(
            target.min() >= 0.0 && target.max() <= RAW_MAX,
            Validation,
            "event `{}`: VIL outside the raw 0–255 range",
            group.id
        );
        let (h, w) = target.shape();
        let mut channels = Vec::with_capacity(4);
        for m in Modality::INPUTS {
            channels.push(find(m)?.resample_bilinear(h, w)?.with_modality(m));
        }
        EventRecord::new(group.id.clone(), ObservationStack::new(channels)?, target, group.timestamp)
    }

    pub fn decode_all(bytes: &[u8]) -> Result<Vec<EventRecord>> {
        let mut rd = Reader {
            bytes,
            pos: 0,
            context: "<archive header>".into(),
        };
        if rd.take(8)? != MAGIC {
            return Err(rd.corrupt("bad magic"));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(rd.corrupt(&format!("unsupported version {version}")));
        }
        let count = rd.u32()? as usize;
        (0..count).map(|_| assemble(read_group(&mut rd)?)).collect()
    }

    /// Decodes every group, assembling each event independently so one bad
    /// event does not hide the others. Header corruption is still fatal.
    pub fn decode_each(bytes: &[u8]) -> Result<Vec<(String, Result<EventRecord>)>> {
        let mut rd = Reader {
            bytes,
            pos: 0,
            context: "<archive header>".into(),
        };
        if rd.take(8)? != MAGIC {
            return Err(rd.corrupt("bad magic"));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(rd.corrupt(&format!("unsupported version {version}")));
        }
        let count = rd.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let group = read_group(&mut rd)?;
            let id = group.id.clone();
            out.push((id, assemble(group)));
        }
        Ok(out)
    }

    pub fn load_each(path: &Path) -> Result<Vec<(String, Result<EventRecord>)>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_each(&bytes)
    }

    /// Loads events, resampling every input to the VIL grid. `ids = None`
    /// loads every event in file order.
    pub fn load_archive(path: &Path, ids: Option<&[String]>) -> Result<Vec<EventRecord>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let all = decode_all(&bytes)?;
        match ids {
            None => Ok(all),
            Some(ids) => ids
                .iter()
                .map(|id| {
                    all.iter().find(|r| &r.id == id).cloned().ok_or_else(|| Error::EventNotFound {
                        id: id.clone(),
                        path: path.to_path_buf(),
                    })
                })
                .collect(),
        }
    }
}

pub use archive::{load_archive, write_fixture};

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticStormSpec {
        SyntheticStormSpec {
            seed: 17,
            height: 16,
            width: 24,
            ..SyntheticStormSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let a = generate_synthetic(&small_spec(), 4).unwrap();
        let b = generate_synthetic(&small_spec(), 4).unwrap();
        assert_eq!(a, b);
        let longer = generate_synthetic(&small_spec(), 6).unwrap();
        assert_eq!(&longer[..4], &a[..]);
        for r in &a {
            assert!(r.target.min() >= 0.0 && r.target.max() <= 255.0);
            assert_eq!(r.inputs.modalities(), Modality::INPUTS.to_vec());
            assert!(r.inputs.channels()[3].min() >= 0.0);
            assert_eq!(r.shape(), (16, 24));
        }
        assert!(generate_synthetic(&small_spec(), 0).is_err());
    }

    #[test]
    fn batches_of_eight_cover_every_threshold() {
        for seed in 0..5 {
            let recs = generate_synthetic(&SyntheticStormSpec { seed, ..SyntheticStormSpec::default() }, 8).unwrap();
            // Brute-force count per threshold.
            let counts: Vec<usize> = VIL_THRESHOLDS
                .iter()
                .map(|t| recs.iter().flat_map(|r| r.target.values()).filter(|v| **v >= *t).count())
                .collect();
            assert!(counts[4] > 0, "seed {seed}: {counts:?}");
            assert!(counts.windows(2).all(|w| w[0] >= w[1]));
            assert_eq!(threshold_counts(&recs).to_vec(), counts);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            SyntheticStormSpec { cells: (3, 2), ..small_spec() },
            SyntheticStormSpec { amplitude: (10.0, 300.0), ..small_spec() },
            SyntheticStormSpec { amplitude: (10.0, 200.0), ..small_spec() },
            SyntheticStormSpec { radius: (0.0, 2.0), ..small_spec() },
            SyntheticStormSpec { front_sharpness: 0.5, ..small_spec() },
        ];
        for spec in bad {
            assert!(matches!(generate_synthetic(&spec, 1), Err(Error::Validation(_))));
        }
    }

    #[test]
    fn normalization_endpoints_and_roundtrip() {
        let recs = generate_synthetic(&small_spec(), 3).unwrap();
        for r in &recs {
            let n = normalize(r).unwrap();
            for (raw, norm) in r.target.values().iter().zip(n.target.values()) {
                assert_eq!(*norm, raw / 255.0);
                assert_eq!(*raw >= 219.0, *norm >= 219.0 / 255.0);
            }
            for ch in n.inputs.channels() {
                assert!(ch.min() >= 0.0 && ch.max() <= 1.0 + 1e-12);
            }
            let back = denormalize(&n).unwrap();
            for (a, b) in back.inputs.flat_values().iter().zip(r.inputs.flat_values()) {
                assert!((a - b).abs() <= 1e-6);
            }
            assert!(back.target.max_abs_diff(&r.target).unwrap() <= 1e-6);
            assert!(normalize(&n).is_err());
        }
        assert_eq!(ChannelScale::UNIT_255.forward(255.0), 1.0);
        assert_eq!(ChannelScale::UNIT_255.forward(0.0), 0.0);
        assert!((219.0_f64 / 255.0 - 0.8588).abs() < 1e-4);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let spec = SyntheticStormSpec { height: 8, width: 8, ..small_spec() };
        let recs = generate_synthetic(&spec, 10).unwrap();
        let (tr, va, te) = split(recs.clone(), [0.8, 0.1, 0.1], 4).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
        let (tr2, va2, te2) = split(recs.clone(), [0.8, 0.1, 0.1], 4).unwrap();
        assert_eq!((tr, va, te), (tr2, va2, te2));
        assert!(split(recs.clone(), [0.5, 0.1, 0.1], 4).is_err());
        assert!(split(recs, [1.2, -0.1, -0.1], 4).is_err());
    }

    #[test]
    fn archive_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.wca");
        let recs = generate_synthetic(&small_spec(), 2).unwrap();
        write_fixture(&path, &recs).unwrap();
        let loaded = load_archive(&path, None).unwrap();
        assert_eq!(loaded, recs);

        let one = load_archive(&path, Some(&[recs[1].id.clone()])).unwrap();
        assert_eq!(one[0], recs[1]);
        match load_archive(&path, Some(&["nope".to_string()])) {
            Err(Error::EventNotFound { id, .. }) => assert_eq!(id, "nope"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(load_archive(&dir.path().join("missing"), None), Err(Error::Io { .. })));

        let bytes = std::fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() - 10];
        match archive::decode_all(truncated) {
            Err(Error::Corrupt { id, .. }) => assert_eq!(id, recs[1].id),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn archive_missing_modality_and_resampling() {
        let r = &generate_synthetic(&small_spec(), 1).unwrap()[0];
        // Hand-assemble an event with half-resolution infrared and no lightning.
        let mut buf = Vec::new();
        buf.extend(archive::MAGIC);
        buf.extend(1u32.to_le_bytes());
        buf.extend(1u32.to_le_bytes());
        let put_str = |buf: &mut Vec<u8>, s: &str| {
            buf.extend((s.len() as u16).to_le_bytes());
            buf.extend(s.as_bytes());
        };
        put_str(&mut buf, "E1");
        buf.extend(0i64.to_le_bytes());
        buf.extend(2u16.to_le_bytes());
        put_str(&mut buf, "vil");
        buf.push(1);
        buf.extend(16u32.to_le_bytes());
        buf.extend(24u32.to_le_bytes());
        buf.extend(r.target.values().iter().map(|&v| v as u8));
        put_str(&mut buf, "vis");
        buf.push(2);
        buf.extend(8u32.to_le_bytes());
        buf.extend(12u32.to_le_bytes());
        for _ in 0..96 {
            buf.extend(1.5f32.to_le_bytes());
        }
        match archive::decode_all(&buf) {
            Err(Error::MissingModality { id, modality }) => {
                assert_eq!(id, "E1");
                assert_eq!(modality, "ir069");
            }
            other => panic!("unexpected {other:?}"),
        }
        let each = archive::decode_each(&buf).unwrap();
        assert_eq!(each.len(), 1);
        assert!(matches!(each[0].1, Err(Error::MissingModality { .. })));

        // With every modality present, half-resolution inputs are resampled
        // to the VIL grid.
        for name in ["ir069", "ir107", "lightning"] {
            put_str(&mut buf, name);
            buf.push(2);
            buf.extend(8u32.to_le_bytes());
            buf.extend(12u32.to_le_bytes());
            for _ in 0..96 {
                buf.extend(3.0f32.to_le_bytes());
            }
        }
        let n_arrays = 8 + 4 + 4 + 2 + 2 + 8;
        buf[n_arrays..n_arrays + 2].copy_from_slice(&5u16.to_le_bytes());
        let rec = &archive::decode_all(&buf).unwrap()[0];
        assert_eq!(rec.inputs.shape(), (16, 24));
        assert!(rec.inputs.channels()[0].values().iter().all(|v| (v - 1.5).abs() < 1e-12));
    }
}
