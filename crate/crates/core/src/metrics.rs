//! Forecast-verification and image-quality scores.
//!
//! Ratio scores are micro-averaged: confusion counts are pooled over all
//! samples before the ratio is taken. Thresholds with no observed and no
//! predicted events yield `None` and are skipped in averages.

use serde::{Deserialize, Serialize};

use crate::data::VIL_THRESHOLDS;
use crate::error::{ensure, Result};
use crate::raster::Raster;

/// Tag identifying the pooled-CSI convention written into reports.
pub const POOLING_RECIPE: &str = "maxpool-kernel-eq-stride/v1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.merge(o)
    }
}

pub fn confusion(pred: &Raster, target: &Raster, threshold: f64) -> Result<ConfusionCounts> {
    pred.ensure_same_shape(target)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.values().iter().zip(target.values()) {
        match (p >= threshold, t >= threshold) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn csi(c: &ConfusionCounts) -> Option<f64> {
    let d = c.tp + c.fp + c.fn_;
    (d > 0).then(|| c.tp as f64 / d as f64)
}

pub fn hss(c: &ConfusionCounts) -> Option<f64> {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let d = (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn);
    (d > 0.0).then(|| 2.0 * (tp * tn - fn_ * fp) / d)
}

/// Non-overlapping max pooling with kernel = stride = `pool`.
pub fn max_pool(r: &Raster, pool: usize) -> Result<Raster> {
    ensure!(pool >= 1, Validation, "pool size must be positive");
    let (h, w) = r.shape();
    ensure!(
        h % pool == 0 && w % pool == 0,
        Validation,
        "grid {h}x{w} is not divisible by pool size {pool}"
    );
    if pool == 1 {
        return Ok(r.clone());
    }
    let (ph, pw) = (h / pool, w / pool);
    let v = r.values();
    Ok(Raster::from_fn(ph, pw, |y, x| {
        let mut m = f64::NEG_INFINITY;
        for dy in 0..pool {
            for dx in 0..pool {
                m = m.max(v[(y * pool + dy) * w + x * pool + dx]);
            }
        }
        m
    })?
    .with_modality(r.modality()))
}

pub fn pooled_confusion(pred: &Raster, target: &Raster, threshold: f64, pool: usize) -> Result<ConfusionCounts> {
    pred.ensure_same_shape(target)?;
    confusion(&max_pool(pred, pool)?, &max_pool(target, pool)?, threshold)
}

pub fn pooled_csi(pred: &Raster, target: &Raster, threshold: f64, pool: usize) -> Result<Option<f64>> {
    Ok(csi(&pooled_confusion(pred, target, threshold, pool)?))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean local SSIM over every pixel. The Gaussian window is truncated at the
/// borders and renormalised over its in-grid support.
pub fn ssim(pred: &Raster, target: &Raster) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    let (h, w) = pred.shape();
    let k = ssim_kernel();
    let r = (SSIM_WINDOW / 2) as isize;
    let (a, b) = (pred.values(), target.values());
    let mut total = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut sw, mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let wt = k[(dy + r) as usize] * k[(dx + r) as usize];
                    let i = yy as usize * w + xx as usize;
                    sw += wt;
                    ma += wt * a[i];
                    mb += wt * b[i];
                    saa += wt * a[i] * a[i];
                    sbb += wt * b[i] * b[i];
                    sab += wt * a[i] * b[i];
                }
            }
            let (ma, mb) = (ma / sw, mb / sw);
            let va = (saa / sw - ma * ma).max(0.0);
            let vb = (sbb / sw - mb * mb).max(0.0);
            let cov = sab / sw - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
    }
    Ok(total / (h * w) as f64)
}

/// Converts a normalised VIL value to the raw 0–255 scale, rounding to 1e-6
/// so thresholds are not missed by floating-point residue.
pub fn to_raw(v: f64) -> f64 {
    (v * 255.0 * 1e6).round() / 1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScores {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub csi: Option<f64>,
    pub hss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub thresholds: Vec<ThresholdScores>,
    pub avg_csi: Option<f64>,
    pub avg_hss: Option<f64>,
    /// Mean over thresholds of the pooled CSI; `None` if the grid is not
    /// divisible by the pool size or no threshold is defined.
    pub csi_pool4: Option<f64>,
    pub csi_pool16: Option<f64>,
    pub ssim: f64,
    /// Reserved for an external perceptual-similarity adapter.
    pub lpips: Option<f64>,
    pub pooling_recipe: String,
}

fn mean_defined(xs: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores normalised predictions against normalised targets.
pub fn report(preds: &[Raster], targets: &[Raster]) -> Result<MetricReport> {
    ensure!(!preds.is_empty(), Validation, "cannot score an empty set");
    ensure!(
        preds.len() == targets.len(),
        Validation,
        "{} predictions for {} targets",
        preds.len(),
        targets.len()
    );
    let mut counts = [ConfusionCounts::default(); 5];
    let mut pool4: Option<[ConfusionCounts; 5]> = Some(Default::default());
    let mut pool16: Option<[ConfusionCounts; 5]> = Some(Default::default());
    let mut ssim_sum = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        p.ensure_same_shape(t)?;
        let (pr, tr) = (p.map(to_raw), t.map(to_raw));
        for (k, &thr) in VIL_THRESHOLDS.iter().enumerate() {
            counts[k] = counts[k] + confusion(&pr, &tr, thr)?;
        }
        for (slot, pool) in [(&mut pool4, 4), (&mut pool16, 16)] {
            if let Some(acc) = slot {
                match (max_pool(&pr, pool), max_pool(&tr, pool)) {
                    (Ok(pp), Ok(tp)) => {
                        for (k, &thr) in VIL_THRESHOLDS.iter().enumerate() {
                            acc[k] = acc[k] + confusion(&pp, &tp, thr)?;
                        }
                    }
                    _ => *slot = None,
                }
            }
        }
        ssim_sum += ssim(p, t)?;
    }
    let thresholds: Vec<ThresholdScores> = VIL_THRESHOLDS
        .iter()
        .zip(counts)
        .map(|(&threshold, counts)| ThresholdScores {
            threshold,
            counts,
            csi: csi(&counts),
            hss: hss(&counts),
        })
        .collect();
    let pooled = |acc: Option<[ConfusionCounts; 5]>| acc.and_then(|a| mean_defined(a.iter().map(csi)));
    Ok(MetricReport {
        samples: preds.len(),
        avg_csi: mean_defined(thresholds.iter().map(|s| s.csi)),
        avg_hss: mean_defined(thresholds.iter().map(|s| s.hss)),
        thresholds,
        csi_pool4: pooled(pool4),
        csi_pool16: pooled(pool16),
        ssim: ssim_sum / preds.len() as f64,
        lpips: None,
        pooling_recipe: POOLING_RECIPE.to_string(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "skip".to_string(), |x| format!("{x:.6}"))
}

impl MetricReport {
    /// Key/value text form, one `key = value` per line; `skip` marks an
    /// undefined score.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("samples = {}\n", self.samples));
        s.push_str(&format!("pooling_recipe = {}\n", self.pooling_recipe));
        for t in &self.thresholds {
            let g = t.threshold as u32;
            s.push_str(&format!("csi_{g} = {}\n", fmt_opt(t.csi)));
            s.push_str(&format!("hss_{g} = {}\n", fmt_opt(t.hss)));
            s.push_str(&format!(
                "counts_{g} = tp:{} fp:{} fn:{} tn:{}\n",
                t.counts.tp, t.counts.fp, t.counts.fn_, t.counts.tn
            ));
        }
        s.push_str(&format!("avg_csi = {}\n", fmt_opt(self.avg_csi)));
        s.push_str(&format!("avg_hss = {}\n", fmt_opt(self.avg_hss)));
        s.push_str(&format!("csi_pool4 = {}\n", fmt_opt(self.csi_pool4)));
        s.push_str(&format!("csi_pool16 = {}\n", fmt_opt(self.csi_pool16)));
        s.push_str(&format!("ssim = {:.6}\n", self.ssim));
        s.push_str(&format!("lpips = {}\n", fmt_opt(self.lpips)));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| crate::Error::Validation(format!("malformed report: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(h: usize, w: usize, v: &[f64]) -> Raster {
        Raster::generic(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let p = r(2, 2, &[80.0, 80.0, 0.0, 0.0]);
        let t = r(2, 2, &[80.0, 0.0, 80.0, 0.0]);
        let c = confusion(&p, &t, 74.0).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
        let same = confusion(&t, &t, 74.0).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));
        let vac = confusion(&p, &t, 300.0).unwrap();
        assert_eq!(vac, ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 4 });
        assert!(confusion(&p, &r(1, 4, &[0.0; 4]), 1.0).is_err());
    }

    #[test]
    fn score_examples() {
        assert_eq!(csi(&ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 0 }), Some(0.5));
        assert_eq!(csi(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 9 }), None);
        let h = hss(&ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 4 }).unwrap();
        assert!((h - 14.0 / 30.0).abs() < 1e-15);
        assert_eq!(hss(&ConfusionCounts { tp: 2, fp: 0, fn_: 0, tn: 3 }), Some(1.0));
        assert_eq!(hss(&ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 }), Some(0.0));
    }

    #[test]
    fn pooled_examples() {
        let mut p = vec![0.0; 64];
        let mut t = vec![0.0; 64];
        p[0] = 200.0;
        t[2 * 8 + 2] = 200.0;
        let (p, t) = (r(8, 8, &p), r(8, 8, &t));
        assert_eq!(pooled_csi(&p, &t, 100.0, 4).unwrap(), Some(1.0));
        assert_eq!(pooled_csi(&p, &t, 100.0, 1).unwrap(), csi(&confusion(&p, &t, 100.0).unwrap()));
        assert_eq!(pooled_csi(&p, &t, 100.0, 1).unwrap(), Some(0.0));
        let c = r(8, 8, &[150.0; 64]);
        for pool in [1, 2, 4, 8] {
            assert_eq!(pooled_csi(&c, &c, 100.0, pool).unwrap(), Some(1.0));
        }
        assert!(pooled_csi(&p, &t, 100.0, 3).is_err());
    }

    #[test]
    fn ssim_examples() {
        let t = Raster::from_fn(12, 12, |y, x| ((y + x) % 2) as f64).unwrap();
        assert!((ssim(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&t.map(|v| 1.0 - v), &t).unwrap() < 0.0);
        let (c1, c2) = (0.3, 0.7);
        let expect = (2.0 * c1 * c2 + C1) / (c1 * c1 + c2 * c2 + C1);
        let got = ssim(&Raster::filled(9, 9, c1), &Raster::filled(9, 9, c2)).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn report_perfect_and_additive() {
        let t = Raster::from_fn(16, 16, |y, x| ((y * 16 + x) as f64 / 255.0).min(1.0)).unwrap();
        let rep = report(&[t.clone()], &[t.clone()]).unwrap();
        for s in &rep.thresholds {
            assert!(s.csi.is_none_or(|v| v == 1.0));
        }
        assert!((rep.ssim - 1.0).abs() < 1e-12);
        let defined: Vec<f64> = rep.thresholds.iter().filter_map(|s| s.csi).collect();
        assert_eq!(rep.avg_csi.unwrap(), defined.iter().sum::<f64>() / defined.len() as f64);
        assert!(report(&[], &[]).is_err());

        let p2 = t.map(|v| (v * 1.1).min(1.0));
        let both = report(&[t.clone(), p2.clone()], &[t.clone(), t.clone()]).unwrap();
        let a = report(&[t.clone()], &[t.clone()]).unwrap();
        let b = report(&[p2], &[t]).unwrap();
        for k in 0..5 {
            let merged = a.thresholds[k].counts + b.thresholds[k].counts;
            assert_eq!(both.thresholds[k].counts, merged);
            assert_eq!(both.thresholds[k].csi, csi(&merged));
        }
        let back = MetricReport::from_json(&both.to_json()).unwrap();
        assert_eq!(back, both);
        assert!(both.to_text().contains("csi_219 = "));
    }
}
