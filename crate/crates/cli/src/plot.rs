//! Static PNG figures: event panels on the VIL colour scale and
//! per-threshold score charts.

use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

use wavec2r::data::{self, EventRecord, VIL_THRESHOLDS};
use wavec2r::metrics::{self, MetricReport};
use wavec2r::{Error, Raster, Result};

/// Colour of each VIL level; level `k` covers `[VIL_THRESHOLDS[k-1], VIL_THRESHOLDS[k])`.
pub const LEVEL_COLORS: [[u8; 3]; 6] = [
    [236, 236, 236],
    [60, 180, 90],
    [245, 215, 50],
    [240, 140, 40],
    [215, 40, 40],
    [140, 40, 165],
];

const SCALE: u32 = 4;
const GAP: u32 = 4;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

/// Level of a raw VIL value: the number of thresholds it reaches.
pub fn level_index(raw: f64) -> usize {
    VIL_THRESHOLDS.iter().filter(|t| raw >= **t).count()
}

pub fn vil_color(raw: f64) -> Rgb<u8> {
    Rgb(LEVEL_COLORS[level_index(raw)])
}

fn gray(v: f64) -> Rgb<u8> {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([g, g, g])
}

fn blit(img: &mut RgbImage, x0: u32, r: &Raster, color: impl Fn(f64) -> Rgb<u8>) {
    for y in 0..r.height() {
        for x in 0..r.width() {
            let c = color(r.get(y, x));
            for dy in 0..SCALE {
                for dx in 0..SCALE {
                    img.put_pixel(x0 + x as u32 * SCALE + dx, y as u32 * SCALE + dy, c);
                }
            }
        }
    }
}

/// Inputs in grey, then coarse, refined and target on the VIL scale.
/// `coarse` and `refined` are normalised fields.
pub fn event_panel(record: &EventRecord, coarse: Option<&Raster>, refined: Option<&Raster>) -> Result<RgbImage> {
    let norm = data::normalize(record)?;
    let (h, w) = record.shape();
    for r in [coarse, refined].into_iter().flatten() {
        if r.shape() != (h, w) {
            return Err(Error::Validation(format!(
                "event `{}`: prediction {:?} does not match target {:?}",
                record.id,
                r.shape(),
                (h, w)
            )));
        }
    }
    let fields: Vec<(&Raster, bool)> = norm
        .inputs
        .channels()
        .iter()
        .map(|c| (c, false))
        .chain(coarse.map(|c| (c, true)))
        .chain(refined.map(|c| (c, true)))
        .chain(std::iter::once((&norm.target, true)))
        .collect();
    let pw = w as u32 * SCALE;
    let width = fields.len() as u32 * (pw + GAP) - GAP;
    let mut img = RgbImage::from_pixel(width, h as u32 * SCALE, WHITE);
    for (i, (field, vil)) in fields.into_iter().enumerate() {
        let x0 = i as u32 * (pw + GAP);
        if vil {
            blit(&mut img, x0, field, |v| vil_color(metrics::to_raw(v)));
        } else {
            blit(&mut img, x0, field, gray);
        }
    }
    Ok(img)
}

/// Paired CSI (blue) and HSS (orange) bars per threshold, each group capped
/// by a swatch of the threshold's VIL colour. Undefined scores draw no bar.
pub fn score_chart(report: &MetricReport) -> RgbImage {
    const BAR: u32 = 18;
    const GROUP: u32 = 3 * BAR;
    const UNIT: f64 = 120.0;
    const TOP: u32 = 20;
    let baseline = TOP + UNIT as u32;
    let height = baseline + UNIT as u32 + 10;
    let width = report.thresholds.len() as u32 * (GROUP + BAR) + BAR;
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let mut rect = |x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb<u8>| {
        for y in y0..y1 {
            for x in x0..x1 {
                img.put_pixel(x, y, c);
            }
        }
    };
    rect(0, baseline, width, baseline + 1, Rgb([0, 0, 0]));
    for (i, s) in report.thresholds.iter().enumerate() {
        let x = BAR + i as u32 * (GROUP + BAR);
        rect(x, 4, x + 2 * BAR, 14, vil_color(s.threshold));
        for (j, (score, color)) in [(s.csi, Rgb([50, 100, 200])), (s.hss, Rgb([230, 130, 30]))].into_iter().enumerate() {
            let Some(v) = score else { continue };
            let len = (v.abs().min(1.0) * UNIT).round() as u32;
            let bx = x + j as u32 * BAR;
            if v >= 0.0 {
                rect(bx, baseline - len, bx + BAR - 2, baseline, color);
            } else {
                rect(bx, baseline + 1, bx + BAR - 2, baseline + 1 + len, color);
            }
        }
    }
    img
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_boundaries_sit_on_thresholds() {
        assert_eq!(level_index(0.0), 0);
        for (k, t) in VIL_THRESHOLDS.iter().enumerate() {
            assert_eq!(level_index(*t), k + 1, "at {t}");
            assert_eq!(level_index(t - 1e-9), k, "below {t}");
        }
        assert_eq!(level_index(255.0), 5);
        for raw in 0..=255 {
            let changes = level_index(raw as f64) != level_index(raw as f64 - 1.0);
            assert_eq!(changes && raw > 0, VIL_THRESHOLDS.contains(&(raw as f64)));
        }
    }
}
