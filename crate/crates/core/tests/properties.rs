//! Property tests for the transform, loss and metric invariants.

use proptest::prelude::*;

use wavec2r::data::{self, SyntheticStormSpec};
use wavec2r::losses::{self, FiblConfig, ScheduleDirection, ScheduleState};
use wavec2r::metrics::{self, ConfusionCounts};
use wavec2r::wavelet::{self, Basis, SubBand};
use wavec2r::Raster;

fn field(max_half: usize) -> impl Strategy<Value = Raster> {
    (1..=max_half, 1..=max_half).prop_flat_map(|(hh, hw)| {
        prop::collection::vec(-100.0f64..100.0, 4 * hh * hw)
            .prop_map(move |v| Raster::generic(2 * hh, 2 * hw, v).unwrap())
    })
}

fn pair(max_half: usize) -> impl Strategy<Value = (Raster, Raster)> {
    (1..=max_half, 1..=max_half).prop_flat_map(|(hh, hw)| {
        let n = 4 * hh * hw;
        (prop::collection::vec(-1.0f64..1.0, n), prop::collection::vec(-1.0f64..1.0, n)).prop_map(move |(a, b)| {
            (
                Raster::generic(2 * hh, 2 * hw, a).unwrap(),
                Raster::generic(2 * hh, 2 * hw, b).unwrap(),
            )
        })
    })
}

fn binary_pair(n: usize) -> impl Strategy<Value = (Raster, Raster)> {
    let cell = prop::bool::ANY.prop_map(|b| if b { 200.0 } else { 0.0 });
    (prop::collection::vec(cell.clone(), n * n), prop::collection::vec(cell, n * n))
        .prop_map(move |(a, b)| (Raster::generic(n, n, a).unwrap(), Raster::generic(n, n, b).unwrap()))
}

proptest! {
    #[test]
    fn dwt_roundtrip_and_parseval(f in field(8)) {
        let p = wavelet::dwt2(&f, Basis::HaarOrthonormal).unwrap();
        let back = wavelet::idwt2(&p).unwrap();
        prop_assert!(back.max_abs_diff(&f).unwrap() <= 1e-9);
        let e = f.sum_sq();
        prop_assert!((p.energy() - e).abs() <= 1e-9 * e.max(1.0));
    }

    #[test]
    fn dwt_is_linear((a, b) in pair(6), s in -3.0f64..3.0) {
        let combo = a.zip_map(&b, |x, y| s * x + y).unwrap();
        let pc = wavelet::dwt2(&combo, Basis::HaarOrthonormal).unwrap();
        let pa = wavelet::dwt2(&a, Basis::HaarOrthonormal).unwrap();
        let pb = wavelet::dwt2(&b, Basis::HaarOrthonormal).unwrap();
        for band in SubBand::ALL {
            let expect = pa.band(band).zip_map(pb.band(band), |x, y| s * x + y).unwrap();
            prop_assert!(pc.band(band).max_abs_diff(&expect).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn selective_parts_sum_to_whole(f in field(8)) {
        let p = wavelet::dwt2(&f, Basis::HaarOrthonormal).unwrap();
        let low = wavelet::selective_reconstruct(&p, &[SubBand::Ll]).unwrap();
        let high = wavelet::selective_reconstruct(&p, &SubBand::DETAIL).unwrap();
        let sum = low.zip_map(&high, |x, y| x + y).unwrap();
        prop_assert!(sum.max_abs_diff(&f).unwrap() <= 1e-9);
    }

    #[test]
    fn aggregate_high_matches_elementwise_sum(f in field(6)) {
        let p = wavelet::dwt2(&f, Basis::HaarOrthonormal).unwrap();
        let agg = wavelet::aggregate_high(&p).unwrap();
        for i in 0..agg.len() {
            let want = p.lh.values()[i] + p.hl.values()[i] + p.hh.values()[i];
            prop_assert_eq!(agg.values()[i], want);
        }
    }

    #[test]
    fn fibl_is_non_negative_symmetric_and_zero_on_identity((a, b) in pair(6), alpha in 0.0f64..5.0) {
        let cfg = FiblConfig::default().with_alpha(alpha);
        let ab = losses::fibl(&a, &b, &cfg).unwrap();
        let ba = losses::fibl(&b, &a, &cfg).unwrap();
        prop_assert!(ab.total >= 0.0);
        prop_assert!((ab.total - ba.total).abs() <= 1e-12);
        prop_assert_eq!(losses::fibl(&a, &a, &cfg).unwrap().total, 0.0);
    }

    #[test]
    fn fgl_ignores_circular_shifts((a, b) in pair(5), dy in 0usize..10, dx in 0usize..10) {
        let (h, w) = a.shape();
        let shift = |r: &Raster| Raster::from_fn(h, w, |y, x| r.get((y + dy) % h, (x + dx) % w)).unwrap();
        let base = losses::fgl(&a, &b).unwrap();
        let moved = losses::fgl(&shift(&a), &b).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * base.max(1.0));
        prop_assert!(losses::fgl(&a, &a).unwrap().abs() <= 1e-18);
    }

    #[test]
    fn confusion_matches_brute_force((p, t) in binary_pair(8), thr in 1.0f64..250.0) {
        let c = metrics::confusion(&p, &t, thr).unwrap();
        let mut want = ConfusionCounts::default();
        for y in 0..8 {
            for x in 0..8 {
                let (a, b) = (p.get(y, x) >= thr, t.get(y, x) >= thr);
                if a && b { want.tp += 1 } else if a { want.fp += 1 } else if b { want.fn_ += 1 } else { want.tn += 1 }
            }
        }
        prop_assert_eq!(c, want);
        prop_assert_eq!(c.total(), 64);
        prop_assert_eq!(metrics::pooled_csi(&p, &t, thr, 1).unwrap(), metrics::csi(&c));
        if let Some(v) = metrics::csi(&c) { prop_assert!((0.0..=1.0).contains(&v)); }
        if let Some(v) = metrics::hss(&c) { prop_assert!((-1.0..=1.0).contains(&v)); }
    }

    #[test]
    fn ssim_stays_in_range((a, b) in pair(6)) {
        let a = a.map(|v| (v + 1.0) / 2.0);
        let b = b.map(|v| (v + 1.0) / 2.0);
        let s = metrics::ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
    }

    #[test]
    fn event_counts_fall_with_threshold(f in field(6)) {
        let raw = f.map(|v| (v.abs() * 2.55).min(255.0));
        let counts: Vec<usize> = data::VIL_THRESHOLDS
            .iter()
            .map(|t| raw.values().iter().filter(|v| **v >= *t).count())
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn normalisation_roundtrips(seed in 0u64..1000) {
        let spec = SyntheticStormSpec { seed, height: 8, width: 8, ..SyntheticStormSpec::default() };
        let r = &data::generate_synthetic(&spec, 1).unwrap()[0];
        let back = data::denormalize(&data::normalize(r).unwrap()).unwrap();
        prop_assert!(back.target.max_abs_diff(&r.target).unwrap() <= 1e-9);
        for (a, b) in back.inputs.channels().iter().zip(r.inputs.channels()) {
            prop_assert!(a.max_abs_diff(b).unwrap() <= 1e-9);
        }
    }
}

#[test]
fn schedule_frequencies_follow_the_cosine() {
    let total = 100;
    for direction in [ScheduleDirection::AsWritten, ScheduleDirection::AsDescribed] {
        for step in [0, total / 2, total] {
            let mut s = ScheduleState::new(total, 11, direction).unwrap();
            s.set_step(step).unwrap();
            let n = 20_000;
            let fgl = (0..n).filter(|_| s.select() == losses::LossKind::Fgl).count();
            let freq = fgl as f64 / n as f64;
            prop_assert_close(freq, s.fgl_probability(), 0.015);
        }
    }
}

fn prop_assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b}");
}
