//! Property tests for the invariants of every module.

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use duforge_core::cues::{build_composite, sobel_magnitude};
use duforge_core::dataset::procedural_clean;
use duforge_core::degrade::{apply_blur, apply_haze, apply_lowlight, degrade, lowlight_clip_fraction, transmission_from_depth};
use duforge_core::estimate::predict;
use duforge_core::filter::{convolve, gaussian_kernel, Boundary};
use duforge_core::metrics::{aggregate, psnr, score_understanding, ssim, PSNR_CAP};
use duforge_core::resample::resize_bicubic;
use duforge_core::restore::{restore, wiener_deconvolve_plane, RestoreOptions, WienerPadding};
use duforge_core::reward::{compute_reward, group_advantages};
use duforge_core::spectrum::fft2_log_amplitude;
use duforge_core::tokenizer::{decode, encode, QuantGrid};
use duforge_core::{DegradationSpec, DegradationType, Encoding, Image, ParamKey, ParamValue};

/// Sides are multiples of 12 so every scale divides them and the widest blur kernel fits.
fn image(lo: f64, hi: f64) -> impl Strategy<Value = Image> {
    (3usize..5, 3usize..5).prop_flat_map(move |(kw, kh)| {
        let (w, h) = (12 * kw, 12 * kh);
        prop::collection::vec(lo..=hi, w * h * 3)
            .prop_map(move |data| Image::new(w, h, data, Encoding::Srgb).unwrap())
    })
}

fn cam() -> impl Strategy<Value = [f64; 9]> {
    prop::array::uniform9(-0.1..0.1f64).prop_map(|noise| {
        let mut m = noise;
        for i in 0..3 {
            m[4 * i] += 1.0;
        }
        m
    })
}

fn spec() -> impl Strategy<Value = DegradationSpec> {
    prop_oneof![
        (0.6..=1.0f64, 0.1..=0.95f64).prop_map(|(a, t)| DegradationSpec::haze(a, t)),
        (1.2..=4.0f64, 0.01..=1.0f64, cam()).prop_map(|(g, k, c)| DegradationSpec::lowlight(g, k, c)),
        (0.05..=8.0f64).prop_map(DegradationSpec::blur),
        (2u32..=4).prop_map(DegradationSpec::lowres),
    ]
}

fn max_diff(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn convolution_is_linear(x in image(0.0, 1.0), seed in 0u64..1000, a in 0.0..0.6f64, sigma in 0.3..3.0f64) {
        let y = procedural_clean(seed, 48, 48).unwrap().crop(0, 0, x.width(), x.height()).unwrap();
        let b = 1.0 - a;
        let k = gaussian_kernel(sigma).unwrap();
        let mix = Image::new(x.width(), x.height(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(), Encoding::Srgb).unwrap();
        let lhs = convolve(&mix, &k, Boundary::Reflect).unwrap();
        let (cx, cy) = (convolve(&x, &k, Boundary::Reflect).unwrap(), convolve(&y, &k, Boundary::Reflect).unwrap());
        for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_and_resize_commute_with_mirroring(x in image(0.0, 1.0), sigma in 0.3..4.0f64, ow in 4usize..40, oh in 4usize..40) {
        let m = x.mirror_horizontal();
        prop_assert!(max_diff(&apply_blur(&m, sigma).unwrap(), &apply_blur(&x, sigma).unwrap().mirror_horizontal()) < 1e-6);
        prop_assert!(max_diff(&resize_bicubic(&m, ow, oh).unwrap(), &resize_bicubic(&x, ow, oh).unwrap().mirror_horizontal()) < 1e-6);
    }

    #[test]
    fn log_spectrum_ignores_constant_offsets(x in image(0.0, 0.5), c in 0.0..0.5f64) {
        let shifted = x.map(|v| v + c);
        let (a, b) = (fft2_log_amplitude(&x).unwrap(), fft2_log_amplitude(&shifted).unwrap());
        let (w, h) = x.dims();
        let dc = (h / 2) * w + w / 2;
        for (i, (p, q)) in a.data().chunks(3).zip(b.data().chunks(3)).enumerate() {
            if i != dc {
                prop_assert!((p[0] - q[0]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degradation_stays_in_range(x in image(0.0, 1.0), s in spec()) {
        let y = degrade(&x, &s).unwrap();
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(y.data().len() % 3, 0);
        if s.dtype != DegradationType::LowRes {
            prop_assert_eq!(y.dims(), x.dims());
        }
    }

    #[test]
    fn haze_is_affine(x in image(0.0, 1.0), alpha in 0.0..=1.0f64, a in 0.6..=1.0f64, t in 0.1..=0.95f64) {
        let y = x.map(|v| 1.0 - v);
        let mix = Image::new(x.width(), x.height(), x.data().iter().zip(y.data()).map(|(p, q)| alpha * p + (1.0 - alpha) * q).collect(), Encoding::Srgb).unwrap();
        let t = ParamValue::Scalar(t);
        let (hm, hx, hy) = (apply_haze(&mix, a, &t).unwrap(), apply_haze(&x, a, &t).unwrap(), apply_haze(&y, a, &t).unwrap());
        for ((m, p), q) in hm.data().iter().zip(hx.data()).zip(hy.data()) {
            prop_assert!((m - (alpha * p + (1.0 - alpha) * q)).abs() < 1e-6);
        }
    }

    #[test]
    fn dimming_never_brightens(x in image(0.0, 1.0), gamma in 1.0..4.0f64, gain in 0.01..=1.0f64, raw in prop::array::uniform9(0.0..1.0f64)) {
        let mut cam = raw;
        for row in 0..3 {
            let sum: f64 = cam[3 * row..3 * row + 3].iter().sum();
            for v in &mut cam[3 * row..3 * row + 3] {
                *v /= sum.max(1.0);
            }
        }
        if let Ok(y) = apply_lowlight(&x, gamma, gain, &cam) {
            prop_assert!(y.mean_luminance() <= x.mean_luminance() + 1e-12);
        }
    }

    #[test]
    fn blur_preserves_the_mean(x in image(0.0, 1.0), sigma in 0.3..3.0f64) {
        prop_assert!((apply_blur(&x, sigma).unwrap().mean() - x.mean()).abs() < 1e-4);
    }

    #[test]
    fn thicker_haze_moves_toward_airlight(x in image(0.0, 1.0), a in 0.6..=1.0f64, b1 in 0.1..2.0f64, db in 0.01..2.0f64) {
        let (w, h) = x.dims();
        let depth: Vec<f64> = (0..w * h).map(|i| 0.2 + (i % 7) as f64 * 0.1).collect();
        let dist = |beta: f64| {
            let t = transmission_from_depth(&depth, w, h, beta).unwrap();
            let y = apply_haze(&x, a, &t).unwrap();
            y.data().iter().map(|v| (v - a).abs()).collect::<Vec<_>>()
        };
        for (near, far) in dist(b1).iter().zip(dist(b1 + db)) {
            prop_assert!(far <= near + 1e-12);
        }
    }

    #[test]
    fn exact_inverse_without_clamping(x in image(0.05, 0.95), s in spec()) {
        let unclamped = match s.dtype {
            DegradationType::Haze => true,
            DegradationType::LowLight => {
                let gain = s.scalar(ParamKey::Gain).unwrap();
                lowlight_clip_fraction(&x, gain, &s.mat3(ParamKey::CamIntrinsics).unwrap()).unwrap() == 0.0
            }
            _ => false,
        };
        prop_assume!(unclamped);
        let back = restore(&degrade(&x, &s).unwrap(), &s, &RestoreOptions::default()).unwrap();
        prop_assert!(max_diff(&back, &x) < 1e-5);
    }

    #[test]
    fn wiener_inverse_is_non_expansive(x in image(0.0, 1.0), sigma in 0.3..4.0f64, lambda in 1e-6..1.0f64) {
        let (w, h) = x.dims();
        let plane = apply_blur(&x, sigma).unwrap().plane(0);
        let out = wiener_deconvolve_plane(&plane, w, h, sigma, lambda, WienerPadding::Mirror).unwrap();
        let energy = |p: &[f64]| p.iter().map(|v| v * v).sum::<f64>();
        prop_assert!(energy(&out) <= energy(&x.plane(0)) * (1.0 + 1e-9) + 1e-9);
    }

    #[test]
    fn restoration_is_deterministic(x in image(0.0, 1.0), s in spec()) {
        let o = RestoreOptions::default();
        let deg = degrade(&x, &s).unwrap();
        prop_assert_eq!(restore(&deg, &s, &o).unwrap(), restore(&deg, &s, &o).unwrap());
    }

    #[test]
    fn cues_are_valid_images(x in image(0.0, 1.0)) {
        let c = build_composite(&x).unwrap();
        for img in [&c.fft, &c.edge] {
            prop_assert_eq!(img.dims(), x.dims());
            prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn psnr_and_ssim_identities(x in image(0.0, 1.0), y in image(0.0, 1.0)) {
        prop_assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        if x.dims() == y.dims() {
            prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        }
    }

    #[test]
    fn aggregate_ignores_row_order(truths in prop::collection::vec(spec(), 2..12), preds in prop::collection::vec(prop::option::of(spec()), 12), rot in 0usize..12) {
        let rows: Vec<_> = truths.iter().zip(&preds).enumerate()
            .map(|(i, (t, p))| score_understanding(&i.to_string(), p.as_ref(), t))
            .collect();
        for r in &rows {
            for e in r.per_key.values() {
                prop_assert!(e.p_rel >= 0.0);
                if !(r.type_correct && r.keys_correct) {
                    prop_assert_eq!(e.p_rel, 1.0);
                }
            }
        }
        let mut rotated = rows.clone();
        rotated.rotate_left(rot % rows.len());
        let (a, b) = (aggregate(rows).unwrap(), aggregate(rotated).unwrap());
        prop_assert_eq!(a.t_acc, b.t_acc);
        prop_assert_eq!(a.j_acc, b.j_acc);
        prop_assert!(a.j_acc <= a.t_acc);
        prop_assert_eq!(a.per_key, b.per_key);
    }

    #[test]
    fn full_reference_reward_is_never_positive(x in image(0.0, 1.0), truth in spec(), pred in spec()) {
        prop_assume!(truth.dtype != DegradationType::LowRes);
        let deg = degrade(&x, &truth).unwrap();
        let r = compute_reward(&deg, &pred, &truth, &x).unwrap();
        prop_assert!(r.total <= 0.0);
        prop_assert_eq!(r.gated, r.r_rec.is_none());
        let again = compute_reward(&deg, &pred, &truth, &x).unwrap();
        prop_assert_eq!(r.total.to_bits(), again.total.to_bits());
    }

    #[test]
    fn advantages_are_centered_and_shift_invariant(r in prop::collection::vec(-1.0..0.0f64, 2..16), c in -10.0..10.0f64) {
        let a = group_advantages(&r).unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        let shifted: Vec<f64> = r.iter().map(|v| v + c).collect();
        for (p, q) in a.iter().zip(group_advantages(&shifted).unwrap()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn token_grammar_round_trips(s in spec(), di in 0usize..3) {
        let delta = [0.1, 0.05, 0.01][di];
        let grid = QuantGrid::new(delta).unwrap();
        let back = decode(&encode(&s, &grid).unwrap(), &grid).unwrap();
        prop_assert_eq!(back.dtype, s.dtype);
        prop_assert!(back.params.keys().eq(s.params.keys()));
        for (key, value) in &s.params {
            let (lo, hi) = grid.range(*key);
            let bound = delta * (hi - lo) / 2.0 + 1e-12;
            for (a, b) in value.elements().iter().zip(back.params[key].elements()) {
                prop_assert!((a - b).abs() <= bound, "{key}: {a} -> {b}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn predictions_validate_or_are_flagged(seed in 0u64..10_000, s in spec()) {
        let clean = procedural_clean(seed, 48, 48).unwrap();
        let deg = degrade(&clean, &s).unwrap().quantize_8bit();
        let p = predict(&deg).unwrap();
        prop_assert_eq!(p.valid, p.spec.validate().is_ok());
        prop_assert_eq!(&p, &predict(&deg).unwrap());
    }

    #[test]
    fn blur_lowers_edge_magnitude(seed in 0u64..10_000, sigma in 1.0..5.0f64) {
        let clean = procedural_clean(seed, 64, 64).unwrap();
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!(mean(sobel_magnitude(&apply_blur(&clean, sigma).unwrap())) < mean(sobel_magnitude(&clean)));
    }
}

#[test]
fn quantization_error_shrinks_with_delta() {
    let values: Vec<f64> = (0..=1000).map(|i| 0.1 + 0.85 * i as f64 / 1000.0).collect();
    let err = |delta: f64| {
        let grid = QuantGrid::new(delta).unwrap();
        values
            .iter()
            .map(|&t| {
                let s = DegradationSpec::haze(0.8, t);
                (decode(&encode(&s, &grid).unwrap(), &grid).unwrap().scalar(ParamKey::Transmission).unwrap() - t).abs()
            })
            .sum::<f64>()
            / values.len() as f64
    };
    let (a, b, c) = (err(0.1), err(0.05), err(0.01));
    assert!(a > b && b > c, "{a} {b} {c}");
    assert_abs_diff_eq!(c, 0.01 * 0.85 / 4.0, epsilon = 1e-3);
}
