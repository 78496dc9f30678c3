//! Classical blind estimators: a fixed decision cascade for the degradation
//! type followed by per-type parameter estimators.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::filter::Boundary;
use crate::image::Image;
use crate::resample::resize_bicubic;
use crate::spec::{DegradationSpec, DegradationType, ParamKey, IDENTITY3};
use crate::spectrum::RadialProfile;

/// Frozen decision constants of the classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    /// Mean luminance below which an image is low light.
    pub lowlight_luminance: f64,
    /// Mean dark channel above which an image is hazy.
    pub haze_dark_channel: f64,
    /// Normalized 95%-energy radius below which detail is missing.
    pub cutoff_radius: f64,
    /// Share of energy above half-Nyquist below which an image is blurred.
    pub hf_ratio: f64,
    /// Energy share defining the cutoff radius.
    pub energy_fraction: f64,
    /// Relative residual of a bicubic down-up cycle below which an image is
    /// taken to be an upsampled low-resolution frame.
    pub resample_residual: f64,
    /// Largest Gaussian-equivalent sigma of a bicubic resolution loss.
    pub lowres_max_sigma: f64,
    /// Confidence assigned to the fallback decision.
    pub fallback_confidence: f64,
}

pub const THRESHOLDS: Thresholds = Thresholds {
    lowlight_luminance: 0.15,
    haze_dark_channel: 0.5,
    cutoff_radius: 0.25,
    hf_ratio: 0.02,
    energy_fraction: 0.95,
    resample_residual: 0.02,
    lowres_max_sigma: 2.2,
    fallback_confidence: 0.25,
};

/// Side of the dark-channel min filter.
pub const DARK_PATCH: usize = 15;
/// Haze retained by the transmission estimate.
pub const HAZE_OMEGA: f64 = 0.95;
/// Share of brightest dark-channel pixels averaged for the airlight.
pub const AIRLIGHT_FRACTION: f64 = 0.001;
/// Power-law slope of the amplitude spectrum of clean scenes: the median over
/// the procedural suite, measured with the same band and noise-floor handling.
pub const REFERENCE_SLOPE: f64 = 1.3;
/// Radius band of the spectral fit in cycles/pixel.
const FIT_BAND: (f64, f64) = (0.02, 0.45);
/// Bins below this multiple of the noise floor are excluded from fits.
const SIGNAL_OVER_FLOOR: f64 = 4.0;
/// Log-amplitude depth below the peak over which spectra are fitted.
pub const DYNAMIC_RANGE: f64 = 5.0;
/// Gaussian-equivalent sigma of a bicubic resolution loss per unit of scale.
pub const SIGMA_PER_SCALE: f64 = 0.4;
/// Mean over the 99.5th percentile of clean linear intensity.
pub const LOWLIGHT_MEAN_RATIO: f64 = 0.26;
/// Typical 99.5th percentile of clean linear intensity.
pub const LOWLIGHT_HIGHLIGHT: f64 = 0.91;
const LOWLIGHT_PERCENTILE: f64 = 0.995;
const BISECTION_STEPS: usize = 30;
/// Smallest sigma reported, keeping the estimate inside the open lower bound.
pub const MIN_SIGMA: f64 = 0.05;

/// Predicted degradation with diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub spec: DegradationSpec,
    pub confidence: f64,
    pub features: BTreeMap<String, f64>,
    /// False when `spec` fails validation; such predictions are gated downstream.
    pub valid: bool,
}

impl Prediction {
    /// Wraps an externally produced spec, recording whether it validates.
    pub fn from_spec(spec: DegradationSpec) -> Self {
        let valid = spec.validate().is_ok();
        Prediction {
            spec,
            confidence: if valid { 1.0 } else { 0.0 },
            features: BTreeMap::new(),
            valid,
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "spec": self.spec.to_json(),
            "confidence": self.confidence,
            "valid": self.valid,
            "features": self.features,
        })
    }
}

/// Per-pixel minimum over channels followed by a square min filter of side `patch`.
pub fn dark_channel(img: &Image, patch: usize) -> Vec<f64> {
    let (w, h) = img.dims();
    let mins: Vec<f64> = img
        .data()
        .chunks_exact(3)
        .map(|p| p[0].min(p[1]).min(p[2]))
        .collect();
    min_filter(&mins, w, h, patch)
}

fn min_filter(plane: &[f64], w: usize, h: usize, patch: usize) -> Vec<f64> {
    let r = (patch / 2) as isize;
    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::INFINITY;
            for d in -r..=r {
                m = m.min(plane[y * w + Boundary::Reflect.index(x as isize + d, w)]);
            }
            rows[y * w + x] = m;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::INFINITY;
            for d in -r..=r {
                m = m.min(rows[Boundary::Reflect.index(y as isize + d, h) * w + x]);
            }
            out[y * w + x] = m;
        }
    }
    out
}

fn noise_floor(profile: &RadialProfile, power: &[f64]) -> f64 {
    let mut tail: Vec<f64> = profile
        .rho
        .iter()
        .zip(power)
        .filter(|(r, _)| **r >= FIT_BAND.1)
        .map(|(_, p)| *p)
        .collect();
    if tail.is_empty() {
        return 0.0;
    }
    tail.sort_by(f64::total_cmp);
    tail[tail.len() / 2]
}

/// Whitened log-amplitude samples `(rho, y)` over the fit band: the noise
/// floor is subtracted, bins that do not clear it are dropped, and `slope`
/// times `ln rho` is added to flatten a power-law scene spectrum. Bins more
/// than [`DYNAMIC_RANGE`] below the peak are dropped as well, where kernel
/// truncation rather than the Gaussian falloff shapes the spectrum.
pub fn whitened_band(profile: &RadialProfile, slope: f64) -> Vec<(f64, f64)> {
    let power = profile.mean_power();
    let floor = noise_floor(profile, &power);
    let pts: Vec<(f64, f64)> = profile
        .rho
        .iter()
        .zip(&power)
        .filter(|(r, p)| {
            (FIT_BAND.0..=FIT_BAND.1).contains(*r) && **p > SIGNAL_OVER_FLOOR * floor && **p > 0.0
        })
        .map(|(&r, &p)| (r, 0.5 * (p - floor).ln() + slope * r.ln()))
        .collect();
    let peak = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    pts.into_iter().filter(|p| p.1 >= peak - DYNAMIC_RANGE).collect()
}

/// Least-squares polynomial coefficients (constant first) of `y` in `u`.
fn poly_fit<const N: usize>(pts: &[(f64, f64)]) -> Option<[f64; N]> {
    if pts.len() < N {
        return None;
    }
    let mut a = [[0.0; N]; N];
    let mut b = [0.0; N];
    for &(u, y) in pts {
        let mut x = [1.0; N];
        for i in 1..N {
            x[i] = x[i - 1] * u;
        }
        for i in 0..N {
            b[i] += x[i] * y;
            for j in 0..N {
                a[i][j] += x[i] * x[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting
    for col in 0..N {
        let piv = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            for k in col..N {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for i in (0..N).rev() {
        let s: f64 = (i + 1..N).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Gaussian fit `y = b - 2 pi^2 sigma^2 rho^2` of a whitened band.
fn gaussian_sigma(pts: &[(f64, f64)]) -> Option<f64> {
    let sq: Vec<(f64, f64)> = pts.iter().map(|&(r, y)| (r * r, y)).collect();
    let [_, slope] = poly_fit::<2>(&sq)?;
    Some((-slope / (2.0 * PI * PI)).max(0.0).sqrt())
}

/// Scale factor whose bicubic resolution loss best matches a Gaussian-equivalent sigma.
fn scale_for_sigma(sigma: f64) -> u32 {
    let target = sigma / SIGMA_PER_SCALE;
    [2u32, 3, 4]
        .into_iter()
        .min_by(|a, b| (*a as f64 - target).abs().total_cmp(&(*b as f64 - target).abs()))
        .expect("non-empty")
}

/// Relative RMS change of a bicubic down-up cycle by `scale`. Frames that were
/// upsampled from that scale are nearly fixed points; blurred frames are not.
pub fn resample_residual(img: &Image, scale: u32) -> Result<f64> {
    let (w, h) = img.dims();
    let s = scale as usize;
    let small = resize_bicubic(img, (w / s).max(1), (h / s).max(1))?;
    let back = resize_bicubic(&small, w, h)?;
    let m = img.mean();
    let num: f64 = back.data().iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = img.data().iter().map(|b| (b - m).powi(2)).sum();
    Ok(if den > 0.0 { (num / den).sqrt() } else { 0.0 })
}

/// Diagnostic features feeding the cascade.
pub fn features(img: &Image) -> BTreeMap<String, f64> {
    let mut f = BTreeMap::new();
    f.insert("mean_luminance".into(), img.mean_luminance());
    let dc = dark_channel(img, DARK_PATCH);
    f.insert("dark_channel".into(), dc.iter().sum::<f64>() / dc.len() as f64);
    f.insert(
        "hf_ratio".into(),
        RadialProfile::of_luminance(img, false).energy_fraction_above(0.25),
    );
    let profile = RadialProfile::of_luminance(img, true);
    f.insert(
        "cutoff".into(),
        profile.energy_radius(THRESHOLDS.energy_fraction, 0.0) / 0.5,
    );
    let band = whitened_band(&profile, REFERENCE_SLOPE);
    if let Some(s) = gaussian_sigma(&band) {
        f.insert("sigma_fit".into(), s);
    }
    if let Some(s) = f.get("sigma_fit").copied() {
        if let Ok(r) = resample_residual(img, scale_for_sigma(s)) {
            f.insert("resample_residual".into(), r);
        }
    }
    f
}

fn margin_confidence(value: f64, threshold: f64) -> f64 {
    let rel = ((value - threshold) / threshold).abs();
    0.5 + 0.5 * rel.min(1.0)
}

/// Decision cascade over the features; returns the type, a confidence and the features.
pub fn classify_type(img: &Image) -> (DegradationType, f64, BTreeMap<String, f64>) {
    let f = features(img);
    let th = THRESHOLDS;
    let m = f["mean_luminance"];
    let d = f["dark_channel"];
    let c = f["cutoff"];
    let h = f["hf_ratio"];
    if m < th.lowlight_luminance {
        return (DegradationType::LowLight, margin_confidence(m, th.lowlight_luminance), f);
    }
    if d > th.haze_dark_channel {
        return (DegradationType::Haze, margin_confidence(d, th.haze_dark_channel), f);
    }
    if c < th.cutoff_radius {
        let conf = margin_confidence(c, th.cutoff_radius);
        let upsampled = match (f.get("sigma_fit"), f.get("resample_residual")) {
            (Some(&s), Some(&r)) => s < th.lowres_max_sigma && r < th.resample_residual,
            _ => false,
        };
        let t = if upsampled { DegradationType::LowRes } else { DegradationType::Blur };
        return (t, conf, f);
    }
    if h < th.hf_ratio {
        return (DegradationType::Blur, margin_confidence(h, th.hf_ratio), f);
    }
    (DegradationType::Haze, th.fallback_confidence, f)
}

/// Dark-channel airlight and transmission. Returns `(A, t, confidence)`.
///
/// The airlight is the mean value (largest channel) of the pixels holding the
/// brightest [`AIRLIGHT_FRACTION`] of the dark channel.
pub fn estimate_haze(img: &Image) -> (f64, f64, f64) {
    let (t_lo, t_hi) = ParamKey::Transmission.range();
    let (a_lo, a_hi) = ParamKey::AtmosphericLight.range();
    let dc = dark_channel(img, DARK_PATCH);
    let mut order: Vec<usize> = (0..dc.len()).collect();
    order.sort_by(|&i, &j| dc[j].total_cmp(&dc[i]).then(i.cmp(&j)));
    let k = ((dc.len() as f64 * AIRLIGHT_FRACTION).ceil() as usize).max(1);
    let data = img.data();
    let value = order[..k]
        .iter()
        .map(|&i| data[3 * i].max(data[3 * i + 1]).max(data[3 * i + 2]))
        .sum::<f64>()
        / k as f64;
    if !(value > 0.0) {
        return (a_lo, t_lo, 0.0);
    }
    let a = value.clamp(a_lo, a_hi);
    let dn = dark_channel(&img.map(|v| (v / a).min(1.0)), DARK_PATCH);
    let mean_dn = dn.iter().sum::<f64>() / dn.len() as f64;
    let t = (1.0 - HAZE_OMEGA * mean_dn).clamp(t_lo, t_hi);
    (a, t, 1.0)
}

/// Gaussian blur width from the spectral falloff against a reference scene
/// slope. Returns `(sigma, confidence)`; without a usable spectrum the range
/// midpoint is returned with confidence 0.
pub fn estimate_blur_sigma_with(img: &Image, reference_slope: f64) -> (f64, f64) {
    let (_, hi) = ParamKey::Sigma.range();
    let band = whitened_band(&RadialProfile::of_luminance(img, true), reference_slope);
    match gaussian_sigma(&band) {
        Some(s) => (s.clamp(MIN_SIGMA, hi), 1.0),
        None => (0.5 * hi, 0.0),
    }
}

pub fn estimate_blur_sigma(img: &Image) -> (f64, f64) {
    estimate_blur_sigma_with(img, REFERENCE_SLOPE)
}

/// Low-light parameters under an identity color matrix. Returns
/// `(gamma, gain, cam, confidence)`.
///
/// With linear output `(gain L)^gamma`, normalizing by the bright percentile
/// `p` gives `(lin / p)^(1/gamma) = L / L_hi`, so gamma is the exponent that
/// restores the clean mean-to-highlight ratio and the gain follows from `p`.
pub fn estimate_lowlight(img: &Image) -> (f64, f64, [f64; 9], f64) {
    let (g_lo, g_hi) = ParamKey::Gamma.range();
    let (_, gain_hi) = ParamKey::Gain.range();
    let midpoint = (0.5 * (g_lo + g_hi), 0.5 * gain_hi, IDENTITY3, 0.0);
    let Ok(lin) = img.srgb_to_linear() else {
        return midpoint;
    };
    let mut v = lin.data().to_vec();
    v.sort_by(f64::total_cmp);
    let p = v[((v.len() - 1) as f64 * LOWLIGHT_PERCENTILE).round() as usize];
    if !(p > 0.0) {
        return midpoint;
    }
    let ratio = |gamma: f64| {
        let inv = 1.0 / gamma;
        v.iter().map(|x| (x / p).min(1.0).powf(inv)).sum::<f64>() / v.len() as f64
    };
    // the ratio increases with gamma
    let (mut lo, mut hi) = (g_lo, g_hi);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) < LOWLIGHT_MEAN_RATIO {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let gamma = 0.5 * (lo + hi);
    let gain = (p.powf(1.0 / gamma) / LOWLIGHT_HIGHLIGHT).clamp(1e-3, gain_hi);
    (gamma, gain, IDENTITY3, 1.0)
}

/// Resolution-loss factor. With reference dimensions the factor is the exact
/// dimension ratio; blind, it is the factor whose bicubic loss matches the
/// Gaussian-equivalent width of the spectral falloff.
pub fn estimate_scale(img: &Image, reference_dims: Option<(usize, usize)>) -> Result<u32> {
    let (w, h) = img.dims();
    if let Some((rw, rh)) = reference_dims {
        let s = (rw as f64 / w as f64).round() as usize;
        if !(2..=4).contains(&s) || rw != s * w || rh != s * h {
            return Err(Error::Ambiguous(format!(
                "reference {rw}x{rh} is not a 2x, 3x or 4x multiple of {w}x{h}"
            )));
        }
        return Ok(s as u32);
    }
    let band = whitened_band(&RadialProfile::of_luminance(img, true), REFERENCE_SLOPE);
    let sigma = gaussian_sigma(&band)
        .ok_or_else(|| Error::Ambiguous("no spectral falloff to read a scale from".into()))?;
    Ok(scale_for_sigma(sigma))
}

/// Blind prediction.
pub fn predict(img: &Image) -> Result<Prediction> {
    predict_with_reference(img, None)
}

/// Prediction given the dimensions of the undegraded frame, when known. A
/// size change is only explained by resolution loss.
pub fn predict_with_reference(
    img: &Image,
    reference_dims: Option<(usize, usize)>,
) -> Result<Prediction> {
    let reference_dims = reference_dims.filter(|d| *d != img.dims());
    let (dtype, type_conf, mut features) = match reference_dims {
        Some(_) => (DegradationType::LowRes, 1.0, features(img)),
        None => classify_type(img),
    };
    let (spec, est_conf) = match dtype {
        DegradationType::Haze => {
            let (a, t, c) = estimate_haze(img);
            (DegradationSpec::haze(a, t), c)
        }
        DegradationType::LowLight => {
            let (gamma, gain, cam, c) = estimate_lowlight(img);
            (DegradationSpec::lowlight(gamma, gain, cam), c)
        }
        DegradationType::Blur => {
            let (s, c) = estimate_blur_sigma(img);
            (DegradationSpec::blur(s), c)
        }
        DegradationType::LowRes => (
            DegradationSpec::lowres(estimate_scale(img, reference_dims)?),
            1.0,
        ),
    };
    features.insert("type_confidence".into(), type_conf);
    features.insert("estimator_confidence".into(), est_conf);
    let valid = spec.validate().is_ok();
    Ok(Prediction {
        spec,
        confidence: if valid { type_conf * est_conf } else { 0.0 },
        features,
        valid,
    })
}
