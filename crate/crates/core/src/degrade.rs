//! Forward degradation operators.

use crate::error::{Error, Result};
use crate::filter::{convolve, gaussian_kernel, Boundary};
use crate::image::{clamp01, Encoding, Image};
use crate::resample::resize_bicubic;
use crate::spec::{det3, DegradationSpec, DegradationType, ParamKey, ParamValue, MIN_CAM_DET};

/// Per-pixel transmission lookup: scalar broadcast or a map matching the image.
pub(crate) fn transmission_at(t: &ParamValue, w: usize, h: usize) -> Result<Vec<f64>> {
    match t {
        ParamValue::Scalar(v) => Ok(vec![*v; w * h]),
        ParamValue::Map { width, height, data } => {
            if (*width, *height) != (w, h) {
                return Err(Error::DimensionMismatch(format!(
                    "transmission map {width}x{height} vs image {w}x{h}"
                )));
            }
            Ok(data.clone())
        }
        _ => Err(Error::InvalidParameter("transmission must be a scalar or a map".into())),
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidParameter(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

/// Atmospheric scattering: `I = J t + A (1 - t)`, applied to the stored values.
pub fn apply_haze(clean: &Image, airlight: f64, t: &ParamValue) -> Result<Image> {
    check_unit("atmospheric light", airlight)?;
    let (w, h) = clean.dims();
    let tmap = transmission_at(t, w, h)?;
    for &v in &tmap {
        check_unit("transmission", v)?;
    }
    let mut data = Vec::with_capacity(w * h * 3);
    for (px, &tv) in clean.data().chunks_exact(3).zip(&tmap) {
        for &c in px {
            data.push(c * tv + airlight * (1.0 - tv));
        }
    }
    Image::new(w, h, data, clean.encoding())
}

/// `t = exp(-beta d)`, clamped to the transmission range.
pub fn transmission_from_depth(depth: &[f64], width: usize, height: usize, beta: f64) -> Result<ParamValue> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!("beta must be non-negative, got {beta}")));
    }
    if depth.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "depth has {} entries for {width}x{height}",
            depth.len()
        )));
    }
    if let Some(d) = depth.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::InvalidParameter(format!("negative depth {d}")));
    }
    let (lo, hi) = ParamKey::Transmission.range();
    let data = depth.iter().map(|&d| (-beta * d).exp().clamp(lo, hi)).collect();
    Ok(ParamValue::Map {
        width,
        height,
        data,
    })
}

fn check_lowlight(gamma: f64, gain: f64, cam: &[f64; 9]) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    if !(gain > 0.0) || !gain.is_finite() {
        return Err(Error::InvalidParameter(format!("gain must be positive, got {gain}")));
    }
    let det = det3(cam);
    if !(det.abs() >= MIN_CAM_DET) {
        return Err(Error::SingularMatrix { matrix: *cam, det });
    }
    Ok(())
}

#[inline]
pub(crate) fn mat_vec(m: &[f64; 9], v: [f64; 3]) -> [f64; 3] {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

/// Linear-light pre-exponent values `gain * cam * L` before clamping.
fn lowlight_exposure(clean: &Image, gain: f64, cam: &[f64; 9]) -> Result<Vec<[f64; 3]>> {
    let lin = clean.srgb_to_linear()?;
    Ok(lin
        .data()
        .chunks_exact(3)
        .map(|p| mat_vec(cam, [p[0], p[1], p[2]]).map(|v| gain * v))
        .collect())
}

/// Low-light camera pipeline: linearize, color matrix, digital gain, then the
/// darkening power `x^gamma` before re-encoding to sRGB.
pub fn apply_lowlight(clean: &Image, gamma: f64, gain: f64, cam: &[f64; 9]) -> Result<Image> {
    check_lowlight(gamma, gain, cam)?;
    let (w, h) = clean.dims();
    let exposed = lowlight_exposure(clean, gain, cam)?;
    let data: Vec<f64> = exposed
        .into_iter()
        .flat_map(|px| px.map(|v| clamp01(v).powf(gamma)))
        .collect();
    Image::new(w, h, data, Encoding::Linear)?.linear_to_srgb()
}

/// Fraction of pixels with at least one channel clipped by the low-light forward pass.
pub fn lowlight_clip_fraction(clean: &Image, gain: f64, cam: &[f64; 9]) -> Result<f64> {
    let exposed = lowlight_exposure(clean, gain, cam)?;
    let clipped = exposed
        .iter()
        .filter(|px| px.iter().any(|&v| !(0.0..=1.0).contains(&v)))
        .count();
    Ok(clipped as f64 / exposed.len() as f64)
}

pub const MAX_SIGMA: f64 = 8.0;

/// Gaussian blur with reflect boundary.
pub fn apply_blur(clean: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0 && sigma <= MAX_SIGMA) {
        return Err(Error::InvalidParameter(format!("sigma = {sigma} outside (0, 8]")));
    }
    convolve(clean, &gaussian_kernel(sigma)?, Boundary::Reflect)
}

pub(crate) fn scale_factor(scale: f64) -> Result<usize> {
    match scale {
        s if s == 2.0 => Ok(2),
        s if s == 3.0 => Ok(3),
        s if s == 4.0 => Ok(4),
        s => Err(Error::InvalidParameter(format!("scale must be 2, 3 or 4, got {s}"))),
    }
}

/// Bicubic downsampling by an integer factor; dimensions must be divisible.
pub fn apply_lowres(clean: &Image, scale: f64) -> Result<Image> {
    let s = scale_factor(scale)?;
    let (w, h) = clean.dims();
    if w % s != 0 || h % s != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{w}x{h} is not divisible by scale {s}; crop first"
        )));
    }
    resize_bicubic(clean, w / s, h / s)
}

/// Applies the forward model described by `spec`.
pub fn degrade(clean: &Image, spec: &DegradationSpec) -> Result<Image> {
    spec.validate()?;
    match spec.dtype {
        DegradationType::Haze => apply_haze(
            clean,
            spec.scalar(ParamKey::AtmosphericLight)?,
            spec.get(ParamKey::Transmission).expect("validated"),
        ),
        DegradationType::LowLight => apply_lowlight(
            clean,
            spec.scalar(ParamKey::Gamma)?,
            spec.scalar(ParamKey::Gain)?,
            &spec.mat3(ParamKey::CamIntrinsics)?,
        ),
        DegradationType::Blur => apply_blur(clean, spec.scalar(ParamKey::Sigma)?),
        DegradationType::LowRes => apply_lowres(clean, spec.scalar(ParamKey::Scale)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::gaussian_kernel;
    use crate::spec::IDENTITY3;

    fn gradient(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, Encoding::Srgb, |x, y| {
            let u = x as f64 / (w - 1) as f64;
            let v = y as f64 / (h - 1) as f64;
            [0.1 + 0.8 * u, 0.2 + 0.6 * v, 0.5 + 0.3 * (u - v)]
        })
    }

    #[test]
    fn haze_closed_forms() {
        let white = Image::filled(4, 4, [1.0; 3], Encoding::Srgb);
        let out = apply_haze(&white, 0.8, &ParamValue::Scalar(0.5)).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.9).abs() < 1e-12));

        let img = gradient(5, 5);
        assert_eq!(apply_haze(&img, 0.7, &ParamValue::Scalar(1.0)).unwrap(), img);

        let gray = Image::filled(2, 2, [0.2; 3], Encoding::Srgb);
        let out = apply_haze(&gray, 0.9, &ParamValue::Scalar(0.3)).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.69).abs() < 1e-12));
        assert!(apply_haze(&gray, 1.2, &ParamValue::Scalar(0.3)).is_err());
        assert!(apply_haze(&gray, 0.9, &ParamValue::Scalar(-0.1)).is_err());
    }

    #[test]
    fn haze_map_must_match_dims() {
        let img = gradient(3, 2);
        let t = ParamValue::Map {
            width: 2,
            height: 2,
            data: vec![0.5; 4],
        };
        assert!(apply_haze(&img, 0.8, &t).is_err());
    }

    #[test]
    fn depth_to_transmission() {
        let t = transmission_from_depth(&[0.0, 1.0, 1e9], 3, 1, std::f64::consts::LN_2).unwrap();
        let ParamValue::Map { data, .. } = t else { panic!() };
        assert_eq!(data[0], 0.95);
        assert!((data[1] - 0.5).abs() < 1e-12);
        assert_eq!(data[2], 0.1);
        let ParamValue::Map { data, .. } = transmission_from_depth(&[3.0; 2], 2, 1, 0.0).unwrap() else {
            panic!()
        };
        assert_eq!(data, vec![0.95, 0.95]);
        assert!(transmission_from_depth(&[1.0], 1, 1, -0.1).is_err());
    }

    #[test]
    fn lowlight_identity_pipeline() {
        let img = gradient(6, 6);
        let out = apply_lowlight(&img, 1.0, 1.0, &IDENTITY3).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 2e-6);
        }
    }

    #[test]
    fn lowlight_formula_value() {
        // linear 0.25, gain 0.5, gamma 2 -> 0.125^2 before sRGB encoding
        let img = Image::filled(1, 1, [0.25; 3], Encoding::Linear).linear_to_srgb().unwrap();
        let out = apply_lowlight(&img, 2.0, 0.5, &IDENTITY3).unwrap();
        let lin = out.srgb_to_linear().unwrap();
        assert!((lin.data()[0] - 0.015625).abs() < 1e-9);
    }

    #[test]
    fn lowlight_half_matrix_halves_linear() {
        let img = gradient(4, 4);
        let half = [0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5];
        let out = apply_lowlight(&img, 1.0, 1.0, &half).unwrap().srgb_to_linear().unwrap();
        let lin = img.srgb_to_linear().unwrap();
        for (a, b) in lin.data().iter().zip(out.data()) {
            assert!((a * 0.5 - b).abs() < 1e-9);
        }
    }

    #[test]
    fn lowlight_rejects_singular_and_linear_input() {
        let img = gradient(4, 4);
        let singular = [1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0];
        assert!(matches!(
            apply_lowlight(&img, 2.0, 0.5, &singular),
            Err(Error::SingularMatrix { .. })
        ));
        let lin = img.srgb_to_linear().unwrap();
        assert!(matches!(apply_lowlight(&lin, 2.0, 0.5, &IDENTITY3), Err(Error::Encoding { .. })));
    }

    #[test]
    fn blur_near_impulse_and_readback() {
        let img = gradient(16, 16);
        let out = apply_blur(&img, 0.05).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-3);
        }
        let (w, h) = (15, 15);
        let impulse = Image::from_fn(w, h, Encoding::Srgb, |x, y| if (x, y) == (7, 7) { [1.0; 3] } else { [0.0; 3] });
        let out = apply_blur(&impulse, 1.0).unwrap();
        let k = gaussian_kernel(1.0).unwrap();
        for dy in -3isize..=3 {
            for dx in -3isize..=3 {
                let v = out.pixel((7 + dx) as usize, (7 + dy) as usize)[0];
                assert!((v - k.at(dx, dy)).abs() < 1e-12);
            }
        }
        assert!(apply_blur(&img, 0.0).is_err());
        assert!(apply_blur(&img, 8.01).is_err());
    }

    #[test]
    fn lowres_shapes_and_checkerboard() {
        let img = gradient(64, 64);
        assert_eq!(apply_lowres(&img, 2.0).unwrap().dims(), (32, 32));
        let c = Image::filled(12, 12, [0.3; 3], Encoding::Srgb);
        let out = apply_lowres(&c, 3.0).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let checker = Image::from_fn(16, 16, Encoding::Srgb, |x, y| [((x + y) % 2) as f64; 3]);
        let out = apply_lowres(&checker, 2.0).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.5).abs() <= 0.02));
        assert!(apply_lowres(&img, 5.0).is_err());
        assert!(apply_lowres(&gradient(10, 9), 2.0).is_err());
    }

    #[test]
    fn degrade_dispatches_and_validates() {
        let img = gradient(32, 32);
        assert_eq!(degrade(&img, &DegradationSpec::lowres(4)).unwrap().dims(), (8, 8));
        assert!(degrade(&img, &DegradationSpec::haze(0.2, 0.5)).is_err());
        let via = degrade(&img, &DegradationSpec::haze(0.8, 0.4)).unwrap();
        assert_eq!(via, apply_haze(&img, 0.8, &ParamValue::Scalar(0.4)).unwrap());
    }
}
