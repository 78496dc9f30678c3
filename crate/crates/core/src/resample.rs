//! Catmull-Rom bicubic resampling.

use crate::error::{Error, Result};
use crate::image::Image;

const A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = -0.5`.
#[inline]
pub fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample source indices and weights along one axis.
fn axis_taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = (d as f64 + 0.5) * scale - 0.5;
            let base = s.floor();
            let frac = s - base;
            let mut idx = [0usize; 4];
            let mut wts = [0.0; 4];
            for k in 0..4 {
                let i = base as isize - 1 + k as isize;
                idx[k] = i.clamp(0, src as isize - 1) as usize;
                wts[k] = cubic_weight(frac - (k as f64 - 1.0));
            }
            (idx, wts)
        })
        .collect()
}

/// Resizes with pixel-center alignment and edge clamping; output clamped.
pub fn resize_bicubic(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidParameter(format!(
            "target size must be at least 1x1, got {out_w}x{out_h}"
        )));
    }
    let (w, h) = img.dims();
    let xt = axis_taps(w, out_w);
    let yt = axis_taps(h, out_h);
    let src = img.data();

    // horizontal pass
    let mut tmp = vec![0.0; out_w * h * 3];
    for y in 0..h {
        for (x, (idx, wts)) in xt.iter().enumerate() {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wts[k] * src[(y * w + idx[k]) * 3 + c];
                }
                tmp[(y * out_w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; out_w * out_h * 3];
    for (y, (idx, wts)) in yt.iter().enumerate() {
        for x in 0..out_w {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wts[k] * tmp[(idx[k] * out_w + x) * 3 + c];
                }
                out[(y * out_w + x) * 3 + c] = acc;
            }
        }
    }
    Image::new(out_w, out_h, out, img.encoding())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Encoding;

    #[test]
    fn kernel_interpolates_samples() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
        assert!((cubic_weight(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic_weight(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn same_size_is_identity() {
        let img = Image::from_fn(9, 7, Encoding::Srgb, |x, y| {
            [(x as f64 * 0.37).sin().abs(), (y as f64 * 0.21).cos().abs(), 0.4]
        });
        let out = resize_bicubic(&img, 9, 7).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_stays_constant() {
        let img = Image::filled(12, 8, [0.3, 0.6, 0.9], Encoding::Srgb);
        for (w, h) in [(3, 2), (24, 16), (7, 13), (1, 1)] {
            let out = resize_bicubic(&img, w, h).unwrap();
            for px in out.data().chunks(3) {
                assert!((px[0] - 0.3).abs() < 1e-12 && (px[2] - 0.9).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_target_rejected() {
        let img = Image::filled(4, 4, [0.5; 3], Encoding::Srgb);
        assert!(resize_bicubic(&img, 0, 4).is_err());
    }
}
