//! 2-D DFT helpers, the log-amplitude spectrum cue and radial spectral statistics.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::Result;
use crate::filter::Boundary;
use crate::image::Image;

fn fft2_inplace(buf: &mut [Complex64], w: usize, h: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// Unnormalized forward DFT of a real plane.
pub fn fft2(plane: &[f64], w: usize, h: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_inplace(&mut buf, w, h, false);
    buf
}

/// Forward DFT of complex data, in place.
pub fn fft2_complex(buf: &mut [Complex64], w: usize, h: usize) {
    fft2_inplace(buf, w, h, false);
}

/// Inverse DFT scaled by `1 / (w h)`; returns the real part.
pub fn ifft2_real(mut spec: Vec<Complex64>, w: usize, h: usize) -> Vec<f64> {
    fft2_inplace(&mut spec, w, h, true);
    let n = (w * h) as f64;
    spec.into_iter().map(|c| c.re / n).collect()
}

/// DFT of the Rec.601 luminance.
pub fn luminance_spectrum(img: &Image) -> Vec<Complex64> {
    fft2(&img.luminance(), img.width(), img.height())
}

/// Log-amplitude spectrum of the luminance with the zero frequency centered.
///
/// The min-max range is taken over the non-DC bins so that adding a constant
/// to the image leaves every other bin untouched; the DC bin saturates at 1.
pub fn fft2_log_amplitude(img: &Image) -> Result<Image> {
    let (w, h) = img.dims();
    let spec = luminance_spectrum(img);
    let logs: Vec<f64> = spec.iter().map(|c| c.norm().ln_1p()).collect();
    let (lo, hi) = logs
        .iter()
        .skip(1)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (lo, span) = if lo.is_finite() && hi - lo > 1e-9 {
        (lo, hi - lo)
    } else {
        (0.0, 0.0)
    };
    let mut plane = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = logs[y * w + x];
            let norm = if (x, y) == (0, 0) {
                if span > 0.0 {
                    (v - lo) / span
                } else if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else if span > 0.0 {
                (v - lo) / span
            } else {
                0.0
            };
            let cx = (x + w / 2) % w;
            let cy = (y + h / 2) % h;
            plane[cy * w + cx] = norm;
        }
    }
    Image::from_gray(w, h, &plane, img.encoding())
}

/// Signed frequency of DFT bin `k` out of `n`, in cycles per pixel.
#[inline]
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    k / n as f64
}

/// Radially binned spectrum of a plane.
#[derive(Clone, Debug)]
pub struct RadialProfile {
    /// Bin center radii in cycles/pixel.
    pub rho: Vec<f64>,
    /// Mean of `ln |F|` per bin.
    pub mean_log_amplitude: Vec<f64>,
    /// Sum of `|F|^2` per bin.
    pub energy: Vec<f64>,
    /// Number of DFT bins pooled into each radial bin.
    pub count: Vec<usize>,
}

pub const RADIAL_BIN_WIDTH: f64 = 0.01;

impl RadialProfile {
    /// Profile of the mean-removed plane. With `mirror`, the plane is first
    /// extended symmetrically to twice its size, which removes the wrap-around
    /// discontinuity of the periodic DFT.
    pub fn of_plane(plane: &[f64], w: usize, h: usize, mirror: bool) -> Self {
        let (data, w, h) = if mirror {
            let (ew, eh) = (2 * w, 2 * h);
            let mut ext = vec![0.0; ew * eh];
            for y in 0..eh {
                let sy = Boundary::Reflect.index(y as isize, h);
                for x in 0..ew {
                    let sx = Boundary::Reflect.index(x as isize, w);
                    ext[y * ew + x] = plane[sy * w + sx];
                }
            }
            (ext, ew, eh)
        } else {
            (plane.to_vec(), w, h)
        };
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let centered: Vec<f64> = data.iter().map(|v| v - mean).collect();
        let spec = fft2(&centered, w, h);

        let nbins = (0.5 * std::f64::consts::SQRT_2 / RADIAL_BIN_WIDTH).ceil() as usize + 1;
        let mut log_sum = vec![0.0; nbins];
        let mut energy = vec![0.0; nbins];
        let mut count = vec![0usize; nbins];
        for y in 0..h {
            let fy = bin_frequency(y, h);
            for x in 0..w {
                if x == 0 && y == 0 {
                    continue;
                }
                let fx = bin_frequency(x, w);
                let rho = (fx * fx + fy * fy).sqrt();
                let b = (rho / RADIAL_BIN_WIDTH).round() as usize;
                let c = spec[y * w + x];
                let amp2 = c.norm_sqr();
                log_sum[b] += 0.5 * amp2.max(1e-300).ln();
                energy[b] += amp2;
                count[b] += 1;
            }
        }
        let mut out = RadialProfile {
            rho: Vec::new(),
            mean_log_amplitude: Vec::new(),
            energy: Vec::new(),
            count: Vec::new(),
        };
        for b in 1..nbins {
            if count[b] > 0 {
                out.rho.push(b as f64 * RADIAL_BIN_WIDTH);
                out.mean_log_amplitude.push(log_sum[b] / count[b] as f64);
                out.energy.push(energy[b]);
                out.count.push(count[b]);
            }
        }
        out
    }

    pub fn of_luminance(img: &Image, mirror: bool) -> Self {
        Self::of_plane(&img.luminance(), img.width(), img.height(), mirror)
    }

    /// Mean `|F|^2` per radial bin.
    pub fn mean_power(&self) -> Vec<f64> {
        self.energy.iter().zip(&self.count).map(|(e, &n)| e / n as f64).collect()
    }

    pub fn total_energy(&self) -> f64 {
        self.energy.iter().sum()
    }

    /// Smallest radius enclosing `fraction` of the energy after multiplying
    /// each bin's amplitude by `rho^slope` (slope 0 means raw energy).
    pub fn energy_radius(&self, fraction: f64, slope: f64) -> f64 {
        let weighted: Vec<f64> = self
            .rho
            .iter()
            .zip(&self.energy)
            .map(|(r, e)| e * r.powf(2.0 * slope))
            .collect();
        let total: f64 = weighted.iter().sum();
        if !(total > 0.0) {
            return 0.0;
        }
        let mut acc = 0.0;
        for (r, e) in self.rho.iter().zip(&weighted) {
            acc += e;
            if acc >= fraction * total {
                return *r;
            }
        }
        *self.rho.last().unwrap_or(&0.0)
    }

    /// Share of energy at radii above `cutoff`.
    pub fn energy_fraction_above(&self, cutoff: f64) -> f64 {
        let total = self.total_energy();
        if !(total > 0.0) {
            return 0.0;
        }
        let above: f64 = self
            .rho
            .iter()
            .zip(&self.energy)
            .filter(|(r, _)| **r > cutoff)
            .map(|(_, e)| e)
            .sum();
        above / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Encoding;

    #[test]
    fn constant_image_gives_single_center_peak() {
        let img = Image::filled(8, 6, [0.4; 3], Encoding::Srgb);
        let out = fft2_log_amplitude(&img).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                let v = out.pixel(x, y)[0];
                if (x, y) == (4, 3) {
                    assert_eq!(v, 1.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn cosine_gives_symmetric_horizontal_peaks() {
        let (w, h, f) = (32, 16, 5);
        let img = Image::from_fn(w, h, Encoding::Srgb, |x, _| {
            let v = 0.5 + 0.4 * (2.0 * std::f64::consts::PI * f as f64 * x as f64 / w as f64).cos();
            [v; 3]
        });
        let out = fft2_log_amplitude(&img).unwrap();
        let (cx, cy) = (w / 2, h / 2);
        assert!((out.pixel(cx + f, cy)[0] - 1.0).abs() < 1e-9);
        assert!((out.pixel(cx - f, cy)[0] - 1.0).abs() < 1e-9);
        assert!(out.pixel(cx + 1, cy)[0] < 0.05);
        assert!(out.pixel(cx, cy + 3)[0] < 0.05);
    }

    #[test]
    fn inverse_undoes_forward() {
        let plane: Vec<f64> = (0..35).map(|i| ((i * 7919) % 31) as f64 / 31.0).collect();
        let back = ifft2_real(fft2(&plane, 7, 5), 7, 5);
        for (a, b) in plane.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_radius_of_flat_disk() {
        let p = RadialProfile {
            rho: (1..=10).map(|i| i as f64 * 0.01).collect(),
            mean_log_amplitude: vec![0.0; 10],
            energy: vec![1.0; 10],
            count: vec![1; 10],
        };
        assert!((p.energy_radius(0.5, 0.0) - 0.05).abs() < 1e-12);
        assert!((p.energy_fraction_above(0.05) - 0.5).abs() < 1e-12);
    }
}
