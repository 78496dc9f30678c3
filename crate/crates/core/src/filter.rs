//! Spatial convolution kernels.

use crate::error::{Error, Result};
use crate::image::Image;

/// How samples outside the raster are synthesized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// Half-sample symmetric: `d c b a | a b c d | d c b a`.
    Reflect,
    Periodic,
}

impl Boundary {
    #[inline]
    pub(crate) fn index(self, i: isize, n: usize) -> usize {
        let n = n as isize;
        match self {
            Boundary::Periodic => i.rem_euclid(n) as usize,
            Boundary::Reflect => {
                let period = 2 * n;
                let m = i.rem_euclid(period);
                (if m < n { m } else { period - 1 - m }) as usize
            }
        }
    }
}

/// Square convolution kernel of side `2 * radius + 1`, normalized to unit sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2D {
    radius: usize,
    taps: Vec<f64>,
    /// 1-D factor when the kernel is the outer product of a symmetric vector with itself.
    separable: Option<Vec<f64>>,
}

impl Kernel2D {
    /// Builds a kernel from row-major taps, normalizing them to unit sum.
    pub fn new(radius: usize, taps: Vec<f64>) -> Result<Self> {
        let side = 2 * radius + 1;
        if taps.len() != side * side {
            return Err(Error::InvalidParameter(format!(
                "radius {radius} needs {} taps, got {}",
                side * side,
                taps.len()
            )));
        }
        let sum: f64 = taps.iter().sum();
        if !sum.is_finite() || sum.abs() < 1e-12 {
            return Err(Error::InvalidParameter("kernel taps must have a non-zero finite sum".into()));
        }
        Ok(Kernel2D {
            radius,
            taps: taps.into_iter().map(|t| t / sum).collect(),
            separable: None,
        })
    }

    pub fn identity() -> Self {
        Kernel2D {
            radius: 0,
            taps: vec![1.0],
            separable: Some(vec![1.0]),
        }
    }

    pub fn box_filter(radius: usize) -> Self {
        let side = 2 * radius + 1;
        Kernel2D {
            radius,
            taps: vec![1.0 / (side * side) as f64; side * side],
            separable: Some(vec![1.0 / side as f64; side]),
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Tap at offset `(dx, dy)` from the center.
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        if dx.abs() > r || dy.abs() > r {
            return 0.0;
        }
        self.taps[((dy + r) as usize) * self.side() + (dx + r) as usize]
    }

    pub fn separable_factor(&self) -> Option<&[f64]> {
        self.separable.as_deref()
    }

    /// Drops the separable factor so convolution takes the direct 2-D path.
    pub fn without_separable(mut self) -> Self {
        self.separable = None;
        self
    }
}

/// Sampled Gaussian truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Kernel2D> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    let taps1 = gaussian_taps(sigma);
    let radius = taps1.len() / 2;
    let side = taps1.len();
    let mut taps = Vec::with_capacity(side * side);
    for &wy in &taps1 {
        for &wx in &taps1 {
            taps.push(wx * wy);
        }
    }
    Ok(Kernel2D {
        radius,
        taps,
        separable: Some(taps1),
    })
}

/// Normalized 1-D Gaussian taps of radius `ceil(3 sigma)`.
pub(crate) fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Convolves each channel with `kernel`. Output is clamped to `[0, 1]`.
pub fn convolve(img: &Image, kernel: &Kernel2D, boundary: Boundary) -> Result<Image> {
    let (w, h) = img.dims();
    if kernel.radius() >= w.min(h) {
        return Err(Error::InvalidParameter(format!(
            "kernel radius {} too large for {w}x{h} image",
            kernel.radius()
        )));
    }
    let planes = img.planes();
    let out = planes.map(|p| match kernel.separable_factor() {
        Some(f) => convolve_separable(&p, w, h, f, boundary),
        None => convolve_plane(&p, w, h, kernel, boundary),
    });
    Image::from_planes(w, h, &out, img.encoding())
}

/// Direct 2-D convolution of one plane, unclamped.
pub(crate) fn convolve_plane(
    plane: &[f64],
    w: usize,
    h: usize,
    kernel: &Kernel2D,
    boundary: Boundary,
) -> Vec<f64> {
    let r = kernel.radius() as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                let sy = boundary.index(y as isize - dy, h);
                for dx in -r..=r {
                    let sx = boundary.index(x as isize - dx, w);
                    acc += kernel.at(dx, dy) * plane[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Two 1-D passes with the same symmetric factor, unclamped.
pub(crate) fn convolve_separable(
    plane: &[f64],
    w: usize,
    h: usize,
    taps: &[f64],
    boundary: Boundary,
) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let d = k as isize - r;
                acc += t * row[boundary.index(x as isize - d, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (k, &t) in taps.iter().enumerate() {
            let d = k as isize - r;
            let sy = boundary.index(y as isize - d, h);
            let src = &tmp[sy * w..(sy + 1) * w];
            for (o, &s) in out[y * w..(y + 1) * w].iter_mut().zip(src) {
                *o += t * s;
            }
        }
    }
    out
}
