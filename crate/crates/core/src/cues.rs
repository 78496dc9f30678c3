//! Auxiliary views of a degraded image: the log-amplitude spectrum and the
//! Sobel edge map, exported next to the image itself.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::filter::Boundary;
use crate::image::{save_png, Image};
use crate::spectrum::fft2_log_amplitude;

/// Floor on the normalizer of the edge map.
pub const EDGE_EPSILON: f64 = 1e-9;

/// Unnormalized Sobel gradient magnitude of the luminance, reflect boundary.
pub fn sobel_magnitude(img: &Image) -> Vec<f64> {
    let (w, h) = img.dims();
    let lum = img.luminance();
    let at = |x: isize, y: isize| {
        lum[Boundary::Reflect.index(y, h) * w + Boundary::Reflect.index(x, w)]
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            out.push(gx.hypot(gy));
        }
    }
    out
}

/// Sobel magnitude scaled so its maximum is 1, replicated to three channels.
pub fn sobel_edge(img: &Image) -> Image {
    let (w, h) = img.dims();
    let mag = sobel_magnitude(img);
    let peak = mag.iter().copied().fold(0.0, f64::max).max(EDGE_EPSILON);
    let plane: Vec<f64> = mag.iter().map(|m| m / peak).collect();
    Image::from_gray(w, h, &plane, img.encoding()).expect("plane matches dims")
}

/// The degraded image with its spectrum and edge cues, all of equal size.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub degraded: Image,
    pub fft: Image,
    pub edge: Image,
}

pub fn build_composite(deg: &Image) -> Result<Composite> {
    Ok(Composite {
        degraded: deg.clone(),
        fft: fft2_log_amplitude(deg)?,
        edge: sobel_edge(deg),
    })
}

/// Writes `<stem>_fft.png` and `<stem>_edge.png` into `dir`; returns both paths.
pub fn write_cues(composite: &Composite, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let fft = dir.join(format!("{stem}_fft.png"));
    let edge = dir.join(format!("{stem}_edge.png"));
    save_png(&composite.fft, &fft)?;
    save_png(&composite.edge, &edge)?;
    Ok((fft, edge))
}
