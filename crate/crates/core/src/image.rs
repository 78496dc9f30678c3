//! RGB float raster, sRGB transfer functions and PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Rec.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Encoding {
    Srgb,
    Linear,
}

impl Encoding {
    pub fn name(self) -> &'static str {
        match self {
            Encoding::Srgb => "srgb",
            Encoding::Linear => "linear",
        }
    }
}

#[inline]
pub(crate) fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Interleaved row-major RGB image with intensities in `[0, 1]`.
///
/// Every constructor clamps, so a value of this type always satisfies the
/// range invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
    encoding: Encoding,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>, encoding: Encoding) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be at least 1x1, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::InvalidImage(format!(
                "{width}x{height}x3 needs {} samples, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("non-finite sample".into()));
        }
        let data = data.into_iter().map(clamp01).collect();
        Ok(Image {
            width,
            height,
            data,
            encoding,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3], encoding: Encoding) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let px = rgb.map(clamp01);
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&px);
        }
        Image {
            width,
            height,
            data,
            encoding,
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        encoding: Encoding,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).into_iter().map(clamp01));
            }
        }
        Image {
            width,
            height,
            data,
            encoding,
        }
    }

    /// Builds an image from three planar channels, clamping each sample.
    pub fn from_planes(
        width: usize,
        height: usize,
        planes: &[Vec<f64>; 3],
        encoding: Encoding,
    ) -> Result<Self> {
        let n = width * height;
        if planes.iter().any(|p| p.len() != n) {
            return Err(Error::InvalidImage("plane length mismatch".into()));
        }
        let mut data = Vec::with_capacity(n * 3);
        for i in 0..n {
            for plane in planes {
                data.push(plane[i]);
            }
        }
        Image::new(width, height, data, encoding)
    }

    /// Replicates a single plane into all three channels.
    pub fn from_gray(width: usize, height: usize, plane: &[f64], encoding: Encoding) -> Result<Self> {
        if plane.len() != width * height {
            return Err(Error::InvalidImage("plane length mismatch".into()));
        }
        let mut data = Vec::with_capacity(plane.len() * 3);
        for &v in plane {
            data.extend_from_slice(&[v, v, v]);
        }
        Image::new(width, height, data, encoding)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn plane(&self, channel: usize) -> Vec<f64> {
        self.data.iter().skip(channel).step_by(3).copied().collect()
    }

    pub fn planes(&self) -> [Vec<f64>; 3] {
        [self.plane(0), self.plane(1), self.plane(2)]
    }

    /// Applies `f` to every sample; the result is clamped.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| clamp01(f(v))).collect(),
            encoding: self.encoding,
        }
    }

    /// Applies `f` to every pixel; the result is clamped.
    pub fn map_pixels(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for px in self.data.chunks_exact(3) {
            data.extend(f([px[0], px[1], px[2]]).into_iter().map(clamp01));
        }
        Image {
            width: self.width,
            height: self.height,
            data,
            encoding: self.encoding,
        }
    }

    /// Relabels the encoding flag without touching the samples.
    pub fn with_encoding(mut self, encoding: Encoding) -> Image {
        self.encoding = encoding;
        self
    }

    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
            .collect()
    }

    pub fn mean_luminance(&self) -> f64 {
        let l = self.luminance();
        l.iter().sum::<f64>() / l.len() as f64
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn mirror_horizontal(&self) -> Image {
        Image::from_fn(self.width, self.height, self.encoding, |x, y| {
            self.pixel(self.width - 1 - x, y)
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::DimensionMismatch(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(width, height, self.encoding, |x, y| {
            self.pixel(x0 + x, y0 + y)
        }))
    }

    /// Center crop to the largest size whose sides are multiples of `factor`.
    pub fn crop_to_multiple(&self, factor: usize) -> Result<Image> {
        let w = self.width / factor * factor;
        let h = self.height / factor * factor;
        if w == 0 || h == 0 {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} is smaller than factor {factor}",
                self.width, self.height
            )));
        }
        self.crop((self.width - w) / 2, (self.height - h) / 2, w, h)
    }

    /// Rounds every sample to the nearest 8-bit code, as a PNG round trip would.
    pub fn quantize_8bit(&self) -> Image {
        self.map(|v| to_u8(v) as f64 / 255.0)
    }

    pub fn srgb_to_linear(&self) -> Result<Image> {
        self.expect_encoding(Encoding::Srgb)?;
        let mut out = self.map(srgb_decode);
        out.encoding = Encoding::Linear;
        Ok(out)
    }

    pub fn linear_to_srgb(&self) -> Result<Image> {
        self.expect_encoding(Encoding::Linear)?;
        let mut out = self.map(srgb_encode);
        out.encoding = Encoding::Srgb;
        Ok(out)
    }

    fn expect_encoding(&self, expected: Encoding) -> Result<()> {
        if self.encoding != expected {
            return Err(Error::Encoding {
                expected: expected.name(),
                found: self.encoding.name(),
            });
        }
        Ok(())
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// sRGB electro-optical transfer: encoded value to linear light.
#[inline]
pub fn srgb_decode(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Inverse of [`srgb_decode`].
#[inline]
pub fn srgb_encode(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (clamp01(v) * 255.0 + 0.5).floor() as u8
}

/// Reads an 8- or 16-bit RGB or RGBA PNG. Alpha is dropped.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_err(e.to_string()))?;
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(decode_err(format!("unsupported color type {other:?}"))),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(width * height * 3);
    match info.bit_depth {
        png::BitDepth::Eight => {
            for y in 0..height {
                let row = &buf[y * info.line_size..y * info.line_size + width * stride];
                for px in row.chunks_exact(stride) {
                    data.extend(px[..3].iter().map(|&b| b as f64 / 255.0));
                }
            }
        }
        png::BitDepth::Sixteen => {
            for y in 0..height {
                let row = &buf[y * info.line_size..y * info.line_size + width * stride * 2];
                for px in row.chunks_exact(stride * 2) {
                    for c in 0..3 {
                        let code = u16::from_be_bytes([px[2 * c], px[2 * c + 1]]);
                        data.push(code as f64 / 65535.0);
                    }
                }
            }
        }
        other => return Err(decode_err(format!("unsupported bit depth {other:?}"))),
    }
    Image::new(width, height, data, Encoding::Srgb)
}

/// Writes an 8-bit RGB PNG, rounding half up.
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(source) => Error::io(path, source),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut writer = encoder.write_header().map_err(encode_err)?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw_png(path: &Path, color: png::ColorType, depth: png::BitDepth, bytes: &[u8]) {
        let file = File::create(path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 1, 1);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(bytes).unwrap();
        w.finish().unwrap();
    }

    #[test]
    fn load_normalizes_codes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("px.png");
        write_raw_png(&p, png::ColorType::Rgb, png::BitDepth::Eight, &[255, 255, 255]);
        assert_eq!(load_png(&p).unwrap().pixel(0, 0), [1.0, 1.0, 1.0]);
        write_raw_png(&p, png::ColorType::Rgb, png::BitDepth::Eight, &[0, 0, 0]);
        assert_eq!(load_png(&p).unwrap().pixel(0, 0), [0.0, 0.0, 0.0]);
        write_raw_png(&p, png::ColorType::Rgba, png::BitDepth::Eight, &[128, 0, 0, 7]);
        let px = load_png(&p).unwrap().pixel(0, 0);
        assert!((px[0] - 0.50196).abs() < 1e-5);
        assert_eq!(&px[1..], &[0.0, 0.0]);
        write_raw_png(
            &p,
            png::ColorType::Rgb,
            png::BitDepth::Sixteen,
            &[0xff, 0xff, 0x80, 0x00, 0, 0],
        );
        let px = load_png(&p).unwrap().pixel(0, 0);
        assert_eq!(px[0], 1.0);
        assert!((px[1] - 32768.0 / 65535.0).abs() < 1e-12);
    }

    #[test]
    fn load_rejects_gray_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        write_raw_png(&p, png::ColorType::Grayscale, png::BitDepth::Eight, &[9]);
        let err = load_png(&p).unwrap_err();
        assert!(err.to_string().contains("g.png"), "{err}");
        assert!(matches!(load_png(dir.path().join("nope.png")), Err(Error::Io { .. })));
    }

    #[test]
    fn save_rounds_half_up() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        save_png(&Image::filled(1, 1, [1.0, 0.5, 0.0], Encoding::Srgb), &p).unwrap();
        let back = load_png(&p).unwrap().pixel(0, 0);
        assert_eq!(back, [1.0, 128.0 / 255.0, 0.0]);
    }

    #[test]
    fn save_to_missing_dir_fails() {
        let img = Image::filled(2, 2, [0.1; 3], Encoding::Srgb);
        assert!(save_png(&img, "/nonexistent-dir/x.png").is_err());
    }

    #[test]
    fn srgb_fixed_points_and_knee() {
        for v in [0.0, 1.0] {
            assert!((srgb_decode(v) - v).abs() < 1e-12);
            assert!((srgb_encode(v) - v).abs() < 1e-12);
        }
        assert!((srgb_decode(0.04045) - 0.04045 / 12.92).abs() < 1e-12);
        assert!((srgb_decode(0.04045) - 0.003131).abs() < 1e-6);
    }

    #[test]
    fn wrong_encoding_is_rejected() {
        let img = Image::filled(2, 2, [0.3; 3], Encoding::Linear);
        assert!(matches!(img.srgb_to_linear(), Err(Error::Encoding { .. })));
        let img = img.with_encoding(Encoding::Srgb);
        assert!(img.linear_to_srgb().is_err());
    }

    #[test]
    fn constructor_checks_length_and_clamps() {
        assert!(Image::new(2, 2, vec![0.0; 11], Encoding::Srgb).is_err());
        assert!(Image::new(0, 2, vec![], Encoding::Srgb).is_err());
        assert!(Image::new(1, 1, vec![f64::NAN, 0.0, 0.0], Encoding::Srgb).is_err());
        let img = Image::new(1, 1, vec![-0.5, 0.5, 1.5], Encoding::Srgb).unwrap();
        assert_eq!(img.pixel(0, 0), [0.0, 0.5, 1.0]);
    }

    #[test]
    fn crop_to_multiple_centers() {
        let img = Image::from_fn(7, 5, Encoding::Srgb, |x, y| [x as f64 / 10.0, y as f64 / 10.0, 0.0]);
        let c = img.crop_to_multiple(2).unwrap();
        assert_eq!(c.dims(), (6, 4));
        assert_eq!(c.pixel(0, 0)[0], 0.0);
        let c3 = img.crop_to_multiple(3).unwrap();
        assert_eq!(c3.dims(), (6, 3));
        assert_eq!(c3.pixel(0, 0)[1], 0.1);
    }
}
