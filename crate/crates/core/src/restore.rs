//! Parametric inverse operators and the external restorer plug-in slot.
//!
//! Haze and low light are inverted exactly. Blur and low resolution only get
//! the regularized pseudo-inverse (the observable row-space component); null
//! space completion is left to an external restorer.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use rustfft::num_complex::Complex64;
use serde_json::{json, Value};

use crate::degrade::{mat_vec, scale_factor, transmission_at};
use crate::error::{Error, Result};
use crate::filter::{convolve_plane, gaussian_kernel, Boundary};
use crate::image::{load_png, save_png, Encoding, Image};
use crate::resample::resize_bicubic;
use crate::spec::{invert3, DegradationSpec, DegradationType, ParamKey, ParamValue};
use crate::spectrum::{fft2, fft2_complex, ifft2_real};

/// How the observation is made periodic before frequency-domain inversion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WienerPadding {
    /// Invert the half-sample symmetric extension (2x size). Exact for
    /// observations blurred with reflect boundary.
    Mirror,
    /// Invert at native size after a raised-cosine edge taper of this width.
    CosineTaper(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RestoreOptions {
    pub t_floor: f64,
    pub wiener_lambda: f64,
    pub wiener_padding: WienerPadding,
}

impl Default for RestoreOptions {
    fn default() -> Self {
        RestoreOptions {
            t_floor: 0.1,
            wiener_lambda: 1e-3,
            wiener_padding: WienerPadding::Mirror,
        }
    }
}

impl RestoreOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_floor > 0.0 && self.t_floor <= 0.5) {
            return Err(Error::Config(format!("t_floor {} outside (0, 0.5]", self.t_floor)));
        }
        if !(0.0..=1.0).contains(&self.wiener_lambda) {
            return Err(Error::Config(format!(
                "wiener_lambda {} outside [0, 1]",
                self.wiener_lambda
            )));
        }
        Ok(())
    }
}

/// `J = (I - A (1 - t')) / t'` with `t' = max(t, t_floor)`.
pub fn invert_haze(deg: &Image, airlight: f64, t: &ParamValue, opts: &RestoreOptions) -> Result<Image> {
    opts.validate()?;
    let (w, h) = deg.dims();
    let tmap = transmission_at(t, w, h)?;
    let mut data = Vec::with_capacity(w * h * 3);
    for (px, &tv) in deg.data().chunks_exact(3).zip(&tmap) {
        let tv = tv.max(opts.t_floor);
        for &c in px {
            data.push((c - airlight * (1.0 - tv)) / tv);
        }
    }
    Image::new(w, h, data, deg.encoding())
}

/// Inverts the low-light pipeline: decode, `x^(1/gamma)`, divide by gain,
/// apply the inverse color matrix, clamp and re-encode.
pub fn invert_lowlight(deg: &Image, gamma: f64, gain: f64, cam: &[f64; 9], opts: &RestoreOptions) -> Result<Image> {
    opts.validate()?;
    if !(gamma > 0.0) || !(gain > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gamma and gain must be positive, got {gamma}, {gain}"
        )));
    }
    let inv = invert3(cam)?;
    let lin = deg.srgb_to_linear()?;
    let out = lin.map_pixels(|px| mat_vec(&inv, px.map(|v| v.powf(1.0 / gamma) / gain)));
    out.linear_to_srgb()
}

/// Centered kernel wrapped onto a `w x h` periodic grid, transformed.
fn kernel_transfer(sigma: f64, w: usize, h: usize) -> Result<Vec<Complex64>> {
    let k = gaussian_kernel(sigma)?;
    let r = k.radius() as isize;
    let mut grid = vec![0.0; w * h];
    for dy in -r..=r {
        for dx in -r..=r {
            let x = dx.rem_euclid(w as isize) as usize;
            let y = dy.rem_euclid(h as isize) as usize;
            grid[y * w + x] += k.at(dx, dy);
        }
    }
    Ok(fft2(&grid, w, h))
}

/// Wiener-regularized pseudo-inverse of a Gaussian blur for one plane,
/// unclamped. `lambda` may be any non-negative value here.
pub fn wiener_deconvolve_plane(
    plane: &[f64],
    w: usize,
    h: usize,
    sigma: f64,
    lambda: f64,
    padding: WienerPadding,
) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be non-negative, got {lambda}")));
    }
    let (obs, ew, eh) = match padding {
        WienerPadding::Mirror => {
            let (ew, eh) = (2 * w, 2 * h);
            let mut ext = vec![0.0; ew * eh];
            for y in 0..eh {
                let sy = Boundary::Reflect.index(y as isize, h);
                for x in 0..ew {
                    ext[y * ew + x] = plane[sy * w + Boundary::Reflect.index(x as isize, w)];
                }
            }
            (ext, ew, eh)
        }
        WienerPadding::CosineTaper(width) => (edge_taper(plane, w, h, sigma, width)?, w, h),
    };
    let transfer = kernel_transfer(sigma, ew, eh)?;
    let mut spec: Vec<Complex64> = obs.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_complex(&mut spec, ew, eh);
    for (y, hk) in spec.iter_mut().zip(&transfer) {
        let denom = hk.norm_sqr() + lambda;
        *y = if denom > 1e-300 { hk.conj() * *y / denom } else { Complex64::default() };
    }
    let full = ifft2_real(spec, ew, eh);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        out.extend_from_slice(&full[y * ew..y * ew + w]);
    }
    Ok(out)
}

/// Blends the border toward its periodically blurred version with a
/// raised-cosine ramp, softening the wrap-around discontinuity.
fn edge_taper(plane: &[f64], w: usize, h: usize, sigma: f64, width: usize) -> Result<Vec<f64>> {
    let k = gaussian_kernel(sigma)?;
    if k.radius() >= w.min(h) {
        return Ok(plane.to_vec());
    }
    let blurred = convolve_plane(plane, w, h, &k, Boundary::Periodic);
    let ramp = |i: usize, n: usize| -> f64 {
        let d = i.min(n - 1 - i) as f64;
        if width == 0 || d >= width as f64 {
            1.0
        } else {
            0.5 - 0.5 * (std::f64::consts::PI * d / width as f64).cos()
        }
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let wy = ramp(y, h);
        for x in 0..w {
            let a = wy * ramp(x, w);
            out[y * w + x] = a * plane[y * w + x] + (1.0 - a) * blurred[y * w + x];
        }
    }
    Ok(out)
}

/// Per-channel Wiener deconvolution; output clamped.
pub fn invert_blur_wiener(deg: &Image, sigma: f64, opts: &RestoreOptions) -> Result<Image> {
    opts.validate()?;
    let (w, h) = deg.dims();
    let planes = deg.planes();
    let mut out: [Vec<f64>; 3] = Default::default();
    for (o, p) in out.iter_mut().zip(&planes) {
        *o = wiener_deconvolve_plane(p, w, h, sigma, opts.wiener_lambda, opts.wiener_padding)?;
    }
    Image::from_planes(w, h, &out, deg.encoding())
}

/// Bicubic upsampling back to the pre-degradation size.
pub fn invert_lowres(deg: &Image, scale: f64, target_w: usize, target_h: usize) -> Result<Image> {
    let s = scale_factor(scale)?;
    if target_w != deg.width() * s || target_h != deg.height() * s {
        return Err(Error::DimensionMismatch(format!(
            "target {target_w}x{target_h} is not {s}x of {}x{}",
            deg.width(),
            deg.height()
        )));
    }
    resize_bicubic(deg, target_w, target_h)
}

/// Applies the analytic inverse for `spec`.
pub fn restore(deg: &Image, spec: &DegradationSpec, opts: &RestoreOptions) -> Result<Image> {
    spec.validate()?;
    match spec.dtype {
        DegradationType::Haze => invert_haze(
            deg,
            spec.scalar(ParamKey::AtmosphericLight)?,
            spec.get(ParamKey::Transmission).expect("validated"),
            opts,
        ),
        DegradationType::LowLight => invert_lowlight(
            deg,
            spec.scalar(ParamKey::Gamma)?,
            spec.scalar(ParamKey::Gain)?,
            &spec.mat3(ParamKey::CamIntrinsics)?,
            opts,
        ),
        DegradationType::Blur => invert_blur_wiener(deg, spec.scalar(ParamKey::Sigma)?, opts),
        DegradationType::LowRes => {
            let scale = spec.scalar(ParamKey::Scale)?;
            let s = scale_factor(scale)?;
            invert_lowres(deg, scale, deg.width() * s, deg.height() * s)
        }
    }
}

/// Anything that maps a degraded image and its parameters to a restoration.
pub trait Restorer: Send + Sync {
    fn restore(&self, deg: &Image, spec: &DegradationSpec) -> Result<Image>;
}

/// The built-in analytic inverse.
#[derive(Clone, Debug, Default)]
pub struct ParametricRestorer {
    pub opts: RestoreOptions,
}

impl Restorer for ParametricRestorer {
    fn restore(&self, deg: &Image, spec: &DegradationSpec) -> Result<Image> {
        restore(deg, spec, &self.opts)
    }
}

/// Name to restorer table. Populate it before sharing it across threads.
#[derive(Clone, Default)]
pub struct RestorerRegistry {
    entries: BTreeMap<String, Arc<dyn Restorer>>,
}

impl RestorerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, handle: Arc<dyn Restorer>) {
        self.entries.insert(name.into(), handle);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Restorer>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::Config(format!(
                "no restorer registered as {name:?} (known: {:?})",
                self.entries.keys().collect::<Vec<_>>()
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Routes through the named restorer, or the analytic inverse when `name` is `None`.
    pub fn restore_with(
        &self,
        name: Option<&str>,
        deg: &Image,
        spec: &DegradationSpec,
        opts: &RestoreOptions,
    ) -> Result<Image> {
        match name {
            Some(n) => self.get(n)?.restore(deg, spec),
            None => restore(deg, spec, opts),
        }
    }
}

/// Restorer backed by a child process.
///
/// For each call the child is spawned and sent one JSON line
/// `{"degraded": <png path>, "spec": <spec document>}` on stdin; it must answer
/// with one line `{"restored": <png path>}` within the timeout.
#[derive(Clone, Debug)]
pub struct ProcessRestorer {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl ProcessRestorer {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        ProcessRestorer {
            program: program.into(),
            args,
            timeout: Duration::from_secs(60),
        }
    }
}

impl Restorer for ProcessRestorer {
    fn restore(&self, deg: &Image, spec: &DegradationSpec) -> Result<Image> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = dir.path().join("degraded.png");
        save_png(deg, &input)?;
        let request = json!({ "degraded": input.to_string_lossy(), "spec": spec.to_json() });

        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(&self.program, e))?;
        {
            let mut stdin = child.stdin.take().expect("piped");
            writeln!(stdin, "{request}").map_err(|e| Error::io(&self.program, e))?;
        }
        let stdout = child.stdout.take().expect("piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut line = String::new();
            let res = BufReader::new(stdout).read_line(&mut line).map(|_| line);
            let _ = tx.send(res);
        });
        let line = match rx.recv_timeout(self.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => {
                let _ = child.kill();
                return Err(Error::io(&self.program, e));
            }
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Restore(format!(
                    "{} did not answer within {:?}",
                    self.program.display(),
                    self.timeout
                )));
            }
        };
        let _ = child.wait();
        let reply: Value = serde_json::from_str(line.trim())
            .map_err(|e| Error::Restore(format!("bad reply {line:?}: {e}")))?;
        let path = reply
            .get("restored")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Restore(format!("reply lacks \"restored\": {line:?}")))?;
        let img = load_png(path)?;
        Ok(img.with_encoding(Encoding::Srgb))
    }
}
