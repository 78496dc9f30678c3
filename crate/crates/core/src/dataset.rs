//! Deterministic synthetic triplet generation: clean image, spec, degraded image.
//!
//! Sample `i` owns the generator seeded with `derive_seed(master_seed, i)`, so
//! a build is identical for any worker count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::degrade::degrade;
use crate::error::{Error, Result};
use crate::image::{load_png, save_png, Encoding, Image};
use crate::numeric::{derive_seed, mean};
use crate::spec::{det3, DegradationSpec, DegradationType, ParamKey, IDENTITY3, MIN_CAM_DET};
use crate::spectrum::RadialProfile;

/// Gaussian restricted to `[min, max]` by rejection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncNormal {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

const MAX_REJECTIONS: usize = 1_000_000;

impl TruncNormal {
    pub const fn new(mean: f64, std: f64, min: f64, max: f64) -> Self {
        TruncNormal { mean, std, min, max }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min < self.max) {
            return Err(Error::Config(format!("empty truncation [{}, {}]", self.min, self.max)));
        }
        if !(self.std >= 0.0) || !self.mean.is_finite() {
            return Err(Error::Config(format!("bad normal N({}, {})", self.mean, self.std)));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        self.validate()?;
        if self.std == 0.0 {
            return Ok(self.mean.clamp(self.min, self.max));
        }
        let normal = Normal::new(self.mean, self.std).map_err(|e| Error::Config(e.to_string()))?;
        for _ in 0..MAX_REJECTIONS {
            let v = normal.sample(rng);
            if (self.min..=self.max).contains(&v) {
                return Ok(v);
            }
        }
        Err(Error::Config(format!(
            "truncation [{}, {}] of N({}, {}) has negligible mass",
            self.min, self.max, self.mean, self.std
        )))
    }
}

/// Per-key sampling laws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamDistributions {
    pub airlight: TruncNormal,
    pub transmission: TruncNormal,
    pub gamma: TruncNormal,
    pub gain: TruncNormal,
    /// Standard deviation of the i.i.d. jitter added to the identity color matrix.
    pub cam_jitter: f64,
    pub sigma: TruncNormal,
}

impl Default for ParamDistributions {
    fn default() -> Self {
        ParamDistributions {
            airlight: TruncNormal::new(0.8, 0.1, 0.6, 1.0),
            transmission: TruncNormal::new(0.45, 0.15, 0.1, 0.95),
            gamma: TruncNormal::new(2.7, 0.5, 1.2, 4.0),
            gain: TruncNormal::new(0.08, 0.04, 0.005, 1.0),
            cam_jitter: 0.1,
            sigma: TruncNormal::new(3.0, 1.0, 0.5, 8.0),
        }
    }
}

impl ParamDistributions {
    pub fn validate(&self) -> Result<()> {
        let within = |name: &str, d: &TruncNormal, key: ParamKey| -> Result<()> {
            d.validate()?;
            let (lo, hi) = key.range();
            if d.min < lo || d.max > hi || !key.accepts(d.min) || !key.accepts(d.max) {
                return Err(Error::Config(format!(
                    "{name} truncation [{}, {}] leaves the key range [{lo}, {hi}]",
                    d.min, d.max
                )));
            }
            Ok(())
        };
        within("airlight", &self.airlight, ParamKey::AtmosphericLight)?;
        within("transmission", &self.transmission, ParamKey::Transmission)?;
        within("gamma", &self.gamma, ParamKey::Gamma)?;
        within("gain", &self.gain, ParamKey::Gain)?;
        within("sigma", &self.sigma, ParamKey::Sigma)?;
        if !(self.cam_jitter >= 0.0) {
            return Err(Error::Config(format!("cam_jitter must be non-negative, got {}", self.cam_jitter)));
        }
        Ok(())
    }
}

/// Draws a spec of type `dtype` from `rng`.
pub fn sample_spec_with<R: Rng + ?Sized>(
    dtype: DegradationType,
    dists: &ParamDistributions,
    rng: &mut R,
) -> Result<DegradationSpec> {
    dists.validate()?;
    let spec = match dtype {
        DegradationType::Haze => {
            DegradationSpec::haze(dists.airlight.sample(rng)?, dists.transmission.sample(rng)?)
        }
        DegradationType::LowLight => {
            let gamma = dists.gamma.sample(rng)?;
            let gain = dists.gain.sample(rng)?;
            let jitter = Normal::new(0.0, dists.cam_jitter).map_err(|e| Error::Config(e.to_string()))?;
            let (lo, hi) = ParamKey::CamIntrinsics.range();
            let cam = (0..MAX_REJECTIONS)
                .map(|_| {
                    let mut m = IDENTITY3;
                    m.iter_mut().for_each(|v| *v += jitter.sample(rng));
                    m
                })
                .find(|m| det3(m).abs() >= MIN_CAM_DET && m.iter().all(|v| (lo..=hi).contains(v)))
                .ok_or_else(|| Error::Config("could not draw an invertible color matrix".into()))?;
            DegradationSpec::lowlight(gamma, gain, cam)
        }
        DegradationType::Blur => DegradationSpec::blur(dists.sigma.sample(rng)?),
        DegradationType::LowRes => DegradationSpec::lowres(rng.random_range(2..=4)),
    };
    Ok(spec)
}

/// Seeded variant of [`sample_spec_with`].
pub fn sample_spec(dtype: DegradationType, dists: &ParamDistributions, seed: u64) -> Result<DegradationSpec> {
    sample_spec_with(dtype, dists, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Lattice value noise with cell size `cell`, smoothly interpolated, in `[0, 1]`.
fn value_noise<R: Rng + ?Sized>(rng: &mut R, w: usize, h: usize, cell: f64) -> Vec<f64> {
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random()).collect();
    let (ox, oy): (f64, f64) = (rng.random(), rng.random());
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = y as f64 / cell + oy;
        let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell + ox;
            let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Multi-octave value noise stretched to `[0, 1]`.
fn fractal_noise<R: Rng + ?Sized>(rng: &mut R, w: usize, h: usize, base_cell: f64, octaves: usize) -> Vec<f64> {
    let mut acc = vec![0.0; w * h];
    let mut amp = 1.0;
    let mut cell = base_cell;
    for _ in 0..octaves {
        for (a, n) in acc.iter_mut().zip(value_noise(rng, w, h, cell.max(1.5))) {
            *a += amp * n;
        }
        amp *= 0.55;
        cell /= 2.0;
    }
    let (lo, hi) = acc.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-12);
    acc.into_iter().map(|v| (v - lo) / span).collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h.fract();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Mean luminance window enforced on procedural images.
pub const PROCEDURAL_LUMINANCE: (f64, f64) = (0.45, 0.55);

/// Deterministic synthetic clean image: saturated fractal color fields, sharp
/// shapes and fine texture. Mean luminance lies in [`PROCEDURAL_LUMINANCE`].
pub fn procedural_clean(seed: u64, width: usize, height: usize) -> Result<Image> {
    if width < 32 || height < 32 {
        return Err(Error::InvalidParameter(format!(
            "procedural images need at least 32x32, got {width}x{height}"
        )));
    }
    let (w, h) = (width, height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_cell = w.max(h) as f64 / rng.random_range(2.0..4.0);
    let value = fractal_noise(&mut rng, w, h, base_cell, 6);
    let hue = fractal_noise(&mut rng, w, h, base_cell * 1.5, 3);
    let hue0: f64 = rng.random();
    let spread = rng.random_range(0.15..0.4);
    let sat = rng.random_range(0.7..0.95);
    let mut px: Vec<[f64; 3]> = value
        .iter()
        .zip(&hue)
        .map(|(&v, &hh)| hsv_to_rgb(hue0 + spread * (hh - 0.5), sat, 0.2 + 0.8 * v))
        .collect();

    let shapes = rng.random_range(10..20);
    for _ in 0..shapes {
        let color = hsv_to_rgb(rng.random(), rng.random_range(0.6..1.0), rng.random_range(0.15..1.0));
        let alpha = rng.random_range(0.7..1.0);
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let rx = rng.random_range(0.03..0.2) * w as f64;
        let ry = rng.random_range(0.03..0.2) * h as f64;
        let disk = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let inside = if disk { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    let p = &mut px[y * w + x];
                    for c in 0..3 {
                        p[c] = p[c] * (1.0 - alpha) + color[c] * alpha;
                    }
                }
            }
        }
    }

    // fine texture, strengthened until the detail floor holds
    let grain = value_noise(&mut rng, w, h, 1.5);
    let mut strength = 0.2;
    loop {
        let data: Vec<f64> = px
            .iter()
            .zip(&grain)
            .flat_map(|(p, g)| {
                let f = 1.0 + strength * (g - 0.5);
                p.map(|c| (c * f).clamp(0.0, 1.0))
            })
            .collect();
        let img = fit_luminance(&Image::new(w, h, data, Encoding::Srgb)?, PROCEDURAL_LUMINANCE);
        if strength >= 1.0 || high_frequency_ratio(&img) >= MIN_DETAIL {
            return Ok(img);
        }
        strength += 0.15;
    }
}

/// Floor on the high-frequency energy share of procedural images.
pub const MIN_DETAIL: f64 = 0.03;

/// Applies a per-channel power so the mean luminance lands inside `window`.
fn fit_luminance(img: &Image, window: (f64, f64)) -> Image {
    let m = img.mean_luminance();
    if (window.0..=window.1).contains(&m) {
        return img.clone();
    }
    let target = m.clamp(window.0, window.1);
    let target = 0.5 * (target + 0.5 * (window.0 + window.1));
    let (mut lo, mut hi) = (0.05f64, 20.0f64);
    for _ in 0..32 {
        let mid = (lo * hi).sqrt();
        if img.map(|v| v.powf(mid)).mean_luminance() > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = (lo * hi).sqrt();
    img.map(|v| v.powf(p))
}

/// Share of luminance spectral energy above half-Nyquist (mean removed).
pub fn high_frequency_ratio(img: &Image) -> f64 {
    RadialProfile::of_luminance(img, false).energy_fraction_above(0.25)
}

/// Where clean images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    Procedural { width: usize, height: usize },
    /// PNG files of a directory, used round-robin in file-name order.
    Directory { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 103.0 / 110.0,
            val: 4.0 / 110.0,
            test: 3.0 / 110.0,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {f:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` items; ties go to the earlier split.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let quotas = [self.train, self.val, self.test].map(|f| f * n as f64);
        let mut sizes = quotas.map(|q| q.floor() as usize);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
        let mut left = n.saturating_sub(sizes.iter().sum());
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[i] += 1;
            left -= 1;
        }
        sizes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Document(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub source: Source,
    pub count_per_type: usize,
    pub master_seed: u64,
    pub splits: SplitFractions,
    pub distributions: ParamDistributions,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            source: Source::Procedural { width: 144, height: 144 },
            count_per_type: 25,
            master_seed: 0,
            splits: SplitFractions::default(),
            distributions: ParamDistributions::default(),
        }
    }
}

impl BuildConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: BuildConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count_per_type == 0 {
            return Err(Error::Config("count_per_type must be positive".into()));
        }
        if let Source::Procedural { width, height } = self.source {
            if width < 32 || height < 32 {
                return Err(Error::Config(format!("procedural size {width}x{height} below 32x32")));
            }
        }
        self.splits.validate()?;
        self.distributions.validate()
    }

    pub fn total(&self) -> usize {
        4 * self.count_per_type
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub clean_path: PathBuf,
    pub degraded_path: PathBuf,
    pub spec: DegradationSpec,
    pub seed: u64,
    pub split: Split,
    /// Size the source was center-cropped to so the scale divides it.
    pub crop_applied: Option<(usize, usize)>,
}

impl ManifestRecord {
    pub fn to_json(&self) -> Value {
        json!({
            "id": self.id,
            "clean_path": self.clean_path.to_string_lossy(),
            "degraded_path": self.degraded_path.to_string_lossy(),
            "spec": self.spec.to_json(),
            "seed": self.seed,
            "split": self.split.name(),
            "crop_applied": self.crop_applied.map(|(w, h)| json!([w, h])),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let field = |k: &str| v.get(k).ok_or_else(|| Error::Document(format!("record lacks {k:?}")));
        let text = |k: &str| -> Result<String> {
            field(k)?
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::Document(format!("{k} must be a string")))
        };
        let crop_applied = match field("crop_applied") {
            Ok(Value::Array(d)) if d.len() == 2 => {
                let n = |x: &Value| x.as_u64().map(|u| u as usize).ok_or_else(|| Error::Document("bad crop".into()));
                Some((n(&d[0])?, n(&d[1])?))
            }
            Ok(Value::Null) | Err(_) => None,
            Ok(other) => return Err(Error::Document(format!("bad crop_applied {other}"))),
        };
        Ok(ManifestRecord {
            id: text("id")?,
            clean_path: text("clean_path")?.into(),
            degraded_path: text("degraded_path")?.into(),
            spec: DegradationSpec::from_json(field("spec")?)?,
            seed: field("seed")?
                .as_u64()
                .ok_or_else(|| Error::Document("seed must be an unsigned integer".into()))?,
            split: Split::parse(&text("split")?)?,
            crop_applied,
        })
    }

    /// Size of the clean reference the degraded image derives from.
    pub fn reference_dims(&self, clean: &Image) -> (usize, usize) {
        self.crop_applied.unwrap_or(clean.dims())
    }
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let v: Value = serde_json::from_str(line)
                .map_err(|e| Error::Document(format!("{} line {}: {e}", path.display(), i + 1)))?;
            ManifestRecord::from_json(&v)
        })
        .collect()
}

/// Mean absolute change below which a degradation counts as a no-op.
pub const NOOP_THRESHOLD: f64 = 0.01;
const MAX_RESAMPLES: usize = 100;

/// One generated sample before it is written to disk.
#[derive(Clone, Debug)]
pub struct Sample {
    pub index: usize,
    pub seed: u64,
    pub clean: Image,
    pub degraded: Image,
    pub spec: DegradationSpec,
    pub crop_applied: Option<(usize, usize)>,
}

/// Type of sample `index`: round-robin over the taxonomy.
pub fn sample_type(index: usize) -> DegradationType {
    DegradationType::ALL[index % 4]
}

/// Generates sample `index` of `config` from `sources` (ignored in procedural mode).
pub fn generate_sample(config: &BuildConfig, sources: &[Image], index: usize) -> Result<Sample> {
    let seed = derive_seed(config.master_seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dtype = sample_type(index);
    let clean = match &config.source {
        Source::Procedural { width, height } => procedural_clean(rng.next_u64(), *width, *height)?,
        Source::Directory { .. } => {
            if sources.is_empty() {
                return Err(Error::Config("no source images".into()));
            }
            sources[index % sources.len()].clone()
        }
    }
    .quantize_8bit();
    for _ in 0..MAX_RESAMPLES {
        let spec = sample_spec_with(dtype, &config.distributions, &mut rng)?;
        let (clean, crop_applied) = match spec.dtype {
            DegradationType::LowRes => {
                let s = spec.scalar(ParamKey::Scale)? as usize;
                let cropped = clean.crop_to_multiple(s)?;
                let crop = (cropped.dims() != clean.dims()).then(|| cropped.dims());
                (cropped, crop)
            }
            _ => (clean.clone(), None),
        };
        let degraded = degrade(&clean, &spec)?.quantize_8bit();
        // resolution loss is never a no-op
        let change = if degraded.dims() == clean.dims() {
            mean(&degraded.data().iter().zip(clean.data()).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        } else {
            f64::INFINITY
        };
        if change >= NOOP_THRESHOLD {
            return Ok(Sample {
                index,
                seed,
                clean,
                degraded,
                spec,
                crop_applied,
            });
        }
        log::debug!("sample {index}: no-op degradation (mean change {change:.4}), resampling");
    }
    Err(Error::Config(format!("sample {index}: every draw was a no-op degradation")))
}

/// Default-configured procedural samples `0..4 * count_per_type`, generated
/// in memory; the benchmark suite for the blind estimators.
pub fn synthetic_suite(count_per_type: usize, master_seed: u64) -> Result<Vec<Sample>> {
    let config = BuildConfig {
        count_per_type,
        master_seed,
        ..BuildConfig::default()
    };
    (0..config.total())
        .into_par_iter()
        .map(|i| generate_sample(&config, &[], i))
        .collect()
}

/// Split label of every index, by a seeded shuffle honoring the fractions.
pub fn assign_splits(config: &BuildConfig) -> Vec<Split> {
    let n = config.total();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.master_seed, u64::MAX)));
    let [train, val, _] = config.splits.sizes(n);
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

fn load_sources(config: &BuildConfig) -> Result<Vec<Image>> {
    let Source::Directory { path } = &config.source else {
        return Ok(Vec::new());
    };
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("{} holds no PNG files", path.display())));
    }
    files.iter().map(load_png).collect()
}

/// Writes `clean/`, `degraded/` and the manifest under `out`, using at most
/// `threads` workers (all cores when `None`). Returns the records in index order.
pub fn build(config: &BuildConfig, out: &Path, threads: Option<usize>) -> Result<Vec<ManifestRecord>> {
    config.validate()?;
    let sources = load_sources(config)?;
    for sub in ["clean", "degraded"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let splits = assign_splits(config);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let records: Result<Vec<ManifestRecord>> = pool.install(|| {
        (0..config.total())
            .into_par_iter()
            .map(|i| {
                let s = generate_sample(config, &sources, i)?;
                let id = format!("s{i:06}");
                let clean_path = PathBuf::from("clean").join(format!("{id}.png"));
                let degraded_path = PathBuf::from("degraded").join(format!("{id}.png"));
                save_png(&s.clean, out.join(&clean_path))?;
                save_png(&s.degraded, out.join(&degraded_path))?;
                Ok(ManifestRecord {
                    id,
                    clean_path,
                    degraded_path,
                    spec: s.spec,
                    seed: s.seed,
                    split: splits[i],
                    crop_applied: s.crop_applied,
                })
            })
            .collect()
    });
    let manifest = out.join(MANIFEST_NAME);
    let records = match records {
        Ok(r) => r,
        Err(e) => {
            let _ = fs::remove_file(&manifest);
            return Err(e);
        }
    };
    let mut text = String::new();
    for r in &records {
        text.push_str(&r.to_json().to_string());
        text.push('\n');
    }
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&manifest)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = fs::remove_file(&manifest);
        return Err(Error::io(&manifest, e));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::score_understanding;

    #[test]
    fn spec_draws_are_reproducible_and_truncated() {
        let d = ParamDistributions::default();
        for t in DegradationType::ALL {
            assert_eq!(sample_spec(t, &d, 7).unwrap(), sample_spec(t, &d, 7).unwrap());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let t = d.transmission.sample(&mut rng).unwrap();
            assert!((0.1..=0.95).contains(&t));
        }
    }

    #[test]
    fn gain_mean_matches_truncated_normal() {
        let d = ParamDistributions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<f64> = (0..10_000).map(|_| d.gain.sample(&mut rng).unwrap()).collect();
        let m = mean(&draws);
        assert!((m - 0.08).abs() <= 0.005, "{m}");
    }

    #[test]
    fn impossible_truncation_is_rejected() {
        let bad = TruncNormal::new(0.5, 0.1, 0.7, 0.7);
        assert!(bad.sample(&mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let mut d = ParamDistributions::default();
        d.sigma.max = 9.0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn lowlight_draws_have_invertible_cam() {
        let d = ParamDistributions::default();
        for seed in 0..200 {
            let s = sample_spec(DegradationType::LowLight, &d, seed).unwrap();
            s.validate().unwrap();
        }
    }

    #[test]
    fn split_sizes_largest_remainder() {
        let f = SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        };
        assert_eq!(f.sizes(40), [32, 4, 4]);
        // quotas 5.6 / 0.7 / 0.7: both 0.7 remainders beat 0.6
        assert_eq!(f.sizes(7), [5, 1, 1]);
        assert_eq!(SplitFractions::default().sizes(110), [103, 4, 3]);
        let bad = SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.2,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn procedural_is_deterministic_and_rejects_tiny() {
        assert_eq!(procedural_clean(5, 48, 40).unwrap(), procedural_clean(5, 48, 40).unwrap());
        assert_ne!(procedural_clean(5, 48, 40).unwrap(), procedural_clean(6, 48, 40).unwrap());
        assert!(procedural_clean(1, 31, 64).is_err());
    }

    #[test]
    fn procedural_luminance_and_detail() {
        for seed in 0..100 {
            let img = procedural_clean(seed, 96, 96).unwrap();
            let m = img.mean_luminance();
            assert!((0.35..=0.65).contains(&m), "seed {seed}: {m}");
            let hf = high_frequency_ratio(&img);
            assert!(hf >= 0.02, "seed {seed}: {hf}");
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = BuildConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(BuildConfig::from_json_str(&text).unwrap(), cfg);
        let partial = r#"{"count_per_type": 3, "master_seed": 9, "source": {"procedural": {"width": 64, "height": 64}}}"#;
        let cfg = BuildConfig::from_json_str(partial).unwrap();
        assert_eq!(cfg.total(), 12);
        assert!(BuildConfig::from_json_str(r#"{"count_per_type": 0}"#).is_err());
        assert!(BuildConfig::from_json_str(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn small_build_is_balanced_and_reproducible() {
        let cfg = BuildConfig {
            source: Source::Procedural { width: 48, height: 48 },
            count_per_type: 10,
            master_seed: 11,
            splits: SplitFractions {
                train: 0.8,
                val: 0.1,
                test: 0.1,
            },
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = build(&cfg, a.path(), Some(1)).unwrap();
        let rb = build(&cfg, b.path(), Some(4)).unwrap();
        assert_eq!(ra, rb);
        let ma = fs::read(a.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(ma, fs::read(b.path().join(MANIFEST_NAME)).unwrap());
        for t in DegradationType::ALL {
            assert_eq!(ra.iter().filter(|r| r.spec.dtype == t).count(), 10);
        }
        let count = |s: Split| ra.iter().filter(|r| r.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (32, 4, 4));
        let back = read_manifest(a.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(back, ra);
        for r in &back {
            r.spec.validate().unwrap();
            let row = score_understanding(&r.id, Some(&r.spec), &r.spec);
            assert!(row.per_key.values().all(|e| e.p_abs == 0.0));
            let clean = load_png(a.path().join(&r.clean_path)).unwrap();
            let stored = load_png(a.path().join(&r.degraded_path)).unwrap();
            let again = degrade(&clean, &r.spec).unwrap();
            assert_eq!(again.dims(), stored.dims());
            for (x, y) in again.data().iter().zip(stored.data()) {
                assert!((x - y).abs() <= 1.0 / 510.0 + 1e-12);
            }
        }
    }
}
