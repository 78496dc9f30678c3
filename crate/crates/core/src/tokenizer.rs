//! Hierarchical `[type][key][value]` token encoding of degradation specs and
//! Monte-Carlo checks of the quantization bounds.
//!
//! Every key is normalized to `[0, 1]` by its range before gridding, so one
//! bin width `delta` means the same relative precision for every key.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{item_rng, mean};
use crate::spec::{DegradationSpec, DegradationType, ParamKey, ParamValue};

/// Slack for round-off when a value sits on a bin edge.
const EDGE_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantGrid {
    delta: f64,
    bins: u32,
    ranges: BTreeMap<ParamKey, (f64, f64)>,
}

impl QuantGrid {
    /// Grid over the canonical key ranges. `delta` must lie in `(0, 0.5]`.
    pub fn new(delta: f64) -> Result<Self> {
        let ranges = ParamKey::ALL.iter().map(|&k| (k, k.range())).collect();
        Self::with_ranges(delta, ranges)
    }

    pub fn with_ranges(delta: f64, ranges: BTreeMap<ParamKey, (f64, f64)>) -> Result<Self> {
        if !(delta > 0.0 && delta <= 0.5) {
            return Err(Error::Config(format!("grid delta {delta} outside (0, 0.5]")));
        }
        for (k, &(lo, hi)) in &ranges {
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("empty range [{lo}, {hi}] for key {}", k.name())));
            }
        }
        let bins = (1.0 / delta - EDGE_EPS).ceil() as u32;
        Ok(QuantGrid { delta, bins, ranges })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Number of bins `Z = ceil(1 / delta)`.
    pub fn bins(&self) -> u32 {
        self.bins
    }

    pub fn range(&self, key: ParamKey) -> (f64, f64) {
        self.ranges.get(&key).copied().unwrap_or_else(|| key.range())
    }

    /// Bin of a normalized coordinate `u` in `[0, 1]`.
    pub fn bin_of_unit(&self, u: f64) -> u32 {
        let z = (u / self.delta + EDGE_EPS).floor().max(0.0) as u32;
        z.min(self.bins - 1)
    }

    /// Normalized `[lo, hi]` extent of bin `z`; the last bin is cut at 1.
    pub fn unit_bin(&self, z: u32) -> (f64, f64) {
        let lo = z as f64 * self.delta;
        (lo, ((z + 1) as f64 * self.delta).min(1.0))
    }

    /// Normalized centroid of bin `z`, capped at 1.
    pub fn unit_centroid(&self, z: u32) -> f64 {
        ((z as f64 + 0.5) * self.delta).min(1.0)
    }
}

/// Result of quantizing one scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quantized {
    pub bin: u32,
    /// The input lay outside the key range and was clamped first.
    pub clamped: bool,
}

pub fn quantize(v: f64, key: ParamKey, grid: &QuantGrid) -> Quantized {
    let (lo, hi) = grid.range(key);
    let clamped = !(lo..=hi).contains(&v);
    if clamped {
        log::warn!("{} value {v} outside [{lo}, {hi}], clamped before quantization", key.name());
    }
    let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    let u = if u.is_nan() { 0.0 } else { u };
    Quantized {
        bin: grid.bin_of_unit(u),
        clamped,
    }
}

/// Centroid of bin `z` in key units. The integer-valued scale snaps to the
/// allowed factor inside the bin nearest the centroid.
pub fn dequantize(z: u32, key: ParamKey, grid: &QuantGrid) -> Result<f64> {
    if z >= grid.bins() {
        return Err(Error::InvalidParameter(format!(
            "bin {z} out of range [0, {}] for {}",
            grid.bins() - 1,
            key.name()
        )));
    }
    let (lo, hi) = grid.range(key);
    let v = lo + grid.unit_centroid(z) * (hi - lo);
    if key == ParamKey::Scale {
        let allowed = [2.0, 3.0, 4.0];
        let nearest = |cands: &mut dyn Iterator<Item = f64>| {
            cands.min_by(|a, b| (a - v).abs().total_cmp(&(b - v).abs()))
        };
        let in_bin = nearest(&mut allowed.iter().copied().filter(|&s| quantize(s, key, grid).bin == z));
        return Ok(in_bin.or_else(|| nearest(&mut allowed.iter().copied())).expect("non-empty"));
    }
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Type(DegradationType),
    /// `shape` is set for per-pixel maps so the decoder knows the element count.
    Key { key: ParamKey, shape: Option<(usize, usize)> },
    Val(u32),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Type(t) => write!(f, "T:{}", t.name()),
            Token::Key { key, shape: None } => write!(f, "K:{}", key.name()),
            Token::Key { key, shape: Some((w, h)) } => write!(f, "K:{}[{w}x{h}]", key.name()),
            Token::Val(z) => write!(f, "V:{z}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<Token>,
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for TokenSeq {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tokens = s
            .split_whitespace()
            .enumerate()
            .map(|(pos, word)| parse_token(word).map_err(|message| Error::Token { position: pos, message }))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSeq { tokens })
    }
}

fn parse_token(word: &str) -> std::result::Result<Token, String> {
    let (tag, body) = word.split_once(':').ok_or_else(|| format!("malformed token {word:?}"))?;
    match tag {
        "T" => body
            .parse()
            .map(Token::Type)
            .map_err(|_| format!("unknown type {body:?}")),
        "K" => {
            let (name, shape) = match body.split_once('[') {
                None => (body, None),
                Some((name, rest)) => {
                    let dims = rest.strip_suffix(']').ok_or_else(|| format!("unterminated shape in {word:?}"))?;
                    let (w, h) = dims.split_once('x').ok_or_else(|| format!("bad shape in {word:?}"))?;
                    let w: usize = w.parse().map_err(|_| format!("bad width in {word:?}"))?;
                    let h: usize = h.parse().map_err(|_| format!("bad height in {word:?}"))?;
                    (name, Some((w, h)))
                }
            };
            let key = name.parse().map_err(|_| format!("unknown key {name:?}"))?;
            Ok(Token::Key { key, shape })
        }
        "V" => body.parse().map(Token::Val).map_err(|_| format!("bad bin index {body:?}")),
        _ => Err(format!("unknown token tag {tag:?}")),
    }
}

/// Emits the type token, then each key in schema order followed by one value
/// token per element (row-major for matrices and maps).
pub fn encode(spec: &DegradationSpec, grid: &QuantGrid) -> Result<TokenSeq> {
    spec.validate()?;
    let mut tokens = vec![Token::Type(spec.dtype)];
    for &key in spec.dtype.keys() {
        let value = spec.get(key).expect("validated");
        let shape = match value {
            ParamValue::Map { width, height, .. } => Some((*width, *height)),
            _ => None,
        };
        tokens.push(Token::Key { key, shape });
        tokens.extend(value.elements().iter().map(|&v| Token::Val(quantize(v, key, grid).bin)));
    }
    Ok(TokenSeq { tokens })
}

/// Inverse of [`encode`]. Errors name the first offending token position.
pub fn decode(seq: &TokenSeq, grid: &QuantGrid) -> Result<DegradationSpec> {
    let err = |position: usize, message: String| Error::Token { position, message };
    let toks = &seq.tokens;
    let dtype = match toks.first() {
        Some(Token::Type(t)) => *t,
        Some(other) => return Err(err(0, format!("expected a type token, found {other}"))),
        None => return Err(err(0, "empty token sequence".into())),
    };
    let mut spec = DegradationSpec::new(dtype);
    let mut i = 1;
    while i < toks.len() {
        let (key, shape) = match toks[i] {
            Token::Key { key, shape } => (key, shape),
            Token::Val(_) => return Err(err(i, "value token before any key".into())),
            Token::Type(_) => return Err(err(i, "type token after the head".into())),
        };
        if key.owner() != dtype {
            return Err(err(i, format!("key {} does not belong to type {}", key.name(), dtype.name())));
        }
        if spec.get(key).is_some() {
            return Err(err(i, format!("duplicate key {}", key.name())));
        }
        let key_pos = i;
        i += 1;
        let mut values = Vec::new();
        while let Some(Token::Val(z)) = toks.get(i) {
            values.push(dequantize(*z, key, grid).map_err(|e| err(i, e.to_string()))?);
            i += 1;
        }
        if values.is_empty() {
            return Err(err(i, format!("key {} has no value tokens", key.name())));
        }
        let value = match (shape, values.len()) {
            (Some((w, h)), n) if n == w * h => ParamValue::Map {
                width: w,
                height: h,
                data: values,
            },
            (Some((w, h)), n) => {
                return Err(err(key_pos, format!("map {w}x{h} needs {} values, found {n}", w * h)));
            }
            (None, 1) => ParamValue::Scalar(values[0]),
            (None, 3) => ParamValue::Vec3([values[0], values[1], values[2]]),
            (None, 9) => {
                let mut m = [0.0; 9];
                m.copy_from_slice(&values);
                ParamValue::Mat3(m)
            }
            (None, n) => return Err(err(key_pos, format!("{n} values do not form a scalar, vector or matrix"))),
        };
        spec.params.insert(key, value);
    }
    if let Some(missing) = dtype.keys().iter().find(|k| spec.get(**k).is_none()) {
        return Err(err(toks.len(), format!("missing key {}", missing.name())));
    }
    Ok(spec)
}

/// Synthetic setup for the classification/regression loss decomposition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prop1Setup {
    /// Standard deviation of the model density on the normalized axis.
    pub sigma: f64,
    pub delta: f64,
    pub trials: usize,
    /// Model mean offset `mu - v` in units of `sigma`.
    pub mean_offset: f64,
    pub seed: u64,
}

impl Default for Prop1Setup {
    fn default() -> Self {
        Prop1Setup {
            sigma: 0.1,
            delta: 0.05,
            trials: 10_000,
            mean_offset: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prop1Report {
    /// Mean exact bin negative log-likelihood.
    pub lhs: f64,
    /// Mean of the squared-error + log-width approximation.
    pub rhs: f64,
    /// Mean absolute difference between the two.
    pub gap: f64,
}

/// `P(lo <= X <= hi)` for `X ~ N(mu, sigma^2)`, evaluated on the tail side
/// that avoids cancellation.
pub fn gaussian_interval_mass(lo: f64, hi: f64, mu: f64, sigma: f64) -> f64 {
    let s = sigma * std::f64::consts::SQRT_2;
    let (a, b) = ((lo - mu) / s, (hi - mu) / s);
    if a > 0.0 {
        0.5 * (libm::erfc(a) - libm::erfc(b))
    } else if b < 0.0 {
        0.5 * (libm::erfc(-b) - libm::erfc(-a))
    } else {
        0.5 * (libm::erf(b) - libm::erf(a))
    }
}

/// Compares the exact negative log bin mass of a Gaussian model with its
/// squared-error approximation `|v-mu|^2/(2 s^2) - ln(delta) + ln(2 pi s^2)/2`.
pub fn verify_prop1(setup: &Prop1Setup) -> Result<Prop1Report> {
    if !(setup.sigma > 0.0) {
        return Err(Error::Degenerate(format!("sigma must be positive, got {}", setup.sigma)));
    }
    if setup.trials < 10_000 {
        return Err(Error::Config(format!("need at least 10^4 trials, got {}", setup.trials)));
    }
    let grid = QuantGrid::new(setup.delta)?;
    let sigma = setup.sigma;
    let pairs: Vec<(f64, f64)> = (0..setup.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(setup.seed, i as u64);
            let v: f64 = rng.random();
            let mu = v + setup.mean_offset * sigma;
            let z = grid.bin_of_unit(v);
            let (lo, hi) = grid.unit_bin(z);
            let exact = -gaussian_interval_mass(lo, hi, mu, sigma).ln();
            let approx = (v - mu).powi(2) / (2.0 * sigma * sigma) - (hi - lo).ln()
                + 0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
            (exact, approx)
        })
        .collect();
    let lhs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let rhs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let gaps: Vec<f64> = pairs.iter().map(|p| (p.0 - p.1).abs()).collect();
    Ok(Prop1Report {
        lhs: mean(&lhs),
        rhs: mean(&rhs),
        gap: mean(&gaps),
    })
}

/// Synthetic setup for the excess-risk bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prop2Setup {
    /// Target excess risk (mean KL from truth to model).
    pub epsilon: f64,
    /// Diameter bound of the value domain.
    pub d_max: f64,
    pub delta: f64,
    /// Value range mapped onto the grid.
    pub range: (f64, f64),
    pub trials: usize,
    pub seed: u64,
}

impl Default for Prop2Setup {
    fn default() -> Self {
        Prop2Setup {
            epsilon: 0.02,
            d_max: 1.0,
            delta: 0.05,
            range: (0.0, 1.0),
            trials: 100_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prop2Report {
    pub r_cls: f64,
    pub r_reg: f64,
    pub bound_cls: f64,
    pub bound_reg: f64,
    /// Mean KL actually realized by the construction.
    pub kl: f64,
}

/// Model probability left on the true bin of a corrupted trial; the rest sits
/// on one wrong bin, so the argmax decoder errs there.
const CORRUPT_TRUE_MASS: f64 = 0.3;

/// Measures classification and regression risk of the argmax/centroid decoder
/// under a model whose mean KL from the one-hot truth is at most `epsilon`.
///
/// A deterministic, evenly spread fraction `epsilon / KL_bad` of the trials is
/// corrupted; the remaining trials are predicted exactly.
pub fn verify_prop2(setup: &Prop2Setup) -> Result<Prop2Report> {
    let (lo, hi) = setup.range;
    let span = hi - lo;
    if !(setup.epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be non-negative, got {}", setup.epsilon)));
    }
    if setup.trials < 100_000 {
        return Err(Error::Config(format!("need at least 10^5 trials, got {}", setup.trials)));
    }
    if !(span > 0.0) || setup.d_max < span {
        return Err(Error::Config(format!(
            "d_max {} must cover the range [{lo}, {hi}]",
            setup.d_max
        )));
    }
    let grid = QuantGrid::new(setup.delta)?;
    if grid.bins() < 2 {
        return Err(Error::Config("need at least two bins".into()));
    }
    let kl_bad = -CORRUPT_TRUE_MASS.ln();
    let frac = (setup.epsilon / kl_bad).min(1.0);
    let n = setup.trials;
    let corrupted = |i: usize| ((i + 1) as f64 * frac).floor() > (i as f64 * frac).floor();

    let outcomes: Vec<(f64, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(setup.seed, i as u64);
            let u: f64 = rng.random();
            let v = lo + u * span;
            let z_true = grid.bin_of_unit(u);
            let (z_hat, kl) = if corrupted(i) {
                let mut wrong = rng.random_range(0..grid.bins() - 1);
                if wrong >= z_true {
                    wrong += 1;
                }
                (wrong, kl_bad)
            } else {
                (z_true, 0.0)
            };
            let v_hat = lo + grid.unit_centroid(z_hat) * span;
            let miss = if z_hat == z_true { 0.0 } else { 1.0 };
            (miss, (v_hat - v).powi(2), kl)
        })
        .collect();
    let col = |f: fn(&(f64, f64, f64)) -> f64| -> Vec<f64> { outcomes.iter().map(f).collect() };
    let kl = mean(&col(|o| o.2));
    if kl > setup.epsilon + 1e-12 {
        return Err(Error::Degenerate(format!(
            "construction realized KL {kl} above epsilon {}",
            setup.epsilon
        )));
    }
    let root = (2.0 * setup.epsilon).sqrt();
    Ok(Prop2Report {
        r_cls: mean(&col(|o| o.0)),
        r_reg: mean(&col(|o| o.1)),
        bound_cls: root,
        bound_reg: setup.delta.powi(2) * span * span / 4.0 + setup.d_max.powi(2) * root,
        kl,
    })
}
