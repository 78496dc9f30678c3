//! The degradation taxonomy: types, type-scoped parameter keys and values.
//!
//! A [`DegradationSpec`] is a plain record and may hold anything a predictor
//! emits, including wrong key sets and out-of-range values. [`DegradationSpec::validate`]
//! is the single place where the schema and range invariants are enforced.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Minimum `|det|` accepted for the camera color matrix.
pub const MIN_CAM_DET: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DegradationType {
    Haze,
    LowLight,
    Blur,
    LowRes,
}

impl DegradationType {
    pub const ALL: [DegradationType; 4] = [
        DegradationType::Haze,
        DegradationType::LowLight,
        DegradationType::Blur,
        DegradationType::LowRes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradationType::Haze => "haze",
            DegradationType::LowLight => "lowlight",
            DegradationType::Blur => "blur",
            DegradationType::LowRes => "lowres",
        }
    }

    /// The required key set, in canonical order.
    pub fn keys(self) -> &'static [ParamKey] {
        match self {
            DegradationType::Haze => &[ParamKey::AtmosphericLight, ParamKey::Transmission],
            DegradationType::LowLight => &[ParamKey::Gamma, ParamKey::Gain, ParamKey::CamIntrinsics],
            DegradationType::Blur => &[ParamKey::Sigma],
            DegradationType::LowRes => &[ParamKey::Scale],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for DegradationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DegradationType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Document(format!("unknown degradation type {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    AtmosphericLight,
    Transmission,
    Gamma,
    Gain,
    CamIntrinsics,
    Sigma,
    Scale,
}

impl ParamKey {
    pub const ALL: [ParamKey; 7] = [
        ParamKey::AtmosphericLight,
        ParamKey::Transmission,
        ParamKey::Gamma,
        ParamKey::Gain,
        ParamKey::CamIntrinsics,
        ParamKey::Sigma,
        ParamKey::Scale,
    ];

    /// Short name used in documents and token text.
    pub fn name(self) -> &'static str {
        match self {
            ParamKey::AtmosphericLight => "A",
            ParamKey::Transmission => "t",
            ParamKey::Gamma => "gamma",
            ParamKey::Gain => "gain",
            ParamKey::CamIntrinsics => "cam",
            ParamKey::Sigma => "sigma",
            ParamKey::Scale => "scale",
        }
    }

    pub fn owner(self) -> DegradationType {
        match self {
            ParamKey::AtmosphericLight | ParamKey::Transmission => DegradationType::Haze,
            ParamKey::Gamma | ParamKey::Gain | ParamKey::CamIntrinsics => DegradationType::LowLight,
            ParamKey::Sigma => DegradationType::Blur,
            ParamKey::Scale => DegradationType::LowRes,
        }
    }

    /// Closed range used for normalization and quantization. Open physical
    /// lower bounds (gain, sigma) are closed to zero here.
    pub fn range(self) -> (f64, f64) {
        match self {
            ParamKey::AtmosphericLight => (0.6, 1.0),
            ParamKey::Transmission => (0.1, 0.95),
            ParamKey::Gamma => (1.2, 4.0),
            ParamKey::Gain => (0.0, 1.0),
            ParamKey::CamIntrinsics => (-1.5, 1.5),
            ParamKey::Sigma => (0.0, 8.0),
            ParamKey::Scale => (2.0, 4.0),
        }
    }

    /// Whether a single element satisfies this key's range invariant.
    pub fn accepts(self, v: f64) -> bool {
        let (lo, hi) = self.range();
        if !v.is_finite() {
            return false;
        }
        match self {
            ParamKey::Gain | ParamKey::Sigma => v > lo && v <= hi,
            ParamKey::Scale => [2.0, 3.0, 4.0].contains(&v),
            _ => v >= lo && v <= hi,
        }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamKey::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Document(format!("unknown parameter key {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamValue {
    Scalar(f64),
    Vec3([f64; 3]),
    /// Row-major 3x3 matrix.
    Mat3([f64; 9]),
    /// Row-major per-pixel map.
    Map {
        width: usize,
        height: usize,
        data: Vec<f64>,
    },
}

impl ParamValue {
    pub fn elements(&self) -> &[f64] {
        match self {
            ParamValue::Scalar(v) => std::slice::from_ref(v),
            ParamValue::Vec3(v) => v,
            ParamValue::Mat3(m) => m,
            ParamValue::Map { data, .. } => data,
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            ParamValue::Scalar(v) => Some(*v),
            _ => None,
        }
    }

    pub fn mean_abs(&self) -> f64 {
        let e = self.elements();
        e.iter().map(|v| v.abs()).sum::<f64>() / e.len() as f64
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ParamValue::Scalar(_) => "scalar",
            ParamValue::Vec3(_) => "vec3",
            ParamValue::Mat3(_) => "mat3",
            ParamValue::Map { .. } => "map",
        }
    }
}

pub fn det3(m: &[f64; 9]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

/// Inverse of a 3x3 matrix, rejecting `|det| < MIN_CAM_DET`.
pub fn invert3(m: &[f64; 9]) -> Result<[f64; 9]> {
    let det = det3(m);
    if !(det.abs() >= MIN_CAM_DET) {
        return Err(Error::SingularMatrix { matrix: *m, det });
    }
    let inv = [
        m[4] * m[8] - m[5] * m[7],
        m[2] * m[7] - m[1] * m[8],
        m[1] * m[5] - m[2] * m[4],
        m[5] * m[6] - m[3] * m[8],
        m[0] * m[8] - m[2] * m[6],
        m[2] * m[3] - m[0] * m[5],
        m[3] * m[7] - m[4] * m[6],
        m[1] * m[6] - m[0] * m[7],
        m[0] * m[4] - m[1] * m[3],
    ];
    Ok(inv.map(|v| v / det))
}

pub const IDENTITY3: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

/// One degradation: a type and its parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    pub dtype: DegradationType,
    pub params: BTreeMap<ParamKey, ParamValue>,
}

impl DegradationSpec {
    pub fn new(dtype: DegradationType) -> Self {
        DegradationSpec {
            dtype,
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: ParamKey, value: ParamValue) -> Self {
        self.params.insert(key, value);
        self
    }

    pub fn haze(a: f64, t: f64) -> Self {
        Self::new(DegradationType::Haze)
            .with(ParamKey::AtmosphericLight, ParamValue::Scalar(a))
            .with(ParamKey::Transmission, ParamValue::Scalar(t))
    }

    pub fn lowlight(gamma: f64, gain: f64, cam: [f64; 9]) -> Self {
        Self::new(DegradationType::LowLight)
            .with(ParamKey::Gamma, ParamValue::Scalar(gamma))
            .with(ParamKey::Gain, ParamValue::Scalar(gain))
            .with(ParamKey::CamIntrinsics, ParamValue::Mat3(cam))
    }

    pub fn blur(sigma: f64) -> Self {
        Self::new(DegradationType::Blur).with(ParamKey::Sigma, ParamValue::Scalar(sigma))
    }

    pub fn lowres(scale: u32) -> Self {
        Self::new(DegradationType::LowRes).with(ParamKey::Scale, ParamValue::Scalar(scale as f64))
    }

    pub fn get(&self, key: ParamKey) -> Option<&ParamValue> {
        self.params.get(&key)
    }

    pub fn scalar(&self, key: ParamKey) -> Result<f64> {
        match self.params.get(&key) {
            Some(ParamValue::Scalar(v)) => Ok(*v),
            Some(other) => Err(Error::InvalidSpec(format!(
                "{key} must be a scalar, got {}",
                other.kind()
            ))),
            None => Err(Error::InvalidSpec(format!("missing key {key}"))),
        }
    }

    pub fn mat3(&self, key: ParamKey) -> Result<[f64; 9]> {
        match self.params.get(&key) {
            Some(ParamValue::Mat3(m)) => Ok(*m),
            Some(other) => Err(Error::InvalidSpec(format!(
                "{key} must be a 3x3 matrix, got {}",
                other.kind()
            ))),
            None => Err(Error::InvalidSpec(format!("missing key {key}"))),
        }
    }

    /// True when the key set is exactly the type's schema.
    pub fn keys_match_schema(&self) -> bool {
        self.params.keys().copied().eq(self.dtype.keys().iter().copied())
    }

    /// Checks the schema and every range invariant.
    pub fn validate(&self) -> Result<()> {
        if !self.keys_match_schema() {
            let got: Vec<_> = self.params.keys().map(|k| k.name()).collect();
            let want: Vec<_> = self.dtype.keys().iter().map(|k| k.name()).collect();
            return Err(Error::InvalidSpec(format!(
                "{} requires keys {want:?}, got {got:?}",
                self.dtype
            )));
        }
        for (&key, value) in &self.params {
            let shape_ok = match (key, value) {
                (ParamKey::Transmission, ParamValue::Map { width, height, data }) => {
                    *width > 0 && *height > 0 && data.len() == width * height
                }
                (ParamKey::CamIntrinsics, ParamValue::Mat3(_)) => true,
                (ParamKey::CamIntrinsics, _) => false,
                (_, ParamValue::Scalar(_)) => true,
                _ => false,
            };
            if !shape_ok {
                return Err(Error::InvalidSpec(format!(
                    "{key} cannot hold a {} value",
                    value.kind()
                )));
            }
            if let Some(bad) = value.elements().iter().find(|&&v| !key.accepts(v)) {
                let (lo, hi) = key.range();
                return Err(Error::InvalidSpec(format!(
                    "{key} = {bad} outside its range [{lo}, {hi}]"
                )));
            }
            if let ParamValue::Mat3(m) = value {
                let det = det3(m);
                if !(det.abs() >= MIN_CAM_DET) {
                    return Err(Error::SingularMatrix { matrix: *m, det });
                }
            }
        }
        Ok(())
    }

    /// Serializes to the shared spec document.
    pub fn to_json(&self) -> Value {
        let mut params = Map::new();
        for (key, value) in &self.params {
            let v = match value {
                ParamValue::Scalar(s) if *key == ParamKey::Scale && s.fract() == 0.0 && s.abs() < 1e15 => {
                    json!(*s as i64)
                }
                ParamValue::Scalar(s) => json!(s),
                ParamValue::Vec3(v) => json!(v),
                ParamValue::Mat3(m) => json!(m),
                ParamValue::Map { width, data, .. } => {
                    Value::Array(data.chunks(*width).map(|row| json!(row)).collect())
                }
            };
            params.insert(key.name().to_string(), v);
        }
        json!({ "type": self.dtype.name(), "params": params })
    }

    /// Parses the shared spec document. Structure is checked, ranges are not.
    pub fn from_json(doc: &Value) -> Result<Self> {
        let obj = doc
            .as_object()
            .ok_or_else(|| Error::Document("spec must be an object".into()))?;
        let dtype: DegradationType = obj
            .get("type")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Document("spec.type must be a string".into()))?
            .parse()?;
        let params = obj
            .get("params")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Document("spec.params must be an object".into()))?;
        let mut spec = DegradationSpec::new(dtype);
        for (name, v) in params {
            let key: ParamKey = name.parse()?;
            spec.params.insert(key, parse_value(name, v)?);
        }
        Ok(spec)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s).map_err(|e| Error::Document(e.to_string()))?;
        Self::from_json(&v)
    }
}

fn parse_value(name: &str, v: &Value) -> Result<ParamValue> {
    let num = |v: &Value| {
        v.as_f64()
            .ok_or_else(|| Error::Document(format!("{name}: expected a number, got {v}")))
    };
    match v {
        Value::Number(_) => Ok(ParamValue::Scalar(num(v)?)),
        Value::Array(items) if items.iter().all(Value::is_array) && !items.is_empty() => {
            let height = items.len();
            let mut data = Vec::new();
            let mut width = None;
            for row in items {
                let row = row.as_array().expect("checked");
                if *width.get_or_insert(row.len()) != row.len() || row.is_empty() {
                    return Err(Error::Document(format!("{name}: ragged map rows")));
                }
                for x in row {
                    data.push(num(x)?);
                }
            }
            Ok(ParamValue::Map {
                width: width.unwrap_or(0),
                height,
                data,
            })
        }
        Value::Array(items) => {
            let vals = items.iter().map(num).collect::<Result<Vec<_>>>()?;
            match vals.len() {
                3 => Ok(ParamValue::Vec3([vals[0], vals[1], vals[2]])),
                9 => {
                    let mut m = [0.0; 9];
                    m.copy_from_slice(&vals);
                    Ok(ParamValue::Mat3(m))
                }
                n => Err(Error::Document(format!("{name}: arrays must hold 3 or 9 numbers, got {n}"))),
            }
        }
        other => Err(Error::Document(format!("{name}: unsupported value {other}"))),
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_json())
    }
}
