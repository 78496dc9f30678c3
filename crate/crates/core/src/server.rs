//! Line-delimited JSON reward protocol.
//!
//! Request: `{"request_id": .., "sample_id": "..", "prediction": <spec document>}`
//! or `{"request_id": .., "group": [{"sample_id": .., "prediction": ..}, ..]}`.
//! Response: the reward breakdown (or `rewards` plus `advantages` for a group)
//! tagged with the same `request_id`. A line that cannot be served yields
//! `{"request_id": .., "error": .., "code": ..}` and the stream continues.
//! Responses on one stream are written in request order.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};

use crate::dataset::{read_manifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::image::load_png;
use crate::restore::{ParametricRestorer, Restorer};
use crate::reward::{
    compute_reward_noref, compute_reward_with, group_advantages, QualityScorer, RewardBreakdown,
};
use crate::spec::{DegradationSpec, DegradationType};

/// Comparison resolution used unless configured otherwise.
pub const DEFAULT_RESIZE: usize = 256;

/// Whether rewards compare against the clean reference or a quality scorer.
#[derive(Clone)]
pub enum RewardMode {
    Reference,
    NoReference(Arc<dyn QualityScorer>),
}

/// Serves rewards for the samples of one manifest. Images are read per request.
#[derive(Clone)]
pub struct RewardService {
    root: PathBuf,
    records: HashMap<String, ManifestRecord>,
    restorer: Arc<dyn Restorer>,
    resize: Option<usize>,
    mode: RewardMode,
}

impl RewardService {
    /// Full-reference service with the analytic restorer; paths resolve
    /// relative to the manifest's directory.
    pub fn from_manifest(path: impl AsRef<Path>, resize: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let records = read_manifest(path)?;
        let mut by_id = HashMap::with_capacity(records.len());
        for r in records {
            let id = r.id.clone();
            if by_id.insert(id.clone(), r).is_some() {
                return Err(Error::Document(format!("duplicate sample id {id:?}")));
            }
        }
        if resize == Some(0) {
            return Err(Error::Config("resize must be positive".into()));
        }
        Ok(RewardService {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records: by_id,
            restorer: Arc::new(ParametricRestorer::default()),
            resize,
            mode: RewardMode::Reference,
        })
    }

    pub fn with_restorer(mut self, restorer: Arc<dyn Restorer>) -> Self {
        self.restorer = restorer;
        self
    }

    pub fn with_mode(mut self, mode: RewardMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    /// Reward of a prediction document for one sample. A document that is not
    /// a well-formed spec is a policy error and is gated, not rejected.
    pub fn reward(&self, sample_id: &str, prediction: &Value) -> Result<RewardBreakdown> {
        let rec = self
            .records
            .get(sample_id)
            .ok_or_else(|| Error::Config(format!("unknown sample {sample_id:?}")))?;
        let pred = match DegradationSpec::from_json(prediction) {
            Ok(p) => p,
            Err(_) => {
                let named = prediction.get("type").and_then(Value::as_str);
                let type_ok = match self.mode {
                    RewardMode::Reference => named.and_then(|n| n.parse::<DegradationType>().ok()) == Some(rec.spec.dtype),
                    RewardMode::NoReference(_) => true,
                };
                return Ok(RewardBreakdown::gated(type_ok, false));
            }
        };
        let deg = load_png(self.root.join(&rec.degraded_path))?;
        match &self.mode {
            RewardMode::Reference => {
                let clean = load_png(self.root.join(&rec.clean_path))?;
                compute_reward_with(&deg, &pred, &rec.spec, &clean, self.restorer.as_ref(), self.resize)
            }
            RewardMode::NoReference(scorer) => {
                compute_reward_noref(&deg, &pred, scorer.as_ref(), self.restorer.as_ref())
            }
        }
    }

    /// Answers one request line with one response document.
    pub fn handle_line(&self, line: &str) -> Value {
        let req: Value = match serde_json::from_str(line) {
            Ok(v @ Value::Object(_)) => v,
            Ok(_) => return error_response(Value::Null, "malformed", "request must be an object"),
            Err(e) => return error_response(Value::Null, "malformed", &e.to_string()),
        };
        let id = req.get("request_id").cloned().unwrap_or(Value::Null);
        if id.is_null() {
            return error_response(id, "malformed", "missing request_id");
        }
        let result = match req.get("group") {
            Some(Value::Array(items)) => self.group(items),
            Some(_) => Err(malformed("group must be an array")),
            None => parse_item(&req).and_then(|(sid, pred)| self.reward(sid, pred)).map(|r| r.to_json()),
        };
        match result {
            Ok(mut body) => {
                body["request_id"] = id;
                body
            }
            Err(e) => error_response(id, error_code(&e), &e.to_string()),
        }
    }

    fn group(&self, items: &[Value]) -> Result<Value> {
        let rewards = items
            .iter()
            .map(|item| parse_item(item).and_then(|(sid, pred)| self.reward(sid, pred)))
            .collect::<Result<Vec<_>>>()?;
        let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
        let advantages = group_advantages(&totals).map_err(|e| malformed(&e.to_string()))?;
        Ok(json!({
            "rewards": rewards.iter().map(RewardBreakdown::to_json).collect::<Vec<_>>(),
            "advantages": advantages,
        }))
    }

    /// Serves requests from `input` until end of stream. Blank lines are skipped.
    pub fn serve<R: BufRead, W: Write>(&self, input: R, mut output: W) -> io::Result<()> {
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            writeln!(output, "{}", self.handle_line(&line))?;
            output.flush()?;
        }
        Ok(())
    }
}

/// Marker for request-shape errors, mapped to the `malformed` code.
const MALFORMED_PREFIX: &str = "request: ";

fn malformed(msg: &str) -> Error {
    Error::Document(format!("{MALFORMED_PREFIX}{msg}"))
}

fn parse_item(v: &Value) -> Result<(&str, &Value)> {
    let sid = v
        .get("sample_id")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("sample_id must be a string"))?;
    let pred = v.get("prediction").ok_or_else(|| malformed("missing prediction"))?;
    Ok((sid, pred))
}

fn error_code(e: &Error) -> &'static str {
    match e {
        Error::Document(m) if m.starts_with(MALFORMED_PREFIX) => "malformed",
        Error::Config(m) if m.starts_with("unknown sample") => "unknown_sample",
        Error::Restore(_) => "restore_failed",
        _ => "internal",
    }
}

fn error_response(id: Value, code: &str, message: &str) -> Value {
    json!({ "request_id": id, "error": message, "code": code })
}
