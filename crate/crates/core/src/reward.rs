//! Factorized gated reward and group-relative advantages.
//!
//! A prediction whose structure is wrong (type, key set, or any value out of
//! range) is short-circuited to [`GATE_PENALTY`] without running the
//! restorer. Otherwise the reward is the restoration fidelity term.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::mse;
use crate::numeric::{mean, neumaier_sum};
use crate::resample::resize_bicubic;
use crate::restore::{ParametricRestorer, Restorer};
use crate::spec::DegradationSpec;

/// Reward of a structurally invalid prediction.
pub const GATE_PENALTY: f64 = -1.0;
/// Floor on the group standard deviation.
pub const ADVANTAGE_STD_FLOOR: f64 = 1e-8;

/// The reward and its factors. `gated` implies `total == GATE_PENALTY` and no
/// fidelity term; otherwise both indicators are 1 and `total == r_rec`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardBreakdown {
    pub r_type: f64,
    pub r_key: f64,
    pub r_rec: Option<f64>,
    pub total: f64,
    pub gated: bool,
}

impl RewardBreakdown {
    pub fn gated(type_ok: bool, keys_ok: bool) -> Self {
        RewardBreakdown {
            r_type: indicator(type_ok),
            r_key: indicator(keys_ok),
            r_rec: None,
            total: GATE_PENALTY,
            gated: true,
        }
    }

    pub fn passed(r_rec: f64) -> Self {
        RewardBreakdown {
            r_type: 1.0,
            r_key: 1.0,
            r_rec: Some(r_rec),
            total: r_rec,
            gated: false,
        }
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "total": self.total,
            "r_type": self.r_type,
            "r_key": self.r_key,
            "gated": self.gated,
        });
        if let Some(r) = self.r_rec {
            v["r_rec"] = json!(r);
        }
        v
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Offline gate: type must match the truth, keys must match the schema and
/// every value must be in range. Returns the gated breakdown on failure.
pub fn gate(pred: &DegradationSpec, truth: &DegradationSpec) -> Option<RewardBreakdown> {
    let type_ok = pred.dtype == truth.dtype;
    let keys_ok = type_ok && pred.keys_match_schema();
    (!type_ok || !keys_ok || pred.validate().is_err()).then(|| RewardBreakdown::gated(type_ok, keys_ok))
}

/// Online gate: schema and ranges only, no truth type is available.
pub fn gate_schema(pred: &DegradationSpec) -> Option<RewardBreakdown> {
    let keys_ok = pred.keys_match_schema();
    (!keys_ok || pred.validate().is_err()).then(|| RewardBreakdown::gated(true, keys_ok))
}

/// Brings `img` to `dims` with bicubic resampling when the sizes differ.
fn fit_to(img: Image, dims: (usize, usize)) -> Result<Image> {
    if img.dims() == dims {
        Ok(img)
    } else {
        resize_bicubic(&img, dims.0, dims.1)
    }
}

fn run_restorer(restorer: &dyn Restorer, deg: &Image, pred: &DegradationSpec) -> Result<Image> {
    restorer.restore(deg, pred).map_err(|e| match e {
        Error::Restore(_) => e,
        other => Error::Restore(other.to_string()),
    })
}

/// Full-reference reward with the analytic restorer at native resolution.
pub fn compute_reward(
    deg: &Image,
    pred: &DegradationSpec,
    truth: &DegradationSpec,
    clean: &Image,
) -> Result<RewardBreakdown> {
    compute_reward_with(deg, pred, truth, clean, &ParametricRestorer::default(), None)
}

/// Full-reference reward. The restoration is resampled to the clean size when
/// they differ; with `resize = Some(n)` both are resampled to n x n first.
/// Restorer failures surface as [`Error::Restore`], never as a penalty.
pub fn compute_reward_with(
    deg: &Image,
    pred: &DegradationSpec,
    truth: &DegradationSpec,
    clean: &Image,
    restorer: &dyn Restorer,
    resize: Option<usize>,
) -> Result<RewardBreakdown> {
    if let Some(gated) = gate(pred, truth) {
        return Ok(gated);
    }
    let restored = run_restorer(restorer, deg, pred)?;
    let (restored, clean) = match resize {
        Some(n) => (fit_to(restored, (n, n))?, fit_to(clean.clone(), (n, n))?),
        None => (fit_to(restored, clean.dims())?, clean.clone()),
    };
    Ok(RewardBreakdown::passed(-mse(&restored, &clean)?))
}

/// A no-reference quality score; higher is better.
pub trait QualityScorer: Send + Sync {
    fn score(&self, img: &Image) -> Result<f64>;
}

/// Negative mean anisotropic total variation per pixel and channel.
#[derive(Clone, Copy, Debug, Default)]
pub struct TotalVariationScorer;

impl QualityScorer for TotalVariationScorer {
    fn score(&self, img: &Image) -> Result<f64> {
        Ok(-total_variation(img))
    }
}

/// Mean of |dx| + |dy| (forward differences) over pixels and channels.
pub fn total_variation(img: &Image) -> f64 {
    let (w, h) = img.dims();
    let d = img.data();
    let at = |x: usize, y: usize, c: usize| d[(y * w + x) * 3 + c];
    let mut terms = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = at(x, y, c);
                let dx = if x + 1 < w { (at(x + 1, y, c) - v).abs() } else { 0.0 };
                let dy = if y + 1 < h { (at(x, y + 1, c) - v).abs() } else { 0.0 };
                terms.push(dx + dy);
            }
        }
    }
    mean(&terms)
}

/// Name to scorer table for the online mode.
#[derive(Clone)]
pub struct ScorerRegistry {
    entries: BTreeMap<String, Arc<dyn QualityScorer>>,
}

impl Default for ScorerRegistry {
    /// Holds the total variation proxy as `tv`.
    fn default() -> Self {
        let mut r = ScorerRegistry {
            entries: BTreeMap::new(),
        };
        r.register("tv", Arc::new(TotalVariationScorer));
        r
    }
}

impl ScorerRegistry {
    pub fn register(&mut self, name: impl Into<String>, scorer: Arc<dyn QualityScorer>) {
        self.entries.insert(name.into(), scorer);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn QualityScorer>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::Config(format!(
                "no scorer registered as {name:?} (known: {:?})",
                self.entries.keys().collect::<Vec<_>>()
            ))
        })
    }
}

/// No-reference reward: schema gate, then the scorer applied to the restoration.
pub fn compute_reward_noref(
    deg: &Image,
    pred: &DegradationSpec,
    scorer: &dyn QualityScorer,
    restorer: &dyn Restorer,
) -> Result<RewardBreakdown> {
    if let Some(gated) = gate_schema(pred) {
        return Ok(gated);
    }
    let restored = run_restorer(restorer, deg, pred)?;
    Ok(RewardBreakdown::passed(scorer.score(&restored)?))
}

/// Restorer wrapper that counts invocations.
pub struct CountingRestorer<R> {
    pub inner: R,
    calls: AtomicUsize,
}

impl<R: Restorer> CountingRestorer<R> {
    pub fn new(inner: R) -> Self {
        CountingRestorer {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<R: Restorer> Restorer for CountingRestorer<R> {
    fn restore(&self, deg: &Image, spec: &DegradationSpec) -> Result<Image> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.restore(deg, spec)
    }
}

/// (r_i - mean) / max(std, floor) with the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "a group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite reward {bad}")));
    }
    let m = mean(rewards);
    let centered: Vec<f64> = rewards.iter().map(|r| r - m).collect();
    let var = neumaier_sum(centered.iter().map(|c| c * c)) / rewards.len() as f64;
    let std = var.sqrt().max(ADVANTAGE_STD_FLOOR);
    Ok(centered.iter().map(|c| c / std).collect())
}
