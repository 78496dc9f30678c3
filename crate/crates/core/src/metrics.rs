//! Structured-understanding scores, full-reference fidelity metrics and
//! Pearson correlation.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::filter::gaussian_taps;
use crate::image::Image;
use crate::numeric::{mean, neumaier_sum};
use crate::spec::{DegradationSpec, DegradationType, ParamKey, ParamValue};

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 100.0;
const REL_GUARD: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyError {
    pub p_abs: f64,
    pub p_rel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub id: String,
    pub true_type: DegradationType,
    /// `None` when the prediction could not be parsed at all.
    pub pred_type: Option<DegradationType>,
    pub type_correct: bool,
    pub keys_correct: bool,
    pub per_key: BTreeMap<ParamKey, KeyError>,
}

/// Mean `|pred - truth|` over elements. A shape mismatch compares the mean of
/// the prediction against every truth element.
fn mean_abs_diff(pred: &ParamValue, truth: &ParamValue) -> f64 {
    let (p, t) = (pred.elements(), truth.elements());
    if p.len() == t.len() {
        mean(&p.iter().zip(t).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
    } else {
        let pm = mean(p);
        mean(&t.iter().map(|b| (pm - b).abs()).collect::<Vec<_>>())
    }
}

/// Scores one prediction. Failed structure (wrong type or key set) pins
/// `p_rel` at 1 and `p_abs` at the ground-truth magnitude.
pub fn score_understanding(id: &str, pred: Option<&DegradationSpec>, truth: &DegradationSpec) -> SampleScore {
    let type_correct = pred.is_some_and(|p| p.dtype == truth.dtype);
    let keys_correct = pred.is_some_and(|p| {
        p.params.keys().copied().collect::<BTreeSet<_>>() == truth.dtype.keys().iter().copied().collect()
    });
    let per_key = truth
        .params
        .iter()
        .map(|(&key, gt)| {
            let magnitude = gt.mean_abs();
            let err = match pred.filter(|_| type_correct && keys_correct) {
                None => KeyError {
                    p_abs: magnitude,
                    p_rel: 1.0,
                },
                Some(p) => {
                    let p_abs = mean_abs_diff(p.get(key).expect("key set checked"), gt);
                    KeyError {
                        p_abs,
                        p_rel: p_abs / magnitude.max(REL_GUARD),
                    }
                }
            };
            (key, err)
        })
        .collect();
    SampleScore {
        id: id.to_string(),
        true_type: truth.dtype,
        pred_type: pred.map(|p| p.dtype),
        type_correct,
        keys_correct,
        per_key,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<SampleScore>,
    pub t_acc: f64,
    pub t_f1_macro: f64,
    /// One-vs-rest F1 per type, in `DegradationType::ALL` order.
    pub t_f1_per_type: [f64; 4],
    pub j_acc: f64,
    /// Means over the rows whose ground truth carries the key.
    pub per_key: BTreeMap<ParamKey, KeyError>,
    /// Unweighted means of the per-key values.
    pub p_abs_avg: f64,
    pub p_rel_avg: f64,
}

pub fn aggregate(rows: Vec<SampleScore>) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::InvalidParameter("cannot aggregate zero rows".into()));
    }
    let n = rows.len() as f64;
    let count = |f: &dyn Fn(&SampleScore) -> bool| rows.iter().filter(|r| f(r)).count() as f64;
    let t_acc = count(&|r| r.type_correct) / n;
    let j_acc = count(&|r| r.type_correct && r.keys_correct) / n;

    let mut t_f1_per_type = [0.0; 4];
    for (slot, &t) in t_f1_per_type.iter_mut().zip(&DegradationType::ALL) {
        let tp = count(&|r| r.true_type == t && r.pred_type == Some(t));
        let fp = count(&|r| r.true_type != t && r.pred_type == Some(t));
        let fn_ = count(&|r| r.true_type == t && r.pred_type != Some(t));
        let denom = 2.0 * tp + fp + fn_;
        *slot = if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
    }
    let t_f1_macro = neumaier_sum(t_f1_per_type) / 4.0;

    let mut collected: BTreeMap<ParamKey, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &rows {
        for (k, e) in &r.per_key {
            let slot = collected.entry(*k).or_default();
            slot.0.push(e.p_abs);
            slot.1.push(e.p_rel);
        }
    }
    // sort before summing so the result does not depend on row order
    let sorted_mean = |v: &Vec<f64>| {
        let mut v = v.clone();
        v.sort_by(f64::total_cmp);
        mean(&v)
    };
    let per_key: BTreeMap<ParamKey, KeyError> = collected
        .iter()
        .map(|(k, (a, r))| {
            (
                *k,
                KeyError {
                    p_abs: sorted_mean(a),
                    p_rel: sorted_mean(r),
                },
            )
        })
        .collect();
    let p_abs_avg = mean(&per_key.values().map(|e| e.p_abs).collect::<Vec<_>>());
    let p_rel_avg = mean(&per_key.values().map(|e| e.p_rel).collect::<Vec<_>>());
    Ok(EvalReport {
        rows,
        t_acc,
        t_f1_macro,
        t_f1_per_type,
        j_acc,
        per_key,
        p_abs_avg,
        p_rel_avg,
    })
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    Ok(neumaier_sum(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y))) / a.data().len() as f64)
}

/// PSNR for unit-range signals, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Gaussian filtering over fully contained windows only.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM per channel (11x11 Gaussian window, sigma 1.5), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let (w, h) = a.dims();
    if w.min(h) < SSIM_WINDOW {
        return Err(Error::InvalidImage(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps(SSIM_SIGMA);
    debug_assert_eq!(taps.len(), SSIM_WINDOW);
    let mut per_channel = [0.0; 3];
    for (c, slot) in per_channel.iter_mut().enumerate() {
        let (pa, pb) = (a.plane(c), b.plane(c));
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, w, h, &taps);
        let mu_b = filter_valid(&pb, w, h, &taps);
        let e_aa = filter_valid(&prod(&pa, &pa), w, h, &taps);
        let e_bb = filter_valid(&prod(&pb, &pb), w, h, &taps);
        let e_ab = filter_valid(&prod(&pa, &pb), w, h, &taps);
        let map: Vec<f64> = (0..mu_a.len())
            .map(|i| {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = e_aa[i] - ma * ma;
                let vb = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
            })
            .collect();
        *slot = mean(&map);
    }
    Ok(neumaier_sum(per_channel) / 3.0)
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("series lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Degenerate(format!("need at least 3 pairs, got {}", x.len())));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxy = neumaier_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = neumaier_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let syy = neumaier_sum(y.iter().map(|b| (b - my) * (b - my)));
    if !(sxx > 0.0) || !(syy > 0.0) {
        return Err(Error::Degenerate("zero variance series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
