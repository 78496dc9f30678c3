//! Restoration fidelity as a function of parameter error.
//!
//! Each sample is restored with one parameter moved by +e and by -e (clamped
//! to the key's range). Every restoration is one observation; correlations
//! pair the nominal offset |e| with the observed PSNR and SSIM.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{pearson, psnr, ssim};
use crate::numeric::mean;
use crate::restore::{restore, RestoreOptions};
use crate::spec::{DegradationSpec, ParamKey, ParamValue};

/// A degraded image with its clean reference and true parameters.
#[derive(Clone, Debug)]
pub struct SensitivitySample {
    pub clean: Image,
    pub degraded: Image,
    pub truth: DegradationSpec,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub offset: f64,
    /// Mean absolute change actually applied, below `offset` where clamped.
    pub abs_error: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Means over the observations of one nominal offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OffsetSummary {
    pub offset: f64,
    pub count: usize,
    pub mean_abs_error: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityReport {
    pub key: ParamKey,
    pub observations: Vec<Observation>,
    pub per_offset: Vec<OffsetSummary>,
    /// Correlations over all observations.
    pub r_psnr: f64,
    pub r_ssim: f64,
    /// Correlations over the per-offset means.
    pub r_psnr_means: f64,
    pub r_ssim_means: f64,
}

impl SensitivityReport {
    /// Per-offset means as CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("offset,count,mean_abs_error,mean_psnr,mean_ssim\n");
        for o in &self.per_offset {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                o.offset, o.count, o.mean_abs_error, o.mean_psnr, o.mean_ssim
            ));
        }
        s
    }
}

/// `value` with every element moved by `delta` and clamped to the key's range.
pub fn perturb(value: &ParamValue, key: ParamKey, delta: f64) -> Result<ParamValue> {
    let (lo, hi) = key.range();
    let f = |v: f64| (v + delta).clamp(lo, hi);
    match value {
        ParamValue::Scalar(v) => Ok(ParamValue::Scalar(f(*v))),
        ParamValue::Map { width, height, data } => Ok(ParamValue::Map {
            width: *width,
            height: *height,
            data: data.iter().map(|&v| f(v)).collect(),
        }),
        other => Err(Error::InvalidParameter(format!(
            "{key} holds a {} value; only scalars and maps can be perturbed",
            other.kind()
        ))),
    }
}

fn continuous(key: ParamKey) -> Result<()> {
    match key {
        ParamKey::Scale => Err(Error::InvalidParameter("scale is discrete".into())),
        ParamKey::CamIntrinsics => Err(Error::InvalidParameter("cam is a matrix".into())),
        _ => Ok(()),
    }
}

fn observe(sample: &SensitivitySample, key: ParamKey, offset: f64, sign: f64, opts: &RestoreOptions) -> Result<Observation> {
    let value = sample
        .truth
        .get(key)
        .ok_or_else(|| Error::InvalidSpec(format!("sample has no {key}")))?;
    let moved = perturb(value, key, sign * offset)?;
    let abs_error = mean(
        &moved
            .elements()
            .iter()
            .zip(value.elements())
            .map(|(a, b)| (a - b).abs())
            .collect::<Vec<_>>(),
    );
    let spec = sample.truth.clone().with(key, moved);
    let restored = restore(&sample.degraded, &spec, opts)?;
    Ok(Observation {
        offset,
        abs_error,
        psnr: psnr(&restored, &sample.clean)?,
        ssim: ssim(&restored, &sample.clean)?,
    })
}

/// Runs the sweep over `samples` whose truth carries `key`; others are skipped.
pub fn sensitivity(
    samples: &[SensitivitySample],
    key: ParamKey,
    offsets: &[f64],
    opts: &RestoreOptions,
) -> Result<SensitivityReport> {
    continuous(key)?;
    if let Some(bad) = offsets.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(Error::InvalidParameter(format!("offsets must be finite and non-negative, got {bad}")));
    }
    let relevant: Vec<&SensitivitySample> = samples.iter().filter(|s| s.truth.get(key).is_some()).collect();
    if relevant.is_empty() {
        return Err(Error::Degenerate(format!("no sample carries {key}")));
    }
    let jobs: Vec<(usize, f64, f64)> = (0..relevant.len())
        .flat_map(|i| offsets.iter().flat_map(move |&e| [(i, e, 1.0), (i, e, -1.0)]))
        .collect();
    let observations = jobs
        .par_iter()
        .map(|&(i, e, sign)| observe(relevant[i], key, e, sign, opts))
        .collect::<Result<Vec<_>>>()?;
    let per_offset: Vec<OffsetSummary> = offsets
        .iter()
        .map(|&e| {
            let group: Vec<&Observation> = observations.iter().filter(|o| o.offset == e).collect();
            let avg = |f: fn(&Observation) -> f64| mean(&group.iter().map(|o| f(o)).collect::<Vec<_>>());
            OffsetSummary {
                offset: e,
                count: group.len(),
                mean_abs_error: avg(|o| o.abs_error),
                mean_psnr: avg(|o| o.psnr),
                mean_ssim: avg(|o| o.ssim),
            }
        })
        .collect();
    let err: Vec<f64> = observations.iter().map(|o| o.offset).collect();
    let r_psnr = pearson(&err, &observations.iter().map(|o| o.psnr).collect::<Vec<_>>())?;
    let r_ssim = pearson(&err, &observations.iter().map(|o| o.ssim).collect::<Vec<_>>())?;
    let (r_psnr_means, r_ssim_means) = if per_offset.len() >= 3 {
        let x: Vec<f64> = per_offset.iter().map(|o: &OffsetSummary| o.offset).collect();
        (
            pearson(&x, &per_offset.iter().map(|o| o.mean_psnr).collect::<Vec<_>>())?,
            pearson(&x, &per_offset.iter().map(|o| o.mean_ssim).collect::<Vec<_>>())?,
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(SensitivityReport {
        key,
        observations,
        per_offset,
        r_psnr,
        r_ssim,
        r_psnr_means,
        r_ssim_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::procedural_clean;
    use crate::degrade::degrade;

    fn haze_samples(n: u64) -> Vec<SensitivitySample> {
        (0..n)
            .map(|i| {
                let clean = procedural_clean(100 + i, 48, 48).unwrap().quantize_8bit();
                let truth = DegradationSpec::haze(0.8, 0.4 + 0.05 * i as f64);
                let degraded = degrade(&clean, &truth).unwrap().quantize_8bit();
                SensitivitySample { clean, degraded, truth }
            })
            .collect()
    }

    #[test]
    fn perturbation_clamps_to_range() {
        let t = perturb(&ParamValue::Scalar(0.9), ParamKey::Transmission, 0.2).unwrap();
        assert_eq!(t, ParamValue::Scalar(0.95));
        assert!(perturb(&ParamValue::Mat3([0.0; 9]), ParamKey::CamIntrinsics, 0.1).is_err());
    }

    #[test]
    fn transmission_error_hurts_fidelity() {
        let report = sensitivity(&haze_samples(4), ParamKey::Transmission, &[0.0, 0.1, 0.2], &RestoreOptions::default()).unwrap();
        assert_eq!(report.observations.len(), 4 * 3 * 2);
        assert!(report.r_psnr < 0.0 && report.r_ssim < 0.0);
        let psnrs: Vec<f64> = report.per_offset.iter().map(|o| o.mean_psnr).collect();
        assert!(psnrs.windows(2).all(|w| w[1] < w[0]), "{psnrs:?}");
        assert!(report.to_csv().starts_with("offset,count"));
    }

    #[test]
    fn discrete_keys_and_absent_keys_are_rejected() {
        let s = haze_samples(1);
        let o = RestoreOptions::default();
        assert!(sensitivity(&s, ParamKey::Scale, &[0.1], &o).is_err());
        assert!(sensitivity(&s, ParamKey::Sigma, &[0.1], &o).is_err());
        assert!(sensitivity(&s, ParamKey::Transmission, &[-0.1], &o).is_err());
    }
}
