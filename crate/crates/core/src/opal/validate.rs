//! Leave-out validation of a plausible model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{metric_cdf, metric_dkl, KdeGrid};
use super::observable::{data_observable, model_observable, noise_scale, DataInterpolant, ObservableSpec, PathNoise};
use super::{derive_seed, FitConfig, Surrogate};
use crate::data::{split_leave_out, Dataset, LeaveOutSlice};
use crate::error::{OpalError, Result};
use crate::evidence::{fit_hierarchical_with, ModelRecord};
use crate::laplace::TrainSetup;

fn default_samples() -> usize {
    1000
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    /// `null` disables the bound.
    #[serde(with = "crate::serde_ext::pos_inf_null")]
    pub tol_dkl: f64,
    #[serde(with = "crate::serde_ext::pos_inf_null")]
    pub tol_cdf: f64,
    pub slices: Vec<LeaveOutSlice>,
    #[serde(default = "default_samples")]
    pub n_posterior_samples: usize,
    pub observable: ObservableSpec,
    /// Pass a slice only when both metrics are within tolerance.
    #[serde(default = "default_true")]
    pub require_both: bool,
    #[serde(default)]
    pub kde: KdeGrid,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    NotInvalid,
    Invalid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub index: usize,
    pub d_dkl: f64,
    pub d_cdf: f64,
    pub pass_dkl: bool,
    pub pass_cdf: bool,
    pub pass: bool,
    pub n_data_samples: usize,
    pub n_model_samples: usize,
    pub held_out_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub slices: Vec<SliceReport>,
    pub verdict: Verdict,
    #[serde(with = "crate::serde_ext::pos_inf_null")]
    pub tol_dkl: f64,
    #[serde(with = "crate::serde_ext::pos_inf_null")]
    pub tol_cdf: f64,
    pub require_both: bool,
    /// Seed that drove the slice refits and observable sampling.
    #[serde(default)]
    pub seed: u64,
}

impl ValidationReport {
    /// Largest metric-to-tolerance ratio over slices and metrics; below 1
    /// means every bound holds.
    pub fn worst_ratio(&self) -> f64 {
        self.slices
            .iter()
            .flat_map(|s| [s.d_dkl / self.tol_dkl, s.d_cdf / self.tol_cdf])
            .fold(0.0, f64::max)
    }

    /// Recomputes the verdict from the stored metric values.
    pub fn replay(&self) -> Verdict {
        let m: Vec<(f64, f64)> = self.slices.iter().map(|s| (s.d_dkl, s.d_cdf)).collect();
        verdict(&m, self.tol_dkl, self.tol_cdf, self.require_both)
    }
}

fn slice_passes(d_dkl: f64, d_cdf: f64, tol_dkl: f64, tol_cdf: f64, require_both: bool) -> (bool, bool, bool) {
    let a = d_dkl <= tol_dkl;
    let b = d_cdf <= tol_cdf;
    (a, b, if require_both { a && b } else { a || b })
}

/// NotInvalid iff every slice passes. A pure function of its arguments.
pub fn verdict(metrics: &[(f64, f64)], tol_dkl: f64, tol_cdf: f64, require_both: bool) -> Verdict {
    let all = metrics
        .iter()
        .all(|&(d, c)| slice_passes(d, c, tol_dkl, tol_cdf, require_both).2);
    if all && !metrics.is_empty() {
        Verdict::NotInvalid
    } else {
        Verdict::Invalid
    }
}

/// Validates `model` against `data` (physical units) by refitting on each
/// `D \ D_LO` and comparing observable distributions on the held-out part.
///
/// On NotInvalid the model is refit on all of `data`, warm-started from its
/// current parameters, and returned alongside the report.
pub fn leave_out_validate(
    model: &Surrogate,
    data: &Dataset<f64>,
    vcfg: &ValidationConfig,
    fit: &FitConfig,
    prior_mean: Option<&[f64]>,
) -> Result<(ValidationReport, Option<Surrogate>)> {
    let report = validate_slices(model, data, vcfg, fit, prior_mean)?;
    if report.verdict == Verdict::Invalid {
        return Ok((report, None));
    }
    let arch = &model.record.arch;
    let full = model.standardize(data);
    let setup = TrainSetup {
        prior_mean,
        init: Some(model.record.posterior.theta_map.as_slice()),
    };
    let cfg = fit.seeded(derive_seed(vcfg.seed, &[4]));
    let (post, rec) = fit_hierarchical_with(
        arch,
        &full,
        &model.record.posterior.sigma,
        Some(&model.record.mask),
        &cfg,
        setup,
    )?;
    let mut record = ModelRecord::new(post, rec);
    record.label = model.record.label.clone();
    record.plausibility = model.record.plausibility;
    Ok((
        report,
        Some(Surrogate {
            standardizer: model.standardizer.clone(),
            record,
            input_names: model.input_names.clone(),
            output_names: model.output_names.clone(),
            prior_mean: prior_mean.map(<[f64]>::to_vec),
        }),
    ))
}

/// The per-slice metrics and verdict of [`leave_out_validate`] without the
/// final refit. Depends on the model only through its architecture, mask and
/// standardizer, so a refit model reproduces the report of its predecessor.
pub fn validate_slices(
    model: &Surrogate,
    data: &Dataset<f64>,
    vcfg: &ValidationConfig,
    fit: &FitConfig,
    prior_mean: Option<&[f64]>,
) -> Result<ValidationReport> {
    if !(vcfg.tol_dkl >= 0.0 && vcfg.tol_cdf >= 0.0) {
        return Err(OpalError::Config("tolerances must be non-negative".into()));
    }
    if vcfg.n_posterior_samples < 30 {
        return Err(OpalError::Config("at least 30 posterior samples are needed".into()));
    }
    let arch = &model.record.arch;
    vcfg.observable.validate(data.input_dim(), data.output_dim())?;
    let splits = split_leave_out(data, &vcfg.slices)?;
    let sigma0 = fit.init_sigma(arch.num_layers())?;
    let reports = splits
        .par_iter()
        .enumerate()
        .map(|(n, split)| {
            let rule = vcfg.observable.rule(Some(&vcfg.slices[n]), data.input_dim(), data.output_dim())?;
            let train = model.standardize(&split.train);
            let cfg = fit.seeded(derive_seed(vcfg.seed, &[1, n as u64]));
            let setup = TrainSetup {
                prior_mean,
                init: None,
            };
            let (post, _) = fit_hierarchical_with(arch, &train, &sigma0, Some(&model.record.mask), &cfg, setup)?;
            let data_gain = DataInterpolant::new(&split.held_out, rule.output)?.noise_gain(&rule)?;
            let model_gain = match vcfg.observable.path_noise {
                PathNoise::Independent => data_gain,
                m => noise_scale(m, &rule),
            };
            let zm_seed = derive_seed(vcfg.seed, &[2, n as u64]);
            let z_m = model_observable(model, &post, &rule, model_gain, vcfg.n_posterior_samples, zm_seed)?;
            let widen_gain = match vcfg.observable.path_noise {
                PathNoise::Shared => rule.volume,
                _ => data_gain,
            };
            let noise_sd = post.sigma.sigma_noise * model.standardizer.output_scale[rule.output] * widen_gain;
            let zd_seed = derive_seed(vcfg.seed, &[3, n as u64]);
            let z_d = data_observable(&split.held_out, &rule, noise_sd, vcfg.n_posterior_samples, zd_seed)?;
            let d_dkl = metric_dkl(&z_d, &z_m, &vcfg.kde)?;
            let d_cdf = metric_cdf(&z_d, &z_m)?;
            let (pass_dkl, pass_cdf, pass) = slice_passes(d_dkl, d_cdf, vcfg.tol_dkl, vcfg.tol_cdf, vcfg.require_both);
            log::info!("slice {n}: d_dkl = {d_dkl:.6}, d_cdf = {d_cdf:.6}, pass = {pass}");
            Ok(SliceReport {
                index: n,
                d_dkl,
                d_cdf,
                pass_dkl,
                pass_cdf,
                pass,
                n_data_samples: z_d.len(),
                n_model_samples: z_m.len(),
                held_out_rows: split.held_out.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics: Vec<(f64, f64)> = reports.iter().map(|s| (s.d_dkl, s.d_cdf)).collect();
    let v = verdict(&metrics, vcfg.tol_dkl, vcfg.tol_cdf, vcfg.require_both);
    Ok(ValidationReport {
        slices: reports,
        verdict: v,
        tol_dkl: vcfg.tol_dkl,
        tol_cdf: vcfg.tol_cdf,
        require_both: vcfg.require_both,
        seed: vcfg.seed,
    })
}
