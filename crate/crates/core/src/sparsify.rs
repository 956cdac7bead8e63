//! Laplace-prior sparsification.
//!
//! An L1-regularized MAP pass ranks connections by magnitude. Each threshold
//! on that ranking yields a mask; the masked network is retrained under the
//! Gaussian prior and scored by model evidence, and the best threshold wins.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{OpalError, Result};
use crate::evidence::{evidence_at_fixed_sigma, fit_hierarchical_with, EvidenceConfig, EvidenceRecord};
use crate::laplace::{
    build_posterior, train_map_with, InferenceHyperParams, LaplacePosterior, OptConfig, PriorKind, TrainSetup,
};
use crate::network::{Architecture, Parameters, SparsityMask};
use crate::scalar::Real;

/// How the Laplace scale `beta` is chosen per layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BetaRule {
    /// `beta = sigma_pr / sqrt(2)`: same variance as the Gaussian prior.
    MatchPriorVariance,
    Explicit(f64),
}

impl BetaRule {
    pub fn betas<T: Real>(&self, sigma: &InferenceHyperParams<T>) -> Result<Vec<T>> {
        match *self {
            BetaRule::MatchPriorVariance => Ok(sigma
                .sigma_pr
                .iter()
                .map(|s| *s / T::lit(std::f64::consts::SQRT_2))
                .collect()),
            BetaRule::Explicit(b) if b > 0.0 && b.is_finite() => Ok(vec![T::lit(b); sigma.sigma_pr.len()]),
            BetaRule::Explicit(b) => Err(OpalError::Config(format!("Laplace scale {b} must be positive"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SparsifyConfig {
    /// Absolute thresholds, ascending and starting at 0. `None` uses
    /// `0` followed by `grid_points` log-spaced values over
    /// `grid_range * max|theta|`.
    pub threshold_grid: Option<Vec<f64>>,
    pub grid_points: usize,
    pub grid_range: [f64; 2],
    pub beta_rule: BetaRule,
    /// Re-estimate hyperparameters after masking.
    pub refit: bool,
    /// Evidence differences below this count as ties.
    pub tie_tol: f64,
}

impl Default for SparsifyConfig {
    fn default() -> Self {
        Self {
            threshold_grid: None,
            grid_points: 12,
            grid_range: [1e-3, 0.5],
            beta_rule: BetaRule::MatchPriorVariance,
            refit: true,
            tie_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsifyEntry {
    pub threshold: f64,
    pub removed_fraction: f64,
    pub retained: usize,
    /// Evidence after retraining at the unsparsified hyperparameters.
    #[serde(with = "crate::serde_ext::neg_inf_null")]
    pub log_evid_model_raw: f64,
    /// Evidence after re-estimating hyperparameters (when enabled).
    pub log_evid_model_refit: Option<f64>,
    /// The value used for selection.
    #[serde(with = "crate::serde_ext::neg_inf_null")]
    pub log_evid_model: f64,
    pub selected: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsifyTrace {
    pub entries: Vec<SparsifyEntry>,
    /// True when the grid was cut short because a threshold emptied a layer.
    pub truncated: bool,
}

impl SparsifyTrace {
    pub fn selected_index(&self) -> Option<usize> {
        self.entries.iter().position(|e| e.selected)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,removed_fraction,log_evid_model,log_evid_model_raw,log_evid_model_refit,selected\n");
        for e in &self.entries {
            let refit = e.log_evid_model_refit.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.threshold, e.removed_fraction, e.log_evid_model, e.log_evid_model_raw, refit, e.selected
            ));
        }
        s
    }
}

/// Result of a threshold sweep: the selected mask with its fitted posterior.
#[derive(Clone, Debug)]
pub struct SparsifyOutcome<T: Real> {
    pub mask: SparsityMask,
    pub trace: SparsifyTrace,
    pub posterior: LaplacePosterior<T>,
    pub evidence: EvidenceRecord<T>,
    /// The L1 MAP point the thresholds were applied to.
    pub laplace_theta: Vec<T>,
}

/// MAP under the Laplace prior `prod exp(-|theta_i| / beta_l) / (2 beta_l)`.
pub fn train_map_laplace_prior<T: Real>(
    arch: &Architecture,
    data: &Dataset<T>,
    sigma: &InferenceHyperParams<T>,
    beta: &[T],
    opt: &OptConfig,
) -> Result<Parameters<T>> {
    if data.is_empty() {
        return Err(OpalError::Argument("training data is empty".into()));
    }
    let prior = PriorKind::Laplace { beta: beta.to_vec() };
    Ok(train_map_with(arch, data, sigma, &prior, None, opt, TrainSetup::default())?.0)
}

fn default_grid(max_abs: f64, points: usize, range: [f64; 2]) -> Vec<f64> {
    let mut grid = vec![0.0];
    if max_abs <= 0.0 || points == 0 {
        return grid;
    }
    let (lo, hi) = ((range[0] * max_abs).ln(), (range[1] * max_abs).ln());
    for k in 0..points {
        let t = if points == 1 { 1.0 } else { k as f64 / (points - 1) as f64 };
        grid.push((lo + t * (hi - lo)).exp());
    }
    grid
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(OpalError::Config("threshold grid needs at least two points".into()));
    }
    if grid[0] != 0.0 {
        return Err(OpalError::Config("threshold grid must start at 0".into()));
    }
    if grid.windows(2).any(|w| !(w[1] >= w[0])) || grid.iter().any(|v| !v.is_finite()) {
        return Err(OpalError::Config("threshold grid must be finite and ascending".into()));
    }
    Ok(())
}

struct MaskFit<T: Real> {
    raw: f64,
    refit: Option<f64>,
    posterior: LaplacePosterior<T>,
    evidence: EvidenceRecord<T>,
}

#[allow(clippy::too_many_arguments)]
fn fit_masked<T: Real>(
    arch: &Architecture,
    data: &Dataset<T>,
    base: &LaplacePosterior<T>,
    mask: &SparsityMask,
    config: &SparsifyConfig,
    evidence: &EvidenceConfig,
    prior_mean: Option<&[T]>,
) -> Result<MaskFit<T>> {
    let mut init = base.theta_map.flatten();
    crate::network::mask_in_place(&mut init, Some(mask));
    let setup = TrainSetup {
        prior_mean,
        init: Some(&init),
    };
    let sigma = &base.sigma;
    let (theta, _) = train_map_with(arch, data, sigma, &PriorKind::Gaussian, Some(mask), &evidence.opt, setup)?;
    let raw_post = build_posterior(arch, theta, data, sigma, Some(mask), prior_mean.map(<[T]>::to_vec))?;
    let raw_rec = evidence_at_fixed_sigma(&raw_post, data, evidence.c_prior())?;
    let raw = raw_rec.log_evid_model.to_f64_lossy();
    if !config.refit {
        return Ok(MaskFit {
            raw,
            refit: None,
            posterior: raw_post,
            evidence: raw_rec,
        });
    }
    let warm = raw_post.theta_map.flatten();
    let setup = TrainSetup {
        prior_mean,
        init: Some(&warm),
    };
    let (post, rec) = fit_hierarchical_with(arch, data, sigma, Some(mask), evidence, setup)?;
    Ok(MaskFit {
        raw,
        refit: Some(rec.log_evid_model.to_f64_lossy()),
        posterior: post,
        evidence: rec,
    })
}

/// Sweeps magnitude thresholds starting from an already fitted dense model.
/// Threshold 0 reuses `base` exactly; ties go to the smaller threshold.
pub fn sweep_threshold_from<T: Real>(
    base: (&LaplacePosterior<T>, &EvidenceRecord<T>),
    data: &Dataset<T>,
    config: &SparsifyConfig,
    evidence: &EvidenceConfig,
    prior_mean: Option<&[T]>,
) -> Result<SparsifyOutcome<T>> {
    let (base_post, base_rec) = base;
    let arch = &base_post.arch;
    let beta = config.beta_rule.betas(&base_post.sigma)?;
    let l1_setup = TrainSetup {
        prior_mean: None,
        init: Some(base_post.theta_map.as_slice()),
    };
    let (theta_l1, _) = train_map_with(
        arch,
        data,
        &base_post.sigma,
        &PriorKind::Laplace { beta },
        None,
        &evidence.opt,
        l1_setup,
    )?;
    let theta_l1 = theta_l1.into_flat();
    let max_abs = theta_l1.iter().map(|v| v.to_f64_lossy().abs()).fold(0.0, f64::max);
    let grid = match &config.threshold_grid {
        Some(g) => {
            validate_grid(g)?;
            g.clone()
        }
        None => default_grid(max_abs, config.grid_points, config.grid_range),
    };

    // masks per grid point; identical consecutive masks share one fit
    let full = SparsityMask::full(arch);
    let total = arch.param_count();
    let mut masks: Vec<SparsityMask> = vec![full.clone()];
    let mut slot: Vec<usize> = vec![0];
    let mut truncated = false;
    for &tol in &grid[1..] {
        let m = full.threshold(&theta_l1, T::lit(tol));
        let empty_layer = (0..arch.num_layers()).any(|l| m.layer_retained(l) == 0);
        if m.retained() == 0 || empty_layer {
            truncated = true;
            break;
        }
        if Some(&m) != masks.last() {
            masks.push(m);
        }
        slot.push(masks.len() - 1);
    }
    let fits: Vec<Option<Result<MaskFit<T>>>> = masks
        .par_iter()
        .enumerate()
        .map(|(k, m)| (k > 0).then(|| fit_masked(arch, data, base_post, m, config, evidence, prior_mean)))
        .collect();
    let mut fits: Vec<Option<MaskFit<T>>> = fits
        .into_iter()
        .map(|f| match f {
            None => Ok(None),
            Some(Ok(v)) => Ok(Some(v)),
            Some(Err(OpalError::DegenerateEvidence(msg))) => {
                log::warn!("masked refit degenerated: {msg}");
                Ok(None)
            }
            Some(Err(e)) => Err(e),
        })
        .collect::<Result<_>>()?;

    let base_evid = base_rec.log_evid_model.to_f64_lossy();
    let mut entries = Vec::with_capacity(slot.len());
    for (g, &k) in slot.iter().enumerate() {
        let retained = masks[k].retained();
        let (raw, refit, used) = if k == 0 {
            (base_evid, config.refit.then_some(base_evid), base_evid)
        } else {
            match &fits[k] {
                Some(f) => (f.raw, f.refit, f.refit.unwrap_or(f.raw)),
                None => (f64::NEG_INFINITY, None, f64::NEG_INFINITY),
            }
        };
        entries.push(SparsifyEntry {
            threshold: grid[g],
            removed_fraction: 1.0 - retained as f64 / total as f64,
            retained,
            log_evid_model_raw: raw,
            log_evid_model_refit: refit,
            log_evid_model: used,
            selected: false,
        });
    }
    let mut best = 0;
    for (i, e) in entries.iter().enumerate() {
        if e.log_evid_model > entries[best].log_evid_model + config.tie_tol {
            best = i;
        }
    }
    entries[best].selected = true;
    let k = slot[best];
    let (posterior, evidence_rec) = if k == 0 {
        (base_post.clone(), base_rec.clone())
    } else {
        let f = fits[k].take().expect("selected fit exists");
        (f.posterior, f.evidence)
    };
    Ok(SparsifyOutcome {
        mask: masks[k].clone(),
        trace: SparsifyTrace { entries, truncated },
        posterior,
        evidence: evidence_rec,
        laplace_theta: theta_l1,
    })
}

/// Fits the dense model hierarchically, then sweeps thresholds.
pub fn sweep_threshold<T: Real>(
    arch: &Architecture,
    data: &Dataset<T>,
    sigma_init: &InferenceHyperParams<T>,
    config: &SparsifyConfig,
    evidence: &EvidenceConfig,
) -> Result<SparsifyOutcome<T>> {
    let (post, rec) = fit_hierarchical_with(arch, data, sigma_init, None, evidence, TrainSetup::default())?;
    sweep_threshold_from((&post, &rec), data, config, evidence, None)
}
