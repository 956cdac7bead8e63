//! The sequential driver over Occam categories.

use serde::{Deserialize, Serialize};

use super::discover::{
    build_initial_set, discover_category_model, partition_categories, CandidateRecord, DiscoverConfig,
    OccamCategory, ProbeConfig, ProbeResult,
};
use super::validate::{leave_out_validate, ValidationConfig, ValidationReport, Verdict};
use super::{derive_seed, Surrogate};
use crate::data::{Dataset, Standardizer};
use crate::error::{OpalError, Result};
use crate::network::Activation;
use crate::sparsify::SparsifyTrace;

/// Recorded when every category was explored without a valid model.
pub const ALL_INVALID_DIRECTIVE: &str = "enlarge the initial model set";

/// Marker written where scenario design would run after a valid model.
pub const SCENARIO_EXHAUSTED: &str = "scenario_exhausted";

fn two() -> usize {
    2
}

fn three() -> usize {
    3
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpalConfig {
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Skips the probe when set.
    #[serde(default)]
    pub width_cap: Option<usize>,
    #[serde(default = "two")]
    pub depth_per_category: usize,
    #[serde(default = "three")]
    pub n_categories: usize,
    #[serde(default)]
    pub discover: DiscoverConfig,
    pub validation: ValidationConfig,
    /// After a valid model, also try the next category and keep the one with
    /// the smaller worst metric-to-tolerance ratio.
    #[serde(default)]
    pub explore_next: bool,
    /// Fit in standardized coordinates.
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpalOutcome {
    NotInvalid,
    AllInvalid,
}

/// Summary of a category's sparsified plausible model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlausibleSummary {
    pub label: String,
    pub depth: usize,
    pub activations: Vec<Activation>,
    pub mask_density: f64,
    pub log_evid_sigma: f64,
    pub log_evid_model: f64,
    pub best_dense_evidence: f64,
    pub plausibility: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryTrail {
    pub category: OccamCategory,
    pub candidates: Vec<CandidateRecord>,
    pub sparsify: Option<SparsifyTrace>,
    pub plausible: Option<PlausibleSummary>,
    pub validation: Option<ValidationReport>,
    pub verdict: Option<Verdict>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditTrail {
    pub seed: u64,
    pub standardizer: Standardizer,
    pub probe: Option<ProbeResult>,
    pub width_cap: usize,
    pub categories: Vec<CategoryTrail>,
    /// Index of the accepted category.
    pub best_category: Option<usize>,
    pub outcome: OpalOutcome,
    pub directive: Option<String>,
    pub markers: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct OpalRun {
    pub best: Option<Surrogate>,
    pub trail: AuditTrail,
}

impl OpalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth_per_category == 0 || self.n_categories == 0 {
            return Err(OpalError::Config("need at least one category of at least one depth".into()));
        }
        if self.width_cap == Some(0) {
            return Err(OpalError::Config("width cap must be positive".into()));
        }
        Ok(())
    }
}

/// The coordinate maps used for fitting: moments of the pretraining and
/// training data together, or the identity when standardization is off.
pub fn fit_standardizer(data: &Dataset<f64>, pretrain: Option<&Dataset<f64>>, standardize: bool) -> Result<Standardizer> {
    if !standardize {
        return Ok(Standardizer::identity(data.input_dim(), data.output_dim()));
    }
    match pretrain {
        Some(p) => Standardizer::fit(&p.concat(data)?),
        None => Standardizer::fit(data),
    }
}

fn probe_standardized(data_std: &Dataset<f64>, cfg: &OpalConfig) -> Result<ProbeResult> {
    let p = build_initial_set(data_std, &cfg.probe, &cfg.discover.fit, derive_seed(cfg.seed, &[100]))?;
    log::info!("probe peak at width {}, cap {}", p.peak_width, p.width_cap);
    Ok(p)
}

/// The width probe exactly as [`run_opal`] runs it, on physical-unit data.
pub fn run_probe(data: &Dataset<f64>, pretrain: Option<&Dataset<f64>>, cfg: &OpalConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    let standardizer = fit_standardizer(data, pretrain, cfg.standardize)?;
    probe_standardized(&standardizer.apply(data), cfg)
}

/// Seed of the leave-out validation of category `l`.
pub fn validation_seed(cfg: &OpalConfig, l: usize) -> u64 {
    derive_seed(cfg.seed, &[300, l as u64, cfg.validation.seed])
}

/// Runs the discovery loop on physical-unit data.
///
/// Categories are explored in ascending complexity. The first category
/// whose plausible model passes validation ends the search (unless
/// `explore_next` is set). When no category passes, the outcome is
/// `AllInvalid` and the trail carries the directive to enlarge the model set.
pub fn run_opal(data: &Dataset<f64>, pretrain: Option<&Dataset<f64>>, cfg: &OpalConfig) -> Result<OpalRun> {
    cfg.validate()?;
    let standardizer = fit_standardizer(data, pretrain, cfg.standardize)?;
    let data_std = standardizer.apply(data);
    let pre_std = pretrain.map(|p| standardizer.apply(p));

    let (probe, width_cap) = match cfg.width_cap {
        Some(w) => (None, w),
        None => {
            let p = probe_standardized(&data_std, cfg)?;
            let cap = p.width_cap;
            (Some(p), cap)
        }
    };
    let categories = partition_categories(width_cap, cfg.depth_per_category, cfg.n_categories)?;

    let mut trail = AuditTrail {
        seed: cfg.seed,
        standardizer: standardizer.clone(),
        probe,
        width_cap,
        categories: Vec::new(),
        best_category: None,
        outcome: OpalOutcome::AllInvalid,
        directive: None,
        markers: Vec::new(),
    };
    let mut best: Option<(Surrogate, f64)> = None;
    let mut prefix: Vec<Activation> = Vec::new();
    let mut extra_left = usize::from(cfg.explore_next);
    for cat in &categories {
        let l = cat.index as u64;
        let mut entry = CategoryTrail {
            category: cat.clone(),
            candidates: Vec::new(),
            sparsify: None,
            plausible: None,
            validation: None,
            verdict: None,
            failure: None,
        };
        let seed = derive_seed(cfg.seed, &[200, l]);
        let outcome = match discover_category_model(cat, &data_std, pre_std.as_ref(), &prefix, &cfg.discover, seed) {
            Ok(o) => o,
            Err(e @ OpalError::CategoryFailed { .. }) => {
                log::warn!("category {} failed: {e}", cat.index);
                entry.failure = Some(e.to_string());
                let deepest = cat.depths.iter().copied().max().unwrap_or(0);
                while prefix.len() < deepest {
                    prefix.push(cat.allowed_activations[0]);
                }
                trail.categories.push(entry);
                continue;
            }
            Err(e) => return Err(e),
        };
        prefix = outcome.chain.clone();
        let rec = &outcome.record;
        entry.candidates = outcome.candidates.clone();
        entry.sparsify = Some(outcome.sparsify.clone());
        entry.plausible = Some(PlausibleSummary {
            label: rec.label.clone(),
            depth: rec.arch.depth(),
            activations: rec.arch.activations.clone(),
            mask_density: rec.mask.density(),
            log_evid_sigma: rec.evidence.log_evid_sigma,
            log_evid_model: rec.evidence.log_evid_model,
            best_dense_evidence: outcome.best_dense_evidence,
            plausibility: rec.plausibility,
        });
        let surrogate = Surrogate {
            standardizer: standardizer.clone(),
            record: outcome.record,
            input_names: data.input_names.clone(),
            output_names: data.output_names.clone(),
            prior_mean: outcome.prior_mean.clone(),
        };
        let mut vcfg = cfg.validation.clone();
        vcfg.seed = validation_seed(cfg, cat.index);
        let (report, refit) = leave_out_validate(
            &surrogate,
            data,
            &vcfg,
            &cfg.discover.fit,
            outcome.prior_mean.as_deref(),
        )?;
        log::info!("category {}: {} -> {:?}", cat.index, surrogate.record.label, report.verdict);
        entry.verdict = Some(report.verdict);
        let ratio = report.worst_ratio();
        entry.validation = Some(report);
        trail.categories.push(entry);
        match refit {
            Some(model) => {
                let replace = best.as_ref().is_none_or(|(_, r)| ratio < *r);
                if replace {
                    best = Some((model, ratio));
                    trail.best_category = Some(cat.index);
                }
                if !trail.markers.iter().any(|m| m == SCENARIO_EXHAUSTED) {
                    trail.markers.push(SCENARIO_EXHAUSTED.to_string());
                }
                if extra_left == 0 {
                    break;
                }
                extra_left -= 1;
            }
            None if best.is_some() => break,
            None => {}
        }
    }
    match &best {
        Some(_) => trail.outcome = OpalOutcome::NotInvalid,
        None => {
            trail.outcome = OpalOutcome::AllInvalid;
            trail.directive = Some(ALL_INVALID_DIRECTIVE.to_string());
        }
    }
    Ok(OpalRun {
        best: best.map(|(s, _)| s),
        trail,
    })
}
