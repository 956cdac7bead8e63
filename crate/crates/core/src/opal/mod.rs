//! The discovery loop: probe the width range, search Occam categories in
//! order of complexity, and accept the first plausible model that survives
//! leave-out validation.
//!
//! Fits run on standardized data. Everything a user sees (predictions,
//! observables, metric values) is mapped back to physical units through the
//! [`Surrogate`] wrapper.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardizer};
use crate::error::{OpalError, Result};
use crate::evidence::{EvidenceConfig, ModelRecord};
use crate::laplace::{predict, InferenceHyperParams, PredictMode, PredictiveDistribution, ARTIFACT_VERSION};

pub mod discover;
pub mod metrics;
pub mod observable;
pub mod run;
pub mod validate;

pub use discover::{
    build_initial_set, discover_category_model, partition_categories, select_activation, width_cap_from_peak,
    CandidateRecord, CandidateStatus, CategoryOutcome, DiscoverConfig, OccamCategory, ProbeConfig, ProbeEntry,
    ProbeResult, WidthMean,
};
pub use metrics::{kl_and_entropy, metric_cdf, metric_dkl, KdeGrid};
pub use observable::{
    data_observable, model_observable, noise_scale, observable, FixedCoordinate, IntegrationAxis, ObservableSpec, PathNoise,
    Predictor, QuadratureRule,
};
pub use run::{
    fit_standardizer, run_opal, run_probe, validation_seed, AuditTrail, CategoryTrail, OpalConfig, OpalOutcome, OpalRun,
    PlausibleSummary, ALL_INVALID_DIRECTIVE, SCENARIO_EXHAUSTED,
};
pub use validate::{leave_out_validate, validate_slices, verdict, SliceReport, ValidationConfig, ValidationReport, Verdict};

/// Starting hyperparameters and evidence-loop settings shared by every fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub init_sigma_pr: f64,
    pub init_sigma_noise: f64,
    pub evidence: EvidenceConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            init_sigma_pr: 1.0,
            init_sigma_noise: 0.3,
            evidence: EvidenceConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn init_sigma(&self, layers: usize) -> Result<InferenceHyperParams<f64>> {
        InferenceHyperParams::uniform(layers, self.init_sigma_pr, self.init_sigma_noise)
    }

    /// Evidence settings with the optimizer seed replaced.
    pub fn seeded(&self, seed: u64) -> EvidenceConfig {
        let mut e = self.evidence.clone();
        e.opt.seed = seed;
        e
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a path of indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// A fitted model together with the coordinate maps of its training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub standardizer: Standardizer,
    pub record: ModelRecord<f64>,
    /// Column names of the training data, used to match query files.
    #[serde(default)]
    pub input_names: Vec<String>,
    #[serde(default)]
    pub output_names: Vec<String>,
    /// Prior mean from pretraining, needed to repeat validation refits.
    #[serde(default)]
    pub prior_mean: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SurrogateArtifact {
    version: u32,
    surrogate: Surrogate,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

impl Surrogate {
    /// Predictive mean and variance at a physical input, in physical units.
    pub fn predict(&self, x: &[f64], mode: PredictMode) -> Result<PredictiveDistribution<f64>> {
        let z = self.standardizer.transform_input(x);
        let p = predict(&self.record.posterior, &z, mode)?;
        Ok(PredictiveDistribution {
            mean: self.standardizer.inverse_output(&p.mean),
            variance: self.standardizer.inverse_output_variance(&p.variance),
            samples: p
                .samples
                .map(|s| s.iter().map(|v| self.standardizer.inverse_output(v)).collect()),
        })
    }

    /// Observation noise standard deviations in physical units.
    pub fn noise_sd(&self) -> Vec<f64> {
        let s = self.record.posterior.sigma.sigma_noise;
        self.standardizer.output_scale.iter().map(|c| s * c).collect()
    }

    /// Maps a physical dataset into the model's standardized space.
    pub fn standardize(&self, data: &Dataset<f64>) -> Dataset<f64> {
        self.standardizer.apply(data)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&SurrogateArtifact {
            version: ARTIFACT_VERSION,
            surrogate: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.version != ARTIFACT_VERSION {
            return Err(OpalError::Version {
                found: probe.version,
                expected: ARTIFACT_VERSION,
            });
        }
        let a: SurrogateArtifact = serde_json::from_str(text)?;
        let mut s = a.surrogate;
        s.record = s.record.relink()?;
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
