//! MAP training, Kronecker-factored curvature and the Laplace posterior.

mod kfac;
mod optim;
mod posterior;

use serde::{Deserialize, Serialize};

use crate::error::{OpalError, Result};
use crate::scalar::Real;

pub use kfac::{compute_kfac, KfacFactors, LayerFactors};
pub use optim::{train_map, train_map_with, OptConfig, OptMethod, TrainReport, TrainSetup};
pub use posterior::{
    build_posterior, layer_covariance, log_det_and_trace, predict, LaplacePosterior, LayerPrecision,
    PosteriorArtifact, PredictMode, PredictiveDistribution, ARTIFACT_VERSION, DENSE_LIMIT,
};

/// Prior and noise standard deviations: one `sigma_pr` per weight layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct InferenceHyperParams<T> {
    pub sigma_pr: Vec<T>,
    pub sigma_noise: T,
}

impl<T: Real> InferenceHyperParams<T> {
    pub fn new(sigma_pr: Vec<T>, sigma_noise: T) -> Result<Self> {
        let s = Self { sigma_pr, sigma_noise };
        s.validate(s.sigma_pr.len())?;
        Ok(s)
    }

    /// The same prior scale for every layer.
    pub fn uniform(layers: usize, sigma_pr: T, sigma_noise: T) -> Result<Self> {
        Self::new(vec![sigma_pr; layers], sigma_noise)
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.sigma_pr.len() != layers {
            return Err(OpalError::Shape(format!(
                "{} prior scales for {layers} layers",
                self.sigma_pr.len()
            )));
        }
        let ok = |v: T| v > T::zero() && v.finite();
        if !ok(self.sigma_noise) || !self.sigma_pr.iter().all(|&s| ok(s)) {
            return Err(OpalError::Argument(
                "hyperparameters must be strictly positive and finite".into(),
            ));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> InferenceHyperParams<U> {
        InferenceHyperParams {
            sigma_pr: self.sigma_pr.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            sigma_noise: U::lit(self.sigma_noise.to_f64_lossy()),
        }
    }
}

/// Parameter prior family. `Laplace` carries one scale `beta` per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub enum PriorKind<T> {
    Gaussian,
    Laplace { beta: Vec<T> },
}
