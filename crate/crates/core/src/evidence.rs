//! Hierarchical evidence: hyperparameter estimation, model evidence,
//! plausibilities and model averaging.
//!
//! Hyperparameters are estimated by maximizing the Laplace evidence
//! `ln p(D | sigma)`. The model evidence then integrates over
//! `(ln sigma_pr^2, ln sigma_noise^2)` with a Gaussian approximation around
//! the maximum and a uniform box hyperprior.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{OpalError, Result};
use crate::laplace::{
    build_posterior, predict, train_map_with, InferenceHyperParams, LaplacePosterior, OptConfig, PredictMode,
    PredictiveDistribution, PriorKind, TrainSetup,
};
use crate::network::{Architecture, Objective, SparsityMask};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HyperUpdate {
    /// Effective-parameter fixed point.
    MacKay,
    /// Golden-section coordinate ascent on the evidence.
    GoldenSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvidenceConfig {
    pub max_outer: usize,
    /// Stop when `|delta ln-evidence| / |ln-evidence|` falls below this.
    pub rel_tol: f64,
    pub update: HyperUpdate,
    /// One prior scale shared by all layers instead of one per layer.
    pub shared_prior: bool,
    /// Uniform hyperprior support for each of `ln sigma_pr^2`, `ln sigma_noise^2`.
    pub log_sigma2_box: [f64; 2],
    /// Halvings of a rejected hyperparameter step in log space.
    pub max_backtracks: usize,
    pub opt: OptConfig,
}

impl Default for EvidenceConfig {
    fn default() -> Self {
        Self {
            max_outer: 60,
            rel_tol: 1e-6,
            update: HyperUpdate::MacKay,
            shared_prior: false,
            log_sigma2_box: [1e-6f64.ln(), 1e6f64.ln()],
            max_backtracks: 12,
            opt: OptConfig::default(),
        }
    }
}

impl EvidenceConfig {
    /// Log-density of the uniform hyperprior at any interior point.
    pub fn c_prior(&self) -> f64 {
        hyperprior_log_density(self.log_sigma2_box)
    }
}

/// `-2 ln(width)` for a uniform density on a square box in the two log-variances.
pub fn hyperprior_log_density(log_box: [f64; 2]) -> f64 {
    -2.0 * (log_box[1] - log_box[0]).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct EvidenceRecord<T: Real> {
    /// `ln p(D | sigma_map)` under the Laplace approximation.
    pub log_evid_sigma: T,
    /// Model evidence after integrating over the hyperparameters.
    pub log_evid_model: T,
    pub sigma_map: InferenceHyperParams<T>,
    pub var_ln_sigma_pr2: T,
    pub var_ln_sigma_noise2: T,
    /// Effective number of parameters.
    pub gamma: T,
    pub iterations: usize,
    pub converged: bool,
    /// Accepted `ln p(D | sigma)` values, one per outer iteration.
    pub history: Vec<T>,
}

fn residual_sum<T: Real>(posterior: &LaplacePosterior<T>, data: &Dataset<T>) -> Result<T> {
    if data.is_empty() {
        return Ok(T::zero());
    }
    let obj = Objective {
        arch: &posterior.arch,
        data,
        sigma: &posterior.sigma,
        prior: &PriorKind::Gaussian,
        prior_mean: None,
        mask: None,
    };
    obj.check()?;
    let rss = obj.sum_sq_residuals(posterior.theta_map.as_slice());
    if !rss.finite() {
        return Err(OpalError::Numerical("non-finite residuals".into()));
    }
    Ok(rss)
}

/// Laplace evidence `ln p(D | sigma)` at the posterior's hyperparameters:
/// Gaussian log-likelihood and log-prior at `theta_map`, minus
/// `0.5 ln det(H / 2 pi)`.
pub fn log_evidence_sigma<T: Real>(posterior: &LaplacePosterior<T>, data: &Dataset<T>) -> Result<T> {
    let rss = residual_sum(posterior, data)?;
    let two_pi = T::two_pi();
    let half = T::lit(0.5);
    let sn2 = posterior.sigma.sigma_noise * posterior.sigma.sigma_noise;
    let n_obs = T::of_usize(data.len() * posterior.arch.output_dim);
    let mut e = -half * rss / sn2 - half * n_obs * (two_pi * sn2).ln();
    for (l, &p_l) in posterior.layer_params.iter().enumerate() {
        let s2 = posterior.sigma.sigma_pr[l] * posterior.sigma.sigma_pr[l];
        e -= half * posterior.layer_sq_norm(l) / s2;
        e -= half * T::of_usize(p_l) * (two_pi * s2).ln();
    }
    e -= half * posterior.log_det_h;
    e += half * T::of_usize(posterior.retained_params()) * two_pi.ln();
    if !e.finite() {
        return Err(OpalError::Numerical("non-finite evidence".into()));
    }
    Ok(e)
}

/// Per-layer effective parameter counts `P_l - tr_l(H^-1) / sigma_pr(l)^2`.
pub fn effective_parameters<T: Real>(posterior: &LaplacePosterior<T>) -> Vec<T> {
    posterior
        .layer_params
        .iter()
        .zip(&posterior.layer_trace)
        .zip(&posterior.sigma.sigma_pr)
        .map(|((&p, &tr), &s)| T::of_usize(p) - tr / (s * s))
        .collect()
}

/// Posterior variances of `ln sigma_pr^2` and `ln sigma_noise^2`:
/// `2 / gamma` and `2 / (n_obs - gamma)`.
pub fn hyper_variances<T: Real>(gamma: T, n_obs: usize) -> Result<(T, T)> {
    let rest = T::of_usize(n_obs) - gamma;
    if !(gamma > T::zero()) || !(rest > T::zero()) {
        return Err(OpalError::DegenerateEvidence(format!(
            "effective parameters {:.4} with {n_obs} observations",
            gamma.to_f64_lossy()
        )));
    }
    Ok((T::lit(2.0) / gamma, T::lit(2.0) / rest))
}

/// Model evidence from a fitted record and the hyperprior log-density.
pub fn log_model_evidence<T: Real>(record: &EvidenceRecord<T>, c_prior: f64) -> Result<T> {
    let ok = |v: T| v > T::zero() && v.finite();
    if !ok(record.var_ln_sigma_pr2) || !ok(record.var_ln_sigma_noise2) {
        return Err(OpalError::State("hyperparameter variances are not available".into()));
    }
    Ok(record.log_evid_sigma
        + T::two_pi().ln()
        + T::lit(0.5) * record.var_ln_sigma_pr2.ln()
        + T::lit(0.5) * record.var_ln_sigma_noise2.ln()
        + T::lit(c_prior))
}

struct Fitter<'a, T: Real> {
    arch: &'a Architecture,
    data: &'a Dataset<T>,
    mask: Option<&'a SparsityMask>,
    prior_mean: Option<&'a [T]>,
    config: &'a EvidenceConfig,
    n_obs: usize,
}

struct State<T: Real> {
    post: LaplacePosterior<T>,
    evid: T,
}

impl<T: Real> Fitter<'_, T> {
    fn evaluate(&self, sigma: &InferenceHyperParams<T>, init: Option<&[T]>) -> Result<State<T>> {
        let setup = TrainSetup {
            prior_mean: self.prior_mean,
            init,
        };
        let (theta, _) = train_map_with(
            self.arch,
            self.data,
            sigma,
            &PriorKind::Gaussian,
            self.mask,
            &self.config.opt,
            setup,
        )?;
        let post = build_posterior(
            self.arch,
            theta,
            self.data,
            sigma,
            self.mask,
            self.prior_mean.map(<[T]>::to_vec),
        )?;
        let evid = log_evidence_sigma(&post, self.data)?;
        Ok(State { post, evid })
    }

    fn clamp_var(&self, v: T) -> T {
        let [lo, hi] = self.config.log_sigma2_box;
        let lv = v.to_f64_lossy().ln();
        if lv.is_nan() {
            return T::lit(hi.exp());
        }
        T::lit(lv.clamp(lo, hi).exp())
    }

    /// Effective-parameter fixed-point proposal.
    fn mackay(&self, st: &State<T>) -> Result<InferenceHyperParams<T>> {
        let post = &st.post;
        let gammas = effective_parameters(post);
        let gamma = gammas.iter().fold(T::zero(), |a, b| a + *b);
        let rest = T::of_usize(self.n_obs) - gamma;
        if !(gamma > T::zero()) || !(rest > T::zero()) {
            return Err(OpalError::DegenerateEvidence(format!(
                "effective parameters {:.4} with {} observations",
                gamma.to_f64_lossy(),
                self.n_obs
            )));
        }
        let rss = residual_sum(post, self.data)?;
        let layers = gammas.len();
        let mut sigma_pr = post.sigma.sigma_pr.clone();
        if self.config.shared_prior {
            let sq = (0..layers).fold(T::zero(), |a, l| a + post.layer_sq_norm(l));
            let s = self.clamp_var(sq / gamma).sqrt();
            sigma_pr.iter_mut().for_each(|v| *v = s);
        } else {
            for l in 0..layers {
                if gammas[l] > T::lit(1e-12) {
                    sigma_pr[l] = self.clamp_var(post.layer_sq_norm(l) / gammas[l]).sqrt();
                }
            }
        }
        let sigma_noise = self.clamp_var(rss / rest).sqrt();
        InferenceHyperParams::new(sigma_pr, sigma_noise)
    }

    fn log_coords(&self, s: &InferenceHyperParams<T>) -> Vec<f64> {
        let mut v: Vec<f64> = if self.config.shared_prior {
            vec![2.0 * s.sigma_pr[0].to_f64_lossy().ln()]
        } else {
            s.sigma_pr.iter().map(|x| 2.0 * x.to_f64_lossy().ln()).collect()
        };
        v.push(2.0 * s.sigma_noise.to_f64_lossy().ln());
        v
    }

    fn from_log_coords(&self, c: &[f64]) -> Result<InferenceHyperParams<T>> {
        let [lo, hi] = self.config.log_sigma2_box;
        let sd = |x: f64| T::lit((x.clamp(lo, hi) * 0.5).exp());
        let layers = self.arch.num_layers();
        let sigma_pr = if self.config.shared_prior {
            vec![sd(c[0]); layers]
        } else {
            c[..layers].iter().map(|&x| sd(x)).collect()
        };
        InferenceHyperParams::new(sigma_pr, sd(*c.last().expect("noise coordinate")))
    }

    /// Tries `target`, halving the log-space step until the evidence does not drop.
    fn ascend(&self, cur: &State<T>, target: &InferenceHyperParams<T>) -> Result<Option<State<T>>> {
        let from = self.log_coords(&cur.post.sigma);
        let to = self.log_coords(target);
        let slack = T::lit(1e-10);
        let mut frac = 1.0;
        for _ in 0..=self.config.max_backtracks {
            let c: Vec<f64> = from.iter().zip(&to).map(|(a, b)| a + frac * (b - a)).collect();
            let sigma = self.from_log_coords(&c)?;
            let next = self.evaluate(&sigma, Some(cur.post.theta_map.as_slice()))?;
            if next.evid >= cur.evid - slack {
                return Ok(Some(next));
            }
            frac *= 0.5;
        }
        Ok(None)
    }

    /// One sweep of golden-section searches, one coordinate at a time.
    fn golden_sweep(&self, cur: State<T>) -> Result<State<T>> {
        let mut best = cur;
        let n = self.log_coords(&best.post.sigma).len();
        let ratio = (5f64.sqrt() - 1.0) / 2.0;
        for k in 0..n {
            let base = self.log_coords(&best.post.sigma);
            let eval = |x: f64, warm: &[T]| -> Result<State<T>> {
                let mut c = base.clone();
                c[k] = x;
                let sigma = self.from_log_coords(&c)?;
                self.evaluate(&sigma, Some(warm))
            };
            let warm = best.post.theta_map.flatten();
            let (mut a, mut b) = (base[k] - 2.0, base[k] + 2.0);
            let mut x1 = b - ratio * (b - a);
            let mut x2 = a + ratio * (b - a);
            let mut s1 = eval(x1, &warm)?;
            let mut s2 = eval(x2, &warm)?;
            for _ in 0..14 {
                if s1.evid >= s2.evid {
                    b = x2;
                    x2 = x1;
                    s2 = s1;
                    x1 = b - ratio * (b - a);
                    s1 = eval(x1, &warm)?;
                } else {
                    a = x1;
                    x1 = x2;
                    s1 = s2;
                    x2 = a + ratio * (b - a);
                    s2 = eval(x2, &warm)?;
                }
            }
            let cand = if s1.evid >= s2.evid { s1 } else { s2 };
            if cand.evid > best.evid {
                best = cand;
            }
        }
        Ok(best)
    }
}

/// Alternates MAP training with hyperparameter updates until the evidence
/// stalls. Returns the best iterate; `converged` is false when `max_outer`
/// was reached first.
pub fn fit_hierarchical<T: Real>(
    arch: &Architecture,
    data: &Dataset<T>,
    init_sigma: &InferenceHyperParams<T>,
    mask: Option<&SparsityMask>,
    config: &EvidenceConfig,
) -> Result<(LaplacePosterior<T>, EvidenceRecord<T>)> {
    fit_hierarchical_with(arch, data, init_sigma, mask, config, TrainSetup::default())
}

/// As [`fit_hierarchical`] with an optional prior mean and warm start.
pub fn fit_hierarchical_with<T: Real>(
    arch: &Architecture,
    data: &Dataset<T>,
    init_sigma: &InferenceHyperParams<T>,
    mask: Option<&SparsityMask>,
    config: &EvidenceConfig,
    setup: TrainSetup<'_, T>,
) -> Result<(LaplacePosterior<T>, EvidenceRecord<T>)> {
    if data.is_empty() {
        return Err(OpalError::Argument("training data is empty".into()));
    }
    if config.max_outer == 0 || !(config.rel_tol >= 0.0) || !(config.log_sigma2_box[0] < config.log_sigma2_box[1]) {
        return Err(OpalError::Config("evidence loop needs max_outer > 0, rel_tol >= 0 and a valid box".into()));
    }
    let mut init = init_sigma.clone();
    if config.shared_prior {
        let s0 = init.sigma_pr.first().copied().unwrap_or(T::one());
        init.sigma_pr.iter_mut().for_each(|v| *v = s0);
    }
    let fitter = Fitter {
        arch,
        data,
        mask,
        prior_mean: setup.prior_mean,
        config,
        n_obs: data.len() * arch.output_dim,
    };
    let mut cur = fitter.evaluate(&init, setup.init)?;
    let mut history = vec![cur.evid];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_outer {
        iterations += 1;
        let next = match config.update {
            HyperUpdate::MacKay => {
                let target = fitter.mackay(&cur)?;
                fitter.ascend(&cur, &target)?
            }
            HyperUpdate::GoldenSection => {
                let prev = cur.evid;
                let st = fitter.golden_sweep(State {
                    post: cur.post.clone(),
                    evid: cur.evid,
                })?;
                (st.evid >= prev).then_some(st)
            }
        };
        let Some(next) = next else {
            // no ascent along the proposed direction: a fixed point up to roundoff
            converged = true;
            break;
        };
        let change = (next.evid - cur.evid).abs() / cur.evid.abs().max(T::one());
        cur = next;
        history.push(cur.evid);
        if change.to_f64_lossy() < config.rel_tol {
            converged = true;
            break;
        }
    }
    let gamma = effective_parameters(&cur.post)
        .into_iter()
        .fold(T::zero(), |a, b| a + b);
    let (var_pr, var_noise) = hyper_variances(gamma, fitter.n_obs)?;
    let mut record = EvidenceRecord {
        log_evid_sigma: cur.evid,
        log_evid_model: T::zero(),
        sigma_map: cur.post.sigma.clone(),
        var_ln_sigma_pr2: var_pr,
        var_ln_sigma_noise2: var_noise,
        gamma,
        iterations,
        converged,
        history,
    };
    record.log_evid_model = log_model_evidence(&record, config.c_prior())?;
    Ok((cur.post, record))
}

/// Evidence record at fixed hyperparameters (no outer loop), used for
/// retraining under a mask without re-estimating `sigma`.
pub fn evidence_at_fixed_sigma<T: Real>(
    posterior: &LaplacePosterior<T>,
    data: &Dataset<T>,
    c_prior: f64,
) -> Result<EvidenceRecord<T>> {
    let evid = log_evidence_sigma(posterior, data)?;
    let gamma = effective_parameters(posterior).into_iter().fold(T::zero(), |a, b| a + b);
    let (var_pr, var_noise) = hyper_variances(gamma, data.len() * posterior.arch.output_dim)?;
    let mut record = EvidenceRecord {
        log_evid_sigma: evid,
        log_evid_model: T::zero(),
        sigma_map: posterior.sigma.clone(),
        var_ln_sigma_pr2: var_pr,
        var_ln_sigma_noise2: var_noise,
        gamma,
        iterations: 0,
        converged: true,
        history: vec![evid],
    };
    record.log_evid_model = log_model_evidence(&record, c_prior)?;
    Ok(record)
}

/// A fitted candidate model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct ModelRecord<T: Real> {
    pub arch: Architecture,
    pub mask: SparsityMask,
    pub posterior: LaplacePosterior<T>,
    pub evidence: EvidenceRecord<T>,
    /// Set by [`plausibilities`]; zero before normalization.
    pub plausibility: f64,
    pub label: String,
}

impl<T: Real> ModelRecord<T> {
    pub fn new(posterior: LaplacePosterior<T>, evidence: EvidenceRecord<T>) -> Self {
        Self {
            arch: posterior.arch.clone(),
            mask: posterior.mask.clone(),
            label: posterior.arch.label(),
            posterior,
            evidence,
            plausibility: 0.0,
        }
    }

    pub fn relink(mut self) -> Result<Self> {
        self.posterior = self.posterior.relink()?;
        self.mask = self.mask.with_layout(&self.arch)?;
        Ok(self)
    }
}

/// Softmax of `log_evidence + log_prior` with max-subtraction.
pub fn plausibility_weights(log_evidence: &[f64], log_prior: &[f64]) -> Result<Vec<f64>> {
    if log_evidence.is_empty() || log_evidence.len() != log_prior.len() {
        return Err(OpalError::Argument("evidence and prior lists must be non-empty and equal length".into()));
    }
    let scores: Vec<f64> = log_evidence.iter().zip(log_prior).map(|(e, p)| e + p).collect();
    if scores.iter().any(|s| s.is_nan() || *s == f64::INFINITY) {
        return Err(OpalError::DegenerateSet("non-finite model score".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(OpalError::DegenerateSet("every model has zero weight".into()));
    }
    let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Normalizes plausibilities across a model set in place.
pub fn plausibilities<T: Real>(records: &mut [ModelRecord<T>], log_prior_weights: &[f64]) -> Result<()> {
    let evid: Vec<f64> = records
        .iter()
        .map(|r| r.evidence.log_evid_model.to_f64_lossy())
        .collect();
    let w = plausibility_weights(&evid, log_prior_weights)?;
    for (r, p) in records.iter_mut().zip(w) {
        r.plausibility = p;
    }
    Ok(())
}

/// Plausibility-weighted mixture of the per-model predictives.
pub fn model_average_predict<T: Real>(
    records: &[ModelRecord<T>],
    x: &[T],
    mode: PredictMode,
) -> Result<PredictiveDistribution<T>> {
    if records.is_empty() {
        return Err(OpalError::DegenerateSet("no models to average".into()));
    }
    let total: f64 = records.iter().map(|r| r.plausibility).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(OpalError::State("plausibilities are not normalized".into()));
    }
    let preds = records
        .iter()
        .map(|r| predict(&r.posterior, x, mode))
        .collect::<Result<Vec<_>>>()?;
    let d_o = preds[0].mean.len();
    let mut mean = vec![T::zero(); d_o];
    let mut second = vec![T::zero(); d_o];
    for (r, p) in records.iter().zip(&preds) {
        let w = T::lit(r.plausibility);
        for k in 0..d_o {
            mean[k] += w * p.mean[k];
            second[k] += w * (p.variance[k] + p.mean[k] * p.mean[k]);
        }
    }
    let variance = (0..d_o).map(|k| second[k] - mean[k] * mean[k]).collect();
    Ok(PredictiveDistribution {
        mean,
        variance,
        samples: None,
    })
}
