//! Layer-wise Gaussian posterior built from KFAC eigenfactors.
//!
//! The posterior precision of a fully connected layer is
//! `H_l = R_l (x) Q_l + sigma_pr(l)^-2 I`, whose eigenpairs are products of
//! the factor eigenpairs. Layers with pruned connections restrict `H_l` to the
//! retained entries; small restrictions are eigendecomposed densely and larger
//! ones fall back to the diagonal.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::kfac::sorted_eigen;
use super::{compute_kfac, InferenceHyperParams, KfacFactors};
use crate::data::Dataset;
use crate::error::{OpalError, Result};
use crate::network::{backprop_deltas, trace_unchecked, Architecture, Parameters, SparsityMask};
use crate::scalar::Real;

pub const ARTIFACT_VERSION: u32 = 1;

/// Largest layer (in parameters) that `layer_covariance` will materialize.
pub const DENSE_LIMIT: usize = 4096;

/// Largest retained set of a pruned layer that is eigendecomposed densely.
const MASKED_DENSE_LIMIT: usize = 1500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub enum LayerPrecision<T: Real> {
    /// Fully connected layer, eigenvalues `r_i q_j + precision`.
    Kronecker { precision: T },
    /// Pruned layer; `index` lists retained positions within the layer and
    /// `vals` already include the prior precision.
    Dense {
        index: Vec<usize>,
        vecs: DMatrix<T>,
        vals: Vec<T>,
    },
    /// Pruned layer too large for a dense eigendecomposition.
    Diagonal { index: Vec<usize>, diag: Vec<T> },
}

/// Laplace posterior `N(theta_map, H^-1)` with block-diagonal `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct LaplacePosterior<T: Real> {
    pub arch: Architecture,
    pub mask: SparsityMask,
    pub theta_map: Parameters<T>,
    pub sigma: InferenceHyperParams<T>,
    pub kfac: KfacFactors<T>,
    pub blocks: Vec<LayerPrecision<T>>,
    /// Prior mean when the prior is not centred at zero.
    pub prior_mean: Option<Vec<T>>,
    pub log_det_h: T,
    pub trace_h_inv: T,
    pub layer_log_det: Vec<T>,
    pub layer_trace: Vec<T>,
    /// Retained parameter count per layer.
    pub layer_params: Vec<usize>,
}

/// Predictive moments for one query point, one entry per output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct PredictiveDistribution<T: Real> {
    pub mean: Vec<T>,
    /// Includes the noise floor `sigma_noise^2`.
    pub variance: Vec<T>,
    /// Network outputs per parameter sample (without observation noise).
    pub samples: Option<Vec<Vec<T>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictMode {
    Linearized,
    Sampled { n: usize, seed: u64 },
}

/// Builds the posterior around a trained MAP point.
pub fn build_posterior<T: Real>(
    arch: &Architecture,
    theta_map: Parameters<T>,
    data: &Dataset<T>,
    sigma: &InferenceHyperParams<T>,
    mask: Option<&SparsityMask>,
    prior_mean: Option<Vec<T>>,
) -> Result<LaplacePosterior<T>> {
    let kfac = compute_kfac(arch, &theta_map, data, sigma)?;
    let mask = match mask {
        Some(m) => m.clone().with_layout(arch)?,
        None => SparsityMask::full(arch),
    };
    if let Some(m) = &prior_mean {
        if m.len() != arch.param_count() {
            return Err(OpalError::Shape("prior mean length does not match parameters".into()));
        }
    }
    LaplacePosterior::assemble(arch.clone(), mask, theta_map, sigma.clone(), kfac, prior_mean)
}

impl<T: Real> LaplacePosterior<T> {
    /// Combines precomputed factors into the posterior.
    pub fn assemble(
        arch: Architecture,
        mask: SparsityMask,
        theta_map: Parameters<T>,
        sigma: InferenceHyperParams<T>,
        kfac: KfacFactors<T>,
        prior_mean: Option<Vec<T>>,
    ) -> Result<Self> {
        sigma.validate(arch.num_layers())?;
        let shapes = arch.layer_shapes();
        if kfac.layers.len() != shapes.len() {
            return Err(OpalError::Shape("factor count does not match layer count".into()));
        }
        let mut blocks = Vec::with_capacity(shapes.len());
        let mut layer_log_det = Vec::with_capacity(shapes.len());
        let mut layer_trace = Vec::with_capacity(shapes.len());
        let mut layer_params = Vec::with_capacity(shapes.len());
        for (l, s) in shapes.iter().enumerate() {
            let prec = T::one() / (sigma.sigma_pr[l] * sigma.sigma_pr[l]);
            let f = &kfac.layers[l];
            if mask.layer_is_full(l) {
                let mut ld = T::zero();
                let mut tr = T::zero();
                for &r in &f.r_vals {
                    for &q in &f.q_vals {
                        let h = r * q + prec;
                        ld += h.ln();
                        tr += T::one() / h;
                    }
                }
                blocks.push(LayerPrecision::Kronecker { precision: prec });
                layer_log_det.push(ld);
                layer_trace.push(tr);
                layer_params.push(s.len());
                continue;
            }
            let index: Vec<usize> = mask
                .layer(l)
                .iter()
                .enumerate()
                .filter_map(|(k, &keep)| keep.then_some(k))
                .collect();
            let n = index.len();
            let entry = |a: usize, b: usize| {
                let (ia, ca) = (index[a] / s.cols, index[a] % s.cols);
                let (ib, cb) = (index[b] / s.cols, index[b] % s.cols);
                f.r[(ia, ib)] * f.q[(ca, cb)]
            };
            if n <= MASKED_DENSE_LIMIT {
                let mut h = DMatrix::from_fn(n, n, entry);
                for a in 0..n {
                    h[(a, a)] += prec;
                }
                let (vecs, vals) = sorted_eigen(&h, l)?;
                // the restricted block is at least prec on its diagonal spectrum
                let vals: Vec<T> = vals.into_iter().map(|v| v.max(prec)).collect();
                layer_log_det.push(vals.iter().fold(T::zero(), |a, v| a + v.ln()));
                layer_trace.push(vals.iter().fold(T::zero(), |a, v| a + T::one() / *v));
                blocks.push(LayerPrecision::Dense { index, vecs, vals });
            } else {
                let diag: Vec<T> = (0..n).map(|a| entry(a, a) + prec).collect();
                layer_log_det.push(diag.iter().fold(T::zero(), |a, v| a + v.ln()));
                layer_trace.push(diag.iter().fold(T::zero(), |a, v| a + T::one() / *v));
                blocks.push(LayerPrecision::Diagonal { index, diag });
            }
            layer_params.push(n);
        }
        let log_det_h = layer_log_det.iter().fold(T::zero(), |a, v| a + *v);
        let trace_h_inv = layer_trace.iter().fold(T::zero(), |a, v| a + *v);
        if !log_det_h.finite() || !trace_h_inv.finite() {
            return Err(OpalError::Numerical("non-finite posterior log-determinant".into()));
        }
        Ok(Self {
            arch,
            mask,
            theta_map,
            sigma,
            kfac,
            blocks,
            prior_mean,
            log_det_h,
            trace_h_inv,
            layer_log_det,
            layer_trace,
            layer_params,
        })
    }

    /// Total retained parameter count.
    pub fn retained_params(&self) -> usize {
        self.layer_params.iter().sum()
    }

    pub fn n_data(&self) -> usize {
        self.kfac.n_data
    }

    /// `||theta_l - mean_l||^2` over retained entries of layer `l`.
    pub fn layer_sq_norm(&self, l: usize) -> T {
        let s = self.arch.layer_shapes()[l];
        s.range()
            .filter(|&i| self.mask.keeps(i))
            .map(|i| {
                let d = self.theta_map.as_slice()[i] - self.prior_mean.as_ref().map_or(T::zero(), |m| m[i]);
                d * d
            })
            .fold(T::zero(), |a, b| a + b)
    }

    /// Applies `Gamma_l` to a layer-sized vector without forming the Kronecker
    /// eigenvectors.
    pub fn cov_matvec(&self, l: usize, v: &[T]) -> Result<Vec<T>> {
        let s = *self
            .arch
            .layer_shapes()
            .get(l)
            .ok_or_else(|| OpalError::Argument(format!("layer {l} out of range")))?;
        if v.len() != s.len() {
            return Err(OpalError::Shape(format!("vector has {} entries, layer has {}", v.len(), s.len())));
        }
        let f = &self.kfac.layers[l];
        match &self.blocks[l] {
            LayerPrecision::Kronecker { precision } => {
                let vm = DMatrix::from_row_slice(s.rows, s.cols, v);
                let mut y = f.r_vecs.transpose() * vm * &f.q_vecs;
                for a in 0..s.rows {
                    for b in 0..s.cols {
                        y[(a, b)] /= f.r_vals[a] * f.q_vals[b] + *precision;
                    }
                }
                let out = &f.r_vecs * y * f.q_vecs.transpose();
                Ok(row_major(&out))
            }
            LayerPrecision::Dense { index, vecs, vals } => {
                let g = nalgebra::DVector::from_iterator(index.len(), index.iter().map(|&k| v[k]));
                let mut w = vecs.transpose() * g;
                for (wi, h) in w.iter_mut().zip(vals) {
                    *wi /= *h;
                }
                let res = vecs * w;
                let mut out = vec![T::zero(); s.len()];
                for (a, &k) in index.iter().enumerate() {
                    out[k] = res[a];
                }
                Ok(out)
            }
            LayerPrecision::Diagonal { index, diag } => {
                let mut out = vec![T::zero(); s.len()];
                for (&k, h) in index.iter().zip(diag) {
                    out[k] = v[k] / *h;
                }
                Ok(out)
            }
        }
    }

    /// `g^T Gamma_l g` for a layer-sized vector given as the outer product
    /// `delta (x) z_aug`.
    fn quad_form_outer(&self, l: usize, delta: &[T], z_aug: &[T]) -> T {
        let s = self.arch.layer_shapes()[l];
        let f = &self.kfac.layers[l];
        match &self.blocks[l] {
            LayerPrecision::Kronecker { precision } => {
                let d = nalgebra::DVector::from_column_slice(delta);
                let z = nalgebra::DVector::from_column_slice(z_aug);
                let a = f.r_vecs.tr_mul(&d);
                let b = f.q_vecs.tr_mul(&z);
                let mut acc = T::zero();
                for i in 0..s.rows {
                    let ai = a[i] * a[i];
                    if ai == T::zero() {
                        continue;
                    }
                    for j in 0..s.cols {
                        acc += ai * b[j] * b[j] / (f.r_vals[i] * f.q_vals[j] + *precision);
                    }
                }
                acc
            }
            LayerPrecision::Dense { index, vecs, vals } => {
                let g = nalgebra::DVector::from_iterator(
                    index.len(),
                    index.iter().map(|&k| delta[k / s.cols] * z_aug[k % s.cols]),
                );
                let w = vecs.tr_mul(&g);
                w.iter().zip(vals).fold(T::zero(), |acc, (wi, h)| acc + *wi * *wi / *h)
            }
            LayerPrecision::Diagonal { index, diag } => index.iter().zip(diag).fold(T::zero(), |acc, (&k, h)| {
                let g = delta[k / s.cols] * z_aug[k % s.cols];
                acc + g * g / *h
            }),
        }
    }

    /// One parameter draw from the posterior.
    pub fn sample_parameters(&self, rng: &mut ChaCha8Rng) -> Vec<T> {
        let mut theta = self.theta_map.flatten();
        let mut normal = || T::lit(StandardNormal.sample(rng));
        for (l, s) in self.arch.layer_shapes().iter().enumerate() {
            let f = &self.kfac.layers[l];
            match &self.blocks[l] {
                LayerPrecision::Kronecker { precision } => {
                    let mut e = DMatrix::from_fn(s.rows, s.cols, |_, _| T::zero());
                    for a in 0..s.rows {
                        for b in 0..s.cols {
                            e[(a, b)] = normal() / (f.r_vals[a] * f.q_vals[b] + *precision).sqrt();
                        }
                    }
                    let dw = &f.r_vecs * e * f.q_vecs.transpose();
                    for (k, v) in row_major(&dw).into_iter().enumerate() {
                        theta[s.offset + k] += v;
                    }
                }
                LayerPrecision::Dense { index, vecs, vals } => {
                    let e = nalgebra::DVector::from_iterator(vals.len(), vals.iter().map(|h| normal() / h.sqrt()));
                    let d = vecs * e;
                    for (a, &k) in index.iter().enumerate() {
                        theta[s.offset + k] += d[a];
                    }
                }
                LayerPrecision::Diagonal { index, diag } => {
                    for (&k, h) in index.iter().zip(diag) {
                        theta[s.offset + k] += normal() / h.sqrt();
                    }
                }
            }
        }
        theta
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&PosteriorArtifact {
            version: ARTIFACT_VERSION,
            posterior: self.clone(),
        })?)
    }

    /// Parses a serialized posterior, rejecting incompatible versions.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| OpalError::Config("artifact has no version field".into()))?;
        if found != u64::from(ARTIFACT_VERSION) {
            return Err(OpalError::Version {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: ARTIFACT_VERSION,
            });
        }
        let art: PosteriorArtifact<T> = serde_json::from_value(value)?;
        art.posterior.relink()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Restores layout information that is not serialized.
    pub fn relink(mut self) -> Result<Self> {
        self.arch.validate()?;
        self.theta_map = self.theta_map.with_layout(&self.arch)?;
        self.mask = self.mask.with_layout(&self.arch)?;
        if self.blocks.len() != self.arch.num_layers() || self.kfac.layers.len() != self.arch.num_layers() {
            return Err(OpalError::Shape("artifact layer count does not match architecture".into()));
        }
        Ok(self)
    }
}

/// Serialized container for a posterior.
#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct PosteriorArtifact<T: Real> {
    pub version: u32,
    pub posterior: LaplacePosterior<T>,
}

fn row_major<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// `(log det H, trace H^-1)` summed over layers.
pub fn log_det_and_trace<T: Real>(posterior: &LaplacePosterior<T>) -> (T, T) {
    (posterior.log_det_h, posterior.trace_h_inv)
}

/// Dense `Gamma_l` for layers up to `DENSE_LIMIT` parameters.
pub fn layer_covariance<T: Real>(posterior: &LaplacePosterior<T>, layer: usize) -> Result<DMatrix<T>> {
    let shapes = posterior.arch.layer_shapes();
    let s = *shapes
        .get(layer)
        .ok_or_else(|| OpalError::Argument(format!("layer {layer} out of range")))?;
    if s.len() > DENSE_LIMIT {
        return Err(OpalError::TooLarge {
            layer,
            params: s.len(),
            limit: DENSE_LIMIT,
        });
    }
    let f = &posterior.kfac.layers[layer];
    match &posterior.blocks[layer] {
        LayerPrecision::Kronecker { precision } => {
            let m = f.r_vecs.kronecker(&f.q_vecs);
            let mut scaled = m.clone();
            for a in 0..s.rows {
                for b in 0..s.cols {
                    let h = f.r_vals[a] * f.q_vals[b] + *precision;
                    scaled.column_mut(a * s.cols + b).unscale_mut(h);
                }
            }
            let g = scaled * m.transpose();
            Ok((&g + g.transpose()) * T::lit(0.5))
        }
        LayerPrecision::Dense { index, vecs, vals } => {
            let mut scaled = vecs.clone();
            for (c, h) in vals.iter().enumerate() {
                scaled.column_mut(c).unscale_mut(*h);
            }
            let sub = scaled * vecs.transpose();
            let mut g = DMatrix::zeros(s.len(), s.len());
            for (a, &ka) in index.iter().enumerate() {
                for (b, &kb) in index.iter().enumerate() {
                    g[(ka, kb)] = (sub[(a, b)] + sub[(b, a)]) * T::lit(0.5);
                }
            }
            Ok(g)
        }
        LayerPrecision::Diagonal { index, diag } => {
            let mut g = DMatrix::zeros(s.len(), s.len());
            for (&k, h) in index.iter().zip(diag) {
                g[(k, k)] = T::one() / *h;
            }
            Ok(g)
        }
    }
}

/// Posterior predictive at `x` with the hyperparameters fixed at their
/// stored (most probable) values.
pub fn predict<T: Real>(
    posterior: &LaplacePosterior<T>,
    x: &[T],
    mode: PredictMode,
) -> Result<PredictiveDistribution<T>> {
    let arch = &posterior.arch;
    if x.len() != arch.input_dim {
        return Err(OpalError::Shape(format!(
            "query has dimension {}, model expects {}",
            x.len(),
            arch.input_dim
        )));
    }
    let noise = posterior.sigma.sigma_noise * posterior.sigma.sigma_noise;
    let shapes = arch.layer_shapes();
    let theta = posterior.theta_map.as_slice();
    match mode {
        PredictMode::Linearized => {
            let tr = trace_unchecked(arch, &shapes, theta, x);
            let mean = tr.output().to_vec();
            let mut variance = Vec::with_capacity(arch.output_dim);
            for k in 0..arch.output_dim {
                let mut seed = vec![T::zero(); arch.output_dim];
                seed[k] = T::one();
                let deltas = backprop_deltas(arch, &shapes, theta, &tr, seed);
                let mut var = noise;
                for (l, s) in shapes.iter().enumerate() {
                    let mut z = tr.post[l].clone();
                    if arch.bias {
                        z.push(T::one());
                    }
                    debug_assert_eq!(z.len(), s.cols);
                    var += posterior.quad_form_outer(l, &deltas[l], &z);
                }
                variance.push(var);
            }
            Ok(PredictiveDistribution {
                mean,
                variance,
                samples: None,
            })
        }
        PredictMode::Sampled { n, seed } => {
            if n == 0 {
                return Err(OpalError::Argument("sample count must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d_o = arch.output_dim;
            let mut samples = Vec::with_capacity(n);
            for _ in 0..n {
                let th = posterior.sample_parameters(&mut rng);
                samples.push(trace_unchecked(arch, &shapes, &th, x).output().to_vec());
            }
            let nn = T::of_usize(n);
            let mut mean = vec![T::zero(); d_o];
            for s in &samples {
                for (m, v) in mean.iter_mut().zip(s) {
                    *m += *v / nn;
                }
            }
            let mut variance = vec![T::zero(); d_o];
            if n > 1 {
                for s in &samples {
                    for ((acc, v), m) in variance.iter_mut().zip(s).zip(&mean) {
                        *acc += (*v - *m) * (*v - *m) / T::of_usize(n - 1);
                    }
                }
            }
            for v in variance.iter_mut() {
                *v += noise;
            }
            Ok(PredictiveDistribution {
                mean,
                variance,
                samples: Some(samples),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laplace::{train_map, OptConfig, PriorKind};
    use crate::network::Activation;

    fn conjugate() -> LaplacePosterior<f64> {
        let arch = Architecture::linear(1, 1).without_bias();
        let data = Dataset::<f64>::from_rows(&[vec![1.0]], &[vec![1.0]]).unwrap();
        let s = InferenceHyperParams::<f64>::new(vec![1.0], 1.0).unwrap();
        let opt = OptConfig {
            tolerance: 1e-12,
            ..OptConfig::default()
        };
        let p = train_map(&arch, &data, &s, &PriorKind::Gaussian, None, &opt).unwrap();
        build_posterior(&arch, p, &data, &s, None, None).unwrap()
    }

    #[test]
    fn conjugate_covariance_and_predictive() {
        let post = conjugate();
        let g = layer_covariance(&post, 0).unwrap();
        assert!((g[(0, 0)] - 0.5).abs() < 1e-12);
        let pd = predict(&post, &[1.0], PredictMode::Linearized).unwrap();
        assert!((pd.mean[0] - 0.5).abs() < 1e-10);
        assert!((pd.variance[0] - 1.5).abs() < 1e-10);
        assert!(predict(&post, &[1.0], PredictMode::Sampled { n: 0, seed: 1 }).is_err());
    }

    #[test]
    fn prior_only_covariance() {
        let arch = Architecture::linear(2, 1);
        let data = Dataset::<f64>::empty(2, 1);
        let s = InferenceHyperParams::<f64>::new(vec![2.0], 1.0).unwrap();
        let post = build_posterior(&arch, Parameters::zeros(&arch), &data, &s, None, None).unwrap();
        let g = layer_covariance(&post, 0).unwrap();
        assert!((g - DMatrix::identity(3, 3) * 4.0).norm() < 1e-12);
        let s = InferenceHyperParams::<f64>::new(vec![1.0], 1.0).unwrap();
        let post = build_posterior(&arch, Parameters::zeros(&arch), &data, &s, None, None).unwrap();
        let (ld, tr) = log_det_and_trace(&post);
        assert_eq!(ld, 0.0);
        assert_eq!(tr, 3.0);
    }

    #[test]
    fn log_det_from_given_eigenvalues() {
        let arch = Architecture::linear(1, 1).without_bias();
        let q = DMatrix::from_element(1, 1, 2.0);
        let r = DMatrix::from_element(1, 1, 3.0);
        let kfac = KfacFactors {
            layers: vec![crate::laplace::LayerFactors::from_factors(q, r, 0).unwrap()],
            n_data: 1,
        };
        let s = InferenceHyperParams::<f64>::new(vec![1.0], 1.0).unwrap();
        let post = LaplacePosterior::assemble(
            arch.clone(),
            SparsityMask::full(&arch),
            Parameters::zeros(&arch),
            s,
            kfac,
            None,
        )
        .unwrap();
        let (ld, tr) = log_det_and_trace(&post);
        assert!((ld - 7f64.ln()).abs() < 1e-14);
        assert!((tr - 1.0 / 7.0).abs() < 1e-14);
    }

    #[test]
    fn oversized_layer_refuses_dense_form() {
        let arch = Architecture::new(100, 1, vec![50], vec![Activation::tanh()]).unwrap();
        let data = Dataset::<f64>::empty(100, 1);
        let s = InferenceHyperParams::<f64>::new(vec![1.0, 1.0], 1.0).unwrap();
        let post = build_posterior(&arch, Parameters::zeros(&arch), &data, &s, None, None).unwrap();
        assert!(matches!(layer_covariance(&post, 0), Err(OpalError::TooLarge { layer: 0, .. })));
        let v = vec![1.0; 101 * 50];
        let out = post.cov_matvec(0, &v).unwrap();
        assert!(out.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let post = conjugate();
        let text = post.to_json().unwrap();
        let back = LaplacePosterior::<f64>::from_json(&text).unwrap();
        assert_eq!(back, post);
        let bumped = text.replacen("\"version\":1", "\"version\":99", 1);
        assert!(matches!(
            LaplacePosterior::<f64>::from_json(&bumped),
            Err(OpalError::Version { found: 99, .. })
        ));
    }
}
