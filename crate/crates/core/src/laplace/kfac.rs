//! Kronecker-factored generalized Gauss-Newton curvature.
//!
//! For layer `l` the GGN block is approximated by `R (x) Q` in the row-major
//! parameter order, where `Q` is the mean outer product of the augmented layer
//! input and `R` is the summed pre-activation curvature. Keeping the data
//! count in `R` makes `R (x) Q` equal to the summed GGN whenever either factor
//! is constant over the data, so linear models get the exact Hessian.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::InferenceHyperParams;
use crate::data::Dataset;
use crate::error::{OpalError, Result};
use crate::network::{trace_unchecked, Architecture, Parameters};
use crate::scalar::Real;

const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct LayerFactors<T: Real> {
    /// `(in + 1) x (in + 1)` activation factor.
    pub q: DMatrix<T>,
    /// `out x out` curvature factor.
    pub r: DMatrix<T>,
    pub q_vecs: DMatrix<T>,
    /// Eigenvalues of `q`, descending, clamped at 0.
    pub q_vals: Vec<T>,
    pub r_vecs: DMatrix<T>,
    pub r_vals: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct KfacFactors<T: Real> {
    pub layers: Vec<LayerFactors<T>>,
    pub n_data: usize,
}

impl<T: Real> LayerFactors<T> {
    /// Builds the factor pair and its eigendecompositions.
    pub fn from_factors(q: DMatrix<T>, r: DMatrix<T>, layer: usize) -> Result<Self> {
        let (q_vecs, q_vals) = sorted_eigen(&q, layer)?;
        let (r_vecs, r_vals) = sorted_eigen(&r, layer)?;
        Ok(Self {
            q,
            r,
            q_vecs,
            q_vals,
            r_vecs,
            r_vals,
        })
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted descending and
/// negative roundoff clamped to zero.
pub(crate) fn sorted_eigen<T: Real>(m: &DMatrix<T>, layer: usize) -> Result<(DMatrix<T>, Vec<T>)> {
    let n = m.nrows();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), Vec::new()));
    }
    if m.iter().any(|v| !v.finite()) {
        return Err(OpalError::Eigen { layer });
    }
    let sym = (m + m.transpose()) * T::lit(0.5);
    let eig = SymmetricEigen::try_new(sym, T::default_epsilon(), 10_000).ok_or(OpalError::Eigen { layer })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut vecs = DMatrix::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &eig.eigenvectors.column(i));
        vals.push(eig.eigenvalues[i].max(T::zero()));
    }
    if vals.iter().any(|v| !v.finite()) {
        return Err(OpalError::Eigen { layer });
    }
    Ok((vecs, vals))
}

/// KFAC factors at `params`. The output-layer curvature is `I / sigma_noise^2`
/// and each backward step multiplies the square-root factor by the transposed
/// weights and the activation derivatives (second derivatives dropped).
pub fn compute_kfac<T: Real>(
    arch: &Architecture,
    params: &Parameters<T>,
    data: &Dataset<T>,
    sigma: &InferenceHyperParams<T>,
) -> Result<KfacFactors<T>> {
    arch.validate()?;
    sigma.validate(arch.num_layers())?;
    if params.len() != arch.param_count() {
        return Err(OpalError::Shape("parameters do not match architecture".into()));
    }
    if !data.is_empty() && (data.input_dim() != arch.input_dim || data.output_dim() != arch.output_dim) {
        return Err(OpalError::Shape("dataset dimensions do not match architecture".into()));
    }
    let shapes = arch.layer_shapes();
    let theta = params.as_slice();
    let d_o = arch.output_dim;
    let weights: Vec<DMatrix<T>> = shapes
        .iter()
        .map(|s| {
            DMatrix::from_fn(s.rows, s.inputs, |i, j| theta[s.offset + i * s.cols + j])
        })
        .collect();
    let inv_sigma = T::one() / sigma.sigma_noise;
    let n = data.len();

    let partials: Vec<(Vec<DMatrix<T>>, Vec<DMatrix<T>>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let rows: Vec<usize> = (c * CHUNK..((c + 1) * CHUNK).min(n)).collect();
            let m = rows.len();
            let mut zs: Vec<DMatrix<T>> = shapes.iter().map(|s| DMatrix::zeros(s.cols, m)).collect();
            let mut cs: Vec<DMatrix<T>> = shapes.iter().map(|s| DMatrix::zeros(s.rows, m * d_o)).collect();
            for (k, &row) in rows.iter().enumerate() {
                let tr = trace_unchecked(arch, &shapes, theta, data.input(row));
                for (l, s) in shapes.iter().enumerate() {
                    let z = &tr.post[l];
                    for j in 0..s.inputs {
                        zs[l][(j, k)] = z[j];
                    }
                    if arch.bias {
                        zs[l][(s.inputs, k)] = T::one();
                    }
                }
                let last = shapes.len() - 1;
                let mut cur = DMatrix::<T>::identity(d_o, d_o) * inv_sigma;
                for l in (0..=last).rev() {
                    cs[l].columns_mut(k * d_o, d_o).copy_from(&cur);
                    if l > 0 {
                        let mut prev = weights[l].transpose() * &cur;
                        let act = arch.activation(l - 1);
                        for (i, a) in tr.pre[l - 1].iter().enumerate() {
                            let d = act.derivative(*a);
                            prev.row_mut(i).scale_mut(d);
                        }
                        cur = prev;
                    }
                }
            }
            let qs = zs.iter().map(|z| z * z.transpose()).collect();
            let rs = cs.iter().map(|c| c * c.transpose()).collect();
            (qs, rs)
        })
        .collect();

    let mut q_sum: Vec<DMatrix<T>> = shapes.iter().map(|s| DMatrix::zeros(s.cols, s.cols)).collect();
    let mut r_sum: Vec<DMatrix<T>> = shapes.iter().map(|s| DMatrix::zeros(s.rows, s.rows)).collect();
    for (qs, rs) in partials {
        for (acc, q) in q_sum.iter_mut().zip(qs) {
            *acc += q;
        }
        for (acc, r) in r_sum.iter_mut().zip(rs) {
            *acc += r;
        }
    }
    let inv_n = if n > 0 { T::one() / T::of_usize(n) } else { T::zero() };
    let layers = q_sum
        .into_iter()
        .zip(r_sum)
        .enumerate()
        .map(|(l, (q, r))| LayerFactors::from_factors(q * inv_n, r, l))
        .collect::<Result<Vec<_>>>()?;
    Ok(KfacFactors { layers, n_data: n })
}
