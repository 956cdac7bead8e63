//! Full-batch MAP optimizers.
//!
//! Gaussian priors use L-BFGS with Armijo backtracking (or Adam with step
//! rejection). The Laplace prior uses accelerated proximal gradient so that
//! exact zeros are reachable. Every accepted step is non-increasing in loss.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{InferenceHyperParams, PriorKind};
use crate::data::Dataset;
use crate::error::{OpalError, Result};
use crate::network::{mask_in_place, Architecture, Objective, Parameters, SparsityMask};
use crate::scalar::{dot, norm_sq, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptMethod {
    Lbfgs,
    Adam,
}

/// Optimizer settings. Tolerance is on `||grad|| / max(1, ||theta||)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub method: OptMethod,
    pub max_iters: usize,
    /// Adam learning rate; also the first trial step for L-BFGS.
    pub step_size: f64,
    pub tolerance: f64,
    /// Also stop when the loss fell by less than `f_tolerance * max(1, |loss|)`
    /// over the last ten accepted steps. Zero disables the check.
    pub f_tolerance: f64,
    pub seed: u64,
    /// Initial weights are drawn from `N(0, (init_scale * sigma_pr)^2)`.
    pub init_scale: f64,
    pub memory: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            method: OptMethod::Lbfgs,
            max_iters: 3000,
            step_size: 1e-2,
            tolerance: 1e-5,
            f_tolerance: 1e-9,
            seed: 0,
            init_scale: 0.1,
            memory: 10,
        }
    }
}

/// Optional prior mean and warm start.
#[derive(Clone, Copy, Debug)]
pub struct TrainSetup<'a, T> {
    pub prior_mean: Option<&'a [T]>,
    pub init: Option<&'a [T]>,
}

impl<T> Default for TrainSetup<'_, T> {
    fn default() -> Self {
        Self {
            prior_mean: None,
            init: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: usize,
    /// Whether the gradient or loss-stall tolerance was met (as opposed to
    /// `max_iters` or a failed line search).
    pub converged: bool,
    pub grad_norm: f64,
    pub loss: f64,
    /// Loss after each accepted step, starting with the initial point.
    pub history: Vec<f64>,
}

/// MAP estimate from a seeded initialization.
pub fn train_map<T: Real>(
    arch: &Architecture,
    data: &Dataset<T>,
    sigma: &InferenceHyperParams<T>,
    prior: &PriorKind<T>,
    mask: Option<&SparsityMask>,
    opt: &OptConfig,
) -> Result<Parameters<T>> {
    if data.is_empty() {
        return Err(OpalError::Argument("training data is empty".into()));
    }
    Ok(train_map_with(arch, data, sigma, prior, mask, opt, TrainSetup::default())?.0)
}

/// MAP estimate with an optional prior mean and warm start. Empty data is
/// allowed and yields the prior mode.
pub fn train_map_with<T: Real>(
    arch: &Architecture,
    data: &Dataset<T>,
    sigma: &InferenceHyperParams<T>,
    prior: &PriorKind<T>,
    mask: Option<&SparsityMask>,
    opt: &OptConfig,
    setup: TrainSetup<'_, T>,
) -> Result<(Parameters<T>, TrainReport)> {
    let obj = Objective {
        arch,
        data,
        sigma,
        prior,
        prior_mean: setup.prior_mean,
        mask,
    };
    obj.check()?;
    if opt.max_iters == 0 || !(opt.tolerance >= 0.0) || !(opt.step_size > 0.0) {
        return Err(OpalError::Config("optimizer needs max_iters > 0, tolerance >= 0, step_size > 0".into()));
    }
    let mut x = initial_point(arch, sigma, opt, setup)?;
    mask_in_place(&mut x, mask);
    let report = match (prior, opt.method) {
        (PriorKind::Laplace { beta }, _) => proximal(&obj, beta, &mut x, opt)?,
        (PriorKind::Gaussian, OptMethod::Lbfgs) => lbfgs(&obj, &mut x, opt)?,
        (PriorKind::Gaussian, OptMethod::Adam) => adam(&obj, &mut x, opt)?,
    };
    if !report.converged {
        log::debug!(
            "optimizer stopped after {} iterations with relative gradient {:.3e}",
            report.iterations,
            report.grad_norm
        );
    }
    Ok((Parameters::from_flat(arch, x)?, report))
}

fn initial_point<T: Real>(
    arch: &Architecture,
    sigma: &InferenceHyperParams<T>,
    opt: &OptConfig,
    setup: TrainSetup<'_, T>,
) -> Result<Vec<T>> {
    let p = arch.param_count();
    if let Some(init) = setup.init.or(setup.prior_mean) {
        if init.len() != p {
            return Err(OpalError::Shape(format!("initial point has {} entries, expected {p}", init.len())));
        }
        return Ok(init.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut x = vec![T::zero(); p];
    for (l, s) in arch.layer_shapes().iter().enumerate() {
        let scale = opt.init_scale * sigma.sigma_pr[l].to_f64_lossy();
        for i in 0..s.rows {
            for j in 0..s.inputs {
                let z: f64 = StandardNormal.sample(&mut rng);
                x[s.offset + i * s.cols + j] = T::lit(z * scale);
            }
        }
    }
    Ok(x)
}

fn rel_grad<T: Real>(g: &[T], x: &[T]) -> f64 {
    let gn = norm_sq(g).to_f64_lossy().sqrt();
    let xn = norm_sq(x).to_f64_lossy().sqrt();
    gn / xn.max(1.0)
}

fn diverged(iteration: usize, what: &str) -> OpalError {
    OpalError::Divergence {
        iteration,
        detail: format!("non-finite {what}"),
    }
}

fn stalled(history: &[f64], f_tol: f64) -> bool {
    const WINDOW: usize = 10;
    let n = history.len();
    f_tol > 0.0 && n > WINDOW && history[n - 1 - WINDOW] - history[n - 1] <= f_tol * history[n - 1].abs().max(1.0)
}

fn all_finite<T: Real>(v: &[T]) -> bool {
    v.iter().all(|x| x.finite())
}

fn lbfgs<T: Real>(obj: &Objective<'_, T>, x: &mut Vec<T>, opt: &OptConfig) -> Result<TrainReport> {
    const C1: f64 = 1e-4;
    let (mut f, mut g) = obj.value_and_grad(x);
    if !f.finite() || !all_finite(&g) {
        return Err(diverged(0, "loss at the initial point"));
    }
    let mut history = vec![f.to_f64_lossy()];
    let mut mem: VecDeque<(Vec<T>, Vec<T>, T)> = VecDeque::with_capacity(opt.memory);
    let mut converged = false;
    let mut it = 0;
    while it < opt.max_iters {
        if rel_grad(&g, x) <= opt.tolerance {
            converged = true;
            break;
        }
        it += 1;
        let mut d = two_loop(&g, &mem);
        let mut slope = dot(&g, &d);
        if !(slope < T::zero()) || !all_finite(&d) {
            mem.clear();
            d = g.iter().map(|v| -*v).collect();
            slope = dot(&g, &d);
        }
        if mem.is_empty() {
            // scale the steepest-descent direction so the first trial step is modest
            let gn = norm_sq(&g).sqrt();
            let scale = T::lit(opt.step_size.max(1e-3)).max(T::one() / gn.max(T::one()));
            for v in d.iter_mut() {
                *v *= scale;
            }
            slope *= scale;
        }
        let mut accepted = None;
        let mut t = T::one();
        for _ in 0..60 {
            let xn: Vec<T> = x.iter().zip(&d).map(|(a, b)| *a + t * *b).collect();
            let (fnew, gnew) = obj.value_and_grad(&xn);
            if fnew.finite() && fnew <= f + T::lit(C1) * t * slope {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            t *= T::lit(0.5);
        }
        let Some((xn, fn_, gn)) = accepted else {
            if !mem.is_empty() {
                mem.clear();
                continue;
            }
            break;
        };
        if !all_finite(&gn) {
            return Err(diverged(it, "gradient"));
        }
        let s: Vec<T> = xn.iter().zip(x.iter()).map(|(a, b)| *a - *b).collect();
        let y: Vec<T> = gn.iter().zip(&g).map(|(a, b)| *a - *b).collect();
        let sy = dot(&s, &y);
        if sy > T::lit(1e-12) * norm_sq(&s).sqrt() * norm_sq(&y).sqrt() && sy > T::zero() {
            if mem.len() == opt.memory.max(1) {
                mem.pop_front();
            }
            mem.push_back((s, y, T::one() / sy));
        }
        // Armijo already guarantees descent; recompute only guards against roundoff
        if fn_ <= f {
            *x = xn;
            f = fn_;
            g = gn;
            history.push(f.to_f64_lossy());
            if stalled(&history, opt.f_tolerance) {
                converged = true;
                break;
            }
        } else {
            mem.clear();
        }
    }
    Ok(TrainReport {
        iterations: it,
        converged,
        grad_norm: rel_grad(&g, x),
        loss: f.to_f64_lossy(),
        history,
    })
}

fn two_loop<T: Real>(g: &[T], mem: &VecDeque<(Vec<T>, Vec<T>, T)>) -> Vec<T> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = *rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * *yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let gamma = dot(s, y) / norm_sq(y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
        let b = *rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * *si;
        }
    }
    q.iter().map(|v| -*v).collect()
}

fn adam<T: Real>(obj: &Objective<'_, T>, x: &mut Vec<T>, opt: &OptConfig) -> Result<TrainReport> {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let (mut f, mut g) = obj.value_and_grad(x);
    if !f.finite() || !all_finite(&g) {
        return Err(diverged(0, "loss at the initial point"));
    }
    let p = x.len();
    let mut m = vec![0.0; p];
    let mut v = vec![0.0; p];
    let mut lr = opt.step_size;
    let mut history = vec![f.to_f64_lossy()];
    let mut converged = false;
    let mut it = 0;
    let mut step = 0i32;
    while it < opt.max_iters {
        if rel_grad(&g, x) <= opt.tolerance {
            converged = true;
            break;
        }
        it += 1;
        step += 1;
        let mut mn = m.clone();
        let mut vn = v.clone();
        let mut fresh = false;
        let mut accepted = false;
        for attempt in 0..50 {
            if attempt == 1 {
                // stale momentum may point uphill; restart from the bare gradient
                m.iter_mut().for_each(|x| *x = 0.0);
                v.iter_mut().for_each(|x| *x = 0.0);
                step = 1;
                fresh = true;
            }
            if attempt <= 1 {
                for i in 0..p {
                    let gi = g[i].to_f64_lossy();
                    mn[i] = b1 * m[i] + (1.0 - b1) * gi;
                    vn[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                }
            }
            let c1 = 1.0 - b1.powi(step);
            let c2 = 1.0 - b2.powi(step);
            let xn: Vec<T> = (0..p)
                .map(|i| x[i] - T::lit(lr * (mn[i] / c1) / ((vn[i] / c2).sqrt() + eps)))
                .collect();
            let fnew = obj.value(&xn);
            if fnew.finite() && fnew <= f {
                let (fv, gv) = obj.value_and_grad(&xn);
                if !all_finite(&gv) {
                    return Err(diverged(it, "gradient"));
                }
                *x = xn;
                f = fv;
                g = gv;
                m = mn;
                v = vn;
                history.push(f.to_f64_lossy());
                accepted = true;
                break;
            }
            if fresh {
                lr *= 0.5;
            }
        }
        if !accepted {
            break;
        }
        lr = (lr * 1.05).min(opt.step_size);
    }
    Ok(TrainReport {
        iterations: it,
        converged,
        grad_norm: rel_grad(&g, x),
        loss: f.to_f64_lossy(),
        history,
    })
}

/// Soft-threshold around the prior mean with per-layer thresholds.
fn prox<T: Real>(obj: &Objective<'_, T>, v: &mut [T], beta: &[T], step: T) {
    for (l, s) in obj.arch.layer_shapes().iter().enumerate() {
        let thr = step / beta[l];
        for i in s.range() {
            let c = obj.prior_mean.map_or(T::zero(), |m| m[i]);
            let d = v[i] - c;
            v[i] = c + if d > thr {
                d - thr
            } else if d < -thr {
                d + thr
            } else {
                T::zero()
            };
        }
    }
    mask_in_place(v, obj.mask);
}

fn proximal<T: Real>(
    obj: &Objective<'_, T>,
    beta: &[T],
    x: &mut Vec<T>,
    opt: &OptConfig,
) -> Result<TrainReport> {
    let total = |v: &[T], misfit: T| misfit + obj.prior_energy(v);
    let (f0, _) = obj.misfit_and_grad(x);
    let mut fx = total(x, f0);
    if !fx.finite() {
        return Err(diverged(0, "loss at the initial point"));
    }
    let mut history = vec![fx.to_f64_lossy()];
    let mut y = x.clone();
    let mut t = T::one();
    let mut lip = T::one();
    let mut converged = false;
    let mut gmap = f64::INFINITY;
    let mut it = 0;
    while it < opt.max_iters {
        it += 1;
        let (fy, gy) = obj.misfit_and_grad(&y);
        if !fy.finite() || !all_finite(&gy) {
            return Err(diverged(it, "gradient"));
        }
        let mut z;
        let mut fz;
        let mut tries = 0;
        loop {
            z = y.iter().zip(&gy).map(|(a, b)| *a - *b / lip).collect::<Vec<T>>();
            prox(obj, &mut z, beta, T::one() / lip);
            fz = obj.sum_sq_residuals(&z) * T::lit(0.5) / (obj.sigma.sigma_noise * obj.sigma.sigma_noise);
            let diff: Vec<T> = z.iter().zip(&y).map(|(a, b)| *a - *b).collect();
            let bound = fy + dot(&gy, &diff) + lip * T::lit(0.5) * norm_sq(&diff);
            tries += 1;
            if fz.finite() && fz <= bound + T::lit(1e-12) * fy.abs() {
                break;
            }
            lip *= T::lit(2.0);
            if tries > 80 {
                return Err(diverged(it, "step while backtracking"));
            }
        }
        let diff: Vec<T> = z.iter().zip(&y).map(|(a, b)| *a - *b).collect();
        gmap = (lip * norm_sq(&diff).sqrt()).to_f64_lossy() / norm_sq(&z).to_f64_lossy().sqrt().max(1.0);
        let fz_total = total(&z, fz);
        let momentum = y.iter().zip(x.iter()).any(|(a, b)| a != b);
        if fz_total > fx && momentum {
            // restart without momentum
            y = x.clone();
            t = T::one();
            continue;
        }
        let t_next = (T::one() + (T::one() + T::lit(4.0) * t * t).sqrt()) * T::lit(0.5);
        let w = (t - T::one()) / t_next;
        let x_old = std::mem::replace(x, z);
        y = x.iter().zip(&x_old).map(|(a, b)| *a + w * (*a - *b)).collect();
        mask_in_place(&mut y, obj.mask);
        t = t_next;
        if fz_total <= fx {
            fx = fz_total;
        }
        history.push(fx.to_f64_lossy());
        lip *= T::lit(0.9);
        if gmap <= opt.tolerance {
            converged = true;
            break;
        }
    }
    Ok(TrainReport {
        iterations: it,
        converged,
        grad_norm: gmap,
        loss: fx.to_f64_lossy(),
        history,
    })
}
