//! Acceptance suite. Each criterion prints one PASS/FAIL line with its
//! runtime; the process exits non-zero if any criterion fails.
//!
//! Run a subset by passing criterion numbers:
//! `cargo test -p opal-surrogate --test acceptance -- 3 9`.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use opal_surrogate::data::{
    generate_synthetic, standardize, Dataset, EnergyLikeConfig, LeaveOutSlice, PlantedSparseConfig, SyntheticTask,
    TeacherConfig,
};
use opal_surrogate::evidence::{fit_hierarchical, log_evidence_sigma, EvidenceConfig};
use opal_surrogate::laplace::{
    build_posterior, compute_kfac, layer_covariance, log_det_and_trace, train_map_with, InferenceHyperParams, PriorKind,
    OptConfig, TrainSetup,
};
use opal_surrogate::network::{
    forward, forward_trace, grad_neg_log_posterior, jacobian, Activation, ActivationKind, Architecture, Objective,
    Parameters, SparsityMask,
};
use opal_surrogate::opal::{
    build_initial_set, kl_and_entropy, metric_cdf, metric_dkl, run_opal, select_activation, FitConfig, KdeGrid,
    OpalConfig, OpalOutcome, ProbeConfig, Verdict,
};
use opal_surrogate::sparsify::{sweep_threshold, SparsifyConfig};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn tight_opt() -> OptConfig {
    OptConfig {
        max_iters: 20_000,
        tolerance: 1e-12,
        // roundoff-level stall: the gradient bound itself may be unreachable
        f_tolerance: 1e-14,
        ..OptConfig::default()
    }
}

fn rel_fro(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Rows of `x` with a trailing 1 for the bias.
fn augmented(x: &[Vec<f64>]) -> DMatrix<f64> {
    let d = x[0].len();
    DMatrix::from_fn(x.len(), d + 1, |i, j| if j < d { x[i][j] } else { 1.0 })
}

fn gaussian_logpdf_zero_mean(y: &DVector<f64>, cov: DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let chol = cov.cholesky().expect("covariance is positive definite");
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let alpha = chol.solve(y);
    -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

// ---------------------------------------------------------------------------
// 1. Conjugate exactness

fn conjugate_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (d_in, n) = (4, 150);
    let w: Vec<f64> = (0..d_in).map(|_| normal(&mut rng)).collect();
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d_in).map(|_| uniform(&mut rng, -1.0, 1.0)).collect()).collect();
    let y: Vec<Vec<f64>> = x
        .iter()
        .map(|r| vec![r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.4 + 0.3 * normal(&mut rng)])
        .collect();
    let data = Dataset::from_rows(&x, &y).map_err(err)?;
    let arch = Architecture::linear(d_in, 1);
    let xa = augmented(&x);
    let yv = DVector::from_iterator(n, y.iter().map(|r| r[0]));
    let xtx = xa.transpose() * &xa;
    let xty = xa.transpose() * &yv;
    let (mut worst_mean, mut worst_cov, mut worst_evid) = (0.0f64, 0.0f64, 0.0f64);
    for &sp in &[0.1, 0.3, 1.0, 3.0, 10.0] {
        for &sn in &[0.05, 0.1, 0.3, 1.0, 3.0] {
            let sigma = InferenceHyperParams::new(vec![sp], sn).map_err(err)?;
            let (theta, _) = train_map_with(
                &arch,
                &data,
                &sigma,
                &PriorKind::Gaussian,
                None,
                &tight_opt(),
                TrainSetup::default(),
            )
            .map_err(err)?;
            let post = build_posterior(&arch, theta, &data, &sigma, None, None).map_err(err)?;
            let prec = &xtx / (sn * sn) + DMatrix::identity(d_in + 1, d_in + 1) / (sp * sp);
            let cov = prec.clone().try_inverse().ok_or("singular precision")?;
            let mean = &cov * &xty / (sn * sn);
            let got = DVector::from_column_slice(post.theta_map.as_slice());
            worst_mean = worst_mean.max((&got - &mean).norm() / mean.norm());
            let lc = layer_covariance(&post, 0).map_err(err)?;
            worst_cov = worst_cov.max(rel_fro(&lc, &cov));
            let ev = log_evidence_sigma(&post, &data).map_err(err)?;
            let marg_cov = &xa * xa.transpose() * (sp * sp) + DMatrix::identity(n, n) * (sn * sn);
            let exact = gaussian_logpdf_zero_mean(&yv, marg_cov);
            worst_evid = worst_evid.max((ev - exact).abs());
        }
    }
    ensure(worst_mean <= 1e-6, || format!("posterior mean relative error {worst_mean:.3e}"))?;
    ensure(worst_cov <= 1e-6, || format!("posterior covariance relative error {worst_cov:.3e}"))?;
    ensure(worst_evid <= 1e-6, || format!("log-evidence error {worst_evid:.3e}"))?;
    Ok(format!(
        "25 grid points; worst errors: mean {worst_mean:.1e}, covariance {worst_cov:.1e}, evidence {worst_evid:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 2. KFAC exactness for one datum

fn kfac_single_datum() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for inst in 0..20 {
        let d_in = rng.random_range(1..=5);
        let d_out = rng.random_range(1..=4);
        let arch = if inst % 3 == 2 {
            Architecture::linear(d_in, d_out).without_bias()
        } else {
            Architecture::linear(d_in, d_out)
        };
        let theta: Vec<f64> = (0..arch.param_count()).map(|_| normal(&mut rng)).collect();
        let params = Parameters::from_flat(&arch, theta).map_err(err)?;
        let x: Vec<f64> = (0..d_in).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let u: Vec<f64> = (0..d_out).map(|_| normal(&mut rng)).collect();
        let data = Dataset::from_rows(&[x.clone()], &[u]).map_err(err)?;
        let sn = uniform(&mut rng, 0.1, 2.0);
        let sigma = InferenceHyperParams::new(vec![1.0], sn).map_err(err)?;
        let f = compute_kfac(&arch, &params, &data, &sigma).map_err(err)?;
        let kron = f.layers[0].r.kronecker(&f.layers[0].q);
        let j = jacobian(&arch, &params, &x).map_err(err)?;
        let ggn = j.transpose() * &j / (sn * sn);
        worst = worst.max(rel_fro(&kron, &ggn));
    }
    ensure(worst <= 1e-8, || format!("relative Frobenius error {worst:.3e}"))?;
    Ok(format!("20 instances; worst relative Frobenius error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 3. Dense-oracle agreement

fn random_arch(rng: &mut ChaCha8Rng, max_params: usize, kinds: &[ActivationKind]) -> Architecture {
    loop {
        let d_in = rng.random_range(1..=4);
        let d_out = rng.random_range(1..=3);
        let depth = rng.random_range(1..=2);
        let widths: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=7)).collect();
        let acts: Vec<Activation> = (0..depth)
            .map(|_| Activation::new(kinds[rng.random_range(0..kinds.len())]))
            .collect();
        let arch = Architecture::new(d_in, d_out, widths, acts).expect("valid architecture");
        if arch.param_count() <= max_params {
            return arch;
        }
    }
}

fn random_data(rng: &mut ChaCha8Rng, arch: &Architecture, n: usize) -> Dataset<f64> {
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..arch.input_dim).map(|_| uniform(rng, -1.5, 1.5)).collect())
        .collect();
    let y: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..arch.output_dim).map(|_| normal(rng)).collect())
        .collect();
    Dataset::from_rows(&x, &y).expect("consistent rows")
}

/// `Q` and `R` of one layer assembled from per-datum activations and the
/// bias columns of the network Jacobian.
fn oracle_factors(
    arch: &Architecture,
    params: &Parameters<f64>,
    data: &Dataset<f64>,
    sn: f64,
    layer: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let s = arch.layer_shapes()[layer];
    let mut q = DMatrix::zeros(s.cols, s.cols);
    let mut r = DMatrix::zeros(s.rows, s.rows);
    for i in 0..data.len() {
        let tr = forward_trace(arch, params, data.input(i)).expect("forward");
        let mut z = tr.post[layer].clone();
        z.push(1.0);
        let z = DVector::from_vec(z);
        q += &z * z.transpose();
        let j = jacobian(arch, params, data.input(i)).expect("jacobian");
        for k in 0..arch.output_dim {
            let g = DVector::from_fn(s.rows, |a, _| j[(k, s.offset + a * s.cols + s.inputs)]);
            r += &g * g.transpose() / (sn * sn);
        }
    }
    (q / data.len() as f64, r)
}

fn dense_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst_ld, mut worst_tr, mut worst_cov) = (0.0f64, 0.0f64, 0.0f64);
    let mut masked_layers = 0;
    for inst in 0..12 {
        let arch = random_arch(&mut rng, 200, &ActivationKind::HIDDEN);
        let data = random_data(&mut rng, &arch, 30);
        let mut theta: Vec<f64> = (0..arch.param_count()).map(|_| 0.7 * normal(&mut rng)).collect();
        let layers = arch.num_layers();
        let sp: Vec<f64> = (0..layers).map(|_| uniform(&mut rng, 0.3, 3.0)).collect();
        let sn = uniform(&mut rng, 0.1, 1.0);
        let sigma = InferenceHyperParams::new(sp.clone(), sn).map_err(err)?;
        let mask = if inst % 2 == 1 {
            let keep: Vec<bool> = (0..arch.param_count()).map(|_| rng.random_bool(0.7)).collect();
            let m = SparsityMask::from_flags(&arch, keep).map_err(err)?;
            if (0..layers).any(|l| m.layer_retained(l) == 0) {
                None
            } else {
                Some(m)
            }
        } else {
            None
        };
        if let Some(m) = &mask {
            for (t, &k) in theta.iter_mut().zip(m.flags()) {
                if !k {
                    *t = 0.0;
                }
            }
        }
        let params = Parameters::from_flat(&arch, theta).map_err(err)?;
        let post = build_posterior(&arch, params.clone(), &data, &sigma, mask.as_ref(), None).map_err(err)?;
        let (mut ld, mut tr) = (0.0, 0.0);
        for (l, s) in arch.layer_shapes().iter().enumerate() {
            let (q, r) = oracle_factors(&arch, &params, &data, sn, l);
            let h_full = r.kronecker(&q) + DMatrix::identity(s.len(), s.len()) / (sp[l] * sp[l]);
            let kept: Vec<usize> = match &mask {
                Some(m) => (0..s.len()).filter(|&i| m.layer(l)[i]).collect(),
                None => (0..s.len()).collect(),
            };
            if kept.len() < s.len() {
                masked_layers += 1;
            }
            let h = DMatrix::from_fn(kept.len(), kept.len(), |a, b| h_full[(kept[a], kept[b])]);
            let eig = SymmetricEigen::new(h.clone());
            ld += eig.eigenvalues.iter().map(|v| v.ln()).sum::<f64>();
            tr += eig.eigenvalues.iter().map(|v| 1.0 / v).sum::<f64>();
            let inv = h.try_inverse().ok_or("singular layer precision")?;
            let mut cov = DMatrix::zeros(s.len(), s.len());
            for (a, &ka) in kept.iter().enumerate() {
                for (b, &kb) in kept.iter().enumerate() {
                    cov[(ka, kb)] = inv[(a, b)];
                }
            }
            let got = layer_covariance(&post, l).map_err(err)?;
            worst_cov = worst_cov.max(rel_fro(&got, &cov));
        }
        let (got_ld, got_tr) = log_det_and_trace(&post);
        worst_ld = worst_ld.max((got_ld - ld).abs() / ld.abs().max(1.0));
        worst_tr = worst_tr.max((got_tr - tr).abs() / tr.abs());
    }
    ensure(masked_layers > 0, || "no masked layer was exercised".into())?;
    ensure(worst_ld <= 1e-8, || format!("log det relative error {worst_ld:.3e}"))?;
    ensure(worst_tr <= 1e-8, || format!("trace relative error {worst_tr:.3e}"))?;
    ensure(worst_cov <= 1e-8, || format!("layer covariance relative error {worst_cov:.3e}"))?;
    Ok(format!(
        "12 nets ({masked_layers} pruned layers); worst errors: log det {worst_ld:.1e}, trace {worst_tr:.1e}, covariance {worst_cov:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 4. Gradient fidelity

fn gradient_fidelity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst_g, mut worst_j) = (0.0f64, 0.0f64);
    let mut seen = [false; 4];
    for inst in 0..50 {
        // every instance contains the activation for its slot, plus random others
        let kind = ActivationKind::HIDDEN[inst % 4];
        seen[inst % 4] = true;
        let mut arch = random_arch(&mut rng, 120, &ActivationKind::HIDDEN);
        arch.activations[0] = Activation::new(kind);
        let data = random_data(&mut rng, &arch, 8);
        let theta: Vec<f64> = (0..arch.param_count()).map(|_| 0.8 * normal(&mut rng)).collect();
        let layers = arch.num_layers();
        let sp: Vec<f64> = (0..layers).map(|_| uniform(&mut rng, 0.5, 2.0)).collect();
        let sigma = InferenceHyperParams::new(sp, uniform(&mut rng, 0.2, 1.0)).map_err(err)?;
        let params = Parameters::from_flat(&arch, theta.clone()).map_err(err)?;
        let g = grad_neg_log_posterior(&arch, &params, &data, &sigma, &PriorKind::Gaussian, None).map_err(err)?;
        let obj = Objective {
            arch: &arch,
            data: &data,
            sigma: &sigma,
            prior: &PriorKind::Gaussian,
            prior_mean: None,
            mask: None,
        };
        let x0 = data.input(0).to_vec();
        let jac = jacobian(&arch, &params, &x0).map_err(err)?;
        let mut fd_g = vec![0.0; theta.len()];
        let mut fd_j = DMatrix::zeros(arch.output_dim, theta.len());
        for k in 0..theta.len() {
            let h = 1e-6 * theta[k].abs().max(1.0);
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[k] += h;
            b[k] -= h;
            fd_g[k] = (obj.value(&a) - obj.value(&b)) / (2.0 * h);
            let pa = Parameters::from_flat(&arch, a).map_err(err)?;
            let pb = Parameters::from_flat(&arch, b).map_err(err)?;
            let ua = forward(&arch, &pa, &x0).map_err(err)?;
            let ub = forward(&arch, &pb, &x0).map_err(err)?;
            for o in 0..arch.output_dim {
                fd_j[(o, k)] = (ua[o] - ub[o]) / (2.0 * h);
            }
        }
        let diff: f64 = g.iter().zip(&fd_g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let gn: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_g = worst_g.max(diff / gn.max(f64::MIN_POSITIVE));
        worst_j = worst_j.max(rel_fro(&fd_j, &jac));
    }
    ensure(seen.iter().all(|&s| s), || "not every activation was covered".into())?;
    ensure(worst_g <= 1e-4, || format!("gradient relative error {worst_g:.3e}"))?;
    ensure(worst_j <= 1e-4, || format!("Jacobian relative error {worst_j:.3e}"))?;
    Ok(format!("50 instances; worst relative errors: gradient {worst_g:.1e}, Jacobian {worst_j:.1e}"))
}

// ---------------------------------------------------------------------------
// 5. Brute-force evidence

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Trapezoid nodes and log-weights on `[lo, hi]`.
fn trapezoid(lo: f64, hi: f64, n: usize) -> Vec<(f64, f64)> {
    let h = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let w = if i == 0 || i == n - 1 { 0.5 * h } else { h };
            (lo + h * i as f64, w.ln())
        })
        .collect()
}

/// `ln integral pi_like(D | theta, s_n) pi_pr(theta | s_p) dtheta` by a
/// tensor trapezoid grid in the principal axes of the integrand.
fn log_theta_integral(xtx: &DMatrix<f64>, xty: &DVector<f64>, yty: f64, n: usize, sp: f64, sn: f64, nodes: usize) -> f64 {
    let p = xtx.nrows();
    let two_pi = 2.0 * std::f64::consts::PI;
    let prec = xtx / (sn * sn) + DMatrix::identity(p, p) / (sp * sp);
    let centre = prec.clone().try_inverse().expect("positive definite") * xty / (sn * sn);
    let eig = SymmetricEigen::new(prec);
    let sds: Vec<f64> = eig.eigenvalues.iter().map(|v| 1.0 / v.sqrt()).collect();
    let axis = trapezoid(-8.0, 8.0, nodes);
    let log_jac: f64 = sds.iter().map(|s| s.ln()).sum();
    let norm = -0.5 * n as f64 * (two_pi * sn * sn).ln() - 0.5 * p as f64 * (two_pi * sp * sp).ln();
    let total = nodes.pow(p as u32);
    let mut terms = Vec::with_capacity(total);
    let mut idx = vec![0usize; p];
    for _ in 0..total {
        let mut theta = centre.clone();
        let mut lw = 0.0;
        for d in 0..p {
            let (t, w) = axis[idx[d]];
            lw += w;
            theta += eig.eigenvectors.column(d) * (t * sds[d]);
        }
        let rss = yty - 2.0 * theta.dot(xty) + (xtx * &theta).dot(&theta);
        terms.push(lw - 0.5 * rss / (sn * sn) - 0.5 * theta.norm_squared() / (sp * sp));
        for d in 0..p {
            idx[d] += 1;
            if idx[d] < nodes {
                break;
            }
            idx[d] = 0;
        }
    }
    log_sum_exp(&terms) + log_jac + norm
}

fn brute_force_evidence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut report = Vec::new();
    for (d_in, nodes) in [(1usize, 33usize), (2, 21)] {
        let n = 30;
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d_in).map(|_| uniform(&mut rng, -1.0, 1.0)).collect()).collect();
        let y: Vec<Vec<f64>> = x
            .iter()
            .map(|r| vec![1.5 * r[0] - 0.8 * r.get(1).copied().unwrap_or(0.0) + 0.8 + 0.2 * normal(&mut rng)])
            .collect();
        let data = Dataset::from_rows(&x, &y).map_err(err)?;
        let arch = Architecture::linear(d_in, 1);
        let cfg = EvidenceConfig {
            rel_tol: 1e-12,
            max_outer: 500,
            opt: tight_opt(),
            ..EvidenceConfig::default()
        };
        let init = InferenceHyperParams::new(vec![1.0], 0.5).map_err(err)?;
        let (_, rec) = fit_hierarchical(&arch, &data, &init, None, &cfg).map_err(err)?;
        let laplace = rec.log_evid_model;

        let xa = augmented(&x);
        let yv = DVector::from_iterator(n, y.iter().map(|r| r[0]));
        let xtx = xa.transpose() * &xa;
        let xty = xa.transpose() * &yv;
        let yty = yv.norm_squared();
        let u0 = 2.0 * rec.sigma_map.sigma_pr[0].ln();
        let v0 = 2.0 * rec.sigma_map.sigma_noise.ln();
        let [lo, hi] = cfg.log_sigma2_box;
        let half_u = 12.0 * rec.var_ln_sigma_pr2.sqrt();
        let half_v = 12.0 * rec.var_ln_sigma_noise2.sqrt();
        let us = trapezoid((u0 - half_u).max(lo), (u0 + half_u).min(hi), 121);
        let vs = trapezoid((v0 - half_v).max(lo), (v0 + half_v).min(hi), 121);
        let log_hyper_density = -2.0 * (hi - lo).ln();
        let mut terms = Vec::with_capacity(us.len() * vs.len());
        for &(u, wu) in &us {
            for &(v, wv) in &vs {
                let inner = log_theta_integral(&xtx, &xty, yty, n, (0.5 * u).exp(), (0.5 * v).exp(), nodes);
                terms.push(wu + wv + inner);
            }
        }
        let brute = log_sum_exp(&terms) + log_hyper_density;
        let gap = (laplace - brute).abs();
        ensure(gap <= 0.5, || format!("P = {}: Laplace {laplace:.4} vs quadrature {brute:.4}", d_in + 1))?;
        report.push(format!("P={}: |diff| {gap:.3} nats", d_in + 1));
    }
    Ok(report.join(", "))
}

// ---------------------------------------------------------------------------
// 6. Hyperparameter recovery

fn hyperparameter_recovery() -> Check {
    let mut report = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let n = 200;
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, -1.0, 1.0)]).collect();
        let y: Vec<Vec<f64>> = x
            .iter()
            .map(|r| vec![1.2 * r[0] - 0.7 * r[1] + 0.3 + 0.1 * normal(&mut rng)])
            .collect();
        let data = Dataset::from_rows(&x, &y).map_err(err)?;
        for arch in [
            Architecture::linear(2, 1),
            Architecture::single_hidden(2, 1, 4, Activation::tanh()),
        ] {
            let init = InferenceHyperParams::uniform(arch.num_layers(), 1.0, 0.5).map_err(err)?;
            let (_, rec) = fit_hierarchical(&arch, &data, &init, None, &EvidenceConfig::default()).map_err(err)?;
            let s = rec.sigma_map.sigma_noise;
            ensure((0.08..=0.12).contains(&s), || format!("seed {seed}: sigma_noise {s:.4}"))?;
            ensure(rec.var_ln_sigma_pr2 > 0.0 && rec.var_ln_sigma_noise2 > 0.0, || {
                format!("seed {seed}: non-positive hyperparameter variances")
            })?;
            let worst_drop = rec
                .history
                .windows(2)
                .map(|w| w[0] - w[1])
                .fold(f64::NEG_INFINITY, f64::max);
            ensure(worst_drop <= 1e-9, || format!("seed {seed}: evidence dropped by {worst_drop:.3e}"))?;
            report.push(format!("{s:.4}"));
        }
    }
    Ok(format!("sigma_noise estimates {}", report.join(", ")))
}

// ---------------------------------------------------------------------------
// 7. Evidence against width

fn evidence_vs_width() -> Check {
    let task = SyntheticTask::EnergyLike(EnergyLikeConfig {
        realizations: 3,
        size_effect_amplitude: 0.1,
        size_effect_period: 20.0,
        ..EnergyLikeConfig::default()
    });
    let data = generate_synthetic(&task, 1).map_err(err)?;
    let (std_data, _) = standardize(&data).map_err(err)?;
    let probe = ProbeConfig {
        widths: vec![2, 4, 6, 8, 12, 16, 20],
        activations: vec![Activation::tanh()],
        seeds: 1,
    };
    let res = build_initial_set(&std_data, &probe, &FitConfig::default(), 7).map_err(err)?;
    let curve: Vec<(usize, f64)> = res.mean_by_width.iter().map(|m| (m.width, m.mean)).collect();
    let at = |w: usize| curve.iter().find(|c| c.0 == w).map(|c| c.1).unwrap_or(f64::NEG_INFINITY);
    let (peak_w, peak) = curve
        .iter()
        .copied()
        .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
    let w_max = *probe.widths.iter().max().expect("widths");
    let tenth = w_max / 10;
    let shown: Vec<String> = curve.iter().map(|(w, e)| format!("{w}:{e:.1}")).collect();
    ensure(peak_w != tenth && peak_w != w_max, || format!("peak at the boundary: {}", shown.join(" ")))?;
    ensure(peak - at(tenth) >= 2.0 && peak - at(w_max) >= 2.0, || {
        format!("margins below 2 nats: {}", shown.join(" "))
    })?;
    Ok(format!(
        "peak W={peak_w}; margins {:.1} (W={tenth}) and {:.1} (W={w_max}) nats",
        peak - at(tenth),
        peak - at(w_max)
    ))
}

// ---------------------------------------------------------------------------
// 8. Sparsification

fn sparsification() -> Check {
    let planted = PlantedSparseConfig::default();
    let arch = Architecture::linear(planted.n_inputs, 1);
    let mut report = Vec::new();
    for seed in 0..5u64 {
        let data = generate_synthetic(&SyntheticTask::PlantedSparse(planted.clone()), seed).map_err(err)?;
        let init = InferenceHyperParams::uniform(1, 1.0, 0.5).map_err(err)?;
        let cfg = SparsifyConfig::default();
        let out = sweep_threshold(&arch, &data, &init, &cfg, &EvidenceConfig::default()).map_err(err)?;
        let e: Vec<f64> = out.trace.entries.iter().map(|x| x.log_evid_model).collect();
        let k = out.trace.selected_index().ok_or("no selected threshold")?;
        ensure(e[k] >= e[0] - cfg.tie_tol, || format!("seed {seed}: selected evidence below threshold 0"))?;
        ensure(k > 0 && e[k] > e[0], || format!("seed {seed}: evidence never rises: {e:?}"))?;
        ensure(e[k + 1..].iter().any(|&v| v < e[k]), || format!("seed {seed}: evidence never declines: {e:?}"))?;
        let flags = out.mask.layer(0);
        let spurious: Vec<usize> = (0..planted.n_inputs).filter(|i| !planted.active.contains(i)).collect();
        let removed = spurious.iter().filter(|&&i| !flags[i]).count() as f64 / spurious.len() as f64;
        ensure(planted.active.iter().all(|&i| flags[i]), || format!("seed {seed}: a planted input was pruned"))?;
        ensure(removed >= 0.8, || format!("seed {seed}: only {:.0}% of spurious inputs removed", 100.0 * removed))?;
        report.push(format!("{:.0}%", 100.0 * removed));
    }
    Ok(format!("spurious inputs removed per seed: {}", report.join(", ")))
}

// ---------------------------------------------------------------------------
// 9. Metric axioms

fn metric_axioms() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let n = 10_000;
    let a: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let grid = KdeGrid::default();
    let self_dkl = metric_dkl(&a, &a, &grid).map_err(err)?;
    let self_cdf = metric_cdf(&a, &a).map_err(err)?;
    ensure(self_dkl <= 5e-3, || format!("d_DKL(self) = {self_dkl:.3e}"))?;
    ensure(self_cdf == 0.0, || format!("d_CDF(self) = {self_cdf:.3e}"))?;
    let mut report = vec![format!("self d_DKL {self_dkl:.1e}")];
    // one draw of 10^4 samples scatters by about 6% in KL, so each estimator
    // is judged by its mean over independent replicate pairs
    const REPLICATES: usize = 10;
    for delta in [0.5, 1.0] {
        let (mut kl_sum, mut w_sum) = (0.0, 0.0);
        for _ in 0..REPLICATES {
            let a: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
            let b: Vec<f64> = (0..n).map(|_| delta + normal(&mut rng)).collect();
            kl_sum += kl_and_entropy(&a, &b, &grid).map_err(err)?.0;
            w_sum += metric_cdf(&a, &b).map_err(err)?;
        }
        let (kl, w) = (kl_sum / REPLICATES as f64, w_sum / REPLICATES as f64);
        let kl_rel = (kl - 0.5 * delta * delta).abs() / (0.5 * delta * delta);
        let w_rel = (w - delta).abs() / delta;
        ensure(kl_rel <= 0.10, || format!("shift {delta}: KL {kl:.4} vs {:.4}", 0.5 * delta * delta))?;
        ensure(w_rel <= 0.05, || format!("shift {delta}: Wasserstein {w:.4} vs {delta}"))?;
        report.push(format!("shift {delta}: KL off {:.1}%, W1 off {:.1}%", 100.0 * kl_rel, 100.0 * w_rel));
    }
    Ok(report.join("; "))
}

// ---------------------------------------------------------------------------
// 10. End-to-end discovery

fn end_to_end_config() -> OpalConfig {
    let slices: Vec<LeaveOutSlice> = [-0.6, 0.2, 0.8]
        .iter()
        .map(|&v| LeaveOutSlice::Value {
            coord: 1,
            value: v,
            tol: 1e-9,
        })
        .collect();
    serde_json::from_value(serde_json::json!({
        "width_cap": 3,
        "depth_per_category": 1,
        "n_categories": 3,
        "validation": {
            "tol_dkl": 0.25,
            "tol_cdf": 0.03,
            "slices": slices,
            "n_posterior_samples": 300,
            "observable": {
                "integrate_over": [{"coord": 0, "low": -1.0, "high": 1.0, "nodes": 41}],
                "path_noise": "Independent"
            }
        },
        "seed": 11
    }))
    .expect("valid configuration")
}

fn end_to_end() -> Check {
    use ActivationKind::*;
    let d1 = [
        (Activation::new(ReLU), -15732.0),
        (Activation::new(LeakyReLU), -15045.0),
        (Activation::new(Sigmoid), -15317.0),
        (Activation::new(Tanh), -14846.0),
    ];
    let d3 = [
        (Activation::new(ReLU), -15835.0),
        (Activation::new(LeakyReLU), -14834.0),
        (Activation::new(Sigmoid), -15427.0),
        (Activation::new(Tanh), -15340.0),
    ];
    ensure(select_activation(&d1).map_err(err)?.kind == Tanh, || "D=1 row did not select Tanh".into())?;
    ensure(select_activation(&d3).map_err(err)?.kind == LeakyReLU, || {
        "D=3 row did not select LeakyReLU".into()
    })?;

    // a narrow two-hidden-layer teacher that one hidden layer of the same width cannot match
    let task = SyntheticTask::Custom(TeacherConfig {
        hidden_widths: vec![3, 3],
        activations: vec![Activation::tanh(); 2],
        input_ranges: vec![[-1.0, 1.0], [-1.0, 1.0]],
        grid_points: 11,
        realizations: 10,
        weight_scale: 2.0,
        noise: 0.02,
        teacher_seed: 3,
    });
    let data = generate_synthetic(&task, 5).map_err(err)?;
    let cfg = end_to_end_config();
    let first = run_opal(&data, None, &cfg).map_err(err)?;
    let t = &first.trail;
    let verdicts: Vec<Option<Verdict>> = t.categories.iter().map(|c| c.verdict).collect();
    ensure(verdicts == vec![Some(Verdict::Invalid), Some(Verdict::NotInvalid)], || {
        format!("unexpected verdict trail {verdicts:?}")
    })?;
    ensure(t.outcome == OpalOutcome::NotInvalid && t.best_category == Some(2), || {
        format!("outcome {:?}, best category {:?}", t.outcome, t.best_category)
    })?;
    let best = first.best.as_ref().ok_or("no accepted model")?;
    ensure(best.record.arch.depth() == 2, || "accepted model is not depth 2".into())?;

    let second = run_opal(&data, None, &cfg).map_err(err)?;
    let same_trail = serde_json::to_string(&first.trail).map_err(err)? == serde_json::to_string(&second.trail).map_err(err)?;
    let same_model = second.best.as_ref().map(|m| m.to_json().ok()) == Some(best.to_json().ok());
    ensure(same_trail && same_model, || "rerun with the same seed differs".into())?;

    let worst = |c: usize| {
        let v = t.categories[c].validation.as_ref().expect("validated");
        v.slices
            .iter()
            .fold((0.0f64, 0.0f64), |(a, b), s| (a.max(s.d_dkl), b.max(s.d_cdf)))
    };
    let (d1k, d1c) = worst(0);
    let (d2k, d2c) = worst(1);
    Ok(format!(
        "activation argmax ok; trail Invalid -> NotInvalid, reproducible; worst (d_DKL, d_CDF): depth 1 ({d1k:.3}, {d1c:.4}), depth 2 ({d2k:.3}, {d2c:.4})"
    ))
}

// ---------------------------------------------------------------------------

struct Criterion {
    number: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { number: 1, name: "conjugate exactness", budget: Duration::from_secs(10), run: conjugate_exactness },
        Criterion { number: 2, name: "KFAC single-datum exactness", budget: Duration::from_secs(5), run: kfac_single_datum },
        Criterion { number: 3, name: "dense-oracle agreement", budget: Duration::from_secs(30), run: dense_oracle },
        Criterion { number: 4, name: "gradient fidelity", budget: Duration::from_secs(30), run: gradient_fidelity },
        Criterion { number: 5, name: "brute-force evidence", budget: Duration::from_secs(120), run: brute_force_evidence },
        Criterion { number: 6, name: "hyperparameter recovery", budget: Duration::from_secs(20), run: hyperparameter_recovery },
        Criterion { number: 7, name: "evidence-vs-width trend", budget: Duration::from_secs(300), run: evidence_vs_width },
        Criterion { number: 8, name: "sparsification behavior", budget: Duration::from_secs(300), run: sparsification },
        Criterion { number: 9, name: "metric axioms", budget: Duration::from_secs(10), run: metric_axioms },
        Criterion { number: 10, name: "end-to-end discovery", budget: Duration::from_secs(600), run: end_to_end },
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.number)) {
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(d) if elapsed > c.budget => Err(format!("over the {:?} budget; {d}", c.budget)),
            r => r,
        };
        let secs = elapsed.as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} {}: PASS ({secs:.1}s) {detail}", c.number, c.name),
            Err(detail) => {
                failures += 1;
                println!("criterion {:>2} {}: FAIL ({secs:.1}s) {detail}", c.number, c.name);
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
