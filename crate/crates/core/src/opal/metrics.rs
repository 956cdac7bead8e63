//! Distances between sample distributions of a validation observable.

use serde::{Deserialize, Serialize};

use crate::error::{OpalError, Result};

/// Grid used to discretize kernel density estimates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdeGrid {
    pub points: usize,
    /// Padding beyond the pooled range, in pooled standard deviations.
    pub pad_sd: f64,
    /// Minimum probability mass per grid cell, keeping logarithms finite.
    pub mass_floor: f64,
}

impl Default for KdeGrid {
    fn default() -> Self {
        Self {
            points: 512,
            pad_sd: 3.0,
            mass_floor: 1e-300,
        }
    }
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v.sqrt())
}

/// Scott's rule bandwidth `sd * n^(-1/5)`, falling back to a small fraction
/// of the grid span for constant samples.
fn bandwidth(x: &[f64], span: f64) -> f64 {
    let (_, sd) = mean_sd(x);
    let h = sd * (x.len() as f64).powf(-0.2);
    if h > 0.0 && h.is_finite() {
        h
    } else {
        (span * 1e-3).max(f64::MIN_POSITIVE)
    }
}

/// Normalized cell masses of a Gaussian KDE evaluated on `grid`.
fn kde_masses(x: &[f64], grid: &[f64], h: f64, floor: f64) -> Vec<f64> {
    let inv = 1.0 / h;
    let mut dens: Vec<f64> = grid
        .iter()
        .map(|&g| {
            x.iter()
                .map(|&xi| {
                    let z = (g - xi) * inv;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
        })
        .collect();
    let total: f64 = dens.iter().sum();
    for d in dens.iter_mut() {
        *d = (*d / total).max(floor);
    }
    let total: f64 = dens.iter().sum();
    dens.iter_mut().for_each(|d| *d /= total);
    dens
}

fn pooled_grid(a: &[f64], b: &[f64], cfg: &KdeGrid) -> Vec<f64> {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (_, sd) = mean_sd(&pooled);
    let lo = pooled.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = pooled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = if sd > 0.0 { cfg.pad_sd * sd } else { 1.0f64.max(lo.abs() * 1e-6) };
    let (lo, hi) = (lo - pad, hi + pad);
    let n = cfg.points;
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Discrete `D_KL(data || model)` and Shannon entropy of the data, in nats,
/// from KDE masses on a shared grid.
pub fn kl_and_entropy(data: &[f64], model: &[f64], cfg: &KdeGrid) -> Result<(f64, f64)> {
    if data.len() < 30 || model.len() < 30 {
        return Err(OpalError::Argument("density metrics need at least 30 samples per set".into()));
    }
    if cfg.points < 2 {
        return Err(OpalError::Config("KDE grid needs at least two points".into()));
    }
    if data.iter().chain(model).any(|v| !v.is_finite()) {
        return Err(OpalError::Numerical("non-finite observable sample".into()));
    }
    let grid = pooled_grid(data, model, cfg);
    let span = grid[grid.len() - 1] - grid[0];
    let p = kde_masses(data, &grid, bandwidth(data, span), cfg.mass_floor);
    let q = kde_masses(model, &grid, bandwidth(model, span), cfg.mass_floor);
    let kl: f64 = p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum();
    let h: f64 = -p.iter().map(|pi| pi * pi.ln()).sum::<f64>();
    Ok((kl.max(0.0), h))
}

/// `D_KL(pi(Z_D) || pi(Z_M)) / H(pi(Z_D))`.
pub fn metric_dkl(samples_data: &[f64], samples_model: &[f64], grid: &KdeGrid) -> Result<f64> {
    let (kl, h) = kl_and_entropy(samples_data, samples_model, grid)?;
    let (_, sd) = mean_sd(samples_data);
    if !(h > 1e-12) || sd == 0.0 {
        return Err(OpalError::MetricUndefined("data distribution has zero entropy".into()));
    }
    Ok(kl / h)
}

/// `integral |F_D(z) - F_M(z)| dz` between empirical CDFs, i.e. the
/// 1-Wasserstein distance, in the units of `z`.
pub fn metric_cdf(samples_data: &[f64], samples_model: &[f64]) -> Result<f64> {
    if samples_data.len() < 2 || samples_model.len() < 2 {
        return Err(OpalError::Argument("CDF distance needs at least two samples per set".into()));
    }
    if samples_data.iter().chain(samples_model).any(|v| !v.is_finite()) {
        return Err(OpalError::Numerical("non-finite observable sample".into()));
    }
    let mut a = samples_data.to_vec();
    let mut b = samples_model.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut area = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        let fa = i as f64 / na;
        let fb = j as f64 / nb;
        area += (fa - fb).abs() * (next - prev);
        while i < a.len() && a[i] <= next {
            i += 1;
        }
        while j < b.len() && b[j] <= next {
            j += 1;
        }
        prev = next;
    }
    Ok(area)
}
