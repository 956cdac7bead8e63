//! Validation observables: integrals of the response over part of the input
//! space at a held-out coordinate, sampled under the data and the model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LeaveOutSlice};
use crate::error::{OpalError, Result};
use crate::laplace::LaplacePosterior;
use crate::network::trace_unchecked;

use super::Surrogate;

fn default_nodes() -> usize {
    101
}

/// One integrated input coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationAxis {
    pub coord: usize,
    pub low: f64,
    pub high: f64,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
}

/// An input coordinate held at a constant value during integration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedCoordinate {
    pub coord: usize,
    pub value: f64,
}

/// How observation noise enters a model sample of the observable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathNoise {
    /// One noise draw per sample path, constant along the path.
    #[default]
    Shared,
    /// Independent noise at every held-out data site, carried through the
    /// same interpolant as the data.
    Independent,
    /// Parameter uncertainty only.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableSpec {
    pub integrate_over: Vec<IntegrationAxis>,
    /// Values for coordinates that are neither integrated nor fixed by the
    /// leave-out slice.
    #[serde(default)]
    pub fixed_at: Vec<FixedCoordinate>,
    #[serde(default)]
    pub output: usize,
    #[serde(default)]
    pub path_noise: PathNoise,
}

/// Tensor-product trapezoid nodes in physical input coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub volume: f64,
    pub output: usize,
    /// Integrated coordinates, in axis order.
    pub axes: Vec<usize>,
}

impl ObservableSpec {
    pub fn validate(&self, input_dim: usize, output_dim: usize) -> Result<()> {
        if self.integrate_over.is_empty() {
            return Err(OpalError::Config("observable integrates over no coordinate".into()));
        }
        if self.output >= output_dim {
            return Err(OpalError::Config(format!("observable output {} out of range", self.output)));
        }
        let mut seen = vec![false; input_dim];
        for a in &self.integrate_over {
            if a.coord >= input_dim {
                return Err(OpalError::Config(format!("integration coordinate {} out of range", a.coord)));
            }
            if std::mem::replace(&mut seen[a.coord], true) {
                return Err(OpalError::Config(format!("coordinate {} integrated twice", a.coord)));
            }
            if !(a.low.is_finite() && a.high.is_finite() && a.low < a.high) {
                return Err(OpalError::Config(format!(
                    "integration bounds [{}, {}] must be finite with low < high",
                    a.low, a.high
                )));
            }
            if a.nodes < 2 {
                return Err(OpalError::Config("quadrature needs at least two nodes".into()));
            }
        }
        for f in &self.fixed_at {
            if f.coord >= input_dim || seen[f.coord] {
                return Err(OpalError::Config(format!("fixed coordinate {} is invalid or integrated", f.coord)));
            }
            if !f.value.is_finite() {
                return Err(OpalError::Config("fixed coordinate value must be finite".into()));
            }
        }
        Ok(())
    }

    /// Product of the integration interval lengths.
    pub fn volume(&self) -> f64 {
        self.integrate_over.iter().map(|a| a.high - a.low).product()
    }

    /// Quadrature rule at the slice's held-out coordinate. Coordinates not
    /// integrated take their value from `fixed_at`, then from the slice
    /// (its value, or the midpoint of a range).
    pub fn rule(&self, slice: Option<&LeaveOutSlice>, input_dim: usize, output_dim: usize) -> Result<QuadratureRule> {
        self.validate(input_dim, output_dim)?;
        let mut base = vec![f64::NAN; input_dim];
        for f in &self.fixed_at {
            base[f.coord] = f.value;
        }
        if let Some(s) = slice {
            let from_slice = match s {
                LeaveOutSlice::Value { coord, value, .. } => Some((*coord, *value)),
                LeaveOutSlice::Range { coord, low, high } => Some((*coord, 0.5 * (low + high))),
                LeaveOutSlice::Rows { .. } => None,
            };
            if let Some((c, v)) = from_slice {
                if c < input_dim && base[c].is_nan() {
                    base[c] = v;
                }
            }
        }
        for a in &self.integrate_over {
            base[a.coord] = 0.0;
        }
        if let Some(c) = base.iter().position(|v| v.is_nan()) {
            return Err(OpalError::Config(format!(
                "input coordinate {c} is neither integrated nor fixed"
            )));
        }
        let axes: Vec<(Vec<f64>, Vec<f64>)> = self.integrate_over.iter().map(trapezoid).collect();
        let mut points = vec![base];
        let mut weights = vec![1.0];
        for (a, (nodes, w)) in self.integrate_over.iter().zip(&axes) {
            let mut np = Vec::with_capacity(points.len() * nodes.len());
            let mut nw = Vec::with_capacity(points.len() * nodes.len());
            for (p, pw) in points.iter().zip(&weights) {
                for (x, xw) in nodes.iter().zip(w) {
                    let mut q = p.clone();
                    q[a.coord] = *x;
                    np.push(q);
                    nw.push(pw * xw);
                }
            }
            points = np;
            weights = nw;
        }
        Ok(QuadratureRule {
            points,
            weights,
            volume: self.volume(),
            output: self.output,
            axes: self.integrate_over.iter().map(|a| a.coord).collect(),
        })
    }
}

fn trapezoid(a: &IntegrationAxis) -> (Vec<f64>, Vec<f64>) {
    let n = a.nodes;
    let h = (a.high - a.low) / (n - 1) as f64;
    let nodes = (0..n).map(|i| if i == n - 1 { a.high } else { a.low + h * i as f64 }).collect();
    let weights = (0..n).map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h }).collect();
    (nodes, weights)
}

/// A family of response functions indexed by sample (realization or
/// posterior draw), evaluated in physical units.
pub trait Predictor: Sync {
    fn n_samples(&self) -> usize;
    fn eval(&self, sample: usize, x: &[f64]) -> Result<f64>;
}

/// One quadrature value per predictor sample.
pub fn observable<P: Predictor>(predictor: &P, rule: &QuadratureRule) -> Result<Vec<f64>> {
    (0..predictor.n_samples())
        .into_par_iter()
        .map(|s| {
            rule.points
                .iter()
                .zip(&rule.weights)
                .try_fold(0.0, |acc, (x, w)| Ok(acc + w * predictor.eval(s, x)?))
        })
        .collect()
}

/// A closure-backed predictor, mainly for tests and custom integrands.
pub struct FnPredictor<F> {
    pub samples: usize,
    pub f: F,
}

impl<F: Fn(usize, &[f64]) -> f64 + Sync> Predictor for FnPredictor<F> {
    fn n_samples(&self) -> usize {
        self.samples
    }

    fn eval(&self, sample: usize, x: &[f64]) -> Result<f64> {
        Ok((self.f)(sample, x))
    }
}

/// Posterior parameter draws pushed through the network, in physical units.
pub struct PosteriorSamples<'a> {
    surrogate: &'a Surrogate,
    posterior: &'a LaplacePosterior<f64>,
    output: usize,
    thetas: Vec<Vec<f64>>,
}

impl<'a> PosteriorSamples<'a> {
    /// Draws `n` parameter vectors from `posterior`, which must live in the
    /// standardized space of `surrogate`.
    pub fn draw(
        surrogate: &'a Surrogate,
        posterior: &'a LaplacePosterior<f64>,
        output: usize,
        n: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let thetas = (0..n).map(|_| posterior.sample_parameters(&mut rng)).collect();
        Self {
            surrogate,
            posterior,
            output,
            thetas,
        }
    }
}

impl Predictor for PosteriorSamples<'_> {
    fn n_samples(&self) -> usize {
        self.thetas.len()
    }

    fn eval(&self, sample: usize, x: &[f64]) -> Result<f64> {
        let arch = &self.posterior.arch;
        let z = self.surrogate.standardizer.transform_input(x);
        let tr = trace_unchecked(arch, &arch.layer_shapes(), &self.thetas[sample], &z);
        Ok(self.surrogate.standardizer.inverse_output(tr.output())[self.output])
    }
}

/// Factor mapping a pointwise noise level to the standard deviation of its
/// integral under the given noise model.
pub fn noise_scale(mode: PathNoise, rule: &QuadratureRule) -> f64 {
    match mode {
        PathNoise::Shared => rule.volume,
        PathNoise::Independent => rule.weights.iter().map(|w| w * w).sum::<f64>().sqrt(),
        PathNoise::Off => 0.0,
    }
}

/// Samples of `Z_M`: quadrature over posterior draws plus Gaussian noise
/// with standard deviation `sigma_noise * noise_gain` (physical units).
/// `noise_gain` maps a pointwise noise level to the spread of its integral;
/// see [`noise_scale`] and [`DataInterpolant::noise_gain`].
pub fn model_observable(
    surrogate: &Surrogate,
    posterior: &LaplacePosterior<f64>,
    rule: &QuadratureRule,
    noise_gain: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(OpalError::Config("posterior sample count must be positive".into()));
    }
    if !(noise_gain >= 0.0 && noise_gain.is_finite()) {
        return Err(OpalError::Numerical("invalid noise gain".into()));
    }
    let draws = PosteriorSamples::draw(surrogate, posterior, rule.output, n, seed);
    let mut z = observable(&draws, rule)?;
    let sd = posterior.sigma.sigma_noise * surrogate.standardizer.output_scale[rule.output];
    if noise_gain > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let noise = Normal::new(0.0, sd * noise_gain).map_err(|e| OpalError::Numerical(e.to_string()))?;
        for v in z.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(z)
}

/// Piecewise interpolant of held-out data, one function per realization.
pub struct DataInterpolant {
    groups: Vec<Vec<(Vec<f64>, f64)>>,
    /// Per-coordinate scale used for inverse-distance weighting.
    scale: Vec<f64>,
}

const COVER_TOL: f64 = 1e-9;

impl DataInterpolant {
    pub fn new(data: &Dataset<f64>, output: usize) -> Result<Self> {
        if output >= data.output_dim() {
            return Err(OpalError::Config("observable output out of range".into()));
        }
        if data.is_empty() {
            return Err(OpalError::Config("held-out set is empty".into()));
        }
        let rows: Vec<usize> = (0..data.len()).collect();
        let groups = data
            .realization_groups(&rows)
            .into_iter()
            .map(|g| g.into_iter().map(|i| (data.input(i).to_vec(), data.output(i)[output])).collect())
            .collect();
        let scale = (0..data.input_dim())
            .map(|c| {
                let (lo, hi) = (0..data.len()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                    let v = data.input(i)[c];
                    (lo.min(v), hi.max(v))
                });
                if hi > lo { hi - lo } else { 1.0 }
            })
            .collect();
        Ok(Self { groups, scale })
    }

    /// Standard deviation of the data observable per unit of independent
    /// pointwise noise: the observable is linear in the held-out values, so
    /// this is the norm of its weights on the first realization's sites.
    pub fn noise_gain(&self, rule: &QuadratureRule) -> Result<f64> {
        let sites = &self.groups[0];
        let mut sq = 0.0;
        for j in 0..sites.len() {
            let unit = Self {
                groups: vec![sites
                    .iter()
                    .enumerate()
                    .map(|(k, (p, _))| (p.clone(), if k == j { 1.0 } else { 0.0 }))
                    .collect()],
                scale: self.scale.clone(),
            };
            let c = observable(&unit, rule)?[0];
            sq += c * c;
        }
        Ok(sq.sqrt())
    }

    fn covered(&self, pts: &[(Vec<f64>, f64)], x: &[f64]) -> Result<()> {
        for (c, &v) in x.iter().enumerate() {
            let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (p, _)| {
                (lo.min(p[c]), hi.max(p[c]))
            });
            let tol = COVER_TOL * (1.0 + lo.abs().max(hi.abs()));
            if v < lo - tol || v > hi + tol {
                return Err(OpalError::Coverage(format!(
                    "coordinate {c} = {v} outside held-out data range [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

impl Predictor for DataInterpolant {
    fn n_samples(&self) -> usize {
        self.groups.len()
    }

    fn eval(&self, sample: usize, x: &[f64]) -> Result<f64> {
        let pts = &self.groups[sample];
        self.covered(pts, x)?;
        let first = &pts[0].0;
        let varying: Vec<usize> = (0..x.len()).filter(|&c| pts.iter().any(|(p, _)| p[c] != first[c])).collect();
        if varying.len() == 1 {
            // data on a line: linear interpolation along it
            let c = varying[0];
            let mut line: Vec<(f64, f64)> = pts.iter().map(|(p, u)| (p[c], *u)).collect();
            line.sort_by(|a, b| a.0.total_cmp(&b.0));
            let v = x[c];
            let k = line.partition_point(|p| p.0 < v);
            if k < line.len() && line[k].0 == v {
                return Ok(line[k].1);
            }
            if k == 0 {
                return Ok(line[0].1);
            }
            if k == line.len() {
                return Ok(line[k - 1].1);
            }
            let (x0, u0) = line[k - 1];
            let (x1, u1) = line[k];
            return Ok(u0 + (u1 - u0) * (v - x0) / (x1 - x0));
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (p, u) in pts {
            let d2: f64 = p
                .iter()
                .zip(x)
                .zip(&self.scale)
                .map(|((a, b), s)| ((a - b) / s).powi(2))
                .sum();
            if d2 == 0.0 {
                return Ok(*u);
            }
            num += u / d2;
            den += 1.0 / d2;
        }
        Ok(num / den)
    }
}

fn sample_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

/// Below this many realizations the empirical set is resampled.
pub const MIN_DIRECT_REALIZATIONS: usize = 30;

/// Samples of `Z_D` from held-out data in physical units.
///
/// With realization ids, each realization gives one value; fewer than 30 are
/// expanded to `n` by a smoothed bootstrap. Without ids the single
/// interpolated value is widened by Gaussian draws with standard deviation
/// `integrated_noise_sd`.
pub fn data_observable(
    held_out: &Dataset<f64>,
    rule: &QuadratureRule,
    integrated_noise_sd: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let interp = DataInterpolant::new(held_out, rule.output)?;
    let z = observable(&interp, rule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !held_out.has_realizations() {
        if !(integrated_noise_sd >= 0.0 && integrated_noise_sd.is_finite()) {
            return Err(OpalError::Numerical("invalid noise level".into()));
        }
        let d = Normal::new(0.0, integrated_noise_sd).map_err(|e| OpalError::Numerical(e.to_string()))?;
        return Ok((0..n.max(2)).map(|_| z[0] + d.sample(&mut rng)).collect());
    }
    if z.len() < 2 {
        return Err(OpalError::Config(format!(
            "held-out slice has {} realization(s); at least 2 are needed",
            z.len()
        )));
    }
    if z.len() >= MIN_DIRECT_REALIZATIONS {
        return Ok(z);
    }
    let h = sample_sd(&z) * (z.len() as f64).powf(-0.2);
    let d = Normal::new(0.0, h.max(0.0)).map_err(|e| OpalError::Numerical(e.to_string()))?;
    Ok((0..n.max(MIN_DIRECT_REALIZATIONS))
        .map(|_| z[rng.random_range(0..z.len())] + d.sample(&mut rng))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(low: f64, high: f64, nodes: usize) -> ObservableSpec {
        ObservableSpec {
            integrate_over: vec![IntegrationAxis {
                coord: 0,
                low,
                high,
                nodes,
            }],
            fixed_at: vec![],
            output: 0,
            path_noise: PathNoise::Shared,
        }
    }

    fn integrate(s: &ObservableSpec, f: impl Fn(&[f64]) -> f64 + Sync) -> f64 {
        let rule = s.rule(None, 1, 1).unwrap();
        let p = FnPredictor {
            samples: 1,
            f: |_: usize, x: &[f64]| f(x),
        };
        observable(&p, &rule).unwrap()[0]
    }

    #[test]
    fn linear_and_constant_integrands() {
        assert!((integrate(&spec(0.0, 1.0, 101), |x| x[0]) - 0.5).abs() < 1e-4);
        assert!((integrate(&spec(2.0, 5.0, 7), |_| 1.5) - 4.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn random_polynomial_matches_exact_integral(c in proptest::collection::vec(-0.5f64..0.5, 6)) {
            let p = |x: f64| c.iter().rev().fold(0.0, |acc, k| acc * x + k);
            let exact: f64 = c.iter().enumerate().map(|(k, v)| v / (k + 1) as f64).sum();
            let got = integrate(&spec(0.0, 1.0, 1001), |x| p(x[0]));
            prop_assert!((got - exact).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(spec(1.0, 1.0, 5).validate(1, 1).is_err());
        assert!(spec(0.0, 1.0, 1).validate(1, 1).is_err());
        assert!(spec(0.0, f64::INFINITY, 5).validate(1, 1).is_err());
        // second coordinate has no value
        assert!(spec(0.0, 1.0, 5).rule(None, 2, 1).is_err());
        let slice = LeaveOutSlice::Value {
            coord: 1,
            value: 3.0,
            tol: 0.0,
        };
        let r = spec(0.0, 1.0, 5).rule(Some(&slice), 2, 1).unwrap();
        assert!(r.points.iter().all(|p| p[1] == 3.0));
    }

    fn line_data(realizations: usize) -> Dataset<f64> {
        let mut xs = vec![];
        let mut ys = vec![];
        let mut ids = vec![];
        for r in 0..realizations {
            for k in 0..=4 {
                let e = k as f64 / 4.0;
                xs.extend([e, 2.0]);
                ys.push((1.0 + r as f64) * e);
                ids.push(r as i64);
            }
        }
        Dataset::new(
            vec!["E".into(), "L".into()],
            vec!["u".into()],
            xs,
            ys,
            Some(ids),
            Default::default(),
        )
        .unwrap()
    }

    #[test]
    fn data_interpolant_integrates_each_realization() {
        let d = line_data(3);
        let s = ObservableSpec {
            fixed_at: vec![FixedCoordinate { coord: 1, value: 2.0 }],
            ..spec(0.0, 1.0, 11)
        };
        let rule = s.rule(None, 2, 1).unwrap();
        let interp = DataInterpolant::new(&d, 0).unwrap();
        let z = observable(&interp, &rule).unwrap();
        for (r, v) in z.iter().enumerate() {
            assert!((v - 0.5 * (1.0 + r as f64)).abs() < 1e-12);
        }
        let bad = ObservableSpec {
            fixed_at: vec![FixedCoordinate { coord: 1, value: 2.0 }],
            ..spec(0.0, 1.5, 11)
        };
        let rule = bad.rule(None, 2, 1).unwrap();
        assert!(matches!(observable(&interp, &rule), Err(OpalError::Coverage(_))));
    }

    #[test]
    fn noise_gain_matches_site_trapezoid_weights() {
        let s = ObservableSpec {
            fixed_at: vec![FixedCoordinate { coord: 1, value: 2.0 }],
            ..spec(0.0, 1.0, 101)
        };
        let rule = s.rule(None, 2, 1).unwrap();
        let interp = DataInterpolant::new(&line_data(2), 0).unwrap();
        // sites at spacing 1/4: weights 1/8, 1/4, 1/4, 1/4, 1/8
        let expected = (3.0 * 0.0625f64 + 2.0 * 0.015625).sqrt();
        assert!((interp.noise_gain(&rule).unwrap() - expected).abs() < 1e-12);
        // coarser data than quadrature gives a wider observable than node noise
        assert!(expected > noise_scale(PathNoise::Independent, &rule));
    }

    #[test]
    fn data_observable_sample_policies() {
        let s = ObservableSpec {
            fixed_at: vec![FixedCoordinate { coord: 1, value: 2.0 }],
            ..spec(0.0, 1.0, 11)
        };
        let rule = s.rule(None, 2, 1).unwrap();
        let one = line_data(1);
        assert!(matches!(data_observable(&one, &rule, 0.1, 100, 0), Err(OpalError::Config(_))));
        let few = data_observable(&line_data(5), &rule, 0.1, 200, 0).unwrap();
        assert_eq!(few.len(), 200);
        let many = data_observable(&line_data(40), &rule, 0.1, 200, 0).unwrap();
        assert_eq!(many.len(), 40);
    }
}
