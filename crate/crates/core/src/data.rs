//! Datasets, scenario tags, synthetic high-fidelity stand-ins, CSV ingestion,
//! leave-out splitting and standardization.
//!
//! Rows are stored row-major. A row may carry a realization id; rows that share
//! an input tuple but differ in realization id are distinct stochastic draws of
//! the simulator at that input.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{OpalError, Result};
use crate::network::{Activation, Architecture, Parameters};
use crate::scalar::Real;

/// Where in the scenario hierarchy a dataset comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    PreTraining,
    #[default]
    Training,
    Prediction,
}

/// Input/output pairs with named coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct Dataset<T> {
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub scenario: Scenario,
    inputs: Vec<T>,
    outputs: Vec<T>,
    realization: Option<Vec<i64>>,
}

impl<T: Real> Dataset<T> {
    /// Builds a dataset from row-major input and output buffers.
    pub fn new(
        input_names: Vec<String>,
        output_names: Vec<String>,
        inputs: Vec<T>,
        outputs: Vec<T>,
        realization: Option<Vec<i64>>,
        scenario: Scenario,
    ) -> Result<Self> {
        let d_in = input_names.len();
        let d_out = output_names.len();
        if d_in == 0 || d_out == 0 {
            return Err(OpalError::Shape("dataset needs at least one input and one output".into()));
        }
        if inputs.len() % d_in != 0 {
            return Err(OpalError::Shape(format!(
                "input buffer of length {} is not a multiple of {d_in}",
                inputs.len()
            )));
        }
        let n = inputs.len() / d_in;
        if outputs.len() != n * d_out {
            return Err(OpalError::Shape(format!(
                "expected {} output values for {n} rows, got {}",
                n * d_out,
                outputs.len()
            )));
        }
        if let Some(r) = &realization {
            if r.len() != n {
                return Err(OpalError::Shape(format!(
                    "realization column has {} entries for {n} rows",
                    r.len()
                )));
            }
        }
        if let Some(pos) = inputs.iter().chain(outputs.iter()).position(|v| !v.finite()) {
            return Err(OpalError::Argument(format!("non-finite value at flat position {pos}")));
        }
        Ok(Self {
            input_names,
            output_names,
            scenario,
            inputs,
            outputs,
            realization,
        })
    }

    /// Convenience constructor with generated coordinate names `x0.., u0..`.
    pub fn from_rows(inputs: &[Vec<T>], outputs: &[Vec<T>]) -> Result<Self> {
        let d_in = inputs.first().map_or(1, Vec::len);
        let d_out = outputs.first().map_or(1, Vec::len);
        if inputs.len() != outputs.len() {
            return Err(OpalError::Shape("row count mismatch between inputs and outputs".into()));
        }
        let flat_in: Vec<T> = inputs.iter().flatten().copied().collect();
        let flat_out: Vec<T> = outputs.iter().flatten().copied().collect();
        Self::new(
            (0..d_in).map(|i| format!("x{i}")).collect(),
            (0..d_out).map(|i| format!("u{i}")).collect(),
            flat_in,
            flat_out,
            None,
            Scenario::Training,
        )
    }

    /// A dataset with no rows (prior-only computations).
    pub fn empty(d_in: usize, d_out: usize) -> Self {
        Self {
            input_names: (0..d_in).map(|i| format!("x{i}")).collect(),
            output_names: (0..d_out).map(|i| format!("u{i}")).collect(),
            scenario: Scenario::Training,
            inputs: Vec::new(),
            outputs: Vec::new(),
            realization: None,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_names.len()
    }

    pub fn output_dim(&self) -> usize {
        self.output_names.len()
    }

    pub fn input(&self, row: usize) -> &[T] {
        let d = self.input_dim();
        &self.inputs[row * d..(row + 1) * d]
    }

    pub fn output(&self, row: usize) -> &[T] {
        let d = self.output_dim();
        &self.outputs[row * d..(row + 1) * d]
    }

    pub fn realization(&self, row: usize) -> Option<i64> {
        self.realization.as_ref().map(|r| r[row])
    }

    pub fn has_realizations(&self) -> bool {
        self.realization.is_some()
    }

    pub fn inputs_flat(&self) -> &[T] {
        &self.inputs
    }

    pub fn outputs_flat(&self) -> &[T] {
        &self.outputs
    }

    pub fn coordinate_index(&self, name: &str) -> Option<usize> {
        self.input_names.iter().position(|n| n == name)
    }

    /// Selects the given rows in order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let d_in = self.input_dim();
        let d_out = self.output_dim();
        let mut inputs = Vec::with_capacity(rows.len() * d_in);
        let mut outputs = Vec::with_capacity(rows.len() * d_out);
        for &r in rows {
            inputs.extend_from_slice(self.input(r));
            outputs.extend_from_slice(self.output(r));
        }
        Self {
            input_names: self.input_names.clone(),
            output_names: self.output_names.clone(),
            scenario: self.scenario,
            inputs,
            outputs,
            realization: self
                .realization
                .as_ref()
                .map(|r| rows.iter().map(|&i| r[i]).collect()),
        }
    }

    /// Appends the rows of `other` (same schema).
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.input_names != other.input_names || self.output_names != other.output_names {
            return Err(OpalError::Shape("cannot concatenate datasets with different schemas".into()));
        }
        let realization = match (&self.realization, &other.realization) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            (None, None) => None,
            _ => None,
        };
        Ok(Self {
            input_names: self.input_names.clone(),
            output_names: self.output_names.clone(),
            scenario: self.scenario,
            inputs: self.inputs.iter().chain(&other.inputs).copied().collect(),
            outputs: self.outputs.iter().chain(&other.outputs).copied().collect(),
            realization,
        })
    }

    pub fn with_scenario(mut self, scenario: Scenario) -> Self {
        self.scenario = scenario;
        self
    }

    /// Converts the stored values to another scalar type.
    pub fn cast<U: Real>(&self) -> Dataset<U> {
        let conv = |v: &T| U::lit(v.to_f64_lossy());
        Dataset {
            input_names: self.input_names.clone(),
            output_names: self.output_names.clone(),
            scenario: self.scenario,
            inputs: self.inputs.iter().map(conv).collect(),
            outputs: self.outputs.iter().map(conv).collect(),
            realization: self.realization.clone(),
        }
    }

    /// Groups row indices by realization id (one group when the column is absent).
    pub fn realization_groups(&self, rows: &[usize]) -> Vec<Vec<usize>> {
        match &self.realization {
            None => vec![rows.to_vec()],
            Some(r) => {
                let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
                for &i in rows {
                    groups.entry(r[i]).or_default().push(i);
                }
                groups.into_values().collect()
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Standardization

/// Per-coordinate affine maps `z = (x - shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_shift: Vec<f64>,
    pub output_scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(d_in: usize, d_out: usize) -> Self {
        Self {
            input_shift: vec![0.0; d_in],
            input_scale: vec![1.0; d_in],
            output_shift: vec![0.0; d_out],
            output_scale: vec![1.0; d_out],
        }
    }

    /// Fits shifts and scales (mean, population standard deviation) to a dataset.
    pub fn fit<T: Real>(data: &Dataset<T>) -> Result<Self> {
        let n = data.len();
        if n < 2 {
            return Err(OpalError::Config("standardization needs at least two rows".into()));
        }
        let stats = |col: &dyn Fn(usize) -> f64| {
            let mean = (0..n).map(col).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (col(i) - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, var.sqrt())
        };
        let mut out = Self::identity(data.input_dim(), data.output_dim());
        for c in 0..data.input_dim() {
            let (m, s) = stats(&|i| data.input(i)[c].to_f64_lossy());
            if !(s > 0.0) || s <= 1e-300 {
                return Err(OpalError::Config(format!(
                    "input coordinate '{}' has zero variance",
                    data.input_names[c]
                )));
            }
            out.input_shift[c] = m;
            out.input_scale[c] = s;
        }
        for c in 0..data.output_dim() {
            let (m, s) = stats(&|i| data.output(i)[c].to_f64_lossy());
            if !(s > 0.0) || s <= 1e-300 {
                return Err(OpalError::Config(format!(
                    "output coordinate '{}' has zero variance",
                    data.output_names[c]
                )));
            }
            out.output_shift[c] = m;
            out.output_scale[c] = s;
        }
        Ok(out)
    }

    pub fn transform_input<T: Real>(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .enumerate()
            .map(|(c, v)| T::lit((v.to_f64_lossy() - self.input_shift[c]) / self.input_scale[c]))
            .collect()
    }

    pub fn inverse_input<T: Real>(&self, z: &[T]) -> Vec<T> {
        z.iter()
            .enumerate()
            .map(|(c, v)| T::lit(v.to_f64_lossy() * self.input_scale[c] + self.input_shift[c]))
            .collect()
    }

    pub fn transform_output<T: Real>(&self, u: &[T]) -> Vec<T> {
        u.iter()
            .enumerate()
            .map(|(c, v)| T::lit((v.to_f64_lossy() - self.output_shift[c]) / self.output_scale[c]))
            .collect()
    }

    pub fn inverse_output<T: Real>(&self, z: &[T]) -> Vec<T> {
        z.iter()
            .enumerate()
            .map(|(c, v)| T::lit(v.to_f64_lossy() * self.output_scale[c] + self.output_shift[c]))
            .collect()
    }

    /// Maps a standardized-output variance back to physical units.
    pub fn inverse_output_variance<T: Real>(&self, var: &[T]) -> Vec<T> {
        var.iter()
            .enumerate()
            .map(|(c, v)| T::lit(v.to_f64_lossy() * self.output_scale[c].powi(2)))
            .collect()
    }

    /// Applies the forward maps to every row.
    pub fn apply<T: Real>(&self, data: &Dataset<T>) -> Dataset<T> {
        let mut inputs = Vec::with_capacity(data.inputs.len());
        let mut outputs = Vec::with_capacity(data.outputs.len());
        for i in 0..data.len() {
            inputs.extend(self.transform_input(data.input(i)));
            outputs.extend(self.transform_output(data.output(i)));
        }
        Dataset {
            inputs,
            outputs,
            ..data.clone()
        }
    }

    pub fn invert<T: Real>(&self, data: &Dataset<T>) -> Dataset<T> {
        let mut inputs = Vec::with_capacity(data.inputs.len());
        let mut outputs = Vec::with_capacity(data.outputs.len());
        for i in 0..data.len() {
            inputs.extend(self.inverse_input(data.input(i)));
            outputs.extend(self.inverse_output(data.output(i)));
        }
        Dataset {
            inputs,
            outputs,
            ..data.clone()
        }
    }
}

/// Standardizes every coordinate to zero mean and unit variance.
pub fn standardize<T: Real>(data: &Dataset<T>) -> Result<(Dataset<T>, Standardizer)> {
    let s = Standardizer::fit(data)?;
    Ok((s.apply(data), s))
}

// ---------------------------------------------------------------------------
// Synthetic generators

fn default_realizations() -> usize {
    1
}

/// Strain-energy-like response `c * E * L^p * (1 + A sin(2 pi L / period)) * exp(s z)`.
///
/// The lognormal factor `exp(s z)` is drawn once per `(L, realization)` and
/// shared across all `E` values, the way one microstructure realization is
/// reused across elastic moduli.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyLikeConfig {
    pub length_range: [f64; 2],
    pub n_lengths: usize,
    pub modulus_range: [f64; 2],
    pub n_moduli: usize,
    #[serde(default = "default_realizations")]
    pub realizations: usize,
    pub c: f64,
    pub p: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub size_effect_amplitude: f64,
    #[serde(default = "EnergyLikeConfig::default_period")]
    pub size_effect_period: f64,
}

impl EnergyLikeConfig {
    fn default_period() -> f64 {
        1.0
    }
}

impl Default for EnergyLikeConfig {
    fn default() -> Self {
        Self {
            length_range: [122.5, 183.75],
            n_lengths: 15,
            modulus_range: [100.0, 115.0],
            n_moduli: 10,
            realizations: 10,
            c: 1e-3,
            p: 2.0,
            noise: 0.05,
            size_effect_amplitude: 0.0,
            size_effect_period: 1.0,
        }
    }
}

/// Regression-rate-like response over oxidizer flux `G` and latent heat `l_v`,
/// sampled by Latin hypercube: `a * G^0.8 * (1 - exp(-G / g_sat)) * (l_ref / l_v)^0.5 + noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionRateConfig {
    pub flux_range: [f64; 2],
    pub latent_heat_range: [f64; 2],
    pub n_samples: usize,
    #[serde(default)]
    pub noise: f64,
}

impl Default for RegressionRateConfig {
    fn default() -> Self {
        Self {
            flux_range: [5.0, 20.0],
            latent_heat_range: [6e5, 11e5],
            n_samples: 64,
            noise: 0.0,
        }
    }
}

/// Linear-in-features truth using a known subset of inputs; inputs uniform on `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSparseConfig {
    pub n_inputs: usize,
    pub active: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub n_samples: usize,
    pub noise: f64,
}

impl Default for PlantedSparseConfig {
    fn default() -> Self {
        Self {
            n_inputs: 20,
            active: vec![0, 1, 2],
            coefficients: vec![2.0, 1.0, 0.5],
            n_samples: 200,
            noise: 0.1,
        }
    }
}

/// Truth generated by a fixed "teacher" network with seeded random weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub hidden_widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub input_ranges: Vec<[f64; 2]>,
    /// Points per input axis on a tensor grid.
    pub grid_points: usize,
    #[serde(default = "default_realizations")]
    pub realizations: usize,
    pub weight_scale: f64,
    pub noise: f64,
    pub teacher_seed: u64,
}

/// Which synthetic high-fidelity stand-in to sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task")]
pub enum SyntheticTask {
    EnergyLike(EnergyLikeConfig),
    RegressionRateLike(RegressionRateConfig),
    PlantedSparse(PlantedSparseConfig),
    Custom(TeacherConfig),
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] {
        return Err(OpalError::Config(format!("empty or invalid range for {name}: {r:?}")));
    }
    Ok(())
}

fn latin_hypercube(rng: &mut ChaCha8Rng, n: usize, ranges: &[[f64; 2]]) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(ranges.len());
    for r in ranges {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        cols.push(
            strata
                .into_iter()
                .map(|s| {
                    let u: f64 = rng.random();
                    r[0] + (r[1] - r[0]) * (s as f64 + u) / n as f64
                })
                .collect(),
        );
    }
    (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
}

/// Samples a synthetic dataset. Identical `(task, seed)` pairs give bit-identical output.
pub fn generate_synthetic(task: &SyntheticTask, seed: u64) -> Result<Dataset<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match task {
        SyntheticTask::EnergyLike(cfg) => {
            check_range("L", cfg.length_range)?;
            check_range("E", cfg.modulus_range)?;
            if cfg.n_lengths == 0 || cfg.n_moduli == 0 || cfg.realizations == 0 {
                return Err(OpalError::Config("EnergyLike needs non-zero sample counts".into()));
            }
            let ls = linspace(cfg.length_range[0], cfg.length_range[1], cfg.n_lengths);
            let es = linspace(cfg.modulus_range[0], cfg.modulus_range[1], cfg.n_moduli);
            let (mut inputs, mut outputs, mut rid) = (Vec::new(), Vec::new(), Vec::new());
            for &l in &ls {
                for r in 0..cfg.realizations {
                    let z: f64 = rng.sample(StandardNormal);
                    let factor = if cfg.noise > 0.0 { (cfg.noise * z).exp() } else { 1.0 };
                    let size = 1.0
                        + cfg.size_effect_amplitude
                            * (2.0 * std::f64::consts::PI * l / cfg.size_effect_period).sin();
                    for &e in &es {
                        inputs.extend([l, e]);
                        outputs.push(cfg.c * e * l.powf(cfg.p) * size * factor);
                        rid.push(r as i64);
                    }
                }
            }
            Dataset::new(
                vec!["L".into(), "E".into()],
                vec!["u".into()],
                inputs,
                outputs,
                Some(rid),
                Scenario::Training,
            )
        }
        SyntheticTask::RegressionRateLike(cfg) => {
            check_range("G", cfg.flux_range)?;
            check_range("l_v", cfg.latent_heat_range)?;
            if cfg.n_samples == 0 {
                return Err(OpalError::Config("RegressionRateLike needs n_samples > 0".into()));
            }
            let pts = latin_hypercube(&mut rng, cfg.n_samples, &[cfg.flux_range, cfg.latent_heat_range]);
            let (mut inputs, mut outputs) = (Vec::new(), Vec::new());
            for p in pts {
                let (g, lv) = (p[0], p[1]);
                let clean = 0.05 * g.powf(0.8) * (1.0 - (-g / 8.0).exp()) * (8e5 / lv).sqrt();
                let eps: f64 = rng.sample(StandardNormal);
                inputs.extend([g, lv]);
                outputs.push(clean + cfg.noise * eps);
            }
            Dataset::new(
                vec!["G".into(), "l_v".into()],
                vec!["r_dot".into()],
                inputs,
                outputs,
                None,
                Scenario::Training,
            )
        }
        SyntheticTask::PlantedSparse(cfg) => {
            if cfg.n_inputs == 0 || cfg.n_samples == 0 {
                return Err(OpalError::Config("PlantedSparse needs inputs and samples".into()));
            }
            if cfg.active.len() != cfg.coefficients.len() || cfg.active.iter().any(|&a| a >= cfg.n_inputs) {
                return Err(OpalError::Config("PlantedSparse active set does not match coefficients".into()));
            }
            let (mut inputs, mut outputs) = (Vec::new(), Vec::new());
            for _ in 0..cfg.n_samples {
                let x: Vec<f64> = (0..cfg.n_inputs).map(|_| rng.random_range(-1.0..1.0)).collect();
                let clean: f64 = cfg.active.iter().zip(&cfg.coefficients).map(|(&a, c)| c * x[a]).sum();
                let eps: f64 = rng.sample(StandardNormal);
                inputs.extend_from_slice(&x);
                outputs.push(clean + cfg.noise * eps);
            }
            Dataset::new(
                (0..cfg.n_inputs).map(|i| format!("x{i}")).collect(),
                vec!["u".into()],
                inputs,
                outputs,
                None,
                Scenario::Training,
            )
        }
        SyntheticTask::Custom(cfg) => {
            if cfg.input_ranges.is_empty() || cfg.grid_points == 0 || cfg.realizations == 0 {
                return Err(OpalError::Config("teacher task needs input ranges and grid points".into()));
            }
            for r in &cfg.input_ranges {
                check_range("teacher input", *r)?;
            }
            let arch = Architecture::new(
                cfg.input_ranges.len(),
                1,
                cfg.hidden_widths.clone(),
                cfg.activations.clone(),
            )?;
            let mut trng = ChaCha8Rng::seed_from_u64(cfg.teacher_seed);
            let theta: Vec<f64> = (0..arch.param_count())
                .map(|_| cfg.weight_scale * trng.sample::<f64, _>(StandardNormal))
                .collect();
            let teacher = Parameters::from_flat(&arch, theta)?;
            let axes: Vec<Vec<f64>> = cfg
                .input_ranges
                .iter()
                .map(|r| linspace(r[0], r[1], cfg.grid_points))
                .collect();
            let total: usize = axes.iter().map(Vec::len).product();
            let (mut inputs, mut outputs, mut rid) = (Vec::new(), Vec::new(), Vec::new());
            for flat in 0..total {
                let mut rem = flat;
                let mut x = vec![0.0; axes.len()];
                for (d, ax) in axes.iter().enumerate().rev() {
                    x[d] = ax[rem % ax.len()];
                    rem /= ax.len();
                }
                let clean = crate::network::forward(&arch, &teacher, &x)?[0];
                for r in 0..cfg.realizations {
                    let eps: f64 = rng.sample(StandardNormal);
                    inputs.extend_from_slice(&x);
                    outputs.push(clean + cfg.noise * eps);
                    rid.push(r as i64);
                }
            }
            Dataset::new(
                (0..axes.len()).map(|i| format!("x{i}")).collect(),
                vec!["u".into()],
                inputs,
                outputs,
                Some(rid),
                Scenario::Training,
            )
        }
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion

/// Column layout of a CSV dataset. Stored as JSON next to the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub scenario: Scenario,
    #[serde(default)]
    pub realization_column: Option<String>,
}

impl CsvSchema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Reads a UTF-8 CSV with a header row. Data rows are numbered from 1 in errors.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset<f64>> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, schema)
}

/// Parses CSV text; see [`load_csv`].
pub fn parse_csv(text: &str, schema: &CsvSchema) -> Result<Dataset<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| OpalError::Parse {
            row: 0,
            column: String::new(),
            detail: e.to_string(),
        })?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| OpalError::Parse {
            row: 0,
            column: name.to_string(),
            detail: "missing column".into(),
        })
    };
    let in_idx: Vec<usize> = schema.inputs.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let out_idx: Vec<usize> = schema.outputs.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let rid_idx = schema.realization_column.as_deref().map(find).transpose()?;

    let (mut inputs, mut outputs, mut rid) = (Vec::new(), Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| OpalError::Parse {
            row,
            column: String::new(),
            detail: e.to_string(),
        })?;
        let cell = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| OpalError::Parse {
                row,
                column: name.to_string(),
                detail: format!("'{raw}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(OpalError::Parse {
                    row,
                    column: name.to_string(),
                    detail: "non-finite value".into(),
                });
            }
            Ok(v)
        };
        for (&idx, name) in in_idx.iter().zip(&schema.inputs) {
            inputs.push(cell(idx, name)?);
        }
        for (&idx, name) in out_idx.iter().zip(&schema.outputs) {
            outputs.push(cell(idx, name)?);
        }
        if let (Some(idx), Some(name)) = (rid_idx, schema.realization_column.as_deref()) {
            let raw = record.get(idx).unwrap_or("");
            rid.push(raw.parse::<i64>().map_err(|_| OpalError::Parse {
                row,
                column: name.to_string(),
                detail: format!("'{raw}' is not an integer id"),
            })?);
        }
    }
    if outputs.is_empty() {
        return Err(OpalError::Parse {
            row: 0,
            column: String::new(),
            detail: "file has no data rows".into(),
        });
    }
    Dataset::new(
        schema.inputs.clone(),
        schema.outputs.clone(),
        inputs,
        outputs,
        rid_idx.map(|_| rid),
        schema.scenario,
    )
}

/// Reads the named input columns of a query CSV into rows. Extra columns are ignored.
pub fn parse_query_csv(text: &str, inputs: &[String]) -> Result<Vec<Vec<f64>>> {
    let schema = CsvSchema {
        inputs: inputs.to_vec(),
        outputs: Vec::new(),
        scenario: Scenario::Prediction,
        realization_column: None,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| OpalError::Parse {
            row: 0,
            column: String::new(),
            detail: e.to_string(),
        })?
        .clone();
    let idx: Vec<usize> = schema
        .inputs
        .iter()
        .map(|name| {
            headers.iter().position(|h| h == name).ok_or_else(|| OpalError::Parse {
                row: 0,
                column: name.clone(),
                detail: "missing column".into(),
            })
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| OpalError::Parse {
            row: i + 1,
            column: String::new(),
            detail: e.to_string(),
        })?;
        let row = idx
            .iter()
            .zip(&schema.inputs)
            .map(|(&k, name)| {
                let raw = record.get(k).unwrap_or("");
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| OpalError::Parse {
                        row: i + 1,
                        column: name.clone(),
                        detail: format!("'{raw}' is not a finite number"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(OpalError::Parse {
            row: 0,
            column: String::new(),
            detail: "file has no data rows".into(),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Leave-out splitting

/// One held-out subset, selected by input coordinate or explicit rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by")]
pub enum LeaveOutSlice {
    /// Rows whose coordinate lies within `tol` of `value`.
    Value { coord: usize, value: f64, tol: f64 },
    /// Rows whose coordinate lies in `[low, high]`.
    Range { coord: usize, low: f64, high: f64 },
    /// Explicit rows, widened to every row sharing one of their input tuples.
    Rows { indices: Vec<usize> },
}

impl LeaveOutSlice {
    fn select<T: Real>(&self, data: &Dataset<T>) -> Vec<usize> {
        match self {
            LeaveOutSlice::Value { coord, value, tol } => (0..data.len())
                .filter(|&i| (data.input(i)[*coord].to_f64_lossy() - value).abs() <= *tol)
                .collect(),
            LeaveOutSlice::Range { coord, low, high } => (0..data.len())
                .filter(|&i| {
                    let v = data.input(i)[*coord].to_f64_lossy();
                    v >= *low && v <= *high
                })
                .collect(),
            LeaveOutSlice::Rows { indices } => {
                let keys: Vec<&[T]> = indices
                    .iter()
                    .filter(|&&i| i < data.len())
                    .map(|&i| data.input(i))
                    .collect();
                (0..data.len()).filter(|&i| keys.contains(&data.input(i))).collect()
            }
        }
    }

    /// The coordinate this slice fixes, if any, with its representative value.
    pub fn fixed_coordinate(&self) -> Option<(usize, f64)> {
        match self {
            LeaveOutSlice::Value { coord, value, .. } => Some((*coord, *value)),
            _ => None,
        }
    }
}

/// A train/held-out pair produced by [`split_leave_out`].
#[derive(Clone, Debug)]
pub struct LeaveOutSplit<T> {
    pub train: Dataset<T>,
    pub held_out: Dataset<T>,
    pub held_out_rows: Vec<usize>,
}

/// Splits the dataset into one `(D \ D_LO, D_LO)` pair per slice.
///
/// Slices must be non-empty, leave a non-empty remainder, and be pairwise disjoint.
pub fn split_leave_out<T: Real>(data: &Dataset<T>, slices: &[LeaveOutSlice]) -> Result<Vec<LeaveOutSplit<T>>> {
    if slices.is_empty() {
        return Err(OpalError::Config("no leave-out slices given".into()));
    }
    let mut taken = vec![false; data.len()];
    let mut out = Vec::with_capacity(slices.len());
    for (n, slice) in slices.iter().enumerate() {
        let rows = slice.select(data);
        if rows.is_empty() {
            return Err(OpalError::Config(format!("leave-out slice {n} selects no rows")));
        }
        if rows.len() == data.len() {
            return Err(OpalError::Config(format!("leave-out slice {n} leaves no training rows")));
        }
        for &r in &rows {
            if taken[r] {
                return Err(OpalError::Config(format!("leave-out slice {n} overlaps an earlier slice at row {r}")));
            }
            taken[r] = true;
        }
        let mut is_held = vec![false; data.len()];
        rows.iter().for_each(|&r| is_held[r] = true);
        let train_rows: Vec<usize> = (0..data.len()).filter(|&i| !is_held[i]).collect();
        out.push(LeaveOutSplit {
            train: data.subset(&train_rows),
            held_out: data.subset(&rows),
            held_out_rows: rows,
        });
    }
    Ok(out)
}
