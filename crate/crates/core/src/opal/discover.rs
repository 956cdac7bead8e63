//! Width probing, Occam categories and category-wise model discovery.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, FitConfig};
use crate::data::Dataset;
use crate::error::{OpalError, Result};
use crate::evidence::{fit_hierarchical_with, plausibility_weights, EvidenceRecord, ModelRecord};
use crate::laplace::{InferenceHyperParams, LaplacePosterior, TrainSetup};
use crate::network::{Activation, ActivationKind, Architecture};
use crate::sparsify::{sweep_threshold_from, SparsifyConfig, SparsifyTrace};

fn hidden_activations() -> Vec<Activation> {
    ActivationKind::HIDDEN.iter().map(|&k| Activation::new(k)).collect()
}

fn one() -> usize {
    1
}

/// Single-hidden-layer sweep used to bound the width of the model set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub widths: Vec<usize>,
    #[serde(default = "hidden_activations")]
    pub activations: Vec<Activation>,
    /// Optimizer restarts averaged per (width, activation).
    #[serde(default = "one")]
    pub seeds: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            widths: vec![2, 4, 8, 16, 32],
            activations: hidden_activations(),
            seeds: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub width: usize,
    pub activation: Activation,
    pub seed: usize,
    #[serde(with = "crate::serde_ext::neg_inf_null")]
    pub log_evid_model: f64,
}

/// Mean log model evidence at one probe width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthMean {
    pub width: usize,
    #[serde(with = "crate::serde_ext::neg_inf_null")]
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub grid: Vec<ProbeEntry>,
    pub mean_by_width: Vec<WidthMean>,
    pub peak_width: usize,
    pub width_cap: usize,
    /// False when the peak sits at the largest probe width.
    pub interior_peak: bool,
}

impl ProbeResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("width,activation,seed,log_evid_model\n");
        for e in &self.grid {
            s.push_str(&format!("{},{:?},{},{}\n", e.width, e.activation.kind, e.seed, e.log_evid_model));
        }
        s
    }
}

/// Width cap ten percent above the evidence peak, rounded to the nearest integer.
pub fn width_cap_from_peak(peak: usize) -> usize {
    (1.1 * peak as f64).round() as usize
}

fn failure_is_local(e: &OpalError) -> bool {
    matches!(
        e,
        OpalError::DegenerateEvidence(_)
            | OpalError::Divergence { .. }
            | OpalError::Numerical(_)
            | OpalError::Eigen { .. }
    )
}

/// Fits depth-1 models over the probe widths and activations and sets the
/// width cap from the width of peak mean evidence.
pub fn build_initial_set(data: &Dataset<f64>, probe: &ProbeConfig, fit: &FitConfig, seed: u64) -> Result<ProbeResult> {
    if probe.widths.len() < 3 {
        return Err(OpalError::Config("at least three probe widths are needed".into()));
    }
    if probe.widths.windows(2).any(|w| w[0] >= w[1]) || probe.widths[0] == 0 {
        return Err(OpalError::Config("probe widths must be positive and strictly ascending".into()));
    }
    if probe.activations.is_empty() || probe.seeds == 0 {
        return Err(OpalError::Config("probe needs at least one activation and one seed".into()));
    }
    let jobs: Vec<(usize, usize, usize)> = (0..probe.widths.len())
        .flat_map(|w| (0..probe.activations.len()).flat_map(move |a| (0..probe.seeds).map(move |s| (w, a, s))))
        .collect();
    let sigma0 = fit.init_sigma(2)?;
    let grid = jobs
        .par_iter()
        .map(|&(w, a, s)| {
            let width = probe.widths[w];
            let act = probe.activations[a];
            let arch = Architecture::single_hidden(data.input_dim(), data.output_dim(), width, act);
            let cfg = fit.seeded(derive_seed(seed, &[10, w as u64, a as u64, s as u64]));
            let evid = match fit_hierarchical_with(&arch, data, &sigma0, None, &cfg, TrainSetup::default()) {
                Ok((_, rec)) => rec.log_evid_model,
                Err(e) if failure_is_local(&e) => {
                    log::warn!("probe fit W={width} {:?} failed: {e}", act.kind);
                    f64::NEG_INFINITY
                }
                Err(e) => return Err(e),
            };
            Ok(ProbeEntry {
                width,
                activation: act,
                seed: s,
                log_evid_model: evid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let per = probe.activations.len() * probe.seeds;
    let mean_by_width: Vec<WidthMean> = probe
        .widths
        .iter()
        .enumerate()
        .map(|(i, &width)| WidthMean {
            width,
            mean: grid[i * per..(i + 1) * per].iter().map(|e| e.log_evid_model).sum::<f64>() / per as f64,
        })
        .collect();
    let mut best = 0;
    for (i, m) in mean_by_width.iter().enumerate() {
        if m.mean > mean_by_width[best].mean {
            best = i;
        }
    }
    if mean_by_width[best].mean == f64::NEG_INFINITY {
        return Err(OpalError::DegenerateSet("every probe fit failed".into()));
    }
    let peak_width = mean_by_width[best].width;
    let interior_peak = best + 1 < mean_by_width.len();
    let width_cap = if interior_peak {
        width_cap_from_peak(peak_width)
    } else {
        log::warn!("probe evidence peaks at the largest width {peak_width}; capping there");
        peak_width
    };
    Ok(ProbeResult {
        grid,
        mean_by_width,
        peak_width,
        width_cap,
        interior_peak,
    })
}

/// A complexity-ordered cell of the model set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccamCategory {
    pub index: usize,
    pub depths: Vec<usize>,
    pub width_cap: usize,
    pub allowed_activations: Vec<Activation>,
}

/// Category `l` covers depths `(l-1)k+1 ..= lk`.
pub fn partition_categories(width_cap: usize, depth_per_category: usize, n_categories: usize) -> Result<Vec<OccamCategory>> {
    if depth_per_category == 0 || width_cap == 0 {
        return Err(OpalError::Config("depth per category and width cap must be positive".into()));
    }
    Ok((1..=n_categories)
        .map(|l| OccamCategory {
            index: l,
            depths: ((l - 1) * depth_per_category + 1..=l * depth_per_category).collect(),
            width_cap,
            allowed_activations: hidden_activations(),
        })
        .collect())
}

/// Evidence argmax; ties go to the earlier activation in enum order.
pub fn select_activation(candidates: &[(Activation, f64)]) -> Result<Activation> {
    if candidates.is_empty() {
        return Err(OpalError::Argument("no candidate activations".into()));
    }
    if candidates.iter().any(|(_, e)| !e.is_finite()) {
        return Err(OpalError::Argument("candidate evidences must be finite".into()));
    }
    let mut best = candidates[0];
    for &(a, e) in &candidates[1..] {
        if e > best.1 || (e == best.1 && a.kind < best.0.kind) {
            best = (a, e);
        }
    }
    Ok(best.0)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidateStatus {
    Fitted,
    /// Best activation at its depth.
    SelectedAtDepth,
    /// Chosen for sparsification within the category.
    Plausible,
    Failed(String),
}

/// One fully connected candidate in the audit trail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub category: usize,
    pub depth: usize,
    pub width: usize,
    pub activations: Vec<Activation>,
    pub label: String,
    #[serde(with = "crate::serde_ext::neg_inf_null")]
    pub log_evid_sigma: f64,
    #[serde(with = "crate::serde_ext::neg_inf_null")]
    pub log_evid_model: f64,
    /// Normalized within the category.
    pub plausibility: f64,
    pub mask_density: f64,
    pub status: CandidateStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoverConfig {
    pub fit: FitConfig,
    pub sparsify: SparsifyConfig,
}

impl Default for DiscoverConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            sparsify: SparsifyConfig::default(),
        }
    }
}

/// The plausible model of one category and how it was reached.
#[derive(Clone, Debug)]
pub struct CategoryOutcome {
    /// Sparsified plausible model, fit on the standardized data.
    pub record: ModelRecord<f64>,
    pub candidates: Vec<CandidateRecord>,
    pub sparsify: SparsifyTrace,
    /// Greedy activation chain through the deepest depth of the category.
    pub chain: Vec<Activation>,
    /// Best fully connected evidence in the category.
    pub best_dense_evidence: f64,
    /// Prior mean used for the plausible model when pretraining was supplied.
    pub prior_mean: Option<Vec<f64>>,
}

type Fitted = (LaplacePosterior<f64>, EvidenceRecord<f64>, Option<Vec<f64>>);

/// Fits one candidate, first on the pretraining data when given: its MAP
/// becomes the prior mean and its hyperparameters the starting point.
fn fit_candidate(
    arch: &Architecture,
    data: &Dataset<f64>,
    pretrain: Option<&Dataset<f64>>,
    fit: &FitConfig,
    seed: u64,
) -> Result<Fitted> {
    let sigma0 = fit.init_sigma(arch.num_layers())?;
    let cfg = fit.seeded(seed);
    match pretrain {
        None => {
            let (p, r) = fit_hierarchical_with(arch, data, &sigma0, None, &cfg, TrainSetup::default())?;
            Ok((p, r, None))
        }
        Some(pre) => {
            let (pp, pr) = fit_hierarchical_with(arch, pre, &sigma0, None, &cfg, TrainSetup::default())?;
            let mean = pp.theta_map.flatten();
            let sigma: InferenceHyperParams<f64> = pr.sigma_map.clone();
            let setup = TrainSetup {
                prior_mean: Some(&mean),
                init: Some(&mean),
            };
            let (p, r) = fit_hierarchical_with(arch, data, &sigma, None, &cfg, setup)?;
            Ok((p, r, Some(mean)))
        }
    }
}

/// Greedy discovery inside one category, then sparsification of the best
/// fully connected model.
///
/// `prefix` holds activations fixed by earlier categories; it is padded with
/// the first allowed activation when shorter than the category's first depth
/// minus one.
pub fn discover_category_model(
    category: &OccamCategory,
    data: &Dataset<f64>,
    pretrain: Option<&Dataset<f64>>,
    prefix: &[Activation],
    config: &DiscoverConfig,
    seed: u64,
) -> Result<CategoryOutcome> {
    if category.depths.is_empty() || category.allowed_activations.is_empty() || category.width_cap == 0 {
        return Err(OpalError::Config(format!("category {} is empty", category.index)));
    }
    let mut depths = category.depths.clone();
    depths.sort_unstable();
    let first = depths[0];
    let mut chain: Vec<Activation> = prefix.iter().copied().take(first - 1).collect();
    while chain.len() < first - 1 {
        chain.push(category.allowed_activations[0]);
    }
    let width = category.width_cap;
    let mut candidates: Vec<CandidateRecord> = Vec::new();
    let mut best: Option<(Fitted, usize)> = None;
    for &depth in &depths {
        while chain.len() < depth - 1 {
            chain.push(category.allowed_activations[0]);
        }
        let fits: Vec<(Activation, Architecture, Result<Fitted>)> = category
            .allowed_activations
            .par_iter()
            .enumerate()
            .map(|(a, &act)| {
                let mut acts = chain.clone();
                acts.push(act);
                let arch = Architecture::new(data.input_dim(), data.output_dim(), vec![width; depth], acts)?;
                let s = derive_seed(seed, &[20, category.index as u64, depth as u64, a as u64]);
                let f = fit_candidate(&arch, data, pretrain, &config.fit, s);
                Ok((act, arch, f))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut scored: Vec<(Activation, f64)> = Vec::new();
        let mut ok: Vec<(Activation, Fitted)> = Vec::new();
        let start = candidates.len();
        for (act, arch, f) in fits {
            let (ls, lm, status, fitted) = match f {
                Ok(v) => (v.1.log_evid_sigma, v.1.log_evid_model, CandidateStatus::Fitted, Some(v)),
                Err(e) if failure_is_local(&e) => {
                    log::warn!("candidate {} failed: {e}", arch.label());
                    (f64::NEG_INFINITY, f64::NEG_INFINITY, CandidateStatus::Failed(e.to_string()), None)
                }
                Err(e) => return Err(e),
            };
            candidates.push(CandidateRecord {
                category: category.index,
                depth,
                width,
                activations: arch.activations.clone(),
                label: arch.label(),
                log_evid_sigma: ls,
                log_evid_model: lm,
                plausibility: 0.0,
                mask_density: 1.0,
                status,
            });
            if let Some(v) = fitted {
                scored.push((act, lm));
                ok.push((act, v));
            }
        }
        if scored.is_empty() {
            log::warn!("every candidate at depth {depth} failed in category {}", category.index);
            chain.push(category.allowed_activations[0]);
            continue;
        }
        let chosen = select_activation(&scored)?;
        chain.push(chosen);
        let k = ok.iter().position(|(a, _)| *a == chosen).expect("chosen activation was fitted");
        let offset = candidates[start..]
            .iter()
            .position(|c| c.activations.last() == Some(&chosen))
            .expect("chosen candidate recorded");
        candidates[start + offset].status = CandidateStatus::SelectedAtDepth;
        let fitted = ok.swap_remove(k).1;
        let better = match &best {
            None => true,
            Some((b, _)) => fitted.1.log_evid_model > b.1.log_evid_model,
        };
        if better {
            best = Some((fitted, start + offset));
        }
    }
    let Some(((post, rec, prior_mean), idx)) = best else {
        return Err(OpalError::CategoryFailed { category: category.index });
    };
    candidates[idx].status = CandidateStatus::Plausible;
    let finite: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].log_evid_model.is_finite())
        .collect();
    let evid: Vec<f64> = finite.iter().map(|&i| candidates[i].log_evid_model).collect();
    let w = plausibility_weights(&evid, &vec![0.0; evid.len()])?;
    for (&i, p) in finite.iter().zip(w) {
        candidates[i].plausibility = p;
    }
    let best_dense_evidence = rec.log_evid_model;
    let sp_cfg = config.fit.seeded(derive_seed(seed, &[21, category.index as u64]));
    let out = sweep_threshold_from((&post, &rec), data, &config.sparsify, &sp_cfg, prior_mean.as_deref())?;
    let mut record = ModelRecord::new(out.posterior, out.evidence);
    record.plausibility = candidates[idx].plausibility;
    Ok(CategoryOutcome {
        record,
        candidates,
        sparsify: out.trace,
        chain,
        best_dense_evidence,
        prior_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(k: ActivationKind) -> Activation {
        Activation::new(k)
    }

    #[test]
    fn activation_argmax_examples() {
        use ActivationKind::*;
        let d1 = [
            (act(ReLU), -15732.0),
            (act(LeakyReLU), -15045.0),
            (act(Sigmoid), -15317.0),
            (act(Tanh), -14846.0),
        ];
        assert_eq!(select_activation(&d1).unwrap().kind, Tanh);
        let d3 = [
            (act(ReLU), -15835.0),
            (act(LeakyReLU), -14834.0),
            (act(Sigmoid), -15427.0),
            (act(Tanh), -15340.0),
        ];
        assert_eq!(select_activation(&d3).unwrap().kind, LeakyReLU);
        let tie = [(act(Sigmoid), 1.0), (act(ReLU), 1.0), (act(Tanh), 1.0)];
        assert_eq!(select_activation(&tie).unwrap().kind, Tanh);
        assert!(select_activation(&[]).is_err());
        assert!(select_activation(&[(act(Tanh), f64::NAN)]).is_err());
    }

    #[test]
    fn categories_partition_depths() {
        let c = partition_categories(10, 2, 2).unwrap();
        assert_eq!(c[0].depths, vec![1, 2]);
        assert_eq!(c[1].depths, vec![3, 4]);
        let c = partition_categories(10, 1, 3).unwrap();
        assert_eq!(c.iter().map(|c| c.depths.clone()).collect::<Vec<_>>(), vec![vec![1], vec![2], vec![3]]);
        let c = partition_categories(10, 3, 2).unwrap();
        assert_eq!(c[1].depths, vec![4, 5, 6]);
        assert!(partition_categories(10, 0, 2).is_err());
    }

    #[test]
    fn width_caps() {
        assert_eq!(width_cap_from_peak(545), 600);
        assert_eq!(width_cap_from_peak(273), 300);
    }

    #[test]
    fn probe_needs_three_widths() {
        let d = Dataset::<f64>::from_rows(&[vec![0.0], vec![1.0]], &[vec![0.0], vec![1.0]]).unwrap();
        let p = ProbeConfig {
            widths: vec![2, 4],
            ..ProbeConfig::default()
        };
        assert!(matches!(build_initial_set(&d, &p, &FitConfig::default(), 0), Err(OpalError::Config(_))));
    }
}
