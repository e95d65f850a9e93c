//! Weight surgery: activation statistics, the clipped importance proxy,
//! reconstruction saliency, dual-threshold candidate selection and the
//! zero / seeded-noise modification.

use std::collections::HashMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, LossWeights, Sample, TermCoefficients};
use crate::error::{MbdError, Result};
use crate::modality::ModalityId;
use crate::param_store::{GlobalIndex, ParameterStore};
use crate::privacy::{self, LipschitzEstimate, PrivacyBudget, SensitivityBound, SensitivityMethod};
use crate::trainer::Dataset;

pub const DEFAULT_CHI_MAX: f64 = 0.99;
/// Budgets above this fraction of |W| draw a warning.
pub const BUDGET_WARN_CEILING: f64 = 0.05;
const CHUNK: usize = 64;

/// Squared-activation statistics of one weight matrix, as batch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub weight: String,
    /// S per output row: mean over samples of Σ_c x_c².
    pub row_sums: Vec<f64>,
    /// x_q² per input column: mean over samples of x_c².
    pub input_sq: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub layers: Vec<LayerStats>,
    pub batch_size: usize,
}

impl ActivationStats {
    /// Stats from explicit per-layer input matrices (rows are samples).
    pub fn from_inputs<'a>(inputs: impl IntoIterator<Item = (String, &'a Array2<f64>, usize)>) -> Result<Self> {
        let mut layers = Vec::new();
        let mut n = None;
        for (weight, x, rows) in inputs {
            let s = Self::sums(x);
            if *n.get_or_insert(x.nrows()) != x.nrows() {
                return Err(MbdError::validation("layer inputs disagree on batch size"));
            }
            layers.push(LayerStats {
                weight,
                row_sums: vec![s.iter().sum(); rows],
                input_sq: s,
            });
        }
        let batch_size = n.unwrap_or(0);
        if batch_size == 0 {
            return Err(MbdError::EmptyBatch("activation statistics"));
        }
        let mut out = ActivationStats { layers, batch_size };
        out.scale(1.0 / batch_size as f64);
        Ok(out)
    }

    fn sums(x: &Array2<f64>) -> Vec<f64> {
        (0..x.ncols())
            .map(|c| x.column(c).iter().map(|v| v * v).sum())
            .collect()
    }

    fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.row_sums.iter_mut().for_each(|v| *v *= k);
            l.input_sq.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn layer(&self, weight: &str) -> Option<&LayerStats> {
        self.layers.iter().find(|l| l.weight == weight)
    }

    /// (weight, row) pairs with S = 0.
    pub fn degenerate_rows(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.row_sums
                    .iter()
                    .enumerate()
                    .filter(|(_, &s)| s == 0.0)
                    .map(|(r, _)| (l.weight.clone(), r))
            })
            .collect()
    }
}

pub fn collect_activation_stats(
    backbone: &Backbone,
    store: &ParameterStore,
    calib: &Dataset,
) -> Result<ActivationStats> {
    if calib.is_empty() {
        return Err(MbdError::EmptyBatch("activation statistics"));
    }
    let rows: HashMap<String, usize> = store
        .entries()
        .iter()
        .filter(|e| e.shape().len() == 2)
        .map(|e| (e.name().to_string(), e.shape()[0]))
        .collect();
    // raw sums per chunk, reduced in chunk order
    let chunks: Vec<Vec<(String, Vec<f64>)>> = calib
        .samples
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<_> {
            let fw = backbone.forward(store, &backbone.batch(chunk)?)?;
            Ok(fw
                .layer_inputs()
                .into_iter()
                .map(|(w, x)| (w, ActivationStats::sums(x)))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut total: Vec<(String, Vec<f64>)> = chunks[0].iter().map(|(w, s)| (w.clone(), vec![0.0; s.len()])).collect();
    for chunk in &chunks {
        for ((_, acc), (_, s)) in total.iter_mut().zip(chunk) {
            acc.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
    }
    let n = calib.len() as f64;
    let layers = total
        .into_iter()
        .map(|(weight, sums)| {
            let input_sq: Vec<f64> = sums.iter().map(|v| v / n).collect();
            let s = sums.iter().sum::<f64>() / n;
            LayerStats {
                row_sums: vec![s; rows[&weight]],
                input_sq,
                weight,
            }
        })
        .collect();
    Ok(ActivationStats {
        layers,
        batch_size: calib.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProxy {
    pub chi: Vec<f64>,
    pub l: Vec<f64>,
    pub chi_max: f64,
}

/// χ_q = min(x_q²/S, χ_max) for weight-matrix coordinates, 0 elsewhere and on
/// degenerate rows; L_q = ½ w_q² / (1 − χ_q).
pub fn compute_proxy(stats: &ActivationStats, store: &ParameterStore, chi_max: f64) -> Result<ImportanceProxy> {
    if !(0.0..1.0).contains(&chi_max) {
        return Err(MbdError::validation(format!(
            "chi_max must lie in [0, 1), got {chi_max}"
        )));
    }
    let mut chi = Vec::with_capacity(store.len());
    let mut l = Vec::with_capacity(store.len());
    for e in store.entries() {
        let layer = stats.layer(e.name()).filter(|_| e.shape().len() == 2);
        if let Some(ls) = layer {
            if ls.input_sq.len() != e.shape()[1] || ls.row_sums.len() != e.shape()[0] {
                return Err(MbdError::Dimension {
                    context: "activation stats",
                    expected: e.shape()[1],
                    got: ls.input_sq.len(),
                });
            }
        }
        for (off, &w) in e.values().iter().enumerate() {
            let c = match layer {
                Some(ls) => {
                    let cols = e.shape()[1];
                    let s = ls.row_sums[off / cols];
                    if s > 0.0 {
                        (ls.input_sq[off % cols] / s).min(chi_max)
                    } else {
                        0.0
                    }
                }
                None => 0.0,
            };
            chi.push(c);
            l.push(0.5 * w * w / (1.0 - c));
        }
    }
    Ok(ImportanceProxy { chi, l, chi_max })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub values: Vec<f64>,
    pub modality: ModalityId,
    /// Calibration samples observing the modality.
    pub samples: usize,
    pub calib_digest: String,
}

/// Mean absolute per-sample gradient of L_re for `m` over calibration samples
/// observing `m`.
pub fn compute_saliency(
    backbone: &Backbone,
    store: &ParameterStore,
    calib: &Dataset,
    m: ModalityId,
) -> Result<SaliencyMap> {
    let observed: Vec<&Sample> = calib.samples.iter().filter(|s| s.is_present(m)).collect();
    if observed.is_empty() {
        return Err(MbdError::validation(format!(
            "saliency undefined: no calibration sample observes modality {m}"
        )));
    }
    let coeffs = TermCoefficients::recon(m);
    let weights = LossWeights::default();
    let partial: Vec<Vec<f64>> = observed
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; store.len()];
            for s in chunk {
                let b = backbone.batch(std::slice::from_ref(*s))?;
                let (_, g) = backbone.objective_grad(store, &b, &weights, &coeffs)?;
                acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v.abs());
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; store.len()];
    for p in &partial {
        values.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    let n = observed.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Ok(SaliencyMap {
        values,
        modality: m,
        samples: observed.len(),
        calib_digest: calib.digest()?.to_hex(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionParams {
    pub eta_s: f64,
    pub eta_l: f64,
    pub r: f64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            eta_s: 0.1,
            eta_l: 0.05,
            r: 0.03,
        }
    }
}

/// ⌊r·n⌋, robust to r·n landing one ulp below an integer.
pub fn budget_count(r: f64, n: usize) -> usize {
    let mut k = (r * n as f64).floor() as usize;
    while k < n && (k + 1) as f64 / n as f64 <= r {
        k += 1;
    }
    k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// I: flat positions passing both thresholds, ascending.
    pub raw: Vec<usize>,
    /// C_sel: ascending by (L_q, position), at most k entries.
    pub selected: Vec<usize>,
    pub k: usize,
    pub params: SelectionParams,
    pub param_count: usize,
    pub warnings: Vec<String>,
}

pub fn select_candidates(proxy_l: &[f64], saliency: &[f64], params: &SelectionParams) -> Result<CandidateSet> {
    if proxy_l.len() != saliency.len() {
        return Err(MbdError::Dimension {
            context: "candidate selection",
            expected: proxy_l.len(),
            got: saliency.len(),
        });
    }
    for (name, v) in [("eta_s", params.eta_s), ("eta_l", params.eta_l)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(MbdError::validation(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    if !(params.r > 0.0 && params.r <= 1.0) {
        return Err(MbdError::validation(format!(
            "budget r must lie in (0, 1], got {}",
            params.r
        )));
    }
    let mut warnings = Vec::new();
    if params.r > BUDGET_WARN_CEILING {
        warnings.push(format!(
            "budget r = {} exceeds the usual ceiling {BUDGET_WARN_CEILING}",
            params.r
        ));
    }
    let n = proxy_l.len();
    let k = budget_count(params.r, n);
    let raw: Vec<usize> = (0..n)
        .filter(|&q| saliency[q] >= params.eta_s && proxy_l[q] <= params.eta_l)
        .collect();
    let mut selected = raw.clone();
    selected.sort_by(|&a, &b| proxy_l[a].total_cmp(&proxy_l[b]).then(a.cmp(&b)));
    selected.truncate(k);
    Ok(CandidateSet {
        raw,
        selected,
        k,
        params: *params,
        param_count: n,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurgeryMode {
    Zero,
    Noise,
}

impl SurgeryMode {
    /// Zero when ε ≤ 1, noise otherwise.
    pub fn for_budget(epsilon: f64) -> Self {
        if epsilon <= 1.0 {
            SurgeryMode::Zero
        } else {
            SurgeryMode::Noise
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurgeryPlan {
    pub modality: ModalityId,
    /// C_sel in selection order.
    pub indices: Vec<GlobalIndex>,
    pub mode: SurgeryMode,
    /// True when `mode` was forced rather than derived from ε.
    pub mode_override: bool,
    pub sigma: f64,
    pub seed: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub budget_r: f64,
    pub param_count: usize,
    pub sensitivity: SensitivityBound,
}

impl SurgeryPlan {
    /// Plan for a selected candidate set; σ is calibrated from Δ and the budget.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        modality: ModalityId,
        candidates: &CandidateSet,
        pre: &ParameterStore,
        budget: &PrivacyBudget,
        seed: u64,
        mode_override: Option<SurgeryMode>,
        method: SensitivityMethod,
        lipschitz: Option<&LipschitzEstimate>,
    ) -> Result<Self> {
        budget.validate()?;
        if candidates.param_count != pre.len() {
            return Err(MbdError::validation("candidate set was computed for a different store"));
        }
        let indices = candidates
            .selected
            .iter()
            .map(|&q| pre.flatten(q))
            .collect::<Result<Vec<_>>>()?;
        let sensitivity = privacy::bound_sensitivity(&indices, pre, method, lipschitz)?;
        let sigma = privacy::calibrate_sigma(&sensitivity, budget)?;
        Ok(SurgeryPlan {
            modality,
            indices,
            mode: mode_override.unwrap_or(SurgeryMode::for_budget(budget.epsilon)),
            mode_override: mode_override.is_some(),
            sigma,
            seed,
            epsilon: budget.epsilon,
            delta: budget.delta,
            budget_r: candidates.params.r,
            param_count: pre.len(),
            sensitivity,
        })
    }

    pub fn budget(&self) -> PrivacyBudget {
        PrivacyBudget {
            epsilon: self.epsilon,
            delta: self.delta,
        }
    }

    pub fn max_indices(&self) -> usize {
        budget_count(self.budget_r, self.param_count)
    }

    /// Flat positions of the plan's indices in `store`, rejecting duplicates.
    pub fn flat_indices(&self, store: &ParameterStore) -> Result<Vec<usize>> {
        let flat = self
            .indices
            .iter()
            .map(|g| store.unflatten(g))
            .collect::<Result<Vec<_>>>()?;
        let mut sorted = flat.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(MbdError::validation("surgery plan lists a coordinate twice"));
        }
        Ok(flat)
    }
}

/// `n` standard-normal draws from the plan's seeded generator.
pub fn noise_stream(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn apply_surgery(store: &ParameterStore, plan: &SurgeryPlan) -> Result<ParameterStore> {
    let mut flat = plan.flat_indices(store)?;
    flat.sort_unstable();
    let updates: Vec<(usize, f64)> = match plan.mode {
        SurgeryMode::Zero => flat.iter().map(|&i| (i, 0.0)).collect(),
        SurgeryMode::Noise => {
            if !(plan.sigma.is_finite() && plan.sigma >= 0.0) {
                return Err(MbdError::validation(format!("invalid noise scale {}", plan.sigma)));
            }
            let z = noise_stream(plan.seed, flat.len());
            flat.iter()
                .zip(z)
                .map(|(&i, z)| Ok((i, store.value_at(i)? + plan.sigma * z)))
                .collect::<Result<_>>()?
        }
    };
    store.apply_flat_updates(&updates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::NetworkConfig;
    use crate::param_store::TensorEntry;
    use crate::trainer::{synth_dataset, MissingRegime, SynthSpec};
    use ndarray::array;
    use proptest::prelude::*;

    fn store_of(entries: Vec<(&str, Vec<usize>, Vec<f64>)>) -> ParameterStore {
        ParameterStore::new(
            entries
                .into_iter()
                .map(|(n, s, v)| TensorEntry::new(n, s, v).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn hand_row_sum_and_chi() {
        let x = array![[1.0, 2.0]];
        let stats = ActivationStats::from_inputs([("w".to_string(), &x, 1)]).unwrap();
        assert_eq!(stats.layers[0].row_sums, vec![5.0]);
        let store = store_of(vec![("w", vec![1, 2], vec![1.0, 1.0])]);
        let p = compute_proxy(&stats, &store, DEFAULT_CHI_MAX).unwrap();
        assert!((p.chi[0] - 0.2).abs() < 1e-15);
        assert!((p.l[0] - 0.5 / 0.8).abs() < 1e-15);
    }

    #[test]
    fn degenerate_rows_use_zero_chi() {
        let x = array![[0.0, 0.0], [0.0, 0.0]];
        let stats = ActivationStats::from_inputs([("w".to_string(), &x, 3)]).unwrap();
        assert_eq!(stats.degenerate_rows().len(), 3);
        let store = store_of(vec![("w", vec![3, 2], vec![2.0; 6])]);
        let p = compute_proxy(&stats, &store, DEFAULT_CHI_MAX).unwrap();
        assert!(p.chi.iter().all(|&c| c == 0.0));
        assert!(p.l.iter().all(|&l| l == 2.0));
    }

    #[test]
    fn batch_stats_are_mean_of_single_stats() {
        let x = array![[1.0, -2.0, 0.5], [3.0, 0.0, 1.0]];
        let all = ActivationStats::from_inputs([("w".to_string(), &x, 2)]).unwrap();
        let a =
            ActivationStats::from_inputs([("w".to_string(), &x.slice(ndarray::s![0..1, ..]).to_owned(), 2)]).unwrap();
        let b =
            ActivationStats::from_inputs([("w".to_string(), &x.slice(ndarray::s![1..2, ..]).to_owned(), 2)]).unwrap();
        for c in 0..3 {
            let mean = 0.5 * (a.layers[0].input_sq[c] + b.layers[0].input_sq[c]);
            assert!((all.layers[0].input_sq[c] - mean).abs() < 1e-15);
        }
        assert!((all.layers[0].row_sums[0] - 0.5 * (a.layers[0].row_sums[0] + b.layers[0].row_sums[0])).abs() < 1e-15);
    }

    #[test]
    fn proxy_direct_substitution() {
        // one input column carrying half of S gives χ = 0.5
        let x = array![[1.0, 1.0]];
        let stats = ActivationStats::from_inputs([("w".to_string(), &x, 1)]).unwrap();
        let store = store_of(vec![("w", vec![1, 2], vec![1.0, 0.0]), ("b", vec![1], vec![0.3])]);
        let p = compute_proxy(&stats, &store, DEFAULT_CHI_MAX).unwrap();
        assert_eq!(p.l[0], 1.0);
        assert_eq!(p.l[1], 0.0);
        // bias: χ = 0
        assert_eq!(p.chi[2], 0.0);
        assert!((p.l[2] - 0.045).abs() < 1e-15);
    }

    #[test]
    fn proxy_clips_single_input_rows() {
        let x = array![[2.0]];
        let stats = ActivationStats::from_inputs([("w".to_string(), &x, 1)]).unwrap();
        let store = store_of(vec![("w", vec![1, 1], vec![0.3])]);
        let p = compute_proxy(&stats, &store, DEFAULT_CHI_MAX).unwrap();
        assert_eq!(p.chi[0], 0.99);
        assert!((p.l[0] - 50.0 * 0.09).abs() < 1e-12);
    }

    #[test]
    fn selection_worked_example() {
        let s = [0.2, 0.05, 0.3, 0.15, 0.12, 0.01];
        let l = [0.01, 0.02, 0.10, 0.03, 0.04, 0.001];
        let params = SelectionParams {
            eta_s: 0.1,
            eta_l: 0.05,
            r: 2.0 / 6.0,
        };
        let c = select_candidates(&l, &s, &params).unwrap();
        assert_eq!(c.k, 2);
        assert_eq!(c.raw, vec![0, 3, 4]);
        assert_eq!(c.selected, vec![0, 3]);
        let none = select_candidates(&l, &s, &SelectionParams { eta_s: 0.31, ..params }).unwrap();
        assert!(none.raw.is_empty() && none.selected.is_empty());
        assert_eq!(
            SelectionParams::default(),
            SelectionParams {
                eta_s: 0.1,
                eta_l: 0.05,
                r: 0.03
            }
        );
    }

    #[test]
    fn selection_ties_break_by_index_and_warns() {
        let c = select_candidates(
            &[0.01; 5],
            &[1.0; 5],
            &SelectionParams {
                eta_s: 0.0,
                eta_l: 1.0,
                r: 0.6,
            },
        )
        .unwrap();
        assert_eq!(c.selected, vec![0, 1, 2]);
        assert_eq!(c.warnings.len(), 1);
        assert!(select_candidates(
            &[0.0],
            &[0.0],
            &SelectionParams {
                eta_s: 0.0,
                eta_l: 0.0,
                r: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn budget_count_is_exact_floor() {
        assert_eq!(budget_count(0.29, 100), 29);
        assert_eq!(budget_count(0.03, 100), 3);
        assert_eq!(budget_count(0.03, 13_000), 390);
        assert_eq!(budget_count(0.0299, 100), 2);
        assert_eq!(budget_count(1.0, 7), 7);
    }

    fn trained() -> (Backbone, ParameterStore, Dataset) {
        let cfg = NetworkConfig::tiny();
        let bb = Backbone::new(cfg.clone()).unwrap();
        let spec = SynthSpec {
            num_samples: 12,
            missing: MissingRegime::Rate(0.3),
            ..SynthSpec::default()
        };
        let data = synth_dataset(&spec, &cfg).unwrap();
        (bb.clone(), bb.init_store(7).unwrap(), data)
    }

    #[test]
    fn saliency_matches_finite_differences() {
        let (bb, store, data) = trained();
        let m = ModalityId::A;
        let sal = compute_saliency(&bb, &store, &data, m).unwrap();
        let obs: Vec<_> = data.samples.iter().filter(|s| s.is_present(m)).collect();
        assert_eq!(sal.samples, obs.len());
        let base = store.to_flat();
        let h = 1e-5;
        for (i, &w) in base.iter().enumerate() {
            let plus = store.apply_flat_updates(&[(i, w + h)]).unwrap();
            let minus = store.apply_flat_updates(&[(i, w - h)]).unwrap();
            let mut mean = 0.0;
            for s in &obs {
                let b = bb.batch(std::slice::from_ref(*s)).unwrap();
                let d = (bb.loss_re(&plus, &b, m).unwrap() - bb.loss_re(&minus, &b, m).unwrap()) / (2.0 * h);
                mean += d.abs();
            }
            mean /= obs.len() as f64;
            let diff = (mean - sal.values[i]).abs();
            assert!(
                diff <= 1e-8 || diff / mean.abs().max(sal.values[i]) < 1e-4,
                "coord {i}: {mean} vs {}",
                sal.values[i]
            );
        }
        // parameters off the generator path get exactly zero
        for (i, v) in sal.values.iter().enumerate() {
            let name = store.flatten(i).unwrap().entry_name;
            if !(name.starts_with("gen.A.") || name == "prop.A") {
                assert_eq!(*v, 0.0, "{name}");
            }
        }
    }

    #[test]
    fn saliency_single_sample_is_abs_gradient() {
        let (bb, store, data) = trained();
        let one = Dataset::new(vec![data
            .samples
            .iter()
            .find(|s| s.is_present(ModalityId::V))
            .unwrap()
            .clone()]);
        let sal = compute_saliency(&bb, &store, &one, ModalityId::V).unwrap();
        let b = bb.batch(&one.samples).unwrap();
        let (_, g) = bb
            .objective_grad(
                &store,
                &b,
                &LossWeights::default(),
                &TermCoefficients::recon(ModalityId::V),
            )
            .unwrap();
        assert_eq!(sal.values, g.iter().map(|v| v.abs()).collect::<Vec<_>>());
        let none = Dataset::new(vec![one.samples[0].without(ModalityId::V)]);
        assert!(compute_saliency(&bb, &store, &none, ModalityId::V).is_err());
    }

    #[test]
    fn collected_stats_match_single_forward() {
        let (bb, store, data) = trained();
        let stats = collect_activation_stats(&bb, &store, &data).unwrap();
        let fw = bb.forward(&store, &bb.batch(&data.samples).unwrap()).unwrap();
        let direct = ActivationStats::from_inputs(
            fw.layer_inputs()
                .into_iter()
                .map(|(w, x)| {
                    let rows = store.entry(&w).unwrap().shape()[0];
                    (w, x, rows)
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(stats.batch_size, direct.batch_size);
        for (a, b) in stats.layers.iter().zip(&direct.layers) {
            assert_eq!(a.weight, b.weight);
            for (x, y) in a.input_sq.iter().zip(&b.input_sq) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
        assert!(collect_activation_stats(&bb, &store, &Dataset::new(vec![])).is_err());
    }

    fn plan_for(store: &ParameterStore, selected: Vec<usize>, eps: f64, seed: u64) -> SurgeryPlan {
        let n = store.len();
        let c = CandidateSet {
            raw: selected.clone(),
            k: selected.len(),
            selected,
            params: SelectionParams {
                r: 1.0,
                ..SelectionParams::default()
            },
            param_count: n,
            warnings: vec![],
        };
        SurgeryPlan::build(
            ModalityId::A,
            &c,
            store,
            &PrivacyBudget::new(eps, 1e-5).unwrap(),
            seed,
            None,
            SensitivityMethod::SelectedWeightNorm,
            None,
        )
        .unwrap()
    }

    #[test]
    fn empty_plan_is_identity() {
        let (_, store, _) = trained();
        let plan = plan_for(&store, vec![], 0.5, 1);
        assert_eq!(plan.sigma, 0.0);
        assert_eq!(apply_surgery(&store, &plan).unwrap().digest(), store.digest());
        let noisy = plan_for(&store, vec![], 2.0, 1);
        assert_eq!(apply_surgery(&store, &noisy).unwrap().digest(), store.digest());
    }

    #[test]
    fn zero_mode_zeroes_exactly_the_selection() {
        let (_, store, _) = trained();
        let sel = vec![40, 3, 17];
        let plan = plan_for(&store, sel.clone(), 0.5, 1);
        assert_eq!(plan.mode, SurgeryMode::Zero);
        let post = apply_surgery(&store, &plan).unwrap();
        for &i in &sel {
            assert_eq!(post.value_at(i).unwrap().to_bits(), 0.0f64.to_bits());
        }
        let mut diff = post.bitwise_diff(&store).unwrap();
        diff.sort_unstable();
        let mut want: Vec<_> = sel
            .into_iter()
            .filter(|&i| store.value_at(i).unwrap().to_bits() != 0)
            .collect();
        want.sort_unstable();
        assert_eq!(diff, want);
    }

    #[test]
    fn noise_mode_reproduces_seeded_stream() {
        let (_, store, _) = trained();
        let sel = vec![40, 3, 17];
        let plan = plan_for(&store, sel.clone(), 2.0, 99);
        assert_eq!(plan.mode, SurgeryMode::Noise);
        assert!(plan.sigma > 0.0);
        let post = apply_surgery(&store, &plan).unwrap();
        let z = noise_stream(99, 3);
        for (j, &i) in [3usize, 17, 40].iter().enumerate() {
            assert_eq!(
                post.value_at(i).unwrap(),
                store.value_at(i).unwrap() + plan.sigma * z[j]
            );
        }
        assert_eq!(post.bitwise_diff(&store).unwrap().len(), 3);
    }

    #[test]
    fn plan_rejects_bad_indices() {
        let (_, store, _) = trained();
        let mut plan = plan_for(&store, vec![1, 2], 0.5, 1);
        plan.indices[1] = plan.indices[0].clone();
        assert!(apply_surgery(&store, &plan).is_err());
        plan.indices[1] = GlobalIndex::new("nope", 0);
        assert!(apply_surgery(&store, &plan).is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let (_, store, _) = trained();
        let plan = plan_for(&store, vec![5, 1], 0.5, 3);
        let json = serde_json::to_string(&plan).unwrap();
        let first = store.flatten(5).unwrap();
        assert!(json.contains(&format!(r#""indices":[["{}",{}],"#, first.entry_name, first.offset)));
        assert_eq!(serde_json::from_str::<SurgeryPlan>(&json).unwrap(), plan);
    }

    proptest! {
        #[test]
        fn selection_invariants(
            l in proptest::collection::vec(0.0f64..0.2, 1..200),
            seed in 0u64..1000,
            eta_s in 0.0f64..1.0,
            eta_l in 0.0f64..0.2,
            r in 0.001f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = l.iter().map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let p = SelectionParams { eta_s, eta_l, r };
            let c = select_candidates(&l, &s, &p).unwrap();
            prop_assert!(c.selected.len() <= c.k);
            prop_assert_eq!(c.selected.len(), c.k.min(c.raw.len()));
            prop_assert!(c.selected.iter().all(|q| c.raw.contains(q)));
            prop_assert!(c.selected.windows(2).all(|w| (l[w[0]], w[0]) < (l[w[1]], w[1])));
            // tightening either threshold never grows I
            let tighter = select_candidates(&l, &s, &SelectionParams { eta_s: eta_s + 0.1, eta_l: eta_l * 0.5, r }).unwrap();
            prop_assert!(tighter.raw.iter().all(|q| c.raw.contains(q)));
        }

        #[test]
        fn proxy_bounds(w in proptest::collection::vec(-3.0f64..3.0, 6), x in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let xa = Array2::from_shape_vec((2, 3), x).unwrap();
            let stats = ActivationStats::from_inputs([("w".to_string(), &xa, 2)]).unwrap();
            let store = store_of(vec![("w", vec![2, 3], w)]);
            let p = compute_proxy(&stats, &store, DEFAULT_CHI_MAX).unwrap();
            prop_assert!(p.chi.iter().all(|&c| (0.0..=0.99).contains(&c)));
            prop_assert!(p.l.iter().all(|&l| l.is_finite() && l >= 0.0));
        }
    }
}
