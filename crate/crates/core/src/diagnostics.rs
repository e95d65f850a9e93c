//! Empirical validation: leave-one-out oracle, third-derivative estimates,
//! candidate concentration, reconstruction deltas and a linear probe.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Batch, LossWeights};
use crate::certificate::TestSpec;
use crate::error::{MbdError, Result};
use crate::modality::ModalityId;
use crate::param_store::ParameterStore;
use crate::surgery::{
    collect_activation_stats, compute_proxy, compute_saliency, select_candidates, ImportanceProxy, SelectionParams,
};
use crate::trainer::{batch_bounds, Dataset};

pub const ORACLE_GATE: usize = 2000;
pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_BAND: f64 = 0.08;
pub const CONCENTRATION_ETAS: [f64; 3] = [0.01, 0.02, 0.05];

/// A loss over parameter stores.
pub trait ScalarObjective: Sync {
    fn loss(&self, store: &ParameterStore) -> Result<f64>;
}

impl<F> ScalarObjective for F
where
    F: Fn(&ParameterStore) -> Result<f64> + Sync,
{
    fn loss(&self, store: &ParameterStore) -> Result<f64> {
        self(store)
    }
}

/// The weighted training objective, averaged over fixed consecutive
/// minibatches of an evaluation set.
pub struct TrainingObjective<'a> {
    backbone: &'a Backbone,
    batches: Vec<(Batch, f64)>,
    weights: LossWeights,
}

impl<'a> TrainingObjective<'a> {
    pub fn new(backbone: &'a Backbone, data: &Dataset, weights: LossWeights, batch_size: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(MbdError::EmptyBatch("evaluation set"));
        }
        let n = data.len() as f64;
        let batches = batch_bounds(data.len(), batch_size.max(2))
            .into_iter()
            .map(|(a, b)| Ok((backbone.batch(&data.samples[a..b])?, (b - a) as f64 / n)))
            .collect::<Result<_>>()?;
        Ok(TrainingObjective {
            backbone,
            batches,
            weights,
        })
    }
}

impl ScalarObjective for TrainingObjective<'_> {
    fn loss(&self, store: &ParameterStore) -> Result<f64> {
        let mut total = 0.0;
        for (b, w) in &self.batches {
            total += w * self.backbone.total_loss(store, b, &self.weights)?.total;
        }
        Ok(total)
    }
}

/// Σ_q ½ c_q (v_q − center_q)²: removing coordinate q costs exactly ½ c_q w_q².
pub struct DiagonalQuadratic {
    pub center: Vec<f64>,
    pub chi: Vec<f64>,
}

impl ScalarObjective for DiagonalQuadratic {
    fn loss(&self, store: &ParameterStore) -> Result<f64> {
        let v = store.to_flat();
        if v.len() != self.center.len() {
            return Err(MbdError::Dimension {
                context: "diagonal quadratic",
                expected: self.center.len(),
                got: v.len(),
            });
        }
        Ok(v.iter()
            .zip(&self.center)
            .zip(&self.chi)
            .map(|((v, c), chi)| {
                let d = v - c;
                0.5 * d * d / (1.0 - chi)
            })
            .sum())
    }
}

/// Average ranks, ties sharing the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation; `None` when either side is constant or n < 2.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    if ra == rb {
        return (ra.iter().any(|&r| r != ra[0])).then_some(1.0);
    }
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub index: usize,
    pub w: f64,
    pub chi: f64,
    pub proxy: f64,
    pub true_delta: f64,
    pub remainder: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverDeleteReport {
    pub gamma: f64,
    pub count: usize,
    pub rate: f64,
}

pub fn over_delete(entries: &[OracleEntry], gamma: f64) -> OverDeleteReport {
    let count = entries
        .iter()
        .filter(|e| e.proxy > (1.0 + gamma) * e.true_delta)
        .count();
    OverDeleteReport {
        gamma,
        count,
        rate: if entries.is_empty() {
            0.0
        } else {
            count as f64 / entries.len() as f64
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub baseline: f64,
    pub entries: Vec<OracleEntry>,
    pub max_rel_error: f64,
    pub spearman: Option<f64>,
    pub band: f64,
    pub band_fraction: f64,
    pub over_delete: OverDeleteReport,
    pub w_max: f64,
    /// Set by [`OracleReport::attach_m_hat`].
    pub m_hat: Option<f64>,
    /// Fraction with relative error under (1/3)·M·|w|/(1−χ)².
    pub relative_bound_fraction: Option<f64>,
    /// Fraction with |ε| under (M/6)·|w|³/(1−χ)³.
    pub cubic_bound_fraction: Option<f64>,
}

impl OracleReport {
    pub fn attach_m_hat(&mut self, m_hat: f64) {
        let n = self.entries.len().max(1) as f64;
        let rel = self
            .entries
            .iter()
            .filter(|e| e.rel_error <= m_hat * e.w.abs() / (3.0 * (1.0 - e.chi).powi(2)))
            .count();
        let cubic = self
            .entries
            .iter()
            .filter(|e| e.remainder.abs() <= m_hat / 6.0 * e.w.abs().powi(3) / (1.0 - e.chi).powi(3))
            .count();
        self.m_hat = Some(m_hat);
        self.relative_bound_fraction = Some(rel as f64 / n);
        self.cubic_bound_fraction = Some(cubic as f64 / n);
    }
}

fn rel_error(remainder: f64, proxy: f64) -> f64 {
    if remainder == 0.0 {
        0.0
    } else if proxy == 0.0 {
        f64::INFINITY
    } else {
        remainder.abs() / proxy
    }
}

/// Exact loss increment from zeroing each candidate, against the proxy.
pub fn loo_oracle(
    objective: &dyn ScalarObjective,
    store: &ParameterStore,
    candidates: &[usize],
    proxy: &ImportanceProxy,
    gate: usize,
) -> Result<OracleReport> {
    if candidates.len() > gate {
        return Err(MbdError::Refused(format!(
            "{} candidates exceed the oracle gate of {gate}",
            candidates.len()
        )));
    }
    if proxy.l.len() != store.len() {
        return Err(MbdError::Dimension {
            context: "oracle proxy",
            expected: store.len(),
            got: proxy.l.len(),
        });
    }
    let baseline = objective.loss(store)?;
    let entries: Vec<OracleEntry> = candidates
        .par_iter()
        .map(|&q| {
            let w = store.value_at(q)?;
            let zeroed = store.apply_flat_updates(&[(q, 0.0)])?;
            let true_delta = objective.loss(&zeroed)? - baseline;
            let remainder = true_delta - proxy.l[q];
            Ok(OracleEntry {
                index: q,
                w,
                chi: proxy.chi[q],
                proxy: proxy.l[q],
                true_delta,
                remainder,
                rel_error: rel_error(remainder, proxy.l[q]),
            })
        })
        .collect::<Result<_>>()?;
    let proxies: Vec<f64> = entries.iter().map(|e| e.proxy).collect();
    let truths: Vec<f64> = entries.iter().map(|e| e.true_delta).collect();
    let n = entries.len().max(1) as f64;
    Ok(OracleReport {
        baseline,
        max_rel_error: entries.iter().map(|e| e.rel_error).fold(0.0, f64::max),
        spearman: spearman(&proxies, &truths),
        band: DEFAULT_BAND,
        band_fraction: entries.iter().filter(|e| e.rel_error <= DEFAULT_BAND).count() as f64 / n,
        over_delete: over_delete(&entries, DEFAULT_GAMMA),
        w_max: entries.iter().map(|e| e.w.abs()).fold(0.0, f64::max),
        entries,
        m_hat: None,
        relative_bound_fraction: None,
        cubic_bound_fraction: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThirdDerivativeReport {
    pub step: f64,
    pub estimates: Vec<f64>,
    pub m_hat: f64,
    /// Candidates whose estimate was not finite.
    pub non_finite: Vec<usize>,
}

/// Five-point central estimate of the third derivative along each axis:
/// [f(2h) − 2f(h) + 2f(−h) − f(−2h)] / (2h³).
pub fn estimate_m(
    objective: &dyn ScalarObjective,
    store: &ParameterStore,
    candidates: &[usize],
    step: f64,
) -> Result<ThirdDerivativeReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(MbdError::validation(format!("step must be positive, got {step}")));
    }
    let estimates: Vec<f64> = candidates
        .par_iter()
        .map(|&q| {
            let w = store.value_at(q)?;
            let f = |d: f64| objective.loss(&store.apply_flat_updates(&[(q, w + d)])?);
            Ok((f(2.0 * step)? - 2.0 * f(step)? + 2.0 * f(-step)? - f(-2.0 * step)?) / (2.0 * step.powi(3)))
        })
        .collect::<Result<_>>()?;
    let non_finite: Vec<usize> = candidates
        .iter()
        .zip(&estimates)
        .filter(|(_, e)| !e.is_finite())
        .map(|(&q, _)| q)
        .collect();
    let m_hat = estimates
        .iter()
        .filter(|e| e.is_finite())
        .map(|e| e.abs())
        .fold(0.0, f64::max);
    Ok(ThirdDerivativeReport {
        step,
        estimates,
        m_hat,
        non_finite,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaRow {
    pub eta: f64,
    pub threshold: f64,
    pub exceedances: usize,
    pub empirical: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub param_count: usize,
    pub sizes: Vec<usize>,
    pub p_hat: f64,
    pub rows: Vec<EtaRow>,
}

impl ConcentrationReport {
    pub fn from_sizes(sizes: Vec<usize>, param_count: usize, etas: &[f64]) -> Result<Self> {
        if sizes.is_empty() || param_count == 0 {
            return Err(MbdError::validation("concentration needs resamples and parameters"));
        }
        let w = param_count as f64;
        let p_hat = sizes.iter().sum::<usize>() as f64 / (sizes.len() as f64 * w);
        let rows = etas
            .iter()
            .map(|&eta| {
                let threshold = (p_hat + eta) * w;
                let exceedances = sizes.iter().filter(|&&s| s as f64 >= threshold).count();
                let empirical = exceedances as f64 / sizes.len() as f64;
                let bound = (-2.0 * eta * eta * w).exp();
                EtaRow {
                    eta,
                    threshold,
                    exceedances,
                    empirical,
                    bound,
                    holds: empirical <= bound,
                }
            })
            .collect();
        Ok(ConcentrationReport {
            param_count,
            sizes,
            p_hat,
            rows,
        })
    }

    pub fn holds(&self) -> bool {
        self.rows.iter().all(|r| r.holds)
    }
}

/// Bootstrap resample of `data` (with replacement) of the same size.
pub fn resample(data: &Dataset, rng: &mut ChaCha8Rng) -> Dataset {
    let n = data.len();
    Dataset::new((0..n).map(|_| data.samples[rng.random_range(0..n)].clone()).collect())
}

/// |I| over bootstrap resamples of the calibration set.
#[allow(clippy::too_many_arguments)]
pub fn concentration_check(
    backbone: &Backbone,
    store: &ParameterStore,
    calib: &Dataset,
    m: ModalityId,
    params: &SelectionParams,
    chi_max: f64,
    resamples: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    if resamples < 30 {
        return Err(MbdError::validation(format!(
            "need at least 30 resamples, got {resamples}"
        )));
    }
    if calib.is_empty() {
        return Err(MbdError::EmptyBatch("calibration sampler"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let b = resample(calib, &mut rng);
        let stats = collect_activation_stats(backbone, store, &b)?;
        let proxy = compute_proxy(&stats, store, chi_max)?;
        let sal = compute_saliency(backbone, store, &b, m)?;
        sizes.push(select_candidates(&proxy.l, &sal.values, params)?.raw.len());
    }
    ConcentrationReport::from_sizes(sizes, store.len(), &CONCENTRATION_ETAS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconDelta {
    pub modality: ModalityId,
    pub post: f64,
    pub reference: f64,
    pub delta: f64,
}

/// L_re of `m` under `post` minus that under `reference`, on `test`.
pub fn recon_delta_check(
    backbone: &Backbone,
    post: &ParameterStore,
    reference: &ParameterStore,
    test: &Dataset,
    m: ModalityId,
) -> Result<ReconDelta> {
    if !test.samples.iter().any(|s| s.is_present(m)) {
        return Err(MbdError::validation(format!("no test sample observes modality {m}")));
    }
    let b = backbone.batch(&test.samples)?;
    let post_v = backbone.loss_re(post, &b, m)?;
    let ref_v = if post.bit_eq(reference) {
        post_v
    } else {
        backbone.loss_re(reference, &b, m)?
    };
    Ok(ReconDelta {
        modality: m,
        post: post_v,
        reference: ref_v,
        delta: post_v - ref_v,
    })
}

/// Balanced binary targets: which side of the median each sample's true
/// modality features fall along a seeded random direction.
pub fn probe_targets(data: &Dataset, m: ModalityId, seed: u64) -> Result<Vec<bool>> {
    if data.samples.iter().any(|s| !s.is_present(m)) {
        return Err(MbdError::validation(format!(
            "probe targets need modality {m} observed everywhere"
        )));
    }
    let d = data.samples.first().map(|s| s.features(m).len()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let proj: Vec<f64> = data
        .samples
        .iter()
        .map(|s| s.features(m).iter().zip(&dir).map(|(a, b)| a * b).sum())
        .collect();
    let mut sorted = proj.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted.get(sorted.len() / 2).copied().unwrap_or(0.0);
    Ok(proj.iter().map(|&p| p >= median).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 300,
            lr: 0.5,
            l2: 1e-3,
        }
    }
}

/// Standardized logistic-regression probe.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Array1<f64>,
    scale: Array1<f64>,
    w: Array1<f64>,
    b: f64,
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

impl LinearProbe {
    pub fn fit(x: &Array2<f64>, y: &[bool], cfg: &ProbeConfig) -> Result<Self> {
        if x.nrows() != y.len() || y.is_empty() {
            return Err(MbdError::Dimension {
                context: "probe labels",
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
            return Err(MbdError::validation("probe labels are a single class"));
        }
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { 1.0 / s } else { 0.0 });
        let xs = (x - &mean) * &scale;
        let t = Array1::from_iter(y.iter().map(|&v| if v { 1.0 } else { 0.0 }));
        let mut w = Array1::zeros(x.ncols());
        let mut b = 0.0;
        for _ in 0..cfg.iterations {
            let p = (xs.dot(&w) + b).mapv(sigmoid);
            let r = &p - &t;
            let gw = xs.t().dot(&r) / n + cfg.l2 * &w;
            let gb = r.sum() / n;
            w = w - cfg.lr * gw;
            b -= cfg.lr * gb;
        }
        Ok(LinearProbe { mean, scale, w, b })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<bool> {
        ((x - &self.mean) * &self.scale)
            .dot(&self.w)
            .iter()
            .map(|v| v + self.b >= 0.0)
            .collect()
    }

    pub fn accuracy(&self, x: &Array2<f64>, y: &[bool]) -> f64 {
        let hits = self.predict(x).iter().zip(y).filter(|(a, b)| a == b).count();
        hits as f64 / y.len().max(1) as f64
    }
}

/// Embeddings for probe training and evaluation under one model.
#[derive(Debug, Clone)]
pub struct ProbeData {
    pub train: Array2<f64>,
    pub test: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub pre_accuracy: f64,
    /// Probe refit on post-surgery embeddings.
    pub post_accuracy: f64,
    /// Pre-surgery probe applied unchanged to post-surgery embeddings.
    pub transfer_accuracy: f64,
    pub chance: f64,
    /// Binomial standard error at chance level on the test set.
    pub se: f64,
    pub test_size: usize,
}

pub fn probe_attack(
    pre: &ProbeData,
    post: &ProbeData,
    y_train: &[bool],
    y_test: &[bool],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    for d in [pre, post] {
        if d.test.nrows() != y_test.len() {
            return Err(MbdError::Dimension {
                context: "probe test labels",
                expected: d.test.nrows(),
                got: y_test.len(),
            });
        }
    }
    let probe_pre = LinearProbe::fit(&pre.train, y_train, cfg)?;
    let probe_post = LinearProbe::fit(&post.train, y_train, cfg)?;
    let n = y_test.len();
    Ok(ProbeReport {
        pre_accuracy: probe_pre.accuracy(&pre.test, y_test),
        post_accuracy: probe_post.accuracy(&post.test, y_test),
        transfer_accuracy: probe_pre.accuracy(&post.test, y_test),
        chance: 0.5,
        se: (0.25 / n.max(1) as f64).sqrt(),
        test_size: n,
    })
}

/// Names and thresholds of the checks a certificate asks verifiers to run.
pub fn default_test_suite(gate: usize, resamples: usize, plrv_trials: u64) -> Vec<TestSpec> {
    vec![
        TestSpec::new(
            "loo_oracle",
            &[("gate", gate as f64), ("gamma", DEFAULT_GAMMA), ("band", DEFAULT_BAND)],
        ),
        TestSpec::new(
            "concentration",
            &[
                ("resamples", resamples as f64),
                ("eta_0", CONCENTRATION_ETAS[0]),
                ("eta_1", CONCENTRATION_ETAS[1]),
                ("eta_2", CONCENTRATION_ETAS[2]),
            ],
        ),
        TestSpec::new("recon_forgetting", &[]),
        TestSpec::new("probe_attack", &[("chance", 0.5)]),
        TestSpec::new("plrv_tail", &[("trials", plrv_trials as f64), ("se_multiplier", 3.0)]),
    ]
}
