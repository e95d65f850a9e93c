//! End-to-end orchestration shared by the command line, sweeps and tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, NetworkConfig};
use crate::certificate::{self, Certificate, IssueOptions};
use crate::diagnostics::{
    self, concentration_check, estimate_m, loo_oracle, probe_attack, probe_targets, recon_delta_check,
    ConcentrationReport, OracleReport, ProbeConfig, ProbeData, ProbeReport, ReconDelta, ThirdDerivativeReport,
    TrainingObjective,
};
use crate::error::{MbdError, Result};
use crate::modality::ModalityId;
use crate::param_store::ParameterStore;
use crate::privacy::{self, PlrvReport, PrivacyBudget, SensitivityMethod, ZcdpLedger};
use crate::surgery::{
    apply_surgery, collect_activation_stats, compute_proxy, compute_saliency, select_candidates, CandidateSet,
    ImportanceProxy, SaliencyMap, SelectionParams, SurgeryMode, SurgeryPlan, DEFAULT_CHI_MAX,
};
use crate::trainer::{self, Dataset, LrSchedule, SplitSizes, Splits, SynthSpec, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurgeryConfig {
    pub modality: ModalityId,
    pub eta_s: f64,
    pub eta_l: f64,
    pub r: f64,
    pub chi_max: f64,
    /// Calibration samples used (|B|); 0 takes the whole calibration split.
    pub calib_size: usize,
    /// Forces a mode instead of deriving it from ε.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<SurgeryMode>,
    pub sensitivity: SensitivityMethod,
    /// Commit to the noise seed with this salt instead of disclosing it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub commitment_salt: Option<String>,
}

impl Default for SurgeryConfig {
    fn default() -> Self {
        let s = SelectionParams::default();
        SurgeryConfig {
            modality: ModalityId::A,
            eta_s: s.eta_s,
            eta_l: s.eta_l,
            r: s.r,
            chi_max: DEFAULT_CHI_MAX,
            calib_size: 0,
            mode: None,
            sensitivity: SensitivityMethod::SelectedWeightNorm,
            commitment_salt: None,
        }
    }
}

impl SurgeryConfig {
    pub fn selection(&self) -> SelectionParams {
        SelectionParams {
            eta_s: self.eta_s,
            eta_l: self.eta_l,
            r: self.r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    pub init: u64,
    pub noise: u64,
    pub probe: u64,
    pub resample: u64,
    pub plrv: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig {
            init: 0,
            noise: 1,
            probe: 2,
            resample: 3,
            plrv: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub oracle_gate: usize,
    /// Minibatch size of the oracle's loss evaluation.
    pub oracle_batch: usize,
    pub fd_step: f64,
    pub spearman_min: f64,
    pub over_delete_max: f64,
    /// Largest tolerated relative increase of held-out task loss.
    pub task_increase_max: f64,
    pub resamples: usize,
    pub plrv_trials: u64,
    pub probe: ProbeConfig,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            oracle_gate: diagnostics::ORACLE_GATE,
            oracle_batch: 32,
            fd_step: 1e-2,
            spearman_min: 0.75,
            over_delete_max: 0.05,
            task_increase_max: 0.2,
            resamples: 100,
            plrv_trials: 1_000_000,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub network: NetworkConfig,
    pub synth: SynthSpec,
    pub split: SplitSizes,
    pub train: TrainConfig,
    pub surgery: SurgeryConfig,
    pub privacy: PrivacyBudget,
    pub seeds: SeedConfig,
    pub diagnostics: DiagnosticsConfig,
    /// Worker threads; 0 leaves the choice to the runtime.
    pub workers: usize,
    pub output_dir: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    Full,
}

impl PipelineConfig {
    pub fn desk() -> Self {
        let split = SplitSizes {
            train: 8000,
            calib: 2000,
            test: 1000,
        };
        PipelineConfig {
            network: NetworkConfig::desk(),
            synth: SynthSpec {
                num_samples: split.train + split.calib + split.test,
                ..SynthSpec::default()
            },
            split,
            train: TrainConfig {
                epochs: 100,
                schedule: LrSchedule::Cosine { floor: 0.05 },
                ..TrainConfig::default()
            },
            surgery: SurgeryConfig::default(),
            privacy: PrivacyBudget::default(),
            seeds: SeedConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            workers: 0,
            output_dir: "out".into(),
        }
    }

    /// Encoder-sized feature dimensions and a 5000-sample calibration batch.
    pub fn full() -> Self {
        let split = SplitSizes {
            train: 10_000,
            calib: 5000,
            test: 2000,
        };
        PipelineConfig {
            network: NetworkConfig::full_dims(),
            synth: SynthSpec {
                num_samples: split.train + split.calib + split.test,
                latent_dim: 16,
                ..SynthSpec::default()
            },
            split,
            ..Self::desk()
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    /// A small configuration for fast end-to-end checks.
    pub fn tiny() -> Self {
        let split = SplitSizes {
            train: 120,
            calib: 60,
            test: 60,
        };
        PipelineConfig {
            network: NetworkConfig::tiny(),
            synth: SynthSpec {
                num_samples: 240,
                ..SynthSpec::default()
            },
            split,
            train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            surgery: SurgeryConfig {
                eta_s: 0.0,
                eta_l: 1.0,
                r: 0.05,
                ..SurgeryConfig::default()
            },
            diagnostics: DiagnosticsConfig {
                resamples: 30,
                plrv_trials: 100_000,
                ..DiagnosticsConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        self.privacy.validate()?;
        let need = self.split.train + self.split.calib + self.split.test;
        if need > self.synth.num_samples {
            return Err(MbdError::validation(format!(
                "splits need {need} samples but synth.num_samples is {}",
                self.synth.num_samples
            )));
        }
        if self.surgery.calib_size > self.split.calib {
            return Err(MbdError::validation(format!(
                "calib_size {} exceeds the calibration split ({})",
                self.surgery.calib_size, self.split.calib
            )));
        }
        if !(0.0..1.0).contains(&self.surgery.chi_max) {
            return Err(MbdError::validation("chi_max must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn backbone(&self) -> Result<Backbone> {
        Backbone::new(self.network.clone())
    }
}

pub fn synthesize(cfg: &PipelineConfig) -> Result<Dataset> {
    cfg.validate()?;
    trainer::synth_dataset(&cfg.synth, &cfg.network)
}

pub fn split(cfg: &PipelineConfig, data: &Dataset) -> Result<Splits> {
    data.split(cfg.split)
}

pub fn train_model(cfg: &PipelineConfig, splits: &Splits) -> Result<TrainOutcome> {
    trainer::train(&cfg.backbone()?, &splits.train, &cfg.train, cfg.seeds.init)
}

pub fn train_reference(cfg: &PipelineConfig, splits: &Splits) -> Result<TrainOutcome> {
    trainer::train_reference_without(
        cfg.surgery.modality,
        &cfg.backbone()?,
        &splits.train,
        &cfg.train,
        cfg.seeds.init,
    )
}

/// The calibration batch B: the first `calib_size` calibration samples.
pub fn calibration_batch(cfg: &PipelineConfig, calib: &Dataset) -> Result<Dataset> {
    let n = match cfg.surgery.calib_size {
        0 => calib.len(),
        n if n <= calib.len() => n,
        n => {
            return Err(MbdError::validation(format!(
                "calibration batch of {n} requested, only {} available",
                calib.len()
            )))
        }
    };
    Ok(Dataset::new(calib.samples[..n].to_vec()))
}

#[derive(Debug, Clone)]
pub struct SurgeryOutcome {
    pub proxy: ImportanceProxy,
    pub saliency: SaliencyMap,
    pub candidates: CandidateSet,
    pub plan: SurgeryPlan,
    pub post: ParameterStore,
    pub certificate: Certificate,
    pub ledger: ZcdpLedger,
    pub degenerate_rows: usize,
}

pub fn run_surgery(
    cfg: &PipelineConfig,
    pre: &ParameterStore,
    calib: &Dataset,
    ledger: &ZcdpLedger,
    issued_at: Option<String>,
) -> Result<SurgeryOutcome> {
    let bb = cfg.backbone()?;
    let s = &cfg.surgery;
    let batch = calibration_batch(cfg, calib)?;
    let stats = collect_activation_stats(&bb, pre, &batch)?;
    let proxy = compute_proxy(&stats, pre, s.chi_max)?;
    let saliency = compute_saliency(&bb, pre, &batch, s.modality)?;
    let candidates = select_candidates(&proxy.l, &saliency.values, &s.selection())?;
    let lipschitz = match s.sensitivity {
        SensitivityMethod::LipschitzScaled => Some(privacy::estimate_lipschitz(&bb, pre, &batch)?),
        SensitivityMethod::SelectedWeightNorm => None,
    };
    let plan = SurgeryPlan::build(
        s.modality,
        &candidates,
        pre,
        &cfg.privacy,
        cfg.seeds.noise,
        s.mode,
        s.sensitivity,
        lipschitz.as_ref(),
    )?;
    let post = apply_surgery(pre, &plan)?;
    let opts = IssueOptions {
        commitment_salt: s.commitment_salt.as_ref().map(|v| v.as_bytes().to_vec()),
        issued_at,
        event_description: None,
    };
    let suite = diagnostics::default_test_suite(
        cfg.diagnostics.oracle_gate,
        cfg.diagnostics.resamples,
        cfg.diagnostics.plrv_trials,
    );
    let (certificate, ledger) = certificate::issue(&plan, pre, &post, ledger, suite, &opts)?;
    Ok(SurgeryOutcome {
        proxy,
        saliency,
        candidates,
        plan,
        post,
        certificate,
        ledger,
        degenerate_rows: stats.degenerate_rows().len(),
    })
}

/// Paired pre/post measurements on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionEval {
    pub modality: ModalityId,
    /// L_re of the deleted modality.
    pub recon_pre: f64,
    pub recon_post: f64,
    /// Task loss on the split as generated.
    pub task_pre: f64,
    pub task_post: f64,
    /// Task loss with the deleted modality withheld, so fusion uses the generator.
    pub task_withheld_pre: f64,
    pub task_withheld_post: f64,
    /// Probe on fused embeddings computed with the deleted modality withheld.
    pub probe: ProbeReport,
}

impl DeletionEval {
    pub fn task_increase(&self) -> f64 {
        (self.task_post - self.task_pre) / self.task_pre
    }

    pub fn task_withheld_increase(&self) -> f64 {
        (self.task_withheld_post - self.task_withheld_pre) / self.task_withheld_pre
    }
}

pub fn evaluate_deletion(
    cfg: &PipelineConfig,
    pre: &ParameterStore,
    post: &ParameterStore,
    splits: &Splits,
) -> Result<DeletionEval> {
    let bb = cfg.backbone()?;
    let m = cfg.surgery.modality;
    let test = bb.batch(&splits.test.samples)?;
    let test_wo = test.without(m);
    let calib_wo = bb.batch(&splits.calib.samples)?.without(m);
    let y_train = probe_targets(&splits.calib, m, cfg.seeds.probe)?;
    let y_test = probe_targets(&splits.test, m, cfg.seeds.probe)?;
    let embed = |s: &ParameterStore| -> Result<ProbeData> {
        Ok(ProbeData {
            train: bb.embed(s, &calib_wo)?,
            test: bb.embed(s, &test_wo)?,
        })
    };
    Ok(DeletionEval {
        modality: m,
        recon_pre: bb.loss_re(pre, &test, m)?,
        recon_post: bb.loss_re(post, &test, m)?,
        task_pre: bb.loss_task(pre, &test)?,
        task_post: bb.loss_task(post, &test)?,
        task_withheld_pre: bb.loss_task(pre, &test_wo)?,
        task_withheld_post: bb.loss_task(post, &test_wo)?,
        probe: probe_attack(&embed(pre)?, &embed(post)?, &y_train, &y_test, &cfg.diagnostics.probe)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCheck {
    pub status: Verdict,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub checks: BTreeMap<String, NamedCheck>,
    pub oracle: Option<OracleReport>,
    pub third_derivative: Option<ThirdDerivativeReport>,
    pub concentration: ConcentrationReport,
    pub plrv: PlrvReport,
    pub recon_delta: Option<ReconDelta>,
    pub deletion: DeletionEval,
    pub selected: usize,
    pub budget_k: usize,
}

impl DiagnosticsSummary {
    pub fn passed(&self) -> bool {
        self.checks.values().all(|c| c.status != Verdict::Fail)
    }
}

fn check(pass: bool, detail: String) -> NamedCheck {
    NamedCheck {
        status: if pass { Verdict::Pass } else { Verdict::Fail },
        detail,
    }
}

pub fn run_diagnostics(
    cfg: &PipelineConfig,
    pre: &ParameterStore,
    outcome: &SurgeryOutcome,
    splits: &Splits,
    reference: Option<&ParameterStore>,
) -> Result<DiagnosticsSummary> {
    let bb = cfg.backbone()?;
    let d = &cfg.diagnostics;
    let m = cfg.surgery.modality;
    let mut checks = BTreeMap::new();

    let selected = &outcome.candidates.selected;
    let (oracle, third) = if selected.len() > d.oracle_gate {
        checks.insert(
            "loo_oracle".into(),
            NamedCheck {
                status: Verdict::Skip,
                detail: format!("{} candidates exceed the gate of {}", selected.len(), d.oracle_gate),
            },
        );
        (None, None)
    } else {
        let obj = TrainingObjective::new(&bb, &splits.calib, cfg.train.weights, d.oracle_batch)?;
        let mut report = loo_oracle(&obj, pre, selected, &outcome.proxy, d.oracle_gate)?;
        let third = estimate_m(&obj, pre, selected, d.fd_step)?;
        report.attach_m_hat(third.m_hat);
        let rho = report.spearman;
        let od = report.over_delete.rate;
        let status = match rho {
            None if selected.len() < 2 => NamedCheck {
                status: Verdict::Skip,
                detail: format!("{} candidates, rank correlation undefined", selected.len()),
            },
            _ => check(
                rho.unwrap_or(f64::NAN) >= d.spearman_min && od <= d.over_delete_max,
                format!(
                    "spearman {} (min {}), over-delete {od} (max {}), n = {}",
                    rho.map(|r| r.to_string()).unwrap_or_else(|| "undefined".into()),
                    d.spearman_min,
                    d.over_delete_max,
                    selected.len()
                ),
            ),
        };
        checks.insert("loo_oracle".into(), status);
        (Some(report), Some(third))
    };

    let calib = calibration_batch(cfg, &splits.calib)?;
    let concentration = concentration_check(
        &bb,
        pre,
        &calib,
        m,
        &cfg.surgery.selection(),
        cfg.surgery.chi_max,
        d.resamples,
        cfg.seeds.resample,
    )?;
    checks.insert(
        "concentration".into(),
        check(
            concentration.holds(),
            concentration
                .rows
                .iter()
                .map(|r| format!("eta {}: {} <= {:e}", r.eta, r.empirical, r.bound))
                .collect::<Vec<_>>()
                .join("; "),
        ),
    );

    let plan = &outcome.plan;
    let plrv = privacy::plrv_tail_check(
        plan.sensitivity.delta,
        plan.sigma,
        &plan.budget(),
        d.plrv_trials,
        cfg.seeds.plrv,
    )?;
    checks.insert(
        "plrv_tail".into(),
        check(
            plrv.pass(),
            format!(
                "empirical {} vs analytic {} (delta {})",
                plrv.empirical, plrv.analytic_two_sided, plan.delta
            ),
        ),
    );

    let deletion = evaluate_deletion(cfg, pre, &outcome.post, splits)?;
    let nothing_selected = selected.is_empty();
    let directional = |name: &str, ok: bool, detail: String, checks: &mut BTreeMap<String, NamedCheck>| {
        let c = if nothing_selected {
            NamedCheck {
                status: Verdict::Skip,
                detail: "empty selection".into(),
            }
        } else {
            check(ok, detail)
        };
        checks.insert(name.into(), c);
    };
    directional(
        "recon_forgetting",
        deletion.recon_post > deletion.recon_pre,
        format!("L_re {} -> {}", deletion.recon_pre, deletion.recon_post),
        &mut checks,
    );
    directional(
        "probe_attack",
        deletion.probe.post_accuracy < deletion.probe.pre_accuracy,
        format!(
            "accuracy {} -> {} (pre-surgery probe on post embeddings {})",
            deletion.probe.pre_accuracy, deletion.probe.post_accuracy, deletion.probe.transfer_accuracy
        ),
        &mut checks,
    );

    checks.insert(
        "task_utility".into(),
        check(
            deletion.task_increase() <= d.task_increase_max,
            format!(
                "task loss {} -> {} ({:+.2}%, max {:+.0}%); withheld modality {} -> {}",
                deletion.task_pre,
                deletion.task_post,
                100.0 * deletion.task_increase(),
                100.0 * d.task_increase_max,
                deletion.task_withheld_pre,
                deletion.task_withheld_post
            ),
        ),
    );

    let recon_delta = match reference {
        Some(r) => {
            let rd = recon_delta_check(&bb, &outcome.post, r, &splits.test, m)?;
            checks.insert(
                "recon_delta".into(),
                NamedCheck {
                    status: Verdict::Pass,
                    detail: format!("post {} vs reference {}: delta {}", rd.post, rd.reference, rd.delta),
                },
            );
            Some(rd)
        }
        None => {
            checks.insert(
                "recon_delta".into(),
                NamedCheck {
                    status: Verdict::Skip,
                    detail: "no reference model".into(),
                },
            );
            None
        }
    };

    Ok(DiagnosticsSummary {
        checks,
        oracle,
        third_derivative: third,
        concentration,
        plrv,
        recon_delta,
        deletion,
        selected: selected.len(),
        budget_k: outcome.candidates.k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epsilon,
    R,
    EtaS,
    CalibSize,
}

impl std::str::FromStr for SweepAxis {
    type Err = MbdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(SweepAxis::Epsilon),
            "r" => Ok(SweepAxis::R),
            "eta_s" | "eta-s" => Ok(SweepAxis::EtaS),
            "calib_size" | "calib-size" => Ok(SweepAxis::CalibSize),
            other => Err(MbdError::validation(format!("unknown sweep axis '{other}'"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::R => "r",
            SweepAxis::EtaS => "eta_s",
            SweepAxis::CalibSize => "calib_size",
        }
    }

    pub fn apply(self, cfg: &PipelineConfig, value: f64) -> Result<PipelineConfig> {
        let mut c = cfg.clone();
        match self {
            SweepAxis::Epsilon => c.privacy.epsilon = value,
            SweepAxis::R => c.surgery.r = value,
            SweepAxis::EtaS => c.surgery.eta_s = value,
            SweepAxis::CalibSize => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(MbdError::validation(format!(
                        "calibration size must be a positive integer, got {value}"
                    )));
                }
                c.surgery.calib_size = value as usize;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub error: Option<String>,
    pub selected: Option<usize>,
    pub mode: Option<SurgeryMode>,
    pub sigma: Option<f64>,
    pub epsilon_reported: Option<f64>,
    pub task_pre: Option<f64>,
    pub task_post: Option<f64>,
    pub recon_pre: Option<f64>,
    pub recon_post: Option<f64>,
    pub recon_delta: Option<f64>,
    pub recon_delta_reference: Option<f64>,
    pub probe_pre: Option<f64>,
    pub probe_post: Option<f64>,
}

pub const SWEEP_COLUMNS: [&str; 15] = [
    "axis",
    "value",
    "status",
    "selected",
    "mode",
    "sigma",
    "epsilon_reported",
    "task_pre",
    "task_post",
    "recon_pre",
    "recon_post",
    "recon_delta",
    "recon_delta_reference",
    "probe_pre",
    "probe_post",
];

impl SweepRow {
    fn failed(axis: SweepAxis, value: f64, e: MbdError) -> Self {
        SweepRow {
            axis,
            value,
            error: Some(e.to_string()),
            selected: None,
            mode: None,
            sigma: None,
            epsilon_reported: None,
            task_pre: None,
            task_post: None,
            recon_pre: None,
            recon_post: None,
            recon_delta: None,
            recon_delta_reference: None,
            probe_pre: None,
            probe_post: None,
        }
    }

    pub fn record(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        vec![
            self.axis.name().into(),
            self.value.to_string(),
            match &self.error {
                None => "ok".into(),
                Some(e) => format!("error: {e}"),
            },
            self.selected.map(|v| v.to_string()).unwrap_or_default(),
            self.mode.map(|m| format!("{m:?}").to_lowercase()).unwrap_or_default(),
            f(self.sigma),
            f(self.epsilon_reported),
            f(self.task_pre),
            f(self.task_post),
            f(self.recon_pre),
            f(self.recon_post),
            f(self.recon_delta),
            f(self.recon_delta_reference),
            f(self.probe_pre),
            f(self.probe_post),
        ]
    }
}

fn sweep_point(
    cfg: &PipelineConfig,
    pre: &ParameterStore,
    splits: &Splits,
    reference: Option<&ParameterStore>,
    axis: SweepAxis,
    value: f64,
) -> Result<SweepRow> {
    let c = axis.apply(cfg, value)?;
    let out = run_surgery(&c, pre, &splits.calib, &ZcdpLedger::default(), None)?;
    let ev = evaluate_deletion(&c, pre, &out.post, splits)?;
    let bb = c.backbone()?;
    let reference_delta = match reference {
        Some(r) => Some(recon_delta_check(&bb, &out.post, r, &splits.test, c.surgery.modality)?.delta),
        None => None,
    };
    Ok(SweepRow {
        axis,
        value,
        error: None,
        selected: Some(out.plan.indices.len()),
        mode: Some(out.plan.mode),
        sigma: Some(out.plan.sigma),
        epsilon_reported: Some(out.certificate.body.ledger.cumulative_epsilon),
        task_pre: Some(ev.task_pre),
        task_post: Some(ev.task_post),
        recon_pre: Some(ev.recon_pre),
        recon_post: Some(ev.recon_post),
        recon_delta: Some(ev.recon_post - ev.recon_pre),
        recon_delta_reference: reference_delta,
        probe_pre: Some(ev.probe.pre_accuracy),
        probe_post: Some(ev.probe.post_accuracy),
    })
}

/// One surgery and evaluation per value; a failing value yields an error row.
pub fn sweep(
    cfg: &PipelineConfig,
    pre: &ParameterStore,
    splits: &Splits,
    reference: Option<&ParameterStore>,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(MbdError::validation("sweep needs at least one value"));
    }
    Ok(values
        .iter()
        .map(|&v| sweep_point(cfg, pre, splits, reference, axis, v).unwrap_or_else(|e| SweepRow::failed(axis, v, e)))
        .collect())
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_oracle_csv(report: &OracleReport, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "w", "chi", "proxy", "true_delta", "remainder", "rel_error"])?;
    for e in &report.entries {
        w.write_record([
            e.index.to_string(),
            e.w.to_string(),
            e.chi.to_string(),
            e.proxy.to_string(),
            e.true_delta.to_string(),
            e.remainder.to_string(),
            e.rel_error.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_concentration_csv(report: &ConcentrationReport, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["eta", "threshold", "exceedances", "empirical", "bound", "holds"])?;
    for r in &report.rows {
        w.write_record([
            r.eta.to_string(),
            r.threshold.to_string(),
            r.exceedances.to_string(),
            r.empirical.to_string(),
            r.bound.to_string(),
            r.holds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Utility and leakage against ε, taken from an epsilon sweep.
pub fn write_tradeoff_csv(rows: &[SweepRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epsilon", "mode", "task_post", "probe_post", "recon_post"])?;
    let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows
        .iter()
        .filter(|r| r.axis == SweepAxis::Epsilon && r.error.is_none())
    {
        w.write_record([
            r.value.to_string(),
            r.mode.map(|m| format!("{m:?}").to_lowercase()).unwrap_or_default(),
            f(r.task_post),
            f(r.probe_post),
            f(r.recon_post),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Everything a full in-memory run produces.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub data: Dataset,
    pub splits: Splits,
    pub trained: TrainOutcome,
    pub reference: Option<TrainOutcome>,
    pub surgery: SurgeryOutcome,
    pub diagnostics: Option<DiagnosticsSummary>,
}

pub fn run_all(cfg: &PipelineConfig, with_reference: bool, with_diagnostics: bool) -> Result<PipelineRun> {
    let data = synthesize(cfg)?;
    let splits = split(cfg, &data)?;
    let trained = train_model(cfg, &splits)?;
    let reference = if with_reference {
        Some(train_reference(cfg, &splits)?)
    } else {
        None
    };
    let surgery = run_surgery(cfg, &trained.store, &splits.calib, &ZcdpLedger::default(), None)?;
    let diagnostics = if with_diagnostics {
        Some(run_diagnostics(
            cfg,
            &trained.store,
            &surgery,
            &splits,
            reference.as_ref().map(|r| &r.store),
        )?)
    } else {
        None
    };
    Ok(PipelineRun {
        data,
        splits,
        trained,
        reference,
        surgery,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        for c in [PipelineConfig::desk(), PipelineConfig::full(), PipelineConfig::tiny()] {
            c.validate().unwrap();
        }
        let mut bad = PipelineConfig::tiny();
        bad.surgery.calib_size = 10_000;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = PipelineConfig::desk();
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn tiny_pipeline_certifies_and_sweeps_deterministically() {
        let cfg = PipelineConfig::tiny();
        let run = run_all(&cfg, false, true).unwrap();
        let cert = &run.surgery.certificate;
        let report = certificate::verify(cert, &run.surgery.post, Some(&run.trained.store));
        assert!(report.passed(), "{report}");
        assert!(run.surgery.plan.indices.len() <= run.surgery.candidates.k);

        let rows = sweep(
            &cfg,
            &run.trained.store,
            &run.splits,
            None,
            SweepAxis::Epsilon,
            &[0.5, 2.0],
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.error.is_none()));
        assert_eq!(rows[0].mode, Some(SurgeryMode::Zero));
        assert_eq!(rows[1].mode, Some(SurgeryMode::Noise));
        // a single value matches the direct run
        assert_eq!(rows[0].selected, Some(run.surgery.plan.indices.len()));
        assert_eq!(
            rows[0].recon_post,
            Some(run.diagnostics.as_ref().unwrap().deletion.recon_post)
        );
        let again = sweep(
            &cfg,
            &run.trained.store,
            &run.splits,
            None,
            SweepAxis::Epsilon,
            &[0.5, 2.0],
        )
        .unwrap();
        assert_eq!(rows, again);

        let bad = sweep(
            &cfg,
            &run.trained.store,
            &run.splits,
            None,
            SweepAxis::CalibSize,
            &[10.0, 1e6],
        )
        .unwrap();
        assert!(bad[0].error.is_none());
        assert!(bad[1].error.as_deref().unwrap().contains("calib"));
    }
}
