//! Modality deletion certificates: issuance and independent verification.
//!
//! A certificate file is `{"body": .., "body_sha256": .., "issued_at": ..}`.
//! The body is hashed in canonical form (key-sorted JSON, shortest
//! round-trip floats); the timestamp sits outside it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{MbdError, Result};
use crate::modality::ModalityId;
use crate::param_store::{role_tags_for, write_with_sidecar, GlobalIndex, ParameterStore};
use crate::privacy::{self, SensitivityBound, ZcdpEvent, ZcdpLedger};
use crate::surgery::{apply_surgery, budget_count, noise_stream, SurgeryMode, SurgeryPlan};

pub const SCHEMA_VERSION: u32 = 1;
pub const CERT_EXTENSION: &str = "mdc.json";
pub const ZERO_MODE_NOTE: &str = "deterministic mode: noise guarantee inapplicable";

/// A named diagnostic with its thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSpec {
    pub name: String,
    pub params: BTreeMap<String, f64>,
}

impl TestSpec {
    pub fn new(name: &str, params: &[(&str, f64)]) -> Self {
        TestSpec {
            name: name.into(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SeedRecord {
    Disclosed {
        seed: u64,
    },
    /// SHA-256 over the seed's little-endian bytes followed by the salt.
    Commitment {
        sha256: String,
    },
}

pub fn seed_commitment(seed: u64, salt: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(salt);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerSnapshot {
    pub events: Vec<ZcdpEvent>,
    pub cumulative_rho: f64,
    pub cumulative_epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateBody {
    pub schema_version: u32,
    pub deleted_modality: ModalityId,
    pub indices: Vec<GlobalIndex>,
    pub mode: SurgeryMode,
    pub mode_override: bool,
    pub seed: SeedRecord,
    pub sigma: f64,
    pub epsilon_mod: f64,
    pub delta_mod: f64,
    pub budget_r: f64,
    pub param_count: usize,
    pub sensitivity: SensitivityBound,
    /// ρ charged for this event.
    pub rho: f64,
    pub ledger: LedgerSnapshot,
    /// True when every index lies in a tensor owned by the deleted modality.
    pub modality_scoped: bool,
    pub pre_surgery_digest: String,
    pub post_surgery_digest: String,
    pub test_suite: Vec<TestSpec>,
    pub annotations: Vec<String>,
}

impl CertificateBody {
    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        // serde_json maps are ordered by key
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_vec(&value)?)
    }

    pub fn digest_hex(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_bytes()?)))
    }

    /// The surgery plan, when the seed is disclosed.
    pub fn plan(&self) -> Option<SurgeryPlan> {
        let SeedRecord::Disclosed { seed } = self.seed else {
            return None;
        };
        Some(SurgeryPlan {
            modality: self.deleted_modality,
            indices: self.indices.clone(),
            mode: self.mode,
            mode_override: self.mode_override,
            sigma: self.sigma,
            seed,
            epsilon: self.epsilon_mod,
            delta: self.delta_mod,
            budget_r: self.budget_r,
            param_count: self.param_count,
            sensitivity: self.sensitivity.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificate {
    pub body: CertificateBody,
    pub body_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issued_at: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct IssueOptions {
    /// Commit to the seed with this salt instead of disclosing it.
    pub commitment_salt: Option<Vec<u8>>,
    pub issued_at: Option<String>,
    pub event_description: Option<String>,
}

/// Certificate for `plan` applied to `pre`, plus the ledger with this event
/// composed in.
pub fn issue(
    plan: &SurgeryPlan,
    pre: &ParameterStore,
    post: &ParameterStore,
    ledger: &ZcdpLedger,
    test_suite: Vec<TestSpec>,
    opts: &IssueOptions,
) -> Result<(Certificate, ZcdpLedger)> {
    let expected = apply_surgery(pre, plan)?;
    if expected.digest() != post.digest() {
        return Err(MbdError::Certificate(format!(
            "post-surgery store digest {} does not match the plan applied to the pre-surgery store ({})",
            post.digest().to_hex(),
            expected.digest().to_hex()
        )));
    }
    if plan.param_count != pre.len() {
        return Err(MbdError::Certificate("plan was built for a different store".into()));
    }
    let rho = privacy::gaussian_rho(plan.sensitivity.delta, plan.sigma)?;
    let mut ledger = ledger.clone();
    let desc = opts
        .event_description
        .clone()
        .unwrap_or_else(|| format!("delete modality {} ({} coordinates)", plan.modality, plan.indices.len()));
    ledger.compose(rho, desc, None)?;
    let seed = match &opts.commitment_salt {
        Some(salt) => SeedRecord::Commitment {
            sha256: seed_commitment(plan.seed, salt),
        },
        None => SeedRecord::Disclosed { seed: plan.seed },
    };
    let mut annotations = Vec::new();
    if plan.mode == SurgeryMode::Zero {
        annotations.push(ZERO_MODE_NOTE.to_string());
    }
    if plan.mode_override {
        annotations.push(format!("mode forced to {:?}", plan.mode).to_lowercase());
    }
    let body = CertificateBody {
        schema_version: SCHEMA_VERSION,
        deleted_modality: plan.modality,
        indices: plan.indices.clone(),
        mode: plan.mode,
        mode_override: plan.mode_override,
        seed,
        sigma: plan.sigma,
        epsilon_mod: plan.epsilon,
        delta_mod: plan.delta,
        budget_r: plan.budget_r,
        param_count: plan.param_count,
        sensitivity: plan.sensitivity.clone(),
        rho,
        ledger: LedgerSnapshot {
            cumulative_rho: ledger.cumulative_rho(),
            cumulative_epsilon: ledger.cumulative_epsilon(plan.delta)?,
            events: ledger.events.clone(),
        },
        modality_scoped: in_scope(&plan.indices, plan.modality),
        pre_surgery_digest: pre.digest().to_hex(),
        post_surgery_digest: post.digest().to_hex(),
        test_suite,
        annotations,
    };
    let cert = Certificate {
        body_sha256: body.digest_hex()?,
        body,
        issued_at: opts.issued_at.clone(),
    };
    Ok((cert, ledger))
}

fn in_scope(indices: &[GlobalIndex], m: ModalityId) -> bool {
    indices.iter().all(|g| {
        role_tags_for(&g.entry_name)
            .iter()
            .any(|t| t.split_once(':').map(|(_, tag)| tag) == Some(m.tag()))
    })
}

impl Certificate {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a certificate; malformed input is a format error, never a FAIL.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| MbdError::Format(format!("malformed certificate: {e}")))
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        write_with_sidecar(path, self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: CheckStatus,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.checks
            .iter()
            .filter(|c| c.status == CheckStatus::Fail)
            .map(|c| c.name)
            .collect()
    }

    pub fn status(&self, name: &str) -> Option<CheckStatus> {
        self.checks.iter().find(|c| c.name == name).map(|c| c.status)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = match c.status {
                CheckStatus::Pass => "PASS",
                CheckStatus::Fail => "FAIL",
                CheckStatus::Skip => "SKIP",
            };
            writeln!(f, "CHECK {} {status} {}", c.name, c.reason)?;
        }
        if self.passed() {
            writeln!(f, "ALL CHECKS PASS")
        } else {
            writeln!(f, "VERIFICATION FAILED: {}", self.failed().join(", "))
        }
    }
}

struct Checks(Vec<CheckResult>);

impl Checks {
    fn push(&mut self, name: &'static str, outcome: std::result::Result<String, String>) {
        let (status, reason) = match outcome {
            Ok(r) => (CheckStatus::Pass, r),
            Err(r) => (CheckStatus::Fail, r),
        };
        self.0.push(CheckResult { name, status, reason });
    }

    fn skip(&mut self, name: &'static str, reason: &str) {
        self.0.push(CheckResult {
            name,
            status: CheckStatus::Skip,
            reason: reason.into(),
        });
    }
}

fn is_hex64(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

/// Runs every applicable check. Checks needing the pre-surgery store are
/// skipped when it is absent.
pub fn verify(cert: &Certificate, post: &ParameterStore, pre: Option<&ParameterStore>) -> VerifyReport {
    let b = &cert.body;
    let mut out = Checks(Vec::new());

    out.push("schema", {
        if b.schema_version != SCHEMA_VERSION {
            Err(format!(
                "schema version {} unsupported (expected {SCHEMA_VERSION})",
                b.schema_version
            ))
        } else if !is_hex64(&b.pre_surgery_digest) || !is_hex64(&b.post_surgery_digest) {
            Err("digests must be 64 lowercase hex characters".into())
        } else {
            Ok(format!("version {SCHEMA_VERSION}"))
        }
    });

    out.push("body_digest", {
        match b.digest_hex() {
            Ok(d) if d == cert.body_sha256 => Ok("canonical body hash matches".into()),
            Ok(d) => Err(format!("recorded {} but body hashes to {d}", cert.body_sha256)),
            Err(e) => Err(e.to_string()),
        }
    });

    let post_hex = post.digest().to_hex();
    out.push("post_digest", {
        if post_hex == b.post_surgery_digest {
            Ok(post_hex.clone())
        } else {
            Err(format!(
                "store hashes to {post_hex}, certificate records {}",
                b.post_surgery_digest
            ))
        }
    });

    // resolved flat positions, shared by later checks
    let flat: std::result::Result<Vec<usize>, String> = b
        .indices
        .iter()
        .map(|g| post.unflatten(g).map_err(|e| e.to_string()))
        .collect();

    out.push("index_budget", {
        let cap = budget_count(b.budget_r, b.param_count);
        match &flat {
            Err(e) => Err(format!("unresolvable index: {e}")),
            Ok(_) if b.param_count != post.len() => Err(format!(
                "certificate records |W| = {}, store has {}",
                b.param_count,
                post.len()
            )),
            Ok(_) if !(b.budget_r > 0.0 && b.budget_r <= 1.0) => {
                Err(format!("budget r = {} outside (0, 1]", b.budget_r))
            }
            Ok(f) => {
                let mut sorted = f.clone();
                sorted.sort_unstable();
                if sorted.windows(2).any(|w| w[0] == w[1]) {
                    Err("duplicate index".into())
                } else if f.len() > cap {
                    Err(format!("{} indices exceed floor(r |W|) = {cap}", f.len()))
                } else {
                    Ok(format!("{} <= {cap}", f.len()))
                }
            }
        }
    });

    out.push("modality_scope", {
        let actual = in_scope(&b.indices, b.deleted_modality);
        if !b.modality_scoped || actual {
            Ok(if b.modality_scoped {
                format!("all indices owned by modality {}", b.deleted_modality)
            } else {
                "unscoped selection declared".into()
            })
        } else {
            Err(format!(
                "an index lies outside tensors of modality {}",
                b.deleted_modality
            ))
        }
    });

    match (b.mode, &flat) {
        (SurgeryMode::Zero, Ok(f)) => out.push("zero_coordinates", {
            match f
                .iter()
                .find(|&&i| post.value_at(i).map(|v| v.to_bits() != 0).unwrap_or(true))
            {
                Some(&i) => Err(format!(
                    "coordinate {} is not exactly 0.0",
                    post.flatten(i).map(|g| g.to_string()).unwrap_or_default()
                )),
                None => Ok(format!("{} coordinates read 0.0", f.len())),
            }
        }),
        (SurgeryMode::Zero, Err(e)) => out.push("zero_coordinates", Err(e.clone())),
        (SurgeryMode::Noise, _) => out.skip("zero_coordinates", "noise mode"),
    }

    out.push("budget_arithmetic", budget_arithmetic(b));

    let Some(pre) = pre else {
        for name in ["pre_digest", "sensitivity", "untouched_coordinates", "noise_stream"] {
            out.skip(name, "pre-surgery store not supplied");
        }
        return VerifyReport { checks: out.0 };
    };

    let pre_hex = pre.digest().to_hex();
    out.push("pre_digest", {
        if pre_hex == b.pre_surgery_digest {
            Ok(pre_hex.clone())
        } else {
            Err(format!(
                "store hashes to {pre_hex}, certificate records {}",
                b.pre_surgery_digest
            ))
        }
    });

    out.push("sensitivity", {
        match privacy::bound_sensitivity(&b.indices, pre, privacy::SensitivityMethod::SelectedWeightNorm, None) {
            Err(e) => Err(e.to_string()),
            Ok(s) => {
                let delta = b.sensitivity.scale * s.delta;
                if b.sensitivity.method == privacy::SensitivityMethod::SelectedWeightNorm && b.sensitivity.scale != 1.0
                {
                    Err(format!("selected-weight-norm bound with scale {}", b.sensitivity.scale))
                } else if !same(delta, b.sensitivity.delta) {
                    Err(format!("recomputed delta {delta}, recorded {}", b.sensitivity.delta))
                } else if b.sensitivity.inputs_digest != pre_hex {
                    Err("bound computed from a different store".into())
                } else {
                    Ok(format!("delta = {delta}"))
                }
            }
        }
    });

    let diff = pre.bitwise_diff(post);
    out.push("untouched_coordinates", {
        match (&diff, &flat) {
            (Err(e), _) => Err(e.to_string()),
            (_, Err(e)) => Err(e.clone()),
            (Ok(d), Ok(f)) => match d.iter().find(|i| !f.contains(i)) {
                Some(&i) => Err(format!(
                    "unlisted coordinate {} changed",
                    post.flatten(i).map(|g| g.to_string()).unwrap_or_else(|_| i.to_string())
                )),
                None => Ok(format!("{} coordinates differ, all listed", d.len())),
            },
        }
    });

    match (b.mode, &b.seed, &flat) {
        (SurgeryMode::Zero, _, _) => out.skip("noise_stream", "zero mode"),
        (SurgeryMode::Noise, SeedRecord::Commitment { .. }, _) => {
            out.skip("noise_stream", "seed committed, not disclosed")
        }
        (SurgeryMode::Noise, SeedRecord::Disclosed { seed }, Ok(f)) => out.push("noise_stream", {
            let mut sorted = f.clone();
            sorted.sort_unstable();
            let z = noise_stream(*seed, sorted.len());
            let bad = sorted
                .iter()
                .zip(&z)
                .find(|&(&i, z)| match (pre.value_at(i), post.value_at(i)) {
                    (Ok(a), Ok(p)) => !same(a + b.sigma * z, p),
                    _ => true,
                });
            match bad {
                Some((&i, _)) => Err(format!(
                    "coordinate {} does not match the seeded stream",
                    post.flatten(i).map(|g| g.to_string()).unwrap_or_default()
                )),
                None => Ok(format!("{} draws reproduced", sorted.len())),
            }
        }),
        (SurgeryMode::Noise, _, Err(e)) => out.push("noise_stream", Err(e.clone())),
    }

    VerifyReport { checks: out.0 }
}

fn budget_arithmetic(b: &CertificateBody) -> std::result::Result<String, String> {
    let budget = privacy::PrivacyBudget::new(b.epsilon_mod, b.delta_mod).map_err(|e| e.to_string())?;
    let sigma = privacy::calibrate_sigma(&b.sensitivity, &budget).map_err(|e| e.to_string())?;
    if !same(sigma, b.sigma) {
        return Err(format!("sigma recomputes to {sigma}, recorded {}", b.sigma));
    }
    let rho = privacy::gaussian_rho(b.sensitivity.delta, sigma).map_err(|e| e.to_string())?;
    if !same(rho, b.rho) {
        return Err(format!("rho recomputes to {rho}, recorded {}", b.rho));
    }
    match b.ledger.events.last() {
        Some(e) if same(e.rho, rho) => {}
        _ => return Err("ledger does not end with this event".into()),
    }
    let ledger = ZcdpLedger {
        events: b.ledger.events.clone(),
    };
    let cum = ledger.cumulative_rho();
    if !same(cum, b.ledger.cumulative_rho) {
        return Err(format!(
            "cumulative rho recomputes to {cum}, recorded {}",
            b.ledger.cumulative_rho
        ));
    }
    let eps = ledger.cumulative_epsilon(b.delta_mod).map_err(|e| e.to_string())?;
    if !same(eps, b.ledger.cumulative_epsilon) {
        return Err(format!(
            "cumulative epsilon recomputes to {eps}, recorded {}",
            b.ledger.cumulative_epsilon
        ));
    }
    Ok(format!("sigma = {sigma}, rho = {rho}, cumulative epsilon = {eps}"))
}

/// True when `seed` and `salt` open the certificate's seed commitment.
pub fn open_commitment(cert: &Certificate, seed: u64, salt: &[u8]) -> bool {
    matches!(&cert.body.seed, SeedRecord::Commitment { sha256 } if *sha256 == seed_commitment(seed, salt))
}
