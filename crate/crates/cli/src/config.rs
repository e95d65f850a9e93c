//! Profile defaults layered with a user TOML file.

use std::fs;
use std::path::Path;

use mbd_core::pipeline::{PipelineConfig, Profile};

use crate::{CliError, CliResult};

/// Recursively overlays `over` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn resolve(profile: Profile, file: Option<&Path>) -> CliResult<PipelineConfig> {
    let base = PipelineConfig::profile(profile);
    let Some(path) = file else {
        return Ok(base);
    };
    let text = fs::read_to_string(path).map_err(|_| CliError::MissingInput(path.to_path_buf()))?;
    let user: toml::Value = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut merged = toml::Value::try_from(&base).map_err(|e| CliError::Config(e.to_string()))?;
    merge(&mut merged, user);
    merged
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {e}", path.display())))
}

const NOTES: &[(&str, &str)] = &[
    ("surgery.modality", "modality to delete: L, A or V"),
    ("surgery.eta_s", "saliency threshold"),
    ("surgery.eta_l", "proxy-loss threshold"),
    ("surgery.r", "edit budget as a fraction of all parameters"),
    ("surgery.chi_max", "clip on the activation-share ratio"),
    (
        "surgery.calib_size",
        "calibration batch size; 0 uses the whole calibration split",
    ),
    ("surgery.sensitivity", "selected-weight-norm or lipschitz-scaled"),
    (
        "privacy.epsilon",
        "per-deletion epsilon; at most 1 selects zeroing, above 1 Gaussian noise",
    ),
    ("privacy.delta", "per-deletion delta"),
    ("train.epochs", "training epochs"),
    ("train.seed", "minibatch shuffle seed"),
    ("synth.seed", "data seed"),
    ("seeds.init", "parameter initialization seed"),
    ("seeds.noise", "surgery noise seed"),
    (
        "diagnostics.oracle_gate",
        "leave-one-out oracle refuses larger candidate sets",
    ),
    (
        "diagnostics.resamples",
        "calibration resamples for the concentration check",
    ),
    ("workers", "worker threads; 0 lets the runtime decide"),
];

/// The configuration as TOML with short notes above the main knobs.
pub fn annotated(cfg: &PipelineConfig) -> CliResult<String> {
    let body = toml::to_string_pretty(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let mut section = String::new();
    let mut out = String::new();
    for line in body.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').to_string();
        } else if let Some((key, _)) = trimmed.split_once(" = ") {
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if let Some((_, note)) = NOTES.iter().find(|(k, _)| *k == full) {
                out.push_str(&format!("# {note}\n"));
            }
        }
        out.push_str(line);
        out.push('\n');
    }
    Ok(out)
}
