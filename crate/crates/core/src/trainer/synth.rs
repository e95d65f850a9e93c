use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::backbone::{NetworkConfig, Sample, TaskKind};
use crate::error::{MbdError, Result};
use crate::modality::ModalityId;
use crate::param_store::{decode_container, encode_container, write_with_sidecar, Digest, TensorEntry, FORMAT_VERSION};

pub const DATASET_MAGIC: [u8; 4] = *b"MBDS";

/// Which modalities go missing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingRegime {
    /// Every sample carries exactly these modalities (L, A, V order).
    Pattern([bool; 3]),
    /// Each slot independently missing with probability η; all-missing draws are redrawn.
    Rate(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_samples: usize,
    pub latent_dim: usize,
    pub seed: u64,
    /// Std of modality-private noise added after mixing.
    pub noise_std: f64,
    pub label_noise: f64,
    /// Weight of the per-modality quadratic features (B_m z) ∘ (C_m z).
    pub quadratic: f64,
    pub missing: MissingRegime,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_samples: 1200,
            latent_dim: 4,
            seed: 0,
            noise_std: 0.1,
            label_noise: 0.1,
            quadratic: 0.0,
            missing: MissingRegime::Rate(0.0),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(MbdError::validation("num_samples must be positive"));
        }
        if self.latent_dim == 0 {
            return Err(MbdError::validation("latent_dim must be positive"));
        }
        if !(self.noise_std >= 0.0
            && self.noise_std.is_finite()
            && self.label_noise >= 0.0
            && self.label_noise.is_finite())
        {
            return Err(MbdError::validation("noise levels must be finite and non-negative"));
        }
        if !(self.quadratic >= 0.0 && self.quadratic.is_finite()) {
            return Err(MbdError::validation("quadratic weight must be finite and non-negative"));
        }
        match self.missing {
            MissingRegime::Pattern(p) if !p.iter().any(|&b| b) => {
                Err(MbdError::validation("missing pattern leaves no modality observed"))
            }
            MissingRegime::Rate(eta) if !(0.0..1.0).contains(&eta) => {
                Err(MbdError::validation(format!("missing rate {eta} outside [0, 1)")))
            }
            _ => Ok(()),
        }
    }
}

/// Ordered list of samples with contiguous train / calibration / test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub calib: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 800,
            calib: 200,
            test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub calib: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Copy with modality `m` marked absent (and zeroed) in every sample.
    pub fn without(&self, m: ModalityId) -> Self {
        Dataset {
            samples: self.samples.iter().map(|s| s.without(m)).collect(),
        }
    }

    pub fn split(&self, sizes: SplitSizes) -> Result<Splits> {
        let need = sizes.train + sizes.calib + sizes.test;
        if need > self.len() {
            return Err(MbdError::validation(format!(
                "splits need {need} samples, dataset has {}",
                self.len()
            )));
        }
        if sizes.train == 0 || sizes.calib == 0 || sizes.test == 0 {
            return Err(MbdError::validation("every split must be nonempty"));
        }
        let a = sizes.train;
        let b = a + sizes.calib;
        Ok(Splits {
            train: Dataset::new(self.samples[..a].to_vec()),
            calib: Dataset::new(self.samples[a..b].to_vec()),
            test: Dataset::new(self.samples[b..need].to_vec()),
        })
    }

    fn entries(&self) -> Result<Vec<TensorEntry>> {
        let n = self.len();
        if n == 0 {
            return Err(MbdError::validation("cannot serialize an empty dataset"));
        }
        let mut out = Vec::new();
        for m in ModalityId::ALL {
            let d = self.samples[0].features(m).len();
            let mut vals = Vec::with_capacity(n * d);
            for s in &self.samples {
                if s.features(m).len() != d {
                    return Err(MbdError::validation(format!("ragged features for modality {m}")));
                }
                vals.extend_from_slice(s.features(m));
            }
            out.push(TensorEntry::new(format!("x.{m}"), vec![n, d], vals)?);
        }
        let mask = self
            .samples
            .iter()
            .flat_map(|s| s.present.map(|p| if p { 1.0 } else { 0.0 }))
            .collect();
        out.push(TensorEntry::new("mask", vec![n, 3], mask)?);
        out.push(TensorEntry::new(
            "label",
            vec![n],
            self.samples.iter().map(|s| s.y).collect(),
        )?);
        Ok(out)
    }

    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        Ok(encode_container(DATASET_MAGIC, FORMAT_VERSION, &self.entries()?))
    }

    pub fn digest(&self) -> Result<Digest> {
        Ok(Digest::of_bytes(&self.canonical_bytes()?))
    }

    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<Self> {
        let (version, entries) = decode_container(bytes, DATASET_MAGIC)?;
        if version != FORMAT_VERSION {
            return Err(MbdError::Format(format!("unsupported dataset version {version}")));
        }
        let names: Vec<&str> = entries.iter().map(|e| e.name()).collect();
        if names != ["x.L", "x.A", "x.V", "mask", "label"] {
            return Err(MbdError::Format(format!("unexpected dataset sections {names:?}")));
        }
        let n = entries[4].len();
        let mut cols = Vec::with_capacity(3);
        for e in &entries[..3] {
            if e.shape().len() != 2 || e.shape()[0] != n {
                return Err(MbdError::Format(format!(
                    "section {} has shape {:?}",
                    e.name(),
                    e.shape()
                )));
            }
            cols.push(e.shape()[1]);
        }
        if entries[3].shape() != [n, 3] {
            return Err(MbdError::Format("mask section must be [N, 3]".into()));
        }
        let mask = entries[3].values();
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let x = [0, 1, 2].map(|k| entries[k].values()[i * cols[k]..(i + 1) * cols[k]].to_vec());
            let mut present = [false; 3];
            for k in 0..3 {
                present[k] = match mask[i * 3 + k] {
                    1.0 => true,
                    0.0 => false,
                    v => return Err(MbdError::Format(format!("mask value {v} is not 0 or 1"))),
                };
                if !present[k] && x[k].iter().any(|&v| v != 0.0) {
                    return Err(MbdError::Format(format!(
                        "sample {i}: absent modality has nonzero features"
                    )));
                }
            }
            samples.push(Sample {
                x,
                present,
                y: entries[4].values()[i],
            });
        }
        Ok(Dataset { samples })
    }

    pub fn write_file(&self, path: &Path) -> Result<Digest> {
        write_with_sidecar(path, &self.canonical_bytes()?)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::from_canonical_bytes(&std::fs::read(path)?)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Shared-latent generator: x_m = A_m z + q (B_m z) ∘ (C_m z) + noise,
/// y = w·z + noise.
pub fn synth_dataset(spec: &SynthSpec, cfg: &NetworkConfig) -> Result<Dataset> {
    spec.validate()?;
    cfg.validate()?;
    let k = spec.latent_dim;
    let scale = (1.0 / k as f64).sqrt();
    // mixing matrices and readout come from their own stream so that the
    // per-sample stream does not shift them
    let mut mix_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    mix_rng.set_stream(1);
    let mixing: Vec<Array2<f64>> = ModalityId::ALL
        .iter()
        .map(|&m| Array2::from_shape_fn((cfg.dim(m), k), |_| scale * gaussian(&mut mix_rng)))
        .collect();
    let readout: Vec<f64> = (0..k).map(|_| scale * gaussian(&mut mix_rng)).collect();
    // drawn last so that q = 0 leaves every other draw unchanged
    let quad: Vec<[Array2<f64>; 2]> = if spec.quadratic > 0.0 {
        ModalityId::ALL
            .iter()
            .map(|&m| [0, 1].map(|_| Array2::from_shape_fn((cfg.dim(m), k), |_| scale * gaussian(&mut mix_rng))))
            .collect()
    } else {
        Vec::new()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let mut samples = Vec::with_capacity(spec.num_samples);
    for _ in 0..spec.num_samples {
        let z: Vec<f64> = (0..k).map(|_| gaussian(&mut rng)).collect();
        let x = [0, 1, 2].map(|i| {
            let a = &mixing[i];
            (0..a.nrows())
                .map(|r| {
                    let mut clean: f64 = (0..k).map(|c| a[[r, c]] * z[c]).sum();
                    if let Some([b, c]) = quad.get(i) {
                        let u: f64 = (0..k).map(|j| b[[r, j]] * z[j]).sum();
                        let v: f64 = (0..k).map(|j| c[[r, j]] * z[j]).sum();
                        clean += spec.quadratic * u * v;
                    }
                    clean + spec.noise_std * gaussian(&mut rng)
                })
                .collect::<Vec<f64>>()
        });
        let score: f64 =
            readout.iter().zip(&z).map(|(w, v)| w * v).sum::<f64>() + spec.label_noise * gaussian(&mut rng);
        let y = match cfg.task {
            TaskKind::Regression => score,
            TaskKind::Classification => {
                // equal-mass bins of a standard-normal-ish score
                let c = cfg.classes as f64;
                let u = 0.5 * (1.0 + erf(score / std::f64::consts::SQRT_2));
                (u * c).floor().clamp(0.0, c - 1.0)
            }
        };
        let present = match spec.missing {
            MissingRegime::Pattern(p) => p,
            MissingRegime::Rate(eta) => loop {
                let p = [0; 3].map(|_| rng.random::<f64>() >= eta);
                if p.iter().any(|&b| b) {
                    break p;
                }
            },
        };
        samples.push(Sample::new(x, present, y));
    }
    Ok(Dataset { samples })
}
