use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::{NetworkConfig, TaskKind};
use crate::error::{MbdError, Result};
use crate::modality::ModalityId;

/// One multimodal sample. Absent modalities hold all-zero vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: [Vec<f64>; 3],
    pub present: [bool; 3],
    /// Regression target, or class id stored as a float.
    pub y: f64,
}

impl Sample {
    /// Builds a sample, zero-padding every modality marked absent.
    pub fn new(mut x: [Vec<f64>; 3], present: [bool; 3], y: f64) -> Self {
        for m in 0..3 {
            if !present[m] {
                x[m].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Sample { x, present, y }
    }

    pub fn features(&self, m: ModalityId) -> &[f64] {
        &self.x[m.index()]
    }

    pub fn is_present(&self, m: ModalityId) -> bool {
        self.present[m.index()]
    }

    /// Copy with `m` marked absent and zero-padded.
    pub fn without(&self, m: ModalityId) -> Self {
        let mut s = self.clone();
        s.present[m.index()] = false;
        s.x[m.index()].iter_mut().for_each(|v| *v = 0.0);
        s
    }

    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        for m in ModalityId::ALL {
            let got = self.x[m.index()].len();
            if got != cfg.dim(m) {
                return Err(MbdError::Dimension {
                    context: "sample features",
                    expected: cfg.dim(m),
                    got,
                });
            }
            if !self.present[m.index()] && self.x[m.index()].iter().any(|v| *v != 0.0) {
                return Err(MbdError::validation(format!(
                    "modality {m} is marked absent but not zero-padded"
                )));
            }
        }
        if !self.y.is_finite() || self.x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MbdError::NonFinite("sample".into()));
        }
        if cfg.task == TaskKind::Classification {
            let c = self.y;
            if c < 0.0 || c.fract() != 0.0 || c as usize >= cfg.classes {
                return Err(MbdError::validation(format!("class label {c} out of range")));
            }
        }
        Ok(())
    }
}

/// Dense batch view of a slice of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: [Array2<f64>; 3],
    pub mask: [Vec<bool>; 3],
    pub y: Vec<f64>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample], cfg: &NetworkConfig) -> Result<Self> {
        let n = samples.len();
        let mut x = ModalityId::ALL.map(|m| Array2::zeros((n, cfg.dim(m))));
        let mut mask = [vec![false; n], vec![false; n], vec![false; n]];
        let mut y = Vec::with_capacity(n);
        for (i, s) in samples.iter().enumerate() {
            s.validate(cfg)?;
            for m in ModalityId::ALL {
                let k = m.index();
                mask[k][i] = s.present[k];
                if s.present[k] {
                    x[k].row_mut(i).iter_mut().zip(&s.x[k]).for_each(|(d, v)| *d = *v);
                }
            }
            y.push(s.y);
        }
        Ok(Batch { x, mask, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn observed(&self, m: ModalityId) -> Vec<usize> {
        self.mask[m.index()]
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| p.then_some(i))
            .collect()
    }

    /// Copy with modality `m` withheld from every sample.
    pub fn without(&self, m: ModalityId) -> Self {
        let mut b = self.clone();
        b.x[m.index()].fill(0.0);
        b.mask[m.index()].iter_mut().for_each(|p| *p = false);
        b
    }
}
