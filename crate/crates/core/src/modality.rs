use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::MbdError;

/// Input channel of a multimodal sample: text (`L`), audio (`A`) or visual (`V`).
///
/// Ordinal order `L < A < V` is the serialization order everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModalityId {
    L,
    A,
    V,
}

impl ModalityId {
    pub const ALL: [ModalityId; 3] = [ModalityId::L, ModalityId::A, ModalityId::V];

    pub fn index(self) -> usize {
        match self {
            ModalityId::L => 0,
            ModalityId::A => 1,
            ModalityId::V => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn tag(self) -> &'static str {
        match self {
            ModalityId::L => "L",
            ModalityId::A => "A",
            ModalityId::V => "V",
        }
    }

    /// The two other modalities, in ordinal order.
    pub fn others(self) -> [ModalityId; 2] {
        match self {
            ModalityId::L => [ModalityId::A, ModalityId::V],
            ModalityId::A => [ModalityId::L, ModalityId::V],
            ModalityId::V => [ModalityId::L, ModalityId::A],
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModalityId {
    type Err = MbdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "L" | "l" | "text" => Ok(ModalityId::L),
            "A" | "a" | "audio" => Ok(ModalityId::A),
            "V" | "v" | "visual" => Ok(ModalityId::V),
            other => Err(MbdError::validation(format!("unknown modality '{other}'"))),
        }
    }
}
