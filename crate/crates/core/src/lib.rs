//! Certifiable deletion of one modality's learned contribution from a
//! multimodal network, with privacy accounting and verifiable certificates.

pub mod backbone;
pub mod certificate;
pub mod diagnostics;
pub mod error;
pub mod modality;
pub mod param_store;
pub mod pipeline;
pub mod privacy;
pub mod surgery;
pub mod trainer;

pub use backbone::{Backbone, LossWeights, NetworkConfig};
pub use certificate::{Certificate, VerifyReport};
pub use error::{MbdError, Result};
pub use modality::ModalityId;
pub use param_store::{Digest, GlobalIndex, ParameterStore, TensorEntry};
pub use pipeline::{PipelineConfig, Profile};
pub use privacy::{PrivacyBudget, ZcdpLedger};
pub use surgery::{SurgeryMode, SurgeryPlan};
pub use trainer::{Dataset, TrainConfig};
