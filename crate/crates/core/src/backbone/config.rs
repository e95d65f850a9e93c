use serde::{Deserialize, Serialize};

use crate::error::{MbdError, Result};
use crate::modality::ModalityId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Widths of every sub-network. Each of DE, G, B, F and C has one tanh hidden
/// layer; DE has two linear heads (sample-specific and invariant parts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub d_l: usize,
    pub d_a: usize,
    pub d_v: usize,
    /// Property-embedding dimension.
    pub d_p: usize,
    pub hidden_decomp: usize,
    pub hidden_gen: usize,
    pub hidden_bt: usize,
    pub hidden_fusion: usize,
    pub fused_dim: usize,
    pub hidden_head: usize,
    pub task: TaskKind,
    /// Number of classes; ignored for regression.
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_classes() -> usize {
    2
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkConfig {
    /// Desk-scale dimensions.
    pub fn desk() -> Self {
        NetworkConfig {
            d_l: 32,
            d_a: 12,
            d_v: 16,
            d_p: 8,
            hidden_decomp: 16,
            hidden_gen: 32,
            hidden_bt: 16,
            hidden_fusion: 32,
            fused_dim: 16,
            hidden_head: 16,
            task: TaskKind::Regression,
            classes: 2,
        }
    }

    /// Feature dimensions of the frozen encoders (768/74/512) and d_p = 128.
    pub fn full_dims() -> Self {
        NetworkConfig {
            d_l: 768,
            d_a: 74,
            d_v: 512,
            d_p: 128,
            hidden_decomp: 128,
            hidden_gen: 256,
            hidden_bt: 128,
            hidden_fusion: 256,
            fused_dim: 128,
            hidden_head: 64,
            ..Self::desk()
        }
    }

    /// A configuration small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        NetworkConfig {
            d_l: 4,
            d_a: 3,
            d_v: 3,
            d_p: 2,
            hidden_decomp: 3,
            hidden_gen: 3,
            hidden_bt: 3,
            hidden_fusion: 4,
            fused_dim: 3,
            hidden_head: 3,
            task: TaskKind::Regression,
            classes: 2,
        }
    }

    pub fn dim(&self, m: ModalityId) -> usize {
        match m {
            ModalityId::L => self.d_l,
            ModalityId::A => self.d_a,
            ModalityId::V => self.d_v,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            TaskKind::Regression => 1,
            TaskKind::Classification => self.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("d_l", self.d_l),
            ("d_a", self.d_a),
            ("d_v", self.d_v),
            ("d_p", self.d_p),
            ("hidden_decomp", self.hidden_decomp),
            ("hidden_gen", self.hidden_gen),
            ("hidden_bt", self.hidden_bt),
            ("hidden_fusion", self.hidden_fusion),
            ("fused_dim", self.fused_dim),
            ("hidden_head", self.hidden_head),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, w)| *w == 0) {
            return Err(MbdError::validation(format!("network width {name} must be >= 1")));
        }
        if self.task == TaskKind::Classification && self.classes < 2 {
            return Err(MbdError::validation("classification needs at least 2 classes"));
        }
        Ok(())
    }

    /// Ordered (name, shape) list of every parameter tensor.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut dense = |prefix: String, rows: usize, cols: usize| {
            out.push((format!("{prefix}.w"), vec![rows, cols]));
            out.push((format!("{prefix}.b"), vec![rows]));
        };
        let mut props = Vec::new();
        for m in ModalityId::ALL {
            let d_m = self.dim(m);
            let [o1, o2] = m.others();
            props.push((format!("prop.{m}"), vec![self.d_p]));
            dense(format!("de.{m}.hidden"), self.hidden_decomp, d_m);
            dense(format!("de.{m}.sigma"), self.d_p, self.hidden_decomp);
            dense(format!("de.{m}.mu"), self.d_p, self.hidden_decomp);
            dense(format!("recomb.{m}"), d_m, 2 * self.d_p);
            dense(
                format!("gen.{m}.hidden"),
                self.hidden_gen,
                self.dim(o1) + self.dim(o2) + self.d_p,
            );
            dense(format!("gen.{m}.out"), d_m, self.hidden_gen);
            dense(format!("bt.{m}.hidden"), self.hidden_bt, self.fused_dim);
            dense(format!("bt.{m}.out"), self.d_p, self.hidden_bt);
        }
        dense(
            "fusion.hidden".into(),
            self.hidden_fusion,
            self.d_l + self.d_a + self.d_v,
        );
        dense("fusion.out".into(), self.fused_dim, self.hidden_fusion);
        dense("head.hidden".into(), self.hidden_head, self.fused_dim);
        dense("head.out".into(), self.output_dim(), self.hidden_head);
        let mut all = props;
        all.extend(out);
        all
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// How the per-sample inner product ⟨Σ_i, μ_i⟩ enters the orthogonality term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthoForm {
    /// ⟨Σ_i, μ_i⟩²: bounded below, zero iff orthogonal.
    #[default]
    Squared,
    /// The signed inner product. Unbounded below; SGD on it diverges.
    Raw,
}

/// Loss weights and hyper-parameters of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Tolerated squared deviation of P^m from the invariant batch mean.
    pub margin_eps: f64,
    #[serde(default)]
    pub or_form: OrthoForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
            tau: 0.1,
            margin_eps: 0.01,
            or_form: OrthoForm::Squared,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha, self.beta, self.gamma, self.margin_eps]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && self.tau.is_finite()
            && self.tau > 0.0;
        if ok {
            Ok(())
        } else {
            Err(MbdError::validation(format!(
                "loss weights must be non-negative with tau > 0, got {self:?}"
            )))
        }
    }
}
