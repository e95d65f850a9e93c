//! Desk-scale property-aware multimodal network.
//!
//! Per modality m: a decomposition net DE_m splits x_m into a sample-specific
//! part Σ and an invariant part μ, a linear recombiner rebuilds x_m from
//! (Σ, μ), and a generator G_m reconstructs x_m from the other (zero-padded)
//! modalities plus the property embedding P^m. Fusion F consumes observed
//! features, substituting G_m output for absent ones, and feeds the task head
//! C and back-translation nets B_m. Gradients are exact reverse mode over
//! this fixed graph.

mod backward;
mod batch;
mod config;
mod forward;
mod objective;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use batch::{Batch, Sample};
pub use config::{LossWeights, NetworkConfig, OrthoForm, TaskKind};
pub use forward::{Forward, ModalForward};
pub use objective::{Evaluation, LossBreakdown, ModalTerms, PeTerms, TermCoefficients};

use crate::error::{MbdError, Result};
use crate::modality::ModalityId;
use crate::param_store::{ParameterStore, TensorEntry};
use forward::{dense, row_vec, single_row, tanh_layer, Params};

/// Output of the decomposition operator for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub sigma: Vec<f64>,
    pub mu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    cfg: NetworkConfig,
}

impl Backbone {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Backbone { cfg })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Seeded initialization: weights N(0, 1/fan_in), zero biases, P^m ~ N(0, 0.1²).
    pub fn init_store(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = self
            .cfg
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let scale = if name.starts_with("prop.") {
                    0.1
                } else if name.ends_with(".w") {
                    (1.0 / shape[1] as f64).sqrt()
                } else {
                    0.0
                };
                let values = if scale == 0.0 {
                    vec![0.0; n]
                } else {
                    (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            scale * z
                        })
                        .collect()
                };
                TensorEntry::new(name, shape, values)
            })
            .collect::<Result<Vec<_>>>()?;
        ParameterStore::new(entries)
    }

    pub fn zero_store(&self) -> Result<ParameterStore> {
        let entries = self
            .cfg
            .layout()
            .into_iter()
            .map(|(name, shape)| TensorEntry::zeros(name, shape))
            .collect::<Result<Vec<_>>>()?;
        ParameterStore::new(entries)
    }

    pub fn batch(&self, samples: &[Sample]) -> Result<Batch> {
        Batch::from_samples(samples, &self.cfg)
    }

    pub fn forward(&self, store: &ParameterStore, batch: &Batch) -> Result<Forward> {
        let p = Params::bind(store, &self.cfg)?;
        forward::forward(&p, &self.cfg, batch)
    }

    pub fn evaluate(&self, store: &ParameterStore, batch: &Batch, weights: &LossWeights) -> Result<Evaluation> {
        let p = Params::bind(store, &self.cfg)?;
        let fw = forward::forward(&p, &self.cfg, batch)?;
        let c = TermCoefficients::total(weights);
        Ok(objective::evaluate(&p, &self.cfg, &fw, batch, weights, &c, false)?.0)
    }

    pub fn total_loss(&self, store: &ParameterStore, batch: &Batch, weights: &LossWeights) -> Result<LossBreakdown> {
        let e = self.evaluate(store, batch, weights)?;
        let b = LossBreakdown::from_evaluation(&e, weights);
        b.check_finite()?;
        Ok(b)
    }

    /// Value and exact gradient of the objective selected by `coeffs`.
    pub fn objective_grad(
        &self,
        store: &ParameterStore,
        batch: &Batch,
        weights: &LossWeights,
        coeffs: &TermCoefficients,
    ) -> Result<(Evaluation, Vec<f64>)> {
        let p = Params::bind(store, &self.cfg)?;
        let fw = forward::forward(&p, &self.cfg, batch)?;
        let (e, seeds) = objective::evaluate(&p, &self.cfg, &fw, batch, weights, coeffs, true)?;
        let g = backward::backward(&p, &self.cfg, store, &fw, &seeds.expect("seeds requested"));
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(MbdError::NonFinite(format!("gradient at flat index {pos}")));
        }
        Ok((e, g))
    }

    /// Gradient of Σ_i out[i, j] with respect to every stored coordinate;
    /// for a one-sample batch this is row j of the output Jacobian.
    pub fn output_grad(&self, store: &ParameterStore, batch: &Batch, j: usize) -> Result<Vec<f64>> {
        let p = Params::bind(store, &self.cfg)?;
        let fw = forward::forward(&p, &self.cfg, batch)?;
        if j >= fw.out.ncols() {
            return Err(MbdError::IndexOutOfRange {
                index: j,
                len: fw.out.ncols(),
            });
        }
        let mut seeds = objective::Seeds::zeros(&fw, self.cfg.d_p);
        seeds.d_out.column_mut(j).fill(1.0);
        Ok(backward::backward(&p, &self.cfg, store, &fw, &seeds))
    }

    /// Total loss and its gradient with respect to every stored coordinate.
    pub fn grad(
        &self,
        store: &ParameterStore,
        batch: &Batch,
        weights: &LossWeights,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let (e, g) = self.objective_grad(store, batch, weights, &TermCoefficients::total(weights))?;
        let b = LossBreakdown::from_evaluation(&e, weights);
        b.check_finite()?;
        Ok((b, g))
    }

    pub fn decompose(&self, store: &ParameterStore, x_m: &[f64], m: ModalityId) -> Result<Decomposition> {
        self.check_dim(x_m.len(), self.cfg.dim(m), "decompose input")?;
        let p = Params::bind(store, &self.cfg)?;
        let (sigma, mu) = decompose_rows(&p, &single_row(x_m), m);
        Ok(Decomposition {
            sigma: row_vec(&sigma),
            mu: row_vec(&mu),
        })
    }

    /// Batched decomposition; row i equals `decompose` of row i.
    pub fn decompose_batch(
        &self,
        store: &ParameterStore,
        xs: &Array2<f64>,
        m: ModalityId,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_dim(xs.ncols(), self.cfg.dim(m), "decompose input")?;
        let p = Params::bind(store, &self.cfg)?;
        Ok(decompose_rows(&p, xs, m))
    }

    /// Generator reconstruction of modality `m` from the sample's other
    /// modalities (absent ones zero-padded) and P^m.
    pub fn generate(&self, store: &ParameterStore, sample: &Sample, m: ModalityId) -> Result<Vec<f64>> {
        sample.validate(&self.cfg)?;
        let p = Params::bind(store, &self.cfg)?;
        let [o1, o2] = m.others();
        let mut input = Vec::new();
        input.extend_from_slice(sample.features(o1));
        input.extend_from_slice(sample.features(o2));
        input.extend(p.vec(&format!("prop.{m}")).iter());
        let h = tanh_layer(&single_row(&input), &p, &format!("gen.{m}.hidden"));
        Ok(row_vec(&dense(&h, &p, &format!("gen.{m}.out"))))
    }

    /// Fusion of already-completed features (absent ones replaced upstream).
    pub fn fuse(&self, store: &ParameterStore, xs: [&[f64]; 3]) -> Result<Vec<f64>> {
        let p = Params::bind(store, &self.cfg)?;
        let mut input = Vec::new();
        for m in ModalityId::ALL {
            self.check_dim(xs[m.index()].len(), self.cfg.dim(m), "fuse input")?;
            input.extend_from_slice(xs[m.index()]);
        }
        let h = tanh_layer(&single_row(&input), &p, "fusion.hidden");
        Ok(row_vec(&dense(&h, &p, "fusion.out")))
    }

    pub fn predict(&self, store: &ParameterStore, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z.len(), self.cfg.fused_dim, "predict input")?;
        let p = Params::bind(store, &self.cfg)?;
        let h = tanh_layer(&single_row(z), &p, "head.hidden");
        Ok(row_vec(&dense(&h, &p, "head.out")))
    }

    pub fn back_translate(&self, store: &ParameterStore, z: &[f64], m: ModalityId) -> Result<Vec<f64>> {
        self.check_dim(z.len(), self.cfg.fused_dim, "back-translation input")?;
        let p = Params::bind(store, &self.cfg)?;
        let h = tanh_layer(&single_row(z), &p, &format!("bt.{m}.hidden"));
        Ok(row_vec(&dense(&h, &p, &format!("bt.{m}.out"))))
    }

    /// Fused embeddings Z for every row of the batch.
    pub fn embed(&self, store: &ParameterStore, batch: &Batch) -> Result<Array2<f64>> {
        Ok(self.forward(store, batch)?.z)
    }

    pub fn loss_task(&self, store: &ParameterStore, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Err(MbdError::EmptyBatch("task loss"));
        }
        let fw = self.forward(store, batch)?;
        Ok(objective::task_loss(&self.cfg, &fw.out, &batch.y, 1.0, false).0)
    }

    /// Mean squared reconstruction error of G_m over samples where m is
    /// observed; 0 when no sample observes m.
    pub fn loss_re(&self, store: &ParameterStore, batch: &Batch, m: ModalityId) -> Result<f64> {
        Ok(self.modal_terms(store, batch, m)?.re)
    }

    pub fn loss_con(&self, store: &ParameterStore, batch: &Batch, m: ModalityId) -> Result<f64> {
        let t = self.modal_terms(store, batch, m)?;
        if t.observed < 2 {
            return Err(MbdError::validation(format!(
                "contrastive loss needs at least 2 samples observing {m}, got {}",
                t.observed
            )));
        }
        Ok(t.con)
    }

    pub fn loss_pe(
        &self,
        store: &ParameterStore,
        batch: &Batch,
        m: ModalityId,
        weights: &LossWeights,
    ) -> Result<PeTerms> {
        Ok(self.modal_terms_with(store, batch, m, weights)?.pe)
    }

    fn modal_terms(&self, store: &ParameterStore, batch: &Batch, m: ModalityId) -> Result<ModalTerms> {
        self.modal_terms_with(store, batch, m, &LossWeights::default())
    }

    fn modal_terms_with(
        &self,
        store: &ParameterStore,
        batch: &Batch,
        m: ModalityId,
        weights: &LossWeights,
    ) -> Result<ModalTerms> {
        weights.validate()?;
        Ok(self.evaluate(store, batch, weights)?.modal[m.index()])
    }

    fn check_dim(&self, got: usize, expected: usize, context: &'static str) -> Result<()> {
        if got == expected {
            Ok(())
        } else {
            Err(MbdError::Dimension { context, expected, got })
        }
    }
}

fn decompose_rows(p: &Params<'_>, xs: &Array2<f64>, m: ModalityId) -> (Array2<f64>, Array2<f64>) {
    let h = tanh_layer(xs, p, &format!("de.{m}.hidden"));
    (
        dense(&h, p, &format!("de.{m}.sigma")),
        dense(&h, p, &format!("de.{m}.mu")),
    )
}

#[cfg(test)]
mod tests;
