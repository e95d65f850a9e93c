//! Joint momentum-SGD training on synthetic multimodal data.

mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synth::{synth_dataset, Dataset, MissingRegime, SplitSizes, Splits, SynthSpec, DATASET_MAGIC};

use crate::backbone::{Backbone, LossBreakdown, LossWeights};
use crate::error::{MbdError, Result};
use crate::modality::ModalityId;
use crate::param_store::ParameterStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Learning rate applied to the property embeddings.
    pub prop_lr: f64,
    /// Shuffle seed.
    pub seed: u64,
    pub weights: LossWeights,
    pub schedule: LrSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to `floor` times the base rate.
    Cosine { floor: f64 },
}

impl LrSchedule {
    /// Multiplier for `epoch` in 1..=epochs.
    pub fn factor(&self, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { floor } => {
                let t = (epoch - 1) as f64 / epochs.max(1) as f64;
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            lr: 1e-2,
            momentum: 0.9,
            prop_lr: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(MbdError::validation("batch size must be at least 2"));
        }
        for (name, v) in [("lr", self.lr), ("prop_lr", self.prop_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MbdError::validation(format!("{name} must be finite and non-negative")));
            }
        }
        if let LrSchedule::Cosine { floor } = self.schedule {
            if !(0.0..=1.0).contains(&floor) {
                return Err(MbdError::validation("cosine floor must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MbdError::validation("momentum must lie in [0, 1)"));
        }
        self.weights.validate()
    }
}

/// Mean loss terms for one epoch. Epoch 0 is the initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParameterStore,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    /// Epoch-mean total loss per logged epoch.
    pub fn totals(&self) -> Vec<f64> {
        self.log.iter().map(|e| e.loss.total).collect()
    }
}

/// Minibatch index ranges; a trailing singleton joins the previous batch.
pub(crate) fn batch_bounds(n: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + size).min(n);
        out.push((start, end));
        start = end;
    }
    if out.len() > 1 && out.last().map(|(a, b)| b - a) == Some(1) {
        let (_, end) = out.pop().unwrap();
        out.last_mut().unwrap().1 = end;
    }
    out
}

fn diverged(epoch: usize, err: MbdError) -> MbdError {
    match err {
        MbdError::NonFinite(term) => MbdError::Diverged { epoch, term },
        other => other,
    }
}

pub fn train(backbone: &Backbone, data: &Dataset, cfg: &TrainConfig, init_seed: u64) -> Result<TrainOutcome> {
    let init = backbone.init_store(init_seed)?;
    train_from(backbone, data, cfg, init)
}

/// Train starting from an explicit parameter store.
pub fn train_from(
    backbone: &Backbone,
    data: &Dataset,
    cfg: &TrainConfig,
    init: ParameterStore,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(MbdError::EmptyBatch("training set"));
    }
    for s in &data.samples {
        s.validate(backbone.config())?;
    }
    let n = data.len();
    let bounds = batch_bounds(n, cfg.batch_size);
    let lrs: Vec<f64> = init
        .entries()
        .iter()
        .flat_map(|e| {
            let lr = if e.name().starts_with("prop.") {
                cfg.prop_lr
            } else {
                cfg.lr
            };
            std::iter::repeat_n(lr, e.len())
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    let gather = |order: &[usize], (a, b): (usize, usize)| {
        let picked: Vec<_> = order[a..b].iter().map(|&i| data.samples[i].clone()).collect();
        backbone.batch(&picked)
    };

    let mut first = Vec::with_capacity(bounds.len());
    for &r in &bounds {
        let b = gather(&order, r)?;
        first.push(
            backbone
                .total_loss(&init, &b, &cfg.weights)
                .map_err(|e| diverged(0, e))?,
        );
    }
    let mut log = vec![EpochLog {
        epoch: 0,
        loss: LossBreakdown::mean(&first).expect("nonempty"),
    }];

    let mut w = init.to_flat();
    let mut velocity = vec![0.0; w.len()];
    let mut store = init;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let f = cfg.schedule.factor(epoch, cfg.epochs);
        let mut seen = Vec::with_capacity(bounds.len());
        for &r in &bounds {
            let b = gather(&order, r)?;
            let (loss, g) = backbone
                .grad(&store, &b, &cfg.weights)
                .map_err(|e| diverged(epoch, e))?;
            for i in 0..w.len() {
                velocity[i] = cfg.momentum * velocity[i] + g[i];
                let step = f * lrs[i] * velocity[i];
                if step != 0.0 {
                    w[i] -= step;
                }
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(MbdError::Diverged {
                    epoch,
                    term: "parameters".into(),
                });
            }
            store = store.with_flat(&w)?;
            seen.push(loss);
        }
        log.push(EpochLog {
            epoch,
            loss: LossBreakdown::mean(&seen).expect("nonempty"),
        });
    }
    Ok(TrainOutcome { store, log })
}

/// Reference model trained with `m` absent from every sample.
pub fn train_reference_without(
    m: ModalityId,
    backbone: &Backbone,
    data: &Dataset,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<TrainOutcome> {
    train(backbone, &data.without(m), cfg, init_seed)
}

pub const LOSS_COLUMNS: [&str; 9] = ["epoch", "task", "re", "or", "inv", "app", "pe", "con", "total"];

pub fn write_loss_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LOSS_COLUMNS)?;
    for e in log {
        let l = &e.loss;
        let mut row = vec![e.epoch.to_string()];
        row.extend(
            [l.task, l.re, l.or, l.inv, l.app, l.pe, l.con, l.total]
                .iter()
                .map(|v| format!("{v:e}")),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{NetworkConfig, TermCoefficients};

    fn small() -> (Backbone, Dataset) {
        let cfg = NetworkConfig::tiny();
        let spec = SynthSpec {
            num_samples: 40,
            ..SynthSpec::default()
        };
        (Backbone::new(cfg.clone()).unwrap(), synth_dataset(&spec, &cfg).unwrap())
    }

    #[test]
    fn bounds_merge_singleton() {
        assert_eq!(batch_bounds(5, 2), vec![(0, 2), (2, 5)]);
        assert_eq!(batch_bounds(4, 2), vec![(0, 2), (2, 4)]);
        assert_eq!(batch_bounds(3, 8), vec![(0, 3)]);
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let (bb, data) = small();
        let cfg = TrainConfig {
            epochs: 2,
            lr: 0.0,
            prop_lr: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&bb, &data, &cfg, 3).unwrap();
        assert!(out.store.bit_eq(&bb.init_store(3).unwrap()));
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn training_is_deterministic() {
        let (bb, data) = small();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let a = train(&bb, &data, &cfg, 1).unwrap();
        let b = train(&bb, &data, &cfg, 1).unwrap();
        assert_eq!(a.store.digest(), b.store.digest());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn reference_equals_training_on_masked_copy() {
        let (bb, data) = small();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let a = train_reference_without(ModalityId::A, &bb, &data, &cfg, 5).unwrap();
        let b = train(&bb, &data.without(ModalityId::A), &cfg, 5).unwrap();
        assert!(a.store.bit_eq(&b.store));
        let c = train_reference_without(ModalityId::A, &bb, &data, &cfg, 5).unwrap();
        assert!(a.store.bit_eq(&c.store));
    }

    #[test]
    fn reference_has_no_reconstruction_signal_for_masked_modality() {
        let (bb, data) = small();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let out = train_reference_without(ModalityId::V, &bb, &data, &cfg, 2).unwrap();
        let masked = bb.batch(&data.without(ModalityId::V).samples).unwrap();
        let (_, g) = bb
            .objective_grad(
                &out.store,
                &masked,
                &cfg.weights,
                &TermCoefficients::recon(ModalityId::V),
            )
            .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        // the final generator layer of V saw no reconstruction gradient: its
        // bias is only moved by the task path through fusion
        let init = bb.init_store(2).unwrap();
        assert_ne!(
            init.values("gen.V.out.b").unwrap(),
            out.store.values("gen.V.out.b").unwrap()
        );
    }

    #[test]
    fn divergence_reports_epoch() {
        let (bb, data) = small();
        let cfg = TrainConfig {
            epochs: 50,
            lr: 1e12,
            ..TrainConfig::default()
        };
        match train(&bb, &data, &cfg, 0) {
            Err(MbdError::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bad_configs_rejected() {
        let (bb, data) = small();
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(train(&bb, &data, &bad, 0).is_err());
        assert!(train(&bb, &Dataset::new(vec![]), &TrainConfig::default(), 0).is_err());
    }

    #[test]
    fn csv_has_expected_header() {
        let (bb, data) = small();
        let out = train(
            &bb,
            &data,
            &TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            0,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_csv(&out.log, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,task,re,or,inv,app,pe,con,total\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine { floor: 0.1 };
        assert_eq!(s.factor(1, 10), 1.0);
        assert!(s.factor(10, 10) > 0.1 && s.factor(10, 10) < 0.15);
        assert!((1..10).all(|e| s.factor(e + 1, 10) < s.factor(e, 10)));
        assert_eq!(LrSchedule::Constant.factor(7, 10), 1.0);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }
}
