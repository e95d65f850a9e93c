use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::config::{LossWeights, NetworkConfig, OrthoForm, TaskKind};
use super::forward::{Forward, Params};
use crate::error::{MbdError, Result};
use crate::modality::ModalityId;

/// Scalar multipliers selecting which loss terms enter an objective.
///
/// The training objective uses `(1, α, β, γ)`; saliency uses the single
/// reconstruction term of one modality; the Lipschitz estimator uses the task
/// term with Huber-clamped residuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermCoefficients {
    pub task: f64,
    pub re: [f64; 3],
    pub pe: [f64; 3],
    pub con: [f64; 3],
    pub clamp_residual: bool,
}

impl TermCoefficients {
    pub fn total(w: &LossWeights) -> Self {
        TermCoefficients {
            task: 1.0,
            re: [w.alpha; 3],
            pe: [w.beta; 3],
            con: [w.gamma; 3],
            clamp_residual: false,
        }
    }

    pub fn recon(m: ModalityId) -> Self {
        let mut re = [0.0; 3];
        re[m.index()] = 1.0;
        TermCoefficients {
            task: 0.0,
            re,
            pe: [0.0; 3],
            con: [0.0; 3],
            clamp_residual: false,
        }
    }

    pub fn task_only(clamp_residual: bool) -> Self {
        TermCoefficients {
            task: 1.0,
            re: [0.0; 3],
            pe: [0.0; 3],
            con: [0.0; 3],
            clamp_residual,
        }
    }
}

/// Property-embedding terms for one modality.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PeTerms {
    pub or: f64,
    pub inv: f64,
    pub app: f64,
    pub re_decomp: f64,
    pub pe: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ModalTerms {
    pub re: f64,
    pub pe: PeTerms,
    pub con: f64,
    pub observed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub task: f64,
    pub modal: [ModalTerms; 3],
}

impl Evaluation {
    pub fn objective(&self, c: &TermCoefficients) -> f64 {
        let mut v = c.task * self.task;
        for k in 0..3 {
            let t = &self.modal[k];
            v += c.re[k] * t.re + c.pe[k] * t.pe.pe + c.con[k] * t.con;
        }
        v
    }
}

/// Per-term values of the combined objective, summed over modalities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub re: f64,
    pub or: f64,
    pub inv: f64,
    pub app: f64,
    pub re_decomp: f64,
    pub pe: f64,
    pub con: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub margin_eps: f64,
}

impl LossBreakdown {
    pub fn from_evaluation(e: &Evaluation, w: &LossWeights) -> Self {
        let sum = |f: &dyn Fn(&ModalTerms) -> f64| e.modal.iter().map(f).sum::<f64>();
        let re = sum(&|t| t.re);
        let or = sum(&|t| t.pe.or);
        let inv = sum(&|t| t.pe.inv);
        let app = sum(&|t| t.pe.app);
        let re_decomp = sum(&|t| t.pe.re_decomp);
        let pe = or + inv + re_decomp + app;
        let con = sum(&|t| t.con);
        LossBreakdown {
            task: e.task,
            re,
            or,
            inv,
            app,
            re_decomp,
            pe,
            con,
            total: e.task + w.alpha * re + w.beta * pe + w.gamma * con,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            tau: w.tau,
            margin_eps: w.margin_eps,
        }
    }

    /// Element-wise mean of several breakdowns (weights taken from the first).
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = *items.first()?;
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(LossBreakdown {
            task: avg(|b| b.task),
            re: avg(|b| b.re),
            or: avg(|b| b.or),
            inv: avg(|b| b.inv),
            app: avg(|b| b.app),
            re_decomp: avg(|b| b.re_decomp),
            pe: avg(|b| b.pe),
            con: avg(|b| b.con),
            total: avg(|b| b.total),
            ..first
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        let terms = [
            ("task", self.task),
            ("re", self.re),
            ("or", self.or),
            ("inv", self.inv),
            ("app", self.app),
            ("re_decomp", self.re_decomp),
            ("con", self.con),
            ("total", self.total),
        ];
        match terms.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(MbdError::NonFinite(format!("loss term {name}"))),
            None => Ok(()),
        }
    }
}

/// Upstream gradients of the objective with respect to network outputs.
pub(crate) struct Seeds {
    pub d_out: Array2<f64>,
    pub modal: [ModalSeeds; 3],
}

impl Seeds {
    /// All-zero seeds shaped after a forward pass.
    pub(crate) fn zeros(fw: &Forward, d_p: usize) -> Self {
        Seeds {
            d_out: Array2::zeros(fw.out.raw_dim()),
            modal: [0, 1, 2].map(|k| {
                let f = &fw.modal[k];
                ModalSeeds {
                    d_xhat: Array2::zeros(f.x_hat.raw_dim()),
                    d_xbt: Array2::zeros(f.x_bt.raw_dim()),
                    d_sigma: Array2::zeros(f.sigma.raw_dim()),
                    d_mu: Array2::zeros(f.mu.raw_dim()),
                    d_xdec: Array2::zeros(f.x_dec.raw_dim()),
                    d_prop: Array1::zeros(d_p),
                }
            }),
        }
    }
}

pub(crate) struct ModalSeeds {
    pub d_xhat: Array2<f64>,
    pub d_xbt: Array2<f64>,
    pub d_sigma: Array2<f64>,
    pub d_mu: Array2<f64>,
    pub d_xdec: Array2<f64>,
    pub d_prop: Array1<f64>,
}

pub(crate) fn task_loss(
    cfg: &NetworkConfig,
    out: &Array2<f64>,
    y: &[f64],
    coeff: f64,
    clamp_residual: bool,
) -> (f64, Array2<f64>) {
    let n = y.len() as f64;
    let mut d_out = Array2::zeros(out.raw_dim());
    let mut total = 0.0;
    match cfg.task {
        TaskKind::Regression => {
            for (i, &yi) in y.iter().enumerate() {
                let r = out[[i, 0]] - yi;
                if clamp_residual {
                    // Huber loss (threshold 1) on the half-squared residual.
                    let c = r.clamp(-1.0, 1.0);
                    total += if r.abs() <= 1.0 { 0.5 * r * r } else { r.abs() - 0.5 };
                    d_out[[i, 0]] = coeff * c / n;
                } else {
                    total += r * r;
                    d_out[[i, 0]] = coeff * 2.0 * r / n;
                }
            }
        }
        TaskKind::Classification => {
            for (i, &yi) in y.iter().enumerate() {
                let row = out.row(i);
                let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                let c = yi as usize;
                total += lse - row[c];
                for j in 0..row.len() {
                    let p = (row[j] - lse).exp();
                    d_out[[i, j]] = coeff * (p - if j == c { 1.0 } else { 0.0 }) / n;
                }
            }
        }
    }
    (total / n, d_out)
}

/// NCE over observed rows: -(1/n) Σ_i log softmax_j(<x̃_i, Σ_j>/τ)[i].
/// Returns the loss and, when `coeff != 0`, accumulates gradients.
pub(crate) fn contrastive(
    x_bt: &Array2<f64>,
    sigma: &Array2<f64>,
    observed: &[usize],
    tau: f64,
    coeff: f64,
    grads: Option<(&mut Array2<f64>, &mut Array2<f64>)>,
) -> f64 {
    let n = observed.len();
    let xb = x_bt.select(Axis(0), observed);
    let sg = sigma.select(Axis(0), observed);
    let logits = xb.dot(&sg.t()) / tau;
    let mut loss = 0.0;
    let mut dlog = Array2::<f64>::zeros((n, n));
    for a in 0..n {
        let row = logits.row(a);
        let max = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[a];
        for b in 0..n {
            let p = (row[b] - lse).exp();
            dlog[[a, b]] = coeff * (p - if a == b { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    if let Some((d_xbt, d_sigma)) = grads {
        let gx = dlog.dot(&sg) / tau;
        let gs = dlog.t().dot(&xb) / tau;
        for (r, &i) in observed.iter().enumerate() {
            let mut row = d_xbt.row_mut(i);
            row += &gx.row(r);
            let mut row = d_sigma.row_mut(i);
            row += &gs.row(r);
        }
    }
    loss / n as f64
}

pub(crate) fn evaluate(
    p: &Params<'_>,
    cfg: &NetworkConfig,
    fw: &Forward,
    batch: &Batch,
    weights: &LossWeights,
    c: &TermCoefficients,
    want_seeds: bool,
) -> Result<(Evaluation, Option<Seeds>)> {
    if batch.is_empty() {
        return Err(MbdError::EmptyBatch("loss evaluation"));
    }
    let (task, d_out) = task_loss(cfg, &fw.out, &batch.y, c.task, c.clamp_residual);
    let mut modal = [ModalTerms::default(); 3];
    let mut seeds = Vec::with_capacity(3);
    for m in ModalityId::ALL {
        let k = m.index();
        let f = fw.modality(m);
        let x = &batch.x[k];
        let obs = &f.observed;
        let n_obs = obs.len();
        let mut s = ModalSeeds {
            d_xhat: Array2::zeros(f.x_hat.raw_dim()),
            d_xbt: Array2::zeros(f.x_bt.raw_dim()),
            d_sigma: Array2::zeros(f.sigma.raw_dim()),
            d_mu: Array2::zeros(f.mu.raw_dim()),
            d_xdec: Array2::zeros(f.x_dec.raw_dim()),
            d_prop: Array1::zeros(cfg.d_p),
        };
        let mut t = ModalTerms {
            observed: n_obs,
            ..Default::default()
        };
        if n_obs > 0 {
            let nf = n_obs as f64;
            let prop = p.vec(&format!("prop.{m}"));

            // generator reconstruction
            for &i in obs {
                let diff = &f.x_hat.row(i) - &x.row(i);
                t.re += diff.dot(&diff);
                s.d_xhat.row_mut(i).assign(&(diff * (2.0 * c.re[k] / nf)));
            }
            t.re /= nf;

            // property embedding terms
            let cp = c.pe[k];
            let mut mu_bar = Array1::<f64>::zeros(cfg.d_p);
            for &i in obs {
                mu_bar += &f.mu.row(i);
            }
            mu_bar /= nf;
            for &i in obs {
                let sg = f.sigma.row(i);
                let mu = f.mu.row(i);
                let ip = sg.dot(&mu);
                // d(or_i)/d(ip)
                let (or_i, d_ip) = match weights.or_form {
                    OrthoForm::Squared => (ip * ip, 2.0 * ip),
                    OrthoForm::Raw => (ip, 1.0),
                };
                t.pe.or += or_i;
                let dev = &mu - &mu_bar;
                t.pe.inv += dev.dot(&dev);
                let rdiff = &f.x_dec.row(i) - &x.row(i);
                t.pe.re_decomp += rdiff.dot(&rdiff);
                if want_seeds && cp != 0.0 {
                    let mut ds = s.d_sigma.row_mut(i);
                    ds.scaled_add(cp * d_ip / nf, &mu);
                    let mut dm = s.d_mu.row_mut(i);
                    dm.scaled_add(cp * d_ip / nf, &sg);
                    dm.scaled_add(2.0 * cp / nf, &dev);
                    s.d_xdec.row_mut(i).assign(&(rdiff * (2.0 * cp / nf)));
                }
            }
            t.pe.or /= nf;
            t.pe.inv /= nf;
            t.pe.re_decomp /= nf;
            let gap = &prop - &mu_bar;
            let excess = gap.dot(&gap) - weights.margin_eps;
            if excess > 0.0 {
                t.pe.app = excess;
                if want_seeds && cp != 0.0 {
                    s.d_prop.scaled_add(2.0 * cp, &gap);
                    for &i in obs {
                        let mut dm = s.d_mu.row_mut(i);
                        dm.scaled_add(-2.0 * cp / nf, &gap);
                    }
                }
            }
            t.pe.pe = t.pe.or + t.pe.inv + t.pe.re_decomp + t.pe.app;

            if n_obs >= 2 {
                let grads = (want_seeds && c.con[k] != 0.0).then_some((&mut s.d_xbt, &mut s.d_sigma));
                t.con = contrastive(&f.x_bt, &f.sigma, obs, weights.tau, c.con[k], grads);
            }
        }
        for (name, v) in [("re", t.re), ("pe", t.pe.pe), ("con", t.con)] {
            if !v.is_finite() {
                return Err(MbdError::NonFinite(format!("loss term {name}[{m}]")));
            }
        }
        modal[k] = t;
        seeds.push(s);
    }
    if !task.is_finite() {
        return Err(MbdError::NonFinite("loss term task".into()));
    }
    let eval = Evaluation { task, modal };
    let seeds = want_seeds.then(|| Seeds {
        d_out,
        modal: seeds.try_into().ok().expect("three modalities"),
    });
    Ok((eval, seeds))
}
