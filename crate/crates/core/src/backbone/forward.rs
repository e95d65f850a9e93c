use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, Axis};

use super::batch::Batch;
use super::config::NetworkConfig;
use crate::error::{MbdError, Result};
use crate::modality::ModalityId;
use crate::param_store::ParameterStore;

/// Read-only tensor views into a store laid out by [`NetworkConfig::layout`].
pub(crate) struct Params<'a> {
    store: &'a ParameterStore,
}

impl<'a> Params<'a> {
    pub(crate) fn bind(store: &'a ParameterStore, cfg: &NetworkConfig) -> Result<Self> {
        let layout = cfg.layout();
        if layout.len() != store.entries().len() {
            return Err(MbdError::validation(format!(
                "store has {} tensors, network expects {}",
                store.entries().len(),
                layout.len()
            )));
        }
        for ((name, shape), e) in layout.iter().zip(store.entries()) {
            if e.name() != name || e.shape() != shape.as_slice() {
                return Err(MbdError::validation(format!(
                    "store tensor {}{:?} does not match expected {name}{shape:?}",
                    e.name(),
                    e.shape()
                )));
            }
        }
        Ok(Params { store })
    }

    pub(crate) fn mat(&self, name: &str) -> ArrayView2<'a, f64> {
        let e = self.store.entry(name).expect("layout checked at bind");
        ArrayView2::from_shape((e.shape()[0], e.shape()[1]), e.values()).expect("rank-2 tensor")
    }

    pub(crate) fn vec(&self, name: &str) -> ArrayView1<'a, f64> {
        ArrayView1::from(self.store.entry(name).expect("layout checked at bind").values())
    }
}

pub(crate) fn dense(input: &Array2<f64>, p: &Params<'_>, prefix: &str) -> Array2<f64> {
    let w = p.mat(&format!("{prefix}.w"));
    let b = p.vec(&format!("{prefix}.b"));
    let mut y = input.dot(&w.t());
    y += &b;
    y
}

pub(crate) fn tanh_layer(input: &Array2<f64>, p: &Params<'_>, prefix: &str) -> Array2<f64> {
    dense(input, p, prefix).mapv_into(f64::tanh)
}

/// Per-modality activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ModalForward {
    /// Input features with absent rows zeroed.
    pub x_eff: Array2<f64>,
    pub de_h: Array2<f64>,
    /// Sample-specific component Σ.
    pub sigma: Array2<f64>,
    /// Sample-invariant component μ.
    pub mu: Array2<f64>,
    pub rec_in: Array2<f64>,
    /// Decomposition-based reconstruction of x from (Σ, μ).
    pub x_dec: Array2<f64>,
    pub gen_in: Array2<f64>,
    pub gen_h: Array2<f64>,
    /// Generator reconstruction X̂.
    pub x_hat: Array2<f64>,
    pub bt_h: Array2<f64>,
    /// Back-translation X̃ from the fused embedding.
    pub x_bt: Array2<f64>,
    pub observed: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub modal: [ModalForward; 3],
    pub fus_in: Array2<f64>,
    pub fus_h: Array2<f64>,
    pub z: Array2<f64>,
    pub head_h: Array2<f64>,
    pub out: Array2<f64>,
}

impl Forward {
    pub fn modality(&self, m: ModalityId) -> &ModalForward {
        &self.modal[m.index()]
    }

    /// Input activations of every weight matrix, keyed by weight-tensor name.
    pub fn layer_inputs(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for m in ModalityId::ALL {
            let f = &self.modal[m.index()];
            out.push((format!("de.{m}.hidden.w"), &f.x_eff));
            out.push((format!("de.{m}.sigma.w"), &f.de_h));
            out.push((format!("de.{m}.mu.w"), &f.de_h));
            out.push((format!("recomb.{m}.w"), &f.rec_in));
            out.push((format!("gen.{m}.hidden.w"), &f.gen_in));
            out.push((format!("gen.{m}.out.w"), &f.gen_h));
            out.push((format!("bt.{m}.hidden.w"), &self.z));
            out.push((format!("bt.{m}.out.w"), &f.bt_h));
        }
        out.push(("fusion.hidden.w".into(), &self.fus_in));
        out.push(("fusion.out.w".into(), &self.fus_h));
        out.push(("head.hidden.w".into(), &self.z));
        out.push(("head.out.w".into(), &self.head_h));
        out
    }
}

fn masked(x: &Array2<f64>, mask: &[bool]) -> Array2<f64> {
    let mut out = x.clone();
    for (i, &p) in mask.iter().enumerate() {
        if !p {
            out.row_mut(i).fill(0.0);
        }
    }
    out
}

pub(crate) fn forward(p: &Params<'_>, cfg: &NetworkConfig, batch: &Batch) -> Result<Forward> {
    let n = batch.len();
    for m in ModalityId::ALL {
        let got = batch.x[m.index()].ncols();
        if got != cfg.dim(m) {
            return Err(MbdError::Dimension {
                context: "batch features",
                expected: cfg.dim(m),
                got,
            });
        }
    }
    let x_eff: [Array2<f64>; 3] = ModalityId::ALL.map(|m| masked(&batch.x[m.index()], &batch.mask[m.index()]));

    let mut partial = Vec::with_capacity(3);
    for m in ModalityId::ALL {
        let k = m.index();
        let de_h = tanh_layer(&x_eff[k], p, &format!("de.{m}.hidden"));
        let sigma = dense(&de_h, p, &format!("de.{m}.sigma"));
        let mu = dense(&de_h, p, &format!("de.{m}.mu"));
        let rec_in = concatenate![Axis(1), sigma, mu];
        let x_dec = dense(&rec_in, p, &format!("recomb.{m}"));

        let [o1, o2] = m.others();
        let prop = p.vec(&format!("prop.{m}"));
        let prop_rows = prop.broadcast((n, cfg.d_p)).expect("broadcast property").to_owned();
        let gen_in = concatenate![Axis(1), x_eff[o1.index()], x_eff[o2.index()], prop_rows];
        let gen_h = tanh_layer(&gen_in, p, &format!("gen.{m}.hidden"));
        let x_hat = dense(&gen_h, p, &format!("gen.{m}.out"));
        partial.push((de_h, sigma, mu, rec_in, x_dec, gen_in, gen_h, x_hat));
    }

    // Fusion consumes true features where observed and reconstructions elsewhere.
    let filled: Vec<Array2<f64>> = ModalityId::ALL
        .iter()
        .map(|&m| {
            let k = m.index();
            let mut t = partial[k].7.clone();
            for (i, &present) in batch.mask[k].iter().enumerate() {
                if present {
                    t.row_mut(i).assign(&x_eff[k].row(i));
                }
            }
            t
        })
        .collect();
    let fus_in = concatenate![Axis(1), filled[0], filled[1], filled[2]];
    let fus_h = tanh_layer(&fus_in, p, "fusion.hidden");
    let z = dense(&fus_h, p, "fusion.out");
    let head_h = tanh_layer(&z, p, "head.hidden");
    let out = dense(&head_h, p, "head.out");

    let mut x_eff = x_eff.into_iter();
    let mut modal = Vec::with_capacity(3);
    for (m, (de_h, sigma, mu, rec_in, x_dec, gen_in, gen_h, x_hat)) in ModalityId::ALL.into_iter().zip(partial) {
        let bt_h = tanh_layer(&z, p, &format!("bt.{m}.hidden"));
        let x_bt = dense(&bt_h, p, &format!("bt.{m}.out"));
        modal.push(ModalForward {
            x_eff: x_eff.next().unwrap(),
            de_h,
            sigma,
            mu,
            rec_in,
            x_dec,
            gen_in,
            gen_h,
            x_hat,
            bt_h,
            x_bt,
            observed: batch.observed(m),
        });
    }
    let modal: [ModalForward; 3] = modal.try_into().expect("three modalities");
    Ok(Forward {
        modal,
        fus_in,
        fus_h,
        z,
        head_h,
        out,
    })
}

pub(crate) fn single_row(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector")
}

pub(crate) fn row_vec(a: &Array2<f64>) -> Vec<f64> {
    a.slice(s![0, ..]).to_vec()
}
