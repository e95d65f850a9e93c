use ndarray::{s, Array2, ArrayViewMut1, ArrayViewMut2, Axis};

use super::config::NetworkConfig;
use super::forward::{Forward, Params};
use super::objective::Seeds;
use crate::modality::ModalityId;
use crate::param_store::ParameterStore;

/// Flat gradient buffer aligned with a store's layout.
pub(crate) struct GradBuf<'a> {
    store: &'a ParameterStore,
    pub data: Vec<f64>,
}

impl<'a> GradBuf<'a> {
    pub(crate) fn new(store: &'a ParameterStore) -> Self {
        GradBuf {
            store,
            data: vec![0.0; store.len()],
        }
    }

    fn slot(&mut self, name: &str) -> (&mut [f64], &[usize]) {
        let pos = self.store.entry_position(name).expect("layout checked at bind");
        let e = &self.store.entries()[pos];
        let off = self.store.entry_offset(pos);
        (&mut self.data[off..off + e.len()], e.shape())
    }

    fn mat(&mut self, name: &str) -> ArrayViewMut2<'_, f64> {
        let (slice, shape) = self.slot(name);
        let shape = (shape[0], shape[1]);
        ArrayViewMut2::from_shape(shape, slice).expect("rank-2 tensor")
    }

    fn vec(&mut self, name: &str) -> ArrayViewMut1<'_, f64> {
        let (slice, _) = self.slot(name);
        ArrayViewMut1::from(slice)
    }
}

/// Backprop through `y = x Wᵀ + b`; returns dL/dx.
fn dense_back(
    g: &mut GradBuf<'_>,
    p: &Params<'_>,
    prefix: &str,
    input: &Array2<f64>,
    d_y: &Array2<f64>,
) -> Array2<f64> {
    let wname = format!("{prefix}.w");
    let mut gw = g.mat(&wname);
    gw += &d_y.t().dot(input);
    let mut gb = g.vec(&format!("{prefix}.b"));
    gb += &d_y.sum_axis(Axis(0));
    d_y.dot(&p.mat(&wname))
}

/// Backprop through `h = tanh(x Wᵀ + b)` given the cached output `h`.
fn tanh_back(
    g: &mut GradBuf<'_>,
    p: &Params<'_>,
    prefix: &str,
    input: &Array2<f64>,
    h: &Array2<f64>,
    d_h: &Array2<f64>,
) -> Array2<f64> {
    let d_a = d_h * &h.mapv(|v| 1.0 - v * v);
    dense_back(g, p, prefix, input, &d_a)
}

pub(crate) fn backward(
    p: &Params<'_>,
    cfg: &NetworkConfig,
    store: &ParameterStore,
    fw: &Forward,
    seeds: &Seeds,
) -> Vec<f64> {
    let mut g = GradBuf::new(store);

    // task head
    let d_head_h = dense_back(&mut g, p, "head.out", &fw.head_h, &seeds.d_out);
    let mut d_z = tanh_back(&mut g, p, "head.hidden", &fw.z, &fw.head_h, &d_head_h);

    // back-translation branches
    for m in ModalityId::ALL {
        let f = fw.modality(m);
        let sd = &seeds.modal[m.index()];
        let d_bt_h = dense_back(&mut g, p, &format!("bt.{m}.out"), &f.bt_h, &sd.d_xbt);
        d_z += &tanh_back(&mut g, p, &format!("bt.{m}.hidden"), &fw.z, &f.bt_h, &d_bt_h);
    }

    // fusion
    let d_fus_h = dense_back(&mut g, p, "fusion.out", &fw.fus_h, &d_z);
    let d_fus_in = tanh_back(&mut g, p, "fusion.hidden", &fw.fus_in, &fw.fus_h, &d_fus_h);

    let mut col = 0;
    for m in ModalityId::ALL {
        let k = m.index();
        let f = fw.modality(m);
        let sd = &seeds.modal[k];
        let d_m = cfg.dim(m);

        // fusion gradient reaches the generator only where m was reconstructed
        let mut d_xhat = sd.d_xhat.clone();
        let block = d_fus_in.slice(s![.., col..col + d_m]);
        let mut observed = vec![false; d_xhat.nrows()];
        f.observed.iter().for_each(|&i| observed[i] = true);
        for (i, &obs) in observed.iter().enumerate() {
            if !obs {
                let mut row = d_xhat.row_mut(i);
                row += &block.row(i);
            }
        }
        col += d_m;

        let d_gen_h = dense_back(&mut g, p, &format!("gen.{m}.out"), &f.gen_h, &d_xhat);
        let d_gen_in = tanh_back(&mut g, p, &format!("gen.{m}.hidden"), &f.gen_in, &f.gen_h, &d_gen_h);
        let prop_cols = d_gen_in.ncols() - cfg.d_p;
        let mut d_prop = sd.d_prop.clone();
        d_prop += &d_gen_in.slice(s![.., prop_cols..]).sum_axis(Axis(0));
        let mut gp = g.vec(&format!("prop.{m}"));
        gp += &d_prop;

        let d_rec_in = dense_back(&mut g, p, &format!("recomb.{m}"), &f.rec_in, &sd.d_xdec);
        let d_sigma = &sd.d_sigma + &d_rec_in.slice(s![.., ..cfg.d_p]);
        let d_mu = &sd.d_mu + &d_rec_in.slice(s![.., cfg.d_p..]);
        let mut d_de_h = dense_back(&mut g, p, &format!("de.{m}.sigma"), &f.de_h, &d_sigma);
        d_de_h += &dense_back(&mut g, p, &format!("de.{m}.mu"), &f.de_h, &d_mu);
        tanh_back(&mut g, p, &format!("de.{m}.hidden"), &f.x_eff, &f.de_h, &d_de_h);
    }
    g.data
}
