//! Frequency-adaptive processing: band energies, cross-band attention,
//! importance weighting, and band-masked feature reweighting.
//!
//! For input X (S x C x F) and band masks M_b, the output is
//! `Y = sum_b (A[:,b] * W[:,b]) (broadcast over C, F) * (M_b * X)`, where A
//! comes from a layer-normalized two-layer network over the five band
//! energies (softmax across bands by default) and W from a two-layer network
//! with a sigmoid, so every band is scaled by an attention share times an
//! importance gate.

use crate::autodiff::{Graph, Real, Var};
use crate::config::BandAttention;
use crate::features::BandMaskSet;
use crate::nn::{Activation, Binder, Init, LayerNorm, Mlp, ParamGroup, ParamStore};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

pub const N_BANDS: usize = 5;

/// Parameters of the two band-weighting networks.
#[derive(Debug, Clone)]
pub struct FapParams {
    /// Layer norm in front of the attention network.
    pub norm: LayerNorm,
    /// Attention net: 5 -> hidden -> 5 with GELU.
    pub attn: Mlp,
    /// Importance net: 5 -> hidden -> 5 with GELU; sigmoid applied in forward.
    pub impor: Mlp,
}

impl FapParams {
    /// Final layers start near zero so initial attention is near-uniform and
    /// initial importance near 0.5: no band is favored at step zero.
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, hidden: usize) -> Self {
        let norm = LayerNorm::new(store, "fap.norm", ParamGroup::Main, N_BANDS);
        let attn = Mlp::new(
            store,
            rng,
            "fap.attn",
            ParamGroup::Main,
            &[N_BANDS, hidden, N_BANDS],
            Activation::Gelu,
            true,
            Init::Uniform(0.01),
        );
        let impor = Mlp::new(
            store,
            rng,
            "fap.impor",
            ParamGroup::Main,
            &[N_BANDS, hidden, N_BANDS],
            Activation::Gelu,
            true,
            Init::Uniform(0.01),
        );
        Self { norm, attn, impor }
    }
}

/// Bind the five band masks into a graph as (1, 1, F) constants.
pub fn bind_masks<T: Real>(g: &mut Graph<T>, masks: &BandMaskSet) -> [Var; N_BANDS] {
    std::array::from_fn(|b| {
        let m = &masks.masks[b];
        let arr = ArrayD::from_shape_vec(
            ndarray::IxDyn(&[1, 1, m.len()]),
            m.iter().map(|&v| T::from_f(v)).collect(),
        )
        .expect("mask shape");
        g.constant(arr)
    })
}

/// Band energy P_b[s] = (1/C) sum_c sum_f (mask[f] * X[s,c,f])^2, as (S, 1).
pub fn band_energy<T: Real>(g: &mut Graph<T>, x: Var, mask: Var) -> Var {
    let masked = g.mul(x, mask);
    let sq = g.square(masked);
    let per_sc = g.sum_axis(sq, 2, false); // (S, C)
    let s = g.shape(per_sc)[0];
    let p = g.mean_axis(per_sc, 1, false); // (S,)
    g.reshape(p, &[s, 1])
}

/// Everything the FAP stage exposes: reweighted features plus the band
/// weight matrices for logging and ablation checks.
#[derive(Debug, Clone, Copy)]
pub struct FapOutput {
    /// (S, C, F) reweighted features.
    pub y: Var,
    /// (S, 5) cross-band attention A.
    pub attention: Var,
    /// (S, 5) importance weights W.
    pub importance: Var,
    /// (S, 5) band energies P.
    pub energies: Var,
}

/// Full FAP forward pass.
pub fn fap_forward<T: Real>(
    g: &mut Graph<T>,
    b: &Binder<T>,
    x: Var,
    masks: &[Var; N_BANDS],
    params: &FapParams,
    attention: BandAttention,
    importance_on: bool,
) -> FapOutput {
    let s = g.shape(x)[0];

    let energies_per_band: Vec<Var> = masks.iter().map(|&m| band_energy(g, x, m)).collect();
    let energies = g.concat(&energies_per_band, 1); // (S, 5)

    let a = match attention {
        BandAttention::ForcedUniform => {
            g.constant(ArrayD::from_elem(ndarray::IxDyn(&[s, N_BANDS]), T::from_f(0.2)))
        }
        _ => {
            let normed = params.norm.forward(g, b, energies);
            let logits = params.attn.forward(g, b, normed);
            match attention {
                BandAttention::Softmax => g.softmax(logits, 1),
                BandAttention::RawLogits => logits,
                BandAttention::ForcedUniform => unreachable!(),
            }
        }
    };

    let w = if importance_on {
        let logits = params.impor.forward(g, b, energies);
        g.sigmoid(logits)
    } else {
        g.constant(ArrayD::from_elem(ndarray::IxDyn(&[s, N_BANDS]), T::one()))
    };

    let mut y = None;
    for (i, &mask) in masks.iter().enumerate() {
        let a_i = g.narrow(a, 1, i, 1); // (S, 1)
        let w_i = g.narrow(w, 1, i, 1);
        let aw = g.mul(a_i, w_i);
        let aw3 = g.reshape(aw, &[s, 1, 1]);
        let xm = g.mul(x, mask);
        let term_scaled = g.mul(xm, aw3);
        y = Some(match y {
            None => term_scaled,
            Some(acc) => g.add(acc, term_scaled),
        });
    }
    FapOutput { y: y.expect("five bands"), attention: a, importance: w, energies }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{band_masks, DEFAULT_BAND_EDGES_HZ};
    use crate::nn::FreezePolicy;
    use ndarray::{Array3, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// One representative bin per band: 2, 6, 10, 20, 40 Hz.
    fn five_bin_masks() -> BandMaskSet {
        band_masks(&[2.0, 6.0, 10.0, 20.0, 40.0], DEFAULT_BAND_EDGES_HZ).unwrap()
    }

    #[test]
    fn band_energy_of_ones() {
        // X all ones, C=3, mask selecting 3 of 6 bins: P = (1/3) * 3 * 3 = 3
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Array3::<f64>::ones((2, 3, 6)).into_dyn());
        let mask = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 6]), vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap(),
        );
        let p = band_energy(&mut g, x, mask);
        let v = g.value(p);
        assert_eq!(v.shape(), &[2, 1]);
        assert!((v[[0, 0]] - 3.0).abs() < 1e-12);
        assert!((v[[1, 0]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn band_energy_single_entry() {
        let mut data = Array3::<f64>::zeros((2, 2, 6));
        data[[0, 0, 1]] = 2.0;
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(data.into_dyn());
        let mask = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 6]), vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap(),
        );
        let p = band_energy(&mut g, x, mask);
        let v = g.value(p);
        assert!((v[[0, 0]] - 2.0).abs() < 1e-12, "P[0] = (1/2)*4 = 2");
        assert_eq!(v[[1, 0]], 0.0);
    }

    fn forward_random(
        attention: BandAttention,
        importance_on: bool,
    ) -> (Graph<f64>, FapOutput, Array3<f64>) {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let params = FapParams::new(&mut store, &mut r, 8);
        let mask_set = five_bin_masks();
        let mut data = Array3::<f64>::zeros((4, 3, 5));
        for v in data.iter_mut() {
            *v = r.random::<f64>() * 2.0 - 0.5;
        }
        let mut g = Graph::new();
        let binder = Binder::new(&store, FreezePolicy::None);
        let x = g.constant(data.clone().into_dyn());
        let masks = bind_masks(&mut g, &mask_set);
        let out = fap_forward(&mut g, &binder, x, &masks, &params, attention, importance_on);
        (g, out, data)
    }

    #[test]
    fn attention_rows_form_distribution_and_importance_in_unit_interval() {
        let (g, out, _) = forward_random(BandAttention::Softmax, true);
        let a = g.value(out.attention);
        for s in 0..4 {
            let row: f64 = (0..5).map(|b| a[[s, b]]).sum();
            assert!((row - 1.0).abs() < 1e-6, "A row {s} sums to {row}");
        }
        let w = g.value(out.importance);
        assert!(w.iter().all(|&v| v > 0.0 && v < 1.0), "W must lie strictly in (0,1)");
    }

    #[test]
    fn zero_final_layers_give_uniform_attention() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let params = FapParams::new(&mut store, &mut r, 8);
        // zero the attention net's final layer: logits collapse to the bias (0)
        let last = &params.attn.layers[1];
        let shape = store.value(last.weight).shape().to_vec();
        store.set_value(last.weight, ArrayD::zeros(IxDyn(&shape)));

        let mask_set = five_bin_masks();
        let mut g = Graph::new();
        let binder = Binder::new(&store, FreezePolicy::None);
        let x = g.constant(Array3::<f64>::from_elem((3, 2, 5), 0.3).into_dyn());
        let masks = bind_masks(&mut g, &mask_set);
        let out =
            fap_forward(&mut g, &binder, x, &masks, &params, BandAttention::Softmax, true);
        let a = g.value(out.attention);
        assert!(a.iter().all(|&v| (v - 0.2).abs() < 1e-12), "uniform attention expected");
    }

    #[test]
    fn unit_weights_restrict_to_in_band_bins() {
        // A == 1 via raw logits with unit bias + zero weights; W == 1 via the
        // importance ablation: Y must equal X on covered bins, 0 elsewhere.
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let params = FapParams::new(&mut store, &mut r, 8);
        for layer in &params.attn.layers {
            let wshape = store.value(layer.weight).shape().to_vec();
            store.set_value(layer.weight, ArrayD::zeros(IxDyn(&wshape)));
            let bid = layer.bias.unwrap();
            let bshape = store.value(bid).shape().to_vec();
            store.set_value(bid, ArrayD::zeros(IxDyn(&bshape)));
        }
        let final_bias = params.attn.layers[1].bias.unwrap();
        store.set_value(final_bias, ArrayD::ones(IxDyn(&[1, 5])));

        // bins at 0.5 and 55 Hz fall outside every band
        let mask_set = band_masks(
            &[0.5, 2.0, 6.0, 10.0, 20.0, 40.0, 55.0],
            DEFAULT_BAND_EDGES_HZ,
        )
        .unwrap();
        let mut r2 = rng();
        let data = Array3::<f64>::from_shape_fn((3, 2, 7), |_| r2.random::<f64>());
        let mut g = Graph::new();
        let binder = Binder::new(&store, FreezePolicy::None);
        let x = g.constant(data.clone().into_dyn());
        let masks = bind_masks(&mut g, &mask_set);
        let out =
            fap_forward(&mut g, &binder, x, &masks, &params, BandAttention::RawLogits, false);
        let y = g.value(out.y);
        for s in 0..3 {
            for c in 0..2 {
                assert_eq!(y[[s, c, 0]], 0.0, "0.5 Hz bin must be zeroed");
                assert_eq!(y[[s, c, 6]], 0.0, "55 Hz bin must be zeroed");
                for f in 1..6 {
                    assert!(
                        (y[[s, c, f]] - data[[s, c, f]]).abs() < 1e-12,
                        "covered bin {f} must pass through"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let params = FapParams::new(&mut store, &mut r, 8);
        let mask_set = five_bin_masks();
        let mut g = Graph::new();
        let binder = Binder::new(&store, FreezePolicy::None);
        let x = g.constant(Array3::<f64>::zeros((2, 2, 5)).into_dyn());
        let masks = bind_masks(&mut g, &mask_set);
        let out = fap_forward(&mut g, &binder, x, &masks, &params, BandAttention::Softmax, true);
        assert!(g.value(out.y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_band_bins_always_zero() {
        let mask_set = band_masks(
            &[0.5, 2.0, 6.0, 10.0, 20.0, 40.0, 55.0],
            DEFAULT_BAND_EDGES_HZ,
        )
        .unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let params = FapParams::new(&mut store, &mut r, 8);
        let data = Array3::<f64>::from_shape_fn((2, 3, 7), |_| r.random::<f64>() + 0.1);
        let mut g = Graph::new();
        let binder = Binder::new(&store, FreezePolicy::None);
        let x = g.constant(data.into_dyn());
        let masks = bind_masks(&mut g, &mask_set);
        let out = fap_forward(&mut g, &binder, x, &masks, &params, BandAttention::Softmax, true);
        let y = g.value(out.y);
        for s in 0..2 {
            for c in 0..3 {
                assert_eq!(y[[s, c, 0]], 0.0);
                assert_eq!(y[[s, c, 6]], 0.0);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_f32() {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng();
        let params = FapParams::new(&mut store, &mut r, 4);
        let mask_set = five_bin_masks();
        let data = Array3::<f32>::from_shape_fn((3, 2, 5), |_| r.random::<f32>());

        let build = |store: &ParamStore<f32>| {
            let mut g = Graph::new();
            let binder = Binder::new(store, FreezePolicy::None);
            let x = g.constant(data.clone().into_dyn());
            let masks = bind_masks(&mut g, &mask_set);
            let out =
                fap_forward(&mut g, &binder, x, &masks, &params, BandAttention::Softmax, true);
            let sq = g.square(out.y);
            let loss = g.sum_all(sq);
            (g, loss)
        };

        let (g, loss) = build(&store);
        let grads = g.backward(loss);
        let step = 1e-3f32;
        for pid in store.ids().collect::<Vec<_>>() {
            let Some(grad) = grads.get(pid) else { continue };
            let base = store.value(pid).to_owned();
            // probe one representative element per tensor
            let idx: Vec<usize> = base.shape().iter().map(|&d| d / 2).collect();
            let mut plus = base.clone();
            plus[idx.as_slice()] += step;
            let mut minus = base.clone();
            minus[idx.as_slice()] -= step;

            let mut s2 = store.clone();
            s2.set_value(pid, plus);
            let (g_p, l_p) = build(&s2);
            s2.set_value(pid, minus);
            let (g_m, l_m) = build(&s2);
            let fd = (g_p.scalar(l_p) - g_m.scalar(l_m)) / (2.0 * step);
            let an = grad[idx.as_slice()];
            // floor shields near-zero gradients from f32 finite-difference noise
            let denom = fd.abs().max(an.abs()).max(1e-1);
            assert!(
                ((fd - an) / denom).abs() < 1e-3,
                "param {}: fd {fd} vs analytic {an}",
                store.name(pid)
            );
        }
    }
}
