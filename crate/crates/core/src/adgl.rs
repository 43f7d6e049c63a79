//! Adaptive dynamic graph learning: per-sample channel adjacencies from
//! relation networks, symmetric normalization, and spectral graph
//! propagation (Chebyshev or single-hop), fused across a shallow and a deep
//! relation level and replicated back over time.
//!
//! The temporal replication is deliberate: the spatial branch pools time
//! away, propagates once per sample, and copies the fused node features to
//! every time step; temporal structure is modeled downstream.

use crate::autodiff::{Graph, ParamId, Real, Var};
use crate::config::{GcnMode, GraphMode, RunConfig};
use crate::nn::{Activation, Binder, Init, Linear, Mlp, ParamGroup, ParamStore};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdglError {
    #[error("degenerate graph: spectral bound estimate {lambda} is not positive")]
    DegenerateGraph { lambda: f64 },
}

/// Shallow (one tanh layer) and deep (three-layer) relation networks that
/// map pooled node features to the similarity space.
#[derive(Debug, Clone)]
pub struct RelationNets {
    pub shallow: Linear,
    pub deep: Mlp,
    pub d_r: usize,
}

impl RelationNets {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        f_in: usize,
        d_r: usize,
    ) -> Self {
        let shallow = Linear::new(
            store,
            rng,
            "adgl.relation.shallow",
            ParamGroup::Main,
            f_in,
            d_r,
            true,
            Init::FanIn,
        );
        let deep = Mlp::new(
            store,
            rng,
            "adgl.relation.deep",
            ParamGroup::Main,
            &[f_in, d_r, d_r, d_r],
            Activation::Gelu,
            true,
            Init::FanIn,
        );
        Self { shallow, deep, d_r }
    }
}

/// Per-level, per-layer propagation weights: K matrices in Chebyshev mode,
/// one in simple mode. Layer 1 maps F -> d_g, layer 2 maps d_g -> d_g.
#[derive(Debug, Clone)]
pub struct GraphConvParams {
    pub mode: GcnMode,
    /// weights[level][layer], level 0 = shallow, 1 = deep.
    pub weights: [[Vec<ParamId>; 2]; 2],
}

impl GraphConvParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        mode: GcnMode,
        k: usize,
        f_in: usize,
        d_g: usize,
    ) -> Self {
        let n_terms = match mode {
            GcnMode::Cheb => k,
            GcnMode::Simple => 1,
        };
        let mut make = |rng: &mut ChaCha8Rng, name: String, d_in: usize, d_out: usize| {
            (0..n_terms)
                .map(|i| {
                    let w: Array2<T> = Init::FanIn.sample(rng, d_in, d_out, d_in);
                    store.add(format!("{name}.w{i}"), ParamGroup::Main, w.into_dyn())
                })
                .collect::<Vec<_>>()
        };
        let weights = [
            [
                make(rng, "adgl.gcn.shallow.l1".into(), f_in, d_g),
                make(rng, "adgl.gcn.shallow.l2".into(), d_g, d_g),
            ],
            [
                make(rng, "adgl.gcn.deep.l1".into(), f_in, d_g),
                make(rng, "adgl.gcn.deep.l2".into(), d_g, d_g),
            ],
        ];
        Self { mode, weights }
    }
}

/// Mean over the temporal axis: (S, C, F) -> (C, F).
pub fn temporal_mean_pool<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    g.mean_axis(x, 0, false)
}

/// Row-stochastic similarity graph: row-softmax of Z Z^T / sqrt(d).
pub fn dynamic_adjacency<T: Real>(g: &mut Graph<T>, z: Var) -> Var {
    let d = g.shape(z)[1];
    let zt = g.transpose(z);
    let sim = g.matmul(z, zt);
    let scaled = g.scale(sim, T::from_f(1.0 / (d as f64).sqrt()));
    g.softmax(scaled, 1)
}

/// Symmetrize with self-connections and degree-normalize:
/// A_tilde = (A + A^T)/2 + I, A_hat = D^{-1/2} A_tilde D^{-1/2}.
pub fn normalize_adjacency<T: Real>(g: &mut Graph<T>, a: Var) -> Var {
    let c = g.shape(a)[0];
    let at = g.transpose(a);
    let sum = g.add(a, at);
    let sym = g.scale(sum, T::from_f(0.5));
    let eye = g.constant(identity::<T>(c));
    let a_tilde = g.add(sym, eye);
    let deg = g.sum_axis(a_tilde, 1, true); // (C, 1), entries >= 1
    let deg_sqrt = g.sqrt(deg);
    let one = g.scalar_const(T::one());
    let inv_col = g.div(one, deg_sqrt); // (C, 1)
    let inv_row = g.transpose(inv_col); // (1, C)
    let left = g.mul(a_tilde, inv_col);
    g.mul(left, inv_row)
}

fn identity<T: Real>(c: usize) -> ArrayD<T> {
    let mut eye = ArrayD::zeros(IxDyn(&[c, c]));
    for i in 0..c {
        eye[[i, i]] = T::one();
    }
    eye
}

pub const POWER_ITERS: usize = 30;
pub const POWER_TOL: f64 = 1e-6;

/// Largest-eigenvalue estimate of a symmetric PSD matrix by fixed-iteration
/// power iteration in plain values; returns (estimate, converged).
pub fn power_iteration_value(l: &Array2<f64>) -> (f64, bool) {
    let c = l.nrows();
    let mut v = Array1::from_elem(c, 1.0 / (c as f64).sqrt());
    let mut prev = f64::INFINITY;
    for _ in 0..POWER_ITERS {
        let w = l.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm < 1e-30 {
            // L annihilates the iterate: spectral bound is zero
            return (0.0, true);
        }
        v = w / norm;
        let ray = v.dot(&l.dot(&v));
        if (ray - prev).abs() < POWER_TOL {
            return (ray, true);
        }
        prev = ray;
    }
    (prev, false)
}

/// Spectral bound for the Chebyshev scaling, as a graph node.
///
/// With no fixed override, the bound is an unrolled in-graph power iteration
/// (fixed [`POWER_ITERS`] steps) so the estimate stays differentiable and
/// finite differences agree with the analytic gradient. A value-level check
/// decides the branch first: a non-positive bound is a degenerate-graph
/// error, and non-convergence falls back to the constant 2.0 (the exact
/// bound for normalized Laplacians), detached.
pub fn lambda_max<T: Real>(
    g: &mut Graph<T>,
    l: Var,
    fixed: Option<f64>,
) -> Result<Var, AdglError> {
    if let Some(v) = fixed {
        return Ok(g.scalar_const(T::from_f(v)));
    }
    let l_val = g.value(l);
    let l_f64 = Array2::from_shape_fn(
        (l_val.shape()[0], l_val.shape()[1]),
        |(i, j)| l_val[[i, j]].to_f(),
    );
    let (est, converged) = power_iteration_value(&l_f64);
    if converged && est <= 1e-9 {
        return Err(AdglError::DegenerateGraph { lambda: est });
    }
    if !converged {
        return Ok(g.scalar_const(T::from_f(2.0)));
    }
    let c = g.shape(l)[0];
    let mut v = g.constant(ArrayD::from_elem(
        IxDyn(&[c, 1]),
        T::from_f(1.0 / (c as f64).sqrt()),
    ));
    let tiny = g.scalar_const(T::from_f(1e-30));
    for _ in 0..POWER_ITERS {
        let w = g.matmul(l, v);
        let sq = g.square(w);
        let ss = g.sum_all(sq);
        let safe = g.add(ss, tiny);
        let norm = g.sqrt(safe);
        v = g.div(w, norm);
    }
    let lv = g.matmul(l, v);
    let prod = g.mul(v, lv);
    Ok(g.sum_all(prod))
}

/// Chebyshev propagation: ReLU(sum_{k=0}^{K-1} T_k(L_tilde) H W_k) with
/// L = I - A_hat, L_tilde = 2L/lambda_max - I, and the polynomial recurrence
/// T_0 = I, T_1 = L_tilde, T_k = 2 L_tilde T_{k-1} - T_{k-2}.
///
/// `lmax` may be None only for K = 1, where the Laplacian never enters.
pub fn cheb_propagate<T: Real>(
    g: &mut Graph<T>,
    a_hat: Var,
    h: Var,
    weights: &[Var],
    lmax: Option<Var>,
) -> Var {
    let k = weights.len();
    assert!(k >= 1, "need at least one Chebyshev term");
    let mut acc = g.matmul(h, weights[0]); // T_0 = I
    if k >= 2 {
        let lmax = lmax.expect("spectral bound required for K >= 2");
        let c = g.shape(a_hat)[0];
        let eye = g.constant(identity::<T>(c));
        let l = g.sub(eye, a_hat);
        let two_l = g.scale(l, T::from_f(2.0));
        let scaled = g.div(two_l, lmax);
        let l_tilde = g.sub(scaled, eye);

        let mut t_prev = eye; // T_0
        let mut t_cur = l_tilde; // T_1
        let th = g.matmul(t_cur, h);
        let term = g.matmul(th, weights[1]);
        acc = g.add(acc, term);
        for kk in 2..k {
            let lt = g.matmul(l_tilde, t_cur);
            let two_lt = g.scale(lt, T::from_f(2.0));
            let t_next = g.sub(two_lt, t_prev);
            let th = g.matmul(t_next, h);
            let term = g.matmul(th, weights[kk]);
            acc = g.add(acc, term);
            t_prev = t_cur;
            t_cur = t_next;
        }
    }
    g.relu(acc)
}

/// Single-hop propagation: ReLU(A_hat H W).
pub fn simple_propagate<T: Real>(g: &mut Graph<T>, a_hat: Var, h: Var, w: Var) -> Var {
    let ah = g.matmul(a_hat, h);
    let ahw = g.matmul(ah, w);
    g.relu(ahw)
}

/// Fused spatio-temporal output plus the normalized adjacencies for dumps.
#[derive(Debug, Clone, Copy)]
pub struct AdglOutput {
    /// (S, C, d_g): fused node features replicated across time.
    pub h: Var,
    pub adj_shallow: Var,
    pub adj_deep: Var,
}

/// Full pipeline: pool, relate, normalize, propagate two layers per level,
/// fuse levels, replicate over time.
pub fn adgl_forward<T: Real>(
    g: &mut Graph<T>,
    b: &Binder<T>,
    x: Var,
    nets: &RelationNets,
    gcn: &GraphConvParams,
    cfg: &RunConfig,
) -> Result<AdglOutput, AdglError> {
    let shape = g.shape(x);
    let (s, c) = (shape[0], shape[1]);
    let pooled = temporal_mean_pool(g, x); // (C, F)

    let (adj_shallow, adj_deep) = match cfg.graph_mode {
        GraphMode::Dynamic => {
            let zs_lin = nets.shallow.forward(g, b, pooled);
            let z_s = g.tanh(zs_lin);
            let z_d = nets.deep.forward(g, b, pooled);
            let a_s = dynamic_adjacency(g, z_s);
            let a_d = dynamic_adjacency(g, z_d);
            (normalize_adjacency(g, a_s), normalize_adjacency(g, a_d))
        }
        GraphMode::RawSimilarity => {
            let a = dynamic_adjacency(g, pooled);
            let a_hat = normalize_adjacency(g, a);
            (a_hat, a_hat)
        }
        GraphMode::Static => {
            let a = g.constant(ArrayD::from_elem(IxDyn(&[c, c]), T::from_f(1.0 / c as f64)));
            let a_hat = normalize_adjacency(g, a);
            (a_hat, a_hat)
        }
    };

    let mut level_out = Vec::with_capacity(2);
    for (level, &a_hat) in [adj_shallow, adj_deep].iter().enumerate() {
        let h1;
        let h2;
        match gcn.mode {
            GcnMode::Cheb => {
                let k = cfg.cheb_order;
                let lmax = if k >= 2 {
                    let eye = g.constant(identity::<T>(c));
                    let l = g.sub(eye, a_hat);
                    Some(lambda_max(g, l, cfg.lambda_max_fixed)?)
                } else {
                    None
                };
                let w1: Vec<Var> =
                    gcn.weights[level][0].iter().map(|&p| b.bind(g, p)).collect();
                let w2: Vec<Var> =
                    gcn.weights[level][1].iter().map(|&p| b.bind(g, p)).collect();
                h1 = cheb_propagate(g, a_hat, pooled, &w1, lmax);
                h2 = cheb_propagate(g, a_hat, h1, &w2, lmax);
            }
            GcnMode::Simple => {
                let w1 = b.bind(g, gcn.weights[level][0][0]);
                let w2 = b.bind(g, gcn.weights[level][1][0]);
                h1 = simple_propagate(g, a_hat, pooled, w1);
                h2 = simple_propagate(g, a_hat, h1, w2);
            }
        }
        level_out.push(h2);
    }

    let sum = g.add(level_out[0], level_out[1]);
    let fused = g.scale(sum, T::from_f(0.5)); // (C, d_g)
    let d_g = g.shape(fused)[1];
    let one_step = g.reshape(fused, &[1, c, d_g]);
    let h = g.expand(one_step, &[s, c, d_g]);
    Ok(AdglOutput { h, adj_shallow, adj_deep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::FreezePolicy;
    use ndarray::{arr2, Array3};
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn pool_of_single_slice_is_identity() {
        let mut g: Graph<f64> = Graph::new();
        let data = Array3::from_shape_fn((1, 3, 4), |(_, c, f)| (c * 4 + f) as f64);
        let x = g.constant(data.clone().into_dyn());
        let p = temporal_mean_pool(&mut g, x);
        let v = g.value(p);
        for c in 0..3 {
            for f in 0..4 {
                assert_eq!(v[[c, f]], data[[0, c, f]]);
            }
        }
    }

    #[test]
    fn pool_averages_zero_and_x() {
        let mut g: Graph<f64> = Graph::new();
        let mut data = Array3::zeros((2, 2, 3));
        for c in 0..2 {
            for f in 0..3 {
                data[[1, c, f]] = (c + f) as f64 + 1.0;
            }
        }
        let x = g.constant(data.clone().into_dyn());
        let p = temporal_mean_pool(&mut g, x);
        let v = g.value(p);
        for c in 0..2 {
            for f in 0..3 {
                assert!((v[[c, f]] - data[[1, c, f]] / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_features_give_uniform_adjacency() {
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(ArrayD::zeros(IxDyn(&[4, 3])));
        let a = dynamic_adjacency(&mut g, z);
        let v = g.value(a);
        assert!(v.iter().all(|&x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn adjacency_rows_are_stochastic() {
        let mut r = rng();
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(ArrayD::from_shape_fn(IxDyn(&[5, 3]), |_| r.random::<f64>() * 4.0 - 2.0));
        let a = dynamic_adjacency(&mut g, z);
        let v = g.value(a);
        for i in 0..5 {
            let row: f64 = (0..5).map(|j| v[[i, j]]).sum();
            assert!((row - 1.0).abs() < 1e-6, "row {i} sums to {row}");
        }
    }

    #[test]
    fn normalize_zero_adjacency_is_identity() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(ArrayD::zeros(IxDyn(&[2, 2])));
        let a_hat = normalize_adjacency(&mut g, a);
        let v = g.value(a_hat);
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[1, 1]], 1.0);
        assert_eq!(v[[0, 1]], 0.0);
        assert_eq!(v[[1, 0]], 0.0);
    }

    #[test]
    fn normalize_swap_adjacency_closed_form() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(arr2(&[[0.0, 1.0], [1.0, 0.0]]).into_dyn());
        let a_hat = normalize_adjacency(&mut g, a);
        let v = g.value(a_hat);
        for i in 0..2 {
            for j in 0..2 {
                assert!((v[[i, j]] - 0.5).abs() < 1e-12, "A_hat[{i},{j}] = {}", v[[i, j]]);
            }
        }
    }

    #[test]
    fn normalized_adjacency_is_symmetric() {
        let mut r = rng();
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(ArrayD::from_shape_fn(IxDyn(&[6, 4]), |_| r.random::<f64>() - 0.5));
        let a = dynamic_adjacency(&mut g, z);
        let a_hat = normalize_adjacency(&mut g, a);
        let v = g.value(a_hat);
        for i in 0..6 {
            for j in 0..6 {
                assert!((v[[i, j]] - v[[j, i]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn cheb_order_one_is_dense_layer() {
        let mut r = rng();
        let h_data = arr2(&[[1.0, -2.0], [0.5, 3.0], [0.0, 1.0]]);
        let w_data = arr2(&[[0.3, -0.1, 2.0], [1.0, 0.2, -0.4]]);
        let mut g: Graph<f64> = Graph::new();
        let a_hat = g.constant(ArrayD::from_shape_fn(IxDyn(&[3, 3]), |_| r.random::<f64>()));
        let h = g.constant(h_data.clone().into_dyn());
        let w = g.constant(w_data.clone().into_dyn());
        let out = cheb_propagate(&mut g, a_hat, h, &[w], None);
        let expect = h_data.dot(&w_data).mapv(|v| v.max(0.0));
        let got = g.value(out);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "K=1 must ignore the graph entirely");
        }
    }

    #[test]
    fn chebyshev_t2_identity_on_unit_spectrum() {
        // A_hat = diag(1, -1) with lambda fixed at 2 gives L_tilde = diag(-1, 1),
        // whose T_2 = 2 L_tilde^2 - I = I. With W_0 = W_1 = 0 and W_2 = I the
        // output is ReLU(H).
        let mut g: Graph<f64> = Graph::new();
        let a_hat = g.constant(arr2(&[[1.0, 0.0], [0.0, -1.0]]).into_dyn());
        let h_data = arr2(&[[0.7, 0.2], [1.5, 0.0]]);
        let h = g.constant(h_data.clone().into_dyn());
        let zero = g.constant(ArrayD::zeros(IxDyn(&[2, 2])));
        let eye = g.constant(identity::<f64>(2));
        let lmax = g.scalar_const(2.0);
        let out = cheb_propagate(&mut g, a_hat, h, &[zero, zero, eye], Some(lmax));
        let got = g.value(out);
        for (a, b) in got.iter().zip(h_data.iter()) {
            assert!((a - b).abs() < 1e-12, "T_2 of a +-1 spectrum must be the identity");
        }
    }

    #[test]
    fn identity_graph_is_degenerate_for_power_mode() {
        let l = Array2::<f64>::zeros((3, 3)); // L = I - A_hat with A_hat = I
        let (est, converged) = power_iteration_value(&l);
        assert!(converged);
        assert_eq!(est, 0.0);

        let mut g: Graph<f64> = Graph::new();
        let lv = g.constant(ArrayD::zeros(IxDyn(&[3, 3])));
        assert!(matches!(
            lambda_max(&mut g, lv, None),
            Err(AdglError::DegenerateGraph { .. })
        ));
    }

    #[test]
    fn power_iteration_matches_known_spectrum() {
        // symmetric with eigenvalues {3, 1}
        let l = arr2(&[[2.0, 1.0], [1.0, 2.0]]);
        let (est, converged) = power_iteration_value(&l);
        assert!(converged);
        assert!((est - 3.0).abs() < 1e-6, "estimate {est}");
    }

    fn micro_cfg() -> RunConfig {
        RunConfig {
            cheb_order: 3,
            d_g: 5,
            d_r: 3,
            ..RunConfig::default()
        }
    }

    fn build_model(
        store: &mut ParamStore<f64>,
        r: &mut ChaCha8Rng,
        cfg: &RunConfig,
        f_in: usize,
    ) -> (RelationNets, GraphConvParams) {
        let nets = RelationNets::new(store, r, f_in, cfg.d_r);
        let gcn = GraphConvParams::new(store, r, cfg.gcn_mode, cfg.cheb_order, f_in, cfg.d_g);
        (nets, gcn)
    }

    #[test]
    fn time_slices_are_identical_after_expand() {
        let cfg = micro_cfg();
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let (nets, gcn) = build_model(&mut store, &mut r, &cfg, 6);
        let mut g = Graph::new();
        let binder = Binder::new(&store, FreezePolicy::None);
        let data = Array3::from_shape_fn((3, 4, 6), |_| r.random::<f64>());
        let x = g.constant(data.into_dyn());
        let out = adgl_forward(&mut g, &binder, x, &nets, &gcn, &cfg).unwrap();
        let v = g.value(out.h);
        assert_eq!(v.shape(), &[3, 4, 5]);
        for s in 1..3 {
            for c in 0..4 {
                for d in 0..5 {
                    assert_eq!(v[[s, c, d]], v[[0, c, d]], "every time step is a copy");
                }
            }
        }
    }

    #[test]
    fn channel_permutation_equivariance() {
        let cfg = micro_cfg();
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let (nets, gcn) = build_model(&mut store, &mut r, &cfg, 6);
        let data = Array3::from_shape_fn((2, 4, 6), |_| r.random::<f64>());
        let perm = [2usize, 0, 3, 1];

        let run = |input: Array3<f64>| {
            let mut g = Graph::new();
            let binder = Binder::new(&store, FreezePolicy::None);
            let x = g.constant(input.into_dyn());
            let out = adgl_forward(&mut g, &binder, x, &nets, &gcn, &cfg).unwrap();
            g.value(out.h).to_owned()
        };

        let base = run(data.clone());
        let mut permuted = Array3::zeros((2, 4, 6));
        for (new_c, &old_c) in perm.iter().enumerate() {
            for s in 0..2 {
                for f in 0..6 {
                    permuted[[s, new_c, f]] = data[[s, old_c, f]];
                }
            }
        }
        let out_perm = run(permuted);
        for s in 0..2 {
            for (new_c, &old_c) in perm.iter().enumerate() {
                for d in 0..5 {
                    let a = out_perm[[s, new_c, d]];
                    let b = base[[s, old_c, d]];
                    assert!(
                        (a - b).abs() < 1e-9,
                        "permuted output must track permuted input: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_f32() {
        let cfg = RunConfig { cheb_order: 2, d_g: 4, d_r: 3, ..RunConfig::default() };
        let mut store = ParamStore::<f32>::new();
        let mut r = rng();
        let nets = RelationNets::new(&mut store, &mut r, 5, cfg.d_r);
        let gcn =
            GraphConvParams::new(&mut store, &mut r, cfg.gcn_mode, cfg.cheb_order, 5, cfg.d_g);
        let data = Array3::<f32>::from_shape_fn((2, 3, 5), |_| r.random::<f32>());

        let build = |store: &ParamStore<f32>| {
            let mut g = Graph::new();
            let binder = Binder::new(store, FreezePolicy::None);
            let x = g.constant(data.clone().into_dyn());
            let out = adgl_forward(&mut g, &binder, x, &nets, &gcn, &cfg).unwrap();
            let sq = g.square(out.h);
            let loss = g.sum_all(sq);
            (g, loss)
        };
        let (g, loss) = build(&store);
        let grads = g.backward(loss);
        let step = 1e-2f32;
        for pid in store.ids().collect::<Vec<_>>() {
            let Some(grad) = grads.get(pid) else { continue };
            let base = store.value(pid).to_owned();
            let idx: Vec<usize> = base.shape().iter().map(|&d| d / 2).collect();
            let mut plus = base.clone();
            plus[idx.as_slice()] += step;
            let mut minus = base.clone();
            minus[idx.as_slice()] -= step;
            let mut s2 = store.clone();
            s2.set_value(pid, plus);
            let (gp, lp) = build(&s2);
            s2.set_value(pid, minus);
            let (gm, lm) = build(&s2);
            let fd = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * step);
            let an = grad[idx.as_slice()];
            let denom = fd.abs().max(an.abs()).max(1e-1);
            assert!(
                ((fd - an) / denom).abs() < 1e-3,
                "param {}: fd {fd} vs analytic {an}",
                store.name(pid)
            );
        }
    }
}
