//! Multi-scale temporal transformer: attention heads partitioned into
//! per-scale groups, each restricted to a banded temporal window, fused by
//! scale-energy gates and a learned scale-importance distribution.
//!
//! A scale `s` permits attention between positions i, j iff |i - j| < s, so
//! s = 1 is pure self-attention and any s >= S degenerates to full
//! attention. Masked positions receive -inf logits by default (exactly zero
//! weight); the multiplicative variant, which multiplies logits by the 0/1
//! mask before the softmax and therefore leaks weight to masked positions,
//! is retained behind a flag for fidelity experiments.

use crate::autodiff::{Graph, Real, Var};
use crate::config::{MaskMode, RunConfig};
use crate::nn::{Activation, Binder, Init, Linear, Mlp, ParamGroup, ParamStore};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Banded 0/1 temporal mask for one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMask {
    /// S x S, mask[i][j] = 1 iff |i - j| < scale.
    pub mask: Array2<f64>,
    pub scale: usize,
}

/// Build the banded mask for sequence length `s_len` and bandwidth `scale`.
pub fn make_scale_mask(s_len: usize, scale: usize) -> ScaleMask {
    assert!(s_len >= 1 && scale >= 1, "mask needs positive dimensions");
    let mask = Array2::from_shape_fn((s_len, s_len), |(i, j)| {
        if i.abs_diff(j) < scale {
            1.0
        } else {
            0.0
        }
    });
    ScaleMask { mask, scale }
}

/// All learned tensors of the transformer block.
#[derive(Debug, Clone)]
pub struct MsttParams {
    /// Per-scale projections, each (C*d_g) -> group width, bias-free so the
    /// zero-input invariant holds.
    pub q: Vec<Linear>,
    pub k: Vec<Linear>,
    pub v: Vec<Linear>,
    /// Per-scale gate networks on the scale energy, sigmoid applied in forward.
    pub modulation: Vec<Mlp>,
    /// Maps concatenated scale energies to one logit per scale.
    pub scale_attn: Mlp,
    /// Output projection d_h -> d_h, bias-free.
    pub w_o: Linear,
    pub scales: Vec<usize>,
    pub heads_per_group: usize,
    pub d_head: usize,
}

impl MsttParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &RunConfig,
        in_dim: usize,
    ) -> Self {
        assert!(in_dim >= 1, "flattened input width must be positive");
        let n = cfg.scales.len();
        let gw = cfg.group_width();
        let mut q = Vec::with_capacity(n);
        let mut k = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        let mut modulation = Vec::with_capacity(n);
        for (i, &s) in cfg.scales.iter().enumerate() {
            let tag = format!("mstt.s{s}_{i}");
            q.push(Linear::new(store, rng, &format!("{tag}.q"), ParamGroup::Main, in_dim, gw, false, Init::FanIn));
            k.push(Linear::new(store, rng, &format!("{tag}.k"), ParamGroup::Main, in_dim, gw, false, Init::FanIn));
            v.push(Linear::new(store, rng, &format!("{tag}.v"), ParamGroup::Main, in_dim, gw, false, Init::FanIn));
            modulation.push(Mlp::new(
                store,
                rng,
                &format!("{tag}.modulation"),
                ParamGroup::Main,
                &[gw, gw, gw],
                Activation::Gelu,
                true,
                Init::FanIn,
            ));
        }
        let scale_attn = Mlp::new(
            store,
            rng,
            "mstt.scale_attn",
            ParamGroup::Main,
            &[n * gw, gw, n],
            Activation::Gelu,
            true,
            Init::FanIn,
        );
        let w_o = Linear::new(store, rng, "mstt.w_o", ParamGroup::Main, cfg.d_h, cfg.d_h, false, Init::FanIn);
        Self {
            q,
            k,
            v,
            modulation,
            scale_attn,
            w_o,
            scales: cfg.scales.clone(),
            heads_per_group: cfg.heads_per_group(),
            d_head: cfg.d_head(),
        }
    }
}

/// Bind a scale mask under the chosen mode: additive masks hold 0 on allowed
/// and -inf on banned positions; multiplicative masks hold the raw 0/1 values.
fn bind_mask<T: Real>(g: &mut Graph<T>, mask: &ScaleMask, mode: MaskMode) -> Var {
    let (s, _) = mask.mask.dim();
    let arr = match mode {
        MaskMode::Additive => ArrayD::from_shape_fn(IxDyn(&[s, s]), |ix| {
            if mask.mask[[ix[0], ix[1]]] != 0.0 {
                T::zero()
            } else {
                T::neg_infinity()
            }
        }),
        MaskMode::Multiplicative => {
            ArrayD::from_shape_fn(IxDyn(&[s, s]), |ix| T::from_f(mask.mask[[ix[0], ix[1]]]))
        }
    };
    g.constant(arr)
}

/// One scale group's attention output (S x group width) and its per-head
/// attention maps (each S x S).
pub struct ScaleAttention {
    pub output: Var,
    pub attn_maps: Vec<Var>,
}

/// Masked multi-head attention for one scale group.
pub fn scale_attention<T: Real>(
    g: &mut Graph<T>,
    b: &Binder<T>,
    params: &MsttParams,
    scale_idx: usize,
    h0: Var,
    mode: MaskMode,
) -> ScaleAttention {
    let s_len = g.shape(h0)[0];
    let mask = make_scale_mask(s_len, params.scales[scale_idx]);
    let mask_var = bind_mask(g, &mask, mode);

    let q_full = params.q[scale_idx].forward(g, b, h0);
    let k_full = params.k[scale_idx].forward(g, b, h0);
    let v_full = params.v[scale_idx].forward(g, b, h0);

    let inv_sqrt_dk = T::from_f(1.0 / (params.d_head as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(params.heads_per_group);
    let mut attn_maps = Vec::with_capacity(params.heads_per_group);
    for h in 0..params.heads_per_group {
        let lo = h * params.d_head;
        let qh = g.narrow(q_full, 1, lo, params.d_head);
        let kh = g.narrow(k_full, 1, lo, params.d_head);
        let vh = g.narrow(v_full, 1, lo, params.d_head);
        let kt = g.transpose(kh);
        let logits_raw = g.matmul(qh, kt);
        let logits = g.scale(logits_raw, inv_sqrt_dk);
        let masked = match mode {
            MaskMode::Additive => g.add(logits, mask_var),
            MaskMode::Multiplicative => g.mul(logits, mask_var),
        };
        let attn = g.softmax(masked, 1);
        attn_maps.push(attn);
        head_outputs.push(g.matmul(attn, vh));
    }
    let output = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        g.concat(&head_outputs, 1)
    };
    ScaleAttention { output, attn_maps }
}

/// Scale energy p_s: temporal mean of the group output, kept as (1, gw).
pub fn scale_energy<T: Real>(g: &mut Graph<T>, o_s: Var) -> Var {
    g.mean_axis(o_s, 0, true)
}

/// Transformer output plus fusion internals for logging.
pub struct MsttOutput {
    /// (S, d_h).
    pub h: Var,
    /// (1, n_scales) scale-importance distribution.
    pub alpha: Var,
    /// Per scale, per head attention maps.
    pub attn_maps: Vec<Vec<Var>>,
}

/// Full block: per-scale masked attention, energy-gated modulation,
/// scale-importance fusion, output projection.
pub fn mstt_forward<T: Real>(
    g: &mut Graph<T>,
    b: &Binder<T>,
    h_adgl: Var,
    params: &MsttParams,
    mode: MaskMode,
) -> MsttOutput {
    let shape = g.shape(h_adgl);
    let (s, c, d_g) = (shape[0], shape[1], shape[2]);
    let h0 = g.reshape(h_adgl, &[s, c * d_g]);

    let n = params.scales.len();
    let mut outputs = Vec::with_capacity(n);
    let mut energies = Vec::with_capacity(n);
    let mut attn_maps = Vec::with_capacity(n);
    for i in 0..n {
        let sa = scale_attention(g, b, params, i, h0, mode);
        energies.push(scale_energy(g, sa.output));
        outputs.push(sa.output);
        attn_maps.push(sa.attn_maps);
    }

    let p_cat = g.concat(&energies, 1); // (1, n*gw)
    let alpha_logits = params.scale_attn.forward(g, b, p_cat);
    let alpha = g.softmax(alpha_logits, 1); // (1, n)

    let mut fused = Vec::with_capacity(n);
    for i in 0..n {
        let gate_logits = params.modulation[i].forward(g, b, energies[i]);
        let gate = g.sigmoid(gate_logits); // (1, gw)
        let adapted = g.mul(outputs[i], gate); // broadcast over time
        let a_i = g.narrow(alpha, 1, i, 1); // (1, 1)
        fused.push(g.mul(adapted, a_i));
    }
    let cat = if fused.len() == 1 { fused[0] } else { g.concat(&fused, 1) }; // (S, d_h)
    let h = params.w_o.forward(g, b, cat);
    MsttOutput { h, alpha, attn_maps }
}
