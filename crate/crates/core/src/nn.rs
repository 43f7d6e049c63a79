//! Parameter storage, layer primitives, and the AdamW optimizer.
//!
//! Parameters live in a [`ParamStore`] outside any graph; a [`Binder`]
//! injects them into a graph either as trainable leaves or as frozen
//! constants, which is how the alternating adversarial schedule isolates
//! gradient flow between the discriminator and the rest of the network.

use crate::autodiff::{GradMap, Graph, ParamId, Real, Var};
use ndarray::{ArcArray, Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Update group a parameter belongs to in the alternating schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Feature trunk, emotion encoder, classifier, subject bank gates: updated in the main step.
    Main,
    /// Subject discriminator, subject probe, subject bank: updated in the discriminator step.
    Discriminator,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub group: ParamGroup,
    pub value: ArcArray<T, IxDyn>,
}

/// Registry of all trainable tensors of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: ArrayD<T>) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), group, value: value.into_shared() });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, pid: ParamId) -> &ArcArray<T, IxDyn> {
        &self.entries[pid.0].value
    }

    pub fn name(&self, pid: ParamId) -> &str {
        &self.entries[pid.0].name
    }

    pub fn group(&self, pid: ParamId) -> ParamGroup {
        self.entries[pid.0].group
    }

    pub fn set_value(&mut self, pid: ParamId, value: ArrayD<T>) {
        assert_eq!(
            self.entries[pid.0].value.shape(),
            value.shape(),
            "set_value: shape mismatch for {}",
            self.entries[pid.0].name
        );
        self.entries[pid.0].value = value.into_shared();
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Cheap copy of all current values (shared storage).
    pub fn snapshot(&self) -> Vec<ArcArray<T, IxDyn>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[ArcArray<T, IxDyn>]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (e, s) in self.entries.iter_mut().zip(snapshot) {
            e.value = s.clone();
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn to_data(&self) -> ParamStoreData {
        ParamStoreData {
            entries: self
                .entries
                .iter()
                .map(|e| ParamData {
                    name: e.name.clone(),
                    group: e.group,
                    shape: e.value.shape().to_vec(),
                    data: e.value.iter().map(|v| v.to_f()).collect(),
                })
                .collect(),
        }
    }

    pub fn from_data(data: &ParamStoreData) -> Self {
        let entries = data
            .entries
            .iter()
            .map(|p| {
                let arr = ArrayD::from_shape_vec(
                    IxDyn(&p.shape),
                    p.data.iter().map(|v| T::from_f(*v)).collect(),
                )
                .expect("checkpoint: shape/data mismatch");
                ParamEntry { name: p.name.clone(), group: p.group, value: arr.into_shared() }
            })
            .collect();
        Self { entries }
    }
}

/// Serializable dump of a parameter store (model checkpoints).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStoreData {
    pub entries: Vec<ParamData>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamData {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Which parameters enter a graph as frozen constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Every bound parameter is a trainable leaf.
    None,
    /// Parameters of the given group become constants (gradient flows
    /// through them but is not reported for them).
    Group(ParamGroup),
    /// Everything constant: pure inference.
    All,
}

/// Injects store parameters into a graph under a freeze policy. Binds are
/// memoized, so a parameter shared across every sample of a batch enters the
/// graph exactly once; consequently one binder must only ever feed one graph.
pub struct Binder<'s, T: Real> {
    store: &'s ParamStore<T>,
    policy: FreezePolicy,
    bound: std::cell::RefCell<std::collections::HashMap<ParamId, Var>>,
}

impl<'s, T: Real> Binder<'s, T> {
    pub fn new(store: &'s ParamStore<T>, policy: FreezePolicy) -> Self {
        Self { store, policy, bound: Default::default() }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn bind(&self, g: &mut Graph<T>, pid: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&pid) {
            return v;
        }
        let frozen = match self.policy {
            FreezePolicy::None => false,
            FreezePolicy::Group(group) => self.store.group(pid) == group,
            FreezePolicy::All => true,
        };
        let value = self.store.value(pid).clone();
        let v = if frozen {
            g.constant_shared(value)
        } else {
            g.param(pid, value)
        };
        self.bound.borrow_mut().insert(pid, v);
        v
    }
}

// ---- initializers ---------------------------------------------------------

fn uniform_sym(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    use rand::Rng;
    (rng.random::<f64>() * 2.0 - 1.0) * bound
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in +-1/sqrt(fan_in).
    FanIn,
    /// Uniform in +-scale (used for output layers that should start near zero).
    Uniform(f64),
    Zeros,
}

impl Init {
    pub(crate) fn sample<T: Real>(
        self,
        rng: &mut ChaCha8Rng,
        rows: usize,
        cols: usize,
        fan_in: usize,
    ) -> Array2<T> {
        let bound = match self {
            Init::FanIn => 1.0 / (fan_in as f64).sqrt(),
            Init::Uniform(s) => s,
            Init::Zeros => 0.0,
        };
        Array2::from_shape_fn((rows, cols), |_| T::from_f(uniform_sym(rng, bound)))
    }
}

// ---- layers ----------------------------------------------------------------

/// Dense layer; weight stored as (in, out) so forward is `x.dot(w)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let w: Array2<T> = init.sample(rng, in_dim, out_dim, in_dim);
        let weight = store.add(format!("{name}.weight"), group, w.into_dyn());
        let bias = bias.then(|| {
            let b = match init {
                Init::FanIn => {
                    Init::Uniform(1.0 / (in_dim as f64).sqrt()).sample(rng, 1, out_dim, in_dim)
                }
                _ => Array2::zeros((1, out_dim)),
            };
            store.add(format!("{name}.bias"), group, b.into_dyn())
        });
        Self { weight, bias, in_dim, out_dim }
    }

    /// `x` is (n, in_dim); returns (n, out_dim).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Binder<T>, x: Var) -> Var {
        let w = b.bind(g, self.weight);
        let mut y = g.matmul(x, w);
        if let Some(bias) = self.bias {
            let bv = b.bind(g, bias);
            y = g.add(y, bv);
        }
        y
    }
}

/// Activation used between MLP layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Stack of dense layers with a shared hidden activation; linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden_act: Activation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        dims: &[usize],
        hidden_act: Activation,
        bias: bool,
        last_init: Init,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let layers = (0..dims.len() - 1)
            .map(|i| {
                let init = if i == dims.len() - 2 { last_init } else { Init::FanIn };
                Linear::new(
                    store,
                    rng,
                    &format!("{name}.{i}"),
                    group,
                    dims[i],
                    dims[i + 1],
                    bias,
                    init,
                )
            })
            .collect();
        Self { layers, hidden_act }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Binder<T>, mut x: Var) -> Var {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, b, x);
            if i + 1 < self.layers.len() {
                x = self.hidden_act.apply(g, x);
            }
        }
        x
    }
}

/// Layer normalization over the last axis of a (n, d) input, with affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
    ) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, ArrayD::ones(IxDyn(&[1, dim])));
        let beta = store.add(format!("{name}.beta"), group, ArrayD::zeros(IxDyn(&[1, dim])));
        Self { gamma, beta, dim, eps: 1e-5 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Binder<T>, x: Var) -> Var {
        let mu = g.mean_axis(x, 1, true);
        let xc = g.sub(x, mu);
        let sq = g.square(xc);
        let var = g.mean_axis(sq, 1, true);
        let eps = g.scalar_const(T::from_f(self.eps));
        let var_eps = g.add(var, eps);
        let std = g.sqrt(var_eps);
        let norm = g.div(xc, std);
        let gamma = b.bind(g, self.gamma);
        let beta = b.bind(g, self.beta);
        let scaled = g.mul(norm, gamma);
        g.add(scaled, beta)
    }
}

// ---- losses ----------------------------------------------------------------

/// Cross-entropy of a single (1, k) logit row against a class index.
pub fn cross_entropy_one<T: Real>(g: &mut Graph<T>, logits: Var, target: usize) -> Var {
    let logp = g.log_softmax(logits, 1);
    let picked = g.narrow(logp, 1, target, 1);
    let s = g.sum_all(picked);
    g.neg(s)
}

/// Cross-entropy of a single (1, k) logit row against the uniform distribution:
/// -(1/k) sum_i log p_i. Minimized (value ln k) when the prediction is uniform.
/// On a (B, k) batch this is the batch mean of the per-row losses.
pub fn cross_entropy_uniform<T: Real>(g: &mut Graph<T>, logits: Var) -> Var {
    let logp = g.log_softmax(logits, 1);
    let m = g.mean_all(logp);
    g.neg(m)
}

/// Mean cross-entropy of (B, k) logits against one class index per row,
/// via a one-hot mask so the graph stays O(1) nodes regardless of B.
pub fn cross_entropy_batch<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Var {
    let shape = g.shape(logits).to_vec();
    assert_eq!(shape.len(), 2, "batch cross-entropy expects (B, k) logits");
    assert_eq!(shape[0], targets.len(), "one target per row");
    let mut mask = ArrayD::<T>::zeros(IxDyn(&shape));
    for (i, &t) in targets.iter().enumerate() {
        assert!(t < shape[1], "target {t} out of range for {} classes", shape[1]);
        mask[[i, t]] = T::one();
    }
    let mask = g.constant(mask);
    let logp = g.log_softmax(logits, 1);
    let picked = g.mul(logp, mask);
    let s = g.sum_all(picked);
    let neg = g.neg(s);
    g.scale(neg, T::from_f(1.0 / targets.len() as f64))
}

// ---- optimizer --------------------------------------------------------------

#[derive(Debug, Clone)]
struct AdamSlot<T: Real> {
    m: ArrayD<T>,
    v: ArrayD<T>,
    t: u64,
}

/// AdamW: Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T: Real> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    slots: Vec<Option<AdamSlot<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: T, weight_decay: T, n_params: usize) -> Self {
        Self {
            lr,
            beta1: T::from_f(0.9),
            beta2: T::from_f(0.999),
            eps: T::from_f(1e-8),
            weight_decay,
            slots: vec![None; n_params],
        }
    }

    /// Apply one update to every parameter that has a gradient and passes
    /// the group filter.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &GradMap<T>,
        filter: impl Fn(ParamGroup) -> bool,
    ) {
        let one = T::one();
        for (pid, grad) in grads.iter() {
            if !filter(store.group(pid)) {
                continue;
            }
            let slot = self.slots[pid.0].get_or_insert_with(|| AdamSlot {
                m: ArrayD::zeros(grad.raw_dim()),
                v: ArrayD::zeros(grad.raw_dim()),
                t: 0,
            });
            slot.t += 1;
            let b1 = self.beta1;
            let b2 = self.beta2;
            ndarray::Zip::from(&mut slot.m).and(grad).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut slot.v).and(grad).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            let bc1 = one - b1.powi(slot.t as i32);
            let bc2 = one - b2.powi(slot.t as i32);
            let lr = self.lr;
            let eps = self.eps;
            let wd = self.weight_decay;
            let mut new_val = store.value(pid).to_owned();
            ndarray::Zip::from(&mut new_val)
                .and(&slot.m)
                .and(&slot.v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p = *p - lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
            store.set_value(pid, new_val);
        }
    }
}
