//! Reverse-mode automatic differentiation over dynamically shaped arrays.
//!
//! A [`Graph`] is an eager tape: every operation computes its value
//! immediately and records enough structure to replay the chain rule
//! backwards. Graphs are rebuilt per sample, so node ids ([`Var`]) are only
//! meaningful within the graph that produced them.
//!
//! Values are shared ([`ArcArray`]) so parameter leaves and reshapes are
//! cheap. Elementwise binary ops broadcast with NumPy semantics; the
//! backward pass sums gradients over broadcast axes.

use ndarray::{ArcArray, ArrayD, Axis, Ix2, IxDyn, Slice, Zip};
use std::collections::BTreeMap;

/// Scalar element type of a graph: `f32` or `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn erf(self) -> Self;
    fn to_f(self) -> f64;
    fn from_f(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in Real type")
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn to_f(self) -> f64 {
        self
    }
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn to_f(self) -> f64 {
        self as f64
    }
}

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

/// Stable identifier of a trainable parameter tensor (see `nn::ParamStore`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Expand(Var),
    SumAll(Var),
    SumAxis(Var, usize, bool),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sqrt(Var),
    Square(Var),
    Exp(Var),
    Ln(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize, len: usize },
    Detach,
}

struct Node<T: Real> {
    value: ArcArray<T, IxDyn>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to parameter leaves, keyed by
/// [`ParamId`]. Iteration order is the parameter id order (deterministic).
#[derive(Debug, Clone)]
pub struct GradMap<T: Real> {
    map: BTreeMap<ParamId, ArrayD<T>>,
}

impl<T: Real> GradMap<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn get(&self, pid: ParamId) -> Option<&ArrayD<T>> {
        self.map.get(&pid)
    }

    pub fn insert(&mut self, pid: ParamId, g: ArrayD<T>) {
        self.map.insert(pid, g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ArrayD<T>)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn accumulate(&mut self, pid: ParamId, g: &ArrayD<T>) {
        match self.map.get_mut(&pid) {
            Some(acc) => ndarray::Zip::from(acc).and(g).for_each(|a, &b| *a = *a + b),
            None => {
                self.map.insert(pid, g.clone());
            }
        }
    }

    /// Element-wise sum of two gradient maps (missing entries count as zero).
    pub fn merge(&mut self, other: &GradMap<T>) {
        for (pid, g) in other.iter() {
            self.accumulate(pid, g);
        }
    }

    /// Multiply every gradient by `c`.
    pub fn scale(&mut self, c: T) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|v| v * c);
        }
    }
}

impl<T: Real> Default for GradMap<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Eager autodiff tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: value.into_shared(), op, needs_grad });
        Var(self.nodes.len() as u32 - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0 as usize].needs_grad
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &ArcArray<T, IxDyn> {
        &self.nodes[v.0 as usize].value
    }

    /// Value of a single-element node as a scalar.
    pub fn scalar(&self, v: Var) -> T {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "scalar() on node of shape {:?}", a.shape());
        *a.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0 as usize].value.shape()
    }

    // ---- leaves ---------------------------------------------------------

    /// Non-trainable input.
    pub fn constant(&mut self, a: ArrayD<T>) -> Var {
        self.push(a, Op::Leaf(None), false)
    }

    pub fn constant_shared(&mut self, a: ArcArray<T, IxDyn>) -> Var {
        self.nodes.push(Node { value: a, op: Op::Leaf(None), needs_grad: false });
        Var(self.nodes.len() as u32 - 1)
    }

    pub fn scalar_const(&mut self, v: T) -> Var {
        self.constant(ndarray::arr0(v).into_dyn())
    }

    /// Trainable leaf; gradients are reported under `pid`.
    pub fn param(&mut self, pid: ParamId, value: ArcArray<T, IxDyn>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf(Some(pid)), needs_grad: true });
        Var(self.nodes.len() as u32 - 1)
    }

    // ---- elementwise binary (broadcasting) ------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = bin_broadcast(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = bin_broadcast(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = bin_broadcast(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = bin_broadcast(self.value(a), self.value(b), |x, y| x / y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), needs)
    }

    // ---- linear algebra --------------------------------------------------

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = mm(self.value(a), self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), needs)
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), 2, "transpose expects a matrix");
        let v = va.t().to_owned();
        let needs = self.needs(a);
        self.push(v, Op::Transpose(a), needs)
    }

    // ---- shape -----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        // as_standard_layout first: values produced by transpose keep their
        // source memory order, which a C-order reshape rejects.
        let v = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible size");
        let needs = self.needs(a);
        self.push(v, Op::Reshape(a), needs)
    }

    /// Broadcast to a larger shape (NumPy rules).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("expand: cannot broadcast {:?} to {:?}", self.shape(a), shape))
            .to_owned();
        let needs = self.needs(a);
        self.push(v, Op::Expand(a), needs)
    }

    // ---- reductions ------------------------------------------------------

    /// Sum of all elements (0-d result).
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ndarray::arr0(self.value(a).sum()).into_dyn();
        let needs = self.needs(a);
        self.push(v, Op::SumAll(a), needs)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Var {
        let mut v = self.value(a).sum_axis(Axis(axis));
        if keepdim {
            v = v.insert_axis(Axis(axis));
        }
        let needs = self.needs(a);
        self.push(v, Op::SumAxis(a, axis, keepdim), needs)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Var {
        let n = self.shape(a)[axis];
        let s = self.sum_axis(a, axis, keepdim);
        self.scale(s, T::one() / T::from_f(n as f64))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_f(n as f64))
    }

    // ---- unary -----------------------------------------------------------

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        let needs = self.needs(a);
        self.push(v, Op::Neg(a), needs)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        let needs = self.needs(a);
        self.push(v, Op::Scale(a, c), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        let needs = self.needs(a);
        self.push(v, Op::Relu(a), needs)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_val);
        let needs = self.needs(a);
        self.push(v, Op::Gelu(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid_val);
        let needs = self.needs(a);
        self.push(v, Op::Sigmoid(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.tanh());
        let needs = self.needs(a);
        self.push(v, Op::Tanh(a), needs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.sqrt());
        let needs = self.needs(a);
        self.push(v, Op::Sqrt(a), needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let needs = self.needs(a);
        self.push(v, Op::Square(a), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.exp());
        let needs = self.needs(a);
        self.push(v, Op::Exp(a), needs)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.ln());
        let needs = self.needs(a);
        self.push(v, Op::Ln(a), needs)
    }

    // ---- softmax ---------------------------------------------------------

    /// Numerically stable softmax along `axis`. `-inf` logits get weight 0.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let v = softmax_values(self.value(a), axis);
        let needs = self.needs(a);
        self.push(v, Op::Softmax(a, axis), needs)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Var {
        let x = self.value(a);
        let mut v = x.to_owned();
        for mut lane in v.lanes_mut(Axis(axis)) {
            let m = lane.fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let mut s = T::zero();
            for x in lane.iter() {
                s = s + (*x - m).exp();
            }
            let lse = m + s.ln();
            for x in lane.iter_mut() {
                *x = *x - lse;
            }
        }
        let needs = self.needs(a);
        self.push(v, Op::LogSoftmax(a, axis), needs)
    }

    // ---- structure -------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::Concat(parts.to_vec(), axis), needs)
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let needs = self.needs(a);
        self.push(v, Op::Narrow { x: a, axis, start, len }, needs)
    }

    /// Identity forward, zero backward: cuts the gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0 as usize].value.clone();
        self.nodes.push(Node { value: v, op: Op::Detach, needs_grad: false });
        Var(self.nodes.len() as u32 - 1)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar `loss`; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> GradMap<T> {
        let n = self.nodes.len();
        let li = loss.0 as usize;
        assert_eq!(self.nodes[li].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..n).map(|_| None).collect();
        grads[li] = Some(ArrayD::from_elem(self.nodes[li].value.raw_dim(), T::one()));

        let mut out = GradMap::new();
        for i in (0..=li).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf(Some(pid)) => out.accumulate(*pid, &g),
                Op::Leaf(None) | Op::Detach => {}
                Op::Add(a, b) => {
                    self.acc_bcast(&mut grads, *a, &g, None);
                    self.acc_bcast(&mut grads, *b, &g, None);
                }
                Op::Sub(a, b) => {
                    self.acc_bcast(&mut grads, *a, &g, None);
                    let ng = g.mapv(|x| -x);
                    self.acc_bcast(&mut grads, *b, &ng, None);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let da = bin_broadcast(&g.clone().into_shared(), self.value(*b), |x, y| x * y);
                        self.acc_bcast(&mut grads, *a, &da, None);
                    }
                    if self.needs(*b) {
                        let db = bin_broadcast(&g.clone().into_shared(), self.value(*a), |x, y| x * y);
                        self.acc_bcast(&mut grads, *b, &db, None);
                    }
                }
                Op::Div(a, b) => {
                    if self.needs(*a) {
                        let da = bin_broadcast(&g.clone().into_shared(), self.value(*b), |x, y| x / y);
                        self.acc_bcast(&mut grads, *a, &da, None);
                    }
                    if self.needs(*b) {
                        let va = self.value(*a);
                        let vb = self.value(*b);
                        let quot = bin_broadcast(va, vb, |x, y| x / (y * y));
                        let db = bin_broadcast(&g.clone().into_shared(), &quot.into_shared(), |x, y| -(x * y));
                        self.acc_bcast(&mut grads, *b, &db, None);
                    }
                }
                Op::Neg(a) => {
                    let da = g.mapv(|x| -x);
                    self.acc(&mut grads, *a, da);
                }
                Op::Scale(a, c) => {
                    let da = g.mapv(|x| x * *c);
                    self.acc(&mut grads, *a, da);
                }
                Op::MatMul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    if self.needs(*a) {
                        let da = mm(&g.clone().into_shared(), &vb.t().to_owned().into_shared());
                        self.acc(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = mm(&va.t().to_owned().into_shared(), &g.clone().into_shared());
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::Transpose(a) => {
                    let da = g.t().to_owned();
                    self.acc(&mut grads, *a, da);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    let da = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&shape))
                        .expect("reshape backward");
                    self.acc(&mut grads, *a, da);
                }
                Op::Expand(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    let da = reduce_to_shape(g, &shape);
                    self.acc(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let g0 = *g.iter().next().unwrap();
                    let da = ArrayD::from_elem(self.value(*a).raw_dim(), g0);
                    self.acc(&mut grads, *a, da);
                }
                Op::SumAxis(a, axis, keepdim) => {
                    let shape = self.value(*a).shape().to_vec();
                    let gk = if *keepdim { g } else { g.insert_axis(Axis(*axis)) };
                    let da = gk.broadcast(IxDyn(&shape)).expect("sum_axis backward").to_owned();
                    self.acc(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let va = self.value(*a);
                    let da = Zip::from(&g).and(va).map_collect(|&gi, &x| {
                        if x > T::zero() { gi } else { T::zero() }
                    });
                    self.acc(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let va = self.value(*a);
                    let da = Zip::from(&g).and(va).map_collect(|&gi, &x| gi * gelu_grad(x));
                    self.acc(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let vy = &self.nodes[i].value;
                    let da = Zip::from(&g).and(vy).map_collect(|&gi, &y| gi * y * (T::one() - y));
                    self.acc(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let vy = &self.nodes[i].value;
                    let da = Zip::from(&g).and(vy).map_collect(|&gi, &y| gi * (T::one() - y * y));
                    self.acc(&mut grads, *a, da);
                }
                Op::Sqrt(a) => {
                    let vy = &self.nodes[i].value;
                    let half = T::from_f(0.5);
                    let da = Zip::from(&g).and(vy).map_collect(|&gi, &y| gi * half / y);
                    self.acc(&mut grads, *a, da);
                }
                Op::Square(a) => {
                    let va = self.value(*a);
                    let two = T::from_f(2.0);
                    let da = Zip::from(&g).and(va).map_collect(|&gi, &x| gi * two * x);
                    self.acc(&mut grads, *a, da);
                }
                Op::Exp(a) => {
                    let vy = &self.nodes[i].value;
                    let da = Zip::from(&g).and(vy).map_collect(|&gi, &y| gi * y);
                    self.acc(&mut grads, *a, da);
                }
                Op::Ln(a) => {
                    let va = self.value(*a);
                    let da = Zip::from(&g).and(va).map_collect(|&gi, &x| gi / x);
                    self.acc(&mut grads, *a, da);
                }
                Op::Softmax(a, axis) => {
                    // dx = y * (g - sum(g * y, axis))
                    let y = &self.nodes[i].value;
                    let gy = Zip::from(&g).and(y).map_collect(|&gi, &yi| gi * yi);
                    let dot = gy.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                    let dotb = dot.broadcast(y.raw_dim()).unwrap();
                    let da = Zip::from(&g)
                        .and(y)
                        .and(&dotb)
                        .map_collect(|&gi, &yi, &di| yi * (gi - di));
                    self.acc(&mut grads, *a, da);
                }
                Op::LogSoftmax(a, axis) => {
                    // dx = g - softmax(x) * sum(g, axis)
                    let y = &self.nodes[i].value;
                    let s = y.mapv(|v| v.exp());
                    let gsum = g.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                    let gsumb = gsum.broadcast(y.raw_dim()).unwrap();
                    let da = Zip::from(&g)
                        .and(&s)
                        .and(&gsumb)
                        .map_collect(|&gi, &si, &gs| gi - si * gs);
                    self.acc(&mut grads, *a, da);
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0usize;
                    for p in parts {
                        let w = self.value(*p).shape()[*axis];
                        if self.needs(*p) {
                            let dp = g
                                .slice_axis(Axis(*axis), Slice::from(offset..offset + w))
                                .to_owned();
                            self.acc(&mut grads, *p, dp);
                        }
                        offset += w;
                    }
                }
                Op::Narrow { x, axis, start, len } => {
                    let mut da = ArrayD::zeros(self.value(*x).raw_dim());
                    da.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                        .assign(&g);
                    self.acc(&mut grads, *x, da);
                }
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<ArrayD<T>>], v: Var, delta: ArrayD<T>) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0 as usize];
        match slot {
            Some(acc) => ndarray::Zip::from(acc).and(&delta).for_each(|a, &b| *a = *a + b),
            None => *slot = Some(delta),
        }
    }

    /// Accumulate with reduction over broadcast axes of `v`.
    fn acc_bcast(&self, grads: &mut [Option<ArrayD<T>>], v: Var, delta: &ArrayD<T>, _: Option<()>) {
        if !self.needs(v) {
            return;
        }
        let shape = self.value(v).shape().to_vec();
        let reduced = reduce_to_shape(delta.clone(), &shape);
        self.acc(grads, v, reduced);
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_val<T: Real>(x: T) -> T {
    let half = T::from_f(0.5);
    let inv_sqrt2 = T::from_f(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + (x * inv_sqrt2).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f(0.5);
    let inv_sqrt2 = T::from_f(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let phi_big = half * (T::one() + (x * inv_sqrt2).erf());
    let phi_small = inv_sqrt_2pi * (-half * x * x).exp();
    phi_big + x * phi_small
}

fn sigmoid_val<T: Real>(x: T) -> T {
    // Split on sign to avoid overflow of exp for large |x|.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// NumPy broadcast of two shapes; panics on incompatibility.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {:?} and {:?} do not broadcast", a, b),
        };
    }
    out
}

fn bin_broadcast<T: Real>(
    a: &ArcArray<T, IxDyn>,
    b: &ArcArray<T, IxDyn>,
    f: impl Fn(T, T) -> T,
) -> ArrayD<T> {
    if a.shape() == b.shape() {
        return Zip::from(a).and(b).map_collect(|&x, &y| f(x, y));
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

/// Sum `g` down to `target` shape (inverse of broadcasting).
fn reduce_to_shape<T: Real>(mut g: ArrayD<T>, target: &[usize]) -> ArrayD<T> {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn mm<T: Real>(a: &ArcArray<T, IxDyn>, b: &ArcArray<T, IxDyn>) -> ArrayD<T> {
    let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
    let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
    assert_eq!(
        a2.shape()[1],
        b2.shape()[0],
        "matmul: inner dims {:?} x {:?}",
        a2.shape(),
        b2.shape()
    );
    a2.dot(&b2).into_dyn()
}

fn softmax_values<T: Real>(x: &ArcArray<T, IxDyn>, axis: usize) -> ArrayD<T> {
    let mut y = x.to_owned();
    for mut lane in y.lanes_mut(Axis(axis)) {
        let m = lane.fold(T::neg_infinity(), |acc, &v| acc.max(v));
        debug_assert!(m.is_finite(), "softmax over fully masked lane");
        let mut s = T::zero();
        for v in lane.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        for v in lane.iter_mut() {
            *v = *v / s;
        }
    }
    y
}
