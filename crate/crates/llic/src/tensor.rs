//! Dense f64 tensors with reverse-mode automatic differentiation on a
//! dynamic tape.
//!
//! The tape is rebuilt on every forward pass (the per-sample generated
//! convolution kernels make a static graph impractical). Recording is
//! opt-in: a tensor participates in differentiation only if it was created
//! as a tape leaf or derived from one. Everything is single-threaded and
//! evaluated in a fixed order, so identical inputs give bitwise-identical
//! outputs and gradients.

use std::cell::RefCell;
use std::rc::Rc;

pub type NodeId = usize;

const NO_NODE: NodeId = usize::MAX;

/// Backward closure: given the output adjoint, return one optional adjoint
/// per parent (entries for parents that do not require grad are ignored and
/// may be None).
type BackFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    parents: Vec<NodeId>,
    size: usize,
    param: Option<usize>,
    back: Option<BackFn>,
}

struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Recording context for one forward pass. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, parents: Vec<NodeId>, size: usize, param: Option<usize>, back: Option<BackFn>) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            parents,
            size,
            param,
            back,
        });
        inner.nodes.len() - 1
    }

    /// Register `t` as a differentiable leaf (an input we want gradients
    /// for, e.g. the image in an ERF probe).
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let node = self.push(Vec::new(), t.len(), None, None);
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: Some(node),
            tape: Some(self.clone()),
        }
    }

    /// Associate `t` with this tape without requesting gradients for it.
    /// Ops downstream of the result are recorded (params they lift get
    /// gradients), but `t` itself receives none — the usual way to feed a
    /// training batch in.
    pub fn attach(&self, t: &Tensor) -> Tensor {
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: None,
            tape: Some(self.clone()),
        }
    }

    pub(crate) fn param_leaf(&self, param: usize, shape: Vec<usize>, data: Rc<Vec<f64>>) -> Tensor {
        let node = self.push(Vec::new(), data.len(), Some(param), None);
        Tensor {
            shape,
            data,
            node: Some(node),
            tape: Some(self.clone()),
        }
    }

    /// Reverse sweep from a scalar loss. Consumes the tape's one allowed
    /// backward; a second call panics unless `reset` was called.
    pub fn backward(&self, loss: &Tensor) -> Gradients {
        assert_eq!(loss.len(), 1, "backward requires a scalar loss");
        let root = loss.node.expect("backward: loss is not on the tape");
        assert!(
            loss.tape.as_ref().is_some_and(|t| t.same_as(self)),
            "backward: loss belongs to a different tape"
        );
        {
            let mut inner = self.inner.borrow_mut();
            assert!(!inner.consumed, "backward called twice on the same tape");
            inner.consumed = true;
        }
        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let node = &inner.nodes[id];
            if grads[id].is_none() {
                continue;
            }
            if let Some(back) = &node.back {
                let g = grads[id].take().unwrap();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| p != NO_NODE)
                    .collect();
                let contribs = back(&g, &needs);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (slot, contrib) in contribs.into_iter().enumerate() {
                    let pid = node.parents[slot];
                    if pid == NO_NODE {
                        continue;
                    }
                    let Some(c) = contrib else { continue };
                    let psize = inner.nodes[pid].size;
                    assert_eq!(c.len(), psize, "backward: adjoint size mismatch");
                    match &mut grads[pid] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(c.iter()) {
                                *a += b;
                            }
                        }
                        None => grads[pid] = Some(c),
                    }
                }
            }
            // Leaf grads stay resident for Gradients::wrt / param sync.
        }
        Gradients {
            tape: self.clone(),
            grads,
        }
    }

    /// Allow another forward/backward cycle on this tape handle.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of a backward sweep. Holds adjoints for leaf nodes.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of the loss wrt a tape leaf (input or param tensor as lifted).
    pub fn wrt(&self, t: &Tensor) -> Option<Vec<f64>> {
        let node = t.node?;
        self.grads.get(node).and_then(|g| g.clone())
    }

    /// Sum of adjoints over every lift of the given param on this tape.
    pub fn wrt_param(&self, param: usize, size: usize) -> Vec<f64> {
        let inner = self.tape.inner.borrow();
        let mut out = vec![0.0; size];
        for (id, node) in inner.nodes.iter().enumerate() {
            if node.param == Some(param) {
                if let Some(g) = &self.grads[id] {
                    for (o, v) in out.iter_mut().zip(g.iter()) {
                        *o += v;
                    }
                }
            }
        }
        out
    }

    /// Accumulate every param adjoint into the store's grad buffers.
    pub fn apply_to(&self, store: &mut crate::params::ParamStore) {
        let inner = self.tape.inner.borrow();
        for (id, node) in inner.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                if let Some(g) = &self.grads[id] {
                    store.accumulate_grad(pid, g);
                }
            }
        }
    }
}

/// N-dimensional dense tensor (row-major, 64-bit floats).
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeId>,
    tape: Option<Tape>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive: {shape:?}"
        );
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor {
            shape,
            data: Rc::new(data),
            node: None,
            tape: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        Tensor::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Shared handle to the underlying buffer (for backward closures).
    pub(crate) fn share(&self) -> Rc<Vec<f64>> {
        self.data.clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() requires a scalar tensor");
        self.data[0]
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.tape.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// (n, c, h, w) of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, context: &str) {
        assert!(self.is_finite(), "non-finite values in {context}");
    }

    /// Same data viewed under a different shape (element count preserved).
    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(numel(&shape), self.len(), "reshape cannot change element count");
        record(
            &[self],
            shape,
            self.data.as_ref().clone(),
            move |g, _| vec![Some(g.to_vec())],
        )
    }
}

/// Build an op result; registers a tape node iff any parent is recorded.
pub(crate) fn record(
    parents: &[&Tensor],
    out_shape: Vec<usize>,
    out_data: Vec<f64>,
    back: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
) -> Tensor {
    assert_eq!(numel(&out_shape), out_data.len());
    let mut tape: Option<Tape> = None;
    for p in parents {
        if let Some(t) = &p.tape {
            match &tape {
                None => tape = Some(t.clone()),
                Some(existing) => assert!(
                    existing.same_as(t),
                    "operands come from different tapes"
                ),
            }
        }
    }
    let Some(tape) = tape else {
        return Tensor::from_vec(out_shape, out_data);
    };
    let ids: Vec<NodeId> = parents.iter().map(|p| p.node.unwrap_or(NO_NODE)).collect();
    let node = tape.push(ids, out_data.len(), None, Some(Box::new(back)));
    Tensor {
        shape: out_shape,
        data: Rc::new(out_data),
        node: Some(node),
        tape: Some(tape),
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

/// Lower bound applied to log/sqrt arguments (single numeric-safety policy
/// shared with the likelihood floor).
pub const DOMAIN_CLAMP: f64 = 1e-9;

impl Tensor {
    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let out: Vec<f64> = self.data.iter().map(|&x| f(x)).collect();
        let x = self.data.clone();
        let y = Rc::new(out.clone());
        record(
            &[self],
            self.shape.clone(),
            out,
            move |g, _| {
                let gx = g
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect();
                vec![Some(gx)]
            },
        )
    }

    fn binary(
        &self,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        assert_eq!(
            self.shape, other.shape,
            "elementwise op on mismatched shapes {:?} vs {:?}",
            self.shape, other.shape
        );
        let out: Vec<f64> = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let a = self.data.clone();
        let b = other.data.clone();
        record(
            &[self, other],
            self.shape.clone(),
            out,
            move |g, needs| {
                let ga = needs[0].then(|| {
                    g.iter()
                        .zip(a.iter().zip(b.iter()))
                        .map(|(&gi, (&ai, &bi))| gi * dfa(ai, bi))
                        .collect()
                });
                let gb = needs[1].then(|| {
                    g.iter()
                        .zip(a.iter().zip(b.iter()))
                        .map(|(&gi, (&ai, &bi))| gi * dfb(ai, bi))
                        .collect()
                });
                vec![ga, gb]
            },
        )
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary(
            other,
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    /// Multiply by a scalar.
    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(|x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(|x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(|x| x.exp(), |_, y| y)
    }

    /// Natural log with the argument clamped to >= DOMAIN_CLAMP.
    pub fn ln(&self) -> Tensor {
        self.unary(
            |x| x.max(DOMAIN_CLAMP).ln(),
            |x, _| if x > DOMAIN_CLAMP { 1.0 / x } else { 0.0 },
        )
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(|x| x.tanh(), |_, y| 1.0 - y * y)
    }

    /// Square root with the argument clamped to >= DOMAIN_CLAMP.
    pub fn sqrt(&self) -> Tensor {
        self.unary(
            |x| x.max(DOMAIN_CLAMP).sqrt(),
            |x, y| if x > DOMAIN_CLAMP { 0.5 / y } else { 0.0 },
        )
    }

    pub fn abs(&self) -> Tensor {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    /// Clamp to [lo, hi]; gradient passes inside the closed interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        assert!(lo <= hi);
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// x^p for constant p; the base is clamped to >= DOMAIN_CLAMP.
    pub fn powf(&self, p: f64) -> Tensor {
        self.unary(
            move |x| x.max(DOMAIN_CLAMP).powf(p),
            move |x, _| {
                if x > DOMAIN_CLAMP {
                    p * x.powf(p - 1.0)
                } else {
                    0.0
                }
            },
        )
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&self) -> Tensor {
        self.unary(
            |x| {
                if x > 30.0 {
                    x
                } else if x < -30.0 {
                    x.exp()
                } else {
                    x.exp().ln_1p()
                }
            },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    // -----------------------------------------------------------------------
    // Reductions
    // -----------------------------------------------------------------------

    fn reduce(&self, axes: &[usize], mean: bool) -> Tensor {
        let rank = self.shape.len();
        for &a in axes {
            assert!(a < rank, "reduce: axis {a} out of range for rank {rank}");
        }
        let mut reduced = vec![false; rank];
        for &a in axes {
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(reduced.iter())
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let count: usize = self
            .shape
            .iter()
            .zip(reduced.iter())
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let n_in = self.len();

        // Full reduction: one sequential pass, no index table.
        if reduced.iter().all(|&r| r) {
            let mut total = 0.0;
            for &v in self.data.iter() {
                total += v;
            }
            let out = vec![total * scale];
            return record(
                &[self],
                out_shape,
                out,
                move |g, _| vec![Some(vec![g[0] * scale; n_in])],
            );
        }

        // Partial reduction: precompute the output slot of every input
        // element once (carry-propagating multi-index, no per-element
        // allocation) and share the table with the backward closure.
        let out_len = numel(&out_shape);
        let mut out_stride = vec![0usize; rank];
        {
            let mut s = 1usize;
            for d in (0..rank).rev() {
                if !reduced[d] {
                    out_stride[d] = s;
                    s *= self.shape[d];
                }
            }
        }
        let mut slots: Vec<u32> = Vec::with_capacity(n_in);
        let mut coords = vec![0usize; rank];
        let mut slot = 0usize;
        for _ in 0..n_in {
            slots.push(slot as u32);
            for d in (0..rank).rev() {
                coords[d] += 1;
                if !reduced[d] {
                    slot += out_stride[d];
                }
                if coords[d] < self.shape[d] {
                    break;
                }
                coords[d] = 0;
                if !reduced[d] {
                    slot -= out_stride[d] * self.shape[d];
                }
            }
        }
        let slots = Rc::new(slots);
        let mut out = vec![0.0; out_len];
        for (i, &v) in self.data.iter().enumerate() {
            out[slots[i] as usize] += v;
        }
        if mean {
            for v in out.iter_mut() {
                *v *= scale;
            }
        }
        let slots_b = slots.clone();
        record(
            &[self],
            out_shape,
            out,
            move |g, _| {
                let mut gx = vec![0.0; n_in];
                for (i, gv) in gx.iter_mut().enumerate() {
                    *gv = g[slots_b[i] as usize] * scale;
                }
                vec![Some(gx)]
            },
        )
    }

    pub fn sum_axes(&self, axes: &[usize]) -> Tensor {
        self.reduce(axes, false)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Tensor {
        self.reduce(axes, true)
    }

    pub fn sum_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.shape.len()).collect();
        self.reduce(&axes, false)
    }

    pub fn mean_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.shape.len()).collect();
        self.reduce(&axes, true)
    }
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

/// Max relative error between analytic and central-difference gradients of
/// sum(f(x)) over every element of `input`.
///
/// Panics if two baseline evaluations disagree bitwise (non-deterministic
/// forward) or if epsilon is outside (0, 1e-2].
pub fn grad_check<F>(f: F, input: &Tensor, epsilon: f64) -> f64
where
    F: Fn(&Tensor) -> Tensor,
{
    assert!(
        epsilon > 0.0 && epsilon <= 1e-2,
        "grad_check epsilon must be in (0, 1e-2]"
    );
    let base = Tensor::from_vec(input.shape().to_vec(), input.data().to_vec());
    let y0 = f(&base);
    let y1 = f(&base);
    assert_eq!(
        y0.data(),
        y1.data(),
        "grad_check: forward function is non-deterministic"
    );

    let tape = Tape::new();
    let x = tape.leaf(&base);
    let loss = f(&x).sum_all();
    let grads = tape.backward(&loss);
    let analytic = grads
        .wrt(&x)
        .expect("grad_check: input did not receive a gradient");

    let mut max_rel = 0.0f64;
    let mut data = input.data().to_vec();
    for i in 0..data.len() {
        let saved = data[i];
        data[i] = saved + epsilon;
        let plus = f(&Tensor::from_vec(input.shape().to_vec(), data.clone()))
            .sum_all()
            .item();
        data[i] = saved - epsilon;
        let minus = f(&Tensor::from_vec(input.shape().to_vec(), data.clone()))
            .sum_all()
            .item();
        data[i] = saved;
        let cd = (plus - minus) / (2.0 * epsilon);
        let denom = analytic[i].abs().max(cd.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - cd).abs() / denom);
    }
    max_rel
}

/// Finite-difference check over the values of selected params.
/// `f` must run a fresh forward on the given tape each call.
pub fn grad_check_params<F>(
    f: F,
    store: &mut crate::params::ParamStore,
    params: &[usize],
    epsilon: f64,
) -> f64
where
    F: Fn(&crate::params::ParamStore, &Tape) -> Tensor,
{
    assert!(epsilon > 0.0 && epsilon <= 1e-2);
    let tape = Tape::new();
    let loss = f(store, &tape).sum_all();
    let grads = tape.backward(&loss);

    let mut max_rel = 0.0f64;
    for &pid in params {
        let size = store.value(pid).len();
        let analytic = grads.wrt_param(pid, size);
        for i in 0..size {
            let saved = store.value(pid)[i];
            store.set_value_at(pid, i, saved + epsilon);
            let plus = f(store, &Tape::new()).sum_all().item();
            store.set_value_at(pid, i, saved - epsilon);
            let minus = f(store, &Tape::new()).sum_all().item();
            store.set_value_at(pid, i, saved);
            let cd = (plus - minus) / (2.0 * epsilon);
            let denom = analytic[i].abs().max(cd.abs()).max(1e-8);
            max_rel = max_rel.max((analytic[i] - cd).abs() / denom);
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_basics() {
        let a = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]);
        let b = Tensor::from_vec(vec![3], vec![4.0, 5.0, 6.0]);
        assert_eq!(a.mul(&b).data(), &[4.0, 10.0, 18.0]);
        assert_eq!(a.add(&b).data(), &[5.0, 7.0, 9.0]);
        let z = Tensor::zeros(vec![4]);
        assert_eq!(z.tanh().data(), &[0.0; 4]);
    }

    #[test]
    #[should_panic(expected = "mismatched shapes")]
    fn elementwise_shape_mismatch_panics() {
        let a = Tensor::zeros(vec![2]);
        let b = Tensor::zeros(vec![3]);
        let _ = a.add(&b);
    }

    #[test]
    fn product_rule_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::from_vec(vec![1], vec![2.0]));
        let b = Tensor::from_vec(vec![1], vec![3.0]);
        let loss = a.mul(&b).sum_all();
        let grads = tape.backward(&loss);
        assert_eq!(grads.wrt(&a).unwrap(), vec![3.0]);
    }

    #[test]
    fn sum_and_mean_reduce() {
        let t = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.sum_all().item(), 10.0);
        let c = Tensor::full(vec![3, 5], 2.5);
        assert_eq!(c.mean_all().item(), 2.5);
        // Axis reduction: sum rows.
        let rows = t.sum_axes(&[1]);
        assert_eq!(rows.shape(), &[2]);
        assert_eq!(rows.data(), &[3.0, 7.0]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![4], vec![0.5, -1.0, 2.0, 7.0]));
        let loss = x.sum_all();
        let grads = tape.backward(&loss);
        assert_eq!(grads.wrt(&x).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn weighted_sum_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 2.0]));
        let x = Tensor::from_vec(vec![2], vec![3.0, 4.0]);
        let loss = w.mul(&x).sum_all();
        let grads = tape.backward(&loss);
        assert_eq!(grads.wrt(&w).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let tape = Tape::new();
        let p = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 1.0]));
        let x = tape.leaf(&Tensor::from_vec(vec![2], vec![3.0, 4.0]));
        let loss = x.sum_all();
        let grads = tape.backward(&loss);
        assert!(grads.wrt(&p).is_none());
        let _ = p;
    }

    #[test]
    #[should_panic(expected = "backward called twice")]
    fn double_backward_panics() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.0));
        let loss = x.scale(2.0);
        let _ = tape.backward(&loss);
        let _ = tape.backward(&loss);
    }

    #[test]
    fn grad_check_identity_and_square() {
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]);
        let e_id = grad_check(|t| t.clone(), &x, 1e-5);
        assert!(e_id <= 1e-10, "identity grad error {e_id}");
        let e_sq = grad_check(|t| t.mul(t), &x, 1e-5);
        assert!(e_sq < 1e-7, "square grad error {e_sq}");
    }

    #[test]
    fn grad_check_transcendentals() {
        let x = Tensor::from_vec(vec![1, 4, 6, 6], (0..144).map(|i| 0.03 * i as f64 - 2.0).collect());
        for (name, f) in [
            ("exp", Box::new(|t: &Tensor| t.exp()) as Box<dyn Fn(&Tensor) -> Tensor>),
            ("tanh", Box::new(|t: &Tensor| t.tanh())),
            ("softplus", Box::new(|t: &Tensor| t.softplus())),
            ("abs_smooth", Box::new(|t: &Tensor| t.add_scalar(10.0).abs())),
            ("ln", Box::new(|t: &Tensor| t.add_scalar(10.0).ln())),
            ("sqrt", Box::new(|t: &Tensor| t.add_scalar(10.0).sqrt())),
            ("powf", Box::new(|t: &Tensor| t.add_scalar(10.0).powf(1.7))),
            ("div", Box::new(|t: &Tensor| {
                let d = t.add_scalar(40.0);
                t.div(&d)
            })),
        ] {
            let err = grad_check(&f, &x, 1e-5);
            assert!(err < 1e-5, "{name}: grad error {err}");
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let xv = Tensor::from_vec(vec![5], vec![0.3, -0.2, 1.7, 0.9, -1.1]);
        let (alpha, beta) = (2.5, -0.75);
        let run = |a: f64, b: f64| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.leaf(&xv);
            let l1 = x.tanh().sum_all();
            let l2 = x.mul(&x).sum_all();
            let loss = l1.scale(a).add(&l2.scale(b));
            tape.backward(&loss).wrt(&x).unwrap()
        };
        let g_combined = run(alpha, beta);
        let g1 = run(1.0, 0.0);
        let g2 = run(0.0, 1.0);
        for i in 0..g_combined.len() {
            let expect = alpha * g1[i] + beta * g2[i];
            assert!(
                (g_combined[i] - expect).abs() < 1e-12,
                "linearity violated at {i}: {} vs {expect}",
                g_combined[i]
            );
        }
    }

    #[test]
    fn replay_determinism() {
        let x = Tensor::from_vec(vec![8], (0..8).map(|i| (i as f64) * 0.37 - 1.0).collect());
        let run = || {
            let tape = Tape::new();
            let t = tape.leaf(&x);
            let y = t.exp().tanh().scale(0.5).add(&t.abs());
            let loss = y.sum_all();
            let g = tape.backward(&loss).wrt(&t).unwrap();
            (y.data().to_vec(), g)
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        assert_eq!(y1, y2);
        assert_eq!(g1, g2);
    }

    #[test]
    #[should_panic(expected = "non-deterministic")]
    fn grad_check_detects_nondeterministic_forward() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]);
        let _ = grad_check(
            move |t| {
                counter.set(counter.get() + 1.0);
                t.scale(counter.get())
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn clamp_gradient_gates() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![3], vec![-2.0, 0.5, 2.0]));
        let loss = x.clamp(0.0, 1.0).sum_all();
        let g = tape.backward(&loss).wrt(&x).unwrap();
        assert_eq!(g, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn reshape_preserves_data_and_grads() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let y = x.reshape(vec![3, 2]);
        assert_eq!(y.data(), x.data());
        let loss = y.mul(&y).sum_all();
        let g = tape.backward(&loss).wrt(&x).unwrap();
        assert_eq!(g, vec![2., 4., 6., 8., 10., 12.]);
    }
}
