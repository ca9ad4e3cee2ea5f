//! Reverse-mode automatic differentiation on a tape.
//!
//! A [`Tape`] records every operation eagerly: each op computes its output
//! value immediately and pushes a backward closure that, given the output
//! gradient, accumulates gradients into its parents. [`Tape::backward`] walks
//! the recorded nodes in reverse. The engine is deliberately small and
//! single-threaded — determinism is a feature, not an optimization target —
//! and generic over [`Scalar`] so the same graph code runs in `f32` for
//! training and `f64` for finite-difference gradient audits.
//!
//! Gradients only flow where requested: a node participates in backward only
//! if one of its ancestors was created with [`Tape::leaf`]. Constants created
//! with [`Tape::constant`] terminate gradient flow without cost.

mod kernels;
mod ops;

pub use kernels::{binomial_taps, blur_forward, Pad};
pub use ops::DftPlan;

use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

type BackFn<S> = Box<dyn FnOnce(&ArrayD<S>, &[ArrayD<S>], &mut [Option<ArrayD<S>>])>;

struct TapeInner<S: Scalar> {
    values: Vec<ArrayD<S>>,
    needs_grad: Vec<bool>,
    backward: Vec<Option<BackFn<S>>>,
}

/// The recording tape. Create one per optimization phase; it is consumed by a
/// single [`Tape::backward`] call.
pub struct Tape<S: Scalar> {
    inner: RefCell<TapeInner<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                values: Vec::new(),
                needs_grad: Vec::new(),
                backward: Vec::new(),
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A node gradients will be requested for (parameters, audited inputs).
    pub fn leaf(&self, value: ArrayD<S>) -> Var {
        self.push(value, true, None)
    }

    /// A node that terminates gradient flow (data, fixed weights, twiddles).
    pub fn constant(&self, value: ArrayD<S>) -> Var {
        self.push(value, false, None)
    }

    /// Clone of the node's current value.
    pub fn value(&self, v: Var) -> ArrayD<S> {
        self.inner.borrow().values[v.id].clone()
    }

    /// Runs `f` against the node's value without cloning.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&ArrayD<S>) -> R) -> R {
        f(&self.inner.borrow().values[v.id])
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().values[v.id].shape().to_vec()
    }

    /// The value of a scalar node as `f64`.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.with_value(v, |a| {
            debug_assert_eq!(a.len(), 1, "scalar_value on non-scalar node");
            a.iter().next().copied().unwrap_or_else(S::zero).to_f64()
        })
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.inner.borrow().needs_grad[v.id]
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<S>,
        needs_grad: bool,
        backward: Option<BackFn<S>>,
    ) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.values.len();
        inner.values.push(value);
        inner.needs_grad.push(needs_grad);
        inner.backward.push(if needs_grad { backward } else { None });
        Var { id }
    }

    /// Convenience used by ops: output needs a gradient iff any parent does.
    pub(crate) fn any_needs_grad(&self, parents: &[Var]) -> bool {
        let inner = self.inner.borrow();
        parents.iter().any(|p| inner.needs_grad[p.id])
    }

    /// Reverse pass from a scalar `root`. Consumes the recorded backward
    /// closures; a tape can only be differentiated once.
    ///
    /// Panics if `root` is not scalar — losses are scalars by construction,
    /// so a non-scalar root is a programming error, not a data error.
    pub fn backward(&self, root: Var) -> Grads<S> {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(
            inner.values[root.id].len(),
            1,
            "backward root must be scalar"
        );
        let n = inner.values.len();
        let mut backward = std::mem::take(&mut inner.backward);
        let mut grads: Vec<Option<ArrayD<S>>> = (0..n).map(|_| None).collect();
        grads[root.id] = Some(ArrayD::from_elem(
            inner.values[root.id].raw_dim(),
            S::one(),
        ));
        for id in (0..=root.id).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(op) = backward[id].take() {
                let gout = grads[id].take().expect("checked above");
                op(&gout, &inner.values, &mut grads);
                grads[id] = Some(gout);
            }
        }
        Grads { by_id: grads }
    }
}

/// Accumulates `g` into `grads[id]`.
pub(crate) fn accumulate<S: Scalar>(
    grads: &mut [Option<ArrayD<S>>],
    id: usize,
    g: ArrayD<S>,
) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward pass: gradients keyed by node id.
pub struct Grads<S: Scalar> {
    by_id: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<S>> {
        self.by_id.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<S>> {
        self.by_id.get_mut(v.id).and_then(|g| g.take())
    }

    /// The gradient for `v`, or zeros of `shape` if `v` never received one
    /// (e.g. a parameter whose loss term is disabled).
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<S> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

/// Central finite difference `∂f/∂x` at `x0`, used by the gradient audits.
pub fn finite_diff<F>(f: F, x0: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x0.raw_dim());
    let mut x = x0.clone();
    for ix in 0..x0.len() {
        let orig = x.as_slice_mut().unwrap()[ix];
        x.as_slice_mut().unwrap()[ix] = orig + h;
        let fp = f(&x);
        x.as_slice_mut().unwrap()[ix] = orig - h;
        let fm = f(&x);
        x.as_slice_mut().unwrap()[ix] = orig;
        grad.as_slice_mut().unwrap()[ix] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative-tolerance comparison used by the gradient audits: passes when
/// `|a - b| <= atol + rtol * max(|a|, |b|)` elementwise.
pub fn grads_close(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, rtol: f64, atol: f64) -> bool {
    analytic
        .iter()
        .zip(numeric.iter())
        .all(|(&a, &b)| (a - b).abs() <= atol + rtol * a.abs().max(b.abs()))
}
