//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records operations as they execute (define-by-run); a node is
//! created for every op result, holding its value and, when any input
//! requires a gradient, the op needed to push gradients back to its
//! parents. [`Tape::backward`] walks the tape once in reverse creation
//! order, which is already a topological order, and returns gradients for
//! every leaf that requested them. The tape is consumed by `backward`.
//!
//! Every value is checked for finiteness after each op; a NaN or infinity
//! aborts with an error naming the op. A tape and its tensors are confined
//! to one thread; separate threads use separate tapes.

mod gradcheck;
pub mod ops;

pub use gradcheck::{grad_check, grad_check_scalar_fn, GRAD_CHECK_EPS};
pub use ops::Op;

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

struct Node {
    value: ArrayD<f64>,
    requires_grad: bool,
    back: Option<BackStep>,
}

struct BackStep {
    op: Op,
    parents: Vec<usize>,
}

/// Records executed operations and their values.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        assert!(!self.consumed.get(), "tape already consumed by backward");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Registers an input tensor. Gradients are collected for it when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: ArrayD<f64>, requires_grad: bool) -> Tensor<'_> {
        assert!(
            value.iter().all(|v| v.is_finite()),
            "leaf values must be finite"
        );
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        let index = self.push(Node {
            value,
            requires_grad,
            back: None,
        });
        Tensor { tape: self, index }
    }

    /// Registers a value that never receives gradients.
    pub fn constant(&self, value: ArrayD<f64>) -> Tensor<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Checked entry point: validates shapes, applies the op, records the
    /// node. Errors name the op and offending shapes.
    pub fn apply(&self, op: Op, inputs: &[Tensor<'_>]) -> Result<Tensor<'_>> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        for t in inputs {
            assert_eq!(t.tape.id, self.id, "tensor from a different tape");
        }
        let nodes = self.nodes.borrow();
        let values: Vec<&ArrayD<f64>> = inputs.iter().map(|t| &nodes[t.index].value).collect();
        let out = ops::forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|t| nodes[t.index].requires_grad);
        drop(nodes);
        let back = requires_grad.then(|| BackStep {
            op,
            parents: inputs.iter().map(|t| t.index).collect(),
        });
        let index = self.push(Node {
            value: out,
            requires_grad,
            back,
        });
        Ok(Tensor { tape: self, index })
    }

    /// Concatenates tensors along an axis.
    pub fn concat<'t>(&'t self, inputs: &[Tensor<'t>], axis: usize) -> Tensor<'t> {
        self.apply(Op::Concat { axis }, inputs).expect("concat")
    }

    /// Reverse pass from a scalar loss. Visits each node exactly once in
    /// reverse creation order and consumes the tape; leaf gradients are
    /// returned in the store.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<GradStore> {
        assert_eq!(loss.tape.id, self.id, "loss from a different tape");
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        self.consumed.set(true);
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        if !nodes[loss.index].value.shape().is_empty() {
            return Err(Error::NonScalarLoss {
                shape: nodes[loss.index].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));
        for i in (0..=loss.index).rev() {
            if !nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if let Some(step) = &nodes[i].back {
                let parent_values: Vec<&ArrayD<f64>> =
                    step.parents.iter().map(|&p| &nodes[p].value).collect();
                let needs: Vec<bool> = step
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect();
                let contributions =
                    ops::backward(&step.op, &parent_values, &nodes[i].value, &g, &needs);
                for (&p, contribution) in step.parents.iter().zip(contributions) {
                    if let Some(c) = contribution {
                        match &mut grads[p] {
                            Some(acc) => *acc += &c,
                            slot @ None => *slot = Some(c),
                        }
                    }
                }
            } else {
                // Leaf requiring grad: keep it for the store.
                grads[i] = Some(g);
            }
        }
        Ok(GradStore { grads })
    }
}

/// Handle to a tape node. Cheap to copy; invalidated by `backward`.
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    index: usize,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("index", &self.index)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Tensor<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.index].value.shape().to_vec()
    }

    /// Copies the value out of the tape.
    pub fn value(&self) -> ArrayD<f64> {
        self.tape.nodes.borrow()[self.index].value.clone()
    }

    /// Runs `f` on the value without copying. Do not apply ops inside `f`.
    pub fn with_value<R>(&self, f: impl FnOnce(&ArrayD<f64>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.index].value)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.index].requires_grad
    }

    /// Stable identifier used to fetch gradients from a [`GradStore`].
    pub fn id(&self) -> usize {
        self.index
    }

    fn op1(&self, op: Op) -> Tensor<'t> {
        self.tape
            .apply(op, &[*self])
            .unwrap_or_else(|e| panic!("{e}"))
    }

    fn op2(&self, op: Op, rhs: Tensor<'t>) -> Tensor<'t> {
        self.tape
            .apply(op, &[*self, rhs])
            .unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn matmul(&self, rhs: Tensor<'t>) -> Tensor<'t> {
        self.op2(Op::MatMul, rhs)
    }

    /// Matmul with order-independent inner sums; use when the contracted
    /// axis enumerates parts.
    pub fn matmul_sorted(&self, rhs: Tensor<'t>) -> Tensor<'t> {
        self.op2(Op::MatMulSorted, rhs)
    }

    pub fn add(&self, rhs: Tensor<'t>) -> Tensor<'t> {
        self.op2(Op::Add, rhs)
    }

    pub fn sub(&self, rhs: Tensor<'t>) -> Tensor<'t> {
        self.op2(Op::Sub, rhs)
    }

    pub fn mul(&self, rhs: Tensor<'t>) -> Tensor<'t> {
        self.op2(Op::Mul, rhs)
    }

    pub fn add_row(&self, bias: Tensor<'t>) -> Tensor<'t> {
        self.op2(Op::AddRow, bias)
    }

    pub fn scale(&self, c: f64) -> Tensor<'t> {
        self.op1(Op::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<'t> {
        self.op1(Op::AddScalar(c))
    }

    pub fn relu(&self) -> Tensor<'t> {
        self.op1(Op::Relu)
    }

    pub fn tanh(&self) -> Tensor<'t> {
        self.op1(Op::Tanh)
    }

    pub fn softmax(&self, axis: usize, mask: Option<&[f64]>) -> Tensor<'t> {
        self.op1(Op::Softmax {
            axis,
            mask: mask.map(|m| m.to_vec()),
        })
    }

    pub fn layer_norm(&self, eps: f64) -> Tensor<'t> {
        self.op1(Op::LayerNorm { eps })
    }

    pub fn reduce_max(&self, axis: usize) -> Tensor<'t> {
        self.op1(Op::ReduceMax { axis })
    }

    pub fn reduce_mean(&self, axis: usize) -> Tensor<'t> {
        self.op1(Op::ReduceMean { axis })
    }

    pub fn sum_all(&self) -> Tensor<'t> {
        self.op1(Op::SumAll)
    }

    pub fn l2_normalize(&self, axis: usize) -> Tensor<'t> {
        self.op1(Op::L2Normalize { axis, eps: 1e-12 })
    }

    pub fn slice_ax(&self, axis: usize, start: usize, end: usize) -> Tensor<'t> {
        self.op1(Op::Slice { axis, start, end })
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Tensor<'t> {
        self.op1(Op::GatherRows {
            indices: indices.to_vec(),
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<'t> {
        self.op1(Op::Reshape {
            shape: shape.to_vec(),
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor<'t> {
        self.op1(Op::Permute {
            axes: axes.to_vec(),
        })
    }

    /// `self` as `[n,p,3]` points translated by `t` `[n,3]`.
    pub fn translate(&self, t: Tensor<'t>) -> Tensor<'t> {
        self.op2(Op::TranslatePoints, t)
    }

    /// `self` as `[n,4]` quaternions rotating `pts` `[n,p,3]`.
    pub fn rotate_points(&self, pts: Tensor<'t>) -> Tensor<'t> {
        self.op2(Op::QuatRotate, pts)
    }
}

/// Gradients keyed by tensor id, produced by [`Tape::backward`].
pub struct GradStore {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradStore {
    pub fn get(&self, t: Tensor<'_>) -> Option<&ArrayD<f64>> {
        self.grads.get(t.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, t: Tensor<'_>) -> Option<ArrayD<f64>> {
        self.grads.get_mut(t.index).and_then(|g| g.take())
    }
}
