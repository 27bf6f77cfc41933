//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are handles onto reference-counted graph nodes. Every operation
//! on a gradient-requiring input records a backward rule on the node it
//! produces, so the DAG of live tensors *is* the tape: node ids are assigned
//! in creation order, which makes ascending id order a topological order.
//! [`backward`] linearizes the graph reachable from a scalar loss into a
//! [`Tape`] and replays it in reverse.
//!
//! Shapes are row-major, rank 1 or 2 throughout; there is no general
//! broadcasting beyond the row-bias case the model needs.

mod op;
mod tape;

pub use op::{
    concat_cols, concat_rows, cross_entropy_rows, gaussian_reparam_sample, kl_diag_gaussians,
    weighted_bce_logits, LOG_SIGMA_CLAMP,
};
pub use tape::{backward, grad_check, Tape};

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{TensorError, TensorResult};
use op::Op;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` with gradient recording disabled; forward values are computed but
/// no backward rules are recorded.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    GRAD_ENABLED.with(|g| {
        let prev = g.get();
        g.set(false);
        let out = f();
        g.set(prev);
        out
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Dense 64-bit float tensor participating in a differentiation tape.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &self.node.data.borrow())
            .finish()
    }
}

impl Tensor {
    pub(crate) fn make(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<Op>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Constant (non-differentiable) tensor from row-major data.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> TensorResult<Tensor> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::Dimension(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::make(data, shape.to_vec(), false, None))
    }

    /// Leaf parameter: gradients accumulate here during backward.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> TensorResult<Tensor> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::Dimension(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::make(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::make(vec![0.0; shape.iter().product()], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::make(
            vec![value; shape.iter().product()],
            shape.to_vec(),
            false,
            None,
        )
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::make(vec![value], vec![1], false, None)
    }

    /// Constant tensor of iid N(0, std^2) entries drawn from `rng`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut crate::rng::CounterRng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Tensor::make(data, shape.to_vec(), false, None)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    /// Row count of a rank-2 tensor (rank-1 tensors count as one row).
    pub fn rows(&self) -> usize {
        match self.node.shape.len() {
            1 => 1,
            2 => self.node.shape[0],
            r => panic!("rows() on rank-{r} tensor"),
        }
    }

    /// Column count of a rank-2 tensor (or the length of a rank-1 tensor).
    pub fn cols(&self) -> usize {
        match self.node.shape.len() {
            1 => self.node.shape[0],
            2 => self.node.shape[1],
            r => panic!("cols() on rank-{r} tensor"),
        }
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Extract the single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.node.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrite a leaf tensor's values in place (optimizer updates).
    pub fn set_data(&self, new: &[f64]) {
        assert!(self.is_leaf(), "set_data on non-leaf tensor");
        let mut data = self.node.data.borrow_mut();
        assert_eq!(data.len(), new.len(), "set_data length mismatch");
        data.copy_from_slice(new);
    }

    /// Value copy detached from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.to_vec(), self.node.shape.to_vec(), false, None)
    }

    pub fn is_finite(&self) -> bool {
        self.node.data.borrow().iter().all(|v| v.is_finite())
    }

    pub(crate) fn node(&self) -> &Rc<Node> {
        &self.node
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }
}

/// Boolean attention/softmax mask; `true` marks positions that may be used.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(keep: Vec<bool>, shape: &[usize]) -> TensorResult<Mask> {
        if keep.len() != shape.iter().product::<usize>() {
            return Err(TensorError::Dimension(format!(
                "mask length {} does not match shape {:?}",
                keep.len(),
                shape
            )));
        }
        Ok(Mask {
            shape: shape.to_vec(),
            keep,
        })
    }

    /// Lower-triangular t x t mask: position i may attend to j <= i.
    pub fn causal(t: usize) -> Mask {
        let mut keep = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                keep[i * t + j] = true;
            }
        }
        Mask {
            shape: vec![t, t],
            keep,
        }
    }

    /// q x k mask from per-key validity (padding): every query row shares it.
    pub fn from_valid_keys(q: usize, valid: &[bool]) -> Mask {
        let k = valid.len();
        let mut keep = vec![false; q * k];
        for i in 0..q {
            for (j, &v) in valid.iter().enumerate() {
                keep[i * k + j] = v;
            }
        }
        Mask {
            shape: vec![q, k],
            keep,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }
}
