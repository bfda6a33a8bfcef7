//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records operations in append order during a forward pass
//! (define-by-run; the tape is rebuilt every step). [`Tensor`] values are
//! immutable once created and cheap to clone (`Arc`-backed), so they can be
//! shared read-only across worker threads. The tape itself is single-owner
//! and not `Send`: one training step uses exactly one tape.
//!
//! Layout is row-major and broadcasting is trailing-aligned.

mod gradcheck;
mod linalg;
mod ops;
mod reduce;

pub use gradcheck::grad_check;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};

/// One recorded operation. `backward` pushes the output cotangent into the
/// parents' gradient buffers; leaves have no rule.
struct Node {
    size: usize,
    backward: Option<Box<dyn Fn(&[f64], &mut GradStore)>>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Append-only operation record for one forward pass.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Create a differentiable leaf (a parameter or an input we track).
    pub fn leaf(&self, data: Arc<Vec<f64>>, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf data length must match shape"
        );
        let id = self.push(Node {
            size: data.len(),
            backward: None,
        });
        Tensor {
            shape: Arc::new(shape),
            data,
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// Per-node gradient buffers, allocated lazily during the backward sweep.
pub struct GradStore {
    bufs: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl GradStore {
    /// Gradient buffer for node `id`, zero-filled on first touch.
    fn accum(&mut self, id: usize) -> &mut [f64] {
        if self.bufs[id].is_none() {
            self.bufs[id] = Some(vec![0.0; self.sizes[id]]);
        }
        self.bufs[id].as_mut().unwrap()
    }

    fn take(&mut self, id: usize) -> Option<Vec<f64>> {
        self.bufs[id].take()
    }
}

/// Gradients of a scalar loss with respect to every reachable tensor.
pub struct Gradients {
    tape: Tape,
    bufs: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `t`, if `t` participated in the loss. Shape matches `t`.
    pub fn grad(&self, t: &Tensor) -> Option<&[f64]> {
        let node = t.node.as_ref()?;
        if !self.tape.same_tape(&node.tape) {
            return None;
        }
        self.bufs[node.id].as_deref()
    }

    /// Take ownership of `t`'s gradient buffer.
    pub fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        let node = t.node.as_ref()?;
        if !self.tape.same_tape(&node.tape) {
            return None;
        }
        self.bufs[node.id].take()
    }
}

/// Dense row-major f64 tensor. Cloning shares storage.
#[derive(Clone)]
pub struct Tensor {
    shape: Arc<Vec<usize>>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tensor {
    /// Constant (untracked) tensor from raw data.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: Arc::new(shape.to_vec()),
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![v], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::from_vec(vec![v; shape.iter().product()], shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    /// The tape this tensor is recorded on, if any.
    pub fn tape(&self) -> Option<Tape> {
        self.node.as_ref().map(|n| n.tape.clone())
    }

    /// Detach from the tape: same data, no gradient tracking.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Resolve the common tape of `inputs` (error if they disagree).
    fn joint_tape(inputs: &[&Tensor]) -> Result<Option<Tape>> {
        let mut tape: Option<Tape> = None;
        for t in inputs {
            if let Some(node) = &t.node {
                match &tape {
                    None => tape = Some(node.tape.clone()),
                    Some(existing) => {
                        if !existing.same_tape(&node.tape) {
                            return Err(Error::contract(
                                "operands recorded on different tapes",
                            ));
                        }
                    }
                }
            }
        }
        Ok(tape)
    }

    /// Record `result` on the inputs' tape with a backward rule, or return
    /// it untracked when no input is tracked.
    ///
    /// `backward(grad_out, parent_ids, store)` must add each parent's
    /// contribution into `store`; parents are passed in input order with
    /// `usize::MAX` marking untracked inputs.
    fn record<F>(inputs: &[&Tensor], data: Vec<f64>, shape: Vec<usize>, backward: F) -> Tensor
    where
        F: Fn(&[f64], &[usize], &mut GradStore) + 'static,
    {
        let tape = match Tensor::joint_tape(inputs).expect("mixed tapes") {
            Some(t) => t,
            None => return Tensor::from_vec(data, &shape),
        };
        let parent_ids: Vec<usize> = inputs
            .iter()
            .map(|t| t.node_id().unwrap_or(usize::MAX))
            .collect();
        let size = data.len();
        let id = tape.push(Node {
            size,
            backward: Some(Box::new(move |g, store| backward(g, &parent_ids, store))),
        });
        Tensor {
            shape: Arc::new(shape),
            data: Arc::new(data),
            node: Some(NodeRef { tape, id }),
        }
    }

    /// Reverse sweep from a scalar loss. Visits each node exactly once in
    /// reverse append order; repeated use of a tensor sums contributions.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let node = self
            .node
            .as_ref()
            .ok_or_else(|| Error::contract("backward on a tensor that is not on a tape"))?;
        let tape = node.tape.clone();
        let inner = tape.inner.borrow();
        let n = inner.nodes.len();
        let mut store = GradStore {
            bufs: (0..n).map(|_| None).collect(),
            sizes: inner.nodes.iter().map(|nd| nd.size).collect(),
        };
        store.accum(node.id)[0] = 1.0;
        for id in (0..n).rev() {
            let Some(grad) = store.take(id) else { continue };
            if let Some(back) = &inner.nodes[id].backward {
                back(&grad, &mut store);
            }
            store.bufs[id] = Some(grad);
        }
        drop(inner);
        Ok(Gradients {
            tape,
            bufs: store.bufs,
        })
    }
}
