//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The [`Tape`] is a per-forward-pass arena: create one, register leaves
//! for everything that needs a gradient, run ops through the tape, call
//! [`Tape::backward`] on a scalar loss, then drop the tape. Tensors built
//! with [`Tensor::constant`] never record anything, so evaluation code can
//! run through the same ops at full speed.
//!
//! Everything is single-threaded and deterministic: replaying the same
//! seeded computation yields bit-identical values and gradients.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

mod ops;

pub use ops::finite_diff_check;

/// Dense row-major f64 tensor. Cheap to clone (shared data buffer).
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<usize>,
}

impl Tensor {
    /// Untracked tensor; ops on it record nothing.
    pub fn constant(data: Vec<f64>, shape: Vec<usize>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data: Rc::new(data),
            node: None,
        }
    }

    /// Rank-0 constant.
    pub fn scalar(v: f64) -> Self {
        Tensor::constant(vec![v], vec![])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Node handle on the tape, if this tensor is tracked.
    pub fn node_id(&self) -> Option<usize> {
        self.node
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same data and tape node under a different shape.
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            self.data.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Tensor {
            shape,
            data: Rc::clone(&self.data),
            node: self.node,
        }
    }

    pub(crate) fn shared_data(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node)
            .field("data", &self.data)
            .finish()
    }
}

/// Backward rule: upstream gradient in, one optional gradient per input slot.
type BackFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    /// Tape ids of the inputs, aligned with the backward rule's output.
    /// `None` marks an untracked input (no gradient flows there).
    inputs: Vec<Option<usize>>,
    /// `None` for leaves.
    back: Option<BackFn>,
}

/// Records one forward pass. Nodes are stored in topological order, so a
/// single reverse sweep propagates gradients to every leaf.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Registers a gradient-carrying leaf sharing `data`.
    pub fn leaf(&self, data: Rc<Vec<f64>>, shape: Vec<usize>) -> Result<Tensor> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        let id = self.push(Vec::new(), None);
        Ok(Tensor {
            shape,
            data,
            node: Some(id),
        })
    }

    /// Convenience leaf from owned data.
    pub fn leaf_from(&self, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        self.leaf(Rc::new(data), shape)
    }

    fn push(&self, inputs: Vec<Option<usize>>, back: Option<BackFn>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { inputs, back });
        id
    }

    /// Records `out` as the result of an op over `inputs`. When no input is
    /// tracked the output is a plain constant and nothing is recorded. The
    /// backward builder receives the shared output buffer so rules that need
    /// the forward result (exp, sqrt, softmax) can capture it cheaply.
    pub(crate) fn record(
        &self,
        inputs: &[&Tensor],
        out_data: Vec<f64>,
        out_shape: Vec<usize>,
        back: impl FnOnce(&Rc<Vec<f64>>) -> BackFn,
    ) -> Tensor {
        let data = Rc::new(out_data);
        let slots: Vec<Option<usize>> = inputs.iter().map(|t| t.node).collect();
        if slots.iter().all(Option::is_none) {
            return Tensor {
                shape: out_shape,
                data,
                node: None,
            };
        }
        let id = self.push(slots, Some(back(&data)));
        Tensor {
            shape: out_shape,
            data,
            node: Some(id),
        }
    }

    /// Reverse sweep from a scalar loss. Every tracked leaf reachable from
    /// the loss receives a gradient; unreachable leaves read back as zeros.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let Some(root) = loss.node else {
            return Err(Error::Shape(
                "backward requires a loss recorded on the tape".into(),
            ));
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.back {
                Some(back) => {
                    let contribs = back(&g);
                    debug_assert_eq!(contribs.len(), node.inputs.len());
                    for (slot, contrib) in node.inputs.iter().zip(contribs) {
                        let (Some(j), Some(c)) = (slot, contrib) else {
                            continue;
                        };
                        match &mut grads[*j] {
                            Some(acc) => {
                                for (x, y) in acc.iter_mut().zip(&c) {
                                    *x += *y;
                                }
                            }
                            None => grads[*j] = Some(c),
                        }
                    }
                }
                None => grads[i] = Some(g),
            }
        }
        Ok(Gradients { slots: grads })
    }
}

/// Gradients keyed by leaf tensor, produced by [`Tape::backward`].
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        t.node
            .and_then(|id| self.slots.get(id))
            .and_then(|s| s.as_deref())
    }

    pub fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        t.node.and_then(|id| self.slots.get_mut(id)).and_then(Option::take)
    }

    /// Gradient for `t`, or zeros when the loss never touched it.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }
}
