use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Backward closure: receives the upstream gradient and, per parent, whether
/// that parent needs a gradient. Returns one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    traced: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// A recording of one forward pass. Build a fresh tape per pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("traced", &self.is_traced())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push_node(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Registers a traced leaf (a trainable parameter).
    pub fn param(&self, value: Tensor) -> Var<'_> {
        let id = self.push_node(Node {
            value: Rc::new(value),
            traced: true,
            parents: vec![],
            backward: None,
        });
        Var { tape: self, id }
    }

    /// Registers an untraced leaf. It never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push_node(Node {
            value: Rc::new(value),
            traced: false,
            parents: vec![],
            backward: None,
        });
        Var { tape: self, id }
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn record(
        &self,
        value: impl Into<Rc<Tensor>>,
        parents: &[Var<'_>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'_> {
        let traced = parents.iter().any(|p| p.is_traced());
        let node = Node {
            value: value.into(),
            traced,
            parents: if traced {
                parents.iter().map(|p| p.id).collect()
            } else {
                vec![]
            },
            backward: if traced { Some(Box::new(backward)) } else { None },
        };
        Var {
            tape: self,
            id: self.push_node(node),
        }
    }

    /// Reverse pass seeded with ones at `root`.
    pub fn backward(&self, root: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].traced {
            return Grads { grads };
        }
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(upstream) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].traced).collect();
            let parent_grads = backward(&upstream, &needs);
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(g), true) = (g, *need) else { continue };
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Grads { grads }
    }
}

/// Gradients from one reverse pass, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of a traced leaf; `None` for constants or unreachable leaves.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn is_traced(&self) -> bool {
        self.tape.nodes.borrow()[self.id].traced
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }
}
