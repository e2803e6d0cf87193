//! Reverse-mode automatic differentiation on dynamically ranked `f64` arrays.
//!
//! A [`Graph`] is a per-forward-pass tape. Every operation appends a node
//! whose backward closure scatters the incoming gradient to its parents.
//! Nodes created from [`Graph::constant`] do not participate in
//! differentiation; gradients stop there, which is how parameter freezing
//! and detaching are expressed throughout the training code.

use ndarray::ArrayD;
use std::cell::RefCell;
use std::rc::Rc;

/// Dense dynamic-rank array, the value type of every tensor.
pub type Arr = ArrayD<f64>;

pub(crate) type BackwardFn = Box<dyn Fn(&Arr, &mut Gradients)>;

struct Node {
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// Append-only computation tape. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to a node on the tape together with its value.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) graph: Graph,
    pub(crate) id: usize,
    pub(crate) value: Rc<Arr>,
    pub(crate) requires: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf whose gradient is retained by [`Tensor::backward`].
    pub fn leaf(&self, value: Arr) -> Tensor {
        self.push(value, true, None)
    }

    /// Node that blocks gradient flow. Used for frozen parameters and
    /// detached intermediate values.
    pub fn constant(&self, value: Arr) -> Tensor {
        self.push(value, false, None)
    }

    pub(crate) fn push(&self, value: Arr, requires: bool, backward: Option<BackwardFn>) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { backward });
        Tensor {
            graph: self.clone(),
            id,
            value: Rc::new(value),
            requires,
        }
    }

    pub fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-node gradient accumulator produced by a backward pass.
pub struct Gradients {
    slots: Vec<Option<Arr>>,
}

impl Gradients {
    pub(crate) fn accumulate(&mut self, id: usize, g: Arr) {
        match &mut self.slots[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, t: &Tensor) -> Option<&Arr> {
        self.slots.get(t.id).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, t: &Tensor) -> Option<Arr> {
        self.slots.get_mut(t.id).and_then(|s| s.take())
    }

    /// Gradient of a leaf, or zeros when the loss did not depend on it.
    pub fn get_or_zeros(&self, t: &Tensor) -> Arr {
        self.get(t)
            .cloned()
            .unwrap_or_else(|| Arr::zeros(t.value.raw_dim()))
    }
}

impl Tensor {
    pub fn value(&self) -> &Arr {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.value.len(), 1, "scalar() on non-scalar tensor");
        *self.value.iter().next().unwrap()
    }

    /// Re-enter the value as a constant, severing the gradient path.
    pub fn detach(&self) -> Tensor {
        self.graph.constant((*self.value).clone())
    }

    /// Reverse pass from a scalar node. Returns the gradient store; leaf
    /// gradients stay retrievable, interior ones are consumed as the walk
    /// proceeds.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.value.len(), 1, "backward() root must be scalar");
        let inner = self.graph.inner.borrow();
        let mut grads = Gradients {
            slots: vec![None; self.id + 1],
        };
        grads.slots[self.id] = Some(Arr::ones(self.value.raw_dim()));
        for id in (0..=self.id).rev() {
            match &inner.nodes[id].backward {
                Some(bw) => {
                    if let Some(go) = grads.slots[id].take() {
                        bw(&go, &mut grads);
                    }
                }
                None => {} // leaf or constant: retain slot
            }
        }
        grads
    }
}
