//! Reverse-mode automatic differentiation on dynamically shaped `f64` arrays.
//!
//! A [`Tape`] records a computation graph as operations execute; nodes are
//! pushed in topological order, so walking the node list in reverse during
//! [`Tape::backward`] visits every child before its parents. All values are
//! kept in standard (row-major, contiguous) layout so kernels can index
//! flat slices directly.

use std::cell::RefCell;

use ndarray::ArrayD;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Arguments handed to a node's backward function.
pub(crate) struct BackArgs<'a> {
    /// Value of this node (forward output).
    pub out: &'a ArrayD<f64>,
    /// Gradient of the loss with respect to this node.
    pub grad: &'a ArrayD<f64>,
    /// Values of the parent nodes, in the order they were declared.
    pub inputs: &'a [&'a ArrayD<f64>],
}

/// Computes one gradient array per parent, in parent order.
pub(crate) type BackFn = Box<dyn Fn(&BackArgs) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<Var>,
    backward: Option<BackFn>,
}

/// Gradients produced by [`Tape::backward`].
///
/// Only leaf nodes (created with [`Tape::leaf`]) retain gradients;
/// intermediate gradients are dropped as soon as they have been consumed.
pub struct Grads {
    g: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.g.get_mut(v.0).and_then(|o| o.take())
    }
}

/// Computation graph recorder.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf (input or parameter). Leaves retain gradients.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// Clone out the value of a node.
    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Shape of a node's value.
    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Run `f` with read access to node values.
    pub(crate) fn with_values<R>(&self, f: impl FnOnce(&dyn Fn(Var) -> ArrayD<f64>) -> R) -> R {
        let nodes = self.nodes.borrow();
        let getter = |v: Var| nodes[v.0].value.clone();
        f(&getter)
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<f64>,
        parents: Vec<Var>,
        backward: Option<BackFn>,
    ) -> Var {
        debug_assert!(value.is_standard_layout(), "tape values must be contiguous");
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(id)
    }

    /// Apply `f` to the values of `vars` and push the result as a new node.
    pub(crate) fn unary(
        &self,
        a: Var,
        f: impl FnOnce(&ArrayD<f64>) -> ArrayD<f64>,
        backward: BackFn,
    ) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value)
        };
        self.push(out, vec![a], Some(backward))
    }

    pub(crate) fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl FnOnce(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
        backward: BackFn,
    ) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push(out, vec![a, b], Some(backward))
    }

    pub(crate) fn nary(
        &self,
        parents: &[Var],
        f: impl FnOnce(&[&ArrayD<f64>]) -> ArrayD<f64>,
        backward: BackFn,
    ) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&ArrayD<f64>> = parents.iter().map(|p| &nodes[p.0].value).collect();
            f(&vals)
        };
        self.push(out, parents.to_vec(), Some(backward))
    }

    /// Reverse sweep from a scalar node. Returns gradients for all leaves
    /// reachable from `root`.
    pub fn backward(&self, root: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root.0] = Some(ArrayD::ones(nodes[root.0].value.raw_dim()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &nodes[i].backward {
                Some(back) => {
                    let inputs: Vec<&ArrayD<f64>> =
                        nodes[i].parents.iter().map(|p| &nodes[p.0].value).collect();
                    let args = BackArgs {
                        out: &nodes[i].value,
                        grad: &g,
                        inputs: &inputs,
                    };
                    let contribs = back(&args);
                    debug_assert_eq!(contribs.len(), nodes[i].parents.len());
                    for (p, c) in nodes[i].parents.iter().zip(contribs) {
                        debug_assert_eq!(
                            c.shape(),
                            nodes[p.0].value.shape(),
                            "gradient shape must match parent value shape"
                        );
                        match &mut grads[p.0] {
                            Some(acc) => *acc += &c,
                            slot => *slot = Some(c),
                        }
                    }
                    // Intermediate gradient no longer needed.
                }
                None => {
                    // Leaf: keep the gradient for the caller.
                    grads[i] = Some(g);
                }
            }
        }
        Grads { g: grads }
    }
}
