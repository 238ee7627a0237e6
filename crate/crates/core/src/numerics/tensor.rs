use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::counters;
use super::{NumericsError, Result};

/// Row-major storage shared between a tensor, its reshaped views and any
/// backward closures that need the values.
pub(crate) struct Storage(Vec<f64>);

impl Storage {
    pub(crate) fn new(data: Vec<f64>) -> Self {
        counters::allocate((data.len() * std::mem::size_of::<f64>()) as u64);
        Storage(data)
    }

    pub(crate) fn data(&self) -> &[f64] {
        &self.0
    }
}

impl Drop for Storage {
    fn drop(&mut self) {
        counters::release((self.0.len() * std::mem::size_of::<f64>()) as u64);
    }
}

/// Computes the gradients of an op's parents from the gradient of its output.
/// `None` marks a parent that receives no gradient.
pub(crate) type BackwardFn = Box<dyn FnOnce(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    storage: Rc<Storage>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: RefCell<Option<Node>>,
}

/// Dense n-dimensional array of `f64` with reverse-mode differentiation.
///
/// Cloning is cheap (reference counted). Values never change after
/// construction; only the gradient slot of a leaf is mutated by
/// [`Tensor::backward`].
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        storage: Rc<Storage>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        Tensor(Rc::new(Inner {
            shape,
            storage,
            requires_grad,
            grad: RefCell::new(None),
            node: RefCell::new(node),
        }))
    }

    /// A constant tensor (no gradient tracking).
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Tensor> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::InvalidShape {
                op: "new",
                detail: format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            });
        }
        check_finite("new", &data)?;
        Ok(Tensor::build(
            shape,
            Rc::new(Storage::new(data)),
            false,
            None,
        ))
    }

    /// A trainable leaf: gradients accumulate into it during backward.
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        Ok(Tensor::build(
            t.0.shape.clone(),
            t.0.storage.clone(),
            true,
            None,
        ))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::build(shape, Rc::new(Storage::new(vec![0.0; n])), false, None)
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Tensor::new(Vec::<usize>::new(), vec![value])
    }

    /// Builds the output of an op. A graph node is recorded only when some
    /// parent requires a gradient.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "{op}: shape/data mismatch"
        );
        check_finite(op, &data)?;
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let node = requires_grad.then(|| Node {
            op,
            parents,
            backward,
        });
        Ok(Tensor::build(
            shape,
            Rc::new(Storage::new(data)),
            requires_grad,
            node,
        ))
    }

    /// Like [`Tensor::from_op`] but over a storage the backward closure may
    /// also hold (ops whose derivative is a function of their output).
    pub(crate) fn from_op_shared(
        op: &'static str,
        shape: Vec<usize>,
        storage: Rc<Storage>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        check_finite(op, storage.data())?;
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let node = requires_grad.then(|| Node {
            op,
            parents,
            backward,
        });
        Ok(Tensor::build(shape, storage, requires_grad, node))
    }

    /// Output of an op that shares its input's storage (reshape).
    pub(crate) fn view_op(
        op: &'static str,
        source: &Tensor,
        shape: Vec<usize>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = source.requires_grad();
        let node = requires_grad.then(|| Node {
            op,
            parents: vec![source.clone()],
            backward,
        });
        Tensor::build(shape, source.0.storage.clone(), requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.storage.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.0.storage.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True for tensors not produced by a recorded op.
    pub fn is_leaf(&self) -> bool {
        self.0.node.borrow().is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() == 1 {
            Ok(self.data()[0])
        } else {
            Err(NumericsError::InvalidShape {
                op: "item",
                detail: format!("shape {:?} is not scalar", self.shape()),
            })
        }
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.0.storage.clone(), false, None)
    }

    /// Same values as a fresh trainable leaf.
    pub fn detach_param(&self) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.0.storage.clone(), true, None)
    }

    /// Accumulated gradient of a leaf, shaped like the leaf.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().as_ref().map(|g| {
            Tensor::build(
                self.0.shape.clone(),
                Rc::new(Storage::new(g.clone())),
                false,
                None,
            )
        })
    }

    /// Borrow of the raw gradient buffer.
    pub fn grad_data(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Rescales an accumulated gradient in place (used by gradient clipping).
    pub fn scale_grad(&self, factor: f64) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn key(&self) -> *const () {
        Rc::as_ptr(&self.0) as *const ()
    }

    /// Reverse-mode sweep from a scalar. Populates the gradient of every
    /// `requires_grad` leaf reachable from `self`, adding to any gradient
    /// already present. The recorded graph is consumed.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut grads: HashMap<*const (), Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            let node = t.0.node.borrow_mut().take();
            match node {
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(node) => {
                    let parent_grads = (node.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                    for (parent, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        check_finite(node.op, &pg)?;
                        debug_assert_eq!(pg.len(), parent.len(), "{}: gradient size", node.op);
                        match grads.get_mut(&parent.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the gradient-carrying subgraph (parents before children).
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.0.node.borrow().as_ref() {
                for p in &node.parents {
                    if p.requires_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}
