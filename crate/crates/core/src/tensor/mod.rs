//! Dense f64 tensors with a dynamic reverse-mode differentiation graph.
//!
//! Every operation that has at least one input requiring a gradient records a
//! node holding its inputs and a local gradient rule. [`Tensor::backward`]
//! walks the nodes reachable from a scalar loss in reverse topological order
//! and accumulates `d(loss)/d(leaf)` into every leaf created with
//! `requires_grad`.
//!
//! Storage is row-major and contiguous. Slicing copies.

mod gradcheck;
mod ops;

pub mod flops;

pub use gradcheck::{gradcheck, GradCheckConfig, GradCheckReport};
#[cfg(test)]
pub(crate) use ops::softplus;
pub use ops::ReduceOp;
pub(crate) use ops::{matmul_grad_a, matmul_grad_b, matmul_raw};

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{contract, Result};

/// Local gradient rule of a graph node.
///
/// Receives the upstream gradient (same length as the node output) and
/// returns one entry per input: `None` when the input receives no gradient.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

pub struct BackwardCtx<'a> {
    pub grad_out: &'a [f64],
    pub output: &'a [f64],
    pub inputs: &'a [Tensor],
}

impl BackwardCtx<'_> {
    /// Whether input `i` participates in differentiation.
    pub fn needs(&self, i: usize) -> bool {
        self.inputs[i].requires_grad()
    }
}

struct Node {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

thread_local! {
    static CORRUPT_OP: RefCell<Option<String>> = const { RefCell::new(None) };
}

/// Test hook: scales every gradient produced by the named op by 1.5.
///
/// Exists so gradient-check tooling can demonstrate it detects a broken rule.
pub fn set_corrupt_grad_op(op: Option<&str>) {
    CORRUPT_OP.with(|c| *c.borrow_mut() = op.map(str::to_owned));
}

fn is_corrupted(op: &str) -> bool {
    CORRUPT_OP.with(|c| c.borrow().as_deref() == Some(op))
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            node,
        }))
    }

    /// Constant leaf. Fails when `data.len()` differs from the shape's element count
    /// or any dimension is zero.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(contract(format!("zero-sized dimension in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(contract(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(t.detach_with_grad(true))
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(Vec::new(), vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self::from_parts(shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self::from_parts(shape.to_vec(), (0..numel(shape)).map(&mut f).collect(), false, None)
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// New leaf sharing no graph history, copying the values.
    pub fn detach(&self) -> Self {
        self.detach_with_grad(false)
    }

    pub fn detach_with_grad(&self, requires_grad: bool) -> Self {
        Self::from_parts(self.0.shape.clone(), self.0.data.borrow().clone(), requires_grad, None)
    }

    /// Records an operation output. The node is only kept when an input needs
    /// a gradient, so constant subgraphs cost nothing at backward time.
    pub fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "op {op} produced wrong length");
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let node = requires_grad.then(|| Node { op, inputs, backward });
        Self::from_parts(shape, data, requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the values of a leaf in place (optimizer updates, finite
    /// differences). Graph outputs are immutable.
    pub fn set_data(&self, values: Vec<f64>) -> Result<()> {
        if !self.is_leaf() {
            return Err(contract("set_data on a non-leaf tensor"));
        }
        if values.len() != self.numel() {
            return Err(contract(format!(
                "set_data: expected {} values, got {}",
                self.numel(),
                values.len()
            )));
        }
        *self.0.data.borrow_mut() = values;
        Ok(())
    }

    pub(crate) fn set_value_at(&self, idx: usize, v: f64) {
        debug_assert!(self.is_leaf());
        self.0.data.borrow_mut()[idx] = v;
    }

    fn key(&self) -> *const Inner {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode differentiation from a scalar loss.
    ///
    /// Errors when the loss is not a single element, when nothing in its
    /// history requires a gradient, or when a reachable trainable leaf still
    /// holds a gradient from an earlier pass (call [`Tensor::zero_grad`] first).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(contract("backward() on a tensor not connected to any trainable leaf"));
        }

        let order = self.topo_order();
        for t in &order {
            if t.is_leaf() && t.0.grad.borrow().is_some() {
                return Err(contract(
                    "backward() reached a leaf that already holds a gradient; reset gradients first",
                ));
            }
        }

        let mut grads: HashMap<*const Inner, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            match &t.0.node {
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(node) => {
                    let output = t.0.data.borrow();
                    let ctx = BackwardCtx {
                        grad_out: &g,
                        output: &output,
                        inputs: &node.inputs,
                    };
                    let mut local = (node.backward)(&ctx);
                    debug_assert_eq!(local.len(), node.inputs.len(), "op {}", node.op);
                    if is_corrupted(node.op) {
                        for v in local.iter_mut().flatten() {
                            v.iter_mut().for_each(|x| *x *= 1.5);
                        }
                    }
                    for (input, lg) in node.inputs.iter().zip(local) {
                        let Some(lg) = lg else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(lg.len(), input.numel(), "op {} grad length", node.op);
                        match grads.get_mut(&input.key()) {
                            Some(acc) => acc.iter_mut().zip(&lg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(input.key(), lg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes requiring gradients reachable from `self`, inputs before outputs.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (tensor, children already pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for inp in node.inputs.iter().rev() {
                    if inp.requires_grad() && !visited.contains(&inp.key()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.op_name())
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::param(vec![1.0, -2.0, 3.5], &[3]).unwrap();
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        x.mul(&x).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul_scalar(2.0);
        assert!(y.backward().is_err());
    }

    #[test]
    fn backward_twice_without_reset_errors() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert!(loss.backward().is_err());
        x.zero_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x used twice: loss = sum(y + y) -> 4x
        let x = Tensor::param(vec![1.5, -1.0], &[2]).unwrap();
        let y = x.mul(&x).unwrap();
        y.add(&y).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, -4.0]);
    }

    #[test]
    fn constants_build_no_graph() {
        let a = Tensor::ones(&[2]);
        let b = a.add(&a).unwrap();
        assert!(b.is_leaf());
        assert!(b.sum_all().backward().is_err());
    }

    #[test]
    fn new_validates_length() {
        assert!(Tensor::new(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::new(vec![], &[0]).is_err());
        assert_eq!(Tensor::new(vec![1.0; 6], &[2, 3]).unwrap().numel(), 6);
    }

    #[test]
    fn set_data_rejects_graph_outputs() {
        let x = Tensor::param(vec![1.0], &[1]).unwrap();
        let y = x.mul_scalar(2.0);
        assert!(y.set_data(vec![0.0]).is_err());
        assert!(x.set_data(vec![0.0, 1.0]).is_err());
        x.set_data(vec![4.0]).unwrap();
        assert_eq!(x.item(), 4.0);
    }
}
