//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its output value to a [`Tape`]; node ids
//! are assigned in creation order, so the tape is already topologically
//! sorted and [`Tape::backward`] walks it once in reverse.

mod conv;
mod elementwise;
mod index;
mod linalg;
mod norm;

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

pub use index::{permute_index_map, Rows};

/// How the right-hand operand of a binary op maps onto the left-hand shape.
#[derive(Clone, Debug)]
pub(crate) enum Broadcast {
    Same,
    /// `b` repeats with period `nb` over `a`'s flat index.
    Suffix(usize),
    /// Explicit `a` index -> `b` index table.
    Table(Rc<[usize]>),
}

impl Broadcast {
    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(nb) => i % nb,
            Broadcast::Table(t) => t[i],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T: Real> {
    Leaf,
    Add { a: usize, b: usize, bc: Broadcast },
    Sub { a: usize, b: usize, bc: Broadcast },
    Mul { a: usize, b: usize, bc: Broadcast },
    Scale { a: usize, s: T },
    Offset { a: usize },
    Relu { a: usize },
    Gelu { a: usize },
    Abs { a: usize },
    Exp { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Softmax { a: usize, width: usize },
    L2Normalize { a: usize, width: usize, inv: Vec<T> },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        width: usize,
        rstd: Vec<T>,
    },
    Conv3x3 { x: usize, w: usize, b: usize, dims: ConvDims },
    Depthwise3x3 { x: usize, w: usize, b: usize, dims: ConvDims },
    Gather { a: usize, rows: Rows },
    Concat { a: usize, b: usize, wa: usize, wb: usize },
    MeanRows { a: usize, rows: usize, width: usize },
    StraightThrough { soft: usize },
    Reshape { a: usize },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Offset { .. } => "offset",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Abs { .. } => "abs",
            Op::Exp { .. } => "exp",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Softmax { .. } => "softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::Depthwise3x3 { .. } => "depthwise3x3",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::MeanRows { .. } => "mean_rows",
            Op::StraightThrough { .. } => "straight_through",
            Op::Reshape { .. } => "reshape",
        }
    }
}

pub(crate) struct Node<T: Real> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub label: Option<Rc<str>>,
}

/// Append-only record of a computation.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, t: &Tensor<T>, label: &str) -> Var<'_, T> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), true, Some(label.into()))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false, None)
    }

    /// Leaf with an explicit gradient flag, used by gradient checks.
    pub fn leaf_with(&self, t: &Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), requires_grad, None)
    }

    fn leaf(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
        label: Option<Rc<str>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
            label,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), value.len(), "{} output", op.name());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs(&op).iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            label: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    /// First node (in evaluation order) holding a NaN or infinity, described
    /// by op name and the nearest labelled parameter that feeds it.
    pub fn first_non_finite(&self) -> Option<String> {
        let nodes = self.nodes.borrow();
        let bad = nodes
            .iter()
            .position(|n| n.value.iter().any(|x| !x.is_finite()))?;
        let node = &nodes[bad];
        let mut source = node.label.clone();
        if source.is_none() {
            source = inputs(&node.op)
                .iter()
                .rev()
                .find_map(|&i| nearest_label(&nodes, i));
        }
        Some(match source {
            Some(l) => format!("node #{bad} ({}) fed by {l}", node.op.name()),
            None => format!("node #{bad} ({})", node.op.name()),
        })
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![T::one()]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }
}

fn nearest_label<T: Real>(nodes: &[Node<T>], start: usize) -> Option<Rc<str>> {
    let mut stack = vec![start];
    let mut seen = std::collections::HashSet::new();
    while let Some(i) = stack.pop() {
        if !seen.insert(i) {
            continue;
        }
        if let Some(l) = &nodes[i].label {
            return Some(l.clone());
        }
        stack.extend(inputs(&nodes[i].op));
    }
    None
}

fn inputs<T: Real>(op: &Op<T>) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Add { a, b, .. }
        | Op::Sub { a, b, .. }
        | Op::Mul { a, b, .. }
        | Op::MatMul { a, b, .. }
        | Op::Bmm { a, b, .. }
        | Op::Concat { a, b, .. } => vec![a, b],
        Op::Scale { a, .. }
        | Op::Offset { a }
        | Op::Relu { a }
        | Op::Gelu { a }
        | Op::Abs { a }
        | Op::Exp { a }
        | Op::Sum { a }
        | Op::Mean { a }
        | Op::Softmax { a, .. }
        | Op::L2Normalize { a, .. }
        | Op::Gather { a, .. }
        | Op::MeanRows { a, .. }
        | Op::Reshape { a } => vec![a],
        Op::StraightThrough { soft } => vec![soft],
        Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        Op::Conv3x3 { x, w, b, .. } | Op::Depthwise3x3 { x, w, b, .. } => vec![x, w, b],
    }
}

/// Zero-initialised gradient slot for `id`, or `None` if it needs no gradient.
pub(crate) fn slot<'g, T: Real>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    id: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b, bc } => elementwise::add_backward(nodes, grads, *a, *b, bc, g, T::one()),
        Op::Sub { a, b, bc } => {
            elementwise::add_backward(nodes, grads, *a, *b, bc, g, -T::one())
        }
        Op::Mul { a, b, bc } => elementwise::mul_backward(nodes, grads, *a, *b, bc, g),
        Op::Scale { a, s } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *s);
            }
        }
        Op::Offset { a } | Op::Reshape { a } | Op::StraightThrough { soft: a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
        }
        Op::Relu { a } | Op::Gelu { a } | Op::Abs { a } | Op::Exp { a } => {
            elementwise::unary_backward(nodes, grads, id, *a, g)
        }
        Op::Sum { a } | Op::Mean { a } => {
            let n = nodes[*a].value.len();
            let scale = if matches!(node.op, Op::Mean { .. }) {
                g[0] / T::from_usize(n).unwrap()
            } else {
                g[0]
            };
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += scale);
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            linalg::matmul_backward(nodes, grads, *a, *b, *m, *k, *n, g)
        }
        Op::Bmm {
            a,
            b,
            batch,
            m,
            k,
            n,
            ta,
            tb,
        } => linalg::bmm_backward(nodes, grads, (*a, *b), (*batch, *m, *k, *n), (*ta, *tb), g),
        Op::Softmax { a, width } => norm::softmax_backward(nodes, grads, id, *a, *width, g),
        Op::L2Normalize { a, width, inv } => norm::l2_normalize_backward(nodes, grads, *a, *width, inv, g),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            width,
            rstd,
        } => norm::layer_norm_backward(nodes, grads, (*x, *gamma, *beta), *width, rstd, g),
        Op::Conv3x3 { x, w, b, dims } => conv::conv3x3_backward(nodes, grads, (*x, *w, *b), dims, g),
        Op::Depthwise3x3 { x, w, b, dims } => {
            conv::depthwise_backward(nodes, grads, (*x, *w, *b), dims, g)
        }
        Op::Gather { a, rows } => index::gather_backward(nodes, grads, *a, rows, g),
        Op::Concat { a, b, wa, wb } => index::concat_backward(nodes, grads, *a, *b, *wa, *wb, g),
        Op::MeanRows { a, rows, width } => {
            let inv = T::one() / T::from_usize(*rows).unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (blk, gb) in ga.chunks_mut(rows * width).zip(g.chunks(*width)) {
                    for row in blk.chunks_mut(*width) {
                        row.iter_mut().zip(gb).for_each(|(d, &x)| *d += x * inv);
                    }
                }
            }
        }
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; `None` if `v` did not receive one.
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient for `v` as a tensor, zeros when `v` is unreachable from the root.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        let shape = v.shape();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn value(&self) -> Tensor<T> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("operands live on different tapes".into()))
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let value = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if numel(&shape) != n.value.len() || shape.iter().any(|&d| d == 0) {
                return Err(shape_err(format!("cannot reshape {:?} into {shape:?}", n.shape)));
            }
            n.value.clone()
        };
        Ok(self.tape.push(shape, value, Op::Reshape { a: self.id }))
    }

    /// Forward value `hard`, gradient routed to `self` unchanged.
    pub fn straight_through(self, hard: &Tensor<T>) -> Result<Self> {
        let shape = self.shape();
        if hard.shape() != shape.as_slice() {
            return Err(shape_err(format!(
                "straight-through value {:?} vs surrogate {shape:?}",
                hard.shape()
            )));
        }
        Ok(self
            .tape
            .push(shape, hard.data().to_vec(), Op::StraightThrough { soft: self.id }))
    }
}
