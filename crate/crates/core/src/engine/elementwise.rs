use std::rc::Rc;

use super::{slot, Broadcast, Node, Op, Var};
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::numel;

/// Right-aligned broadcast of `b` onto `a`; the output always has `a`'s shape.
pub(crate) fn broadcast(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let err = || shape_err(format!("cannot broadcast {b:?} onto {a:?}"));
    let first = b.iter().position(|&d| d != 1).unwrap_or(b.len());
    let core = &b[first..];
    if core.len() <= a.len() && a[a.len() - core.len()..] == *core {
        return Ok(Broadcast::Suffix(numel(core).max(1)));
    }
    if b.len() > a.len() {
        return Err(err());
    }
    let pad = a.len() - b.len();
    let mut bstrides = vec![0usize; a.len()];
    let mut stride = 1;
    for d in (0..b.len()).rev() {
        let (da, db) = (a[pad + d], b[d]);
        if db != 1 && db != da {
            return Err(err());
        }
        bstrides[pad + d] = if db == 1 { 0 } else { stride };
        stride *= db;
    }
    let total = numel(a);
    let mut table = Vec::with_capacity(total);
    let mut counter = vec![0usize; a.len()];
    for _ in 0..total {
        table.push(counter.iter().zip(&bstrides).map(|(c, s)| c * s).sum());
        for d in (0..a.len()).rev() {
            counter[d] += 1;
            if counter[d] < a[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Ok(Broadcast::Table(Rc::from(table)))
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, kind: u8) -> Result<Self> {
        self.same_tape(&other)?;
        let (shape, value, bc) = {
            let nodes = self.tape.nodes();
            let (na, nb) = (&nodes[self.id], &nodes[other.id]);
            let bc = broadcast(&na.shape, &nb.shape)?;
            let (av, bv) = (&na.value, &nb.value);
            let value: Vec<T> = match kind {
                0 => av.iter().enumerate().map(|(i, &x)| x + bv[bc.index(i)]).collect(),
                1 => av.iter().enumerate().map(|(i, &x)| x - bv[bc.index(i)]).collect(),
                _ => av.iter().enumerate().map(|(i, &x)| x * bv[bc.index(i)]).collect(),
            };
            (na.shape.clone(), value, bc)
        };
        let (a, b) = (self.id, other.id);
        let op = match kind {
            0 => Op::Add { a, b, bc },
            1 => Op::Sub { a, b, bc },
            _ => Op::Mul { a, b, bc },
        };
        Ok(self.tape.push(shape, value, op))
    }

    /// `self + other`, with `other` broadcast over `self`'s shape.
    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, 0)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, 1)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, 2)
    }

    fn unary(self, f: impl Fn(T) -> T, op: Op<T>) -> Self {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        self.tape.push(shape, value, op)
    }

    pub fn scale(self, s: T) -> Self {
        self.unary(|x| x * s, Op::Scale { a: self.id, s })
    }

    pub fn add_scalar(self, c: T) -> Self {
        self.unary(|x| x + c, Op::Offset { a: self.id })
    }

    pub fn relu(self) -> Self {
        self.unary(|x| x.max(T::zero()), Op::Relu { a: self.id })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Self {
        self.unary(gelu, Op::Gelu { a: self.id })
    }

    pub fn abs(self) -> Self {
        self.unary(|x| x.abs(), Op::Abs { a: self.id })
    }

    pub fn exp(self) -> Self {
        self.unary(|x| x.exp(), Op::Exp { a: self.id })
    }

    pub fn sum(self) -> Self {
        let s = {
            let nodes = self.tape.nodes();
            nodes[self.id].value.iter().copied().sum()
        };
        self.tape.push(vec![1], vec![s], Op::Sum { a: self.id })
    }

    pub fn mean(self) -> Self {
        let s = {
            let nodes = self.tape.nodes();
            let v = &nodes[self.id].value;
            v.iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap()
        };
        self.tape.push(vec![1], vec![s], Op::Mean { a: self.id })
    }
}

pub(crate) fn add_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    a: usize,
    b: usize,
    bc: &Broadcast,
    g: &[T],
    sign: T,
) {
    if let Some(ga) = slot(nodes, grads, a) {
        ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
    }
    if let Some(gb) = slot(nodes, grads, b) {
        for (i, &x) in g.iter().enumerate() {
            gb[bc.index(i)] += sign * x;
        }
    }
}

pub(crate) fn mul_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    a: usize,
    b: usize,
    bc: &Broadcast,
    g: &[T],
) {
    let (av, bv) = (&nodes[a].value, &nodes[b].value);
    if let Some(ga) = slot(nodes, grads, a) {
        for (i, d) in ga.iter_mut().enumerate() {
            *d += g[i] * bv[bc.index(i)];
        }
    }
    if let Some(gb) = slot(nodes, grads, b) {
        for (i, &x) in g.iter().enumerate() {
            gb[bc.index(i)] += x * av[i];
        }
    }
}

pub(crate) fn unary_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    a: usize,
    g: &[T],
) {
    let op = &nodes[id].op;
    let x = &nodes[a].value;
    let y = &nodes[id].value;
    let Some(ga) = slot(nodes, grads, a) else {
        return;
    };
    match op {
        Op::Relu { .. } => {
            for i in 0..ga.len() {
                if x[i] > T::zero() {
                    ga[i] += g[i];
                }
            }
        }
        Op::Gelu { .. } => {
            for i in 0..ga.len() {
                ga[i] += g[i] * gelu_grad(x[i]);
            }
        }
        Op::Abs { .. } => {
            for i in 0..ga.len() {
                if x[i] > T::zero() {
                    ga[i] += g[i];
                } else if x[i] < T::zero() {
                    ga[i] -= g[i];
                }
            }
        }
        Op::Exp { .. } => {
            for i in 0..ga.len() {
                ga[i] += g[i] * y[i];
            }
        }
        _ => unreachable!("not a unary op"),
    }
}
