use super::{slot, Node, Op, Var};
use crate::error::{shape_err, Result};
use crate::real::Real;

impl<'t, T: Real> Var<'t, T> {
    /// `[.., m, k] x [k, n] -> [.., m, n]`; leading dims fold into rows.
    pub fn matmul(self, w: Var<'t, T>) -> Result<Self> {
        self.same_tape(&w)?;
        let (shape, value, m, k, n) = {
            let nodes = self.tape.nodes();
            let (na, nb) = (&nodes[self.id], &nodes[w.id]);
            if nb.shape.len() != 2 {
                return Err(shape_err(format!("matmul rhs must be 2-D, got {:?}", nb.shape)));
            }
            let k = *na.shape.last().unwrap();
            if k != nb.shape[0] {
                return Err(shape_err(format!(
                    "matmul inner dims disagree: {:?} x {:?}",
                    na.shape, nb.shape
                )));
            }
            let n = nb.shape[1];
            let m = na.value.len() / k;
            let mut out = vec![T::zero(); m * n];
            T::gemm(
                m, k, n, T::one(), &na.value, k as isize, 1, &nb.value, n as isize, 1,
                T::zero(), &mut out, n as isize, 1,
            );
            let mut shape = na.shape.clone();
            *shape.last_mut().unwrap() = n;
            (shape, out, m, k, n)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::MatMul {
                a: self.id,
                b: w.id,
                m,
                k,
                n,
            },
        ))
    }

    /// Batched product over matching leading dims.
    ///
    /// With `ta` the stored layout of `self` is `[.., k, m]`; with `tb` the
    /// stored layout of `other` is `[.., n, k]`.
    pub fn bmm(self, other: Var<'t, T>, ta: bool, tb: bool) -> Result<Self> {
        self.same_tape(&other)?;
        let (shape, value, dims) = {
            let nodes = self.tape.nodes();
            let (na, nb) = (&nodes[self.id], &nodes[other.id]);
            let (sa, sb) = (&na.shape, &nb.shape);
            if sa.len() < 3 || sb.len() < 3 || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(shape_err(format!("bmm batch dims disagree: {sa:?} x {sb:?}")));
            }
            let r = sa.len();
            let (m, ka) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
            let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
            if ka != kb {
                return Err(shape_err(format!("bmm inner dims disagree: {sa:?} x {sb:?}")));
            }
            let k = ka;
            let batch: usize = sa[..r - 2].iter().product();
            let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
            let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
            let mut out = vec![T::zero(); batch * m * n];
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &na.value[bi * m * k..(bi + 1) * m * k],
                    rsa,
                    csa,
                    &nb.value[bi * k * n..(bi + 1) * k * n],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    n as isize,
                    1,
                );
            }
            let mut shape = sa[..r - 2].to_vec();
            shape.extend([m, n]);
            (shape, out, (batch, m, k, n))
        };
        let (batch, m, k, n) = dims;
        Ok(self.tape.push(
            shape,
            value,
            Op::Bmm {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    a: usize,
    b: usize,
    m: usize,
    k: usize,
    n: usize,
    g: &[T],
) {
    let (av, bv) = (&nodes[a].value, &nodes[b].value);
    // dA = dC * B^T
    if let Some(ga) = slot(nodes, grads, a) {
        T::gemm(
            m, n, k, T::one(), g, n as isize, 1, bv, 1, n as isize, T::one(), ga, k as isize, 1,
        );
    }
    // dB = A^T * dC
    if let Some(gb) = slot(nodes, grads, b) {
        T::gemm(
            k, m, n, T::one(), av, 1, k as isize, g, n as isize, 1, T::one(), gb, n as isize, 1,
        );
    }
}

pub(crate) fn bmm_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    (a, b): (usize, usize),
    (batch, m, k, n): (usize, usize, usize, usize),
    (ta, tb): (bool, bool),
    g: &[T],
) {
    let (av, bv) = (&nodes[a].value, &nodes[b].value);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let (mk, kn, mn) = (m * k, k * n, m * n);
    if let Some(ga) = slot(nodes, grads, a) {
        for bi in 0..batch {
            // logical dA (m x k) = dC (m x n) * B^T (n x k), written through A's layout
            T::gemm(
                m,
                n,
                k,
                T::one(),
                &g[bi * mn..(bi + 1) * mn],
                n as isize,
                1,
                &bv[bi * kn..(bi + 1) * kn],
                csb,
                rsb,
                T::one(),
                &mut ga[bi * mk..(bi + 1) * mk],
                rsa,
                csa,
            );
        }
    }
    if let Some(gb) = slot(nodes, grads, b) {
        for bi in 0..batch {
            // logical dB (k x n) = A^T (k x m) * dC (m x n)
            T::gemm(
                k,
                m,
                n,
                T::one(),
                &av[bi * mk..(bi + 1) * mk],
                csa,
                rsa,
                &g[bi * mn..(bi + 1) * mn],
                n as isize,
                1,
                T::one(),
                &mut gb[bi * kn..(bi + 1) * kn],
                rsb,
                csb,
            );
        }
    }
}
