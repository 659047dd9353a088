//! Tape-style reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] owns every intermediate value. Operations are methods on the
//! graph that take and return lightweight [`Var`] handles; nodes are pushed
//! in evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] simply walks it in reverse.
//!
//! Elementwise binary ops accept either identical shapes or an operand whose
//! shape equals the other's shape minus its leading extent (the "batch"
//! extent). Any other broadcast has to go through [`Graph::expand`].

use crate::error::{shape_err, Error, Result};
use crate::numeric::tensor::{matmul_into, matmul_nt_acc, matmul_tn_acc, numel, split_axis, Tensor};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    None,
    /// rhs lacks the leading extent of lhs
    Rhs,
    /// lhs lacks the leading extent of rhs
    Lhs,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
    Sigmoid,
    Sqrt,
    Sin,
    Cos,
    SincSqrt,
    VersSqrt,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Bmm(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Unary(Var, Unary),
    Scale(Var, T),
    AddScalar(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    SqNorm(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    Expand(Var),
    IndexSelect { x: Var, axis: usize, idx: Vec<usize> },
    SolveTri { a: Var, b: Var, lower: bool },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a computation; see the module docs.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every node of a graph.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------
    // linear algebra

    /// `(n,k) · (k,m) → (n,m)`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let t = Tensor::from_vec(&[n, m], out)?;
        self.push("matmul", t, Op::Matmul(a, b), &[a, b])
    }

    /// Batched matmul `(B,n,k) · (B,k,m) → (B,n,m)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (bs, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); bs * n * m];
        for i in 0..bs {
            matmul_into(
                &ad[i * n * k..(i + 1) * n * k],
                &bd[i * k * m..(i + 1) * k * m],
                &mut out[i * n * m..(i + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let t = Tensor::from_vec(&[bs, n, m], out)?;
        self.push("bmm", t, Op::Bmm(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        self.push("transpose", t, Op::Transpose(x), &[x])
    }

    /// Solves `A·X = B` for square triangular `A` (`(n,n)`, `B` is `(n,m)`).
    /// Only the selected triangle of `A`, diagonal included, is read.
    pub fn solve_triangular(&mut self, a: Var, b: Var, lower: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sa[1] || sa[0] != sb[0] {
            return Err(shape_err("solve_triangular", sa, sb));
        }
        let x = tri_solve(self.value(a), self.value(b), lower, false)?;
        self.push("solve_triangular", x, Op::SolveTri { a, b, lower }, &[a, b])
    }

    // ---------------------------------------------------------------
    // elementwise

    fn bcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::None)
        } else if !sa.is_empty() && &sa[1..] == sb {
            Ok(Bcast::Rhs)
        } else if !sb.is_empty() && &sb[1..] == sa {
            Ok(Bcast::Lhs)
        } else {
            Err(shape_err(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Bcast)> {
        let kind = self.bcast_kind(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, data) = match kind {
            Bcast::None => (
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Bcast::Rhs => {
                let inner = tb.len();
                (
                    ta.shape().to_vec(),
                    ta.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, tb.data()[i % inner]))
                        .collect(),
                )
            }
            Bcast::Lhs => {
                let inner = ta.len();
                (
                    tb.shape().to_vec(),
                    tb.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &y)| f(ta.data()[i % inner], y))
                        .collect(),
                )
            }
        };
        Ok((Tensor::from_vec(&shape, data)?, kind))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, k) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b, k), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, k) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b, k), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, k) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b, k), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&y| y == T::zero()) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let (t, k) = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", t, Op::Div(a, b, k), &[a, b])
    }

    fn unary(&mut self, x: Var, u: Unary) -> Result<Var> {
        let (name, f): (&'static str, fn(T) -> T) = match u {
            Unary::Neg => ("neg", |v: T| -v),
            Unary::Exp => ("exp", T::exp),
            Unary::Log => ("log", T::ln),
            Unary::Tanh => ("tanh", T::tanh),
            Unary::Relu => ("relu", |v: T| v.max(T::zero())),
            Unary::Sigmoid => ("sigmoid", sigmoid),
            Unary::Sqrt => ("sqrt", T::sqrt),
            Unary::Sin => ("sin", T::sin),
            Unary::Cos => ("cos", T::cos),
            Unary::SincSqrt => ("sinc_sqrt", sinc_sqrt),
            Unary::VersSqrt => ("vers_sqrt", vers_sqrt),
        };
        match u {
            Unary::Log if self.value(x).data().iter().any(|&v| v <= T::zero()) => {
                return Err(Error::Domain {
                    op: "log",
                    msg: "non-positive argument".into(),
                });
            }
            Unary::Sqrt if self.value(x).data().iter().any(|&v| v <= T::zero()) => {
                return Err(Error::Domain {
                    op: "sqrt",
                    msg: "non-positive argument".into(),
                });
            }
            Unary::SincSqrt | Unary::VersSqrt if self.value(x).data().iter().any(|&v| v < T::zero()) => {
                return Err(Error::Domain {
                    op: name,
                    msg: "negative argument".into(),
                });
            }
            _ => {}
        }
        let t = self.value(x).map(f);
        self.push(name, t, Op::Unary(x, u), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }
    /// Square root; the argument must be strictly positive.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }
    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sin)
    }
    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Cos)
    }
    /// `sin(√s)/√s` for `s ≥ 0`, smooth through `s = 0`.
    pub fn sinc_sqrt(&mut self, s: Var) -> Result<Var> {
        self.unary(s, Unary::SincSqrt)
    }
    /// `(1 − cos √s)/s` for `s ≥ 0`, smooth through `s = 0`.
    pub fn vers_sqrt(&mut self, s: Var) -> Result<Var> {
        self.unary(s, Unary::VersSqrt)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * k);
        self.push("scale", t, Op::Scale(x, k), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Result<Var> {
        let t = self.value(x).map(|v| v + k);
        self.push("add_scalar", t, Op::AddScalar(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Softmax over the last extent.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() == 0 {
            return Err(shape_err("softmax", tx.shape(), &[]));
        }
        let w = *tx.shape().last().unwrap();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(w) {
            softmax_in_place(row);
        }
        let t = Tensor::from_vec(tx.shape(), out)?;
        self.push("softmax", t, Op::Softmax(x), &[x])
    }

    // ---------------------------------------------------------------
    // reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push("sum", t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::scalar(tx.sum() / T::from_usize_lossy(tx.len()));
        self.push("mean", t, Op::Mean(x), &[x])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(shape_err("sum_axis", tx.shape(), &[axis]));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let d = tx.data();
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::from_vec(&shape, out)?;
        self.push("sum_axis", t, Op::SumAxis(x, axis), &[x])
    }

    /// Squared L2 norm of all entries.
    pub fn sq_norm(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).data().iter().map(|&v| v * v).sum());
        self.push("sq_norm", t, Op::SqNorm(x), &[x])
    }

    // ---------------------------------------------------------------
    // shape manipulation

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Domain {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let t = Tensor::from_vec(&shape, out)?;
        self.push("concat", t, Op::Concat(xs.to_vec(), axis), xs)
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() || start >= end || end > tx.shape()[axis] {
            return Err(shape_err("slice", tx.shape(), &[axis, start, end]));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let b = (o * n + start) * inner;
            out.extend_from_slice(&tx.data()[b..b + w * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = w;
        let t = Tensor::from_vec(&shape, out)?;
        self.push("slice", t, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Explicit broadcast: size-1 axes (and missing leading axes) of `x` are
    /// repeated to reach `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        let strides = expand_strides(&src, shape).ok_or_else(|| shape_err("expand", &src, shape))?;
        let n = numel(shape);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            out.push(d[off]);
            increment(&mut idx, shape);
        }
        let t = Tensor::from_vec(shape, out)?;
        self.push("expand", t, Op::Expand(x), &[x])
    }

    /// Gathers `idx` (repeats allowed) along `axis`.
    pub fn index_select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() || idx.is_empty() || idx.iter().any(|&i| i >= tx.shape()[axis]) {
            return Err(shape_err("index_select", tx.shape(), idx));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let b = (o * n + i) * inner;
                out.extend_from_slice(&tx.data()[b..b + inner]);
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = idx.len();
        let t = Tensor::from_vec(&shape, out)?;
        self.push(
            "index_select",
            t,
            Op::IndexSelect {
                x,
                axis,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    // ---------------------------------------------------------------
    // backward

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Domain {
                op: "backward",
                msg: format!("root must be scalar, got shape {:?}", rv.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); n * k];
                    matmul_nt_acc(g.data(), tb.data(), &mut ga, n, m, k);
                    self.accumulate(grads, *a, Tensor::from_vec(ta.shape(), ga).unwrap());
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); k * m];
                    matmul_tn_acc(ta.data(), g.data(), &mut gb, n, k, m);
                    self.accumulate(grads, *b, Tensor::from_vec(tb.shape(), gb).unwrap());
                }
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, n, k, m) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); bs * n * k];
                    for i in 0..bs {
                        matmul_nt_acc(
                            &g.data()[i * n * m..(i + 1) * n * m],
                            &tb.data()[i * k * m..(i + 1) * k * m],
                            &mut ga[i * n * k..(i + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(ta.shape(), ga).unwrap());
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); bs * k * m];
                    for i in 0..bs {
                        matmul_tn_acc(
                            &ta.data()[i * n * k..(i + 1) * n * k],
                            &g.data()[i * n * m..(i + 1) * n * m],
                            &mut gb[i * k * m..(i + 1) * k * m],
                            n,
                            k,
                            m,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(tb.shape(), gb).unwrap());
                }
            }
            Op::Add(a, b, k) => {
                self.accumulate(grads, *a, reduce_bcast(g.clone(), *k, Side::Lhs));
                self.accumulate(grads, *b, reduce_bcast(g.clone(), *k, Side::Rhs));
            }
            Op::Sub(a, b, k) => {
                self.accumulate(grads, *a, reduce_bcast(g.clone(), *k, Side::Lhs));
                if self.needs(*b) {
                    self.accumulate(grads, *b, reduce_bcast(g.map(|v| -v), *k, Side::Rhs));
                }
            }
            Op::Mul(a, b, k) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = elementwise_with(g, tb, *k, Side::Rhs, |gv, bv| gv * bv);
                    self.accumulate(grads, *a, reduce_bcast(ga, *k, Side::Lhs));
                }
                if self.needs(*b) {
                    let gb = elementwise_with(g, ta, *k, Side::Lhs, |gv, av| gv * av);
                    self.accumulate(grads, *b, reduce_bcast(gb, *k, Side::Rhs));
                }
            }
            Op::Div(a, b, k) => {
                let tb = self.value(*b);
                if self.needs(*a) {
                    let ga = elementwise_with(g, tb, *k, Side::Rhs, |gv, bv| gv / bv);
                    self.accumulate(grads, *a, reduce_bcast(ga, *k, Side::Lhs));
                }
                if self.needs(*b) {
                    // d(a/b)/db = -y/b
                    let gy = g.zip_map(y, |gv, yv| gv * yv).unwrap();
                    let gb = elementwise_with(&gy, tb, *k, Side::Rhs, |v, bv| -v / bv);
                    self.accumulate(grads, *b, reduce_bcast(gb, *k, Side::Rhs));
                }
            }
            Op::Unary(x, u) => {
                let tx = self.value(*x);
                let gx = match u {
                    Unary::Neg => g.map(|v| -v),
                    Unary::Exp => g.zip_map(y, |gv, yv| gv * yv).unwrap(),
                    Unary::Log => g.zip_map(tx, |gv, xv| gv / xv).unwrap(),
                    Unary::Tanh => g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv)).unwrap(),
                    Unary::Relu => g
                        .zip_map(tx, |gv, xv| if xv > T::zero() { gv } else { T::zero() })
                        .unwrap(),
                    Unary::Sigmoid => g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)).unwrap(),
                    Unary::Sqrt => g.zip_map(y, |gv, yv| gv / (yv + yv)).unwrap(),
                    Unary::Sin => g.zip_map(tx, |gv, xv| gv * xv.cos()).unwrap(),
                    Unary::Cos => g.zip_map(tx, |gv, xv| -gv * xv.sin()).unwrap(),
                    Unary::SincSqrt => g.zip_map(tx, |gv, sv| gv * sinc_sqrt_deriv(sv)).unwrap(),
                    Unary::VersSqrt => g.zip_map(tx, |gv, sv| gv * vers_sqrt_deriv(sv)).unwrap(),
                };
                self.accumulate(grads, *x, gx);
            }
            Op::Scale(x, k) => {
                let k = *k;
                self.accumulate(grads, *x, g.map(|v| v * k));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Softmax(x) => {
                let w = *y.shape().last().unwrap();
                let mut out = vec![T::zero(); y.len()];
                for ((o, yr), gr) in out.chunks_mut(w).zip(y.data().chunks(w)).zip(g.data().chunks(w)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), out).unwrap());
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::Mean(x) => {
                let n = T::from_usize_lossy(self.value(*x).len());
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g.item() / n));
            }
            Op::SumAxis(x, axis) => {
                let sx = self.shape(*x);
                let (outer, n, inner) = split_axis(sx, *axis);
                let mut out = vec![T::zero(); numel(sx)];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            out[(o * n + k) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(sx, out).unwrap());
            }
            Op::SqNorm(x) => {
                let two_g = g.item() + g.item();
                self.accumulate(grads, *x, self.value(*x).map(|v| two_g * v));
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let sv = self.shape(v);
                    let n = sv[*axis];
                    if self.needs(v) {
                        let mut out = Vec::with_capacity(numel(sv));
                        for o in 0..outer {
                            let b = (o * total + offset) * inner;
                            out.extend_from_slice(&g.data()[b..b + n * inner]);
                        }
                        self.accumulate(grads, v, Tensor::from_vec(sv, out).unwrap());
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x);
                let (outer, n, inner) = split_axis(sx, *axis);
                let w = y.shape()[*axis];
                let mut out = vec![T::zero(); numel(sx)];
                for o in 0..outer {
                    let b = (o * n + start) * inner;
                    out[b..b + w * inner].copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(sx, out).unwrap());
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, g.transpose().unwrap());
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.reshape(self.shape(*x)).unwrap());
            }
            Op::Expand(x) => {
                let sx = self.shape(*x).to_vec();
                let strides = expand_strides(&sx, y.shape()).unwrap();
                let mut out = vec![T::zero(); numel(&sx)];
                let mut idx = vec![0usize; y.rank()];
                for &gv in g.data() {
                    let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
                    out[off] += gv;
                    increment(&mut idx, y.shape());
                }
                self.accumulate(grads, *x, Tensor::from_vec(&sx, out).unwrap());
            }
            Op::IndexSelect { x, axis, idx } => {
                let sx = self.shape(*x);
                let (outer, n, inner) = split_axis(sx, *axis);
                let mut out = vec![T::zero(); numel(sx)];
                let m = idx.len();
                for o in 0..outer {
                    for (j, &i) in idx.iter().enumerate() {
                        let src = (o * m + j) * inner;
                        let dst = (o * n + i) * inner;
                        for k in 0..inner {
                            out[dst + k] += g.data()[src + k];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(sx, out).unwrap());
            }
            Op::SolveTri { a, b, lower } => {
                // X = A⁻¹B  ⇒  dB = A⁻ᵀ G,  dA = −dB Xᵀ restricted to the triangle.
                let ta = self.value(*a);
                let gb = tri_solve(ta, g, *lower, true).expect("solve succeeded forward");
                if self.needs(*a) {
                    let n = ta.shape()[0];
                    let m = y.shape()[1];
                    let mut ga = vec![T::zero(); n * n];
                    matmul_nt_acc(gb.data(), y.data(), &mut ga, n, m, n);
                    for i in 0..n {
                        for j in 0..n {
                            let keep = if *lower { j <= i } else { j >= i };
                            ga[i * n + j] = if keep { -ga[i * n + j] } else { T::zero() };
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(ta.shape(), ga).unwrap());
                }
                self.accumulate(grads, *b, gb);
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Side {
    Lhs,
    Rhs,
}

/// Sums a full-shape gradient down to the operand's shape when that
/// operand was broadcast over the leading extent.
fn reduce_bcast<T: Scalar>(g: Tensor<T>, kind: Bcast, side: Side) -> Tensor<T> {
    let broadcast = matches!((kind, side), (Bcast::Rhs, Side::Rhs) | (Bcast::Lhs, Side::Lhs));
    if !broadcast {
        return g;
    }
    let inner_shape = g.shape()[1..].to_vec();
    let inner = numel(&inner_shape);
    let mut out = vec![T::zero(); inner];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % inner] += v;
    }
    Tensor::from_vec(&inner_shape, out).unwrap()
}

/// Applies `f(g, other)` elementwise where `other` may be the broadcast
/// operand (`other_side` says which operand it is).
fn elementwise_with<T: Scalar>(
    g: &Tensor<T>,
    other: &Tensor<T>,
    kind: Bcast,
    other_side: Side,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let broadcast = matches!(
        (kind, other_side),
        (Bcast::Rhs, Side::Rhs) | (Bcast::Lhs, Side::Lhs)
    );
    let inner = other.len();
    let data = if broadcast {
        g.data()
            .iter()
            .enumerate()
            .map(|(i, &gv)| f(gv, other.data()[i % inner]))
            .collect()
    } else {
        g.data().iter().zip(other.data()).map(|(&gv, &ov)| f(gv, ov)).collect()
    };
    Tensor::from_vec(g.shape(), data).unwrap()
}

fn expand_strides(src: &[usize], dst: &[usize]) -> Option<Vec<usize>> {
    if src.len() > dst.len() {
        return None;
    }
    let lead = dst.len() - src.len();
    let mut strides = vec![0usize; dst.len()];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        let (s, d) = (src[i], dst[lead + i]);
        if s == d {
            strides[lead + i] = stride;
        } else if s != 1 {
            return None;
        }
        stride *= s;
    }
    Some(strides)
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < shape[i] {
            return;
        }
        idx[i] = 0;
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// Below this the truncated series are exact to double precision.
const SERIES_CUTOFF: f64 = 1e-4;

/// `sin(√s)/√s`
pub(crate) fn sinc_sqrt<T: Scalar>(s: T) -> T {
    if s < T::lit(SERIES_CUTOFF) {
        T::one() - s / T::lit(6.0) + s * s / T::lit(120.0) - s * s * s / T::lit(5040.0)
    } else {
        let t = s.sqrt();
        t.sin() / t
    }
}

fn sinc_sqrt_deriv<T: Scalar>(s: T) -> T {
    if s < T::lit(SERIES_CUTOFF) {
        -T::one() / T::lit(6.0) + s / T::lit(60.0) - s * s / T::lit(1680.0)
    } else {
        let t = s.sqrt();
        (t.cos() - t.sin() / t) / (s + s)
    }
}

/// `(1 − cos √s)/s`
pub(crate) fn vers_sqrt<T: Scalar>(s: T) -> T {
    if s < T::lit(SERIES_CUTOFF) {
        T::lit(0.5) - s / T::lit(24.0) + s * s / T::lit(720.0) - s * s * s / T::lit(40320.0)
    } else {
        (T::one() - s.sqrt().cos()) / s
    }
}

fn vers_sqrt_deriv<T: Scalar>(s: T) -> T {
    if s < T::lit(SERIES_CUTOFF) {
        -T::one() / T::lit(24.0) + s / T::lit(360.0) - s * s / T::lit(13440.0)
    } else {
        (sinc_sqrt(s) / T::lit(2.0) - vers_sqrt(s)) / s
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Solves `A X = B` (or `Aᵀ X = B` when `transposed`) for triangular `A`.
fn tri_solve<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, lower: bool, transposed: bool) -> Result<Tensor<T>> {
    let n = a.shape()[0];
    let m = b.shape()[1];
    let ad = a.data();
    if (0..n).any(|i| ad[i * n + i] == T::zero()) {
        return Err(Error::Domain {
            op: "solve_triangular",
            msg: "singular triangular matrix".into(),
        });
    }
    // element (i, j) of the effective matrix
    let el = |i: usize, j: usize| if transposed { ad[j * n + i] } else { ad[i * n + j] };
    // Aᵀ of a lower matrix is upper, so forward substitution applies when
    // exactly one of `lower` / `transposed` holds.
    let forward = lower != transposed;
    let mut x = b.data().to_vec();
    let order: Vec<usize> = if forward { (0..n).collect() } else { (0..n).rev().collect() };
    for &i in &order {
        for c in 0..m {
            let mut s = x[i * m + c];
            if forward {
                for j in 0..i {
                    s -= el(i, j) * x[j * m + c];
                }
            } else {
                for j in i + 1..n {
                    s -= el(i, j) * x[j * m + c];
                }
            }
            x[i * m + c] = s / el(i, i);
        }
    }
    let t = Tensor::from_vec(b.shape(), x)?;
    check_finite("solve_triangular", &t)?;
    Ok(t)
}
