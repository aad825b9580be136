use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded operation and the operands it read.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize, len: usize },
    Sum(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Reshape(Var),
    RepeatRows { input: Var, times: usize },
    Gather { table: Var, ids: Vec<usize> },
    Nll { input: Var, targets: Vec<Option<usize>> },
}

struct Node<'a, T: Scalar> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records differentiable operations in execution order.
///
/// Leaves may borrow their data (`leaf_ref`) so binding large parameter
/// sets costs nothing. `backward` walks the record in reverse and adds the
/// resulting gradients into the leaves' own buffers.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    visit_order: Vec<Var>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            visit_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [T]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(shape, Cow::Owned(value), op, requires_grad)
    }

    /// Records an owned leaf, keeping the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, Cow::Owned(tensor.into_data()), Op::Leaf, requires_grad)
    }

    /// Records a leaf that borrows its data.
    pub fn leaf_ref(&mut self, tensor: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.push(
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.data()),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.to_vec()).expect("recorded shapes are valid")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// Operations visited by the most recent backward pass, in visit order.
    pub fn visit_order(&self) -> &[Var] {
        &self.visit_order
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), false, T::zero(), &mut out);
        Ok(self.push_op(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched matrix product over a shared leading axis: `[B×m×k]·[B×k×n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                false,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push_op(vec![batch, m, n], out, Op::BatchMatMul(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(shape, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap_or(&0);
        if sx.len() != 2 || sb.iter().product::<usize>() != n || sb.len() > 2 || (sb.len() == 2 && sb[0] != 1) {
            return Err(Error::shape("add_row", sx, sb));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &b)| a + b))
            .collect();
        let shape = sx.to_vec();
        Ok(self.push_op(shape, out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let c = T::from_f64(factor);
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Scale(x, factor), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Tanh(x), &[x])
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat operands"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let width = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * width..(o + 1) * width]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push_op(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("slice", &shape, &[axis]));
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::OutOfRange {
                op: "slice",
                start,
                end: start + len,
                size: shape[axis],
            });
        }
        let (outer, size, inner) = split_axis(&shape, axis);
        let src = self.value(input);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * size * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push_op(
            out_shape,
            out,
            Op::Slice {
                input,
                axis,
                start,
                len,
            },
            &[input],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().fold(T::zero(), |acc, &v| acc + v);
        self.push_op(vec![1], vec![total], Op::Sum(x), &[x])
    }

    /// Softmax over the last axis, max-subtracted before exponentiation.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total = total + e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / total);
        }
        self.push_op(shape, out, Op::SoftmaxRows(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let total = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
            let log_total = total.ln();
            out.extend(row.iter().map(|&v| (v - max) - log_total));
        }
        self.push_op(shape, out, Op::LogSoftmaxRows(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push_op(shape, out, Op::Reshape(x), &[x]))
    }

    /// Repeats each row of an `[m×n]` matrix `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || times == 0 {
            return Err(Error::shape("repeat_rows", &shape, &[times]));
        }
        let n = shape[1];
        let mut out = Vec::with_capacity(shape[0] * times * n);
        for row in self.value(x).chunks(n) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        Ok(self.push_op(
            vec![shape[0] * times, n],
            out,
            Op::RepeatRows { input: x, times },
            &[x],
        ))
    }

    /// Row lookup into a `[V×E]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather", &shape, &[ids.len()]));
        }
        if ids.is_empty() {
            return Err(Error::Empty("gather ids"));
        }
        let (rows, width) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::UnknownToken {
                    id,
                    vocab_size: rows,
                });
            }
            out.extend_from_slice(&self.value(table)[id * width..(id + 1) * width]);
        }
        Ok(self.push_op(
            vec![ids.len(), width],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Sum of `-input[r, target_r]` over rows with a target.
    pub fn nll(&mut self, input: Var, targets: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("nll", &shape, &[targets.len()]));
        }
        let n = shape[1];
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= n {
                    return Err(Error::UnknownToken { id: t, vocab_size: n });
                }
                total = total - self.value(input)[r * n + t];
            }
        }
        Ok(self.push_op(
            vec![1],
            vec![total],
            Op::Nll {
                input,
                targets: targets.to_vec(),
            },
            &[input],
        ))
    }

    /// Reverse pass from a scalar root.
    ///
    /// Gradients are added into every reachable `requires_grad` leaf; leaves
    /// the root does not depend on keep whatever they held before.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        let mut order = Vec::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            order.push(Var(i));
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((i, g));
            }
        }

        self.visit_order = order;
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a = *a + d),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        // Ensures `v` has a gradient buffer; false when `v` needs no gradient.
        let buf = |v: Var, grads: &mut [Option<Vec<T>>]| -> bool {
            if !nodes[v.0].requires_grad {
                return false;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![T::zero(); nodes[v.0].value.len()]);
            }
            true
        };
        macro_rules! acc {
            ($v:expr) => {
                grads[$v.0].as_mut().expect("buffer allocated")
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if buf(*a, grads) {
                    T::gemm(m, n, k, g, false, &nodes[b.0].value, true, T::one(), acc!(a));
                }
                if buf(*b, grads) {
                    T::gemm(k, m, n, &nodes[a.0].value, true, g, false, T::one(), acc!(b));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if buf(*a, grads) {
                    let da = acc!(a);
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &nodes[b.0].value[i * k * n..(i + 1) * k * n],
                            true,
                            T::one(),
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if buf(*b, grads) {
                    let db = acc!(b);
                    for i in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            &nodes[a.0].value[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            T::one(),
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if buf(*v, grads) {
                        acc!(v).iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if buf(*a, grads) {
                    acc!(a).iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
                if buf(*b, grads) {
                    acc!(b).iter_mut().zip(g).for_each(|(d, &x)| *d = *d - x);
                }
            }
            Op::Mul(a, b) => {
                if buf(*a, grads) {
                    let other = &nodes[b.0].value;
                    acc!(a)
                        .iter_mut()
                        .zip(g.iter().zip(other.iter()))
                        .for_each(|(d, (&x, &o))| *d = *d + x * o);
                }
                if buf(*b, grads) {
                    let other = &nodes[a.0].value;
                    acc!(b)
                        .iter_mut()
                        .zip(g.iter().zip(other.iter()))
                        .for_each(|(d, (&x, &o))| *d = *d + x * o);
                }
            }
            Op::AddRow(x, bias) => {
                if buf(*x, grads) {
                    acc!(x).iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
                if buf(*bias, grads) {
                    let db = acc!(bias);
                    let n = db.len();
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                }
            }
            Op::Scale(x, factor) => {
                if buf(*x, grads) {
                    let c = T::from_f64(*factor);
                    acc!(x).iter_mut().zip(g).for_each(|(d, &v)| *d = *d + c * v);
                }
            }
            Op::Sigmoid(x) => {
                if buf(*x, grads) {
                    acc!(x)
                        .iter_mut()
                        .zip(g.iter().zip(node.value.iter()))
                        .for_each(|(d, (&gv, &y))| *d = *d + gv * y * (T::one() - y));
                }
            }
            Op::Tanh(x) => {
                if buf(*x, grads) {
                    acc!(x)
                        .iter_mut()
                        .zip(g.iter().zip(node.value.iter()))
                        .for_each(|(d, (&gv, &y))| *d = *d + gv * (T::one() - y * y));
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let width = nodes[p.0].shape[*axis] * inner;
                    if buf(*p, grads) {
                        let dp = acc!(p);
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..o * total * inner + offset + width];
                            dp[o * width..(o + 1) * width]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                    offset += width;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                if buf(*input, grads) {
                    let (outer, size, inner) = split_axis(&nodes[input.0].shape, *axis);
                    let di = acc!(input);
                    for o in 0..outer {
                        let base = o * size * inner + start * inner;
                        di[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(d, &v)| *d = *d + v);
                    }
                }
            }
            Op::Sum(x) => {
                if buf(*x, grads) {
                    acc!(x).iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::SoftmaxRows(x) => {
                if buf(*x, grads) {
                    let n = *node.shape.last().expect("non-empty shape");
                    let dx = acc!(x);
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                        let dot = grow.iter().zip(yrow).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + y * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                if buf(*x, grads) {
                    let n = *node.shape.last().expect("non-empty shape");
                    let dx = acc!(x);
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                        let total = grow.iter().fold(T::zero(), |s, &a| s + a);
                        for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + gv - y.exp() * total;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if buf(*x, grads) {
                    acc!(x).iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
            }
            Op::RepeatRows { input, times } => {
                if buf(*input, grads) {
                    let n = nodes[input.0].shape[1];
                    let di = acc!(input);
                    for (r, drow) in di.chunks_mut(n).enumerate() {
                        for t in 0..*times {
                            let src = &g[(r * times + t) * n..(r * times + t + 1) * n];
                            drow.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if buf(*table, grads) {
                    let width = nodes[table.0].shape[1];
                    let dt = acc!(table);
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * width..(id + 1) * width]
                            .iter_mut()
                            .zip(&g[r * width..(r + 1) * width])
                            .for_each(|(d, &v)| *d = *d + v);
                    }
                }
            }
            Op::Nll { input, targets } => {
                if buf(*input, grads) {
                    let n = nodes[input.0].shape[1];
                    let di = acc!(input);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            di[r * n + t] = di[r * n + t] - g[0];
                        }
                    }
                }
            }
        }
    }
}
