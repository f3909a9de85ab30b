//! Reverse-mode gradient tape.
//!
//! Every forward computation appends a node holding its value and the
//! primitive that produced it. [`Tape::backward`] walks the nodes in reverse
//! and accumulates adjoints, so a value used twice receives the sum of both
//! contributions.

use std::cell::RefCell;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Vec<f64>),
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    LnFloor(Var, f64),
    Softmax(Var),
    Sum(Var),
    Dot(Var, Var),
    IndexSum(Var, Vec<usize>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Stack(Vec<Var>),
    Row(Var, usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of primitive operations.
///
/// Methods take `&self`; nodes are never mutated after they are pushed, so
/// nested expressions like `tape.add(tape.matvec(w, x)?, b)?` are fine.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A leaf that gradients flow into.
    pub fn param(&self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    pub fn vector(&self, value: Vec<f64>) -> Var {
        let n = value.len();
        self.push(vec![n], value, Op::Leaf, false)
    }

    pub fn zeros(&self, n: usize) -> Var {
        self.vector(vec![0.0; n])
    }

    pub fn scalar_const(&self, x: f64) -> Var {
        self.push(vec![], vec![x], Op::Leaf, false)
    }

    fn leaf(&self, shape: &[usize], value: Vec<f64>, needs_grad: bool) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::dim("leaf", shape, &[value.len()]));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, needs_grad))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        let ng = self.needs(&[a]);
        self.push(shape, value, op, ng)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape != nb.shape {
                return Err(Error::dim(name, &na.shape, &nb.shape));
            }
            let value = na
                .value
                .iter()
                .zip(&nb.value)
                .map(|(&x, &y)| f(x, y))
                .collect();
            (na.shape.clone(), value)
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(shape, value, op, ng))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, Op::Affine(a, scale), |x| scale * x + shift)
    }

    pub fn scale(&self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// Elementwise product with a constant array (dropout-style masks).
    pub fn mul_const(&self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.value.len() != mask.len() {
                return Err(Error::dim("mul_const", &na.shape, &[mask.len()]));
            }
            let value = na.value.iter().zip(&mask).map(|(x, m)| x * m).collect();
            (na.shape.clone(), value)
        };
        let ng = self.needs(&[a]);
        Ok(self.push(shape, value, Op::MulConst(a, mask), ng))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return Err(Error::dim("matmul", &na.shape, &nb.shape));
            }
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let x = na.value[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &nb.value[p * n..(p + 1) * n];
                    for (o, &y) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
            (vec![m, n], out)
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(shape, value, Op::MatMul(a, b), ng))
    }

    /// `m · x` for `m: [rows, cols]`, `x: [cols]`.
    pub fn matvec(&self, m: Var, x: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (nm, nx) = (&nodes[m.0], &nodes[x.0]);
            if nm.shape.len() != 2 || nx.shape.len() != 1 || nm.shape[1] != nx.shape[0] {
                return Err(Error::dim("matvec", &nm.shape, &nx.shape));
            }
            let cols = nm.shape[1];
            let value = nm
                .value
                .chunks_exact(cols)
                .map(|row| row.iter().zip(&nx.value).map(|(a, b)| a * b).sum())
                .collect();
            (vec![nm.shape[0]], value)
        };
        let ng = self.needs(&[m, x]);
        Ok(self.push(shape, value, Op::MatVec(m, x), ng))
    }

    /// `xᵀ · m` for `x: [rows]`, `m: [rows, cols]`.
    pub fn vecmat(&self, x: Var, m: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (nx, nm) = (&nodes[x.0], &nodes[m.0]);
            if nm.shape.len() != 2 || nx.shape.len() != 1 || nm.shape[0] != nx.shape[0] {
                return Err(Error::dim("vecmat", &nx.shape, &nm.shape));
            }
            let cols = nm.shape[1];
            let mut out = vec![0.0; cols];
            for (row, &w) in nm.value.chunks_exact(cols).zip(&nx.value) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
            (vec![cols], out)
        };
        let ng = self.needs(&[x, m]);
        Ok(self.push(shape, value, Op::VecMat(x, m), ng))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_floor(&self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::LnFloor(a, floor), move |x| x.max(floor).ln())
    }

    /// Max-shifted softmax over a vector.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.shape.len() != 1 || na.value.is_empty() {
                return Err(Error::dim("softmax", &na.shape, &[]));
            }
            softmax_values(&na.value)?
        };
        let n = value.len();
        let ng = self.needs(&[a]);
        Ok(self.push(vec![n], value, Op::Softmax(a), ng))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.iter().sum();
        let ng = self.needs(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), ng)
    }

    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let s = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape != nb.shape {
                return Err(Error::dim("dot", &na.shape, &nb.shape));
            }
            na.value.iter().zip(&nb.value).map(|(x, y)| x * y).sum()
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(vec![], vec![s], Op::Dot(a, b), ng))
    }

    /// Sum of the entries at `indices` (duplicates count twice).
    pub fn index_sum(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let mut s = 0.0;
            for &i in indices {
                match na.value.get(i) {
                    Some(x) => s += x,
                    None => return Err(Error::dim("index_sum", &na.shape, &[i])),
                }
            }
            s
        };
        let ng = self.needs(&[a]);
        Ok(self.push(vec![], vec![s], Op::IndexSum(a, indices.to_vec()), ng))
    }

    pub fn index(&self, a: Var, i: usize) -> Result<Var> {
        self.index_sum(a, &[i])
    }

    /// Concatenates vectors (or scalars) end to end.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = Vec::new();
            for p in parts {
                let np = &nodes[p.0];
                if np.shape.len() > 1 {
                    return Err(Error::dim("concat", &np.shape, &[]));
                }
                out.extend_from_slice(&np.value);
            }
            out
        };
        let n = value.len();
        let ng = self.needs(parts);
        Ok(self.push(vec![n], value, Op::Concat(parts.to_vec()), ng))
    }

    pub fn slice(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.shape.len() != 1 || start + len > na.value.len() {
                return Err(Error::dim("slice", &na.shape, &[start, len]));
            }
            na.value[start..start + len].to_vec()
        };
        let ng = self.needs(&[a]);
        Ok(self.push(vec![len], value, Op::Slice(a, start), ng))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("stack"));
        }
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[rows[0].0].shape;
            let mut value = Vec::new();
            for r in rows {
                let nr = &nodes[r.0];
                if nr.shape.len() != 1 || nr.shape != *first {
                    return Err(Error::dim("stack", first, &nr.shape));
                }
                value.extend_from_slice(&nr.value);
            }
            (vec![rows.len(), first[0]], value)
        };
        let ng = self.needs(rows);
        Ok(self.push(shape, value, Op::Stack(rows.to_vec()), ng))
    }

    pub fn row(&self, m: Var, i: usize) -> Result<Var> {
        let (cols, value) = {
            let nodes = self.nodes.borrow();
            let nm = &nodes[m.0];
            if nm.shape.len() != 2 || i >= nm.shape[0] {
                return Err(Error::dim("row", &nm.shape, &[i]));
            }
            let cols = nm.shape[1];
            (cols, nm.value[i * cols..(i + 1) * cols].to_vec())
        };
        let ng = self.needs(&[m]);
        Ok(self.push(vec![cols], value, Op::Row(m, i), ng))
    }

    /// Reverse sweep from a single-element node whose own adjoint is seeded with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::dim("backward", &root.shape, &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            accumulate(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * vb[i];
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * va[i];
                }
            });
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] / vb[i];
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for i in 0..s.len() {
                    s[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                }
            });
        }
        Op::Affine(a, scale) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += scale * g));
        }
        Op::MulConst(a, mask) => {
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * mask[i];
                }
            });
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (va, vb) = (val(*a), val(*b));
            // dA = G Bᵀ
            accumulate(nodes, grads, *a, |s| {
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * vb[p * n + j];
                        }
                        s[i * k + p] += acc;
                    }
                }
            });
            // dB = Aᵀ G
            accumulate(nodes, grads, *b, |s| {
                for i in 0..m {
                    for p in 0..k {
                        let x = va[i * k + p];
                        for j in 0..n {
                            s[p * n + j] += x * g[i * n + j];
                        }
                    }
                }
            });
        }
        Op::MatVec(m, x) => {
            let cols = nodes[m.0].shape[1];
            let (vm, vx) = (val(*m), val(*x));
            accumulate(nodes, grads, *m, |s| {
                for (r, gr) in g.iter().enumerate() {
                    for c in 0..cols {
                        s[r * cols + c] += gr * vx[c];
                    }
                }
            });
            accumulate(nodes, grads, *x, |s| {
                for (r, gr) in g.iter().enumerate() {
                    for c in 0..cols {
                        s[c] += gr * vm[r * cols + c];
                    }
                }
            });
        }
        Op::VecMat(x, m) => {
            let cols = nodes[m.0].shape[1];
            let (vm, vx) = (val(*m), val(*x));
            accumulate(nodes, grads, *x, |s| {
                for (r, sr) in s.iter_mut().enumerate() {
                    *sr += (0..cols).map(|c| vm[r * cols + c] * g[c]).sum::<f64>();
                }
            });
            accumulate(nodes, grads, *m, |s| {
                for (r, xr) in vx.iter().enumerate() {
                    for c in 0..cols {
                        s[r * cols + c] += xr * g[c];
                    }
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Tanh(a) => {
            let y = &node.value;
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Relu(a) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    if x[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            });
        }
        Op::Exp(a) => {
            let y = &node.value;
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i];
                }
            });
        }
        Op::LnFloor(a, floor) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    if x[i] > *floor {
                        s[i] += g[i] / x[i];
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let inner: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += y[i] * (g[i] - inner);
                }
            });
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0]));
        }
        Op::Dot(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[0] * vb[i];
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[0] * va[i];
                }
            });
        }
        Op::IndexSum(a, indices) => {
            accumulate(nodes, grads, *a, |s| {
                for &i in indices {
                    s[i] += g[0];
                }
            });
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                accumulate(nodes, grads, *p, |s| {
                    s.iter_mut().zip(&g[offset..offset + len]).for_each(|(s, g)| *s += g)
                });
                offset += len;
            }
        }
        Op::Slice(a, start) => {
            accumulate(nodes, grads, *a, |s| {
                s[*start..*start + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(s, g)| *s += g)
            });
        }
        Op::Stack(rows) => {
            let cols = node.shape[1];
            for (r, v) in rows.iter().enumerate() {
                accumulate(nodes, grads, *v, |s| {
                    s.iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(s, g)| *s += g)
                });
            }
        }
        Op::Row(m, i) => {
            let cols = node.shape[0];
            accumulate(nodes, grads, *m, |s| {
                s[i * cols..(i + 1) * cols]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(s, g)| *s += g)
            });
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax on plain values, shared by the tape op and value-only callers.
pub fn softmax_values(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("softmax input is not finite".into()));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
