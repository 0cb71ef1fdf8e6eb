//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its output value and the indices
//! of its inputs. [`Tape::gradient`] replays the nodes in reverse and
//! accumulates adjoints; parameters read from a [`ParameterStore`] are
//! scattered back into one flat gradient vector, so a parameter used in
//! several places receives the sum of its partial gradients.
//!
//! [`ParameterStore`]: super::ParameterStore

use std::cell::{Ref, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param { offset: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Square(usize),
    Sqrt(usize),
    Relu(usize),
    /// `a * w^T` with `w` stored as `out x in`.
    MatMulT(usize, usize),
    SumRows(usize),
    SumCols(usize),
    SumAll(usize),
    LogSumExpRows(usize),
    Gather { src: usize, idx: Vec<usize> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Param { .. } => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMulT(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::SumAll(a)
            | Op::LogSumExpRows(a)
            | Op::Reshape(a) => vec![*a],
            Op::Gather { src, .. } => vec![*src],
            Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
        }
    }
}

/// Records a computation for one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a recorded value. Cheap to copy; arithmetic on it records new
/// nodes on the same tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &*self.value())
            .finish()
    }
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = matches!(op, Op::Param { .. })
            || op.parents().iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// A leaf whose gradient is scattered into the flat parameter vector at
    /// `offset..offset + value.len()`.
    pub(crate) fn param_leaf(&self, value: Tensor, offset: usize) -> Var<'_> {
        self.push(value, Op::Param { offset })
    }

    /// Reattaches a handle by node index. Used by [`super::GradientContext`].
    pub(crate) fn var(&self, id: usize) -> Var<'_> {
        assert!(id < self.len(), "node {id} is not on this tape");
        Var { tape: self, id }
    }

    pub fn concat_rows(&self, parts: &[Var<'_>]) -> Var<'_> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].id].value.cols();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let v = &nodes[p.id].value;
                assert_eq!(v.cols(), cols, "concat_rows column mismatch");
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::new(rows, cols, data)
        };
        self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_cols(&self, parts: &[Var<'_>]) -> Var<'_> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].id].value.rows();
            let widths: Vec<usize> = parts.iter().map(|p| nodes[p.id].value.cols()).collect();
            let cols: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    let v = &nodes[p.id].value;
                    assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                    data.extend_from_slice(v.row_slice(r));
                }
            }
            Tensor::new(rows, cols, data)
        };
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Reverse pass from a scalar node. Returns the gradient with respect to
    /// every parameter leaf, laid out as a flat vector of length `n_params`.
    pub fn gradient(&self, output: Var<'_>, n_params: usize) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "gradient requires a scalar output"
        );
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        adj[output.id] = Some(vec![1.0]);
        let mut flat = vec![0.0; n_params];

        for id in (0..=output.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param { offset } => {
                    for (slot, gi) in flat[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *slot += gi;
                    }
                }
                Op::Add(a, b) => {
                    accumulate_broadcast(&mut adj, &nodes, *a, out, &g, |_, _| 1.0);
                    accumulate_broadcast(&mut adj, &nodes, *b, out, &g, |_, _| 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate_broadcast(&mut adj, &nodes, *a, out, &g, |_, _| 1.0);
                    accumulate_broadcast(&mut adj, &nodes, *b, out, &g, |_, _| -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    accumulate_broadcast(&mut adj, &nodes, *a, out, &g, |r, c| {
                        broadcast_get(vb, r, c)
                    });
                    accumulate_broadcast(&mut adj, &nodes, *b, out, &g, |r, c| {
                        broadcast_get(va, r, c)
                    });
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    accumulate_broadcast(&mut adj, &nodes, *a, out, &g, |r, c| {
                        1.0 / broadcast_get(vb, r, c)
                    });
                    accumulate_broadcast(&mut adj, &nodes, *b, out, &g, |r, c| {
                        let d = broadcast_get(vb, r, c);
                        -broadcast_get(va, r, c) / (d * d)
                    });
                }
                Op::Neg(a) => add_into(&mut adj, *a, g.iter().map(|v| -v)),
                Op::Scale(a, s) => add_into(&mut adj, *a, g.iter().map(|v| v * s)),
                Op::AddScalar(a) => add_into(&mut adj, *a, g.iter().copied()),
                Op::Exp(a) => add_into(&mut adj, *a, g.iter().zip(out.data()).map(|(g, y)| g * y)),
                Op::Log(a) => {
                    let x = nodes[*a].value.data();
                    add_into(&mut adj, *a, g.iter().zip(x).map(|(g, x)| g / x))
                }
                Op::Tanh(a) => add_into(
                    &mut adj,
                    *a,
                    g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)),
                ),
                Op::Sigmoid(a) => add_into(
                    &mut adj,
                    *a,
                    g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)),
                ),
                Op::Square(a) => {
                    let x = nodes[*a].value.data();
                    add_into(&mut adj, *a, g.iter().zip(x).map(|(g, x)| 2.0 * g * x))
                }
                // derivative taken as 0 at the origin
                Op::Sqrt(a) => add_into(
                    &mut adj,
                    *a,
                    g.iter()
                        .zip(out.data())
                        .map(|(g, y)| if *y > 0.0 { 0.5 * g / y } else { 0.0 }),
                ),
                Op::Relu(a) => {
                    let x = nodes[*a].value.data();
                    add_into(
                        &mut adj,
                        *a,
                        g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }),
                    )
                }
                Op::MatMulT(a, w) => {
                    let (va, vw) = (&nodes[*a].value, &nodes[*w].value);
                    let (r, k) = va.shape();
                    let c = vw.rows();
                    if nodes[*a].needs_grad {
                        // dA = dY * W
                        let mut da = vec![0.0; r * k];
                        gemm(r, c, k, &g, c, 1, vw.data(), k, 1, &mut da);
                        add_into(&mut adj, *a, da.into_iter());
                    }
                    if nodes[*w].needs_grad {
                        // dW = dY^T * A
                        let mut dw = vec![0.0; c * k];
                        gemm(c, r, k, &g, 1, c, va.data(), k, 1, &mut dw);
                        add_into(&mut adj, *w, dw.into_iter());
                    }
                }
                Op::SumRows(a) => {
                    let cols = nodes[*a].value.cols();
                    add_into(
                        &mut adj,
                        *a,
                        g.iter().flat_map(|gi| std::iter::repeat_n(*gi, cols)),
                    )
                }
                Op::SumCols(a) => {
                    let rows = nodes[*a].value.rows();
                    add_into(&mut adj, *a, (0..rows).flat_map(|_| g.iter().copied()))
                }
                Op::SumAll(a) => {
                    let n = nodes[*a].value.len();
                    add_into(&mut adj, *a, std::iter::repeat_n(g[0], n))
                }
                Op::LogSumExpRows(a) => {
                    let x = &nodes[*a].value;
                    let cols = x.cols();
                    let mut dx = vec![0.0; x.len()];
                    for (r, (gi, lse)) in g.iter().zip(out.data()).enumerate() {
                        if *lse == f64::NEG_INFINITY {
                            continue;
                        }
                        for c in 0..cols {
                            dx[r * cols + c] = gi * (x.get(r, c) - lse).exp();
                        }
                    }
                    add_into(&mut adj, *a, dx.into_iter());
                }
                Op::Gather { src, idx } => {
                    let n = nodes[*src].value.len();
                    let mut dx = vec![0.0; n];
                    for (gi, &i) in g.iter().zip(idx) {
                        dx[i] += gi;
                    }
                    add_into(&mut adj, *src, dx.into_iter());
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = nodes[p].value.len();
                        add_into(&mut adj, p, g[start..start + n].iter().copied());
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = out.rows();
                    let cols = out.cols();
                    let mut start = 0;
                    for &p in parts {
                        let w = nodes[p].value.cols();
                        let part: Vec<f64> = (0..rows)
                            .flat_map(|r| g[r * cols + start..r * cols + start + w].iter().copied())
                            .collect();
                        add_into(&mut adj, p, part.into_iter());
                        start += w;
                    }
                }
                Op::Reshape(a) => add_into(&mut adj, *a, g.into_iter()),
            }
        }
        flat
    }
}

fn add_into(adj: &mut [Option<Vec<f64>>], id: usize, g: impl Iterator<Item = f64>) {
    match &mut adj[id] {
        Some(acc) => {
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += gi;
            }
        }
        slot @ None => *slot = Some(g.collect()),
    }
}

#[inline]
fn broadcast_get(t: &Tensor, r: usize, c: usize) -> f64 {
    let rr = if t.rows() == 1 { 0 } else { r };
    let cc = if t.cols() == 1 { 0 } else { c };
    t.get(rr, cc)
}

/// Adds `g * local(r, c)` into the adjoint of `target`, summing over any
/// axis along which `target` was broadcast.
fn accumulate_broadcast(
    adj: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    target: usize,
    out: &Tensor,
    g: &[f64],
    local: impl Fn(usize, usize) -> f64,
) {
    if !nodes[target].needs_grad {
        return;
    }
    let t = &nodes[target].value;
    let (rows, cols) = out.shape();
    let mut acc = vec![0.0; t.len()];
    for r in 0..rows {
        let rr = if t.rows() == 1 { 0 } else { r };
        for c in 0..cols {
            let cc = if t.cols() == 1 { 0 } else { c };
            acc[rr * t.cols() + cc] += g[r * cols + c] * local(r, c);
        }
    }
    add_into(adj, target, acc.into_iter());
}

/// `c += a * b` where `a` is `m x k` and `b` is `k x n` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes slices whose extents cover the strided
    // m x k, k x n and m x n views; `c` is row-major with stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("shapes {a:?} and {b:?} do not broadcast")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.to_tensor())
    }

    fn binary(self, other: Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let value = {
            let (a, b) = (self.value(), other.value());
            let (rows, cols) = broadcast_shape(a.shape(), b.shape());
            let mut data = Vec::with_capacity(rows * cols);
            if a.shape() == b.shape() {
                data.extend(a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)));
            } else {
                for r in 0..rows {
                    for c in 0..cols {
                        data.push(f(broadcast_get(&a, r, c), broadcast_get(&b, r, c)));
                    }
                }
            }
            Tensor::new(rows, cols, data)
        };
        self.tape.push(value, op)
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = {
            let a = self.value();
            Tensor::new(a.rows(), a.cols(), a.data().iter().map(|x| f(*x)).collect())
        };
        self.tape.push(value, op)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(|x| x * s, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(|x| x + s, Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    /// `self * w^T` where `w` is `out x in` and `self` is `n x in`.
    pub fn matmul_t(self, w: Var<'t>) -> Var<'t> {
        let value = {
            let (a, wv) = (self.value(), w.value());
            let (r, k) = a.shape();
            let (c, kw) = wv.shape();
            assert_eq!(k, kw, "matmul_t inner dimension mismatch: {k} vs {kw}");
            let mut out = vec![0.0; r * c];
            gemm(r, k, c, a.data(), k, 1, wv.data(), 1, k, &mut out);
            Tensor::new(r, c, out)
        };
        self.tape.push(value, Op::MatMulT(self.id, w.id))
    }

    /// Sum across columns: `n x m -> n x 1`.
    pub fn sum_rows(self) -> Var<'t> {
        let value = {
            let a = self.value();
            Tensor::new(a.rows(), 1, a.iter_rows().map(|r| r.iter().sum()).collect())
        };
        self.tape.push(value, Op::SumRows(self.id))
    }

    /// Sum down rows: `n x m -> 1 x m`.
    pub fn sum_cols(self) -> Var<'t> {
        let value = {
            let a = self.value();
            let mut acc = vec![0.0; a.cols()];
            for row in a.iter_rows() {
                for (s, v) in acc.iter_mut().zip(row) {
                    *s += v;
                }
            }
            Tensor::new(1, a.cols(), acc)
        };
        self.tape.push(value, Op::SumCols(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().data().iter().sum());
        self.tape.push(value, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Row-wise log-sum-exp with max-shift: `n x m -> n x 1`. A row of all
    /// `-inf` yields `-inf` and propagates no gradient.
    pub fn logsumexp_rows(self) -> Var<'t> {
        let value = {
            let a = self.value();
            Tensor::new(a.rows(), 1, a.iter_rows().map(logsumexp).collect())
        };
        self.tape.push(value, Op::LogSumExpRows(self.id))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(self) -> Var<'t> {
        self - self.logsumexp_rows()
    }

    /// Output entry `i` is input entry `idx[i]` (flat row-major indexing).
    pub fn gather(self, idx: Vec<usize>, rows: usize, cols: usize) -> Var<'t> {
        assert_eq!(idx.len(), rows * cols, "gather index length mismatch");
        let value = {
            let a = self.value();
            let src = a.data();
            Tensor::new(rows, cols, idx.iter().map(|&i| src[i]).collect())
        };
        self.tape.push(value, Op::Gather { src: self.id, idx })
    }

    pub fn select_rows(self, rows: &[usize]) -> Var<'t> {
        let cols = self.cols();
        let idx = rows
            .iter()
            .flat_map(|&r| r * cols..(r + 1) * cols)
            .collect();
        self.gather(idx, rows.len(), cols)
    }

    pub fn select_cols(self, cols: &[usize]) -> Var<'t> {
        let (n, m) = self.shape();
        let idx = (0..n)
            .flat_map(|r| cols.iter().map(move |&c| r * m + c))
            .collect();
        self.gather(idx, n, cols.len())
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let value = {
            let a = self.value();
            assert_eq!(a.len(), rows * cols, "reshape size mismatch");
            Tensor::new(rows, cols, a.data().to_vec())
        };
        self.tape.push(value, Op::Reshape(self.id))
    }
}

/// Max-shifted log-sum-exp. Empty input and all `-inf` give `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

macro_rules! binop {
    ($trait:ident, $method:ident, $f:expr, $op:ident) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.binary(rhs, $f, Op::$op(self.id, rhs.id))
            }
        }
    };
}

binop!(Add, add, |a, b| a + b, Add);
binop!(Sub, sub, |a, b| a - b, Sub);
binop!(Mul, mul, |a, b| a * b, Mul);
binop!(Div, div, |a, b| a / b, Div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(|x| -x, Op::Neg(self.id))
    }
}
