use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How the right operand of an elementwise binary op maps onto the left.
///
/// * `Same`: identical shapes.
/// * `Col`: rhs equals lhs with the last axis collapsed to 1.
/// * `Row`: rhs shape is a suffix of the lhs shape (e.g. a bias vector).
/// * `Scalar`: rhs holds a single value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Col,
    Row,
    Scalar,
}

impl Bcast {
    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        if lhs == rhs {
            return Ok(Bcast::Same);
        }
        let n = lhs.len();
        if rhs.len() == n && n > 0 && rhs[n - 1] == 1 && rhs[..n - 1] == lhs[..n - 1] {
            return Ok(Bcast::Col);
        }
        if !rhs.is_empty() && rhs.len() <= n && lhs.ends_with(rhs) {
            return Ok(Bcast::Row);
        }
        if rhs.iter().product::<usize>() == 1 {
            return Ok(Bcast::Scalar);
        }
        Err(Error::shape(op, lhs, rhs))
    }

    #[inline]
    fn index(self, i: usize, lhs_last: usize, rhs_len: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Col => i / lhs_last,
            Bcast::Row => i % rhs_len,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast(Var),
    Binary(BinKind, Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Rsqrt(Var),
    SoftmaxLast(Var),
    MeanAxis {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll(Var),
    ConcatLast(Vec<Var>),
    SplitLast {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    Take {
        input: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        input: Var,
        rows: Vec<usize>,
    },
    GatedScan {
        gate: Var,
        input: Var,
        init: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::TransposeLast(_) => "transpose",
            Op::Binary(BinKind::Add, ..) => "add",
            Op::Binary(BinKind::Sub, ..) => "sub",
            Op::Binary(BinKind::Mul, ..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Rsqrt(_) => "rsqrt",
            Op::SoftmaxLast(_) => "softmax",
            Op::MeanAxis { .. } => "mean",
            Op::SumAll(_) => "sum",
            Op::ConcatLast(_) => "concat",
            Op::SplitLast { .. } => "split",
            Op::Reshape(_) => "reshape",
            Op::Take { .. } => "take",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::GatedScan { .. } => "gated_scan",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

/// Names of every differentiable primitive, as accepted by
/// [`inject_sign_flip`].
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "bmm",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "rsqrt",
    "softmax",
    "mean",
    "sum",
    "concat",
    "split",
    "reshape",
    "take",
    "scatter_rows",
    "gated_scan",
    "cross_entropy",
    "bce_with_logits",
];

thread_local! {
    static SIGN_FLIP: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Negates the backward rule of one primitive on the current thread.
///
/// Mutation hook for the gradient-check harness: with a flip injected,
/// the finite-difference suite must report failures.
#[doc(hidden)]
pub fn inject_sign_flip(op: Option<&'static str>) {
    SIGN_FLIP.with(|c| c.set(op));
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Every op appends one node; nodes only refer to earlier nodes, so
/// insertion order is a topological order and backward simply walks it
/// in reverse. A graph created with [`Graph::no_grad`] runs the very same
/// kernels but records nothing differentiable.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<usize, Var>>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the trainable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Tensor>,
    by_param: HashMap<usize, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(&v)
    }

    /// Gradient for a parameter tensor previously bound with [`Graph::param`].
    pub fn of(&self, param: &Tensor) -> Option<&Tensor> {
        let key = param as *const Tensor as usize;
        self.by_param.get(&key).and_then(|v| self.by_var.get(v))
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            recording: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    /// Owned copy of a value.
    pub fn tensor(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.recording && inputs.iter().any(|v| nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A value that never receives gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Constant, &[])
    }

    /// A trainable leaf that is not tied to a parameter tensor.
    pub fn leaf(&self, t: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t,
            op: if self.recording { Op::Leaf } else { Op::Constant },
            requires_grad: self.recording,
        });
        Var(nodes.len() - 1)
    }

    /// Binds a parameter tensor as a trainable leaf.
    ///
    /// Binding is keyed by the tensor's address, so binding the same
    /// parameter repeatedly in one graph yields the same leaf and its
    /// gradient accumulates across all uses. The tensor must not move
    /// while the graph is alive.
    pub fn param(&self, t: &Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(&v) = self.params.borrow().get(&key) {
            return v;
        }
        let v = self.leaf(t.clone());
        self.params.borrow_mut().insert(key, v);
        v
    }

    // ---- linear algebra ------------------------------------------------

    /// `a[.., m, k] · b[k, n] -> [.., m, n]`; `b` is shared across the
    /// leading axes of `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (ash, bsh) = (av.shape(), bv.shape());
            if ash.is_empty() || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
                return Err(Error::shape("matmul", ash, bsh));
            }
            let (k, n) = (bsh[0], bsh[1]);
            let m = av.numel() / k.max(1);
            let mut out = vec![0.0; m * n];
            gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
            let mut shape = ash.to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::from_parts(shape, out)
        };
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched `a[.., m, k] · b[.., k, n]` with identical leading axes.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (ash, bsh) = (av.shape(), bv.shape());
            let r = ash.len();
            if r < 2 || bsh.len() != r || ash[..r - 2] != bsh[..r - 2] || ash[r - 1] != bsh[r - 2]
            {
                return Err(Error::shape("bmm", ash, bsh));
            }
            let (m, k, n) = (ash[r - 2], ash[r - 1], bsh[r - 1]);
            let batch: usize = ash[..r - 2].iter().product();
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                gemm_nn(
                    &av.data()[bi * m * k..(bi + 1) * m * k],
                    &bv.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let mut shape = ash.to_vec();
            shape[r - 1] = n;
            Tensor::from_parts(shape, out)
        };
        Ok(self.push(value, Op::BatchMatMul(a, b), &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let sh = av.shape();
            let r = sh.len();
            if r < 2 {
                return Err(Error::shape("transpose", sh, &[]));
            }
            let (rows, cols) = (sh[r - 2], sh[r - 1]);
            let batch = av.numel() / (rows * cols).max(1);
            let data = kernels::transpose_last(av.data(), batch, rows, cols);
            let mut shape = sh.to_vec();
            shape.swap(r - 2, r - 1);
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(value, Op::TransposeLast(a), &[a]))
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&self, kind: BinKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (value, bc) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let bc = Bcast::resolve(name, av.shape(), bv.shape())?;
            let last = av.last_dim().max(1);
            let blen = bv.numel();
            let bd = bv.data();
            let data: Vec<f64> = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bd[bc.index(i, last, blen)];
                    match kind {
                        BinKind::Add => x + y,
                        BinKind::Sub => x - y,
                        BinKind::Mul => x * y,
                    }
                })
                .collect();
            (Tensor::from_parts(av.shape().to_vec(), data), bc)
        };
        Ok(self.push(value, Op::Binary(kind, a, b, bc), &[a, b]))
    }

    /// Elementwise `a + b`; see the broadcast rules on [`Graph::mul`].
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, "add", a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    /// Elementwise `a * b`. The result always has `a`'s shape; `b` must
    /// either match it, be `a`'s shape with the last axis set to 1, be a
    /// trailing suffix of `a`'s shape, or hold a single value.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(f);
        self.push(value, op, &[a])
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `1 / sqrt(a)`
    pub fn rsqrt(&self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x.sqrt(), Op::Rsqrt(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let w = av.last_dim().max(1);
            Tensor::from_parts(av.shape().to_vec(), kernels::softmax_rows(av.data(), w))
        };
        self.push(value, Op::SoftmaxLast(a), &[a])
    }

    // ---- reductions ----------------------------------------------------

    /// Mean over one axis. With `keepdim` the axis stays with size 1.
    pub fn mean_axis(&self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let (value, outer, len, inner) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let sh = av.shape();
            if axis >= sh.len() || sh[axis] == 0 {
                return Err(Error::shape("mean", sh, &[axis]));
            }
            let outer: usize = sh[..axis].iter().product();
            let len = sh[axis];
            let inner: usize = sh[axis + 1..].iter().product();
            let d = av.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += x;
                    }
                }
            }
            for x in &mut out {
                *x /= len as f64;
            }
            let mut shape = sh.to_vec();
            if keepdim {
                shape[axis] = 1;
            } else {
                shape.remove(axis);
            }
            (Tensor::from_parts(shape, out), outer, len, inner)
        };
        Ok(self.push(
            value,
            Op::MeanAxis {
                input: a,
                outer,
                len,
                inner,
            },
            &[a],
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s: f64 = self.nodes.borrow()[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    // ---- shape manipulation --------------------------------------------

    /// Concatenates along the last axis; all other axes must agree.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
            let lead = {
                let sh = nodes[first.0].value.shape();
                if sh.is_empty() {
                    return Err(Error::shape("concat", sh, &[]));
                }
                sh[..sh.len() - 1].to_vec()
            };
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let sh = nodes[p.0].value.shape();
                if sh.len() != lead.len() + 1 || sh[..lead.len()] != lead[..] {
                    return Err(Error::shape("concat", nodes[first.0].value.shape(), sh));
                }
                widths.push(sh[sh.len() - 1]);
            }
            let total: usize = widths.iter().sum();
            let rows: usize = lead.iter().product();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.0].value.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead;
            shape.push(total);
            Tensor::from_parts(shape, out)
        };
        Ok(self.push(value, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn split(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let sh = av.shape();
            let w = av.last_dim();
            if sh.is_empty() || start + len > w {
                return Err(Error::shape("split", sh, &[start, len]));
            }
            let rows = av.rows();
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&av.data()[r * w + start..r * w + start + len]);
            }
            let mut shape = sh.to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::from_parts(shape, out)
        };
        Ok(self.push(value, Op::SplitLast { input: a, start }, &[a]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Flat gather: `out[i] = a.flat[index[i]]`, shaped as `shape`.
    pub fn take(&self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            if shape.iter().product::<usize>() != index.len() {
                return Err(Error::shape("take", shape, &[index.len()]));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= av.numel()) {
                return Err(Error::shape("take", av.shape(), &[bad]));
            }
            let d = av.data();
            Tensor::from_parts(shape.to_vec(), index.iter().map(|&i| d[i]).collect())
        };
        Ok(self.push(value, Op::Take { input: a, index }, &[a]))
    }

    /// Gathers whole rows of a `[n, w]` matrix.
    pub fn gather_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let sh = self.shape(a);
        if sh.len() != 2 {
            return Err(Error::shape("gather_rows", &sh, &[]));
        }
        let w = sh[1];
        let index = rows
            .iter()
            .flat_map(|&r| (r * w..(r + 1) * w).collect::<Vec<_>>())
            .collect();
        self.take(a, index, &[rows.len(), w])
    }

    /// Scatters the rows of `a[n, w]` into a zero `[total, w]` matrix at
    /// `rows`; repeated destinations accumulate.
    pub fn scatter_rows(&self, a: Var, rows: Vec<usize>, total: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let sh = av.shape();
            if sh.len() != 2 || sh[0] != rows.len() || rows.iter().any(|&r| r >= total) {
                return Err(Error::shape("scatter_rows", sh, &[total]));
            }
            let w = sh[1];
            let mut out = vec![0.0; total * w];
            let mut written = vec![false; total];
            for (i, &r) in rows.iter().enumerate() {
                let src = &av.data()[i * w..(i + 1) * w];
                let dst = &mut out[r * w..(r + 1) * w];
                if written[r] {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                } else {
                    dst.copy_from_slice(src);
                    written[r] = true;
                }
            }
            Tensor::from_parts(vec![total, w], out)
        };
        Ok(self.push(value, Op::ScatterRows { input: a, rows }, &[a]))
    }

    // ---- fused ops -----------------------------------------------------

    /// First-order gated recurrence over axis `-2`:
    /// `h_t = (1 - g_t) * h_{t-1} + g_t * x_t`, with `h_0 = init`.
    ///
    /// `gate` and `input` are `[.., T, d]`; `init` is `[d]`. Returns every
    /// hidden state, aligned with the input steps.
    pub fn gated_scan(&self, gate: Var, input: Var, init: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (gv, xv, hv) = (&nodes[gate.0].value, &nodes[input.0].value, &nodes[init.0].value);
            let sh = xv.shape();
            if gv.shape() != sh || sh.len() < 2 {
                return Err(Error::shape("gated_scan", gv.shape(), sh));
            }
            let (steps, width) = (sh[sh.len() - 2], sh[sh.len() - 1]);
            if hv.shape() != [width] {
                return Err(Error::shape("gated_scan", hv.shape(), &[width]));
            }
            let batch = xv.numel() / (steps * width).max(1);
            let (g, x, h0) = (gv.data(), xv.data(), hv.data());
            let mut out = vec![0.0; xv.numel()];
            for b in 0..batch {
                for t in 0..steps {
                    let off = (b * steps + t) * width;
                    for j in 0..width {
                        let prev = if t == 0 { h0[j] } else { out[off - width + j] };
                        let gt = g[off + j];
                        out[off + j] = (1.0 - gt) * prev + gt * x[off + j];
                    }
                }
            }
            Tensor::from_parts(sh.to_vec(), out)
        };
        Ok(self.push(value, Op::GatedScan { gate, input, init }, &[gate, input, init]))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class indices.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits.0].value;
            let sh = lv.shape();
            if sh.len() != 2 || sh[0] != labels.len() || labels.iter().any(|&l| l >= sh[1]) {
                return Err(Error::shape("cross_entropy", sh, &[labels.len()]));
            }
            let c = sh[1];
            let probs = kernels::softmax_rows(lv.data(), c);
            let mut total = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                let row = lv.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
                total += lse - row[label];
            }
            (total / labels.len().max(1) as f64, probs)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy of logits against `targets` in `[0, 1]`.
    pub fn bce_with_logits(&self, logits: Var, targets: &Tensor) -> Result<Var> {
        let loss = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits.0].value;
            if lv.numel() != targets.numel() {
                return Err(Error::shape("bce_with_logits", lv.shape(), targets.shape()));
            }
            let total: f64 = lv
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&z, &t)| kernels::softplus(z) - t * z)
                .sum();
            total / lv.numel().max(1) as f64
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            &[logits],
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !self.recording || !root.requires_grad {
            return Err(Error::Detached);
        }
        let flip = SIGN_FLIP.with(|c| c.get());
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(root.value.shape().to_vec(), vec![1.0]));
        let mut out = HashMap::new();
        for id in (0..=loss.0).rev() {
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if flip == Some(node.op.name()) {
                g.data_mut().iter_mut().for_each(|x| *x = -*x);
            }
            if let Op::Leaf = node.op {
                out.insert(Var(id), g);
                continue;
            }
            vjp(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients {
            by_var: out,
            by_param: self.params.borrow().clone(),
        })
    }
}

/// Accumulates into the gradient buffer of `v`, creating it on first use.
fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[v.0].value.shape()));
    }
    f(slot.as_mut().unwrap().data_mut());
}

fn vjp(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let gd = g.data();
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (k, n) = (bv.shape()[0], bv.shape()[1]);
            let m = av.numel() / k.max(1);
            accumulate(nodes, grads, *a, |da| gemm_nt(gd, bv.data(), da, m, n, k));
            accumulate(nodes, grads, *b, |db| gemm_tn(av.data(), gd, db, m, k, n));
        }
        Op::BatchMatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let r = av.rank();
            let (m, k, n) = (av.shape()[r - 2], av.shape()[r - 1], bv.shape()[r - 1]);
            let batch = av.numel() / (m * k).max(1);
            accumulate(nodes, grads, *a, |da| {
                for bi in 0..batch {
                    gemm_nt(
                        &gd[bi * m * n..(bi + 1) * m * n],
                        &bv.data()[bi * k * n..(bi + 1) * k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            });
            accumulate(nodes, grads, *b, |db| {
                for bi in 0..batch {
                    gemm_tn(
                        &av.data()[bi * m * k..(bi + 1) * m * k],
                        &gd[bi * m * n..(bi + 1) * m * n],
                        &mut db[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            });
        }
        Op::TransposeLast(a) => {
            let sh = node.value.shape();
            let r = sh.len();
            let (rows, cols) = (sh[r - 2], sh[r - 1]);
            let batch = g.numel() / (rows * cols).max(1);
            let back = kernels::transpose_last(gd, batch, rows, cols);
            accumulate(nodes, grads, *a, |da| add_into(da, &back));
        }
        Op::Binary(kind, a, b, bc) => {
            let (av, bv) = (val(*a), val(*b));
            let last = av.last_dim().max(1);
            let blen = bv.numel();
            match kind {
                BinKind::Add | BinKind::Sub => {
                    accumulate(nodes, grads, *a, |da| add_into(da, gd));
                    let sign = if matches!(kind, BinKind::Sub) { -1.0 } else { 1.0 };
                    accumulate(nodes, grads, *b, |db| {
                        for (i, &gi) in gd.iter().enumerate() {
                            db[bc.index(i, last, blen)] += sign * gi;
                        }
                    });
                }
                BinKind::Mul => {
                    let (ad, bd) = (av.data(), bv.data());
                    accumulate(nodes, grads, *a, |da| {
                        for (i, &gi) in gd.iter().enumerate() {
                            da[i] += gi * bd[bc.index(i, last, blen)];
                        }
                    });
                    accumulate(nodes, grads, *b, |db| {
                        for (i, &gi) in gd.iter().enumerate() {
                            db[bc.index(i, last, blen)] += gi * ad[i];
                        }
                    });
                }
            }
        }
        Op::Scale(a, c) => {
            accumulate(nodes, grads, *a, |da| {
                for (d, &gi) in da.iter_mut().zip(gd) {
                    *d += gi * c;
                }
            });
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            accumulate(nodes, grads, *a, |da| add_into(da, gd));
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            accumulate(nodes, grads, *a, |da| {
                for i in 0..da.len() {
                    da[i] += gd[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            accumulate(nodes, grads, *a, |da| {
                for i in 0..da.len() {
                    da[i] += gd[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Exp(a) => {
            let y = node.value.data();
            accumulate(nodes, grads, *a, |da| {
                for i in 0..da.len() {
                    da[i] += gd[i] * y[i];
                }
            });
        }
        Op::Log(a) => {
            let x = val(*a).data();
            accumulate(nodes, grads, *a, |da| {
                for i in 0..da.len() {
                    da[i] += gd[i] / x[i];
                }
            });
        }
        Op::Rsqrt(a) => {
            let y = node.value.data();
            accumulate(nodes, grads, *a, |da| {
                for i in 0..da.len() {
                    da[i] += -0.5 * gd[i] * y[i] * y[i] * y[i];
                }
            });
        }
        Op::SoftmaxLast(a) => {
            let y = node.value.data();
            let w = node.value.last_dim().max(1);
            accumulate(nodes, grads, *a, |da| {
                for ((dr, yr), gr) in da.chunks_mut(w).zip(y.chunks(w)).zip(gd.chunks(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::MeanAxis {
            input,
            outer,
            len,
            inner,
        } => {
            let (outer, len, inner) = (*outer, *len, *inner);
            let inv = 1.0 / len as f64;
            accumulate(nodes, grads, *input, |da| {
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            da[(o * len + l) * inner + i] += gd[o * inner + i] * inv;
                        }
                    }
                }
            });
        }
        Op::SumAll(a) => {
            let s = gd[0];
            accumulate(nodes, grads, *a, |da| da.iter_mut().for_each(|x| *x += s));
        }
        Op::ConcatLast(parts) => {
            let total = node.value.last_dim();
            let rows = node.value.rows();
            let mut offset = 0;
            for p in parts {
                let w = val(*p).last_dim();
                accumulate(nodes, grads, *p, |dp| {
                    for r in 0..rows {
                        for j in 0..w {
                            dp[r * w + j] += gd[r * total + offset + j];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::SplitLast { input, start } => {
            let full = val(*input).last_dim();
            let w = node.value.last_dim();
            let rows = node.value.rows();
            accumulate(nodes, grads, *input, |da| {
                for r in 0..rows {
                    for j in 0..w {
                        da[r * full + start + j] += gd[r * w + j];
                    }
                }
            });
        }
        Op::Take { input, index } => {
            accumulate(nodes, grads, *input, |da| {
                for (&ix, &gi) in index.iter().zip(gd) {
                    da[ix] += gi;
                }
            });
        }
        Op::ScatterRows { input, rows } => {
            let w = node.value.last_dim();
            accumulate(nodes, grads, *input, |da| {
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..w {
                        da[i * w + j] += gd[r * w + j];
                    }
                }
            });
        }
        Op::GatedScan { gate, input, init } => {
            let (gv, xv, hv) = (val(*gate), val(*input), val(*init));
            let h = node.value.data();
            let sh = xv.shape();
            let (steps, width) = (sh[sh.len() - 2], sh[sh.len() - 1]);
            let batch = xv.numel() / (steps * width).max(1);
            let (gt, x, h0) = (gv.data(), xv.data(), hv.data());
            let mut dg = vec![0.0; gt.len()];
            let mut dx = vec![0.0; x.len()];
            let mut dh0 = vec![0.0; width];
            let mut carry = vec![0.0; width];
            for b in 0..batch {
                carry.iter_mut().for_each(|c| *c = 0.0);
                for t in (0..steps).rev() {
                    let off = (b * steps + t) * width;
                    for j in 0..width {
                        let prev = if t == 0 { h0[j] } else { h[off - width + j] };
                        let dh = gd[off + j] + carry[j];
                        dg[off + j] = dh * (x[off + j] - prev);
                        dx[off + j] = dh * gt[off + j];
                        carry[j] = dh * (1.0 - gt[off + j]);
                    }
                }
                for j in 0..width {
                    dh0[j] += carry[j];
                }
            }
            accumulate(nodes, grads, *gate, |d| add_into(d, &dg));
            accumulate(nodes, grads, *input, |d| add_into(d, &dx));
            accumulate(nodes, grads, *init, |d| add_into(d, &dh0));
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = val(*logits).last_dim();
            let scale = gd[0] / labels.len().max(1) as f64;
            accumulate(nodes, grads, *logits, |dl| {
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            });
        }
        Op::BceWithLogits { logits, targets } => {
            let z = val(*logits).data();
            let scale = gd[0] / z.len().max(1) as f64;
            accumulate(nodes, grads, *logits, |dl| {
                for i in 0..dl.len() {
                    dl[i] += scale * (kernels::sigmoid(z[i]) - targets[i]);
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
