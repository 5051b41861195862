//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! Every operation appends a node to the tape. `backward` walks the tape in
//! reverse and accumulates vector-Jacobian products into a [`Gradients`] map
//! that can be queried for any node (gradient taps) or reduced to per-parameter
//! gradients. Nodes created while recording is disabled, or whose inputs are
//! all constants, carry no gradient.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{argmax, gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    MulRow {
        x: Var,
        row: Var,
    },
    MulScalarVar {
        x: Var,
        s: Var,
    },
    MulConst {
        x: Var,
        c: Arc<Tensor>,
    },
    Scale {
        x: Var,
        s: f64,
    },
    AddScalar(Var),
    Recip(Var),
    Abs(Var),
    Exp(Var),
    Sigmoid(Var),
    Gelu(Var),
    SumAll(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    ShiftRows {
        x: Var,
        offset: isize,
    },
    SelectRows {
        a: Var,
        b: Var,
        take_b: Vec<bool>,
    },
    CifWeights {
        alpha: Var,
        beta: f64,
        cum: Vec<f64>,
    },
    StraightThrough {
        d: Var,
        gamma: f64,
        soft: Tensor,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::MulScalarVar { .. } => "mul_scalar_var",
            Op::MulConst { .. } => "mul_const",
            Op::Scale { .. } => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Recip(_) => "recip",
            Op::Abs(_) => "abs",
            Op::Exp(_) => "exp",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::SumAll(_) => "sum",
            Op::SumCols(_) => "sum_cols",
            Op::SoftmaxRows(_) => "softmax",
            Op::LogSoftmaxRows(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2NormalizeRows { .. } => "l2_normalize",
            Op::Transpose(_) => "transpose",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pick",
            Op::ShiftRows { .. } => "shift_rows",
            Op::SelectRows { .. } => "select_rows",
            Op::CifWeights { .. } => "cif_weights",
            Op::StraightThrough { .. } => "straight_through",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
    first_nonfinite: Option<(usize, &'static str)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            first_nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Runs `f` with gradient recording disabled; everything it creates is a constant.
    pub fn no_grad<T>(&mut self, f: impl FnOnce(&mut Graph) -> T) -> T {
        let prev = std::mem::replace(&mut self.recording, false);
        let out = f(self);
        self.recording = prev;
        out
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Name of the first operation that produced a non-finite value, if any.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.first_nonfinite
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        if self.first_nonfinite.is_none() && !value.all_finite() {
            self.first_nonfinite = Some((self.nodes.len(), op.name()));
        }
        let needs_grad = needs_grad && self.recording;
        let op = if needs_grad { op } else { keep_param(op) };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ---- leaves ----

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = !store.is_frozen(id);
        self.push_shared(store.shared(id), Op::Param(id), trainable)
    }

    /// Copy of `v` cut from the tape (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.push_shared(value, Op::Leaf, false)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        gemm(av, false, bv, false, &mut out, 0.0);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul { a, b, trans_b: false }, ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        gemm(av, false, bv, true, &mut out, 0.0);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul { a, b, trans_b: true }, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let ng = self.ng(&[x]);
        self.push(out, Op::Transpose(x), ng)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `x (n x d) + row (1 x d)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a single row");
        assert_eq!(xv.cols(), rv.cols(), "add_row width mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.row(0)) {
                *o += b;
            }
        }
        let ng = self.ng(&[x, row]);
        self.push(out, Op::AddRow { x, row }, ng)
    }

    /// `x (n x d) ⊙ row (1 x d)` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.rows(), 1, "mul_row expects a single row");
        assert_eq!(xv.cols(), rv.cols(), "mul_row width mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.row(0)) {
                *o *= b;
            }
        }
        let ng = self.ng(&[x, row]);
        self.push(out, Op::MulRow { x, row }, ng)
    }

    /// `x * s` where `s` is a 1x1 node.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let out = self.value(x).map(|v| v * sv);
        let ng = self.ng(&[x, s]);
        self.push(out, Op::MulScalarVar { x, s }, ng)
    }

    /// Elementwise product with a constant tensor (masks, fixed weights).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        let out = self.value(x).zip_map(&c, |a, b| a * b);
        let ng = self.ng(&[x]);
        self.push(out, Op::MulConst { x, c: Arc::new(c) }, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale { x, s }, ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let ng = self.ng(&[x]);
        self.push(out, Op::AddScalar(x), ng)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / v);
        let ng = self.ng(&[x]);
        self.push(out, Op::Recip(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let ng = self.ng(&[x]);
        self.push(out, Op::Abs(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let ng = self.ng(&[x]);
        self.push(out, Op::Exp(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(out, Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `n x d -> 1 x d`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, v) in out.row_mut(0).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::SumCols(x), ng)
    }

    // ---- row-wise normalizers ----

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x), 1.0);
        let ng = self.ng(&[x]);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::LogSoftmaxRows(x), ng)
    }

    /// Row-wise layer normalization with learned gain and bias (both `1 x d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut xhat = Tensor::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for r in 0..n {
            for ((o, g), b) in out.row_mut(r).iter_mut().zip(gv.row(0)).zip(bv.row(0)) {
                *o = *o * g + b;
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Scales each row to unit L2 norm. Rows must be non-zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::L2NormalizeRows { x, norms }, ng)
    }

    // ---- structural ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            let w = pv.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Tensor::from_vec(rows, cols, data).expect("consistent concat");
        let ng = self.ng(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        let ng = self.ng(&[x]);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    /// Row lookup (embedding gather); indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = self.value(x).select_rows(idx);
        let ng = self.ng(&[x]);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    /// `out[i] = x[i, idx[i]]` as an `n x 1` column.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), idx.len(), "pick length mismatch");
        let data = idx.iter().enumerate().map(|(r, &c)| xv.get(r, c)).collect();
        let out = Tensor::from_vec(idx.len(), 1, data).expect("column");
        let ng = self.ng(&[x]);
        self.push(out, Op::Pick { x, idx: idx.to_vec() }, ng)
    }

    /// `out[i] = x[i - offset]`, zero where the source row is out of range.
    pub fn shift_rows(&mut self, x: Var, offset: isize) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            let src = i as isize - offset;
            if src >= 0 && (src as usize) < n {
                out.row_mut(i).copy_from_slice(xv.row(src as usize));
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::ShiftRows { x, offset }, ng)
    }

    /// Row `i` comes from `b` where `take_b[i]`, from `a` otherwise.
    pub fn select_rows(&mut self, a: Var, b: Var, take_b: &[bool]) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "select_rows shape mismatch");
        assert_eq!(av.rows(), take_b.len(), "select_rows mask length");
        let mut out = av.clone();
        for (i, &tb) in take_b.iter().enumerate() {
            if tb {
                out.row_mut(i).copy_from_slice(bv.row(i));
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(
            out,
            Op::SelectRows {
                a,
                b,
                take_b: take_b.to_vec(),
            },
            ng,
        )
    }

    // ---- model-specific primitives ----

    /// Integrate-and-fire contribution matrix (`n_tokens x t`) for a `t x 1` weight column.
    ///
    /// Entry `(k, i)` is the length of the overlap between frame `i`'s cumulative
    /// weight interval `[c_{i-1}, c_i]` and token `k`'s interval `[k·beta, (k+1)·beta]`.
    /// This is exactly accumulate-until-threshold with the boundary frame split and
    /// its remainder carried into the next token.
    pub fn cif_weights(&mut self, alpha: Var, beta: f64, n_tokens: usize) -> Var {
        let av = self.value(alpha);
        assert_eq!(av.cols(), 1, "cif weights expect a column");
        let t = av.rows();
        let mut cum = Vec::with_capacity(t + 1);
        cum.push(0.0);
        let mut acc = 0.0;
        for &a in av.data() {
            acc += a;
            cum.push(acc);
        }
        let mut out = Tensor::zeros(n_tokens, t);
        for i in 0..t {
            let (lo, hi) = (cum[i], cum[i + 1]);
            if hi <= lo {
                continue;
            }
            let first = (lo / beta).floor().max(0.0) as usize;
            let mut k = first;
            while k < n_tokens {
                let (tok_lo, tok_hi) = (k as f64 * beta, (k + 1) as f64 * beta);
                if tok_lo >= hi {
                    break;
                }
                let overlap = hi.min(tok_hi) - lo.max(tok_lo);
                if overlap > 0.0 {
                    out.set(k, i, overlap);
                }
                k += 1;
            }
        }
        let ng = self.ng(&[alpha]);
        self.push(out, Op::CifWeights { alpha, beta, cum }, ng)
    }

    /// Straight-through quantizer: forward is the exact one-hot of each row's
    /// argmax; backward is the Jacobian of `softmax(d / gamma)`.
    pub fn straight_through(&mut self, d: Var, gamma: f64) -> Var {
        let dv = self.value(d);
        let soft = softmax_rows(dv, gamma);
        let mut out = Tensor::zeros(dv.rows(), dv.cols());
        for r in 0..dv.rows() {
            out.set(r, argmax(dv.row(r)), 1.0);
        }
        let ng = self.ng(&[d]);
        self.push(out, Op::StraightThrough { d, gamma, soft }, ng)
    }

    // ---- backward ----

    /// Reverse pass from a scalar node seeded with 1.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Reverse pass with explicit upstream gradients for any set of nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.shape(), "seed shape mismatch");
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads, v.0, g.clone());
            }
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.nodes[v.0].needs_grad {
            accumulate(grads, v.0, g);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &*node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    // y = a·b: da = g·bᵀ ; y = a·bᵀ: da = g·b
                    gemm(g, false, bv, !*trans_b, &mut da, 0.0);
                    self.acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    if *trans_b {
                        gemm(g, true, av, false, &mut db, 0.0);
                    } else {
                        gemm(av, true, g, false, &mut db, 0.0);
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow { x, row } => {
                self.acc(grads, *x, g.clone());
                if self.wants(*row) {
                    self.acc(grads, *row, col_sums(g));
                }
            }
            Op::MulRow { x, row } => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        for (o, b) in dx.row_mut(r).iter_mut().zip(rv.row(0)) {
                            *o *= b;
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.wants(*row) {
                    self.acc(grads, *row, col_sums(&g.zip_map(xv, |a, b| a * b)));
                }
            }
            Op::MulScalarVar { x, s } => {
                let sv = self.scalar(*s);
                self.acc(grads, *x, g.map(|v| v * sv));
                if self.wants(*s) {
                    let ds: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    self.acc(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::MulConst { x, c } => self.acc(grads, *x, g.zip_map(c, |a, b| a * b)),
            Op::Scale { x, s } => self.acc(grads, *x, g.map(|v| v * s)),
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::Recip(x) => self.acc(grads, *x, g.zip_map(y, |gv, yv| -gv * yv * yv)),
            Op::Abs(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, g.zip_map(xv, |gv, v| gv * sign(v)));
            }
            Op::Exp(x) => self.acc(grads, *x, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Sigmoid(x) => self.acc(grads, *x, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.acc(
                    grads,
                    *x,
                    g.zip_map(xv, |gv, v| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                    }),
                );
            }
            Op::SumAll(x) => {
                let (r, c) = self.shape(*x);
                self.acc(grads, *x, Tensor::full(r, c, g.item()));
            }
            Op::SumCols(x) => {
                let (r, c) = self.shape(*x);
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i).copy_from_slice(g.row(0));
                }
                self.acc(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => self.acc(grads, *x, softmax_backward(y, g, 1.0)),
            Op::LogSoftmaxRows(x) => {
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (d, lp) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *d -= lp.exp() * gsum;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let (n, d) = xhat.shape();
                if self.wants(*gain) {
                    let mut dg = Tensor::zeros(1, d);
                    for r in 0..n {
                        for ((o, gr), xh) in dg.row_mut(0).iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gr * xh;
                        }
                    }
                    self.acc(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    self.acc(grads, *bias, col_sums(g));
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(n, d);
                    let df = d as f64;
                    for r in 0..n {
                        let dxhat: Vec<f64> = g.row(r).iter().zip(gv.row(0)).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        for ((o, dh), xh) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                            *o = inv / df * (df * dh - s1 - xh * s2);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (d, yv) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *d = (*d - yv * dot) / norms[r];
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Transpose(x) => self.acc(grads, *x, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, w) = self.shape(p);
                    if self.wants(p) {
                        let mut dp = Tensor::zeros(r, w);
                        for i in 0..r {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                        }
                        self.acc(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = self.shape(p).0;
                    if self.wants(p) {
                        self.acc(grads, p, g.slice_rows(off, r));
                    }
                    off += r;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let w = g.cols();
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                self.acc(grads, *x, dx);
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.shape(*x);
                let mut dx = Tensor::zeros(r, c);
                for i in 0..g.rows() {
                    dx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.acc(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = self.shape(*x);
                let mut dx = Tensor::zeros(r, c);
                for (i, &src) in idx.iter().enumerate() {
                    for (o, v) in dx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Pick { x, idx } => {
                let (r, c) = self.shape(*x);
                let mut dx = Tensor::zeros(r, c);
                for (i, &col) in idx.iter().enumerate() {
                    dx.set(i, col, g.get(i, 0));
                }
                self.acc(grads, *x, dx);
            }
            Op::ShiftRows { x, offset } => {
                let (n, d) = self.shape(*x);
                let mut dx = Tensor::zeros(n, d);
                for i in 0..n {
                    let src = i as isize - offset;
                    if src >= 0 && (src as usize) < n {
                        dx.row_mut(src as usize).copy_from_slice(g.row(i));
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::SelectRows { a, b, take_b } => {
                let (n, d) = g.shape();
                let mut da = Tensor::zeros(n, d);
                let mut db = Tensor::zeros(n, d);
                for (i, &tb) in take_b.iter().enumerate() {
                    let dst = if tb { &mut db } else { &mut da };
                    dst.row_mut(i).copy_from_slice(g.row(i));
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::CifWeights { alpha, beta, cum } => {
                let t = cum.len() - 1;
                let n_tokens = g.rows();
                // d out[k][i] / d c_i = 1 while c_i lies strictly inside token k's interval;
                // c_i is the upper end of frame i and the lower end of frame i + 1.
                let mut dcum = vec![0.0; t + 1];
                for (i, dc) in dcum.iter_mut().enumerate().skip(1) {
                    let c = cum[i];
                    let k = (c / beta).floor();
                    if k < 0.0 || k as usize >= n_tokens || c == k * beta {
                        continue;
                    }
                    let k = k as usize;
                    let mut v = g.get(k, i - 1);
                    if i < t {
                        v -= g.get(k, i);
                    }
                    *dc = v;
                }
                let mut dalpha = Tensor::zeros(t, 1);
                let mut suffix = 0.0;
                for j in (0..t).rev() {
                    suffix += dcum[j + 1];
                    dalpha.set(j, 0, suffix);
                }
                self.acc(grads, *alpha, dalpha);
            }
            Op::StraightThrough { d, gamma, soft } => {
                self.acc(grads, *d, softmax_backward(soft, g, *gamma));
            }
        }
    }
}

/// Constants keep only their `Param` tag (for gradient taps); other ops are dropped.
fn keep_param(op: Op) -> Op {
    match op {
        Op::Param(id) => Op::Param(id),
        _ => Op::Leaf,
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row softmax of `x / temperature`.
pub fn softmax_rows(x: &Tensor, temperature: f64) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - m) / temperature).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// VJP of `p = softmax(x / temperature)` given upstream `g`.
fn softmax_backward(p: &Tensor, g: &Tensor, temperature: f64) -> Tensor {
    let mut dx = Tensor::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let dot: f64 = g.row(r).iter().zip(p.row(r)).map(|(a, b)| a * b).sum();
        for ((o, gv), pv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(p.row(r)) {
            *o = pv * (gv - dot) / temperature;
        }
    }
    dx
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seeded output with respect to node `v` (a gradient tap).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients summed per parameter across every node that referenced it.
    pub fn param_grads(&self, graph: &Graph) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for (i, node) in graph.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                match out.iter_mut().find(|(p, _)| p == id) {
                    Some((_, acc)) => acc.add_assign(g),
                    None => out.push((*id, g.clone())),
                }
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_grad_nodes_are_constants() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let y = g.no_grad(|g| g.scale(x, 3.0));
        assert!(!g.requires_grad(y));
        let z = g.mul(x, y);
        let grads = g.backward(z);
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
        assert!(grads.wrt(y).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let grads = g.backward(y);
        assert_eq!(grads.wrt(x).unwrap().item(), 3.0);
    }

    #[test]
    fn straight_through_forward_is_one_hot() {
        let mut g = Graph::new();
        let d = g.variable(Tensor::from_rows(&[vec![2.0, 1.0], vec![0.0, 0.0]]).unwrap());
        let q = g.straight_through(d, 0.1);
        assert_eq!(g.value(q).data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn nonfinite_values_are_flagged() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let _ = g.recip(x);
        assert_eq!(g.first_nonfinite().map(|(_, n)| n), Some("recip"));
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        use super::super::params::ParamGroup;
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::TextEncoder, Tensor::scalar(1.5));
        let b = store.add("b", ParamGroup::Decoder, Tensor::scalar(2.0));
        store.freeze(ParamGroup::TextEncoder);
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let vb = g.param(&store, b);
        let y = g.mul(va, vb);
        let grads = g.backward(y);
        let pg = grads.param_grads(&g);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].0, b);
        assert_eq!(pg[0].1.item(), 1.5);
    }
}
