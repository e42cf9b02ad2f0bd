//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive as it is evaluated. Nodes are
//! appended in evaluation order, so walking the tape backwards is a
//! reverse topological order and fan-out gradients accumulate by addition.
//!
//! Every primitive checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] naming the primitive.
//!
//! The graph also folds the branch taken at every non-smooth point (ReLU
//! masks, max-pool winners) into a running [`Graph::signature`]. Finite
//! difference checks use it to tell a genuine gradient bug from a probe that
//! stepped across a kink.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    ReplaceRows(Var, Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    SumAll(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
    no_grad: bool,
    signature: u64,
}

const NORM_FLOOR: f64 = 1e-12;

fn fold(sig: u64, bit: u64) -> u64 {
    (sig ^ bit).wrapping_mul(0x0000_0100_0000_01B3)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            signature: 0xCBF2_9CE4_8422_2325,
            ..Default::default()
        }
    }

    /// A graph whose parameters are recorded as constants. Used for the
    /// teacher branch and for evaluation.
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Hash of the branch taken at every non-smooth primitive so far.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad: requires_grad && !self.no_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// A leaf that gradients are tracked for (gradient-check inputs).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t, Op::Leaf, true)
    }

    /// Binds a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push("param", t, Op::Leaf, true)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// A stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push("matmul_t", out, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    /// Adds a `1 × c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xt, rt) = (self.value(x), self.value(row));
        if rt.rows() != 1 || rt.cols() != xt.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", xt.shape(), rt.shape()),
            ));
        }
        let c = xt.cols();
        let mut out = xt.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += rt.data()[i % c];
        }
        let rg = self.rg(&[x, row]);
        self.push("add_row", out, Op::AddRow(x, row), rg)
    }

    /// Scales row `i` of `x` by `col[i]` (`col` is `r × 1`).
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (xt, ct) = (self.value(x), self.value(col));
        if ct.cols() != 1 || ct.rows() != xt.rows() {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} * col {:?}", xt.shape(), ct.shape()),
            ));
        }
        let c = xt.cols();
        let mut out = xt.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= ct.data()[i / c];
        }
        let rg = self.rg(&[x, col]);
        self.push("mul_col", out, Op::MulCol(x, col), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push("scale", out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push("add_scalar", out, Op::AddScalar(x), rg)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let n = self.scale(x, -1.0)?;
        self.add_scalar(n, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let mut sig = self.signature;
        for &v in xt.data() {
            sig = fold(sig, (v > 0.0) as u64 + 1);
        }
        let out = xt.map(|v| v.max(0.0));
        self.signature = sig;
        let rg = self.rg(&[x]);
        self.push("relu", out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(&[x]);
        self.push("sigmoid", out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push("tanh", out, Op::Tanh(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push("exp", out, Op::Exp(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        let rg = self.rg(&[x]);
        self.push("ln", out, Op::Ln(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push("square", out, Op::Square(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        let rg = self.rg(parts);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&ts)?;
        let rg = self.rg(parts);
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if start + len > xt.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{} of {} columns", start + len, xt.cols()),
            ));
        }
        let mut data = Vec::with_capacity(xt.rows() * len);
        for r in 0..xt.rows() {
            data.extend_from_slice(&xt.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(xt.rows(), len, data)?;
        let rg = self.rg(&[x]);
        self.push("slice_cols", out, Op::SliceCols(x, start), rg)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if start + len > xt.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{} of {} rows", start + len, xt.rows()),
            ));
        }
        let c = xt.cols();
        let out = Tensor::matrix(len, c, xt.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[x]);
        self.push("slice_rows", out, Op::SliceRows(x, start), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xt.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of {} rows", xt.rows()),
            ));
        }
        let out = xt.gather_rows(idx);
        let rg = self.rg(&[x]);
        self.push("gather_rows", out, Op::GatherRows(x, idx.to_vec()), rg)
    }

    /// `out[idx[i]] += x[i]` into an `n_out`-row zero matrix.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let xt = self.value(x);
        if idx.len() != xt.rows() || idx.iter().any(|&i| i >= n_out) {
            return Err(Error::shape("scatter_add_rows", "bad index list"));
        }
        let c = xt.cols();
        let mut out = Tensor::zeros(&[n_out, c]);
        for (r, &dst) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(dst).iter_mut().zip(xt.row(r)) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        self.push("scatter_add_rows", out, Op::ScatterAddRows(x, idx.to_vec()), rg)
    }

    /// Copy of `base` with row `idx[i]` replaced by row `i` of `rows`.
    pub fn replace_rows(&mut self, base: Var, rows: Var, idx: &[usize]) -> Result<Var> {
        let (bt, rt) = (self.value(base), self.value(rows));
        if rt.rows() != idx.len() || rt.cols() != bt.cols() || idx.iter().any(|&i| i >= bt.rows()) {
            return Err(Error::shape("replace_rows", "bad replacement"));
        }
        let mut out = bt.clone();
        for (r, &dst) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(rt.row(r));
        }
        let rg = self.rg(&[base, rows]);
        self.push("replace_rows", out, Op::ReplaceRows(base, rows, idx.to_vec()), rg)
    }

    /// Column-wise max over the rows of each segment. `seg[i]` is the
    /// segment of row `i`; every segment in `0..n_seg` must be nonempty.
    pub fn segment_max(&mut self, x: Var, seg: &[usize], n_seg: usize) -> Result<Var> {
        let xt = self.value(x);
        if seg.len() != xt.rows() {
            return Err(Error::shape("segment_max", "segment list length"));
        }
        let c = xt.cols();
        let mut best = vec![f64::NEG_INFINITY; n_seg * c];
        let mut arg = vec![usize::MAX; n_seg * c];
        for (r, &s) in seg.iter().enumerate() {
            if s >= n_seg {
                return Err(Error::shape("segment_max", "segment id out of range"));
            }
            for (j, &v) in xt.row(r).iter().enumerate() {
                if v > best[s * c + j] {
                    best[s * c + j] = v;
                    arg[s * c + j] = r;
                }
            }
        }
        if arg.contains(&usize::MAX) {
            return Err(Error::shape("segment_max", "empty segment"));
        }
        let mut sig = self.signature;
        for &a in &arg {
            sig = fold(sig, a as u64);
        }
        self.signature = sig;
        let out = Tensor::matrix(n_seg, c, best)?;
        let rg = self.rg(&[x]);
        self.push("segment_max", out, Op::SegmentMax(x, arg), rg)
    }

    /// Sum of all entries, as a `1 × 1` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sums, `r × 1`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let data: Vec<f64> = (0..xt.rows()).map(|r| xt.row(r).iter().sum()).collect();
        let out = Tensor::matrix(xt.rows(), 1, data)?;
        let rg = self.rg(&[x]);
        self.push("sum_cols", out, Op::SumCols(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push("softmax_rows", out, Op::SoftmaxRows(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let mut out = xt.clone();
        for r in 0..xt.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(x), rg)
    }

    /// Row-wise L2 normalization (norms floored at 1e-12). A floored row is
    /// a non-smooth point and enters the signature.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let mut out = xt.clone();
        let mut norms = Vec::with_capacity(xt.rows());
        let mut sig = self.signature;
        for r in 0..xt.rows() {
            let row = out.row_mut(r);
            let raw = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            sig = fold(sig, (raw < NORM_FLOOR) as u64 + 1);
            let n = raw.max(NORM_FLOOR);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.signature = sig;
        let rg = self.rg(&[x]);
        self.push("normalize_rows", out, Op::NormalizeRows(x, norms), rg)
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            self.backprop(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let params = self
            .params
            .iter()
            .map(|(name, &v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    acc(*a, g.matmul_t(bt)?);
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, at.t_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    acc(*a, g.matmul(bt)?);
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, g.t_matmul(at)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(bt, |gv, bv| gv * bv));
                acc(*b, g.zip_map(at, |gv, av| gv * av));
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                let c = g.cols();
                let mut gr = vec![0.0; c];
                for r in 0..g.rows() {
                    for (s, v) in gr.iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                acc(*row, Tensor::matrix(1, c, gr)?);
            }
            Op::MulCol(x, col) => {
                let (xt, ct) = (self.value(*x), self.value(*col));
                let c = xt.cols();
                let mut gx = g.clone();
                for (i, v) in gx.data_mut().iter_mut().enumerate() {
                    *v *= ct.data()[i / c];
                }
                acc(*x, gx);
                let gc: Vec<f64> = (0..xt.rows())
                    .map(|r| g.row(r).iter().zip(xt.row(r)).map(|(a, b)| a * b).sum())
                    .collect();
                acc(*col, Tensor::matrix(xt.rows(), 1, gc)?);
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Relu(x) => {
                let xt = self.value(*x);
                acc(*x, g.zip_map(xt, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Sigmoid(x) => acc(*x, g.zip_map(y, |gv, s| gv * s * (1.0 - s))),
            Op::Tanh(x) => acc(*x, g.zip_map(y, |gv, t| gv * (1.0 - t * t))),
            Op::Exp(x) => acc(*x, g.zip_map(y, |gv, e| gv * e)),
            Op::Ln(x) => {
                let xt = self.value(*x);
                acc(*x, g.zip_map(xt, |gv, xv| gv / xv));
            }
            Op::Square(x) => {
                let xt = self.value(*x);
                acc(*x, g.zip_map(xt, |gv, xv| 2.0 * gv * xv));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut data = Vec::with_capacity(g.rows() * w);
                    for r in 0..g.rows() {
                        data.extend_from_slice(&g.row(r)[start..start + w]);
                    }
                    acc(p, Tensor::matrix(g.rows(), w, data)?);
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    let data = g.data()[start * c..(start + h) * c].to_vec();
                    acc(p, Tensor::matrix(h, c, data)?);
                    start += h;
                }
            }
            Op::SliceCols(x, start) => {
                let xt = self.value(*x);
                let mut gx = Tensor::zeros(xt.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                acc(*x, gx);
            }
            Op::SliceRows(x, start) => {
                let xt = self.value(*x);
                let mut gx = Tensor::zeros(xt.shape());
                let c = xt.cols();
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, gx);
            }
            Op::GatherRows(x, idx) => {
                let xt = self.value(*x);
                let mut gx = Tensor::zeros(xt.shape());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*x, gx);
            }
            Op::ScatterAddRows(x, idx) => acc(*x, g.gather_rows(idx)),
            Op::ReplaceRows(base, rows, idx) => {
                let mut gb = g.clone();
                for &dst in idx {
                    gb.row_mut(dst).iter_mut().for_each(|v| *v = 0.0);
                }
                acc(*base, gb);
                acc(*rows, g.gather_rows(idx));
            }
            Op::SegmentMax(x, arg) => {
                let xt = self.value(*x);
                let c = xt.cols();
                let mut gx = Tensor::zeros(xt.shape());
                for (k, &r) in arg.iter().enumerate() {
                    let j = k % c;
                    gx.data_mut()[r * c + j] += g.data()[k];
                }
                acc(*x, gx);
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::filled(self.value(*x).shape(), gv));
            }
            Op::SumCols(x) => {
                let xt = self.value(*x);
                let c = xt.cols();
                let mut gx = Tensor::zeros(xt.shape());
                for (i, v) in gx.data_mut().iter_mut().enumerate() {
                    *v = g.data()[i / c];
                }
                acc(*x, gx);
            }
            Op::SoftmaxRows(x) => {
                let mut gx = g.clone();
                for r in 0..g.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (o, (gv, p)) in gx.row_mut(r).iter_mut().zip(g.row(r).iter().zip(y.row(r))) {
                        *o = p * (gv - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let mut gx = g.clone();
                for r in 0..g.rows() {
                    let gs: f64 = g.row(r).iter().sum();
                    for (o, (gv, ly)) in gx.row_mut(r).iter_mut().zip(g.row(r).iter().zip(y.row(r))) {
                        *o = gv - ly.exp() * gs;
                    }
                }
                acc(*x, gx);
            }
            Op::NormalizeRows(x, norms) => {
                let mut gx = g.clone();
                for r in 0..g.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    let n = norms[r];
                    for (o, (gv, yv)) in gx.row_mut(r).iter_mut().zip(g.row(r).iter().zip(y.row(r))) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                acc(*x, gx);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: IndexMap<String, Tensor>,
}

/// Parameter name to gradient, in binding order.
pub type GradMap = IndexMap<String, Tensor>;

impl Gradients {
    /// Gradient with respect to any node, `None` if it was not reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every bound parameter; unreached ones are zero.
    pub fn params(&self) -> &GradMap {
        &self.params
    }

    pub fn into_params(self) -> GradMap {
        self.params
    }
}

/// Adds `src` into `dst`, inserting missing entries.
pub fn accumulate(dst: &mut GradMap, src: &GradMap) {
    for (k, g) in src {
        match dst.get_mut(k) {
            Some(d) => d.add_assign(g),
            None => {
                dst.insert(k.clone(), g.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn linear_loss_gradient_is_exact() {
        // loss = sum(W x) with W 2x3 stored as x(1x3) . Wt(3x2)
        let mut store = ParamStore::new();
        store.insert("w", t(3, 2, &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6])).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t(1, 3, &[1.0, 2.0, 3.0])).unwrap();
        let w = g.param(&store, "w").unwrap();
        let y = g.matmul(x, w).unwrap();
        let l = g.sum_all(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.params()["w"].data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn unreached_param_gets_zero() {
        let mut store = ParamStore::new();
        store.insert("a", t(1, 2, &[1.0, 2.0])).unwrap();
        store.insert("b", t(1, 2, &[3.0, 4.0])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let _b = g.param(&store, "b").unwrap();
        let l = g.sum_all(a).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.params()["b"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let a = g.input(t(1, 2, &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(a), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_trips() {
        let mut g = Graph::new();
        let a = g.input(t(1, 1, &[0.0])).unwrap();
        assert!(matches!(g.ln(a), Err(Error::NonFinite { op: "ln" })));
    }

    #[test]
    fn fan_out_sums_branches() {
        // f(x) = x*x + 3x via shared node vs duplicated leaves.
        let mut g = Graph::new();
        let x = g.input(t(1, 1, &[2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0).unwrap();
        let s = g.add(sq, lin).unwrap();
        let l = g.sum_all(s).unwrap();
        let shared = g.backward(l).unwrap().wrt(x).unwrap().data()[0];

        let mut g2 = Graph::new();
        let x1 = g2.input(t(1, 1, &[2.0])).unwrap();
        let x2 = g2.input(t(1, 1, &[2.0])).unwrap();
        let x3 = g2.input(t(1, 1, &[2.0])).unwrap();
        let sq = g2.mul(x1, x2).unwrap();
        let lin = g2.scale(x3, 3.0).unwrap();
        let s = g2.add(sq, lin).unwrap();
        let l = g2.sum_all(s).unwrap();
        let gr = g2.backward(l).unwrap();
        let split: f64 = [x1, x2, x3].iter().map(|&v| gr.wrt(v).unwrap().data()[0]).sum();
        assert_eq!(shared, split);
        assert_eq!(shared, 7.0);
    }

    #[test]
    fn no_grad_graph_has_no_gradient_flow() {
        let mut store = ParamStore::new();
        store.insert("a", t(1, 2, &[1.0, 2.0])).unwrap();
        let mut g = Graph::no_grad();
        let a = g.param(&store, "a").unwrap();
        assert!(!g.requires_grad(a));
    }

    #[test]
    fn relu_signature_tracks_mask() {
        let mut g1 = Graph::new();
        let a = g1.input(t(1, 2, &[1.0, -1.0])).unwrap();
        g1.relu(a).unwrap();
        let mut g2 = Graph::new();
        let b = g2.input(t(1, 2, &[1.0, 1.0])).unwrap();
        g2.relu(b).unwrap();
        assert_ne!(g1.signature(), g2.signature());
    }
}
