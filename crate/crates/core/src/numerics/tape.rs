//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its vector-Jacobian product. [`Tape::backward`] walks the nodes
//! in reverse order from a scalar root. Gradients persist on the tape and
//! accumulate over repeated calls until [`Tape::zero_grad`].

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::flops::{FlopKind, FlopLedger};
use super::kernels;
use super::params::{ParamId, ParamStore};
use super::rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// sqrt(2/pi), the tanh-approximation GELU constant.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    MulColumn(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    IndexAddRows(Vec<(Var, Vec<usize>)>),
    SegmentMean {
        x: Var,
        labels: Vec<usize>,
        counts: Vec<usize>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

const STREAM_OP_BASE: u64 = 0x5EED_0000;

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    flops: FlopLedger,
    flop_kind: FlopKind,
    mode: Mode,
    seed: u64,
    step: u64,
    stream_counter: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// An evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Tape::with_mode(Mode::Eval, 0, 0)
    }

    /// A training-mode tape whose random streams derive from `(seed, op id, step)`.
    pub fn training(seed: u64, step: u64) -> Self {
        Tape::with_mode(Mode::Train, seed, step)
    }

    pub fn with_mode(mode: Mode, seed: u64, step: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            flops: FlopLedger::new(),
            flop_kind: FlopKind::Other,
            mode,
            seed,
            step,
            stream_counter: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> &FlopLedger {
        &self.flops
    }

    /// Sets the kind subsequent matrix products are booked under; returns the previous one.
    pub fn set_flop_kind(&mut self, kind: FlopKind) -> FlopKind {
        std::mem::replace(&mut self.flop_kind, kind)
    }

    /// Next counter-based random stream on this tape.
    pub fn next_stream(&mut self) -> ChaCha8Rng {
        let id = STREAM_OP_BASE + self.stream_counter;
        self.stream_counter += 1;
        rng::stream(self.seed, id, self.step)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad, None)
    }

    fn push_shared(
        &mut self,
        value: Arc<Tensor>,
        op: Op,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- leaves --------------------------------------------------------

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Records a parameter as a leaf. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push_shared(Arc::clone(&p.value), Op::Leaf, !p.frozen, Some(id))
    }

    /// Adds this tape's gradients of parameter leaves into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                store.accumulate_grad(id, g);
            }
        }
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims();
        let (k2, n) = self.value(b).dims();
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims {m}x{k} * {k2}x{n}"
            )));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.flops.record_matmul(self.flop_kind, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    /// `x * w (+ b)` with `w: [in x out]` and an optional `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ---- elementwise -----------------------------------------------------

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).dims(),
                self.value(b).dims()
            )));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check_same(a, b, what)?;
        let (r, c) = self.value(a).dims();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, c, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a length-`c` bias to every row of an `r x c` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims();
        if self.value(b).numel() != c {
            return Err(Error::shape(format!(
                "bias of {} values for {} columns",
                self.value(b).numel(),
                c
            )));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        if c > 0 {
            for row in out.chunks_exact_mut(c) {
                for (v, bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::AddBias(x, b), rg))
    }

    /// Scales row `i` of `x: [r x c]` by `s[i]`, with `s: [r x 1]`.
    pub fn mul_column(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims();
        if self.value(s).dims() != (r, 1) {
            return Err(Error::shape(format!(
                "row scale {:?} for {r}x{c}",
                self.value(s).dims()
            )));
        }
        let scale = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        if c > 0 {
            for (row, &sv) in out.chunks_exact_mut(c).zip(scale) {
                row.iter_mut().for_each(|v| *v *= sv);
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MulColumn(x, s), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// Tanh-approximation GELU: `0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_scalar, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus_scalar, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    // ---- row-wise normalizations ------------------------------------------

    fn check_finite(&self, x: Var, what: &str) -> Result<()> {
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("{what}: NaN input")));
        }
        Ok(())
    }

    /// Softmax of each row, with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite(x, "softmax_rows")?;
        let t = softmax_rows_tensor(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(t, Op::SoftmaxRows(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite(x, "log_softmax_rows")?;
        let (r, c) = self.value(x).dims();
        let lse = logsumexp_rows_values(self.value(x));
        let mut out = self.value(x).data().to_vec();
        if c > 0 {
            for (row, l) in out.chunks_exact_mut(c).zip(&lse) {
                row.iter_mut().for_each(|v| *v -= l);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::LogSoftmaxRows(x), rg))
    }

    /// `[r x c] -> [r x 1]` stable log-sum-exp of each row.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite(x, "logsumexp_rows")?;
        let lse = logsumexp_rows_values(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(Tensor::column(&lse), Op::LogSumExpRows(x), rg))
    }

    /// Per-row standardization followed by the affine `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims();
        if c == 0 {
            return Err(Error::shape("layer_norm over zero columns"));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(format!(
                "layer_norm affine sizes {} / {} for {} columns",
                self.value(gamma).numel(),
                self.value(beta).numel(),
                c
            )));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} not in [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let mut rng = self.next_stream();
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let (r, c) = self.value(x).dims();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::Dropout(x, mask), rg))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `[r x c] -> [r x 1]` row sums.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let sums: Vec<f64> = self.value(x).row_iter().map(|r| r.iter().sum()).collect();
        let sums = if self.value(x).numel() == 0 {
            vec![0.0; self.value(x).rows()]
        } else {
            sums
        };
        let rg = self.rg(x);
        self.push(Tensor::column(&sums), Op::SumCols(x), rg)
    }

    /// `[r x c] -> [1 x c]` column means.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims();
        let mut out = vec![0.0; c];
        for row in self.value(x).row_iter() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(x);
        self.push(Tensor::row(&out), Op::MeanRows(x), rg)
    }

    // ---- indexing ----------------------------------------------------------

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::shape(format!("row {i} out of {r}")));
            }
            out.extend_from_slice(self.value(x).row_slice(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(idx.len(), c, out)?,
            Op::GatherRows(x, idx.to_vec()),
            rg,
        ))
    }

    /// Picks `x[i, cols[i]]` for every row: `[r x c] -> [r x 1]`.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims();
        if cols.len() != r {
            return Err(Error::shape(format!("{} picks for {r} rows", cols.len())));
        }
        let mut out = Vec::with_capacity(r);
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(Error::shape(format!("column {j} out of {c}")));
            }
            out.push(self.value(x).get(i, j));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::column(&out), Op::PickCols(x, cols.to_vec()), rg))
    }

    /// Starts from an `rows x c` zero matrix and, part by part in order, adds
    /// row `t` of each part into output row `idx[t]`.
    pub fn index_add_rows(&mut self, rows: usize, cols: usize, parts: &[(Var, Vec<usize>)]) -> Result<Var> {
        let mut out = vec![0.0; rows * cols];
        let mut rg = false;
        for (v, idx) in parts {
            let t = self.value(*v);
            if t.cols() != cols || t.rows() != idx.len() {
                return Err(Error::shape(format!(
                    "index_add part {:?} with {} indices into {rows}x{cols}",
                    t.dims(),
                    idx.len()
                )));
            }
            for (src, &dst) in t.row_iter().zip(idx) {
                if dst >= rows {
                    return Err(Error::shape(format!("row {dst} out of {rows}")));
                }
                for (o, s) in out[dst * cols..(dst + 1) * cols].iter_mut().zip(src) {
                    *o += s;
                }
            }
            rg |= self.rg(*v);
        }
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::IndexAddRows(parts.to_vec()),
            rg,
        ))
    }

    /// Mean of the rows sharing each label: `[n x c] -> [segments x c]`.
    pub fn segment_mean(&mut self, x: Var, labels: &[usize], segments: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims();
        if labels.len() != r {
            return Err(Error::shape(format!("{} labels for {r} rows", labels.len())));
        }
        let mut counts = vec![0usize; segments];
        let mut out = vec![0.0; segments * c];
        for (row, &l) in self.value(x).row_iter().zip(labels) {
            if l >= segments {
                return Err(Error::shape(format!("label {l} out of {segments}")));
            }
            counts[l] += 1;
            for (o, v) in out[l * c..(l + 1) * c].iter_mut().zip(row) {
                *o += v;
            }
        }
        if let Some(k) = counts.iter().position(|&n| n == 0) {
            return Err(Error::invariant(format!("segment {k} has no members")));
        }
        for (k, &n) in counts.iter().enumerate() {
            out[k * c..(k + 1) * c].iter_mut().for_each(|o| *o /= n as f64);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(segments, c, out)?,
            Op::SegmentMean {
                x,
                labels: labels.to_vec(),
                counts,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims();
        if start + width > c {
            return Err(Error::shape(format!("columns {start}..{} of {c}", start + width)));
        }
        let mut out = Vec::with_capacity(r * width);
        for row in self.value(x).row_iter() {
            out.extend_from_slice(&row[start..start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(r, width, out)?, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::shape("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(r, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            return Err(Error::shape("concat_rows column mismatch"));
        }
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            r += self.value(p).rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from a scalar root into every node that requires grad.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).dims()
            )));
        }
        let n = root.0 + 1;
        let mut pending: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let (r, c) = self.value(root).dims();
        pending[root.0] = Some(Tensor::full(r, c, 1.0));
        for i in (0..n).rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut pending)?;
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn send(&self, pending: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut pending[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        let (r, c) = self.value(v).dims();
        Tensor::matrix(r, c, data).expect("gradient shaped like its value")
    }

    fn propagate(&self, i: usize, g: &Tensor, pending: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims();
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    let da = kernels::matmul_nt(gd, self.value(*b).data(), m, n, k);
                    self.send(pending, *a, Tensor::matrix(m, k, da)?);
                }
                if self.rg(*b) {
                    let db = kernels::matmul_tn(self.value(*a).data(), gd, k, m, n);
                    self.send(pending, *b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::Transpose(a) => self.send(pending, *a, g.transpose()),
            Op::Add(a, b) => {
                self.send(pending, *a, g.clone());
                self.send(pending, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(pending, *a, g.clone());
                self.send(pending, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let d = gd.iter().zip(bv).map(|(g, b)| g * b).collect();
                    self.send(pending, *a, self.like(*a, d));
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(av).map(|(g, a)| g * a).collect();
                    self.send(pending, *b, self.like(*b, d));
                }
            }
            Op::Div(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let d = gd.iter().zip(bv).map(|(g, b)| g / b).collect();
                    self.send(pending, *a, self.like(*a, d));
                }
                if self.rg(*b) {
                    let d = gd
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect();
                    self.send(pending, *b, self.like(*b, d));
                }
            }
            Op::AddBias(x, b) => {
                self.send(pending, *x, g.clone());
                if self.rg(*b) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.row_iter() {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.send(pending, *b, Tensor::new(shape, db)?);
                }
            }
            Op::MulColumn(x, s) => {
                let c = g.cols();
                let sv = self.value(*s).data();
                if self.rg(*x) {
                    let mut dx = gd.to_vec();
                    if c > 0 {
                        for (row, &k) in dx.chunks_exact_mut(c).zip(sv) {
                            row.iter_mut().for_each(|v| *v *= k);
                        }
                    }
                    self.send(pending, *x, self.like(*x, dx));
                }
                if self.rg(*s) {
                    let ds: Vec<f64> = if c == 0 {
                        vec![0.0; sv.len()]
                    } else {
                        g.row_iter()
                            .zip(self.value(*x).row_iter())
                            .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                            .collect()
                    };
                    self.send(pending, *s, Tensor::column(&ds));
                }
            }
            Op::Scale(x, s) => self.send(pending, *x, g.map(|v| v * s)),
            Op::AddScalar(x) => self.send(pending, *x, g.clone()),
            Op::Gelu(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &x)| g * gelu_grad_scalar(x))
                    .collect();
                self.send(pending, *x, self.like(*x, d));
            }
            Op::Sigmoid(x) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.send(pending, *x, self.like(*x, d));
            }
            Op::Softplus(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &x)| g * sigmoid_scalar(x))
                    .collect();
                self.send(pending, *x, self.like(*x, d));
            }
            Op::Exp(x) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                self.send(pending, *x, self.like(*x, d));
            }
            Op::Ln(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, x)| g / x)
                    .collect();
                self.send(pending, *x, self.like(*x, d));
            }
            Op::Sqrt(x) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g / (2.0 * y))
                    .collect();
                self.send(pending, *x, self.like(*x, d));
            }
            Op::ClampMin(x, floor) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &x)| if x > *floor { *g } else { 0.0 })
                    .collect();
                self.send(pending, *x, self.like(*x, d));
            }
            Op::SoftmaxRows(x) => {
                let c = g.cols();
                let mut d = vec![0.0; gd.len()];
                if c > 0 {
                    for ((dr, gr), yr) in d
                        .chunks_exact_mut(c)
                        .zip(gd.chunks_exact(c))
                        .zip(out.data().chunks_exact(c))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                }
                self.send(pending, *x, self.like(*x, d));
            }
            Op::LogSoftmaxRows(x) => {
                let c = g.cols();
                let mut d = vec![0.0; gd.len()];
                if c > 0 {
                    for ((dr, gr), yr) in d
                        .chunks_exact_mut(c)
                        .zip(gd.chunks_exact(c))
                        .zip(out.data().chunks_exact(c))
                    {
                        let gsum: f64 = gr.iter().sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv = gv - yv.exp() * gsum;
                        }
                    }
                }
                self.send(pending, *x, self.like(*x, d));
            }
            Op::LogSumExpRows(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.numel()];
                if c > 0 {
                    for (i, (dr, xr)) in d.chunks_exact_mut(c).zip(xv.row_iter()).enumerate() {
                        let l = out.data()[i];
                        for (dv, xv) in dr.iter_mut().zip(xr) {
                            *dv = gd[i] * (xv - l).exp();
                        }
                    }
                }
                self.send(pending, *x, self.like(*x, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = g.dims();
                let gamma_v = self.value(*gamma).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let gr = &gd[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gamma_v[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * gamma_v[j];
                            dx[i * c + j] = rstd[i] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    self.send(pending, *x, Tensor::matrix(r, c, dx)?);
                }
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += gd[i * c + j] * xhat[i * c + j];
                            db[j] += gd[i * c + j];
                        }
                    }
                    let gs = self.value(*gamma).shape().to_vec();
                    let bs = self.value(*beta).shape().to_vec();
                    self.send(pending, *gamma, Tensor::new(gs, dg)?);
                    self.send(pending, *beta, Tensor::new(bs, db)?);
                }
            }
            Op::Dropout(x, mask) => {
                let d = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.send(pending, *x, self.like(*x, d));
            }
            Op::Sum(x) => {
                let gv = gd[0];
                let n = self.value(*x).numel();
                self.send(pending, *x, self.like(*x, vec![gv; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let gv = gd[0] / n as f64;
                self.send(pending, *x, self.like(*x, vec![gv; n]));
            }
            Op::SumCols(x) => {
                let (r, c) = self.value(*x).dims();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = gd[i]);
                }
                self.send(pending, *x, self.like(*x, d));
            }
            Op::MeanRows(x) => {
                let (r, c) = self.value(*x).dims();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = gd[j] / r as f64;
                    }
                }
                self.send(pending, *x, self.like(*x, d));
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = self.value(*x).dims();
                let mut d = vec![0.0; r * c];
                for (t, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[src * c + j] += gd[t * c + j];
                    }
                }
                self.send(pending, *x, self.like(*x, d));
            }
            Op::PickCols(x, cols) => {
                let (r, c) = self.value(*x).dims();
                let mut d = vec![0.0; r * c];
                for (i, &j) in cols.iter().enumerate() {
                    d[i * c + j] = gd[i];
                }
                self.send(pending, *x, self.like(*x, d));
            }
            Op::IndexAddRows(parts) => {
                let c = g.cols();
                for (v, idx) in parts {
                    if !self.rg(*v) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(idx.len() * c);
                    for &dst in idx {
                        d.extend_from_slice(&gd[dst * c..(dst + 1) * c]);
                    }
                    self.send(pending, *v, self.like(*v, d));
                }
            }
            Op::SegmentMean { x, labels, counts } => {
                let c = g.cols();
                let mut d = Vec::with_capacity(labels.len() * c);
                for &l in labels {
                    let inv = 1.0 / counts[l] as f64;
                    d.extend(gd[l * c..(l + 1) * c].iter().map(|v| v * inv));
                }
                self.send(pending, *x, self.like(*x, d));
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.value(*x).dims();
                let w = g.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.send(pending, *x, self.like(*x, d));
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let (r, w) = self.value(p).dims();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        self.send(pending, p, self.like(p, d));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.rg(p) {
                        self.send(pending, p, self.like(p, gd[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
        }
        Ok(())
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn logsumexp_rows_values(x: &Tensor) -> Vec<f64> {
    if x.cols() == 0 {
        return vec![f64::NEG_INFINITY; x.rows()];
    }
    x.row_iter().map(logsumexp).collect()
}

/// Row softmax as a plain tensor function (no tape).
pub fn softmax_rows_tensor(x: &Tensor) -> Tensor {
    let (r, c) = x.dims();
    let mut out = x.data().to_vec();
    if c > 0 {
        for row in out.chunks_exact_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Tensor::matrix(r, c, out).expect("same shape")
}
