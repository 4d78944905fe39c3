use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{add_assign, gemm_nn, gemm_nt, gemm_tn, transpose};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean `[rows x cols]` attention mask; `true` marks an allowed entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Rc<[bool]>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed: Vec<bool> = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self {
            rows,
            cols,
            allowed: allowed.into(),
        }
    }

    pub fn causal(t: usize) -> Self {
        Self::from_fn(t, t, |i, j| j <= i)
    }

    /// Causal mask over several sequences stacked row-wise: row `i` may
    /// attend to row `j` only inside the same segment and when `j <= i`.
    pub fn block_causal(lengths: &[usize]) -> Self {
        let mut segment = Vec::new();
        for (s, &len) in lengths.iter().enumerate() {
            segment.extend(std::iter::repeat_n(s, len));
        }
        Self::from_fn(segment.len(), segment.len(), |i, j| {
            segment[i] == segment[j] && j <= i
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Add,
    Mul,
    Scale(f64),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    ScaleRows(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    WeightedSoftmax {
        scores: Var,
        weights: Var,
        // exp(s - max) / Z per entry
        unweighted: Vec<f64>,
    },
    LogSoftmax(Var, Option<Mask>),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embed(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// One recorded attention distribution, kept only when tracing is enabled.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub module: String,
    pub layer: usize,
    pub head: usize,
    pub weights: Tensor,
}

/// Define-by-run tape for reverse-mode differentiation.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    rng: Option<ChaCha8Rng>,
    backward_done: bool,
    trace: Option<Vec<AttentionRecord>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            rng: None,
            backward_done: false,
            trace: None,
        }
    }

    /// Training-mode graph with a seeded dropout stream.
    pub fn training(seed: u64) -> Self {
        Self {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<AttentionRecord> {
        self.trace.take().unwrap_or_default()
    }

    pub fn record_attention(&mut self, module: &str, layer: usize, head: usize, weights: Var) {
        if self.trace.is_some() {
            let weights = self.nodes[weights.0].value.clone();
            if let Some(trace) = self.trace.as_mut() {
                trace.push(AttentionRecord {
                    module: module.to_string(),
                    layer,
                    head,
                    weights,
                });
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sign of every ReLU input, in node order. Two evaluations with equal
    /// patterns lie on the same linear piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.nodes[a.0].value.data().iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    /// Drops every node created after the first `len`. Only valid before
    /// `backward`; handles into the dropped range become dangling.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|_, v| v.0 < len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last `backward` loss w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut value = value;
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_t", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("transpose", &s, &[]));
        }
        let out = transpose(self.data(a), s[0], s[1]);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![s[1], s[0]], out), Op::Transpose(a), rg))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let ta = self.value(a);
        let tb = self.value(b);
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            Tensor::from_parts(tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        };
        Ok((out, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a[m x n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if self.value(bias).numel() != n {
            return Err(Error::dim("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.data(bias);
        let mut out = self.data(a).to_vec();
        for r in 0..m {
            add_assign(&mut out[r * n..(r + 1) * n], b);
        }
        let rg = self.rg(a) || self.rg(bias);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect());
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect());
        let rg = self.rg(a);
        self.push(out, Op::AddConst(a), rg)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::dim("mul_const", self.shape(a), c.shape()));
        }
        let t = self.value(a);
        let data = t.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, c.data().to_vec()), rg))
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if factors.len() != m {
            return Err(Error::dim("scale_rows", self.shape(a), &[factors.len()]));
        }
        let mut out = self.data(a).to_vec();
        for (r, &f) in factors.iter().enumerate() {
            for v in &mut out[r * n..(r + 1) * n] {
                *v *= f;
            }
        }
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::ScaleRows(a, factors.to_vec()), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| x.max(0.0)).collect());
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| sigmoid(x)).collect());
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Dispatch form of the pointwise operations.
    pub fn elementwise(&mut self, kind: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if args.len() == n {
                Ok(())
            } else {
                Err(Error::Contract(format!("{kind:?} takes {n} argument(s), got {}", args.len())))
            }
        };
        match kind {
            Elementwise::Relu => arity(1).map(|_| self.relu(args[0])),
            Elementwise::Sigmoid => arity(1).map(|_| self.sigmoid(args[0])),
            Elementwise::Scale(c) => arity(1).map(|_| self.scale(args[0], c)),
            Elementwise::Add => {
                arity(2)?;
                self.add(args[0], args[1])
            }
            Elementwise::Mul => {
                arity(2)?;
                self.mul(args[0], args[1])
            }
        }
    }

    fn check_mask(&self, name: &'static str, a: Var, mask: Option<&Mask>) -> Result<()> {
        if let Some(m) = mask {
            let (r, c) = self.dims2(a);
            if m.shape() != [r, c] {
                return Err(Error::dim(name, self.shape(a), &m.shape()));
            }
        }
        Ok(())
    }

    /// Row-wise softmax; masked entries come out exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        self.check_mask("softmax_rows", a, mask)?;
        let (m, n) = self.dims2(a);
        let (out, _) = softmax_kernel(self.data(a), None, mask.map(Mask::as_slice), m, n)?;
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(a), rg))
    }

    /// `y_ij = w_ij exp(s_ij) / sum_l w_il exp(s_il)` over unmasked entries.
    ///
    /// Weights must be non-negative; a row whose weighted normalizer is zero
    /// is rejected.
    pub fn weighted_softmax_rows(&mut self, scores: Var, weights: Var, mask: Option<&Mask>) -> Result<Var> {
        if self.shape(scores) != self.shape(weights) {
            return Err(Error::dim("weighted_softmax_rows", self.shape(scores), self.shape(weights)));
        }
        self.check_mask("weighted_softmax_rows", scores, mask)?;
        let (m, n) = self.dims2(scores);
        let (out, unweighted) = softmax_kernel(
            self.data(scores),
            Some(self.data(weights)),
            mask.map(Mask::as_slice),
            m,
            n,
        )?;
        let rg = self.rg(scores) || self.rg(weights);
        let shape = self.shape(scores).to_vec();
        let op = Op::WeightedSoftmax {
            scores,
            weights,
            unweighted,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    /// Row-wise log-softmax; masked entries are reported as 0 and carry no
    /// gradient.
    pub fn log_softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        self.check_mask("log_softmax_rows", a, mask)?;
        let (m, n) = self.dims2(a);
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let ok = |j: usize| mask.is_none_or(|mk| mk.allows(r, j));
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if !ok(j) {
                    continue;
                }
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("log-softmax row {r}")));
                }
                max = max.max(v);
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateMask { row: r });
            }
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if ok(j) {
                    z += (v - max).exp();
                }
            }
            let lz = z.ln();
            for (j, &v) in row.iter().enumerate() {
                if ok(j) {
                    out[r * n + j] = v - max - lz;
                }
            }
        }
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(a, mask.cloned()), rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims2(x);
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut out = vec![0.0; m * d];
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = var + eps;
            let is = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let shape = self.shape(x).to_vec();
        let op = Op::LayerNorm {
            input: x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    /// Gathers rows of a `[V x d]` table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table);
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup with no ids".into()));
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { id, len: v });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::from_parts(vec![ids.len(), d], out), Op::Embed(table, ids.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let m = self.dims2(first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p);
            if r != m || self.shape(p).len() != 2 {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            total += c;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let c = self.dims2(p).1;
            let src = self.data(p);
            for r in 0..m {
                out[r * total + off..r * total + off + c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![m, total], out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let n = self.dims2(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p);
            if c != n || self.shape(p).len() != 2 {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.data(p));
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![rows, n], out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", self.shape(a), &[start, len]));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![m, len], out), Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if len == 0 || start + len > m {
            return Err(Error::dim("slice_rows", self.shape(a), &[start, len]));
        }
        let out = self.data(a)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![len, n], out), Op::SliceRows(a, start), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Inverted dropout; the identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be below 1")));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(a);
        };
        let keep = 1.0 - rate;
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let shape = self.shape(a).to_vec();
        self.mul_const(a, &Tensor::from_parts(shape, mask))
    }

    /// Reverse pass from a scalar loss. Leaves that require gradients hold
    /// `d loss / d leaf` afterwards; a graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let numel = node.value.numel();
                node.value.grad = Some(g.unwrap_or_else(|| vec![0.0; numel]));
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let t = &nodes[v.0].value;
            if !t.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; t.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let n = nodes[b.0].value.cols();
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(grads, *a, &mut |da| gemm_nt(g, bd, da, m, n, k));
                acc(grads, *b, &mut |db| gemm_tn(ad, g, db, m, k, n));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let n = nodes[b.0].value.rows();
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(grads, *a, &mut |da| gemm_nn(g, bd, da, m, n, k));
                acc(grads, *b, &mut |db| gemm_tn(g, ad, db, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let gt = transpose(g, n, m);
                acc(grads, *a, &mut |da| add_assign(da, &gt));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(grads, v, &mut |d| reduce_into(d, g));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(grads, *a, &mut |da| mul_grad_into(da, g, bd));
                acc(grads, *b, &mut |db| mul_grad_into(db, g, ad));
            }
            Op::AddRow(a, bias) => {
                acc(grads, *a, &mut |da| add_assign(da, g));
                let n = nodes[bias.0].value.numel();
                acc(grads, *bias, &mut |db| {
                    for row in g.chunks(n) {
                        add_assign(db, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(grads, *a, &mut |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += c * gv;
                }
            }),
            Op::AddConst(a) => acc(grads, *a, &mut |da| add_assign(da, g)),
            Op::MulConst(a, c) => acc(grads, *a, &mut |da| {
                for ((d, gv), cv) in da.iter_mut().zip(g).zip(c) {
                    *d += gv * cv;
                }
            }),
            Op::ScaleRows(a, f) => {
                let n = out.cols();
                acc(grads, *a, &mut |da| {
                    for (r, &fr) in f.iter().enumerate() {
                        for j in 0..n {
                            da[r * n + j] += g[r * n + j] * fr;
                        }
                    }
                })
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                acc(grads, *a, &mut |da| {
                    for ((d, gv), &xv) in da.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                })
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc(grads, *a, &mut |da| {
                    for ((d, gv), &yv) in da.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                })
            }
            Op::Softmax(a) => {
                let y = out.data();
                let n = out.cols();
                acc(grads, *a, &mut |da| softmax_backward(da, g, y, y, n));
            }
            Op::WeightedSoftmax {
                scores,
                weights,
                unweighted,
                ..
            } => {
                let y = out.data();
                let n = out.cols();
                acc(grads, *scores, &mut |ds| softmax_backward(ds, g, y, y, n));
                acc(grads, *weights, &mut |dw| softmax_backward(dw, g, y, unweighted, n));
            }
            Op::LogSoftmax(a, mask) => {
                let y = out.data();
                let n = out.cols();
                acc(grads, *a, &mut |da| {
                    for (r, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                        let ok = |j: usize| mask.as_ref().is_none_or(|mk| mk.allows(r, j));
                        let gsum: f64 = (0..n).filter(|&j| ok(j)).map(|j| gr[j]).sum();
                        for j in 0..n {
                            if ok(j) {
                                da[r * n + j] += gr[j] - yr[j].exp() * gsum;
                            }
                        }
                    }
                })
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gn = nodes[gain.0].value.data();
                acc(grads, *input, &mut |dx| {
                    let mut dxh = vec![0.0; d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dxh[j] = gr[j] * gn[j];
                            s1 += dxh[j];
                            s2 += dxh[j] * xr[j];
                        }
                        let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                        for j in 0..d {
                            dx[r * d + j] += is * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                });
                acc(grads, *gain, &mut |dg| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                });
                acc(grads, *bias, &mut |db| {
                    for gr in g.chunks(d) {
                        add_assign(db, gr);
                    }
                });
            }
            Op::Embed(table, ids) => {
                let d = out.cols();
                acc(grads, *table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_assign(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let m = out.rows();
                let mut off = 0;
                for p in parts {
                    let c = nodes[p.0].value.cols();
                    acc(grads, *p, &mut |dp| {
                        for r in 0..m {
                            add_assign(&mut dp[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(grads, *p, &mut |dp| add_assign(dp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let n = nodes[a.0].value.cols();
                let len = out.cols();
                acc(grads, *a, &mut |da| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_assign(&mut da[r * n + start..r * n + start + len], gr);
                    }
                })
            }
            Op::SliceRows(a, start) => {
                let n = out.cols();
                acc(grads, *a, &mut |da| add_assign(&mut da[start * n..start * n + g.len()], g));
            }
            Op::Reshape(a) => acc(grads, *a, &mut |da| add_assign(da, g)),
            Op::Sum(a) => acc(grads, *a, &mut |da| {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }),
        }
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

/// Shared forward for plain and weighted row softmax. Returns the output
/// and `exp(s - max) / Z`.
fn softmax_kernel(
    s: &[f64],
    w: Option<&[f64]>,
    mask: Option<&[bool]>,
    m: usize,
    n: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut out = vec![0.0; m * n];
    let mut unweighted = if w.is_some() { vec![0.0; m * n] } else { Vec::new() };
    let ok = |idx: usize| mask.is_none_or(|mk| mk[idx]);
    for r in 0..m {
        let base = r * n;
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if !ok(base + j) {
                continue;
            }
            if !s[base + j].is_finite() {
                return Err(Error::NonFinite(format!("softmax row {r}")));
            }
            max = max.max(s[base + j]);
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateMask { row: r });
        }
        let mut z = 0.0;
        for j in 0..n {
            if ok(base + j) {
                let e = (s[base + j] - max).exp();
                let a = match w {
                    Some(w) => w[base + j] * e,
                    None => e,
                };
                out[base + j] = a;
                if w.is_some() {
                    unweighted[base + j] = e;
                }
                z += a;
            }
        }
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("softmax row {r}")));
        }
        if z <= 0.0 {
            return Err(Error::Contract(format!("attention row {r} has a zero normalizer")));
        }
        for v in &mut out[base..base + n] {
            *v /= z;
        }
        if w.is_some() {
            for v in &mut unweighted[base..base + n] {
                *v /= z;
            }
        }
    }
    Ok((out, unweighted))
}

/// `d_j += u_j (g_j - sum_l y_l g_l)` per row.
fn softmax_backward(d: &mut [f64], g: &[f64], y: &[f64], u: &[f64], n: usize) {
    for r in 0..g.len() / n {
        let base = r * n;
        let dotp: f64 = (0..n).map(|j| y[base + j] * g[base + j]).sum();
        for j in 0..n {
            d[base + j] += u[base + j] * (g[base + j] - dotp);
        }
    }
}

fn reduce_into(d: &mut [f64], g: &[f64]) {
    if d.len() == g.len() {
        add_assign(d, g);
    } else {
        d[0] += g.iter().sum::<f64>();
    }
}

fn mul_grad_into(d: &mut [f64], g: &[f64], other: &[f64]) {
    if d.len() == g.len() {
        if other.len() == 1 {
            for (dv, gv) in d.iter_mut().zip(g) {
                *dv += gv * other[0];
            }
        } else {
            for ((dv, gv), ov) in d.iter_mut().zip(g).zip(other) {
                *dv += gv * ov;
            }
        }
    } else {
        d[0] += g.iter().zip(other).map(|(a, b)| a * b).sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![0., 1.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[2., 4.]);

        let i2 = g.constant(Tensor::identity(2));
        let b3 = g.constant(Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 7., -1.]).unwrap());
        let c = g.matmul(i2, b3).unwrap();
        assert_eq!(g.data(c), g.data(b3));

        let z = g.constant(Tensor::zeros(&[3, 2]));
        let c = g.matmul(b3, z).unwrap();
        assert!(g.data(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![0., 0., 0.]).unwrap());
        let y = g.softmax_rows(x, None).unwrap();
        assert!(close(g.data(y), &[1. / 3.; 3], 1e-15));

        let x = g.constant(Tensor::matrix(1, 2, vec![1f64.ln(), 3f64.ln()]).unwrap());
        let y = g.softmax_rows(x, None).unwrap();
        assert!(close(g.data(y), &[0.25, 0.75], 1e-15));

        let x = g.constant(Tensor::matrix(1, 2, vec![5.0, f64::NEG_INFINITY]).unwrap());
        let mask = Mask::from_fn(1, 2, |_, j| j == 0);
        let y = g.softmax_rows(x, Some(&mask)).unwrap();
        assert_eq!(g.data(y), &[1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        let mask = Mask::from_fn(2, 2, |i, _| i == 0);
        assert!(matches!(
            g.softmax_rows(x, Some(&mask)),
            Err(Error::DegenerateMask { row: 1 })
        ));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3], vec![-1., 0., 2.]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.data(y), &[0., 0., 2.]);
        let z = g.constant(Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap());
        let s = g.sigmoid(z);
        assert!(close(g.data(s), &[0.5, 0.75], 1e-15));

        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
        let c = g.constant(Tensor::scalar(2.0));
        let d = g.elementwise(Elementwise::Add, &[a, c]).unwrap();
        assert_eq!(g.data(d), &[2.0; 6]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::ones(&[2]));
        let zero = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::matrix(1, 2, vec![1., 3.]).unwrap());
        let y = g.layer_norm(x, one, zero, 0.0).unwrap();
        assert!(close(g.data(y), &[-1., 1.], 1e-15));

        let c = g.constant(Tensor::matrix(1, 2, vec![4., 4.]).unwrap());
        let y = g.layer_norm(c, one, zero, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0., 0.]);

        let bias = g.constant(Tensor::new(&[2], vec![0.3, -0.7]).unwrap());
        let y = g.layer_norm(x, zero, bias, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0.3, -0.7]);
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut g = Graph::new();
        let table = g.input(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let first = g.embed(table, &[0]).unwrap();
        assert_eq!(g.data(first), &[1., 2.]);
        let rows = g.embed(table, &[2, 2]).unwrap();
        assert_eq!(g.data(rows), &[5., 6., 5., 6.]);
        let loss = g.sum(rows);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[0., 0., 0., 0., 2., 2.]);

        let mut g = Graph::new();
        let table = g.input(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.embed(table, &[3]), Err(Error::Index { id: 3, len: 3 })));
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[3], vec![1., -2., 0.5]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1., 1., 1.]);
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));

        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[3], vec![1., -2., 0.5]).unwrap());
        let xx = g.mul(x, x).unwrap();
        let l = g.sum(xx);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., -4., 1.]);

        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn weighted_softmax_with_unit_weights_is_plain_softmax_bitwise() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 0.0, 0.7, -0.4]).unwrap());
        let w = g.constant(Tensor::ones(&[2, 3]));
        let a = g.softmax_rows(s, None).unwrap();
        let b = g.weighted_softmax_rows(s, w, None).unwrap();
        assert_eq!(g.data(a), g.data(b));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_training() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[4, 4]));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);

        let run = |seed| {
            let mut g = Graph::training(seed);
            let x = g.constant(Tensor::ones(&[4, 4]));
            let y = g.dropout(x, 0.5).unwrap();
            g.data(y).to_vec()
        };
        assert_eq!(run(3), run(3));
        assert!(run(3).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn block_causal_mask_separates_segments() {
        let m = Mask::block_causal(&[2, 3]);
        assert!(m.allows(1, 0));
        assert!(!m.allows(0, 1));
        assert!(!m.allows(2, 1));
        assert!(m.allows(4, 2));
        assert!(!m.allows(3, 4));
    }
}
