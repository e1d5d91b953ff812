use std::borrow::Cow;
use std::collections::HashMap;

use super::flops;
use super::kernels::{gemm, MatView, MatViewMut};
use super::{rows_cols, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    KlDivergence {
        q: Var,
        p_probs: Vec<f64>,
        q_probs: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
    Mse(Var, Var),
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    needs_grad: bool,
    op: Op,
}

/// Define-by-run recording of tensor operations.
///
/// Parameters are borrowed for the tape's lifetime (`'a`) rather than
/// copied, and are deduplicated by buffer address so a tensor used in
/// several places accumulates a single gradient. A tape built with
/// [`Tape::no_grad`] records values only.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    record: bool,
    params: HashMap<usize, Var>,
    non_finite: Option<&'static str>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn param_key(t: &Tensor) -> usize {
    t.data().as_ptr() as usize
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Log-softmax of a row, written into `out`.
fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    out.iter_mut().zip(row).for_each(|(o, x)| *o = x - lse);
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            params: HashMap::new(),
            non_finite: None,
        }
    }

    /// A tape that evaluates values without recording backward state.
    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.value(v).to_vec()).unwrap()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First op that produced a NaN or infinity, if any.
    pub fn non_finite_origin(&self) -> Option<&'static str> {
        self.non_finite
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(TensorError::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        inputs: &[Var],
        op: impl FnOnce() -> Op,
    ) -> Var {
        if self.non_finite.is_none() && !value.iter().all(|x| x.is_finite()) {
            self.non_finite = Some(name);
        }
        let needs_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op() } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a borrowed parameter; repeated calls with the same tensor
    /// return the same handle.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        let key = param_key(t);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            needs_grad: self.record && t.requires_grad,
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    /// Owned leaf; differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = self.record && t.requires_grad;
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(t.into_data()),
            needs_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    // ----------------------------------------------------------------- ops

    /// `a·b` for `a: m×k`, `b: k×n`. Adds `2·m·k·n` to the FLOP counter.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; m * n];
        let bview = if trans_b {
            MatView::transposed(self.value(b), k)
        } else {
            MatView::row_major(self.value(b), n)
        };
        gemm(
            m,
            k,
            n,
            1.0,
            MatView::row_major(self.value(a), k),
            bview,
            0.0,
            MatViewMut::row_major(&mut out, n),
        );
        flops::add(2 * (m * k * n) as u64);
        Ok(self.push("matmul", vec![m, n], out, &[a, b], || Op::MatMul { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push("add", shape, out, &[a, b], || Op::Add(a, b)))
    }

    /// Adds a `[n]` bias to every row of `x: …×n`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.value(bias).len() != cols {
            return Err(dim_err("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push("add_row", shape, out, &[x, bias], || Op::AddRow { x, bias }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, &[x], || Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, out, &[x], || Op::Relu(x))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, cols) = rows_cols(&shape);
        if shape.is_empty() || cols == 0 {
            return Err(TensorError::Degenerate {
                op: "softmax",
                reason: "empty axis".into(),
            });
        }
        let mut out = self.value(x).to_vec();
        out.chunks_mut(cols).for_each(softmax_row);
        Ok(self.push("softmax", shape, out, &[x], || Op::Softmax(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&shape);
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(dim_err("layer_norm", &shape, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(TensorError::Contract("layer_norm eps must be > 0".into()));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for (r, row) in self.value(x).chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push("layer_norm", shape, out, &[x, gain, bias], || Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        }))
    }

    /// Gathers rows of `table: V×d`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(dim_err("embedding", &shape, &[ids.len()]));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Degenerate {
                op: "embedding",
                reason: format!("id {bad} out of range for table of {v} rows"),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Degenerate {
                op: "embedding",
                reason: "no ids".into(),
            });
        }
        let t = self.value(table);
        let out: Vec<f64> = ids.iter().flat_map(|&i| t[i * d..(i + 1) * d].iter().copied()).collect();
        let ids = ids.to_vec();
        let n = ids.len();
        Ok(self.push("embedding", vec![n, d], out, &[table], || Op::Embedding { table, ids }))
    }

    /// Stacks along the first axis; all inputs must share the last axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| TensorError::Degenerate {
            op: "concat_rows",
            reason: "no inputs".into(),
        })?;
        let (_, d) = rows_cols(self.shape(first));
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, c) = rows_cols(self.shape(x));
            if c != d {
                return Err(dim_err("concat_rows", self.shape(first), self.shape(x)));
            }
            rows += r;
            out.extend_from_slice(self.value(x));
        }
        let xs = xs.to_vec();
        Ok(self.push("concat_rows", vec![rows, d], out, &xs.clone(), || Op::ConcatRows(xs)))
    }

    /// Joins along the last axis; all inputs must share the row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| TensorError::Degenerate {
            op: "concat_cols",
            reason: "no inputs".into(),
        })?;
        let (rows, _) = rows_cols(self.shape(first));
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = rows_cols(self.shape(x));
            if r != rows {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(x)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[r * w..(r + 1) * w]);
            }
        }
        let xs = xs.to_vec();
        Ok(self.push("concat_cols", vec![rows, total], out, &xs.clone(), || Op::ConcatCols(xs)))
    }

    /// Contiguous slice `[start, start + len)` of the flat data, viewed with
    /// `shape` (whose product is `len`).
    pub fn narrow(&mut self, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        if start + len > self.value(x).len() || len == 0 {
            return Err(dim_err("narrow", self.shape(x), shape));
        }
        let out = self.value(x)[start..start + len].to_vec();
        Ok(self.push("narrow", shape.to_vec(), out, &[x], || Op::Narrow { x, start }))
    }

    /// Rows `[start, start + n)` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, n: usize) -> Result<Var> {
        let (_, d) = rows_cols(self.shape(x));
        self.narrow(x, start * d, &[n, d])
    }

    /// Mean over the leading axis: `m×d -> 1×d`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (rows, d) = rows_cols(self.shape(x));
        let mut out = vec![0.0; d];
        for row in self.value(x).chunks(d) {
            add_into(&mut out, row);
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        self.push("mean_rows", vec![1, d], out, &[x], || Op::MeanRows(x))
    }

    /// Multi-head scaled dot-product attention. `q: n×d`, `k, v: m×d`;
    /// heads are contiguous column blocks of width `d / heads`. With
    /// `causal`, query `i` sees keys `0..=i` only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk != sv || sk.len() != 2 || sq[1] != sk[1] || heads == 0 || sq[1] % heads != 0 {
            return Err(dim_err("attention", &sq, &sk));
        }
        let (n, d, m) = (sq[0], sq[1], sk[0]);
        if causal && n > m {
            return Err(dim_err("attention", &sq, &sk));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm(
                n,
                dh,
                m,
                scale,
                MatView::row_major(qv, d).with_offset(h * dh),
                MatView::transposed(kv, d).with_offset(h * dh),
                0.0,
                MatViewMut::row_major(p, m),
            );
            for (i, row) in p.chunks_mut(m).enumerate() {
                if causal {
                    row[i + 1..].iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
                }
                softmax_row(row);
            }
            gemm(
                n,
                m,
                dh,
                1.0,
                MatView::row_major(p, m),
                MatView::row_major(vv, d).with_offset(h * dh),
                0.0,
                MatViewMut::row_major(&mut out, d).with_offset(h * dh),
            );
        }
        flops::add(4 * (n * m * d) as u64);
        Ok(self.push("attention", vec![n, d], out, &[q, k, v], || Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: T×V`; positions whose target equals `pad_id` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: Option<usize>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (t, vsz) = rows_cols(&shape);
        if t != targets.len() {
            return Err(dim_err("cross_entropy", &shape, &[targets.len()]));
        }
        let targets: Vec<Option<usize>> = targets
            .iter()
            .map(|&y| if Some(y) == pad_id { None } else { Some(y) })
            .collect();
        if let Some(bad) = targets.iter().flatten().find(|&&y| y >= vsz) {
            return Err(TensorError::Degenerate {
                op: "cross_entropy",
                reason: format!("target {bad} outside vocabulary of {vsz}"),
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::Degenerate {
                op: "cross_entropy",
                reason: "all positions are padding".into(),
            });
        }
        let mut logp = vec![0.0; t * vsz];
        let mut loss = 0.0;
        for (r, row) in self.value(logits).chunks(vsz).enumerate() {
            let lp = &mut logp[r * vsz..(r + 1) * vsz];
            log_softmax_row(row, lp);
            if let Some(y) = targets[r] {
                loss -= lp[y];
            }
        }
        loss /= count as f64;
        Ok(self.push("cross_entropy", vec![1], vec![loss], &[logits], || Op::CrossEntropy {
            logits,
            targets,
            probs: logp.into_iter().map(f64::exp).collect(),
            count,
        }))
    }

    /// `mean_t Σ_v p_tv (log p_tv − log q_tv)` over rows with `mask[t]`,
    /// where `p` and `q` are row softmaxes of the given logits. `p` is
    /// treated as a constant; the gradient flows into `q_logits` only.
    pub fn kl_divergence(&mut self, p_logits: Var, q_logits: Var, mask: &[bool]) -> Result<Var> {
        let (sp, sq) = (self.shape(p_logits).to_vec(), self.shape(q_logits).to_vec());
        if sp != sq {
            return Err(dim_err("kl_divergence", &sp, &sq));
        }
        let (t, vsz) = rows_cols(&sq);
        if mask.len() != t {
            return Err(dim_err("kl_divergence", &sq, &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Degenerate {
                op: "kl_divergence",
                reason: "mask excludes every position".into(),
            });
        }
        let mut lp = vec![0.0; t * vsz];
        let mut lq = vec![0.0; t * vsz];
        let mut total = 0.0;
        for r in 0..t {
            let range = r * vsz..(r + 1) * vsz;
            log_softmax_row(&self.value(p_logits)[range.clone()], &mut lp[range.clone()]);
            log_softmax_row(&self.value(q_logits)[range.clone()], &mut lq[range.clone()]);
            if mask[r] {
                total += lp[range.clone()]
                    .iter()
                    .zip(&lq[range])
                    .map(|(a, b)| a.exp() * (a - b))
                    .sum::<f64>();
            }
        }
        let loss = total / count as f64;
        let mask = mask.to_vec();
        Ok(self.push("kl_divergence", vec![1], vec![loss], &[q_logits], || Op::KlDivergence {
            q: q_logits,
            p_probs: lp.into_iter().map(f64::exp).collect(),
            q_probs: lq.into_iter().map(f64::exp).collect(),
            mask,
            count,
        }))
    }

    /// Mean squared difference of two equal-length tensors (shapes may
    /// differ as long as the flat lengths agree).
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(dim_err("mse", self.shape(a), self.shape(b)));
        }
        let loss = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / va.len() as f64;
        Ok(self.push("mse", vec![1], vec![loss], &[a, b], || Op::Mse(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push("sum", vec![1], vec![s], &[x], || Op::Sum(x))
    }

    /// `Σ cᵢ·xᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or_else(|| TensorError::Degenerate {
            op: "weighted_sum",
            reason: "no terms".into(),
        })?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &(x, c) in terms {
            if self.shape(x) != shape.as_slice() {
                return Err(dim_err("weighted_sum", &shape, self.shape(x)));
            }
            out.iter_mut().zip(self.value(x)).for_each(|(o, v)| *o += c * v);
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let terms = terms.to_vec();
        Ok(self.push("weighted_sum", shape, out, &inputs, || Op::WeightedSum(terms)))
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.record {
            return Err(TensorError::Contract("backward on a no-grad tape".into()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaf_grads = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                leaf_grads.insert(i, g);
                continue;
            }
            backprop_node(nodes, node, &g, &mut grads);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(&key, v)| leaf_grads.get(&v.0).map(|_| (key, v.0)))
            .collect();
        Ok(Gradients {
            by_leaf: leaf_grads,
            params,
        })
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node<'_>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node<'_>], v: Var, delta: &[f64]) {
    if let Some(s) = slot(grads, nodes, v) {
        add_into(s, delta);
    }
}

fn backprop_node(nodes: &[Node<'_>], node: &Node<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    let shape = |v: Var| -> &[usize] { &nodes[v.0].shape };
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, trans_b } => {
            let (m, k) = (shape(a)[0], shape(a)[1]);
            let n = node.shape[1];
            // Gradients accumulate straight into their slots (beta = 1).
            if let Some(ga) = slot(grads, nodes, a) {
                let bview = if trans_b {
                    MatView::row_major(val(b), k)
                } else {
                    MatView::transposed(val(b), n)
                };
                gemm(m, n, k, 1.0, MatView::row_major(g, n), bview, 1.0, MatViewMut::row_major(ga, k));
            }
            if let Some(gb) = slot(grads, nodes, b) {
                if trans_b {
                    gemm(
                        n,
                        m,
                        k,
                        1.0,
                        MatView::transposed(g, n),
                        MatView::row_major(val(a), k),
                        1.0,
                        MatViewMut::row_major(gb, k),
                    );
                } else {
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatView::transposed(val(a), k),
                        MatView::row_major(g, n),
                        1.0,
                        MatViewMut::row_major(gb, n),
                    );
                }
            }
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, g);
            accumulate(grads, nodes, b, g);
        }
        &Op::AddRow { x, bias } => {
            accumulate(grads, nodes, x, g);
            if let Some(s) = slot(grads, nodes, bias) {
                let cols = s.len();
                for row in g.chunks(cols) {
                    add_into(s, row);
                }
            }
        }
        &Op::Scale(x, c) => {
            if let Some(s) = slot(grads, nodes, x) {
                s.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
            }
        }
        &Op::Relu(x) => {
            let xv = val(x);
            if let Some(s) = slot(grads, nodes, x) {
                for ((d, g), xi) in s.iter_mut().zip(g).zip(xv) {
                    if *xi > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        &Op::Softmax(x) => {
            let y = &node.value;
            let cols = *node.shape.last().unwrap();
            if let Some(s) = slot(grads, nodes, x) {
                for ((srow, grow), yrow) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        srow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = *node.shape.last().unwrap();
            let gv = val(*gain);
            if let Some(s) = slot(grads, nodes, *gain) {
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        s[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *bias) {
                for grow in g.chunks(d) {
                    add_into(s, grow);
                }
            }
            if let Some(s) = slot(grads, nodes, *x) {
                let mut dxhat = vec![0.0; d];
                for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    for j in 0..d {
                        dxhat[j] = grow[j] * gv[j];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dh: f64 = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum();
                    let c = inv_std[r] / d as f64;
                    for j in 0..d {
                        s[r * d + j] += c * (d as f64 * dxhat[j] - sum_d - hrow[j] * sum_dh);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = shape(*table)[1];
            if let Some(s) = slot(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut s[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::ConcatRows(xs) => {
            let mut off = 0;
            for &x in xs {
                let len = val(x).len();
                accumulate(grads, nodes, x, &g[off..off + len]);
                off += len;
            }
        }
        Op::ConcatCols(xs) => {
            let total = *node.shape.last().unwrap();
            let rows = node.shape[0];
            let mut col = 0;
            for &x in xs {
                let w = *shape(x).last().unwrap();
                if let Some(s) = slot(grads, nodes, x) {
                    for r in 0..rows {
                        add_into(&mut s[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w]);
                    }
                }
                col += w;
            }
        }
        &Op::Narrow { x, start } => {
            if let Some(s) = slot(grads, nodes, x) {
                add_into(&mut s[start..start + g.len()], g);
            }
        }
        &Op::MeanRows(x) => {
            let (rows, d) = rows_cols(shape(x));
            if let Some(s) = slot(grads, nodes, x) {
                for row in s.chunks_mut(d) {
                    row.iter_mut().zip(g).for_each(|(a, b)| *a += b / rows as f64);
                }
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (q, k, v, heads) = (*q, *k, *v, *heads);
            let (n, d) = (shape(q)[0], shape(q)[1]);
            let m = shape(k)[0];
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; m * d];
            let mut dv = vec![0.0; m * d];
            let mut ds = vec![0.0; n * m];
            for h in 0..heads {
                let p = &probs[h * n * m..(h + 1) * n * m];
                let g_h = MatView::row_major(g, d).with_offset(h * dh);
                // dV_h = Pᵀ dO_h
                gemm(
                    m,
                    n,
                    dh,
                    1.0,
                    MatView::transposed(p, m),
                    g_h,
                    0.0,
                    MatViewMut::row_major(&mut dv, d).with_offset(h * dh),
                );
                // dP = dO_h V_hᵀ
                gemm(
                    n,
                    dh,
                    m,
                    1.0,
                    g_h,
                    MatView::transposed(val(v), d).with_offset(h * dh),
                    0.0,
                    MatViewMut::row_major(&mut ds, m),
                );
                for (srow, prow) in ds.chunks_mut(m).zip(p.chunks(m)) {
                    let dot: f64 = srow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        srow[j] = prow[j] * (srow[j] - dot);
                    }
                }
                gemm(
                    n,
                    m,
                    dh,
                    scale,
                    MatView::row_major(&ds, m),
                    MatView::row_major(val(k), d).with_offset(h * dh),
                    0.0,
                    MatViewMut::row_major(&mut dq, d).with_offset(h * dh),
                );
                gemm(
                    m,
                    n,
                    dh,
                    scale,
                    MatView::transposed(&ds, m),
                    MatView::row_major(val(q), d).with_offset(h * dh),
                    0.0,
                    MatViewMut::row_major(&mut dk, d).with_offset(h * dh),
                );
            }
            accumulate(grads, nodes, q, &dq);
            accumulate(grads, nodes, k, &dk);
            accumulate(grads, nodes, v, &dv);
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            let vsz = *shape(*logits).last().unwrap();
            let c = g[0] / *count as f64;
            if let Some(s) = slot(grads, nodes, *logits) {
                for (r, y) in targets.iter().enumerate() {
                    let Some(y) = *y else { continue };
                    let row = &mut s[r * vsz..(r + 1) * vsz];
                    for j in 0..vsz {
                        row[j] += c * probs[r * vsz + j];
                    }
                    row[y] -= c;
                }
            }
        }
        Op::KlDivergence {
            q,
            p_probs,
            q_probs,
            mask,
            count,
        } => {
            let vsz = *shape(*q).last().unwrap();
            let c = g[0] / *count as f64;
            if let Some(s) = slot(grads, nodes, *q) {
                for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for j in r * vsz..(r + 1) * vsz {
                        s[j] += c * (q_probs[j] - p_probs[j]);
                    }
                }
            }
        }
        &Op::Mse(a, b) => {
            let (va, vb) = (val(a), val(b));
            let c = 2.0 * g[0] / va.len() as f64;
            let diff: Vec<f64> = va.iter().zip(vb).map(|(x, y)| c * (x - y)).collect();
            accumulate(grads, nodes, a, &diff);
            if let Some(s) = slot(grads, nodes, b) {
                s.iter_mut().zip(&diff).for_each(|(d, v)| *d -= v);
            }
        }
        &Op::Sum(x) => {
            if let Some(s) = slot(grads, nodes, x) {
                s.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::WeightedSum(terms) => {
            for &(x, c) in terms {
                if let Some(s) = slot(grads, nodes, x) {
                    s.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
        }
    }
}

/// Result of a backward sweep: gradients of every differentiable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<usize, Vec<f64>>,
    params: HashMap<usize, usize>,
}

impl Gradients {
    /// Gradient of a leaf created on the (consumed) tape.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.by_leaf.get(&v.0).map(Vec::as_slice)
    }

    /// Gradient of a borrowed parameter, looked up by buffer identity.
    pub fn for_param(&self, t: &Tensor) -> Option<&[f64]> {
        self.params
            .get(&param_key(t))
            .and_then(|i| self.by_leaf.get(i))
            .map(Vec::as_slice)
    }

    /// Adds this sweep's gradient into `t.grad` (allocating it if needed).
    /// Returns whether `t` received a gradient.
    pub fn populate(&self, t: &mut Tensor) -> bool {
        let Some(g) = self.for_param(t) else { return false };
        let g = g.to_vec();
        match &mut t.grad {
            Some(existing) => add_into(existing, &g),
            None => t.grad = Some(g),
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    fn leaf(tape: &mut Tape<'_>, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap().trainable())
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::no_grad();
        let eye = tape.constant(Tensor::from_rows(&[vec![1., 0., 0.], vec![0., 1., 0.], vec![0., 0., 1.]]).unwrap());
        let m = tape.constant(Tensor::new(vec![3, 3], (1..=9).map(f64::from).collect()).unwrap());
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out), tape.value(m));

        let a = tape.constant(Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![0.], vec![1.]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(3);
        let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let expect = naive_matmul(a.data(), b.data(), 5, 7, 3);
        let mut tape = Tape::no_grad();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let c = tape.matmul(va, vb).unwrap();
        for (x, y) in tape.value(c).iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::no_grad();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Dimension {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn matmul_counts_flops() {
        flops::reset();
        let mut tape = Tape::no_grad();
        let a = tape.constant(Tensor::zeros(&[4, 5]));
        let b = tape.constant(Tensor::zeros(&[5, 6]));
        tape.matmul(a, b).unwrap();
        assert_eq!(flops::total(), 2 * 4 * 5 * 6);
        tape.matmul(a, b).unwrap();
        assert_eq!(flops::total(), 4 * 4 * 5 * 6);
        flops::reset();
        assert_eq!(flops::total(), 0);
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let x = tape.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y)[0], 1.0);
        assert!(tape.value(y)[1] >= 0.0 && tape.value(y)[1] < 1e-300);
        assert!(tape.check_finite().is_ok());

        let x = tape.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in tape.value(y).iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::no_grad();
        let g = tape.constant(Tensor::filled(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(Tensor::filled(&[1, 4], 3.5));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));

        let g2 = tape.constant(Tensor::filled(&[2], 1.0));
        let b2 = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let y = tape.layer_norm(x, g2, b2, 1e-12).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-9);
        assert!((tape.value(y)[1] + 1.0).abs() < 1e-9);

        let mut rng = SeededRng::new(9);
        let x = tape.constant(Tensor::randn(&[1, 4], 3.0, &mut rng));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y);
        let mean = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::no_grad();
        let uniform = tape.constant(Tensor::zeros(&[2, 4]));
        let l = tape.cross_entropy(uniform, &[1, 3], None).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);

        let sharp = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 200.0, 0.0]).unwrap());
        let l = tape.cross_entropy(sharp, &[1], None).unwrap();
        assert!(tape.scalar(l) < 1e-80);

        let err = tape.cross_entropy(uniform, &[0, 0], Some(0)).unwrap_err();
        assert!(matches!(err, TensorError::Degenerate { .. }));
    }

    #[test]
    fn kl_cases() {
        let mut tape = Tape::no_grad();
        // softmax(log p) = p
        let p = tape.constant(Tensor::new(vec![1, 2], vec![0.5f64.ln(), 0.5f64.ln()]).unwrap());
        let q = tape.constant(Tensor::new(vec![1, 2], vec![0.25f64.ln(), 0.75f64.ln()]).unwrap());
        let kl = tape.kl_divergence(p, q, &[true]).unwrap();
        let oracle = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((tape.scalar(kl) - oracle).abs() < 1e-12);
        assert!((tape.scalar(kl) - 0.14384).abs() < 1e-4);
        let same = tape.kl_divergence(q, q, &[true]).unwrap();
        assert!(tape.scalar(same).abs() < 1e-9);
    }

    #[test]
    fn mse_cases() {
        let mut tape = Tape::no_grad();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::filled(&[2], 1.0));
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.scalar(l), 1.0);
        let l = tape.mse(a, a).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.mse(a, c).is_err());
    }

    #[test]
    fn backward_linear_and_mse() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![1.0, -2.0, 4.0]);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![1.0, -2.0, 4.0]);
        let zero = tape.constant(Tensor::zeros(&[3]));
        let l = tape.mse(x, zero).unwrap();
        let g = tape.backward(l).unwrap();
        let expect: Vec<f64> = [1.0, -2.0, 4.0].iter().map(|v| 2.0 * v / 3.0).collect();
        assert_eq!(g.wrt(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn nan_is_reported_with_op_name() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![f64::MAX, 1.0]);
        let y = tape.scale(x, 10.0);
        let s = tape.sum(y);
        assert_eq!(tape.non_finite_origin(), Some("scale"));
        assert_eq!(tape.backward(s).unwrap_err(), TensorError::NonFinite { op: "scale" });
    }

    #[test]
    fn shared_param_accumulates_once() {
        let w = Tensor::new(vec![1, 1], vec![3.0]).unwrap().trainable();
        let mut tape = Tape::new();
        let a = tape.param(&w);
        let b = tape.param(&w);
        assert_eq!(a, b);
        let p = tape.matmul(a, b).unwrap(); // w²
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.for_param(&w).unwrap(), &[6.0]);
        let mut w2 = w.clone();
        assert!(!g.populate(&mut w2), "a clone has a different buffer");
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let w = Tensor::filled(&[2, 2], 1.0);
        let x = Tensor::filled(&[1, 2], 1.0).trainable();
        let mut tape = Tape::new();
        let (vw, vx) = (tape.param(&w), tape.param(&x));
        let y = tape.matmul(vx, vw).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.for_param(&w).is_none());
        assert_eq!(g.for_param(&x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn causal_attention_ignores_future() {
        let mut rng = SeededRng::new(5);
        let q = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let v = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let run = |k: &Tensor, v: &Tensor| {
            let mut tape = Tape::no_grad();
            let (a, b, c) = (tape.param(&q), tape.param(k), tape.param(v));
            let o = tape.attention(a, b, c, 2, true).unwrap();
            tape.value(o).to_vec()
        };
        let base = run(&k, &v);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        k2.data_mut()[3 * 8..].iter_mut().for_each(|x| *x += 1.0);
        v2.data_mut()[3 * 8..].iter_mut().for_each(|x| *x -= 2.0);
        let edited = run(&k2, &v2);
        assert_eq!(&base[..3 * 8], &edited[..3 * 8]);
        assert_ne!(&base[3 * 8..], &edited[3 * 8..]);
    }
}
