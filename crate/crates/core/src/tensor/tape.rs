use super::kernels::{axpy, dot, exp, matmul_into, matmul_tn_into, tanh, transpose};
use super::{Result, Tensor, TensorError, GELU_COEFF};

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
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seqs: usize,
        seq_len: usize,
        heads: usize,
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        rows: Vec<usize>,
        probs: Vec<f32>,
    },
    Bce {
        logits: Var,
        targets: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in execution order, so every operation's inputs precede
/// it and a single reverse sweep visits each operation exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

/// Boolean keep-mask for a `t×t` causal softmax (`true` = attend).
pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|i| i % t <= i / t).collect()
}

fn gelu_fwd(x: f32) -> f32 {
    let c = (2.0f32 / std::f32::consts::PI).sqrt();
    0.5 * x * (1.0 + tanh(c * (x + GELU_COEFF * x * x * x)))
}

fn gelu_grad(x: f32) -> f32 {
    let c = (2.0f32 / std::f32::consts::PI).sqrt();
    let u = c * (x + GELU_COEFF * x * x * x);
    let t = tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// One head of one sequence, with keys and values transposed so the
/// per-query loops run over contiguous positions.
struct HeadBuffers {
    seq_len: usize,
    dh: usize,
    q: Vec<f32>,
    kt: Vec<f32>,
    vt: Vec<f32>,
    row: Vec<f32>,
}

impl HeadBuffers {
    fn new(seq_len: usize, dh: usize) -> Self {
        Self {
            seq_len,
            dh,
            q: vec![0.0; seq_len * dh],
            kt: vec![0.0; dh * seq_len],
            vt: vec![0.0; dh * seq_len],
            row: vec![0.0; seq_len],
        }
    }

    fn load(&mut self, q: &[f32], k: &[f32], v: &[f32], b: usize, h: usize, d: usize) {
        let (t_len, dh) = (self.seq_len, self.dh);
        for t in 0..t_len {
            let o = (b * t_len + t) * d + h * dh;
            self.q[t * dh..(t + 1) * dh].copy_from_slice(&q[o..o + dh]);
            for j in 0..dh {
                self.kt[j * t_len + t] = k[o + j];
                self.vt[j * t_len + t] = v[o + j];
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Gradient of the last `backward` call with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], Op::Add(a, b)))
    }

    /// Adds a 1-D `bias` to every row of `x` (broadcast over leading dims).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(tb.len()) {
            for (r, b) in row.iter_mut().zip(tb.data()) {
                *r += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, &[x, bias], Op::AddBias(x, bias)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(value, &[x], Op::Scale(x, s))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(total as f32), &[x], Op::Sum(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(value, &[x], Op::Gelu(x))
    }

    /// Per-row layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.len()];
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let c = v as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax over the last dimension.
    ///
    /// `keep`, when given, has one flag per element; `false` positions get
    /// probability exactly zero. A row with nothing kept is an error.
    pub fn softmax_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        if let Some(k) = keep {
            if k.len() != tx.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    lhs: tx.shape().to_vec(),
                    rhs: vec![k.len()],
                });
            }
        }
        let n = tx.cols();
        let mut out = vec![0.0f32; tx.len()];
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let kept = |j: usize| keep.is_none_or(|k| k[r * n + j]);
            let max = (0..n)
                .filter(|&j| kept(j))
                .map(|j| row[j])
                .fold(f32::NEG_INFINITY, f32::max);
            if max == f32::NEG_INFINITY && !(0..n).any(kept) {
                return Err(TensorError::AllMasked(r));
            }
            let mut total = 0.0f64;
            for j in 0..n {
                if kept(j) {
                    let e = ((row[j] - max) as f64).exp();
                    out[r * n + j] = e as f32;
                    total += e;
                }
            }
            for j in 0..n {
                if kept(j) {
                    out[r * n + j] = (out[r * n + j] as f64 / total) as f32;
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, &[x], Op::Softmax(x)))
    }

    /// Selects rows of a 2-D `table` by index. Used for token and positional
    /// lookups as well as for picking the supervised rows of a batch.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, d) = (tt.rows(), tt.cols());
        if idx.is_empty() {
            return Err(TensorError::InvalidBatch("gather of zero rows".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    size: rows,
                });
            }
            out.extend_from_slice(tt.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(
            value,
            &[table],
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Fused multi-head causal self-attention.
    ///
    /// `q`, `k`, `v` are `[seqs·seq_len, d]` with heads laid out contiguously
    /// along `d`. Scores are scaled by `1/√(d/heads)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seqs: usize,
        seq_len: usize,
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        same_shape("causal_attention", tq, tk)?;
        same_shape("causal_attention", tq, tv)?;
        let d = tq.cols();
        if tq.rows() != seqs * seq_len || heads == 0 || d % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "causal_attention",
                lhs: tq.shape().to_vec(),
                rhs: vec![seqs, seq_len, heads],
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![0.0f32; tq.len()];
        // Causal rows are stored packed: row t holds t+1 probabilities.
        let tri = seq_len * (seq_len + 1) / 2;
        let mut probs = vec![0.0f32; seqs * heads * tri];
        let mut head = HeadBuffers::new(seq_len, dh);
        for b in 0..seqs {
            for h in 0..heads {
                head.load(qd, kd, vd, b, h, d);
                let p_base = (b * heads + h) * tri;
                for t in 0..seq_len {
                    let n = t + 1;
                    let scores = &mut head.row[..n];
                    scores.fill(0.0);
                    for j in 0..dh {
                        axpy(head.q[t * dh + j], &head.kt[j * seq_len..j * seq_len + n], scores);
                    }
                    let mut max = f32::NEG_INFINITY;
                    for sc in scores.iter_mut() {
                        *sc *= scale;
                        max = max.max(*sc);
                    }
                    for sc in scores.iter_mut() {
                        *sc = exp(*sc - max);
                    }
                    let inv = 1.0 / scores.iter().sum::<f32>();
                    let p_row = &mut probs[p_base + t * n / 2..p_base + t * n / 2 + n];
                    for (p, &sc) in p_row.iter_mut().zip(scores.iter()) {
                        *p = sc * inv;
                    }
                    let o = (b * seq_len + t) * d + h * dh;
                    for j in 0..dh {
                        out[o + j] = dot(p_row, &head.vt[j * seq_len..j * seq_len + n]);
                    }
                }
            }
        }
        let value = Tensor::new(tq.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                seqs,
                seq_len,
                heads,
                probs,
            },
        ))
    }

    /// Mean negative log-likelihood over rows whose `mask` flag is set.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (n, vocab) = (tl.rows(), tl.cols());
        if targets.len() != n || mask.len() != n {
            return Err(TensorError::InvalidBatch(format!(
                "{n} logit rows but {} targets and {} mask flags",
                targets.len(),
                mask.len()
            )));
        }
        let rows: Vec<usize> = (0..n).filter(|&r| mask[r]).collect();
        if rows.is_empty() {
            return Err(TensorError::InvalidBatch("loss mask selects no positions".into()));
        }
        let mut probs = vec![0.0f32; rows.len() * vocab];
        let mut total = 0.0f64;
        for (slot, &r) in rows.iter().enumerate() {
            let t = targets[r];
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_masked",
                    index: t,
                    size: vocab,
                });
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum_exp: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            let lse = max as f64 + sum_exp.ln();
            total += lse - row[t] as f64;
            for (p, &v) in probs[slot * vocab..(slot + 1) * vocab].iter_mut().zip(row) {
                *p = (((v - max) as f64).exp() / sum_exp) as f32;
            }
        }
        let loss = (total / rows.len() as f64) as f32;
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                rows,
                probs,
            },
        ))
    }

    /// Mean sigmoid binary cross-entropy over every element.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32]) -> Result<Var> {
        let tl = self.value(logits);
        if targets.len() != tl.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let total: f64 = tl
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| {
                let x = x as f64;
                x.max(0.0) - x * y as f64 + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let loss = (total / tl.len() as f64) as f32;
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::Bce {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients from a previous call are
    /// discarded; within one call they accumulate additively across uses.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f32]) {
        let nodes = &self.nodes;
        let mut pending: Vec<(Var, Vec<f32>)> = Vec::with_capacity(3);
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(a) {
                    let bt = transpose(tb.data(), k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, &bt, &mut da, m, n, k);
                    pending.push((a, da));
                }
                if wants(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(ta.data(), g, &mut db, m, k, n);
                    pending.push((b, db));
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    pending.push((a, g.to_vec()));
                }
                if wants(b) {
                    pending.push((b, g.to_vec()));
                }
            }
            &Op::AddBias(x, bias) => {
                if wants(x) {
                    pending.push((x, g.to_vec()));
                }
                if wants(bias) {
                    let d = nodes[bias.0].value.len();
                    let mut db = vec![0.0; d];
                    for row in g.chunks_exact(d) {
                        axpy(1.0, row, &mut db);
                    }
                    pending.push((bias, db));
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(a) {
                    pending.push((a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect()));
                }
                if wants(b) {
                    pending.push((b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect()));
                }
            }
            &Op::Scale(x, s) => pending.push((x, g.iter().map(|v| v * s).collect())),
            &Op::Sum(x) => pending.push((x, vec![g[0]; nodes[x.0].value.len()])),
            &Op::Gelu(x) => {
                let tx = &nodes[x.0].value;
                let dx = g
                    .iter()
                    .zip(tx.data())
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                pending.push((x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[gain.0].value.len();
                let gd = nodes[gain.0].value.data();
                let mut dx = vec![0.0; g.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dxhat = vec![0.0f32; d];
                for (r, (g_row, h_row)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    let mut mean_dh = 0.0f32;
                    let mut mean_dh_h = 0.0f32;
                    for j in 0..d {
                        dxhat[j] = g_row[j] * gd[j];
                        mean_dh += dxhat[j];
                        mean_dh_h += dxhat[j] * h_row[j];
                        dg[j] += g_row[j] * h_row[j];
                        db[j] += g_row[j];
                    }
                    mean_dh /= d as f32;
                    mean_dh_h /= d as f32;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - mean_dh - h_row[j] * mean_dh_h);
                    }
                }
                pending.push((*x, dx));
                pending.push((*gain, dg));
                pending.push((*bias, db));
            }
            &Op::Softmax(x) => {
                let y = &nodes[i].value;
                let n = y.cols();
                let mut dx = vec![0.0; g.len()];
                for ((y_row, g_row), d_row) in y
                    .data()
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(dx.chunks_exact_mut(n))
                {
                    let inner = dot(y_row, g_row);
                    for j in 0..n {
                        d_row[j] = y_row[j] * (g_row[j] - inner);
                    }
                }
                pending.push((x, dx));
            }
            Op::GatherRows { table, idx } => {
                let tt = &nodes[table.0].value;
                let d = tt.cols();
                let mut dt = vec![0.0; tt.len()];
                for (&r, g_row) in idx.iter().zip(g.chunks_exact(d)) {
                    axpy(1.0, g_row, &mut dt[r * d..(r + 1) * d]);
                }
                pending.push((*table, dt));
            }
            Op::Attention {
                q,
                k,
                v,
                seqs,
                seq_len,
                heads,
                probs,
            } => {
                let (seqs, seq_len, heads) = (*seqs, *seq_len, *heads);
                let (qd, kd, vd) = (
                    nodes[q.0].value.data(),
                    nodes[k.0].value.data(),
                    nodes[v.0].value.data(),
                );
                let d = nodes[q.0].value.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let mut dq = vec![0.0f32; qd.len()];
                let mut dk = vec![0.0f32; kd.len()];
                let mut dv = vec![0.0f32; vd.len()];
                let mut head = HeadBuffers::new(seq_len, dh);
                let mut dkt = vec![0.0f32; dh * seq_len];
                let mut dvt = vec![0.0f32; dh * seq_len];
                let mut w = vec![0.0f32; seq_len];
                let tri = seq_len * (seq_len + 1) / 2;
                for b in 0..seqs {
                    for h in 0..heads {
                        head.load(qd, kd, vd, b, h, d);
                        dkt.fill(0.0);
                        dvt.fill(0.0);
                        let p_base = (b * heads + h) * tri;
                        for t in 0..seq_len {
                            let n = t + 1;
                            let to = (b * seq_len + t) * d + h * dh;
                            let g_row = &g[to..to + dh];
                            let p_row = &probs[p_base + t * n / 2..p_base + t * n / 2 + n];
                            let dp = &mut head.row[..n];
                            dp.fill(0.0);
                            for (j, &gj) in g_row.iter().enumerate() {
                                axpy(gj, &head.vt[j * seq_len..j * seq_len + n], dp);
                                axpy(gj, p_row, &mut dvt[j * seq_len..j * seq_len + n]);
                            }
                            let inner = dot(p_row, dp);
                            for ((ws, &p), &dps) in w[..n].iter_mut().zip(p_row).zip(dp.iter()) {
                                *ws = p * (dps - inner) * scale;
                            }
                            for j in 0..dh {
                                dq[to + j] = dot(&w[..n], &head.kt[j * seq_len..j * seq_len + n]);
                                axpy(head.q[t * dh + j], &w[..n], &mut dkt[j * seq_len..j * seq_len + n]);
                            }
                        }
                        for s in 0..seq_len {
                            let so = (b * seq_len + s) * d + h * dh;
                            for j in 0..dh {
                                dk[so + j] = dkt[j * seq_len + s];
                                dv[so + j] = dvt[j * seq_len + s];
                            }
                        }
                    }
                }
                pending.push((*q, dq));
                pending.push((*k, dk));
                pending.push((*v, dv));
            }
            Op::CrossEntropy {
                logits,
                targets,
                rows,
                probs,
            } => {
                let tl = &nodes[logits.0].value;
                let vocab = tl.cols();
                let w = g[0] / rows.len() as f32;
                let mut dl = vec![0.0f32; tl.len()];
                for (slot, &r) in rows.iter().enumerate() {
                    let out = &mut dl[r * vocab..(r + 1) * vocab];
                    for (o, &p) in out.iter_mut().zip(&probs[slot * vocab..(slot + 1) * vocab]) {
                        *o = w * p;
                    }
                    out[targets[r]] -= w;
                }
                pending.push((*logits, dl));
            }
            Op::Bce { logits, targets } => {
                let tl = &nodes[logits.0].value;
                let w = g[0] / tl.len() as f32;
                let dl = tl
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| w * (1.0 / (1.0 + (-x).exp()) - y))
                    .collect();
                pending.push((*logits, dl));
            }
        }
        for (v, contribution) in pending {
            self.accumulate(v, contribution);
        }
    }
}
