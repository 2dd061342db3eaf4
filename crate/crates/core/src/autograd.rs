//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied during one forward pass. Nodes
//! are appended in evaluation order, so walking the tape backwards visits each
//! node after all of its consumers. The tape also counts the multiply-accumulate
//! operations of every matrix product it evaluates; the FLOP calculator in
//! [`crate::plan`] is checked against that counter.

use crate::error::{Error, Result};
use crate::tensor::{gemm, sigmoid, softmax_into, MatRef, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Head layout of a batched causal self-attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionGeometry {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttentionGeometry {
    fn q_cols(&self) -> usize {
        self.heads * self.head_dim
    }

    fn kv_cols(&self) -> usize {
        self.kv_heads * self.head_dim
    }
}

#[derive(Debug)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Softplus(Var),
    Recip(Var),
    Sum(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rotary {
        x: Var,
        seq: usize,
        head_dim: usize,
        theta: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeometry,
        probs: Vec<f64>,
    },
    SoftmaxRows(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    GatherElems {
        x: Var,
        idx: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    ScatterAdd {
        parts: Vec<(Var, Vec<usize>)>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
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

    /// Multiply-accumulates performed by matrix products and attention so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::row_major(self.data(a), k),
            MatRef::row_major(self.data(b), n),
            0.0,
            &mut out,
            0,
            n,
        );
        self.macs += (m * k * n) as u64;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * factor).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let needs = self.needs(&[a]);
        self.push(t, Op::Scale(a, factor), needs)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| x * sigmoid(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let needs = self.needs(&[a]);
        self.push(t, Op::Silu(a), needs)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self
            .data(a)
            .iter()
            .map(|&x| crate::tensor::softplus(x))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let needs = self.needs(&[a]);
        self.push(t, Op::Softplus(a), needs)
    }

    /// Elementwise `1 / x`.
    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|x| 1.0 / x).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let needs = self.needs(&[a]);
        self.push(t, Op::Recip(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Root-mean-square normalisation of each row, scaled by `gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("rms_norm", x)?;
        if self.shape(gain) != [cols] {
            return Err(Error::shape("rms_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let mut out = vec![0.0; rows * cols];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = row[c] * inv * g[c];
            }
            inv_rms.push(inv);
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        let needs = self.needs(&[x, gain]);
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }, needs))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.matrix_dims("embedding", table)?;
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let t = Tensor::new(vec![ids.len(), dim], out)?;
        let needs = self.needs(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Rotary position embedding applied per head to rows laid out as
    /// `batch * seq` tokens; the position of row `r` is `r % seq`.
    pub fn rotary(&mut self, x: Var, seq: usize, head_dim: usize, theta: f64) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("rotary", x)?;
        if !head_dim.is_multiple_of(2) || cols % head_dim != 0 || rows % seq != 0 {
            return Err(Error::shape("rotary", &[rows, cols], &[seq, head_dim]));
        }
        let mut out = self.data(x).to_vec();
        rotate(&mut out, rows, cols, seq, head_dim, theta, 1.0);
        let t = Tensor::new(vec![rows, cols], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            t,
            Op::Rotary {
                x,
                seq,
                head_dim,
                theta,
            },
            needs,
        ))
    }

    /// Causal grouped-query attention. `q` is `[batch*seq, heads*head_dim]`,
    /// `k` and `v` are `[batch*seq, kv_heads*head_dim]`. The full score matrix
    /// is evaluated and the upper triangle masked afterwards.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, geom: AttentionGeometry) -> Result<Var> {
        let rows = geom.batch * geom.seq;
        let (qc, kc) = (geom.q_cols(), geom.kv_cols());
        if geom.kv_heads == 0 || !geom.heads.is_multiple_of(geom.kv_heads) {
            return Err(Error::Config(format!(
                "heads {} not divisible by kv_heads {}",
                geom.heads, geom.kv_heads
            )));
        }
        if self.shape(q) != [rows, qc] {
            return Err(Error::shape("attention", self.shape(q), &[rows, qc]));
        }
        for kv in [k, v] {
            if self.shape(kv) != [rows, kc] {
                return Err(Error::shape("attention", self.shape(kv), &[rows, kc]));
            }
        }
        let (s, hd) = (geom.seq, geom.head_dim);
        let group = geom.heads / geom.kv_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; geom.batch * geom.heads * s * s];
        let mut out = vec![0.0; rows * qc];
        let mut row_mask = vec![false; s];
        for b in 0..geom.batch {
            for h in 0..geom.heads {
                let kvh = h / group;
                let q_off = b * s * qc + h * hd;
                let kv_off = b * s * kc + kvh * hd;
                let p_off = (b * geom.heads + h) * s * s;
                let scores = &mut probs[p_off..p_off + s * s];
                gemm(
                    s,
                    hd,
                    s,
                    MatRef::row_major(self.data(q), qc).at(q_off),
                    MatRef::transposed(self.data(k), kc).at(kv_off),
                    0.0,
                    scores,
                    0,
                    s,
                );
                for i in 0..s {
                    for (j, m) in row_mask.iter_mut().enumerate() {
                        *m = j > i;
                    }
                    let row = &mut scores[i * s..(i + 1) * s];
                    row.iter_mut().for_each(|x| *x *= scale);
                    let logits = row.to_vec();
                    softmax_into(&logits, &row_mask, row)?;
                }
                gemm(
                    s,
                    s,
                    hd,
                    MatRef::row_major(scores, s),
                    MatRef::row_major(self.data(v), kc).at(kv_off),
                    0.0,
                    &mut out,
                    q_off,
                    qc,
                );
            }
        }
        self.macs += (2 * geom.batch * geom.heads * s * s * hd) as u64;
        let t = Tensor::new(vec![rows, qc], out)?;
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            },
            needs,
        ))
    }

    /// Row-wise softmax; `mask[i]` (row-major, same size as `x`) excludes an
    /// entry, which then maps to exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("softmax_rows", x)?;
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::shape("softmax_rows", &[rows, cols], &[m.len()]));
            }
        }
        let none = vec![false; cols];
        let xs = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let m = mask.map_or(&none[..], |m| &m[r * cols..(r + 1) * cols]);
            softmax_into(
                &xs[r * cols..(r + 1) * cols],
                m,
                &mut out[r * cols..(r + 1) * cols],
            )?;
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::SoftmaxRows(x), needs))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("gather_rows", x)?;
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", &[rows, cols], &[*bad]));
        }
        let xs = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&xs[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(vec![idx.len(), cols], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Picks flat elements of `x` into a vector.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.data(x).len();
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_elems", &[n], &[*bad]));
        }
        let xs = self.data(x);
        let out = idx.iter().map(|&i| xs[i]).collect();
        let t = Tensor::new(vec![idx.len()], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            t,
            Op::GatherElems {
                x,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Multiplies row `r` of `x` by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("scale_rows", x)?;
        if self.shape(s) != [rows] {
            return Err(Error::shape("scale_rows", self.shape(x), self.shape(s)));
        }
        let (xs, ss) = (self.data(x), self.data(s));
        let out = (0..rows * cols).map(|i| xs[i] * ss[i / cols]).collect();
        let t = Tensor::new(vec![rows, cols], out)?;
        let needs = self.needs(&[x, s]);
        Ok(self.push(t, Op::ScaleRows { x, s }, needs))
    }

    /// Sums each part's rows into a `[rows x cols]` zero matrix at the given
    /// row indices. Parts are accumulated in the order given.
    pub fn scatter_add(
        &mut self,
        rows: usize,
        cols: usize,
        parts: Vec<(Var, Vec<usize>)>,
    ) -> Result<Var> {
        let mut out = vec![0.0; rows * cols];
        for (p, idx) in &parts {
            if self.shape(*p) != [idx.len(), cols] || idx.iter().any(|&i| i >= rows) {
                return Err(Error::shape(
                    "scatter_add",
                    self.shape(*p),
                    &[idx.len(), cols],
                ));
            }
            let ps = self.data(*p);
            for (src, &dst) in idx.iter().enumerate() {
                let o = &mut out[dst * cols..(dst + 1) * cols];
                o.iter_mut()
                    .zip(&ps[src * cols..(src + 1) * cols])
                    .for_each(|(a, b)| *a += b);
            }
        }
        let vars: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let needs = self.needs(&vars);
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(t, Op::ScatterAdd { parts }, needs))
    }

    /// Mean token negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("cross_entropy", logits)?;
        if targets.is_empty() {
            return Err(Error::Input("cross entropy over empty targets".into()));
        }
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                &[rows, cols],
                &[targets.len()],
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Input(format!(
                "target id {bad} out of range for {cols} classes"
            )));
        }
        let xs = self.data(logits);
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        let unmasked = vec![false; cols];
        for (r, &t) in targets.iter().enumerate() {
            let row = &xs[r * cols..(r + 1) * cols];
            let p = &mut probs[r * cols..(r + 1) * cols];
            softmax_into(row, &unmasked, p)?;
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = total / rows as f64;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Back-propagates from the scalar `loss`, leaving gradients in every
    /// node that depends on a parameter. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            for (input, g) in self.local_grads(i, &dy) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            self.nodes[i].value.accumulate_grad(&dy)?;
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn local_grads(&self, i: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Param | Op::Constant => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                if self.nodes[a.0].needs_grad {
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::row_major(dy, n),
                        MatRef::transposed(self.data(*b), n),
                        0.0,
                        &mut da,
                        0,
                        k,
                    );
                }
                if self.nodes[b.0].needs_grad {
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(self.data(*a), k),
                        MatRef::row_major(dy, n),
                        0.0,
                        &mut db,
                        0,
                        n,
                    );
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::Mul(a, b) => vec![
                (*a, zip_map(dy, self.data(*b), |g, y| g * y)),
                (*b, zip_map(dy, self.data(*a), |g, x| g * x)),
            ],
            Op::Scale(a, f) => vec![(*a, dy.iter().map(|g| g * f).collect())],
            Op::Silu(a) => {
                let d = zip_map(dy, self.data(*a), |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                });
                vec![(*a, d)]
            }
            Op::Softplus(a) => vec![(*a, zip_map(dy, self.data(*a), |g, x| g * sigmoid(x)))],
            Op::Recip(a) => vec![(*a, zip_map(dy, out, |g, y| -g * y * y))],
            Op::Sum(a) => vec![(*a, vec![dy[0]; self.data(*a).len()])],
            Op::RmsNorm { x, gain, inv_rms } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (xs, g) = (self.data(*x), self.data(*gain));
                let mut dx = vec![0.0; rows * cols];
                let mut dg = vec![0.0; cols];
                for r in 0..rows {
                    let inv = inv_rms[r];
                    let row = &xs[r * cols..(r + 1) * cols];
                    let dyr = &dy[r * cols..(r + 1) * cols];
                    let dot: f64 = (0..cols).map(|c| dyr[c] * g[c] * row[c]).sum();
                    let coef = inv * inv * inv * dot / cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = inv * dyr[c] * g[c] - row[c] * coef;
                        dg[c] += dyr[c] * row[c] * inv;
                    }
                }
                vec![(*x, dx), (*gain, dg)]
            }
            Op::Embedding { table, ids } => {
                let dim = self.shape(*table)[1];
                let mut dt = vec![0.0; self.data(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * dim..(id + 1) * dim]
                        .iter_mut()
                        .zip(&dy[r * dim..(r + 1) * dim])
                        .for_each(|(a, b)| *a += b);
                }
                vec![(*table, dt)]
            }
            Op::Rotary {
                x,
                seq,
                head_dim,
                theta,
            } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = dy.to_vec();
                rotate(&mut dx, rows, cols, *seq, *head_dim, *theta, -1.0);
                vec![(*x, dx)]
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            } => self.attention_grads(*q, *k, *v, geom, probs, dy),
            Op::SoftmaxRows(x) => {
                let cols = self.shape(*x)[1];
                let mut dx = vec![0.0; dy.len()];
                for ((dxr, dyr), yr) in dx
                    .chunks_mut(cols)
                    .zip(dy.chunks(cols))
                    .zip(out.chunks(cols))
                {
                    let dot: f64 = dyr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dxr[c] = yr[c] * (dyr[c] - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::GatherRows { x, idx } => {
                let cols = self.shape(*x)[1];
                let mut dx = vec![0.0; self.data(*x).len()];
                for (r, &src) in idx.iter().enumerate() {
                    dx[src * cols..(src + 1) * cols]
                        .iter_mut()
                        .zip(&dy[r * cols..(r + 1) * cols])
                        .for_each(|(a, b)| *a += b);
                }
                vec![(*x, dx)]
            }
            Op::GatherElems { x, idx } => {
                let mut dx = vec![0.0; self.data(*x).len()];
                for (g, &src) in dy.iter().zip(idx) {
                    dx[src] += g;
                }
                vec![(*x, dx)]
            }
            Op::ScaleRows { x, s } => {
                let cols = self.shape(*x)[1];
                let (xs, ss) = (self.data(*x), self.data(*s));
                let dx = (0..dy.len()).map(|i| dy[i] * ss[i / cols]).collect();
                let ds = (0..ss.len())
                    .map(|r| (0..cols).map(|c| dy[r * cols + c] * xs[r * cols + c]).sum())
                    .collect();
                vec![(*x, dx), (*s, ds)]
            }
            Op::ScatterAdd { parts } => {
                let cols = node.value.cols();
                parts
                    .iter()
                    .map(|(p, idx)| {
                        let mut dp = Vec::with_capacity(idx.len() * cols);
                        for &dst in idx {
                            dp.extend_from_slice(&dy[dst * cols..(dst + 1) * cols]);
                        }
                        (*p, dp)
                    })
                    .collect()
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = self.shape(*logits)[1];
                let scale = dy[0] / targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] -= scale;
                }
                vec![(*logits, d)]
            }
        }
    }

    fn attention_grads(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geom: &AttentionGeometry,
        probs: &[f64],
        dy: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (s, hd) = (geom.seq, geom.head_dim);
        let (qc, kc) = (geom.q_cols(), geom.kv_cols());
        let group = geom.heads / geom.kv_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![0.0; qs.len()];
        let mut dk = vec![0.0; ks.len()];
        let mut dv = vec![0.0; vs.len()];
        let mut dp = vec![0.0; s * s];
        for b in 0..geom.batch {
            for h in 0..geom.heads {
                let kvh = h / group;
                let q_off = b * s * qc + h * hd;
                let kv_off = b * s * kc + kvh * hd;
                let p = &probs[(b * geom.heads + h) * s * s..][..s * s];
                // dP = dO . V^T
                gemm(
                    s,
                    hd,
                    s,
                    MatRef::row_major(dy, qc).at(q_off),
                    MatRef::transposed(vs, kc).at(kv_off),
                    0.0,
                    &mut dp,
                    0,
                    s,
                );
                // dV += P^T . dO
                gemm(
                    s,
                    s,
                    hd,
                    MatRef::transposed(p, s),
                    MatRef::row_major(dy, qc).at(q_off),
                    1.0,
                    &mut dv,
                    kv_off,
                    kc,
                );
                for i in 0..s {
                    let pr = &p[i * s..(i + 1) * s];
                    let dr = &mut dp[i * s..(i + 1) * s];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..s {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                // dQ += dS . K ; dK += dS^T . Q
                gemm(
                    s,
                    s,
                    hd,
                    MatRef::row_major(&dp, s),
                    MatRef::row_major(ks, kc).at(kv_off),
                    1.0,
                    &mut dq,
                    q_off,
                    qc,
                );
                gemm(
                    s,
                    s,
                    hd,
                    MatRef::transposed(&dp, s),
                    MatRef::row_major(qs, qc).at(q_off),
                    1.0,
                    &mut dk,
                    kv_off,
                    kc,
                );
            }
        }
        vec![(q, dq), (k, dk), (v, dv)]
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

/// Rotates adjacent pairs within each head by `sign * pos * theta^(-2i/head_dim)`.
fn rotate(
    data: &mut [f64],
    rows: usize,
    cols: usize,
    seq: usize,
    head_dim: usize,
    theta: f64,
    sign: f64,
) {
    let half = head_dim / 2;
    for r in 0..rows {
        let pos = (r % seq) as f64;
        for head in 0..cols / head_dim {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
                let (sin, cos) = (sign * pos * freq).sin_cos();
                let base = r * cols + head * head_dim + 2 * i;
                let (x0, x1) = (data[base], data[base + 1]);
                data[base] = x0 * cos - x1 * sin;
                data[base + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_counts_macs_and_backprops() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.param(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
        assert_eq!(tape.macs(), 2);
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.param(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert!(tape.grad(a).is_none());
        assert!(tape.grad(b).is_some());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, -2.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let t = tape.param(Tensor::zeros(vec![4, 2]));
        assert!(matches!(tape.embedding(t, &[4]), Err(Error::Input(_))));
    }

    #[test]
    fn attention_first_position_sees_only_itself() {
        let geom = AttentionGeometry {
            batch: 1,
            seq: 3,
            heads: 1,
            kv_heads: 1,
            head_dim: 2,
        };
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_fn(vec![3, 2], |i| i as f64 * 0.3));
        let k = tape.constant(Tensor::from_fn(vec![3, 2], |i| 1.0 - i as f64 * 0.2));
        let v = tape.constant(Tensor::from_fn(vec![3, 2], |i| i as f64));
        let o = tape.attention(q, k, v, geom).unwrap();
        assert_eq!(tape.value(o).row(0), &[0.0, 1.0]);
        assert_eq!(tape.macs(), 2 * 9 * 2);
    }

    #[test]
    fn rotary_is_norm_preserving_and_identity_at_position_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![4, 4], |i| (i as f64).sin()));
        let r = tape.rotary(x, 4, 4, 10_000.0).unwrap();
        assert_eq!(tape.value(r).row(0), tape.value(x).row(0));
        for row in 0..4 {
            let n0: f64 = tape.value(x).row(row).iter().map(|v| v * v).sum();
            let n1: f64 = tape.value(r).row(row).iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![3, 512]));
        let l = tape.cross_entropy(logits, &[0, 7, 511]).unwrap();
        assert!((tape.value(l).data()[0] - 512f64.ln()).abs() < 1e-12);
        assert!(matches!(
            tape.cross_entropy(logits, &[]),
            Err(Error::Input(_))
        ));
    }
}
