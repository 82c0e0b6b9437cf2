//! Arena-backed reverse-mode autodiff.
//!
//! Every op appends one node; node order is a topological order, so backward
//! is a single reverse sweep. Parameters enter as leaves and read their
//! gradients back out after [`Tape::backward`].

use super::kernels::{self, gemm, Layout};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape and masking of one fused multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub causal: bool,
    /// `[batch * k_len]`, `true` marks a key position that may be attended.
    pub key_mask: Option<Vec<bool>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Exp {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Minimum {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        src: Var,
        index: Vec<Option<usize>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
        count: usize,
    },
    TokenLogProbs {
        logits: Var,
        picks: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The computation tape: an ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Adds a leaf; its gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
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

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a[..., k] x b[k, n] -> [..., n]`; leading dimensions of `a` act as batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            Layout::row_major(k),
            self.data(b),
            Layout::row_major(n),
            0.0,
            &mut out,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Self::tensor(shape, out), Op::MatMul { a, b }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Self::tensor(self.shape(a).to_vec(), data))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        Self::tensor(self.shape(x).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, ng))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("minimum", a, b, f64::min)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Minimum { a, b }, ng))
    }

    /// Adds a `[n]` bias to every row of `a[..., n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.shape(bias) != [n] {
            return Err(Error::dim("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.data(bias).to_vec();
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let t = Self::tensor(self.shape(a).to_vec(), data);
        let ng = self.ng(&[a, bias]);
        Ok(self.push(t, Op::AddRow { a, bias }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v * c);
        let ng = self.ng(&[x]);
        self.push(t, Op::Scale { x, c }, ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::exp);
        let ng = self.ng(&[x]);
        self.push(t, Op::Exp { x }, ng)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::gelu);
        let ng = self.ng(&[x]);
        self.push(t, Op::Gelu { x }, ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.map(x, |v| v.clamp(lo, hi));
        let ng = self.ng(&[x]);
        self.push(t, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let t = Tensor::new(t.shape().to_vec(), t.into_data())?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape { x }, ng))
    }

    /// Per-row normalisation over the trailing dimension, then `* gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if d < 2 {
            return Err(Error::Shape(format!("layer_norm needs d >= 2, got {d}")));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).rows();
        let mut xhat = vec![0.0; rows * d];
        let mut out = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        {
            let (xs, g, b) = (self.data(x), self.data(gain), self.data(bias));
            for r in 0..rows {
                rstd[r] = kernels::layer_norm_row(
                    &xs[r * d..(r + 1) * d],
                    g,
                    b,
                    &mut xhat[r * d..(r + 1) * d],
                    &mut out[r * d..(r + 1) * d],
                );
            }
        }
        let t = Self::tensor(self.shape(x).to_vec(), out);
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Softmax over the trailing dimension. Entries whose mask is `false` get
    /// exactly zero probability.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let n = self.value(x).cols();
        if let Some(m) = mask {
            if m.len() != self.value(x).len() {
                return Err(Error::dim("softmax_rows", self.shape(x), &[m.len()]));
            }
        }
        let mut out = self.data(x).to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let valid = |j: usize| mask.is_none_or(|m| m[r * n + j]);
            let max = (0..n)
                .filter(|&j| valid(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let mut total = 0.0;
            for j in 0..n {
                row[j] = if valid(j) { (row[j] - max).exp() } else { 0.0 };
                total += row[j];
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let t = Self::tensor(self.shape(x).to_vec(), out);
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Softmax { x }, ng))
    }

    /// Row lookup `table[ids[i]]`; output shape `out_shape` must end in `d`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: Vec<usize>) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be 2-D, got {ts:?}"
            )));
        }
        let (v, d) = (ts[0], ts[1]);
        if out_shape.iter().product::<usize>() != ids.len() * d || out_shape.last() != Some(&d) {
            return Err(Error::dim("embedding", &out_shape, &[ids.len(), d]));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Shape(format!("embedding id {id} out of range {v}")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            Self::tensor(out_shape, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Builds rows from `src` rows; `None` entries become zero rows.
    pub fn gather_rows(
        &mut self,
        src: Var,
        index: &[Option<usize>],
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let d = self.value(src).cols();
        let rows = self.value(src).rows();
        if out_shape.iter().product::<usize>() != index.len() * d || out_shape.last() != Some(&d) {
            return Err(Error::dim("gather_rows", &out_shape, &[index.len(), d]));
        }
        let s = self.data(src);
        let mut out = vec![0.0; index.len() * d];
        for (i, ix) in index.iter().enumerate() {
            if let Some(r) = *ix {
                if r >= rows {
                    return Err(Error::Shape(format!("gather row {r} out of range {rows}")));
                }
                out[i * d..(i + 1) * d].copy_from_slice(&s[r * d..(r + 1) * d]);
            }
        }
        let ng = self.ng(&[src]);
        Ok(self.push(
            Self::tensor(out_shape, out),
            Op::GatherRows {
                src,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q: [B, Tq, d]`, `k, v: [B, Tk, d]`. Masked keys (causal future or
    /// `key_mask == false`) are excluded from both the softmax and the
    /// weighted sum, so their stored values never influence the output.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::dim("attention", &sq, &sk));
        }
        let (b, tq, d) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Shape(format!(
                "{d} not divisible into {} heads",
                spec.heads
            )));
        }
        if spec.causal && tq != tk {
            return Err(Error::dim("causal attention", &sq, &sk));
        }
        if let Some(m) = &spec.key_mask {
            if m.len() != b * tk {
                return Err(Error::dim("attention mask", &[b, tk], &[m.len()]));
            }
        }
        let h = spec.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; b * h * tq * tk];
        let mut out = vec![0.0; b * tq * d];
        for bi in 0..b {
            for hi in 0..h {
                let off = hi * dh;
                for i in 0..tq {
                    let p = &mut probs[((bi * h + hi) * tq + i) * tk..][..tk];
                    let qi = &qd[(bi * tq + i) * d + off..][..dh];
                    let limit = if spec.causal { i + 1 } else { tk };
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..limit {
                        if key_valid(&spec, bi, tk, j) {
                            let kj = &kd[(bi * tk + j) * d + off..][..dh];
                            p[j] = kernels::dot(qi, kj) * scale;
                            max = max.max(p[j]);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        return Err(Error::DegenerateRow { row: bi * tq + i });
                    }
                    let mut total = 0.0;
                    for j in 0..limit {
                        if key_valid(&spec, bi, tk, j) {
                            p[j] = (p[j] - max).exp();
                            total += p[j];
                        }
                    }
                    let o = &mut out[(bi * tq + i) * d + off..][..dh];
                    for j in 0..limit {
                        if key_valid(&spec, bi, tk, j) {
                            p[j] /= total;
                            let vj = &vd[(bi * tk + j) * d + off..][..dh];
                            for (oo, vv) in o.iter_mut().zip(vj) {
                                *oo += p[j] * vv;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            Self::tensor(vec![b, tq, d], out),
            Op::Attention {
                q,
                k,
                v,
                batch: b,
                spec,
                probs,
            },
            ng,
        ))
    }

    /// Mean over non-ignored rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<Var> {
        let vsz = self.value(logits).cols();
        let rows = self.value(logits).rows();
        if targets.len() != rows {
            return Err(Error::dim(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let l = self.data(logits);
        let mut probs = vec![0.0; rows * vsz];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            if t >= vsz {
                return Err(Error::Shape(format!(
                    "target {t} outside vocabulary of {vsz}"
                )));
            }
            let row = &l[r * vsz..(r + 1) * vsz];
            let lse = kernels::log_sum_exp(row);
            total += lse - row[t];
            for (p, x) in probs[r * vsz..(r + 1) * vsz].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore: ignore_index,
                probs,
                count,
            },
            ng,
        ))
    }

    /// Log-probability of `target` at `row` for each `(row, target)` pick.
    ///
    /// `blocked[i]` lists tokens removed from the support of pick `i` before
    /// normalising, matching a sampler that assigns them zero probability.
    pub fn token_log_probs(
        &mut self,
        logits: Var,
        picks: &[(usize, usize)],
        blocked: &[Vec<usize>],
    ) -> Result<Var> {
        let vsz = self.value(logits).cols();
        let rows = self.value(logits).rows();
        if !blocked.is_empty() && blocked.len() != picks.len() {
            return Err(Error::dim(
                "token_log_probs",
                &[picks.len()],
                &[blocked.len()],
            ));
        }
        if picks.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let l = self.data(logits);
        let mut probs = vec![0.0; picks.len() * vsz];
        let mut out = Vec::with_capacity(picks.len());
        let mut row_buf = vec![0.0; vsz];
        for (i, &(r, t)) in picks.iter().enumerate() {
            if r >= rows || t >= vsz {
                return Err(Error::Shape(format!(
                    "pick ({r}, {t}) outside {rows}x{vsz}"
                )));
            }
            row_buf.copy_from_slice(&l[r * vsz..(r + 1) * vsz]);
            if let Some(bl) = blocked.get(i) {
                for &b in bl {
                    if b == t {
                        return Err(Error::Shape(format!("picked token {t} is blocked")));
                    }
                    row_buf[b] = f64::NEG_INFINITY;
                }
            }
            let lse = kernels::log_sum_exp(&row_buf);
            out.push(row_buf[t] - lse);
            for (p, x) in probs[i * vsz..(i + 1) * vsz].iter_mut().zip(&row_buf) {
                *p = (x - lse).exp();
            }
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Self::tensor(vec![picks.len()], out),
            Op::TokenLogProbs {
                logits,
                picks: picks.to_vec(),
                probs,
            },
            ng,
        ))
    }

    // ---- backward ------------------------------------------------------------

    /// Populates gradients of `loss` with respect to every tracked node.
    ///
    /// Gradients from any earlier pass are discarded first, so calling this
    /// twice yields identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Rank(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (n, g) in self.nodes.iter_mut().zip(grads) {
            if n.needs_grad {
                n.value.grad = g;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let k = self.shape(*b)[0];
                let n = self.shape(*b)[1];
                let m = self.value(*a).len() / k;
                if self.nodes[a.0].needs_grad {
                    let ga = slot(grads, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        Layout::row_major(n),
                        self.data(*b),
                        Layout::transposed(n),
                        1.0,
                        ga,
                    );
                }
                if self.nodes[b.0].needs_grad {
                    let gb = slot(grads, *b, k * n);
                    gemm(
                        k,
                        m,
                        n,
                        self.data(*a),
                        Layout::transposed(k),
                        g,
                        Layout::row_major(n),
                        1.0,
                        gb,
                    );
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, 1.0));
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gi * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((x, gi), y) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gi * y;
                    }
                });
            }
            Op::Minimum { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        if ad[j] <= bd[j] {
                            ga[j] += g[j];
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for j in 0..gb.len() {
                        if ad[j] > bd[j] {
                            gb[j] += g[j];
                        }
                    }
                });
            }
            Op::AddRow { a, bias } => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *bias, |gb| {
                    for row in g.chunks(gb.len()) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::Scale { x, c } => self.acc(grads, *x, |gx| axpy(gx, g, *c)),
            Op::Exp { x } => self.acc(grads, *x, |gx| {
                for ((d, gi), y) in gx.iter_mut().zip(g).zip(out) {
                    *d += gi * y;
                }
            }),
            Op::Gelu { x } => {
                let xd = self.data(*x);
                self.acc(grads, *x, |gx| {
                    for ((d, gi), xv) in gx.iter_mut().zip(g).zip(xd) {
                        *d += gi * kernels::gelu_grad(*xv);
                    }
                })
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.data(*x);
                self.acc(grads, *x, |gx| {
                    for ((d, gi), xv) in gx.iter_mut().zip(g).zip(xd) {
                        if *xv >= *lo && *xv <= *hi {
                            *d += gi;
                        }
                    }
                })
            }
            Op::Sum { x } => self.acc(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean { x } => {
                let n = self.value(*x).len() as f64;
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::Reshape { x } => self.acc(grads, *x, |gx| axpy(gx, g, 1.0)),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*x).cols();
                let gd = self.data(*gain);
                self.acc(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gd[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xh[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rs * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                self.acc(grads, *gain, |gg| {
                    for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xh[j];
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for gr in g.chunks(d) {
                        axpy(gb, gr, 1.0);
                    }
                });
            }
            Op::Softmax { x } => {
                let n = node.value.cols();
                self.acc(grads, *x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let s = kernels::dot(gr, yr);
                        for j in 0..n {
                            gxr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                })
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                self.acc(grads, *table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d], 1.0);
                    }
                })
            }
            Op::GatherRows { src, index } => {
                let d = self.value(*src).cols();
                self.acc(grads, *src, |gs| {
                    for (i, ix) in index.iter().enumerate() {
                        if let Some(r) = *ix {
                            axpy(&mut gs[r * d..(r + 1) * d], &g[i * d..(i + 1) * d], 1.0);
                        }
                    }
                })
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, *batch, spec, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let vsz = self.value(*logits).cols();
                let c = g[0] / *count as f64;
                self.acc(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let row = &mut gl[r * vsz..(r + 1) * vsz];
                        axpy(row, &probs[r * vsz..(r + 1) * vsz], c);
                        row[t] -= c;
                    }
                })
            }
            Op::TokenLogProbs {
                logits,
                picks,
                probs,
            } => {
                let vsz = self.value(*logits).cols();
                self.acc(grads, *logits, |gl| {
                    for (i, &(r, t)) in picks.iter().enumerate() {
                        let row = &mut gl[r * vsz..(r + 1) * vsz];
                        axpy(row, &probs[i * vsz..(i + 1) * vsz], -g[i]);
                        row[t] += g[i];
                    }
                })
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        b: usize,
        spec: &AttentionSpec,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let sq = self.shape(q);
        let (tq, d) = (sq[1], sq[2]);
        let tk = self.shape(k)[1];
        let h = spec.heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; tk];
        for bi in 0..b {
            for hi in 0..h {
                let off = hi * dh;
                for i in 0..tq {
                    let p = &probs[((bi * h + hi) * tq + i) * tk..][..tk];
                    let go = &g[(bi * tq + i) * d + off..][..dh];
                    let limit = if spec.causal { i + 1 } else { tk };
                    let mut s = 0.0;
                    for j in 0..limit {
                        if key_valid(spec, bi, tk, j) {
                            let vrow = (bi * tk + j) * d + off;
                            dp[j] = kernels::dot(go, &vd[vrow..vrow + dh]);
                            s += p[j] * dp[j];
                            for (x, gg) in dv[vrow..vrow + dh].iter_mut().zip(go) {
                                *x += p[j] * gg;
                            }
                        }
                    }
                    let qrow = (bi * tq + i) * d + off;
                    for j in 0..limit {
                        if key_valid(spec, bi, tk, j) {
                            let ds = p[j] * (dp[j] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = (bi * tk + j) * d + off;
                            for c in 0..dh {
                                dq[qrow + c] += ds * kd[krow + c];
                                dk[krow + c] += ds * qd[qrow + c];
                            }
                        }
                    }
                }
            }
        }
        self.acc(grads, q, |gq| axpy(gq, &dq, 1.0));
        self.acc(grads, k, |gk| axpy(gk, &dk, 1.0));
        self.acc(grads, v, |gv| axpy(gv, &dv, 1.0));
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if self.nodes[v.0].needs_grad {
            let n = self.value(v).len();
            f(slot(grads, v, n));
        }
    }
}

fn key_valid(spec: &AttentionSpec, b: usize, tk: usize, j: usize) -> bool {
    spec.key_mask.as_ref().is_none_or(|m| m[b * tk + j])
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy += a * xx;
    }
}
