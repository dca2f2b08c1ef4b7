//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node whose inputs are earlier nodes, so the
//! node order is already a topological order and `backward` is a single
//! reverse sweep. Values are never mutated after they are recorded.

use crate::error::{contract, Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, batched: bool },
    TransposeLast(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    PrependToken { x: Var, token: Var },
    SelectToken { x: Var, index: usize },
    TokenMix { mix: Var, z: Var },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    KlDivergence { logits: Var, student: Vec<f64>, teacher: Vec<f64>, temperature: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Counters from one backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    pub visited: usize,
    pub recorded: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn leading(shape: &[usize], trailing: usize) -> usize {
    shape[..shape.len() - trailing].iter().product()
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

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        value.set_requires_grad(rg);
        value.zero_grad();
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t`. Gradients are tracked when `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.zero_grad();
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Records a tracked leaf regardless of the tensor's own flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone().with_requires_grad(true);
        value.zero_grad();
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut value = t.with_requires_grad(false);
        value.zero_grad();
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// The gradient as a tensor shaped like the value, zeros when absent.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match value.grad() {
            Some(g) => Tensor::new(value.shape(), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias, positional embedding).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add_broadcast", a, b)?;
        let bd = self.data(b);
        let n = bd.len().max(1);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x + bd[i % n]).collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, Op::AddBroadcast(a, b), &[a, b]))
    }

    /// `a ⊙ b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul_broadcast", a, b)?;
        let bd = self.data(b);
        let n = bd.len().max(1);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x * bd[i % n]).collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, Op::MulBroadcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let out = Tensor::new(self.shape(a), data)?;
        Ok(self.push(out, Op::Scale(a, c), &[a]))
    }

    /// Matrix product over the last two axes.
    ///
    /// A rank-2 `b` is shared by every leading index of `a`; otherwise both
    /// operands must carry identical leading (batch) axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let m = sa[sa.len() - 2];
        if sb.len() == 2 {
            let rows = leading(&sa, 1);
            let mut out = vec![0.0; rows * n];
            gemm(self.data(a), self.data(b), &mut out, rows, k, n);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            let t = Tensor::new(&shape, out)?;
            return Ok(self.push(t, Op::MatMul { a, b, batched: false }, &[a, b]));
        }
        if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch = leading(&sa, 2);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for bi in 0..batch {
            gemm(
                &ad[bi * m * k..(bi + 1) * m * k],
                &bd[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, batched: true }, &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        contract!(s.len() >= 2, "transpose needs rank >= 2, got {:?}", s);
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = leading(&s, 2);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let o = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[o + j * r + i] = src[o + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 1, l - 2);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::TransposeLast(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape, self.data(a).to_vec())
            .map_err(|_| Error::shape("reshape", self.shape(a), shape))?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Row-wise softmax over the last axis, stabilized by the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let c = *s.last().ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        let src = self.data(a);
        if src.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = vec![0.0; src.len()];
        for (row, dst) in src.chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(row, dst);
        }
        let t = Tensor::new(&s, out)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Per-row normalization over the last axis followed by an affine map.
    /// Constant rows normalize to exactly zero.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::Contract("layer_norm of a scalar".into()))?;
        contract!(d >= 1, "layer_norm needs a non-empty last axis");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &s, self.shape(gamma)));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            let constant = row.iter().all(|&v| v == row[0]);
            for j in 0..d {
                let h = if constant { 0.0 } else { (row[j] - mean) * inv };
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(&s, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        ))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Gelu(a), &[a]))
    }

    /// `[B, N, H·d] → [B·H, N, d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        contract!(s.len() == 3 && heads > 0 && s[2] % heads == 0, "split_heads: shape {:?} with {} heads", s, heads);
        let (b, n, dm) = (s[0], s[1], s[2]);
        let d = dm / heads;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for t in 0..n {
                for h in 0..heads {
                    let from = (bi * n + t) * dm + h * d;
                    let to = ((bi * heads + h) * n + t) * d;
                    out[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let t = Tensor::new(&[b * heads, n, d], out)?;
        Ok(self.push(t, Op::SplitHeads { x, heads }, &[x]))
    }

    /// `[B·H, N, d] → [B, N, H·d]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        contract!(s.len() == 3 && heads > 0 && s[0] % heads == 0, "merge_heads: shape {:?} with {} heads", s, heads);
        let (bh, n, d) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let dm = d * heads;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for t in 0..n {
                for h in 0..heads {
                    let to = (bi * n + t) * dm + h * d;
                    let from = ((bi * heads + h) * n + t) * d;
                    out[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let t = Tensor::new(&[b, n, dm], out)?;
        Ok(self.push(t, Op::MergeHeads { x, heads }, &[x]))
    }

    /// Prepends `token: [D]` to every sequence of `x: [B, N, D]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(token) != [s[2]] {
            return Err(Error::shape("prepend_token", &s, self.shape(token)));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let (src, tok) = (self.data(x), self.data(token));
        let mut out = Vec::with_capacity(b * (n + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(tok);
            out.extend_from_slice(&src[bi * n * d..(bi + 1) * n * d]);
        }
        let t = Tensor::new(&[b, n + 1, d], out)?;
        Ok(self.push(t, Op::PrependToken { x, token }, &[x, token]))
    }

    /// Picks token `index` of every sequence: `[B, N, D] → [B, D]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        contract!(s.len() == 3 && index < s[1], "select_token {} from shape {:?}", index, s);
        let (b, n, d) = (s[0], s[1], s[2]);
        let src = self.data(x);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let o = (bi * n + index) * d;
            out.extend_from_slice(&src[o..o + d]);
        }
        let t = Tensor::new(&[b, d], out)?;
        Ok(self.push(t, Op::SelectToken { x, index }, &[x]))
    }

    /// Left-multiplies every sequence by a token-mixing matrix:
    /// `mix: [M, N]`, `z: [B, N, D]` → `[B, M, D]`.
    pub fn token_mix(&mut self, mix: Var, z: Var) -> Result<Var> {
        let (sm, sz) = (self.shape(mix).to_vec(), self.shape(z).to_vec());
        if sm.len() != 2 || sz.len() != 3 || sm[1] != sz[1] {
            return Err(Error::shape("token_mix", &sm, &sz));
        }
        let (mm, n) = (sm[0], sm[1]);
        let (b, d) = (sz[0], sz[2]);
        let mut out = vec![0.0; b * mm * d];
        let (md, zd) = (self.data(mix), self.data(z));
        for bi in 0..b {
            gemm(md, &zd[bi * n * d..(bi + 1) * n * d], &mut out[bi * mm * d..(bi + 1) * mm * d], mm, n, d);
        }
        let t = Tensor::new(&[b, mm, d], out)?;
        Ok(self.push(t, Op::TokenMix { mix, z }, &[mix, z]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.data(a).iter().sum());
        Ok(self.push(t, Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len();
        contract!(n > 0, "mean of an empty tensor");
        let t = Tensor::scalar(self.data(a).iter().sum::<f64>() / n as f64);
        Ok(self.push(t, Op::Mean(a), &[a]))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits: [B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        contract!(s.len() == 2 && s[0] == labels.len(), "cross_entropy: logits {:?} vs {} labels", s, labels.len());
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            loss += lse - row[label];
            softmax_row(row, &mut probs[i * c..(i + 1) * c]);
        }
        let t = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    /// Batch-mean `KL(q ‖ p)` between tempered softmaxes, `p` from the
    /// recorded `logits` and `q` from the detached `teacher_logits`.
    pub fn kl_divergence(&mut self, logits: Var, teacher_logits: &Tensor, temperature: f64) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || teacher_logits.shape() != s.as_slice() {
            return Err(Error::shape("kl_divergence", &s, teacher_logits.shape()));
        }
        contract!(temperature > 0.0, "temperature must be positive, got {}", temperature);
        let (b, c) = (s[0], s[1]);
        let scaled = |row: &[f64]| row.iter().map(|v| v / temperature).collect::<Vec<_>>();
        let src = self.data(logits);
        let mut student = vec![0.0; b * c];
        let mut teacher = vec![0.0; b * c];
        let mut kl = 0.0;
        for i in 0..b {
            let p = scaled(&src[i * c..(i + 1) * c]);
            let q = scaled(&teacher_logits.data()[i * c..(i + 1) * c]);
            let (lp, lq) = (log_sum_exp(&p), log_sum_exp(&q));
            for j in 0..c {
                let log_p = p[j] - lp;
                let log_q = q[j] - lq;
                let qj = log_q.exp();
                if qj > 0.0 {
                    kl += qj * (log_q - log_p);
                }
                student[i * c + j] = log_p.exp();
                teacher[i * c + j] = qj;
            }
        }
        let t = Tensor::scalar(kl / b as f64);
        Ok(self.push(
            t,
            Op::KlDivergence { logits, student, teacher, temperature },
            &[logits],
        ))
    }

    /// Propagates d(loss)/d(node) to every tracked node recorded before
    /// `loss`, adding into any gradients left by earlier sweeps.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardStats> {
        contract!(
            self.nodes[loss.0].value.numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            visited += 1;
            self.backprop_node(i, &g, &mut grads)?;
            self.nodes[i].value.accumulate_grad(&g)?;
        }
        Ok(BackwardStats { visited, recorded: loss.0 + 1 })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let tracked = |v: Var| nodes[v.0].value.requires_grad();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !tracked(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if tracked(*a) {
                    send(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if tracked(*b) {
                    send(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddBroadcast(a, b) => {
                send(*a, g.to_vec());
                if tracked(*b) {
                    let n = val(*b).len();
                    let mut gb = vec![0.0; n];
                    for (j, x) in g.iter().enumerate() {
                        gb[j % n] += x;
                    }
                    send(*b, gb);
                }
            }
            Op::MulBroadcast(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = bv.len();
                if tracked(*a) {
                    send(*a, g.iter().enumerate().map(|(j, x)| x * bv[j % n]).collect());
                }
                if tracked(*b) {
                    let mut gb = vec![0.0; n];
                    for (j, x) in g.iter().enumerate() {
                        gb[j % n] += x * av[j];
                    }
                    send(*b, gb);
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
            Op::MatMul { a, b, batched } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let k = sa[sa.len() - 1];
                let n = sb[sb.len() - 1];
                let (av, bv) = (val(*a), val(*b));
                if !batched {
                    let rows = leading(sa, 1);
                    if tracked(*a) {
                        let mut ga = vec![0.0; rows * k];
                        gemm_nt(g, bv, &mut ga, rows, k, n);
                        send(*a, ga);
                    }
                    if tracked(*b) {
                        let mut gb = vec![0.0; k * n];
                        gemm_tn(av, g, &mut gb, rows, k, n);
                        send(*b, gb);
                    }
                } else {
                    let m = sa[sa.len() - 2];
                    let batch = leading(sa, 2);
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        gemm_nt(gs, &bv[bi * k * n..(bi + 1) * k * n], &mut ga[bi * m * k..(bi + 1) * m * k], m, k, n);
                        gemm_tn(&av[bi * m * k..(bi + 1) * m * k], gs, &mut gb[bi * k * n..(bi + 1) * k * n], m, k, n);
                    }
                    send(*a, ga);
                    send(*b, gb);
                }
            }
            Op::TransposeLast(a) => {
                // g has the transposed shape; transpose it back.
                let s = nodes[i].value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = leading(s, 2);
                let mut ga = vec![0.0; g.len()];
                for b in 0..batch {
                    let o = b * r * c;
                    for p in 0..r {
                        for q in 0..c {
                            ga[o + q * r + p] = g[o + p * c + q];
                        }
                    }
                }
                send(*a, ga);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Softmax(a) => {
                let c = *nodes[i].value.shape().last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for ((y, gr), dst) in out.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        dst[j] = y[j] * (gr[j] - dot);
                    }
                }
                send(*a, ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = val(*gamma);
                let d = gv.len();
                let rows = rstd.len();
                if tracked(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let gh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghh = gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (gh[j] - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                    send(*x, gx);
                }
                if tracked(*gamma) || tracked(*beta) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                            gb[j] += g[r * d + j];
                        }
                    }
                    send(*gamma, gg);
                    send(*beta, gb);
                }
            }
            Op::Gelu(a) => {
                let av = val(*a);
                send(*a, g.iter().zip(av).map(|(x, &v)| x * gelu_grad(v)).collect());
            }
            Op::SplitHeads { x, heads } => {
                let s = nodes[x.0].value.shape();
                let (b, n, dm) = (s[0], s[1], s[2]);
                let d = dm / heads;
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for t in 0..n {
                        for h in 0..*heads {
                            let to = (bi * n + t) * dm + h * d;
                            let from = ((bi * heads + h) * n + t) * d;
                            gx[to..to + d].copy_from_slice(&g[from..from + d]);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::MergeHeads { x, heads } => {
                let s = nodes[x.0].value.shape();
                let (bh, n, d) = (s[0], s[1], s[2]);
                let b = bh / heads;
                let dm = d * heads;
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for t in 0..n {
                        for h in 0..*heads {
                            let from = (bi * n + t) * dm + h * d;
                            let to = ((bi * heads + h) * n + t) * d;
                            gx[to..to + d].copy_from_slice(&g[from..from + d]);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::PrependToken { x, token } => {
                let s = nodes[x.0].value.shape();
                let (b, n, d) = (s[0], s[1], s[2]);
                let mut gx = Vec::with_capacity(b * n * d);
                let mut gt = vec![0.0; d];
                for bi in 0..b {
                    let o = bi * (n + 1) * d;
                    gt.iter_mut().zip(&g[o..o + d]).for_each(|(a, v)| *a += v);
                    gx.extend_from_slice(&g[o + d..o + (n + 1) * d]);
                }
                send(*x, gx);
                send(*token, gt);
            }
            Op::SelectToken { x, index } => {
                let s = nodes[x.0].value.shape();
                let (b, n, d) = (s[0], s[1], s[2]);
                let mut gx = vec![0.0; b * n * d];
                for bi in 0..b {
                    let o = (bi * n + index) * d;
                    gx[o..o + d].copy_from_slice(&g[bi * d..(bi + 1) * d]);
                }
                send(*x, gx);
            }
            Op::TokenMix { mix, z } => {
                let (sm, sz) = (nodes[mix.0].value.shape(), nodes[z.0].value.shape());
                let (mm, n) = (sm[0], sm[1]);
                let (b, d) = (sz[0], sz[2]);
                let (mv, zv) = (val(*mix), val(*z));
                if tracked(*mix) {
                    let mut gm = vec![0.0; mm * n];
                    for bi in 0..b {
                        gemm_nt(&g[bi * mm * d..(bi + 1) * mm * d], &zv[bi * n * d..(bi + 1) * n * d], &mut gm, mm, n, d);
                    }
                    send(*mix, gm);
                }
                if tracked(*z) {
                    let mut gz = vec![0.0; b * n * d];
                    for bi in 0..b {
                        gemm_tn(mv, &g[bi * mm * d..(bi + 1) * mm * d], &mut gz[bi * n * d..(bi + 1) * n * d], mm, n, d);
                    }
                    send(*z, gz);
                }
            }
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * c + l] -= scale;
                }
                send(*logits, gl);
            }
            Op::KlDivergence { logits, student, teacher, temperature } => {
                let b = nodes[logits.0].value.shape()[0];
                let scale = g[0] / (b as f64 * temperature);
                send(*logits, student.iter().zip(teacher).map(|(p, q)| (p - q) * scale).collect());
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_row(row: &[f64], dst: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &x) in dst.iter_mut().zip(row) {
        *d = (x - max).exp();
        total += *d;
    }
    dst.iter_mut().for_each(|d| *d /= total);
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
