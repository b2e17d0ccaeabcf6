use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Value substituted for masked-out attention scores. Finite, and far enough
/// below any real score that `exp` underflows to exactly zero.
pub const MASK_VALUE: f64 = -1e30;

/// Handle to a node of a [`Graph`].
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
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Softmax(Var),
    RmsNorm { x: Var, inv_rms: Vec<f64> },
    Reshape(Var),
    SwapAxes12(Var),
    CausalMask(Var),
    Embedding { table: Var, ids: Vec<usize> },
    ConcatSeq(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// the node list is already a topological order and the backward pass simply
/// walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Degenerate(format!("{op} produced a non-finite value")))
    }
}

/// Number of times `small` repeats to fill `big` when `small` is a suffix of it.
fn broadcast_repeats(big: &[usize], small: &[usize]) -> Option<usize> {
    if small.len() > big.len() || big[big.len() - small.len()..] != *small {
        return None;
    }
    Some(big[..big.len() - small.len()].iter().product())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn derived(&mut self, shape: &[usize], data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad,
        };
        self.push(value, op)
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Clears every gradient buffer, leaves included.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.derived(&[m, n], out, &[a, b], Op::MatMul(a, b)))
    }

    /// Batched product of `[B,m,k]` with `[B,k,n]` (or `[B,n,k]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            let ci = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::matmul_bt_acc(ai, bi, ci, m, k, n);
            } else {
                kernels::matmul_acc(ai, bi, ci, m, k, n);
            }
        }
        Ok(self.derived(&[batch, m, n], out, &[a, b], Op::BatchMatMul { a, b, trans_b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Contract(format!("transpose expects 2-D, got {s:?}")));
        }
        let out = kernels::transpose(self.value(a).data(), s[0], s[1]);
        Ok(self.derived(&[s[1], s[0]], out, &[a], Op::Transpose(a)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if broadcast_repeats(&sa, &sb).is_none() {
            return Err(Error::shape(name, &sa, &sb));
        }
        let bd = self.value(b).data();
        let nb = bd.len();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        Ok(self.derived(&sa, out, &[a, b], op))
    }

    /// `a + b`, where `b` has `a`'s shape or a trailing suffix of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.derived(&shape, out, &[a], Op::Scale(a, c))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let shape = self.shape(a).to_vec();
        self.derived(&shape, out, &[a], Op::Silu(a))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        self.derived(&shape, out, &[a], Op::Softmax(a))
    }

    /// Root-mean-square normalization over the last dimension, without gain.
    pub fn rmsnorm(&mut self, a: Var, eps: f64) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap();
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(x.len());
        let mut inv_rms = Vec::with_capacity(x.len() / d);
        for row in x.chunks_exact(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().map(|v| v * r));
        }
        self.derived(&shape, out, &[a], Op::RmsNorm { x: a, inv_rms })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).data().to_vec();
        Ok(self.derived(shape, out, &[a], Op::Reshape(a)))
    }

    /// `[a,b,c,d] -> [a,c,b,d]`, used to move heads next to the batch axis.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Contract(format!("swap_axes12 expects 4-D, got {s:?}")));
        }
        let out = swap12(self.value(x).data(), s[0], s[1], s[2], s[3]);
        Ok(self.derived(&[s[0], s[2], s[1], s[3]], out, &[x], Op::SwapAxes12(x)))
    }

    /// Replaces entries above the diagonal of each trailing `[S,S]` block with
    /// [`MASK_VALUE`].
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = s.len();
        if n < 2 || s[n - 1] != s[n - 2] {
            return Err(Error::Contract(format!("causal_mask expects [..,S,S], got {s:?}")));
        }
        let t = s[n - 1];
        let mut out = self.value(x).data().to_vec();
        for block in out.chunks_exact_mut(t * t) {
            for i in 0..t {
                for v in &mut block[i * t + i + 1..(i + 1) * t] {
                    *v = MASK_VALUE;
                }
            }
        }
        Ok(self.derived(&s, out, &[x], Op::CausalMask(x)))
    }

    /// Gathers rows of a `[V,D]` table; result is `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Contract(format!("embedding table must be 2-D, got {s:?}")));
        }
        if ids.is_empty() {
            return Err(Error::Degenerate("embedding lookup with no ids".into()));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!("token id {bad} out of range for vocab {v}")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        Ok(self.derived(
            &[ids.len(), d],
            out,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenates `[B,S1,D]` and `[B,S2,D]` along the sequence axis.
    pub fn concat_seq(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::shape("concat_seq", &sa, &sb));
        }
        let (batch, s1, s2, d) = (sa[0], sa[1], sb[1], sa[2]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * (s1 + s2) * d);
        for i in 0..batch {
            out.extend_from_slice(&ad[i * s1 * d..(i + 1) * s1 * d]);
            out.extend_from_slice(&bd[i * s2 * d..(i + 1) * s2 * d]);
        }
        Ok(self.derived(&[batch, s1 + s2, d], out, &[a, b], Op::ConcatSeq(a, b)))
    }

    /// Mean token-level negative log-likelihood over positions where `mask`
    /// is set. `logits` is `[.., vocab]`; `targets` and `mask` have one entry
    /// per row of the flattened logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let vocab = *s.last().unwrap();
        let rows = self.value(logits).numel() / vocab;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape("cross_entropy", &s, &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate("cross-entropy mask selects no positions".into()));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        for (r, (row, p)) in ld.chunks_exact(vocab).zip(probs.chunks_exact_mut(vocab)).enumerate() {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Contract(format!("target {t} out of range for vocab {vocab}")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - lse).exp();
            }
        }
        let loss = total / count as f64;
        check_finite("cross_entropy", &[loss])?;
        Ok(self.derived(
            &[1],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.derived(&[1], vec![total], &[a], Op::Sum(a))
    }

    /// Reverse pass from a scalar `loss`. Gradients of intermediate nodes are
    /// recomputed on every call; leaf gradients accumulate across calls until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.value.grad = None;
            }
        }
        if !self.needs(loss) {
            return Ok(());
        }
        if matches!(self.nodes[loss.0].op, Op::Leaf) {
            self.accumulate(loss, vec![1.0]);
            return Ok(());
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = self.nodes[idx].value.grad.take() else {
                continue;
            };
            self.propagate(idx, &upstream)?;
            self.nodes[idx].value.grad = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0].value;
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
            None => node.grad = Some(g),
        }
    }

    fn propagate(&mut self, idx: usize, up: &[f64]) -> Result<()> {
        // Each arm computes input gradients from immutable state, then accumulates.
        let mut out: Vec<(Var, Vec<f64>)> = Vec::with_capacity(2);
        {
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            let need = |v: Var| self.nodes[v.0].value.requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    if need(*a) {
                        let mut ga = vec![0.0; m * k];
                        kernels::matmul_bt_acc(up, &tb.data, &mut ga, m, n, k);
                        out.push((*a, ga));
                    }
                    if need(*b) {
                        let mut gb = vec![0.0; k * n];
                        kernels::matmul_at_acc(&ta.data, up, &mut gb, m, k, n);
                        out.push((*b, gb));
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (batch, m, k) = (ta.shape[0], ta.shape[1], ta.shape[2]);
                    let n = node.value.shape[2];
                    let mut ga = need(*a).then(|| vec![0.0; batch * m * k]);
                    let mut gb = need(*b).then(|| vec![0.0; batch * k * n]);
                    for i in 0..batch {
                        let ui = &up[i * m * n..(i + 1) * m * n];
                        let ai = &ta.data[i * m * k..(i + 1) * m * k];
                        let bi = &tb.data[i * k * n..(i + 1) * k * n];
                        if let Some(ga) = ga.as_mut() {
                            let gi = &mut ga[i * m * k..(i + 1) * m * k];
                            if *trans_b {
                                // b is [n,k]: ga = up · b
                                kernels::matmul_acc(ui, bi, gi, m, n, k);
                            } else {
                                kernels::matmul_bt_acc(ui, bi, gi, m, n, k);
                            }
                        }
                        if let Some(gb) = gb.as_mut() {
                            let gi = &mut gb[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                // gb[n,k] = upᵀ · a
                                kernels::matmul_at_acc(ui, ai, gi, m, n, k);
                            } else {
                                kernels::matmul_at_acc(ai, ui, gi, m, k, n);
                            }
                        }
                    }
                    if let Some(ga) = ga {
                        out.push((*a, ga));
                    }
                    if let Some(gb) = gb {
                        out.push((*b, gb));
                    }
                }
                Op::Transpose(a) => {
                    let s = &node.value.shape;
                    out.push((*a, kernels::transpose(up, s[0], s[1])));
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if need(*a) {
                        out.push((*a, up.to_vec()));
                    }
                    if need(*b) {
                        let nb = val(*b).numel();
                        let mut gb = vec![0.0; nb];
                        for chunk in up.chunks_exact(nb) {
                            gb.iter_mut().zip(chunk).for_each(|(g, u)| *g += sign * u);
                        }
                        out.push((*b, gb));
                    }
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (&val(*a).data, &val(*b).data);
                    let nb = bd.len();
                    if need(*a) {
                        let ga = up.iter().enumerate().map(|(i, u)| u * bd[i % nb]).collect();
                        out.push((*a, ga));
                    }
                    if need(*b) {
                        let mut gb = vec![0.0; nb];
                        for (uc, ac) in up.chunks_exact(nb).zip(ad.chunks_exact(nb)) {
                            for ((g, u), x) in gb.iter_mut().zip(uc).zip(ac) {
                                *g += u * x;
                            }
                        }
                        out.push((*b, gb));
                    }
                }
                Op::Scale(a, c) => {
                    out.push((*a, up.iter().map(|u| u * c).collect()));
                }
                Op::Silu(a) => {
                    let g = val(*a)
                        .data
                        .iter()
                        .zip(up)
                        .map(|(&x, u)| {
                            let s = sigmoid(x);
                            u * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    out.push((*a, g));
                }
                Op::Softmax(a) => {
                    let d = *node.value.shape.last().unwrap();
                    let mut g = Vec::with_capacity(up.len());
                    for (y, u) in node.value.data.chunks_exact(d).zip(up.chunks_exact(d)) {
                        let dot: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
                        g.extend(y.iter().zip(u).map(|(yi, ui)| yi * (ui - dot)));
                    }
                    out.push((*a, g));
                }
                Op::RmsNorm { x, inv_rms } => {
                    let d = *node.value.shape.last().unwrap();
                    let mut g = Vec::with_capacity(up.len());
                    for ((y, u), r) in node
                        .value
                        .data
                        .chunks_exact(d)
                        .zip(up.chunks_exact(d))
                        .zip(inv_rms)
                    {
                        let dot: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        g.extend(y.iter().zip(u).map(|(yi, ui)| r * (ui - yi * dot)));
                    }
                    out.push((*x, g));
                }
                Op::Reshape(a) => out.push((*a, up.to_vec())),
                Op::SwapAxes12(x) => {
                    let s = &node.value.shape;
                    out.push((*x, swap12(up, s[0], s[1], s[2], s[3])));
                }
                Op::CausalMask(x) => {
                    let t = *node.value.shape.last().unwrap();
                    let mut g = up.to_vec();
                    for block in g.chunks_exact_mut(t * t) {
                        for i in 0..t {
                            for v in &mut block[i * t + i + 1..(i + 1) * t] {
                                *v = 0.0;
                            }
                        }
                    }
                    out.push((*x, g));
                }
                Op::Embedding { table, ids } => {
                    let ts = &val(*table).shape;
                    let d = ts[1];
                    let mut g = vec![0.0; ts[0] * d];
                    for (row, &i) in up.chunks_exact(d).zip(ids) {
                        g[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                    out.push((*table, g));
                }
                Op::ConcatSeq(a, b) => {
                    let (sa, sb) = (&val(*a).shape, &val(*b).shape);
                    let (batch, s1, s2, d) = (sa[0], sa[1], sb[1], sa[2]);
                    let mut ga = Vec::with_capacity(batch * s1 * d);
                    let mut gb = Vec::with_capacity(batch * s2 * d);
                    for row in up.chunks_exact((s1 + s2) * d) {
                        ga.extend_from_slice(&row[..s1 * d]);
                        gb.extend_from_slice(&row[s1 * d..]);
                    }
                    out.push((*a, ga));
                    out.push((*b, gb));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    probs,
                } => {
                    let vocab = *val(*logits).shape.last().unwrap();
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let scale = up[0] / count;
                    let mut g = vec![0.0; probs.len()];
                    for (r, (gr, pr)) in g.chunks_exact_mut(vocab).zip(probs.chunks_exact(vocab)).enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        for (gi, pi) in gr.iter_mut().zip(pr) {
                            *gi = pi * scale;
                        }
                        gr[targets[r]] -= scale;
                    }
                    out.push((*logits, g));
                }
                Op::Sum(a) => out.push((*a, vec![up[0]; val(*a).numel()])),
            }
        }
        for (v, g) in out {
            self.accumulate(v, g);
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn swap12(x: &[f64], a: usize, b: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}
