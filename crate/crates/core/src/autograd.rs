//! Minimal reverse-mode tape over [`Tensor`]s.
//!
//! Only the operations the encoder-decoder needs are provided, each with a
//! hand-written backward rule. Parameters live in a [`ParamStore`] that the
//! graph borrows; after [`Graph::backward`] their gradients come back as a
//! [`Gradients`] table indexed by [`ParamId`].

use crate::error::{invalid, Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Per-parameter gradients; `None` for parameters the loss did not touch.
#[derive(Debug, Clone)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> {
        self.0.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_ref()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Layout of a fused multi-head attention call.
///
/// Queries are `(batch·q_len, heads·head_dim)` row-major, i.e. `(B, L, H, D_h)`;
/// keys and values likewise with `k_len`. `allowed[(b·q_len + i)·k_len + j]`
/// says whether query `i` may attend to key `j`.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub scale: f64,
    pub allowed: Vec<bool>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Relu(Var),
    Mul {
        x: Var,
        mult: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        scale: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One forward pass worth of recorded operations.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Tensor::zeros(&[0]), Op::Param(id), true)
    }

    /// `x (m×k) · w (k×n) + b (n)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(invalid(format!("linear shapes {xs:?} x {ws:?}")));
        }
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(invalid(format!("bias of length {} for width {n}", bv.len())));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(m, k, n, 1.0, self.value(x).data(), false, self.value(w).data(), false, &mut out);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    /// Elementwise product with constant multipliers (masks, dropout scales).
    pub fn mul_const(&mut self, x: Var, mult: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != mult.len() {
            return Err(invalid(format!(
                "{} multipliers for a tensor of {} elements",
                mult.len(),
                xv.len()
            )));
        }
        let data = xv.data().iter().zip(&mult).map(|(a, b)| a * b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Mul { x, mult }, needs))
    }

    /// Layer normalisation over the last axis of a 2-D value.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(invalid("layer norm parameter width mismatch"));
        }
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Row lookup `table[ids] · scale`, giving `(ids.len(), width)`.
    pub fn embedding(&mut self, table: Var, ids: Vec<usize>, scale: f64) -> Result<Var> {
        let t = self.value(table);
        let (rows, width) = (t.shape()[0], t.last_dim());
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in &ids {
            if id >= rows {
                return Err(invalid(format!("token id {id} out of range for vocabulary {rows}")));
            }
            out.extend(t.data()[id * width..(id + 1) * width].iter().map(|v| v * scale));
        }
        let out = Tensor::new(vec![ids.len(), width], out)?;
        let needs = self.needs(table);
        Ok(self.push(out, Op::Embedding { table, ids, scale }, needs))
    }

    /// Fused scaled dot-product attention over all heads; output is `(B·L_q, H·D_h)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &spec,
        )?;
        let rows = spec.batch * spec.q_len;
        let out = Tensor::new(vec![rows, spec.heads * spec.head_dim], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, Op::Attention { q, k, v, spec, probs }, needs))
    }

    /// Mean token cross-entropy of `logits (m×V)`; `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        let rows = lv.len() / vocab;
        if targets.len() != rows {
            return Err(invalid("one target per logit row required"));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..rows {
            let row = &lv.data()[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p /= z;
            }
            if let Some(t) = targets[r] {
                if t >= vocab {
                    return Err(invalid(format!("target {t} out of range for vocabulary {vocab}")));
                }
                total += -(row[t] - max - z.ln());
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::new(vec![1], vec![loss])?,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
            needs,
        ))
    }

    /// Back-propagates from a scalar `loss` and collects parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(invalid("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = vec![None; self.params.len()];

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let shape = self.params.get(*id).shape().to_vec();
                    let t = Tensor::new(shape, g)?;
                    out[id.0] = Some(match out[id.0].take() {
                        Some(prev) => prev.zip_map(&t, |a, b| a + b)?,
                        None => t,
                    });
                }
                Op::Linear { x, w, b } => {
                    let xs = self.value(*x);
                    let wv = self.value(*w);
                    let (m, k, n) = (xs.shape()[0], xs.shape()[1], wv.shape()[1]);
                    if self.needs(*x) {
                        let mut dx = vec![0.0; m * k];
                        gemm(m, n, k, 1.0, &g, false, wv.data(), true, &mut dx);
                        acc(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        let mut dw = vec![0.0; k * n];
                        gemm(k, m, n, 1.0, xs.data(), true, &g, false, &mut dw);
                        acc(&mut grads, *w, dw);
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        acc(&mut grads, b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Relu(x) => {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&y, &d)| if y > 0.0 { d } else { 0.0 })
                        .collect();
                    acc(&mut grads, *x, dx);
                }
                Op::Mul { x, mult } => {
                    let dx = g.iter().zip(mult).map(|(a, b)| a * b).collect();
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain).data();
                    let n = gv.len();
                    let rows = xhat.len() / n;
                    if self.needs(*x) {
                        let mut dx = vec![0.0; xhat.len()];
                        for r in 0..rows {
                            let gr = &g[r * n..(r + 1) * n];
                            let hr = &xhat[r * n..(r + 1) * n];
                            let mut mean_d = 0.0;
                            let mut mean_dh = 0.0;
                            for j in 0..n {
                                let d = gr[j] * gv[j];
                                mean_d += d;
                                mean_dh += d * hr[j];
                            }
                            mean_d /= n as f64;
                            mean_dh /= n as f64;
                            for j in 0..n {
                                let d = gr[j] * gv[j];
                                dx[r * n + j] = rstd[r] * (d - mean_d - hr[j] * mean_dh);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                    if self.needs(*gain) {
                        let mut dg = vec![0.0; n];
                        for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                        acc(&mut grads, *gain, dg);
                    }
                    if self.needs(*bias) {
                        let mut db = vec![0.0; n];
                        for gr in g.chunks(n) {
                            for (d, v) in db.iter_mut().zip(gr) {
                                *d += v;
                            }
                        }
                        acc(&mut grads, *bias, db);
                    }
                }
                Op::Embedding { table, ids, scale } => {
                    let t = self.value(*table);
                    let width = t.last_dim();
                    let mut dt = vec![0.0; t.len()];
                    for (row, &id) in g.chunks(width).zip(ids) {
                        for (d, v) in dt[id * width..(id + 1) * width].iter_mut().zip(row) {
                            *d += v * scale;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    probs,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        &g,
                        spec,
                    );
                    if self.needs(*q) {
                        acc(&mut grads, *q, dq);
                    }
                    if self.needs(*k) {
                        acc(&mut grads, *k, dk);
                    }
                    if self.needs(*v) {
                        acc(&mut grads, *v, dv);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let vocab = self.value(*logits).last_dim();
                    let mut dl = vec![0.0; probs.len()];
                    if *count > 0 {
                        let scale = g[0] / *count as f64;
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = t {
                                let row = r * vocab;
                                for j in 0..vocab {
                                    dl[row + j] = probs[row + j] * scale;
                                }
                                dl[row + t] -= scale;
                            }
                        }
                    }
                    acc(&mut grads, *logits, dl);
                }
            }
        }
        Ok(Gradients(out))
    }
}

/// Forward attention on flat `(B, L, H, D_h)` buffers; returns the output and
/// the softmax probabilities `(B, H, L_q, L_k)`.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    spec: &AttentionSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let AttentionSpec {
        batch,
        heads,
        head_dim: dh,
        q_len,
        k_len,
        scale,
        ..
    } = *spec;
    let width = heads * dh;
    if q.len() != batch * q_len * width
        || k.len() != batch * k_len * width
        || v.len() != batch * k_len * width
        || spec.allowed.len() != batch * q_len * k_len
    {
        return Err(invalid("attention input sizes do not match the spec"));
    }
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; batch * heads * q_len * k_len];
    for b in 0..batch {
        for i in 0..q_len {
            let allowed = &spec.allowed[(b * q_len + i) * k_len..(b * q_len + i + 1) * k_len];
            if !allowed.iter().any(|&a| a) {
                return Err(Error::InvalidMask(format!(
                    "query {i} of batch item {b} has no visible keys"
                )));
            }
            let qrow = (b * q_len + i) * width;
            for h in 0..heads {
                let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                let qv = &q[qrow + h * dh..qrow + (h + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..k_len {
                    if allowed[j] {
                        let kr = (b * k_len + j) * width + h * dh;
                        let s = scale * qv.iter().zip(&k[kr..kr + dh]).map(|(a, c)| a * c).sum::<f64>();
                        p[j] = s;
                        max = max.max(s);
                    }
                }
                let mut z = 0.0;
                for j in 0..k_len {
                    p[j] = if allowed[j] { (p[j] - max).exp() } else { 0.0 };
                    z += p[j];
                }
                let o = &mut out[qrow + h * dh..qrow + (h + 1) * dh];
                for j in 0..k_len {
                    p[j] /= z;
                    if p[j] != 0.0 {
                        let vr = (b * k_len + j) * width + h * dh;
                        for (ov, vv) in o.iter_mut().zip(&v[vr..vr + dh]) {
                            *ov += p[j] * vv;
                        }
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    spec: &AttentionSpec,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttentionSpec {
        batch,
        heads,
        head_dim: dh,
        q_len,
        k_len,
        scale,
        ..
    } = *spec;
    let width = heads * dh;
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; k_len];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..q_len {
                let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                let orow = (b * q_len + i) * width + h * dh;
                let go = &dout[orow..orow + dh];
                let mut dot = 0.0;
                for j in 0..k_len {
                    let vr = (b * k_len + j) * width + h * dh;
                    dp[j] = go.iter().zip(&v[vr..vr + dh]).map(|(a, c)| a * c).sum();
                    dot += p[j] * dp[j];
                    if p[j] != 0.0 {
                        for (d, g) in dv[vr..vr + dh].iter_mut().zip(go) {
                            *d += p[j] * g;
                        }
                    }
                }
                for j in 0..k_len {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kr = (b * k_len + j) * width + h * dh;
                    for d in 0..dh {
                        dq[orow + d] += ds * k[kr + d];
                        dk[kr + d] += ds * q[orow + d];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of every parameter entry against `backward`.
    fn check(store: &mut ParamStore, f: &dyn Fn(&mut Graph) -> Var) {
        let grads = {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            g.backward(loss).unwrap()
        };
        let eval = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let l = f(&mut g);
            g.value(l).data()[0]
        };
        let h = 1e-5;
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for i in 0..store.get(id).len() {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + h;
                let up = eval(store);
                store.get_mut(id).data_mut()[i] = orig - h;
                let down = eval(store);
                store.get_mut(id).data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.get(id).map_or(0.0, |t| t.data()[i]);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(rel < 1e-5, "{} [{i}]: fd {fd} analytic {an}", store.name(id));
            }
        }
    }

    #[test]
    fn linear_relu_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&mut rng, &[4, 6]));
        let b = store.add("b", rand_tensor(&mut rng, &[6]));
        let g = store.add("g", rand_tensor(&mut rng, &[6]));
        let beta = store.add("beta", rand_tensor(&mut rng, &[6]));
        let w2 = store.add("w2", rand_tensor(&mut rng, &[6, 5]));
        let x = rand_tensor(&mut rng, &[3, 4]);
        check(&mut store, &|gr: &mut Graph| {
            let xi = gr.input(x.clone());
            let (wv, bv, gv, betav, w2v) = (gr.param(w), gr.param(b), gr.param(g), gr.param(beta), gr.param(w2));
            let h = gr.linear(xi, wv, Some(bv)).unwrap();
            let h = gr.relu(h);
            let h = gr.layer_norm(h, gv, betav).unwrap();
            let h2 = gr.mul_const(h, (0..18).map(|i| (i % 3) as f64).collect()).unwrap();
            let h = gr.add(h, h2).unwrap();
            let logits = gr.linear(h, w2v, None).unwrap();
            gr.cross_entropy(logits, vec![Some(1), None, Some(4)]).unwrap()
        });
    }

    #[test]
    fn attention_and_embedding_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let emb = store.add("emb", rand_tensor(&mut rng, &[7, 4]));
        let wq = store.add("wq", rand_tensor(&mut rng, &[4, 4]));
        let wk = store.add("wk", rand_tensor(&mut rng, &[4, 4]));
        let wv = store.add("wv", rand_tensor(&mut rng, &[4, 4]));
        let wo = store.add("wo", rand_tensor(&mut rng, &[4, 7]));
        let (batch, len) = (2, 3);
        let mut allowed = vec![true; batch * len * len];
        // Causal in item 0, padded last key in item 1.
        for i in 0..len {
            for j in 0..len {
                allowed[i * len + j] = j <= i;
                allowed[(len + i) * len + j] = j < 2;
            }
        }
        let spec = AttentionSpec {
            batch,
            heads: 2,
            head_dim: 2,
            q_len: len,
            k_len: len,
            scale: 1.0 / 2f64.sqrt(),
            allowed,
        };
        check(&mut store, &|gr: &mut Graph| {
            let e = gr.param(emb);
            let x = gr.embedding(e, vec![1, 4, 6, 2, 2, 5], 1.7).unwrap();
            let (q, k, v, o) = (gr.param(wq), gr.param(wk), gr.param(wv), gr.param(wo));
            let qv = gr.linear(x, q, None).unwrap();
            let kv = gr.linear(x, k, None).unwrap();
            let vv = gr.linear(x, v, None).unwrap();
            let a = gr.attention(qv, kv, vv, spec.clone()).unwrap();
            let logits = gr.linear(a, o, None).unwrap();
            gr.cross_entropy(logits, vec![Some(3), Some(0), Some(6), Some(1), None, Some(2)])
                .unwrap()
        });
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let spec = AttentionSpec {
            batch: 1,
            heads: 1,
            head_dim: 2,
            q_len: 1,
            k_len: 2,
            scale: 1.0,
            allowed: vec![false, false],
        };
        let r = attention_forward(&[1.0, 0.0], &[0.0; 4], &[0.0; 4], &spec);
        assert!(matches!(r, Err(Error::InvalidMask(_))));
    }

    #[test]
    fn unused_params_have_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::filled(&[2, 2], 0.5));
        let unused = store.add("unused", Tensor::filled(&[3], 1.0));
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::filled(&[1, 2], 1.0));
        let av = g.param(a);
        let y = g.linear(x, av, None).unwrap();
        let l = g.cross_entropy(y, vec![Some(0)]).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(unused).is_none());
    }
}
