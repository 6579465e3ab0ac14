use rand::Rng as _;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, broadcast_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Transpose { a: Var },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize, end: usize },
    Gather { table: Var, ids: Vec<usize> },
    MaskKeys { a: Var, keep: Vec<bool> },
    Softmax { a: Var },
    Gelu { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    Dropout { a: Var, scale: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore_id: usize, probs: Vec<f64>, count: usize },
    BceWithLogits { logits: Var, labels: Vec<f64> },
    Sum { a: Var },
    Mean { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// requires gradients. Unreached nodes report zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if !self.backward_done || !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        Some(match &self.grads[v.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        })
    }

    /// Clears accumulated gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---- forward operations ----

    /// Matrix product over the last two axes. Leading axes of `a` are batch
    /// axes; `b` either has the same leading axes or is a plain matrix that
    /// is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let broadcast_b = sb.len() == 2 && sa.len() > 2;
        if !broadcast_b && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for t in 0..batch {
            let b_off = if broadcast_b { 0 } else { t * k * n };
            gemm_nn(
                &da[t * m * k..(t + 1) * m * k],
                &db[b_off..b_off + k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul { a, b, broadcast_b }, rg))
    }

    /// Elementwise sum. `b` may have the shape of a suffix of `a`'s shape,
    /// in which case it is repeated over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let db = self.value(b).data();
        let width = db.len().max(1);
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + db[i % width])
            .collect();
        let shape = sa.to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }, rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        let (shape, data) = kernels::permute(self.shape(a), self.value(a).data(), &axes);
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::Transpose { a }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(Error::shape("permute", self.shape(a), axes));
        }
        let (shape, data) = kernels::permute(self.shape(a), self.value(a).data(), axes);
        let rg = self.needs(&[a]);
        Ok(self.push(
            Tensor { shape, data },
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let extent = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * extent * inner..(o + 1) * extent * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Sub-range `start..end` of `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, end]));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::Slice { a, axis, start, end }, rg))
    }

    /// Rows `ids` of a 2-D table, giving `[ids.len(), width]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("gather", s, &[]));
        }
        let (rows, width) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Range { id: bad, size: rows });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), width],
                data,
            },
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Sets attention scores of masked keys to `-inf`. `a` has shape
    /// `[batch, .., keys]` and `keep` has `batch * keys` entries.
    pub fn mask_keys(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let keys = *s.last().unwrap_or(&0);
        if s.len() < 2 || keep.len() != s[0] * keys {
            return Err(Error::shape("mask_keys", &s, &[keep.len()]));
        }
        let per_batch = self.value(a).len() / s[0];
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let (b, k) = (i / per_batch, i % keys);
                if keep[b * keys + k] {
                    x
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let rg = self.needs(&[a]);
        Ok(self.push(
            Tensor { shape: s, data },
            Op::MaskKeys {
                a,
                keep: keep.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let width = *s.last().ok_or_else(|| Error::shape("softmax", &s, &[]))?;
        let mut data = vec![0.0; self.value(a).len()];
        if !kernels::softmax_rows(self.value(a).data(), width, &mut data) {
            return Err(Error::Contract("softmax row with every entry masked".into()));
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor { shape: s, data }, Op::Softmax { a }, rg))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::gelu);
        let rg = self.needs(&[a]);
        self.push(value, Op::Gelu { a }, rg)
    }

    /// Standardises over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().ok_or_else(|| Error::shape("layer_norm", &s, &[]))?;
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(Error::shape("layer_norm", &s, self.shape(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = self.value(x).len() / width.max(1);
        let mut normalized = Vec::with_capacity(rows * width);
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * width);
        for row in self.value(x).data().chunks(width) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let z = (v - mean) * inv;
                normalized.push(z);
                data.push(z * g[j] + b[j]);
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor { shape: s, data },
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout: entries are zeroed with probability `rate` and
    /// survivors scaled by `1/(1-rate)`. A zero rate records nothing.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let data = self.value(a).data().iter().zip(&scale).map(|(x, s)| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a]);
        self.push(Tensor { shape, data }, Op::Dropout { a, scale }, rg)
    }

    /// Mean negative log-likelihood over rows of `logits` whose target is not
    /// `ignore_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &s, &[targets.len()]));
        }
        let classes = s[1];
        let mut probs = vec![0.0; s[0] * classes];
        kernels::softmax_rows(self.value(logits).data(), classes, &mut probs);
        let mut total = 0.0;
        let mut count = 0;
        for (&t, row) in targets.iter().zip(self.value(logits).data().chunks(classes)) {
            if t == ignore_id {
                continue;
            }
            if t >= classes {
                return Err(Error::Range { id: t, size: classes });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract("cross entropy with every target ignored".into()));
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_id,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean binary log-loss of logits against {0,1} labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != labels.len() || z.is_empty() {
            return Err(Error::shape("bce_with_logits", self.shape(logits), &[labels.len()]));
        }
        let total: f64 = z
            .iter()
            .zip(labels)
            .map(|(&z, &y)| kernels::softplus(z) - z * y)
            .sum();
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / labels.len() as f64),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(total), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(m), Op::Mean { a }, rg)
    }

    // ---- reverse pass ----

    /// Accumulates d(loss)/d(node) for every node that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice without reset_grads".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        delta(slot);
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Temporarily take the op so that node values can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, broadcast_b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let batch: usize = sa[..sa.len() - 2].iter().product();
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data.clone();
                    self.accumulate(*a, |ga| {
                        for t in 0..batch {
                            let b_off = if *broadcast_b { 0 } else { t * k * n };
                            gemm_nt(
                                &g[t * m * n..(t + 1) * m * n],
                                &bv[b_off..b_off + k * n],
                                &mut ga[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    });
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data.clone();
                    self.accumulate(*b, |gb| {
                        for t in 0..batch {
                            let b_off = if *broadcast_b { 0 } else { t * k * n };
                            gemm_tn(
                                &av[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut gb[b_off..b_off + k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let width = self.nodes[b.0].value.len().max(1);
                self.accumulate(*b, |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % width] += y;
                    }
                });
            }
            Op::Mul { a, b } => {
                let bv = self.nodes[b.0].value.data.clone();
                self.accumulate(*a, |ga| {
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(&bv) {
                        *x += y * w;
                    }
                });
                let av = self.nodes[a.0].value.data.clone();
                self.accumulate(*b, |gb| {
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(&av) {
                        *x += y * w;
                    }
                });
            }
            Op::Scale { a, factor } => {
                self.accumulate(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor));
            }
            Op::Transpose { a } => {
                let out_shape = self.nodes[idx].value.shape.clone();
                let rank = out_shape.len();
                let mut axes: Vec<usize> = (0..rank).collect();
                axes.swap(rank - 2, rank - 1);
                let (_, back) = kernels::permute(&out_shape, g, &axes);
                self.accumulate(*a, |ga| ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
            }
            Op::Reshape { a } => {
                self.accumulate(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Permute { a, axes } => {
                let out_shape = self.nodes[idx].value.shape.clone();
                let (_, back) = kernels::permute(&out_shape, g, &kernels::inverse_axes(axes));
                self.accumulate(*a, |ga| ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[idx].value.shape.clone();
                let (outer, inner) = outer_inner(&out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let extent = self.shape(p)[*axis];
                    self.accumulate(p, |gp| {
                        for o in 0..outer {
                            let src = o * out_shape[*axis] * inner + offset * inner;
                            for (x, y) in gp[o * extent * inner..(o + 1) * extent * inner]
                                .iter_mut()
                                .zip(&g[src..src + extent * inner])
                            {
                                *x += y;
                            }
                        }
                    });
                    offset += extent;
                }
            }
            Op::Slice { a, axis, start, end } => {
                let in_shape = self.shape(*a).to_vec();
                let (outer, inner) = outer_inner(&in_shape, *axis);
                let width = (end - start) * inner;
                self.accumulate(*a, |ga| {
                    for o in 0..outer {
                        let dst = o * in_shape[*axis] * inner + start * inner;
                        for (x, y) in ga[dst..dst + width].iter_mut().zip(&g[o * width..(o + 1) * width]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let width = self.shape(*table)[1];
                self.accumulate(*table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for (x, y) in gt[i * width..(i + 1) * width].iter_mut().zip(&g[r * width..(r + 1) * width]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::MaskKeys { a, keep } => {
                let s = self.nodes[idx].value.shape.clone();
                let keys = s[s.len() - 1];
                let per_batch = self.nodes[idx].value.len() / s[0];
                self.accumulate(*a, |ga| {
                    for (i, (x, y)) in ga.iter_mut().zip(g).enumerate() {
                        if keep[(i / per_batch) * keys + i % keys] {
                            *x += y;
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let y = self.nodes[idx].value.data.clone();
                let width = *self.nodes[idx].value.shape.last().unwrap();
                self.accumulate(*a, |ga| {
                    for ((gx, gy), yr) in ga.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)) {
                        let dot: f64 = gy.iter().zip(yr).map(|(u, v)| u * v).sum();
                        for ((x, &u), &v) in gx.iter_mut().zip(gy).zip(yr) {
                            *x += v * (u - dot);
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let xs = self.nodes[a.0].value.data.clone();
                self.accumulate(*a, |ga| {
                    for ((x, y), &v) in ga.iter_mut().zip(g).zip(&xs) {
                        *x += y * kernels::gelu_grad(v);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let width = self.nodes[gain.0].value.len();
                let gv = self.nodes[gain.0].value.data.clone();
                self.accumulate(*gain, |gg| {
                    for (gr, zr) in g.chunks(width).zip(normalized.chunks(width)) {
                        for j in 0..width {
                            gg[j] += gr[j] * zr[j];
                        }
                    }
                });
                self.accumulate(*bias, |gb| {
                    for gr in g.chunks(width) {
                        for j in 0..width {
                            gb[j] += gr[j];
                        }
                    }
                });
                self.accumulate(*x, |gx| {
                    let n = width as f64;
                    for (((gxr, gr), zr), &inv) in gx
                        .chunks_mut(width)
                        .zip(g.chunks(width))
                        .zip(normalized.chunks(width))
                        .zip(inv_std)
                    {
                        let dz: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let sum_dz: f64 = dz.iter().sum();
                        let sum_dz_z: f64 = dz.iter().zip(zr).map(|(a, b)| a * b).sum();
                        for j in 0..width {
                            gxr[j] += inv / n * (n * dz[j] - sum_dz - zr[j] * sum_dz_z);
                        }
                    }
                });
            }
            Op::Dropout { a, scale } => {
                self.accumulate(*a, |ga| {
                    for ((x, y), s) in ga.iter_mut().zip(g).zip(scale) {
                        *x += y * s;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_id,
                probs,
                count,
            } => {
                let classes = self.shape(*logits)[1];
                let coef = g[0] / *count as f64;
                self.accumulate(*logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore_id {
                            continue;
                        }
                        let row = &mut gl[r * classes..(r + 1) * classes];
                        for (j, x) in row.iter_mut().enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *x += coef * (probs[r * classes + j] - onehot);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, labels } => {
                let z = self.nodes[logits.0].value.data.clone();
                let coef = g[0] / labels.len() as f64;
                self.accumulate(*logits, |gl| {
                    for ((x, &zi), &y) in gl.iter_mut().zip(&z).zip(labels) {
                        *x += coef * (kernels::sigmoid(zi) - y);
                    }
                });
            }
            Op::Sum { a } => {
                self.accumulate(*a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].value.len() as f64;
                self.accumulate(*a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
        }
        self.nodes[idx].op = op;
    }
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    kernels::sigmoid(x)
}
