//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Operations
//! append nodes in execution order, so the node list is topologically
//! sorted by construction and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// Additive bias at or below `-BLOCKED` marks an attention link as blocked.
pub const BLOCKED: f64 = 1e4;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Sigmoid,
    /// tanh approximation
    Gelu,
    /// derivative taken as 0 at exactly 0
    Abs,
    /// `ln(x + offset)`
    Log {
        offset: f64,
    },
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: F,
    },
    Unary {
        x: Var,
        kind: UnaryKind,
    },
    Softmax {
        logits: Var,
        bias: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    AddBlock {
        base: Var,
        block: Var,
        row: usize,
        col: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        groups: usize,
        heads: usize,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Mean {
        x: Var,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by the leaf they belong to.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&[F]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape<F = f32> {
    nodes: Vec<Node<F>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Rank {
            op,
            expected: 2,
            shape: shape.to_vec(),
        }),
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Real>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * x * x);
    F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * du
}

/// Row-wise softmax of `z` in place. Returns the index of a row whose
/// bias entries are all blocked, if any.
fn softmax_rows<F: Real>(z: &mut [F], bias: &[F], cols: usize, bias_rows: usize) -> Option<usize> {
    let limit = F::of(-BLOCKED);
    for (r, row) in z.chunks_mut(cols).enumerate() {
        let b = &bias[(r % bias_rows) * cols..(r % bias_rows + 1) * cols];
        if b.iter().all(|&x| x <= limit) {
            return Some(r);
        }
        let mut max = F::neg_infinity();
        for (v, &bv) in row.iter_mut().zip(b) {
            *v = *v + bv;
            if *v > max {
                max = *v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    None
}

/// `dz = p ∘ (g − Σ g∘p)` per row, written into `g`.
fn softmax_backward_rows<F: Real>(p: &[F], g: &mut [F], cols: usize) {
    for (pr, gr) in p.chunks(cols).zip(g.chunks_mut(cols)) {
        let dot: F = pr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
        for (gv, &pv) in gr.iter_mut().zip(pr) {
            *gv = pv * (*gv - dot);
        }
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], var: Var, contrib: Vec<F>) {
    match &mut grads[var.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`, invalidating their
    /// variables. Lets a fixed prefix be reused across passes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient on [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push_raw(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<F>,
        op: Op<F>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::from_parts_unchecked(vec![m, n], out);
        self.push("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_parts_unchecked(self.shape(a).to_vec(), data);
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Adds a last-axis vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.shape(bias) != [cols] {
            return Err(Error::Shape {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        let value = Tensor::from_parts_unchecked(self.shape(x).to_vec(), data);
        self.push("add_bias", value, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_parts_unchecked(self.shape(a).to_vec(), data);
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let value = Tensor::from_parts_unchecked(self.shape(x).to_vec(), data);
        self.push("scale", value, Op::Scale { x, factor }, &[x])
    }

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        let input = self.value(x);
        if !input.is_finite() {
            return Err(Error::NonFinite { op: "unary" });
        }
        let data = input
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Gelu => gelu(v),
                UnaryKind::Abs => v.abs(),
                UnaryKind::Log { offset } => (v + F::of(offset)).ln(),
            })
            .collect();
        let value = Tensor::from_parts_unchecked(input.shape().to_vec(), data);
        self.push("unary", value, Op::Unary { x, kind }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Gelu)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Abs)
    }

    /// `softmax(logits + bias)` along the last axis. `bias` either matches
    /// `logits` exactly or is a single last-axis vector shared by all rows.
    pub fn masked_softmax(&mut self, logits: Var, bias: Var) -> Result<Var> {
        let cols = self.value(logits).cols();
        let ls = self.shape(logits);
        let bs = self.shape(bias);
        let bias_rows = if bs == ls {
            self.value(logits).rows()
        } else if bs == [cols] {
            1
        } else {
            return Err(Error::Shape {
                op: "masked_softmax",
                left: ls.to_vec(),
                right: bs.to_vec(),
            });
        };
        let mut z = self.value(logits).data().to_vec();
        if let Some(row) = softmax_rows(&mut z, self.value(bias).data(), cols, bias_rows) {
            return Err(Error::DegenerateRow {
                op: "masked_softmax",
                row,
            });
        }
        let value = Tensor::from_parts_unchecked(ls.to_vec(), z);
        self.push(
            "masked_softmax",
            value,
            Op::Softmax { logits, bias },
            &[logits, bias],
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        if eps <= F::zero() {
            return Err(Error::Dimension("layer_norm eps must be positive".into()));
        }
        let d = self.value(x).cols();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let input = self.value(x);
        let rows = input.rows();
        let inv_d = F::one() / F::of(d as f64);
        let mut xhat = Vec::with_capacity(input.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(input.numel());
        for row in input.data().chunks(d) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::from_parts_unchecked(input.shape().to_vec(), out);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Selects rows of a matrix: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = matrix_dims("gather", self.shape(table))?;
        if ids.is_empty() {
            return Err(Error::Dimension("gather needs at least one id".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!(
                "gather id {bad} out of range for {n} rows"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_parts_unchecked(vec![ids.len(), d], out);
        self.push(
            "gather",
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_rows needs at least one part".into()))?;
        let (_, d) = matrix_dims("concat_rows", self.shape(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = matrix_dims("concat_rows", self.shape(p))?;
            if c != d {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_parts_unchecked(vec![rows, d], out);
        self.push(
            "concat_rows",
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    /// `base` with `block` added at offset `(row, col)`.
    pub fn add_block(&mut self, base: Var, block: Var, row: usize, col: usize) -> Result<Var> {
        let (br, bc) = matrix_dims("add_block", self.shape(base))?;
        let (kr, kc) = matrix_dims("add_block", self.shape(block))?;
        if row + kr > br || col + kc > bc {
            return Err(Error::Shape {
                op: "add_block",
                left: self.shape(base).to_vec(),
                right: self.shape(block).to_vec(),
            });
        }
        let mut out = self.value(base).data().to_vec();
        let blk = self.value(block).data();
        for i in 0..kr {
            for j in 0..kc {
                let o = &mut out[(row + i) * bc + col + j];
                *o = *o + blk[i * kc + j];
            }
        }
        let value = Tensor::from_parts_unchecked(vec![br, bc], out);
        self.push(
            "add_block",
            value,
            Op::AddBlock {
                base,
                block,
                row,
                col,
            },
            &[base, block],
        )
    }

    /// Multi-head scaled dot-product attention over `groups` independent
    /// sequences stacked along rows. `q`, `k`, `v` are `[groups·S, D]`,
    /// `bias` is `[S, S]` and is shared by every group and head.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        groups: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = matrix_dims("attention", self.shape(q))?;
        same_shape("attention", self.shape(q), self.shape(k))?;
        same_shape("attention", self.shape(q), self.shape(v))?;
        if groups == 0 || heads == 0 || rows % groups != 0 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention: {rows}×{d} not divisible into {groups} groups × {heads} heads"
            )));
        }
        let s = rows / groups;
        if self.shape(bias) != [s, s] {
            return Err(Error::Shape {
                op: "attention",
                left: vec![s, s],
                right: self.shape(bias).to_vec(),
            });
        }
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let bd = self.value(bias).data();
        let mut out = vec![F::zero(); rows * d];
        let mut probs = vec![F::zero(); groups * heads * s * s];
        let mut qh = vec![F::zero(); s * dh];
        let mut kh = vec![F::zero(); s * dh];
        let mut vh = vec![F::zero(); s * dh];
        let mut oh = vec![F::zero(); s * dh];
        for g in 0..groups {
            for h in 0..heads {
                copy_head(qd, &mut qh, g * s, s, d, h * dh, dh);
                copy_head(kd, &mut kh, g * s, s, d, h * dh, dh);
                copy_head(vd, &mut vh, g * s, s, d, h * dh, dh);
                let p = &mut probs[(g * heads + h) * s * s..(g * heads + h + 1) * s * s];
                gemm_nt(&qh, &kh, p, s, dh, s);
                for x in p.iter_mut() {
                    *x = *x * scale;
                }
                if let Some(row) = softmax_rows(p, bd, s, s) {
                    return Err(Error::DegenerateRow {
                        op: "attention",
                        row,
                    });
                }
                oh.iter_mut().for_each(|x| *x = F::zero());
                gemm_nn(p, &vh, &mut oh, s, s, dh);
                for i in 0..s {
                    let dst = (g * s + i) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![rows, d], out);
        self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                bias,
                groups,
                heads,
                probs,
            },
            &[q, k, v, bias],
        )
    }

    /// Mean negative log-likelihood of `targets` over the rows where
    /// `supervised` is set.
    pub fn cross_entropy_mlm(
        &mut self,
        logits: Var,
        targets: &[usize],
        supervised: &[bool],
    ) -> Result<Var> {
        let (r, vocab) = matrix_dims("cross_entropy_mlm", self.shape(logits))?;
        if targets.len() != r || supervised.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy_mlm",
                left: vec![r, vocab],
                right: vec![targets.len(), supervised.len()],
            });
        }
        let rows: Vec<usize> = (0..r).filter(|&i| supervised[i]).collect();
        if rows.is_empty() {
            return Err(Error::EmptySupervision);
        }
        let ld = self.value(logits).data();
        let mut probs = Vec::with_capacity(rows.len() * vocab);
        let mut total = F::zero();
        let mut picked = Vec::with_capacity(rows.len());
        for &i in &rows {
            let t = targets[i];
            if t >= vocab {
                return Err(Error::Dimension(format!(
                    "target id {t} out of range for vocabulary {vocab}"
                )));
            }
            let row = &ld[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum: F = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total = total + (lse - row[t]);
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
            picked.push(t);
        }
        let loss = total / F::of(rows.len() as f64);
        self.push(
            "cross_entropy_mlm",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows,
                targets: picked,
                probs,
            },
            &[logits],
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data().iter().copied().sum::<F>() / F::of(t.numel() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<F>();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// `x·w + b` for a row-major batch `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![F::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<F>, g: Vec<F>, grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                if self.wants(a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm_nt(&g, self.value(b).data(), &mut da, m, n, k);
                    accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm_tn(self.value(a).data(), &g, &mut db, m, k, n);
                    accumulate(grads, b, db);
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    accumulate(grads, b, g);
                }
            }
            &Op::AddBias { x, bias } => {
                if self.wants(bias) {
                    let cols = self.value(bias).numel();
                    let mut db = vec![F::zero(); cols];
                    for row in g.chunks(cols) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    accumulate(grads, bias, db);
                }
                if self.wants(x) {
                    accumulate(grads, x, g);
                }
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    let bd = self.value(b).data();
                    accumulate(grads, a, g.iter().zip(bd).map(|(&u, &w)| u * w).collect());
                }
                if self.wants(b) {
                    let ad = self.value(a).data();
                    accumulate(grads, b, g.iter().zip(ad).map(|(&u, &w)| u * w).collect());
                }
            }
            &Op::Scale { x, factor } => {
                accumulate(grads, x, g.into_iter().map(|u| u * factor).collect());
            }
            &Op::Unary { x, kind } => {
                let xin = self.value(x).data();
                let out = node.value.data();
                let dx = g
                    .iter()
                    .zip(xin.iter().zip(out))
                    .map(|(&u, (&xv, &yv))| {
                        u * match kind {
                            UnaryKind::Sigmoid => yv * (F::one() - yv),
                            UnaryKind::Gelu => gelu_grad(xv),
                            UnaryKind::Abs => {
                                if xv > F::zero() {
                                    F::one()
                                } else if xv < F::zero() {
                                    -F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            UnaryKind::Log { offset } => F::one() / (xv + F::of(offset)),
                        }
                    })
                    .collect();
                accumulate(grads, x, dx);
            }
            &Op::Softmax { logits, bias } => {
                let cols = node.value.cols();
                let mut dz = g;
                softmax_backward_rows(node.value.data(), &mut dz, cols);
                if self.wants(bias) {
                    let bn = self.value(bias).numel();
                    if bn == dz.len() {
                        accumulate(grads, bias, dz.clone());
                    } else {
                        let mut db = vec![F::zero(); cols];
                        for row in dz.chunks(cols) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        accumulate(grads, bias, db);
                    }
                }
                if self.wants(logits) {
                    accumulate(grads, logits, dz);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gm = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut dg = vec![F::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gr[j] * hr[j];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![F::zero(); d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] = db[j] + gr[j];
                        }
                    }
                    accumulate(grads, *beta, db);
                }
                if self.wants(*x) {
                    let inv_d = F::one() / F::of(d as f64);
                    let mut dx = Vec::with_capacity(g.len());
                    let mut dh = vec![F::zero(); d];
                    for ((gr, hr), &r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let mut sum_dh = F::zero();
                        let mut sum_dh_h = F::zero();
                        for j in 0..d {
                            dh[j] = gr[j] * gm[j];
                            sum_dh = sum_dh + dh[j];
                            sum_dh_h = sum_dh_h + dh[j] * hr[j];
                        }
                        let mean_dh = sum_dh * inv_d;
                        let mean_dh_h = sum_dh_h * inv_d;
                        for j in 0..d {
                            dx.push(r * (dh[j] - mean_dh - hr[j] * mean_dh_h));
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = vec![F::zero(); t.numel()];
                for (row, &i) in g.chunks(d).zip(ids) {
                    for (a, &b) in dt[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *a = *a + b;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            &Op::AddBlock {
                base,
                block,
                row,
                col,
            } => {
                if self.wants(block) {
                    let bc = node.value.cols();
                    let (kr, kc) = (self.value(block).shape()[0], self.value(block).shape()[1]);
                    let mut db = Vec::with_capacity(kr * kc);
                    for i in 0..kr {
                        let start = (row + i) * bc + col;
                        db.extend_from_slice(&g[start..start + kc]);
                    }
                    accumulate(grads, block, db);
                }
                if self.wants(base) {
                    accumulate(grads, base, g);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                groups,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *bias, *groups, *heads, probs, &g, grads),
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                let t = self.value(*logits);
                let vocab = t.cols();
                let scale = g[0] / F::of(rows.len() as f64);
                let mut dl = vec![F::zero(); t.numel()];
                for (n, (&r, &target)) in rows.iter().zip(targets).enumerate() {
                    let p = &probs[n * vocab..(n + 1) * vocab];
                    let dst = &mut dl[r * vocab..(r + 1) * vocab];
                    for (d, &pv) in dst.iter_mut().zip(p) {
                        *d = pv * scale;
                    }
                    dst[target] = dst[target] - scale;
                }
                accumulate(grads, *logits, dl);
            }
            &Op::Mean { x } => {
                let n = self.value(x).numel();
                accumulate(grads, x, vec![g[0] / F::of(n as f64); n]);
            }
            &Op::Sum { x } => {
                let n = self.value(x).numel();
                accumulate(grads, x, vec![g[0]; n]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        groups: usize,
        heads: usize,
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (rows, d) = (self.value(q).shape()[0], self.value(q).shape()[1]);
        let s = rows / groups;
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![F::zero(); rows * d];
        let mut dk = vec![F::zero(); rows * d];
        let mut dv = vec![F::zero(); rows * d];
        let mut dbias = vec![F::zero(); s * s];
        let mut qh = vec![F::zero(); s * dh];
        let mut kh = vec![F::zero(); s * dh];
        let mut vh = vec![F::zero(); s * dh];
        let mut goh = vec![F::zero(); s * dh];
        let mut dp = vec![F::zero(); s * s];
        let mut tmp = vec![F::zero(); s * dh];
        for gi in 0..groups {
            for h in 0..heads {
                copy_head(qd, &mut qh, gi * s, s, d, h * dh, dh);
                copy_head(kd, &mut kh, gi * s, s, d, h * dh, dh);
                copy_head(vd, &mut vh, gi * s, s, d, h * dh, dh);
                copy_head(g, &mut goh, gi * s, s, d, h * dh, dh);
                let p = &probs[(gi * heads + h) * s * s..(gi * heads + h + 1) * s * s];

                // dV = Pᵀ·dO
                tmp.iter_mut().for_each(|x| *x = F::zero());
                gemm_tn(p, &goh, &mut tmp, s, s, dh);
                add_head(&mut dv, &tmp, gi * s, s, d, h * dh, dh);

                // dP = dO·Vᵀ, then through the softmax
                dp.iter_mut().for_each(|x| *x = F::zero());
                gemm_nt(&goh, &vh, &mut dp, s, dh, s);
                softmax_backward_rows(p, &mut dp, s);
                for (a, &b) in dbias.iter_mut().zip(dp.iter()) {
                    *a = *a + b;
                }
                for x in dp.iter_mut() {
                    *x = *x * scale;
                }

                tmp.iter_mut().for_each(|x| *x = F::zero());
                gemm_nn(&dp, &kh, &mut tmp, s, s, dh);
                add_head(&mut dq, &tmp, gi * s, s, d, h * dh, dh);

                tmp.iter_mut().for_each(|x| *x = F::zero());
                gemm_tn(&dp, &qh, &mut tmp, s, s, dh);
                add_head(&mut dk, &tmp, gi * s, s, d, h * dh, dh);
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv), (bias, dbias)] {
            if self.wants(var) {
                accumulate(grads, var, grad);
            }
        }
    }
}

fn copy_head<F: Copy>(
    src: &[F],
    dst: &mut [F],
    row0: usize,
    s: usize,
    d: usize,
    col0: usize,
    dh: usize,
) {
    for i in 0..s {
        let from = (row0 + i) * d + col0;
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[from..from + dh]);
    }
}

fn add_head<F: Real>(
    dst: &mut [F],
    src: &[F],
    row0: usize,
    s: usize,
    d: usize,
    col0: usize,
    dh: usize,
) {
    for i in 0..s {
        let to = (row0 + i) * d + col0;
        for (a, &b) in dst[to..to + dh].iter_mut().zip(&src[i * dh..(i + 1) * dh]) {
            *a = *a + b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = t.constant(mat(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

        let row = t.constant(mat(&[&[1.0, 2.0, 3.0]]));
        let col = t.constant(mat(&[&[4.0], &[5.0], &[6.0]]));
        let dot = t.matmul(row, col).unwrap();
        assert_eq!(t.value(dot).data(), &[32.0]);

        let x = t.constant(mat(&[&[0.5, -1.5, 2.0], &[3.0, 0.25, -7.0]]));
        let eye = t.constant(mat(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]));
        let y = t.matmul(x, eye).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn unary_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![3], vec![0.0, -3.0, 10.0]).unwrap());
        let s = t.sigmoid(x).unwrap();
        let a = t.abs(x).unwrap();
        assert_eq!(t.value(s).data()[0], 0.5);
        assert_eq!(t.value(a).data()[1], 3.0);
        let oracle = 1.0 / (1.0 + (-10.0f64).exp());
        assert_abs_diff_eq!(t.value(s).data()[2], oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(oracle, 0.999_954_602_131_297_6, epsilon = 1e-15);
    }

    #[test]
    fn unary_rejects_non_finite_input() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap());
        assert!(matches!(t.sigmoid(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn abs_derivative_is_zero_at_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new(vec![3], vec![-2.0, 0.0, 2.0]).unwrap());
        let a = t.abs(x).unwrap();
        let s = t.sum(a).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let b = t.constant(Tensor::new(vec![2], vec![0.0, -BLOCKED]).unwrap());
        let p = t.masked_softmax(l, b).unwrap();
        assert_abs_diff_eq!(t.value(p).data()[0], 1.0, epsilon = 1e-12);
        assert!(t.value(p).data()[1] <= 1e-40);

        let c = 123.25;
        let l = t.constant(Tensor::new(vec![3], vec![c; 3]).unwrap());
        let z = t.constant(Tensor::zeros(&[3]));
        let p = t.masked_softmax(l, z).unwrap();
        for &v in t.value(p).data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }

        // 64-bit direct evaluation
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let s: f64 = e.iter().sum();
        let oracle: Vec<f64> = e.iter().map(|x| x / s).collect();
        let l = t.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let p = t.masked_softmax(l, z).unwrap();
        for (got, want) in t.value(p).data().iter().zip(&oracle) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
        for (got, want) in oracle.iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-8);
        }
    }

    #[test]
    fn softmax_rejects_fully_blocked_row() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(Tensor::zeros(&[2, 2]));
        let b = t.constant(mat(&[&[0.0, -BLOCKED], &[-BLOCKED, -2.0 * BLOCKED]]));
        assert!(matches!(
            t.masked_softmax(l, b),
            Err(Error::DegenerateRow { row: 1, .. })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::<f64>::new();
        let ones = t.constant(Tensor::full(&[3], 1.0));
        let zeros = t.constant(Tensor::zeros(&[3]));
        let x = t.constant(mat(&[&[5.0, 5.0, 5.0]]));
        let y = t.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

        let ones2 = t.constant(Tensor::full(&[2], 1.0));
        let zeros2 = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(mat(&[&[1.0, -1.0]]));
        let y = t.layer_norm(x, ones2, zeros2, 1e-12).unwrap();
        // (x − μ)/σ with μ = 0, σ = 1
        assert_abs_diff_eq!(t.value(y).data()[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(t.value(y).data()[1], -1.0, epsilon = 1e-9);

        let beta = t.constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let x = t.constant(mat(&[&[3.0, -4.0, 9.0], &[0.1, 0.2, 0.3]]));
        let y = t.layer_norm(x, zeros, beta, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(Tensor::zeros(&[2, 4]));
        let ce = t.cross_entropy_mlm(l, &[2, 0], &[true, false]).unwrap();
        assert_abs_diff_eq!(t.value(ce).item(), 4f64.ln(), epsilon = 1e-12);

        let mut peaked = Tensor::<f64>::zeros(&[1, 4]);
        peaked.data_mut()[1] = 50.0;
        let l = t.constant(peaked);
        let ce = t.cross_entropy_mlm(l, &[1], &[true]).unwrap();
        assert!(t.value(ce).item() <= 1e-10);

        let l = t.constant(mat(&[&[1.0, 2.0, 0.5], &[-1.0, 0.0, 3.0]]));
        let l1 = t.cross_entropy_mlm(l, &[0, 0], &[true, false]).unwrap();
        let l2 = t.cross_entropy_mlm(l, &[0, 1], &[false, true]).unwrap();
        let both = t.cross_entropy_mlm(l, &[0, 1], &[true, true]).unwrap();
        let mean = (t.value(l1).item() + t.value(l2).item()) / 2.0;
        assert_abs_diff_eq!(t.value(both).item(), mean, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_empty_supervision() {
        let mut t = Tape::<f32>::new();
        let l = t.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            t.cross_entropy_mlm(l, &[0, 0], &[false, false]),
            Err(Error::EmptySupervision)
        ));
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 1.0]);

        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.add(x, x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::zeros(&[2]));
        let y = t.sigmoid(x).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Rank { .. })));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut t = Tape::<f32>::new();
        let a = t.param(Tensor::from_fn(&[3, 4], |i| (i as f32 * 0.37).sin()));
        let b = t.param(Tensor::from_fn(&[4, 2], |i| (i as f32 * 0.91).cos()));
        let c = t.matmul(a, b).unwrap();
        let g = t.gelu(c).unwrap();
        let s = t.mean(g).unwrap();
        let g1 = t.backward(s).unwrap();
        let g2 = t.backward(s).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
        assert_eq!(g1.get(b), g2.get(b));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::full(&[2], 3.0));
        let b = t.param(Tensor::full(&[2], 2.0));
        let c = t.mul(a, b).unwrap();
        let s = t.sum(c).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &[3.0, 3.0]);
    }
}
