//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value and whatever it needs
//! for the backward rule. Inputs always precede outputs, so a single reverse
//! sweep visits each node once.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gemm::{gemm, MatMut, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch of padded sequences packed row-wise as `[batch·seq, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq: usize,
    /// `true` marks a padding position; length `batch·seq`.
    pub pad: Vec<bool>,
}

impl SeqLayout {
    pub fn single(len: usize) -> Self {
        Self {
            batch: 1,
            seq: len,
            pad: vec![false; len],
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

/// Entities selected for one query row of a top-k readout.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Selected row ids, highest score first, ties by lowest id.
    pub ids: Vec<usize>,
    /// Softmax weights over the selected scores, aligned with `ids`.
    pub alpha: Vec<f64>,
    /// Raw inner-product scores, aligned with `ids`.
    pub scores: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    Scale(Var, f64),
    AddScalar(Var),
    /// Keeps the forward `tanh` values for the backward pass.
    Gelu {
        a: Var,
        tanh: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ScatterRows {
        src: Var,
        rows: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        blocks: Vec<usize>,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    TopKReadout {
        h: Var,
        table: Var,
        selections: Vec<Selection>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss wrt `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-6;

impl Tape {
    /// Inference tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            rng: None,
        }
    }

    /// Training tape: dropout draws masks from a generator seeded with `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf holding a copy of `t`; it is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(&t))
    }

    pub fn param(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?.with_grad();
        Ok(self.leaf(&t))
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

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are valid")
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Attention probabilities `[batch, heads, seq, seq]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Per-row selections recorded by a top-k readout node.
    pub fn selections(&self, v: Var) -> Option<&[Selection]> {
        match &self.nodes[v.0].op {
            Op::TopKReadout { selections, .. } => Some(selections),
            _ => None,
        }
    }

    // ------------------------------------------------------------------
    // Linear algebra

    /// `a·b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            let bref = if trans_b {
                MatRef::rm_t(bv, k)
            } else {
                MatRef::rm(bv, n)
            };
            gemm(m, k, n, 1.0, MatRef::rm(av, k), bref, 0.0, MatMut::rm(&mut out, n));
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            vec![m, n],
            out,
            ng,
            Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
            },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(vec![c, r], out, ng, Op::Transpose(a)))
    }

    // ------------------------------------------------------------------
    // Elementwise

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, ng, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds the vector `row` (length = last extent of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&0);
        if self.value(row).len() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let ng = self.needs(a) || self.needs(row);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, ng, Op::AddRow { a, row }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, ng, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + c).collect();
        let ng = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, ng, Op::AddScalar(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let tanh: Vec<f64> = av.iter().map(|&x| (GELU_C * (x + 0.044715 * x * x * x)).tanh()).collect();
        let out = av.iter().zip(&tanh).map(|(&x, t)| 0.5 * x * (1.0 + t)).collect();
        let ng = self.needs(a);
        let shape = self.shape(a).to_vec();
        let tanh = if ng { tanh } else { Vec::new() };
        self.push(shape, out, ng, Op::Gelu { a, tanh })
    }

    /// Inverted dropout. Identity on inference tapes or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} not in [0,1)")));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, ng, Op::Dropout { x, mask }))
    }

    // ------------------------------------------------------------------
    // Reductions and normalisation

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![s], ng, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(a);
        self.push(vec![1], vec![s], ng, Op::Mean(a))
    }

    /// Softmax along `axis` with max subtraction. NaN inputs propagate to NaN outputs.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            shape,
            out,
            ng,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Normalises each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("non-empty shape");
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            ng,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean of `-log softmax(logits)[target]` over rows where `mask` is set; 0 if none.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (m, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != m || mask.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![m, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        for (&t, &on) in targets.iter().zip(mask) {
            if on && t >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: v,
                });
            }
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; m * v];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..m {
            if !mask[r] {
                continue;
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            total += lse - row[targets[r]];
            count += 1;
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.needs(logits) && count > 0;
        Ok(self.push(
            vec![1],
            vec![value],
            ng,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    // ------------------------------------------------------------------
    // Indexing and layout

    /// Gathers rows `ids` of the matrix `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(table, "gather_rows")?;
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    bound: n,
                });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        let ng = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            ng,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Places row `i` of `src` at row `rows[i]` of a zero `[total, d]` matrix.
    pub fn scatter_rows(&mut self, src: Var, rows: &[usize], total: usize) -> Result<Var> {
        let (m, d) = self.dims2(src, "scatter_rows")?;
        if rows.len() != m {
            return Err(Error::Shape {
                op: "scatter_rows",
                lhs: vec![m, d],
                rhs: vec![rows.len()],
            });
        }
        let mut seen = vec![false; total];
        let mut out = vec![0.0; total * d];
        let s = self.value(src);
        for (i, &r) in rows.iter().enumerate() {
            if r >= total {
                return Err(Error::Index {
                    what: "scatter_rows",
                    index: r,
                    bound: total,
                });
            }
            if std::mem::replace(&mut seen[r], true) {
                return Err(Error::Invariant(format!("row {r} scattered twice")));
            }
            out[r * d..(r + 1) * d].copy_from_slice(&s[i * d..(i + 1) * d]);
        }
        let ng = self.needs(src);
        Ok(self.push(
            vec![total, d],
            out,
            ng,
            Op::ScatterRows {
                src,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract(format!("concat axis {axis} out of range")));
        }
        let mut shape = base.clone();
        shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let blocks: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let total_block: usize = blocks.iter().sum();
        let mut out = Vec::with_capacity(outer * total_block);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&blocks) {
                out.extend_from_slice(&self.value(p)[o * w..(o + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            shape,
            out,
            ng,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                blocks,
            },
        ))
    }

    // ------------------------------------------------------------------
    // Fused blocks

    /// Multi-head scaled dot-product self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[batch·seq, d]` with `d` divisible by `heads`.
    /// Padded keys get `-inf` logits.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: &SeqLayout,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.dims2(q, "attention")?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::Shape {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if rows != layout.rows() || layout.pad.len() != rows {
            return Err(Error::Shape {
                op: "attention",
                lhs: vec![rows, d],
                rhs: vec![layout.batch, layout.seq],
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let (b_n, t, hd) = (layout.batch, layout.seq, d / heads);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; b_n * heads * t * t];
        let mut out = vec![0.0; rows * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for b in 0..b_n {
            let pad = &layout.pad[b * t..(b + 1) * t];
            for h in 0..heads {
                let off = b * t * d + h * hd;
                let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                gemm(
                    t,
                    hd,
                    t,
                    scale,
                    MatRef { data: &qv[off..], rs: d, cs: 1 },
                    MatRef { data: &kv[off..], rs: 1, cs: d },
                    0.0,
                    MatMut::rm(p, t),
                );
                for row in p.chunks_mut(t) {
                    for (s, &is_pad) in row.iter_mut().zip(pad) {
                        if is_pad {
                            *s = f64::NEG_INFINITY;
                        }
                    }
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if max == f64::NEG_INFINITY {
                        row.iter_mut().for_each(|s| *s = 0.0);
                        continue;
                    }
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= z);
                }
                gemm(
                    t,
                    t,
                    hd,
                    1.0,
                    MatRef::rm(p, t),
                    MatRef { data: &vv[off..], rs: d, cs: 1 },
                    0.0,
                    MatMut { data: &mut out[off..], rs: d, cs: 1 },
                );
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            vec![rows, d],
            out,
            ng,
            Op::Attention {
                q,
                k,
                v,
                batch: b_n,
                seq: t,
                heads,
                probs,
            },
        ))
    }

    /// Top-k inner-product readout: for each row `h_i` of `h`, selects the `k`
    /// rows of `table` with the highest `table_j · h_i` (ties by lowest id) and
    /// returns their softmax-weighted sum.
    pub fn topk_readout(&mut self, h: Var, table: Var, k: usize) -> Result<Var> {
        let (m, dh) = self.dims2(h, "topk_readout")?;
        let (n, dt) = self.dims2(table, "topk_readout")?;
        if dh != dt {
            return Err(Error::Shape {
                op: "topk_readout",
                lhs: vec![m, dh],
                rhs: vec![n, dt],
            });
        }
        if k == 0 || k > n {
            return Err(Error::contract(format!("top-k width {k} not in [1, {n}]")));
        }
        let (hv, tv) = (self.value(h), self.value(table));
        let mut scores = vec![0.0; m * n];
        gemm(
            m,
            dh,
            n,
            1.0,
            MatRef::rm(hv, dh),
            MatRef::rm_t(tv, dh),
            0.0,
            MatMut::rm(&mut scores, n),
        );
        let mut out = vec![0.0; m * dh];
        let mut selections = Vec::with_capacity(m);
        for i in 0..m {
            let row = &scores[i * n..(i + 1) * n];
            let ids = top_k_ids(row, k);
            let sel_scores: Vec<f64> = ids.iter().map(|&j| row[j]).collect();
            let alpha = softmax_slice(&sel_scores);
            let o = &mut out[i * dh..(i + 1) * dh];
            for (&j, &a) in ids.iter().zip(&alpha) {
                for (acc, &e) in o.iter_mut().zip(&tv[j * dh..(j + 1) * dh]) {
                    *acc += a * e;
                }
            }
            selections.push(Selection {
                ids,
                alpha,
                scores: sel_scores,
            });
        }
        let ng = self.needs(h) || self.needs(table);
        Ok(self.push(
            vec![m, dh],
            out,
            ng,
            Op::TopKReadout {
                h,
                table,
                selections,
            },
        ))
    }

    // ------------------------------------------------------------------
    // Backward

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    // dA = dC · op(B)ᵀ
                    let bt = if *trans_b {
                        MatRef::rm(bv, k)
                    } else {
                        MatRef::rm_t(bv, n)
                    };
                    gemm(m, n, k, 1.0, MatRef::rm(g, n), bt, 1.0, MatMut::rm(da, k));
                }
                if let Some(db) = self.slot(grads, *b) {
                    if *trans_b {
                        // dB (n×k) = dCᵀ · A
                        gemm(n, m, k, 1.0, MatRef::rm_t(g, n), MatRef::rm(av, k), 1.0, MatMut::rm(db, k));
                    } else {
                        // dB (k×n) = Aᵀ · dC
                        gemm(k, m, n, 1.0, MatRef::rm_t(av, k), MatRef::rm(g, n), 1.0, MatMut::rm(db, n));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = self.slot(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(d) = self.slot(grads, *a) {
                    for j in 0..g.len() {
                        d[j] += g[j] * bv[j];
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for j in 0..g.len() {
                        d[j] += g[j] * av[j];
                    }
                }
            }
            Op::AddRow { a, row } => {
                if let Some(d) = self.slot(grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = self.slot(grads, *row) {
                    let n = d.len();
                    for c in g.chunks(n) {
                        add_into(d, c);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    add_into(d, g);
                }
            }
            Op::Gelu { a, tanh } => {
                let av = self.value(*a);
                if let Some(d) = self.slot(grads, *a) {
                    for j in 0..g.len() {
                        let (x, t) = (av[j], tanh[j]);
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        d[j] += g[j] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                if let Some(d) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let at = |j: usize| o * len * inner + j * inner + ii;
                            let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let dim = gv.len();
                let rows = rstd.len();
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; dim];
                    for r in 0..rows {
                        let gr = &g[r * dim..(r + 1) * dim];
                        let xr = &xhat[r * dim..(r + 1) * dim];
                        for j in 0..dim {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / dim as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                        for j in 0..dim {
                            dx[r * dim + j] += rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..dim {
                            dg[j] += g[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for c in g.chunks(dim) {
                        add_into(db, c);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = self.shape(*logits)[1];
                let scale = g[0] / *count as f64;
                if let Some(d) = self.slot(grads, *logits) {
                    for (r, (&t, &on)) in targets.iter().zip(mask).enumerate() {
                        if !on {
                            continue;
                        }
                        for j in 0..v {
                            d[r * v + j] += scale * probs[r * v + j];
                        }
                        d[r * v + t] -= scale;
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(d) = self.slot(grads, *table) {
                    let dim = node.shape[1];
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                }
            }
            Op::ScatterRows { src, rows } => {
                if let Some(d) = self.slot(grads, *src) {
                    let dim = node.shape[1];
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut d[i * dim..(i + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                blocks,
            } => {
                let total: usize = blocks.iter().sum();
                let mut start = 0;
                for (&p, &w) in parts.iter().zip(blocks) {
                    if let Some(d) = self.slot(grads, p) {
                        for o in 0..*outer {
                            let src = &g[o * total + start..o * total + start + w];
                            add_into(&mut d[o * w..(o + 1) * w], src);
                        }
                    }
                    start += w;
                }
            }
            Op::Transpose(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    let (c, r) = (node.shape[0], node.shape[1]);
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(d) = self.slot(grads, *x) {
                    for j in 0..g.len() {
                        d[j] += g[j] * mask[j];
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(g, grads, [*q, *k, *v], *batch, *seq, *heads, probs),
            Op::TopKReadout {
                h,
                table,
                selections,
            } => {
                let dim = node.shape[1];
                let (hv, tv) = (self.value(*h), self.value(*table));
                let mut dh_buf = vec![0.0; hv.len()];
                let mut dt_buf = self.needs(*table).then(|| vec![0.0; tv.len()]);
                for (i, sel) in selections.iter().enumerate() {
                    let gi = &g[i * dim..(i + 1) * dim];
                    let hi = &hv[i * dim..(i + 1) * dim];
                    let dalpha: Vec<f64> = sel
                        .ids
                        .iter()
                        .map(|&j| dot(gi, &tv[j * dim..(j + 1) * dim]))
                        .collect();
                    let s: f64 = sel.alpha.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
                    for ((&j, &a), &da) in sel.ids.iter().zip(&sel.alpha).zip(&dalpha) {
                        let ds = a * (da - s);
                        let row = &tv[j * dim..(j + 1) * dim];
                        let dh = &mut dh_buf[i * dim..(i + 1) * dim];
                        for c in 0..dim {
                            dh[c] += ds * row[c];
                        }
                        if let Some(dt) = dt_buf.as_mut() {
                            let dr = &mut dt[j * dim..(j + 1) * dim];
                            for c in 0..dim {
                                dr[c] += a * gi[c] + ds * hi[c];
                            }
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *h) {
                    add_into(d, &dh_buf);
                }
                if let (Some(d), Some(buf)) = (self.slot(grads, *table), dt_buf) {
                    add_into(d, &buf);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        [q, k, v]: [Var; 3],
        b_n: usize,
        t: usize,
        heads: usize,
        probs: &[f64],
    ) {
        let d = self.shape(q)[1];
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; t * t];
        for b in 0..b_n {
            for h in 0..heads {
                let off = b * t * d + h * hd;
                let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                let go = MatRef { data: &g[off..], rs: d, cs: 1 };
                // dP = dO · Vᵀ
                gemm(t, hd, t, 1.0, go, MatRef { data: &vv[off..], rs: 1, cs: d }, 0.0, MatMut::rm(&mut dp, t));
                // dV = Pᵀ · dO
                gemm(t, t, hd, 1.0, MatRef::rm_t(p, t), go, 1.0, MatMut { data: &mut dv[off..], rs: d, cs: 1 });
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for r in 0..t {
                    let pr = &p[r * t..(r + 1) * t];
                    let dr = &mut dp[r * t..(r + 1) * t];
                    let s: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..t {
                        dr[c] = pr[c] * (dr[c] - s);
                    }
                }
                gemm(t, t, hd, scale, MatRef::rm(&dp, t), MatRef { data: &kv[off..], rs: d, cs: 1 }, 1.0, MatMut { data: &mut dq[off..], rs: d, cs: 1 });
                gemm(t, t, hd, scale, MatRef::rm_t(&dp, t), MatRef { data: &qv[off..], rs: d, cs: 1 }, 1.0, MatMut { data: &mut dk[off..], rs: d, cs: 1 });
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(dst) = self.slot(grads, var) {
                add_into(dst, &buf);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Indices of the `k` largest entries of `scores`, highest first; equal
/// scores are ordered by lower index. NaN scores sort last.
pub fn top_k_ids(scores: &[f64], k: usize) -> Vec<usize> {
    let cmp = |&a: &usize, &b: &usize| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or_else(|| scores[a].is_nan().cmp(&scores[b].is_nan()))
            .then(a.cmp(&b))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}
