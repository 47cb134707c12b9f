//! Transformer encoder blocks and token embeddings.
//!
//! Parameters live in a [`ParamStore`]; layers only hold [`ParamId`]s. A
//! forward pass first binds the store onto a tape ([`ParamStore::bind`]) and
//! then threads the resulting [`Bound`] handles through the layers, which
//! keeps a single code path for training, inference and gradient checks.

use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{SeqLayout, Tape, Tensor, Var};

/// Standard deviation of the normal initialiser for weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.frozen.push(false);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a tensor's values, keeping its shape.
    pub fn assign(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let shape = self.tensors[id.0].shape().to_vec();
        self.tensors[id.0] = Tensor::new(shape, data)?;
        Ok(())
    }

    /// Records every parameter as a leaf. Frozen parameters, and every
    /// parameter when `with_grad` is false, are recorded as constants.
    pub fn bind(&self, tape: &mut Tape, with_grad: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .zip(&self.frozen)
            .map(|(t, &frozen)| {
                let mut t = t.clone();
                t.requires_grad = with_grad && !frozen;
                tape.leaf(&t)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters recorded on a tape, indexable by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

fn normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, INIT_STD, rng)
}

/// `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), normal(&[d_out, d_in], rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self {
            weight,
            bias: Some(bias),
        }
    }

    pub fn without_bias<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), normal(&[d_out, d_in], rng));
        Self { weight, bias: None }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul_bt(x, p[self.weight])?;
        match self.bias {
            Some(b) => tape.add_row(y, p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(
            format!("{name}.gain"),
            Tensor::new(vec![d], vec![1.0; d]).expect("positive width"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gain], p[self.bias])
    }
}

/// One post-norm encoder block: attention, add & norm, GELU FFN, add & norm.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, ffn: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.attn.query"), d, d, rng),
            // A key bias shifts every logit of a query row equally; softmax cancels it.
            key: Linear::without_bias(store, &format!("{name}.attn.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.attn.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.attn.output"), d, d, rng),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            ffn_in: Linear::new(store, &format!("{name}.ffn.in"), d, ffn, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn.out"), ffn, d, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
        }
    }

    /// Returns the block output and the attention node (for inspection).
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        layout: &SeqLayout,
        heads: usize,
        dropout: f64,
    ) -> Result<(Var, Var)> {
        let q = self.query.forward(tape, p, x)?;
        let k = self.key.forward(tape, p, x)?;
        let v = self.value.forward(tape, p, x)?;
        let attn = tape.attention(q, k, v, layout, heads)?;
        let a = self.output.forward(tape, p, attn)?;
        let a = tape.dropout(a, dropout)?;
        let r = tape.add(x, a)?;
        let x = self.attn_norm.forward(tape, p, r)?;
        let h = self.ffn_in.forward(tape, p, x)?;
        let h = tape.gelu(h);
        let f = self.ffn_out.forward(tape, p, h)?;
        let f = tape.dropout(f, dropout)?;
        let r = tape.add(x, f)?;
        Ok((self.ffn_norm.forward(tape, p, r)?, attn))
    }
}

/// A stack of encoder blocks that preserves the `[rows, d_emb]` shape.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
    pub d_emb: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        num_layers: usize,
        d_emb: usize,
        heads: usize,
        ffn: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_emb % heads != 0 {
            return Err(Error::Validation(vec![format!(
                "d_emb {d_emb} must be a multiple of n_heads {heads}"
            )]));
        }
        let layers = (0..num_layers)
            .map(|i| TransformerLayer::new(store, &format!("{name}.{i}"), d_emb, ffn, rng))
            .collect();
        Ok(Self {
            layers,
            d_emb,
            heads,
            max_len,
            dropout: 0.0,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_emb / self.heads
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, layout: &SeqLayout) -> Result<Var> {
        self.forward_traced(tape, p, x, layout).map(|(y, _)| y)
    }

    /// Like [`forward`](Self::forward) but also returns each layer's attention node.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        layout: &SeqLayout,
    ) -> Result<(Var, Vec<Var>)> {
        if layout.seq > self.max_len {
            return Err(Error::contract(format!(
                "sequence length {} exceeds maximum {}",
                layout.seq, self.max_len
            )));
        }
        if tape.shape(x) != [layout.rows(), self.d_emb] {
            return Err(Error::Shape {
                op: "transformer",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![layout.rows(), self.d_emb],
            });
        }
        let mut x = x;
        let mut attns = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, a) = layer.forward(tape, p, x, layout, self.heads, self.dropout)?;
            x = y;
            attns.push(a);
        }
        Ok((x, attns))
    }
}

/// Token table `[V, d_emb]` plus learned absolute positions `[max_len, d_emb]`.
#[derive(Debug, Clone, Copy)]
pub struct TokenEmbedding {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub vocab: usize,
    pub max_len: usize,
}

impl TokenEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, vocab: usize, d_emb: usize, max_len: usize, rng: &mut R) -> Self {
        let tokens = store.add("embed.tokens", normal(&[vocab, d_emb], rng));
        let positions = store.add("embed.positions", normal(&[max_len, d_emb], rng));
        Self {
            tokens,
            positions,
            vocab,
            max_len,
        }
    }

    /// Embeds packed token ids (`batch·seq` of them, padding included).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, ids: &[usize], layout: &SeqLayout) -> Result<Var> {
        if layout.seq > self.max_len {
            return Err(Error::contract(format!(
                "sequence length {} exceeds maximum {}",
                layout.seq, self.max_len
            )));
        }
        if ids.len() != layout.rows() {
            return Err(Error::Shape {
                op: "token_embedding",
                lhs: vec![ids.len()],
                rhs: vec![layout.batch, layout.seq],
            });
        }
        let tok = tape.gather_rows(p[self.tokens], ids)?;
        let pos_ids: Vec<usize> = (0..layout.rows()).map(|r| r % layout.seq).collect();
        let pos = tape.gather_rows(p[self.positions], &pos_ids)?;
        tape.add(tok, pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn generic_point(t: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        let noise = Tensor::randn(t.shape(), 0.5, rng);
        let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    }

    fn stack(layers: usize, d: usize, heads: usize, seed: u64) -> (ParamStore, TransformerStack) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = TransformerStack::new(&mut store, "enc", layers, d, heads, 4 * d, 16, &mut rng).unwrap();
        (store, s)
    }

    #[test]
    fn zero_layers_is_identity() {
        let (store, s) = stack(0, 8, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.leaf(&x);
        let y = s.forward(&mut tape, &p, xv, &SeqLayout::single(5)).unwrap();
        assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn attention_rows_sum_to_one_over_live_keys() {
        let (store, s) = stack(2, 8, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = SeqLayout {
            batch: 2,
            seq: 6,
            pad: vec![false, false, false, false, true, true, false, false, false, false, false, false],
        };
        let x = Tensor::randn(&[12, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.leaf(&x);
        let (_, attns) = s.forward_traced(&mut tape, &p, xv, &layout).unwrap();
        for a in attns {
            let probs = tape.attention_probs(a).unwrap();
            for (blk, chunk) in probs.chunks(6 * 6).enumerate() {
                let b = blk / 2;
                for row in chunk.chunks(6) {
                    let total: f64 = row.iter().sum();
                    assert!((total - 1.0).abs() < 1e-12);
                    for (j, &w) in row.iter().enumerate() {
                        if layout.pad[b * 6 + j] {
                            assert_eq!(w, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn one_layer_stack_passes_gradient_check() {
        let (store, s) = stack(1, 8, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let mut inputs = vec![x, w];
        // At the 0.02 init the attention gradients sit at finite-difference
        // round-off, so check at a generic point instead.
        inputs.extend(store.tensors().iter().map(|t| generic_point(t, &mut rng)));
        let err = grad_check(
            |tape, vars| {
                let p = Bound::from_vars(vars[2..].to_vec());
                let y = s.forward(tape, &p, vars[0], &SeqLayout::single(4))?;
                let y = tape.mul(y, vars[1])?;
                Ok(tape.sum(y))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn pad_positions_do_not_leak_into_live_rows() {
        let (store, s) = stack(2, 8, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layout = SeqLayout {
            batch: 1,
            seq: 6,
            pad: vec![false, false, false, false, true, true],
        };
        let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let mut swapped = x.clone();
        let (r4, r5) = (x.row(4).to_vec(), x.row(5).to_vec());
        swapped.row_mut(4).copy_from_slice(&r5);
        swapped.row_mut(5).copy_from_slice(&r4);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let xv = tape.leaf(x);
            let y = s.forward(&mut tape, &p, xv, &layout).unwrap();
            tape.value(y)[..4 * 8].to_vec()
        };
        assert_eq!(run(&x), run(&swapped));
    }

    #[test]
    fn outputs_stay_finite_for_bounded_inputs() {
        let (store, s) = stack(2, 16, 4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[10, 16], 4.0, &mut rng);
        let clipped: Vec<f64> = x.data().iter().map(|v| v.clamp(-10.0, 10.0)).collect();
        let x = Tensor::new(vec![10, 16], clipped).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.leaf(&x);
        let y = s.forward(&mut tape, &p, xv, &SeqLayout::single(10)).unwrap();
        assert!(tape.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn over_length_sequence_is_rejected() {
        let (store, s) = stack(1, 8, 2, 11);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.leaf(&Tensor::zeros(&[17, 8]));
        assert!(matches!(
            s.forward(&mut tape, &p, x, &SeqLayout::single(17)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn embedding_adds_token_and_position_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let emb = TokenEmbedding::new(&mut store, 10, 4, 8, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = emb.forward(&mut tape, &p, &[3, 7], &SeqLayout::single(2)).unwrap();
        let tok = store.get(emb.tokens);
        let pos = store.get(emb.positions);
        let got = tape.tensor(x);
        for (r, id) in [3usize, 7].into_iter().enumerate() {
            for c in 0..4 {
                assert_eq!(got.row(r)[c], tok.row(id)[c] + pos.row(r)[c]);
            }
        }
    }
}
