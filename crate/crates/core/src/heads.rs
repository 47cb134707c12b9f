//! Output heads on the final hidden states.

use rand::Rng;

use crate::entity_memory::span_projection;
use crate::error::Result;
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::numerics::{top_k_ids, Tape, Tensor, Var};

/// Masked-token softmax. The output matrix is the token embedding table.
#[derive(Debug, Clone, Copy)]
pub struct TokenPredHead {
    pub table: ParamId,
    pub bias: ParamId,
}

impl TokenPredHead {
    pub fn new(store: &mut ParamStore, table: ParamId) -> Self {
        let vocab = store.get(table).rows();
        let bias = store.add("token_head.bias", Tensor::zeros(&[vocab]));
        Self { table, bias }
    }

    /// `[positions, V]` logits, or `None` when nothing is masked.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, x4: Var, positions: &[usize]) -> Result<Option<Var>> {
        if positions.is_empty() {
            return Ok(None);
        }
        let rows = tape.gather_rows(x4, positions)?;
        let logits = tape.matmul_bt(rows, p[self.table])?;
        Ok(Some(tape.add_row(logits, p[self.bias])?))
    }
}

/// Scores every entity against a pseudo embedding built from the last layer.
#[derive(Debug, Clone, Copy)]
pub struct EntityPredHead {
    pub proj: Linear,
    pub table: ParamId,
}

impl EntityPredHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, table: ParamId, d_emb: usize, rng: &mut R) -> Self {
        let d_ent = store.get(table).cols();
        Self {
            proj: Linear::without_bias(store, "entity_head.proj", 2 * d_emb, d_ent, rng),
            table,
        }
    }

    /// Reuses another projection (the memory's `W_f`) instead of owning one.
    pub fn tied(proj: Linear, table: ParamId) -> Self {
        Self { proj, table }
    }

    /// `E · (W_f' · [x_start ; x_end])` per span, `[spans, N]`.
    pub fn scores(&self, tape: &mut Tape, p: &Bound, x4: Var, spans: &[(usize, usize)]) -> Result<Option<Var>> {
        if spans.is_empty() {
            return Ok(None);
        }
        let h = span_projection(tape, p, self.proj, x4, spans)?;
        Ok(Some(tape.matmul_bt(h, p[self.table])?))
    }
}

/// Highest-scoring entity, ties to the lowest id.
pub fn predict_entity(scores: &[f64]) -> usize {
    top_k_ids(scores, 1)[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn argmax_and_ties() {
        assert_eq!(predict_entity(&[0.1, 0.5, 0.3]), 1);
        assert_eq!(predict_entity(&[2.0; 5]), 0);
        let shifted: Vec<f64> = [0.1, 0.5, 0.3].iter().map(|v| v - 7.0).collect();
        assert_eq!(predict_entity(&shifted), 1);
    }

    #[test]
    fn orthonormal_rows_find_matching_entity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let table = store.add("entities", Tensor::new(vec![4, 4], eye).unwrap());
        let head = EntityPredHead::new(&mut store, table, 2, &mut rng);
        // W_f' maps [x_start ; x_end] to x_start padded with zeros.
        let mut w = vec![0.0; 4 * 4];
        w[0] = 1.0;
        w[4 + 1] = 1.0;
        store.assign(head.proj.weight, w).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(&[1, 2], vec![0.0, 1.0]).unwrap();
        let s = head.scores(&mut tape, &p, x, &[(0, 0)]).unwrap().unwrap();
        assert_eq!(predict_entity(tape.value(s)), 1);
    }

    #[test]
    fn scores_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let table = store.add("entities", Tensor::randn(&[7, 3], 1.0, &mut rng));
        let head = EntityPredHead::new(&mut store, table, 4, &mut rng);
        store
            .assign(head.proj.weight, Tensor::randn(&[3, 8], 1.0, &mut rng).into_data())
            .unwrap();
        let xt = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.leaf(&xt);
        let s = head.scores(&mut tape, &p, x, &[(1, 3)]).unwrap().unwrap();
        let cat: Vec<f64> = xt.row(1).iter().chain(xt.row(3)).copied().collect();
        let w = store.get(head.proj.weight);
        let h: Vec<f64> = (0..3).map(|i| w.row(i).iter().zip(&cat).map(|(a, b)| a * b).sum()).collect();
        let e = store.get(table);
        for j in 0..7 {
            let want: f64 = e.row(j).iter().zip(&h).map(|(a, b)| a * b).sum();
            assert!((tape.value(s)[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn token_logits_only_at_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let table = store.add("embed.tokens", Tensor::randn(&[11, 4], 1.0, &mut rng));
        let head = TokenPredHead::new(&mut store, table);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.leaf(&Tensor::randn(&[6, 4], 1.0, &mut rng));
        assert!(head.logits(&mut tape, &p, x, &[]).unwrap().is_none());
        let l = head.logits(&mut tape, &p, x, &[3]).unwrap().unwrap();
        assert_eq!(tape.shape(l), &[1, 11]);
    }
}
