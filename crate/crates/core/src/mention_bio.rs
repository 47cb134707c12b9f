//! Mention boundary tagging and constrained decoding.

use rand::Rng;

use crate::corpus::{bio_to_spans, Bio};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::numerics::{Tape, Var};

/// Per-token `d_emb → 3` projection read from the first block's output.
#[derive(Debug, Clone, Copy)]
pub struct BioHead {
    pub proj: Linear,
}

impl BioHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_emb: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(store, "bio", d_emb, 3, rng),
        }
    }

    /// Unnormalized B/I/O scores, `[rows, 3]`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, x1: Var) -> Result<Var> {
        self.proj.forward(tape, p, x1)
    }
}

/// Mean token cross entropy against `gold` over every row.
pub fn bio_loss(tape: &mut Tape, logits: Var, gold: &[Bio]) -> Result<Var> {
    let live = vec![true; gold.len()];
    bio_loss_masked(tape, logits, gold, &live)
}

/// Like [`bio_loss`], averaging only over rows with `live[i]` set (padding excluded).
pub fn bio_loss_masked(tape: &mut Tape, logits: Var, gold: &[Bio], live: &[bool]) -> Result<Var> {
    let rows = tape.shape(logits)[0];
    if gold.len() != rows || live.len() != rows {
        return Err(Error::contract(format!(
            "bio loss over {rows} rows got {} labels and {} mask entries",
            gold.len(),
            live.len()
        )));
    }
    let targets: Vec<usize> = gold.iter().map(|b| b.index()).collect();
    tape.cross_entropy(logits, &targets, live)
}

/// Highest-scoring legal label sequence for row-major `[len, 3]` logits.
///
/// `I` may only follow `B` or `I` and may not open the sequence. Equal scores
/// resolve towards `O`, then `B`.
pub fn decode_labels(logits: &[f64]) -> Vec<Bio> {
    assert_eq!(logits.len() % 3, 0, "bio logits must have 3 columns");
    let len = logits.len() / 3;
    if len == 0 {
        return Vec::new();
    }
    const PREF: [Bio; 3] = [Bio::O, Bio::B, Bio::I];
    let allowed = |prev: Bio, cur: Bio| cur != Bio::I || prev != Bio::O;
    let mut score = [f64::NEG_INFINITY; 3];
    for b in [Bio::B, Bio::O] {
        score[b.index()] = logits[b.index()];
    }
    let mut back = vec![[Bio::O; 3]; len];
    for t in 1..len {
        let mut next = [f64::NEG_INFINITY; 3];
        for cur in PREF {
            let mut best = f64::NEG_INFINITY;
            let mut arg = None;
            for prev in PREF {
                if !allowed(prev, cur) || score[prev.index()] == f64::NEG_INFINITY {
                    continue;
                }
                let s = score[prev.index()];
                if arg.is_none() || s > best {
                    best = s;
                    arg = Some(prev);
                }
            }
            if let Some(prev) = arg {
                next[cur.index()] = best + logits[3 * t + cur.index()];
                back[t][cur.index()] = prev;
            }
        }
        score = next;
    }
    let mut last = None;
    let mut best = f64::NEG_INFINITY;
    for cur in PREF {
        let s = score[cur.index()];
        if s == f64::NEG_INFINITY {
            continue;
        }
        if last.is_none() || s > best {
            best = s;
            last = Some(cur);
        }
    }
    // Every logit non-finite: fall back to all-outside, which is always legal.
    let Some(mut cur) = last else {
        return vec![Bio::O; len];
    };
    let mut labels = vec![Bio::O; len];
    for t in (0..len).rev() {
        labels[t] = cur;
        if t > 0 {
            cur = back[t][cur.index()];
        }
    }
    labels
}

/// Sorted, non-overlapping spans of the best legal labelling.
pub fn decode(logits: &[f64]) -> Vec<(usize, usize)> {
    bio_to_spans(&decode_labels(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{is_legal_bio, spans_to_bio};
    use crate::numerics::Tensor;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot(labels: &[Bio], big: f64) -> Vec<f64> {
        labels
            .iter()
            .flat_map(|l| {
                let mut row = [0.0; 3];
                row[l.index()] = big;
                row
            })
            .collect()
    }

    #[test]
    fn forced_sequence_decodes_to_spans() {
        let l = one_hot(&[Bio::B, Bio::I, Bio::O, Bio::B], 5.0);
        assert_eq!(decode(&l), vec![(0, 1), (3, 3)]);
    }

    #[test]
    fn illegal_preference_is_repaired() {
        let l = one_hot(&[Bio::O, Bio::I, Bio::O], 1.0);
        let labels = decode_labels(&l);
        assert!(is_legal_bio(&labels));
        // [O,O,O] and [O,B,O] tie; the tie goes to O.
        assert_eq!(labels, vec![Bio::O; 3]);
    }

    #[test]
    fn leading_inside_never_emitted() {
        let l = vec![0.0, 9.0, 0.0];
        assert_eq!(decode_labels(&l), vec![Bio::O]);
    }

    #[test]
    fn empty_logits() {
        assert!(decode(&[]).is_empty());
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = BioHead::new(&mut store, 4, &mut rng);
        store.assign(head.proj.weight, vec![0.0; 12]).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.leaf(&Tensor::randn(&[5, 4], 1.0, &mut rng));
        let logits = head.logits(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(logits), &[5, 3]);
        assert!(tape.value(logits).iter().all(|&v| v == 0.0));
        let loss = bio_loss(&mut tape, logits, &[Bio::O; 5]).unwrap();
        assert_abs_diff_eq!(tape.scalar(loss), 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let gold = [Bio::B, Bio::I, Bio::O];
        let mut tape = Tape::new();
        let l = tape.constant(&[3, 3], one_hot(&gold, 40.0)).unwrap();
        let loss = bio_loss(&mut tape, l, &gold).unwrap();
        assert!(tape.scalar(loss) < 1e-15);
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        let mut tape = Tape::new();
        let l = tape.constant(&[3, 3], vec![0.0; 9]).unwrap();
        assert!(matches!(bio_loss(&mut tape, l, &[Bio::O; 2]), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_matches_plain_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let gold = [Bio::O, Bio::B, Bio::I, Bio::O];
        let mut tape = Tape::new();
        let l = tape.leaf(&t);
        let a = bio_loss(&mut tape, l, &gold).unwrap();
        let b = tape.cross_entropy(l, &[2, 0, 1, 2], &[true; 4]).unwrap();
        assert_eq!(tape.scalar(a), tape.scalar(b));
    }

    #[test]
    fn loss_gradient_wrt_hidden_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let head = BioHead::new(&mut store, 4, &mut rng);
        store
            .assign(head.proj.weight, Tensor::randn(&[3, 4], 1.0, &mut rng).into_data())
            .unwrap();
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let gold = [Bio::B, Bio::I, Bio::O, Bio::B, Bio::O];
        let err = crate::numerics::grad_check(
            |tape, v| {
                let p = store.bind(tape, false);
                let l = head.logits(tape, &p, v[0])?;
                bio_loss(tape, l, &gold)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn fuzzed_logits_always_decode_legally() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let len = rng.random_range(1..12);
            let l: Vec<f64> = (0..3 * len).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(is_legal_bio(&decode_labels(&l)));
        }
    }

    #[test]
    fn viterbi_beats_every_legal_sequence() {
        // Brute force over all 3^len sequences for short inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let len = rng.random_range(1..6);
            let l: Vec<f64> = (0..3 * len).map(|_| rng.random_range(-2.0..2.0)).collect();
            let score = |s: &[Bio]| -> f64 { s.iter().enumerate().map(|(t, b)| l[3 * t + b.index()]).sum() };
            let mut best = f64::NEG_INFINITY;
            for code in 0..3usize.pow(len as u32) {
                let seq: Vec<Bio> = (0..len).map(|t| Bio::ALL[(code / 3usize.pow(t as u32)) % 3]).collect();
                if is_legal_bio(&seq) {
                    best = best.max(score(&seq));
                }
            }
            let got = decode_labels(&l);
            assert_abs_diff_eq!(score(&got), best, epsilon = 1e-12);
        }
    }

    #[test]
    fn gold_spans_round_trip() {
        let spans = vec![(0, 0), (1, 3), (5, 5)];
        let labels = spans_to_bio(&spans, 7).unwrap();
        assert_eq!(decode(&one_hot(&labels, 1.0)), spans);
    }
}
