//! Annotated contexts, mention masking, BIO labels and the synthetic world.

mod io;
mod world;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_corpus, read_vocabulary, write_corpus, write_vocabulary};
pub use world::{
    generate_corpus, generate_corpus_with, generate_questions, generate_world, generate_world_with,
    CorpusOptions, Question, Relation, Slot, SyntheticWorld, Vocabulary, WorldOptions,
};

pub const MASK: usize = 0;
pub const PAD: usize = 1;
pub const ANS: usize = 2;

/// A (possibly unlinked) entity mention over the inclusive span `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mention {
    /// Entity id in `[0, N)`, or `None` for an unlinked mention.
    pub entity: Option<usize>,
    pub start: usize,
    pub end: usize,
}

impl Mention {
    pub fn new(entity: Option<usize>, start: usize, end: usize) -> Self {
        Self { entity, start, end }
    }

    pub fn span(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    pub fn is_linked(&self) -> bool {
        self.entity.is_some()
    }
}

/// A token sequence with its sorted, non-overlapping mentions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Context {
    pub tokens: Vec<usize>,
    pub mentions: Vec<Mention>,
}

impl Context {
    /// Builds a context, checking span bounds and ordering.
    pub fn new(tokens: Vec<usize>, mentions: Vec<Mention>) -> Result<Self> {
        let ctx = Self { tokens, mentions };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        validate_spans(self.mentions.iter().map(Mention::span), self.tokens.len())
    }

    pub fn spans(&self) -> Vec<(usize, usize)> {
        self.mentions.iter().map(Mention::span).collect()
    }
}

/// Checks `start <= end < len`, sorted order and non-overlap.
pub fn validate_spans(spans: impl IntoIterator<Item = (usize, usize)>, len: usize) -> Result<()> {
    let mut prev_end: Option<usize> = None;
    for (s, e) in spans {
        if s > e {
            return Err(Error::Invariant(format!("mention end {e} before start {s}")));
        }
        if e >= len {
            return Err(Error::Invariant(format!(
                "mention ({s},{e}) outside context of length {len}"
            )));
        }
        if let Some(p) = prev_end {
            if s <= p {
                return Err(Error::Invariant(format!(
                    "mention starting at {s} overlaps or precedes one ending at {p}"
                )));
            }
        }
        prev_end = Some(e);
    }
    Ok(())
}

/// One masked position and the token it held.
pub type MaskTarget = (usize, usize);

/// Masks each mention independently with probability `rate`, replacing every
/// token of a selected span with [`MASK`]. Annotations are kept as they are.
pub fn mask_mentions(ctx: &Context, rate: f64, seed: u64) -> Result<(Context, Vec<MaskTarget>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::contract(format!("mask rate {rate} not in [0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selected: Vec<bool> = ctx.mentions.iter().map(|_| rng.random::<f64>() < rate).collect();
    Ok(mask_selected(ctx, &selected))
}

/// Masks every linked mention (the cloze probe setting).
pub fn mask_linked_mentions(ctx: &Context) -> (Context, Vec<MaskTarget>) {
    let selected: Vec<bool> = ctx.mentions.iter().map(Mention::is_linked).collect();
    mask_selected(ctx, &selected)
}

pub fn mask_selected(ctx: &Context, selected: &[bool]) -> (Context, Vec<MaskTarget>) {
    let mut masked = ctx.clone();
    let mut targets = Vec::new();
    for (m, _) in ctx.mentions.iter().zip(selected).filter(|(_, &s)| s) {
        for pos in m.start..=m.end {
            targets.push((pos, ctx.tokens[pos]));
            masked.tokens[pos] = MASK;
        }
    }
    (masked, targets)
}

/// Per-token mention boundary label. Discriminants index the BIO logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bio {
    B = 0,
    I = 1,
    O = 2,
}

impl Bio {
    pub const ALL: [Bio; 3] = [Bio::B, Bio::I, Bio::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Bio> {
        Self::ALL.get(i).copied()
    }
}

/// BIO labels over all tokens of `ctx`.
pub fn bio_labels(ctx: &Context) -> Result<Vec<Bio>> {
    spans_to_bio(&ctx.spans(), ctx.len())
}

pub fn spans_to_bio(spans: &[(usize, usize)], len: usize) -> Result<Vec<Bio>> {
    validate_spans(spans.iter().copied(), len)?;
    let mut labels = vec![Bio::O; len];
    for &(s, e) in spans {
        labels[s] = Bio::B;
        for l in &mut labels[s + 1..=e] {
            *l = Bio::I;
        }
    }
    Ok(labels)
}

/// Reads spans back out of a legal BIO sequence. A stray `I` opens a new span.
pub fn bio_to_spans(labels: &[Bio]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &l) in labels.iter().enumerate() {
        match l {
            Bio::B => {
                if let Some(s) = open.take() {
                    spans.push((s, i - 1));
                }
                open = Some(i);
            }
            Bio::I => {
                if open.is_none() {
                    open = Some(i);
                }
            }
            Bio::O => {
                if let Some(s) = open.take() {
                    spans.push((s, i - 1));
                }
            }
        }
    }
    if let Some(s) = open {
        spans.push((s, labels.len() - 1));
    }
    spans
}

/// True iff no `I` starts the sequence or follows an `O`.
pub fn is_legal_bio(labels: &[Bio]) -> bool {
    let mut prev = Bio::O;
    for &l in labels {
        if l == Bio::I && prev == Bio::O {
            return false;
        }
        prev = l;
    }
    true
}

/// Deterministic train/test split by shuffled index.
pub fn split_contexts(contexts: &[Context], test_fraction: f64, seed: u64) -> (Vec<Context>, Vec<Context>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..contexts.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((contexts.len() as f64) * test_fraction).round() as usize;
    let (test, train) = idx.split_at(n_test.min(contexts.len()));
    let pick = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| contexts[i].clone()).collect::<Vec<_>>()
    };
    (pick(train), pick(test))
}
