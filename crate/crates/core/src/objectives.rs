//! Pre-training and question-answering losses.

use serde::{Deserialize, Serialize};

use crate::corpus::{Context, Mention, Question, ANS};
use crate::error::{Error, Result};
use crate::mention_bio::bio_loss_masked;
use crate::modelzoo::{Batch, Model, Spans, Variant};
use crate::nn::Bound;
use crate::numerics::{Tape, Var};

/// Loss terms of one step. `total` is the left-to-right sum of the other four.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bio: f64,
    pub el_memory: f64,
    pub el_head: f64,
    pub mlm: f64,
    pub total: f64,
}

/// Mean full-softmax cross entropy of the gold entity over linked rows of
/// `scores: [mentions, N]`; zero when nothing is linked.
pub fn el_loss(tape: &mut Tape, scores: Var, gold: &[Option<usize>]) -> Result<Var> {
    let (rows, n) = (tape.shape(scores)[0], tape.shape(scores)[1]);
    if gold.len() != rows {
        return Err(Error::contract(format!("{rows} score rows but {} gold entries", gold.len())));
    }
    if let Some(e) = gold.iter().flatten().find(|&&e| e >= n) {
        return Err(Error::contract(format!("gold entity {e} outside [0, {n})")));
    }
    let targets: Vec<usize> = gold.iter().map(|g| g.unwrap_or(0)).collect();
    let mask: Vec<bool> = gold.iter().map(Option::is_some).collect();
    tape.cross_entropy(scores, &targets, &mask)
}

fn zero(tape: &mut Tape) -> Result<Var> {
    tape.constant(&[1], vec![0.0])
}

/// Sums the four terms in a fixed order and reads back their values.
fn combine(tape: &mut Tape, bio: Var, el_memory: Var, el_head: Var, mlm: Var) -> Result<(Var, LossBreakdown)> {
    let a = tape.add(bio, el_memory)?;
    let b = tape.add(a, el_head)?;
    let total = tape.add(b, mlm)?;
    let breakdown = LossBreakdown {
        bio: tape.scalar(bio),
        el_memory: tape.scalar(el_memory),
        el_head: tape.scalar(el_head),
        mlm: tape.scalar(mlm),
        total: tape.scalar(total),
    };
    Ok((total, breakdown))
}

/// Mention tagging on live tokens, entity linking at the memory and at the
/// head, and masked-token prediction, all on gold spans.
pub fn pretrain_loss(model: &Model, tape: &mut Tape, p: &Bound, batch: &Batch) -> Result<(Var, LossBreakdown)> {
    let retrieval = model.cfg.train_retrieval();
    let hidden = model.encode(tape, p, &batch.tokens, &batch.layout, Spans::Given(&batch.spans), retrieval)?;

    let bio = match hidden.bio_logits {
        Some(l) => bio_loss_masked(tape, l, &batch.bio, &batch.live())?,
        None => zero(tape)?,
    };

    let el_memory = match (model.cfg.variant, hidden.memory.and_then(|m| m.h.map(|h| (h, m.scores))), model.entities) {
        (Variant::Eae, Some((h, scores)), Some(table)) => {
            let scores = match scores {
                Some(s) => s,
                None => tape.matmul_bt(h, p[table])?,
            };
            el_loss(tape, scores, &batch.entities)?
        }
        _ => zero(tape)?,
    };

    let el_head = match model.entity_head {
        Some(head) => match head.scores(tape, p, hidden.x4, &batch.spans)? {
            Some(s) => el_loss(tape, s, &batch.entities)?,
            None => zero(tape)?,
        },
        None => zero(tape)?,
    };

    let mlm = match model.token_head.logits(tape, p, hidden.x4, &batch.mlm_rows)? {
        Some(l) => {
            let all = vec![true; batch.mlm_rows.len()];
            tape.cross_entropy(l, &batch.mlm_targets, &all)?
        }
        None => zero(tape)?,
    };

    combine(tape, bio, el_memory, el_head, mlm)
}

/// Question context as seen by the tagger and the memory: when the answer
/// slot fires the memory it is annotated as an (unlinked) mention.
pub fn qa_context(question: &Question, ans_memory: bool) -> Result<Context> {
    let ctx = &question.context;
    if ctx.tokens.last() != Some(&ANS) {
        return Err(Error::contract("question must end with the answer token"));
    }
    let mut ctx = ctx.clone();
    if ans_memory {
        let a = ctx.len() - 1;
        if ctx.mentions.last().is_some_and(|m| m.end >= a) {
            return Err(Error::contract("a question mention overlaps the answer token"));
        }
        ctx.mentions.push(Mention::new(None, a, a));
    }
    Ok(ctx)
}

/// Entity linking of the answer slot through the EntityPred head plus mention
/// tagging on the question tokens.
pub fn qa_loss(model: &Model, tape: &mut Tape, p: &Bound, questions: &[Question]) -> Result<(Var, LossBreakdown)> {
    let head = model
        .entity_head
        .ok_or_else(|| Error::contract(format!("{} has no entity prediction head", model.cfg.variant)))?;
    let contexts = questions
        .iter()
        .map(|q| qa_context(q, model.cfg.qa_ans_memory))
        .collect::<Result<Vec<_>>>()?;
    let batch = Batch::new(&contexts, &[])?;
    let retrieval = model.cfg.train_retrieval();
    let hidden = model.encode(tape, p, &batch.tokens, &batch.layout, Spans::Given(&batch.spans), retrieval)?;
    let bio = match hidden.bio_logits {
        Some(l) => bio_loss_masked(tape, l, &batch.bio, &batch.live())?,
        None => zero(tape)?,
    };
    let seq = batch.layout.seq;
    let slots: Vec<(usize, usize)> = questions
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let a = i * seq + q.context.len() - 1;
            (a, a)
        })
        .collect();
    let gold: Vec<Option<usize>> = questions.iter().map(|q| Some(q.answer)).collect();
    let scores = head
        .scores(tape, p, hidden.x4, &slots)?
        .expect("at least one question");
    let el_head = el_loss(tape, scores, &gold)?;
    let z1 = zero(tape)?;
    let z2 = zero(tape)?;
    combine(tape, bio, z1, el_head, z2)
}
