//! Cloze, question-answering and top-K evaluation, plus the variant comparison.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{mask_linked_mentions, Context, Question};
use crate::entity_memory::Retrieval;
use crate::error::{Error, Result};
use crate::modelzoo::{build, InferOptions, InferRequest, Model, ModelConfig, Variant};
use crate::objectives::qa_context;
use crate::training::{train, Objective, TrainConfig};

/// Contexts per inference pass.
const EVAL_CHUNK: usize = 64;

/// Memory reads summed over an evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AccessReport {
    /// Entity rows read, summed over every queried span.
    pub rows_touched: usize,
    /// Distinct rows read per context, summed over contexts.
    pub distinct_rows: usize,
    /// Rows of `E`, zero for variants without a memory layer.
    pub n_entities: usize,
    /// Spans that queried the memory.
    pub queries: usize,
    pub contexts: usize,
    /// Largest per-context fraction of `E` read.
    pub max_fraction: f64,
}

impl AccessReport {
    /// Mean per-context fraction of `E` read.
    pub fn mean_fraction(&self) -> f64 {
        if self.n_entities == 0 || self.contexts == 0 {
            0.0
        } else {
            self.distinct_rows as f64 / (self.n_entities * self.contexts) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Exact-span entity accuracy over linked masked mentions; `None` without an entity head.
    pub entity_acc: Option<f64>,
    pub token_acc: f64,
    pub ppl: f64,
    pub qa_acc: Option<f64>,
    pub access: AccessReport,
    /// Retrieval width, `None` for the dense readout.
    pub k_used: Option<usize>,
    pub linked_mentions: usize,
    pub masked_tokens: usize,
}

fn k_label(k: Option<usize>) -> String {
    k.map_or_else(|| "full".to_string(), |k| k.to_string())
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

/// Counts from one chunk of contexts, folded in chunk order.
#[derive(Default)]
struct ClozeTally {
    ent_hits: usize,
    linked: usize,
    tok_hits: usize,
    masked_tokens: usize,
    nll: f64,
    access: AccessReport,
}

fn cloze_chunk(model: &Model, chunk: &[Context], opts: InferOptions) -> Result<ClozeTally> {
    let masked: Vec<(Context, Vec<usize>, Vec<usize>)> = chunk
        .iter()
        .map(|c| {
            let (m, t) = mask_linked_mentions(c);
            let (pos, gold) = t.into_iter().unzip();
            (m, pos, gold)
        })
        .collect();
    let requests: Vec<InferRequest<'_>> = masked
        .iter()
        .map(|(c, pos, _)| InferRequest {
            context: c,
            masked: pos,
            queries: &[],
        })
        .collect();
    let outputs = model.infer_batch(&requests, opts)?;
    let mut t = ClozeTally::default();
    for ((ctx, _, gold), out) in masked.iter().zip(&outputs) {
        for (row, &g) in out.token_logits.iter().zip(gold) {
            let (arg, lse) = argmax_logsumexp(row);
            t.tok_hits += usize::from(arg == g);
            t.nll += lse - row[g];
            t.masked_tokens += 1;
        }
        for m in ctx.mentions.iter().filter(|m| m.is_linked()) {
            t.linked += 1;
            let Some(preds) = &out.entities else { continue };
            if preds.iter().any(|p| p.span == m.span() && Some(p.entity) == m.entity) {
                t.ent_hits += 1;
            }
        }
        t.access.rows_touched += out.access.rows_touched;
        t.access.distinct_rows += out.access.distinct_rows;
        t.access.queries += out.retrievals.len();
        t.access.contexts += 1;
        t.access.max_fraction = t.access.max_fraction.max(out.access.fraction_touched());
    }
    Ok(t)
}

/// Cloze probe: every linked mention is masked, spans come from the tagger
/// and an entity counts as correct only when its exact span was detected and
/// the head's argmax is the gold entity.
pub fn cloze_eval(model: &Model, contexts: &[Context], retrieval: Retrieval) -> Result<EvalReport> {
    cloze_eval_with(model, contexts, retrieval, 1)
}

/// [`cloze_eval`] spread over up to `threads` workers. The result does not
/// depend on the thread count.
pub fn cloze_eval_with(model: &Model, contexts: &[Context], retrieval: Retrieval, threads: usize) -> Result<EvalReport> {
    if contexts.is_empty() {
        return Err(Error::contract("cloze evaluation needs at least one context"));
    }
    if let Retrieval::TopK(k) = retrieval {
        if k == 0 || k > model.n_entities() {
            return Err(Error::contract(format!("k={k} outside [1, {}]", model.n_entities())));
        }
    }
    let opts = InferOptions {
        retrieval: Some(retrieval),
        ..Default::default()
    };
    let chunks: Vec<&[Context]> = contexts.chunks(EVAL_CHUNK).collect();
    let workers = threads.clamp(1, chunks.len());
    let per = chunks.len().div_ceil(workers);
    let tallies: Vec<ClozeTally> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| scope.spawn(move || group.iter().map(|c| cloze_chunk(model, c, opts)).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().flatten().collect())
    })?;

    let mut total = ClozeTally {
        access: AccessReport {
            n_entities: if model.memory.is_some() { model.n_entities() } else { 0 },
            ..Default::default()
        },
        ..Default::default()
    };
    for t in tallies {
        total.ent_hits += t.ent_hits;
        total.linked += t.linked;
        total.tok_hits += t.tok_hits;
        total.masked_tokens += t.masked_tokens;
        total.nll += t.nll;
        total.access.rows_touched += t.access.rows_touched;
        total.access.distinct_rows += t.access.distinct_rows;
        total.access.queries += t.access.queries;
        total.access.contexts += t.access.contexts;
        total.access.max_fraction = total.access.max_fraction.max(t.access.max_fraction);
    }
    let frac = |hits: usize, n: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    let t = total;
    Ok(EvalReport {
        entity_acc: model.entity_head.is_some().then(|| frac(t.ent_hits, t.linked)),
        token_acc: frac(t.tok_hits, t.masked_tokens),
        ppl: if t.masked_tokens == 0 { 1.0 } else { (t.nll / t.masked_tokens as f64).exp() },
        qa_acc: None,
        access: t.access,
        k_used: match retrieval {
            Retrieval::TopK(k) => Some(k),
            Retrieval::Dense => None,
        },
        linked_mentions: t.linked,
        masked_tokens: t.masked_tokens,
    })
}

/// Index of the largest entry (first on ties) and the log-sum-exp of `row`.
fn argmax_logsumexp(row: &[f64]) -> (usize, f64) {
    let mut arg = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[arg] {
            arg = i;
        }
    }
    let m = row[arg];
    (arg, m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
}

/// One cloze evaluation per retrieval width. `None` in `ks` means the dense readout.
pub fn topk_sweep(model: &Model, contexts: &[Context], ks: &[Option<usize>]) -> Result<Vec<EvalReport>> {
    topk_sweep_with(model, contexts, ks, 1)
}

pub fn topk_sweep_with(model: &Model, contexts: &[Context], ks: &[Option<usize>], threads: usize) -> Result<Vec<EvalReport>> {
    ks.iter()
        .map(|k| cloze_eval_with(model, contexts, k.map_or(Retrieval::Dense, Retrieval::TopK), threads))
        .collect()
}

pub struct SweepTable<'a>(pub &'a [EvalReport]);

impl fmt::Display for SweepTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6} {:>10} {:>9} {:>8} {:>12} {:>10}", "K", "entity_acc", "token_acc", "ppl", "rows_touched", "max_frac")?;
        for r in self.0 {
            writeln!(
                f,
                "{:>6} {:>10} {:>9.1} {:>8.2} {:>12} {:>10.4}",
                k_label(r.k_used),
                pct(r.entity_acc),
                100.0 * r.token_acc,
                r.ppl,
                r.access.rows_touched,
                r.access.max_fraction
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub accuracy: f64,
    /// Accuracy of always answering the most frequent gold entity of this set.
    pub majority_baseline: f64,
    pub majority_entity: usize,
    pub chance: f64,
    pub questions: usize,
}

impl fmt::Display for QaReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "qa accuracy {:.2}% over {} questions (majority {:.2}%, chance {:.3}%)",
            100.0 * self.accuracy,
            self.questions,
            100.0 * self.majority_baseline,
            100.0 * self.chance
        )
    }
}

/// Fraction of questions whose EntityPred argmax at the answer slot is the gold entity.
pub fn qa_eval(model: &Model, questions: &[Question]) -> Result<QaReport> {
    if questions.is_empty() {
        return Err(Error::contract("question evaluation needs at least one question"));
    }
    if model.entity_head.is_none() {
        return Err(Error::contract(format!("{} has no entity prediction head", model.cfg.variant)));
    }
    let mut hits = 0;
    for chunk in questions.chunks(EVAL_CHUNK) {
        let contexts = chunk
            .iter()
            .map(|q| qa_context(q, model.cfg.qa_ans_memory))
            .collect::<Result<Vec<_>>>()?;
        let slots: Vec<[(usize, usize); 1]> = chunk.iter().map(|q| [(q.ans_index(), q.ans_index())]).collect();
        let requests: Vec<InferRequest<'_>> = contexts
            .iter()
            .zip(&slots)
            .map(|(c, s)| InferRequest {
                context: c,
                masked: &[],
                queries: s,
            })
            .collect();
        for (q, out) in chunk.iter().zip(model.infer_batch(&requests, InferOptions::default())?) {
            let pred = out.queries.as_ref().and_then(|p| p.first()).map(|p| p.entity);
            hits += usize::from(pred == Some(q.answer));
        }
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for q in questions {
        *counts.entry(q.answer).or_default() += 1;
    }
    // Most frequent answer, lowest id on ties.
    let (majority_entity, majority) = counts
        .iter()
        .fold((0, 0), |best, (&e, &c)| if c > best.1 { (e, c) } else { best });
    let n = questions.len() as f64;
    Ok(QaReport {
        accuracy: hits as f64 / n,
        majority_baseline: majority as f64 / n,
        majority_entity,
        chance: 1.0 / model.n_entities() as f64,
        questions: questions.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    /// Mean total loss over the last metrics window.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub a: Variant,
    pub b: Variant,
    /// `a − b` in absolute accuracy points (percent).
    pub entity_acc: Option<f64>,
    pub token_acc: f64,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub deltas: Vec<Delta>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn from_rows(rows: Vec<AblationRow>) -> Self {
        let mut deltas = Vec::new();
        for (i, a) in rows.iter().enumerate() {
            for b in &rows[i + 1..] {
                deltas.push(Delta {
                    a: a.variant,
                    b: b.variant,
                    entity_acc: a
                        .report
                        .entity_acc
                        .zip(b.report.entity_acc)
                        .map(|(x, y)| 100.0 * (x - y)),
                    token_acc: 100.0 * (a.report.token_acc - b.report.token_acc),
                    ppl: a.report.ppl - b.report.ppl,
                });
            }
        }
        Self { rows, deltas }
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>10} {:>9} {:>8} {:>10}", "variant", "entity_acc", "token_acc", "ppl", "final_loss")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:>10} {:>9.1} {:>8.2} {:>10.4}",
                r.variant.as_str(),
                pct(r.report.entity_acc),
                100.0 * r.report.token_acc,
                r.report.ppl,
                r.final_loss
            )?;
        }
        for d in &self.deltas {
            writeln!(
                f,
                "{} - {}: entity {} token {:+.1} ppl {:+.2}",
                d.a.as_str(),
                d.b.as_str(),
                d.entity_acc.map_or_else(|| "-".to_string(), |v| format!("{v:+.1}")),
                d.token_acc,
                d.ppl
            )?;
        }
        Ok(())
    }
}

/// Trains each config from scratch with the same data and optimiser
/// settings, then evaluates at the config's `k_infer`.
pub fn ablation_compare(
    configs: &[ModelConfig],
    train_contexts: &[Context],
    test_contexts: &[Context],
    train_cfg: &TrainConfig,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut model = build(cfg)?;
        let mut tc = train_cfg.clone();
        tc.checkpoint_dir = tc.checkpoint_dir.map(|d| d.join(cfg.variant.as_str()));
        let run = train(&mut model, Objective::Pretrain(train_contexts), &tc)?;
        let final_loss = run.records.last().map_or(f64::NAN, |r| r.window_total);
        let report = cloze_eval(&model, test_contexts, Retrieval::TopK(cfg.k_infer))?;
        log::info!("{}: {:?}", cfg.variant, report);
        rows.push(AblationRow {
            variant: cfg.variant,
            report,
            final_loss,
        });
    }
    Ok(AblationTable::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Mention;
    use approx::assert_abs_diff_eq;

    fn toy_contexts() -> Vec<Context> {
        vec![
            Context::new(vec![5, 6, 7, 8, 9], vec![Mention::new(Some(3), 0, 1), Mention::new(None, 3, 3)]).unwrap(),
            Context::new(vec![10, 11, 12], vec![Mention::new(Some(5), 2, 2)]).unwrap(),
        ]
    }

    #[test]
    fn empty_test_set_is_rejected() {
        let m = build(&ModelConfig::toy(Variant::Eae)).unwrap();
        assert!(matches!(cloze_eval(&m, &[], Retrieval::Dense), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_token_logits_give_vocab_perplexity() {
        let mut m = build(&ModelConfig::toy(Variant::Mm)).unwrap();
        let table = m.token_head.table;
        let n = m.params.get(table).numel();
        m.params.assign(table, vec![0.0; n]).unwrap();
        let r = cloze_eval(&m, &toy_contexts(), Retrieval::TopK(8)).unwrap();
        assert_abs_diff_eq!(r.ppl, m.cfg.vocab_size as f64, epsilon = 1e-9);
        assert_eq!(r.entity_acc, None);
        assert_eq!(r.masked_tokens, 3);
    }

    #[test]
    fn constant_entity_guess_scores_its_share() {
        // Zero scores everywhere: the argmax is entity 0 for every span.
        let mut m = build(&ModelConfig::toy(Variant::NoEae)).unwrap();
        let w = m.entity_head.unwrap().proj.weight;
        let n = m.params.get(w).numel();
        m.params.assign(w, vec![0.0; n]).unwrap();
        let ctx: Vec<Context> = (0..8)
            .map(|e| Context::new(vec![5, 6, 7], vec![Mention::new(Some(e), 1, 1)]).unwrap())
            .collect();
        let out = m.forward_infer(&mask_linked_mentions(&ctx[0]).0, &[], InferOptions::default()).unwrap();
        let detected = out.spans.contains(&(1, 1));
        let r = cloze_eval(&m, &ctx, Retrieval::TopK(8)).unwrap();
        let want = if detected { 1.0 / 8.0 } else { 0.0 };
        assert_abs_diff_eq!(r.entity_acc.unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn rescaling_entity_scores_keeps_accuracy() {
        let cfg = ModelConfig::toy(Variant::NoEae);
        let m = build(&cfg).unwrap();
        let mut scaled = build(&cfg).unwrap();
        let w = scaled.entity_head.unwrap().proj.weight;
        let data: Vec<f64> = scaled.params.get(w).data().iter().map(|v| v * 3.5).collect();
        scaled.params.assign(w, data).unwrap();
        let a = cloze_eval(&m, &toy_contexts(), Retrieval::Dense).unwrap();
        let b = cloze_eval(&scaled, &toy_contexts(), Retrieval::Dense).unwrap();
        assert_eq!(a.entity_acc, b.entity_acc);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let m = build(&ModelConfig::toy(Variant::Eae)).unwrap();
        let ctx: Vec<Context> = (0..150).map(|i| toy_contexts()[i % 2].clone()).collect();
        let one = cloze_eval_with(&m, &ctx, Retrieval::TopK(3), 1).unwrap();
        let three = cloze_eval_with(&m, &ctx, Retrieval::TopK(3), 3).unwrap();
        assert_eq!(one, three);
    }

    #[test]
    fn bad_k_is_rejected() {
        let m = build(&ModelConfig::toy(Variant::Eae)).unwrap();
        assert!(cloze_eval(&m, &toy_contexts(), Retrieval::TopK(0)).is_err());
        assert!(cloze_eval(&m, &toy_contexts(), Retrieval::TopK(9)).is_err());
    }

    #[test]
    fn sweep_rows_and_access_accounting() {
        let m = build(&ModelConfig::toy(Variant::Eae)).unwrap();
        let ctx = toy_contexts();
        let rows = topk_sweep(&m, &ctx, &[Some(1), Some(3), Some(8), None]).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows[..3] {
            assert_eq!(r.access.rows_touched, r.access.queries * r.k_used.unwrap());
        }
        assert!(rows.windows(2).all(|w| w[0].access.rows_touched <= w[1].access.rows_touched));
        let full = &rows[2];
        let dense = &rows[3];
        assert_eq!(full.entity_acc, dense.entity_acc);
        assert_eq!(full.token_acc, dense.token_acc);
        assert_abs_diff_eq!(full.ppl, dense.ppl, epsilon = 1e-9);
        assert!(SweepTable(&rows).to_string().lines().count() == 5);
    }

    #[test]
    fn qa_majority_and_chance() {
        use crate::corpus::{generate_questions, generate_world};
        let w = generate_world(20, 2, 3).unwrap();
        let qs = generate_questions(&w, 10, 4).unwrap();
        let mut cfg = ModelConfig::toy(Variant::Eae);
        cfg.n_entities = 20;
        cfg.k_train = 20;
        cfg.k_infer = 20;
        cfg.vocab_size = w.vocab_size();
        let m = build(&cfg).unwrap();
        let r = qa_eval(&m, &qs).unwrap();
        assert_eq!(r.questions, 10);
        assert_abs_diff_eq!(r.chance, 0.05);
        let top = qs.iter().filter(|q| q.answer == r.majority_entity).count();
        assert_abs_diff_eq!(r.majority_baseline, top as f64 / 10.0);
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert!(qa_eval(&build(&ModelConfig::toy(Variant::Mm)).unwrap(), &qs).is_err());
    }
}
