//! Model configurations and the four assembled variants.
//!
//! Every variant shares the same skeleton: token embedding, `l0` blocks, an
//! optional entity memory layer, `l1` blocks and the output heads. Without a
//! memory the two stacks run back to back.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{bio_labels, Bio, Context, MaskTarget, PAD};
use crate::entity_memory::{access_count, entity_table, AccessStats, EntityMemory, MemoryOutput, MemoryRetrieval, Retrieval};
use crate::error::{Error, Result};
use crate::heads::{predict_entity, EntityPredHead, TokenPredHead};
use crate::mention_bio::{decode, BioHead};
use crate::nn::{Bound, ParamId, ParamStore, TokenEmbedding, TransformerStack};
use crate::numerics::{SeqLayout, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Supervised entity memory between the two stacks.
    Eae,
    /// Memory present but never supervised; no entity prediction head.
    EaeUnsup,
    /// No memory; the entity table is only read by the prediction head.
    NoEae,
    /// Plain masked language model on the same data.
    Mm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Eae, Variant::EaeUnsup, Variant::NoEae, Variant::Mm];

    pub fn has_memory(self) -> bool {
        matches!(self, Variant::Eae | Variant::EaeUnsup)
    }

    pub fn has_entity_head(self) -> bool {
        matches!(self, Variant::Eae | Variant::NoEae)
    }

    pub fn has_bio_head(self) -> bool {
        self != Variant::Mm
    }

    pub fn has_entity_table(self) -> bool {
        self != Variant::Mm
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Eae => "eae",
            Variant::EaeUnsup => "eae_unsup",
            Variant::NoEae => "no_eae",
            Variant::Mm => "mm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Validation(vec![format!("unknown variant `{s}`")]))
    }
}

/// Full set of model hyperparameters. The JSON form uses these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub l0: usize,
    pub l1: usize,
    pub d_emb: usize,
    pub d_ent: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    #[serde(rename = "N")]
    pub n_entities: usize,
    #[serde(rename = "V")]
    pub vocab_size: usize,
    pub k_train: usize,
    pub k_infer: usize,
    pub mask_rate: f64,
    pub frozen_embeddings: bool,
    pub tie_entity_projections: bool,
    pub qa_ans_memory: bool,
    pub seed: u64,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults for a 1000-entity world.
    fn default() -> Self {
        Self {
            variant: Variant::Eae,
            l0: 2,
            l1: 2,
            d_emb: 64,
            d_ent: 64,
            n_heads: 4,
            ffn_dim: 256,
            n_entities: 1000,
            vocab_size: 512,
            k_train: 1000,
            k_infer: 100,
            mask_rate: 0.2,
            frozen_embeddings: false,
            tie_entity_projections: false,
            qa_ans_memory: true,
            seed: 0,
            max_len: 32,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Published full-size settings: 4 + 8 layers, BERT-base width, a million
    /// 256-dimensional entities and 100 retrieved rows at inference.
    pub fn paper() -> Self {
        Self {
            l0: 4,
            l1: 8,
            d_emb: 768,
            d_ent: 256,
            n_heads: 12,
            ffn_dim: 3072,
            n_entities: 1_000_000,
            vocab_size: 30_522,
            k_train: 1_000_000,
            k_infer: 100,
            max_len: 128,
            dropout: 0.1,
            ..Self::default()
        }
    }

    /// Tiny model used by gradient checks.
    pub fn toy(variant: Variant) -> Self {
        Self {
            variant,
            l0: 1,
            l1: 1,
            d_emb: 16,
            d_ent: 8,
            n_heads: 2,
            ffn_dim: 32,
            n_entities: 8,
            vocab_size: 50,
            k_train: 8,
            k_infer: 8,
            max_len: 16,
            ..Self::default()
        }
    }

    /// Same configuration for another variant; `eae_unsup` gets full-width retrieval.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.variant = variant;
        if variant == Variant::EaeUnsup {
            c.k_train = c.n_entities;
            c.k_infer = c.n_entities;
        }
        if variant != Variant::Eae {
            c.tie_entity_projections = false;
        }
        c
    }

    /// Every violated constraint, or `Ok` if there are none.
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.d_emb == 0 || self.n_heads == 0 || self.d_emb % self.n_heads != 0 {
            v.push(format!("d_emb {} must be a positive multiple of n_heads {}", self.d_emb, self.n_heads));
        }
        if self.ffn_dim == 0 {
            v.push("ffn_dim must be positive".into());
        }
        if self.d_ent == 0 {
            v.push("d_ent must be positive".into());
        }
        if self.n_entities == 0 {
            v.push("N must be at least 1".into());
        }
        if self.vocab_size < 3 {
            v.push(format!("V {} leaves no room for the reserved tokens", self.vocab_size));
        }
        if self.max_len == 0 {
            v.push("max_len must be positive".into());
        }
        for (name, k) in [("k_train", self.k_train), ("k_infer", self.k_infer)] {
            if k == 0 || k > self.n_entities {
                v.push(format!("{name} {k} must lie in [1, N={}]", self.n_entities));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            v.push(format!("mask_rate {} must lie in [0,1]", self.mask_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("dropout {} must lie in [0,1)", self.dropout));
        }
        if self.variant == Variant::EaeUnsup && (self.k_infer != self.n_entities || self.k_train != self.n_entities) {
            v.push("eae_unsup reads the whole memory: k_train and k_infer must equal N".into());
        }
        if self.tie_entity_projections && self.variant != Variant::Eae {
            v.push(format!("tie_entity_projections needs both a memory and an entity head, not {}", self.variant));
        }
        if self.frozen_embeddings && !self.variant.has_entity_table() {
            v.push("frozen_embeddings needs an entity table".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// Number of scalar parameters [`build`] creates, without allocating them.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_emb, self.ffn_dim);
        let layer = 4 * d * d + 2 * f * d + f + 8 * d;
        let mut n = self.vocab_size * d + self.max_len * d + (self.l0 + self.l1) * layer + self.vocab_size;
        if self.variant.has_bio_head() {
            n += 3 * d + 3;
        }
        if self.variant.has_entity_table() {
            n += self.n_entities * self.d_ent;
        }
        if self.variant.has_memory() {
            n += 3 * d * self.d_ent;
        }
        if self.variant.has_entity_head() && !self.tie_entity_projections {
            n += 2 * d * self.d_ent;
        }
        n
    }

    /// Retrieval used while training: dense when the whole table is read.
    pub fn train_retrieval(&self) -> Retrieval {
        if self.k_train >= self.n_entities {
            Retrieval::Dense
        } else {
            Retrieval::TopK(self.k_train)
        }
    }
}

/// Where mention spans come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MentionSource {
    Gold,
    #[default]
    Predicted,
}

/// Parameter totals grouped by name prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub groups: BTreeMap<String, usize>,
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (g, n) in &self.groups {
            writeln!(f, "{g:<16} {n:>12}")?;
        }
        write!(f, "{:<16} {:>12}", "total", self.total)
    }
}

/// Contexts padded and packed row-wise, with gold annotations in row space.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub layout: SeqLayout,
    pub tokens: Vec<usize>,
    /// Gold spans as packed row indices, sorted.
    pub spans: Vec<(usize, usize)>,
    pub entities: Vec<Option<usize>>,
    pub bio: Vec<Bio>,
    pub mlm_rows: Vec<usize>,
    pub mlm_targets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Batch {
    /// `targets` is either empty or holds one mask-target list per context.
    pub fn new(contexts: &[Context], targets: &[Vec<MaskTarget>]) -> Result<Self> {
        if contexts.is_empty() {
            return Err(Error::contract("batch needs at least one context"));
        }
        if !targets.is_empty() && targets.len() != contexts.len() {
            return Err(Error::contract(format!(
                "{} contexts but {} target lists",
                contexts.len(),
                targets.len()
            )));
        }
        let seq = contexts.iter().map(Context::len).max().unwrap_or(0);
        if seq == 0 {
            return Err(Error::contract("batch contexts are all empty"));
        }
        let mut b = Batch {
            layout: SeqLayout {
                batch: contexts.len(),
                seq,
                pad: Vec::with_capacity(contexts.len() * seq),
            },
            tokens: Vec::with_capacity(contexts.len() * seq),
            spans: Vec::new(),
            entities: Vec::new(),
            bio: Vec::with_capacity(contexts.len() * seq),
            mlm_rows: Vec::new(),
            mlm_targets: Vec::new(),
            lens: Vec::with_capacity(contexts.len()),
        };
        for (i, ctx) in contexts.iter().enumerate() {
            if ctx.is_empty() {
                return Err(Error::contract(format!("context {i} is empty")));
            }
            let off = i * seq;
            let labels = bio_labels(ctx)?;
            b.tokens.extend(&ctx.tokens);
            b.tokens.extend(std::iter::repeat_n(PAD, seq - ctx.len()));
            b.layout.pad.extend(std::iter::repeat_n(false, ctx.len()));
            b.layout.pad.extend(std::iter::repeat_n(true, seq - ctx.len()));
            b.bio.extend(labels);
            b.bio.extend(std::iter::repeat_n(Bio::O, seq - ctx.len()));
            for m in &ctx.mentions {
                b.spans.push((off + m.start, off + m.end));
                b.entities.push(m.entity);
            }
            if let Some(ts) = targets.get(i) {
                for &(pos, tok) in ts {
                    if pos >= ctx.len() {
                        return Err(Error::contract(format!("mask target {pos} outside context {i}")));
                    }
                    b.mlm_rows.push(off + pos);
                    b.mlm_targets.push(tok);
                }
            }
            b.lens.push(ctx.len());
        }
        Ok(b)
    }

    pub fn live(&self) -> Vec<bool> {
        self.layout.pad.iter().map(|p| !p).collect()
    }
}

/// Span choice for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Spans<'a> {
    /// Row-space spans supplied by the caller.
    Given(&'a [(usize, usize)]),
    /// Decoded from the mention tagger over each sequence's live rows.
    Predicted,
}

/// Intermediate states of one forward pass.
#[derive(Debug, Clone)]
pub struct Hidden {
    pub x1: Var,
    pub bio_logits: Option<Var>,
    /// Spans the memory layer used, in row space.
    pub spans: Vec<(usize, usize)>,
    pub memory: Option<MemoryOutput>,
    pub x4: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub embed: TokenEmbedding,
    pub lower: TransformerStack,
    pub bio: Option<BioHead>,
    pub entities: Option<ParamId>,
    pub memory: Option<EntityMemory>,
    pub upper: TransformerStack,
    pub token_head: TokenPredHead,
    pub entity_head: Option<EntityPredHead>,
}

/// Builds a model with parameters drawn deterministically from `cfg.seed`.
pub fn build(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let embed = TokenEmbedding::new(&mut store, cfg.vocab_size, cfg.d_emb, cfg.max_len, &mut rng);
    let mut lower = TransformerStack::new(&mut store, "lower", cfg.l0, cfg.d_emb, cfg.n_heads, cfg.ffn_dim, cfg.max_len, &mut rng)?;
    let bio = cfg.variant.has_bio_head().then(|| BioHead::new(&mut store, cfg.d_emb, &mut rng));
    let entities = cfg
        .variant
        .has_entity_table()
        .then(|| entity_table(&mut store, cfg.n_entities, cfg.d_ent, &mut rng));
    let memory = match (cfg.variant.has_memory(), entities) {
        (true, Some(t)) => Some(EntityMemory::new(&mut store, t, cfg.d_emb, &mut rng)),
        _ => None,
    };
    let mut upper = TransformerStack::new(&mut store, "upper", cfg.l1, cfg.d_emb, cfg.n_heads, cfg.ffn_dim, cfg.max_len, &mut rng)?;
    lower.dropout = cfg.dropout;
    upper.dropout = cfg.dropout;
    let token_head = TokenPredHead::new(&mut store, embed.tokens);
    let entity_head = match (cfg.variant.has_entity_head(), entities) {
        (true, Some(t)) => Some(match (cfg.tie_entity_projections, memory) {
            (true, Some(m)) => EntityPredHead::tied(m.proj_in, t),
            _ => EntityPredHead::new(&mut store, t, cfg.d_emb, &mut rng),
        }),
        _ => None,
    };
    if let (true, Some(t)) = (cfg.frozen_embeddings, entities) {
        store.set_frozen(t, true);
    }
    let model = Model {
        cfg: cfg.clone(),
        params: store,
        embed,
        lower,
        bio,
        entities,
        memory,
        upper,
        token_head,
        entity_head,
    };
    log::info!("built {} model\n{}", cfg.variant, model.param_report());
    Ok(model)
}

/// Entity guess for one span of one context.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityPrediction {
    pub span: (usize, usize),
    pub entity: usize,
    pub scores: Vec<f64>,
}

/// One context to run at inference.
#[derive(Debug, Clone, Copy)]
pub struct InferRequest<'a> {
    pub context: &'a Context,
    /// Positions whose tokens the TokenPred head should score.
    pub masked: &'a [usize],
    /// Extra spans for the EntityPred head, e.g. the answer slot of a question.
    pub queries: &'a [(usize, usize)],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferOptions {
    /// `None` uses `TopK(cfg.k_infer)`.
    pub retrieval: Option<Retrieval>,
    pub mention_source: MentionSource,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            retrieval: None,
            mention_source: MentionSource::Predicted,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    /// One `V`-wide row per requested masked position.
    pub token_logits: Vec<Vec<f64>>,
    /// Predictions for every span used, or `None` without an entity head.
    pub entities: Option<Vec<EntityPrediction>>,
    /// Predictions for the requested query spans.
    pub queries: Option<Vec<EntityPrediction>>,
    /// Spans used for memory access and entity prediction, context-local.
    pub spans: Vec<(usize, usize)>,
    pub retrievals: Vec<MemoryRetrieval>,
    pub access: AccessStats,
    /// Final hidden states `[len, d_emb]`, row-major.
    pub hidden: Vec<f64>,
}

impl Model {
    pub fn n_entities(&self) -> usize {
        self.cfg.n_entities
    }

    pub fn param_report(&self) -> ParamReport {
        let mut groups = BTreeMap::new();
        for (_, name, t) in self.params.iter() {
            let g = name.split('.').next().unwrap_or(name).to_string();
            *groups.entry(g).or_insert(0) += t.numel();
        }
        ParamReport {
            total: self.params.numel(),
            groups,
        }
    }

    /// Runs embedding, both stacks and (if present) the memory layer.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        tokens: &[usize],
        layout: &SeqLayout,
        spans: Spans<'_>,
        retrieval: Retrieval,
    ) -> Result<Hidden> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Index {
                what: "vocabulary",
                index: t,
                bound: self.cfg.vocab_size,
            });
        }
        let x0 = self.embed.forward(tape, p, tokens, layout)?;
        let x1 = self.lower.forward(tape, p, x0, layout)?;
        let bio_logits = match self.bio {
            Some(b) => Some(b.logits(tape, p, x1)?),
            None => None,
        };
        let spans = match spans {
            Spans::Given(s) => s.to_vec(),
            Spans::Predicted => match bio_logits {
                Some(l) => predicted_spans(tape.value(l), layout),
                None => Vec::new(),
            },
        };
        let (x3, memory) = match self.memory {
            Some(mem) => {
                let out = mem.forward(tape, p, x1, &spans, retrieval)?;
                let sum = tape.add(out.out, x1)?;
                let d = self.cfg.d_emb;
                let gain = tape.constant(&[d], vec![1.0; d])?;
                let bias = tape.constant(&[d], vec![0.0; d])?;
                (tape.layer_norm(sum, gain, bias)?, Some(out))
            }
            None => (x1, None),
        };
        let x4 = self.upper.forward(tape, p, x3, layout)?;
        Ok(Hidden {
            x1,
            bio_logits,
            spans,
            memory,
            x4,
        })
    }

    /// Inference over several contexts packed into one pass.
    pub fn infer_batch(&self, requests: &[InferRequest<'_>], opts: InferOptions) -> Result<Vec<InferenceOutput>> {
        let contexts: Vec<Context> = requests.iter().map(|r| r.context.clone()).collect();
        let batch = Batch::new(&contexts, &[])?;
        let seq = batch.layout.seq;
        let retrieval = opts.retrieval.unwrap_or(Retrieval::TopK(self.cfg.k_infer));
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let spans = match opts.mention_source {
            MentionSource::Gold => Spans::Given(&batch.spans),
            MentionSource::Predicted => Spans::Predicted,
        };
        let hidden = self.encode(&mut tape, &p, &batch.tokens, &batch.layout, spans, retrieval)?;

        let mut mlm_rows = Vec::new();
        let mut query_rows = Vec::new();
        for (i, r) in requests.iter().enumerate() {
            for &pos in r.masked {
                if pos >= r.context.len() {
                    return Err(Error::contract(format!("masked position {pos} outside context {i}")));
                }
                mlm_rows.push(i * seq + pos);
            }
            for &(s, e) in r.queries {
                if s > e || e >= r.context.len() {
                    return Err(Error::contract(format!("query span ({s},{e}) outside context {i}")));
                }
                query_rows.push((i * seq + s, i * seq + e));
            }
        }
        let token_logits = self.token_head.logits(&mut tape, &p, hidden.x4, &mlm_rows)?;
        let (span_scores, query_scores) = match self.entity_head {
            Some(h) => (
                h.scores(&mut tape, &p, hidden.x4, &hidden.spans)?,
                h.scores(&mut tape, &p, hidden.x4, &query_rows)?,
            ),
            None => (None, None),
        };
        let retrievals = match (self.memory, hidden.memory) {
            (Some(mem), Some(out)) => mem.retrievals(&tape, &out, retrieval),
            _ => Vec::new(),
        };

        let v = self.cfg.vocab_size;
        let n = self.cfg.n_entities;
        let d = self.cfg.d_emb;
        let x4 = tape.value(hidden.x4);
        let tl = token_logits.map(|t| tape.value(t).to_vec()).unwrap_or_default();
        let ss = span_scores.map(|t| tape.value(t).to_vec());
        let qs = query_scores.map(|t| tape.value(t).to_vec());
        let total_rows = if self.entities.is_some() { n } else { 0 };

        let mut outputs = Vec::with_capacity(requests.len());
        let (mut mlm_i, mut span_i, mut query_i) = (0, 0, 0);
        for (i, r) in requests.iter().enumerate() {
            let (lo, hi) = (i * seq, (i + 1) * seq);
            let token_logits = (0..r.masked.len())
                .map(|j| tl[(mlm_i + j) * v..(mlm_i + j + 1) * v].to_vec())
                .collect();
            mlm_i += r.masked.len();
            let first = span_i;
            while span_i < hidden.spans.len() && hidden.spans[span_i].0 < hi {
                span_i += 1;
            }
            let spans: Vec<(usize, usize)> = hidden.spans[first..span_i].iter().map(|&(s, e)| (s - lo, e - lo)).collect();
            let entities = ss.as_ref().map(|scores| {
                (first..span_i)
                    .zip(&spans)
                    .map(|(j, &span)| prediction(span, &scores[j * n..(j + 1) * n]))
                    .collect()
            });
            let queries = qs.as_ref().map(|scores| {
                r.queries
                    .iter()
                    .enumerate()
                    .map(|(j, &span)| prediction(span, &scores[(query_i + j) * n..(query_i + j + 1) * n]))
                    .collect()
            });
            query_i += r.queries.len();
            let rets: Vec<MemoryRetrieval> = retrievals.get(first..span_i).map(<[_]>::to_vec).unwrap_or_default();
            let access = access_count(&rets, total_rows);
            outputs.push(InferenceOutput {
                token_logits,
                entities,
                queries,
                spans,
                retrievals: rets,
                access,
                hidden: x4[lo * d..(lo + r.context.len()) * d].to_vec(),
            });
        }
        Ok(outputs)
    }

    /// Single-context inference.
    pub fn forward_infer(&self, ctx: &Context, masked: &[usize], opts: InferOptions) -> Result<InferenceOutput> {
        let req = InferRequest {
            context: ctx,
            masked,
            queries: &[],
        };
        Ok(self.infer_batch(&[req], opts)?.remove(0))
    }
}

fn prediction(span: (usize, usize), scores: &[f64]) -> EntityPrediction {
    EntityPrediction {
        span,
        entity: predict_entity(scores),
        scores: scores.to_vec(),
    }
}

/// Decodes BIO logits sequence by sequence over live rows only.
fn predicted_spans(logits: &[f64], layout: &SeqLayout) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for b in 0..layout.batch {
        let off = b * layout.seq;
        let live = (0..layout.seq).take_while(|&t| !layout.pad[off + t]).count();
        let rows = &logits[3 * off..3 * (off + live)];
        out.extend(decode(rows).into_iter().map(|(s, e)| (s + off, e + off)));
    }
    out
}
