use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Context, Mention, ANS, MASK, PAD};
use crate::error::{Error, Result};

/// Token and entity name tables. Ids 0..3 are `[MASK]`, `[PAD]` and `[ANS]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "VocabFile", try_from = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    entities: Vec<String>,
    token_index: HashMap<String, usize>,
    entity_index: HashMap<String, usize>,
}

/// On-disk layout: `{"tokens": {str: id}, "entities": {str: id}}`.
#[derive(Serialize, Deserialize)]
pub(crate) struct VocabFile {
    tokens: BTreeMap<String, usize>,
    entities: BTreeMap<String, usize>,
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        Self {
            tokens: v.token_index.into_iter().collect(),
            entities: v.entity_index.into_iter().collect(),
        }
    }
}

fn invert(map: BTreeMap<String, usize>, what: &str) -> std::result::Result<Vec<String>, String> {
    let mut out = vec![None; map.len()];
    for (name, id) in map {
        match out.get_mut(id) {
            Some(slot @ None) => *slot = Some(name),
            Some(Some(_)) => return Err(format!("duplicate {what} id {id}")),
            None => return Err(format!("{what} id {id} leaves a gap in the id space")),
        }
    }
    Ok(out.into_iter().map(|s| s.expect("dense ids")).collect())
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = String;

    fn try_from(f: VocabFile) -> std::result::Result<Self, String> {
        let tokens = invert(f.tokens, "token")?;
        let entities = invert(f.entities, "entity")?;
        let v = Vocabulary::from_parts(tokens, entities).map_err(|e| e.to_string())?;
        if v.tokens.len() < 3 || v.token(MASK) != "[MASK]" || v.token(PAD) != "[PAD]" || v.token(ANS) != "[ANS]" {
            return Err("reserved ids 0,1,2 must be [MASK], [PAD], [ANS]".into());
        }
        Ok(v)
    }
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, entities: Vec<String>) -> Result<Self> {
        let token_index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let entity_index: HashMap<String, usize> =
            entities.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if token_index.len() != tokens.len() || entity_index.len() != entities.len() {
            return Err(Error::Invariant("vocabulary names must be unique".into()));
        }
        Ok(Self {
            tokens,
            entities,
            token_index,
            entity_index,
        })
    }

    fn with_reserved() -> Self {
        Self::from_parts(
            vec!["[MASK]".into(), "[PAD]".into(), "[ANS]".into()],
            Vec::new(),
        )
        .expect("reserved tokens are distinct")
    }

    fn intern(&mut self, word: &str) -> usize {
        if let Some(&id) = self.token_index.get(word) {
            return id;
        }
        self.tokens.push(word.to_string());
        self.token_index.insert(word.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    fn add_entity(&mut self, name: String) -> usize {
        self.entities.push(name.clone());
        self.entity_index.insert(name, self.entities.len() - 1);
        self.entities.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn token_id(&self, word: &str) -> Option<usize> {
        self.token_index.get(word).copied()
    }

    pub fn entity(&self, id: usize) -> &str {
        &self.entities[id]
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_index.get(name).copied()
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Word(usize),
    Subject,
    Object,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    /// Declarative verbalizations used by the pre-training corpus.
    pub templates: Vec<Vec<Slot>>,
    /// Question verbalization, never used in the pre-training corpus.
    pub question: Vec<Slot>,
}

/// Entities with aliases and one functional object per relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub vocab: Vocabulary,
    pub relations: Vec<Relation>,
    /// `aliases[e]` lists the surface forms (token id sequences) of entity `e`.
    pub aliases: Vec<Vec<Vec<usize>>>,
    /// `objects[e][r]` is the object of `(e, r, ·)`.
    pub objects: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldOptions {
    /// Target fraction of entities that share an alias with another entity.
    pub collision_rate: f64,
    /// Probability that an entity gets a three-token alias.
    pub long_alias_rate: f64,
}

impl Default for WorldOptions {
    fn default() -> Self {
        Self {
            collision_rate: 0.3,
            long_alias_rate: 0.3,
        }
    }
}

const RELATIONS: &[(&str, &[&str], &str)] = &[
    (
        "born_in",
        &["{s} was born in {o} .", "{s} , a native of {o} ."],
        "where was {s} born ?",
    ),
    (
        "works_for",
        &["{s} works for {o} .", "{s} is employed by {o} ."],
        "who employs {s} ?",
    ),
    (
        "member_of",
        &["{s} is a member of {o} .", "{s} belongs to {o} ."],
        "what group does {s} belong to ?",
    ),
    (
        "married_to",
        &["{s} is married to {o} .", "{s} wed {o} ."],
        "whom did {s} marry ?",
    ),
    (
        "studied_at",
        &["{s} studied at {o} .", "{s} graduated from {o} ."],
        "where did {s} study ?",
    ),
    (
        "founded",
        &["{s} founded {o} .", "{s} established {o} ."],
        "what did {s} found ?",
    ),
];

fn parse_template(vocab: &mut Vocabulary, text: &str) -> Vec<Slot> {
    text.split_whitespace()
        .map(|w| match w {
            "{s}" => Slot::Subject,
            "{o}" => Slot::Object,
            w => Slot::Word(vocab.intern(w)),
        })
        .collect()
}

/// Distinct pronounceable names, in a seed-dependent order.
fn name_pool(count: usize, taken: &HashSet<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut out = Vec::with_capacity(count);
    let mut syllables = 2;
    while out.len() < count {
        let per = CONS.len() * VOWELS.len();
        let total = per.pow(syllables);
        let mut batch: Vec<String> = (0..total)
            .map(|mut k| {
                let mut s = String::with_capacity(2 * syllables as usize);
                for _ in 0..syllables {
                    let syl = k % per;
                    k /= per;
                    s.push(CONS[syl / VOWELS.len()] as char);
                    s.push(VOWELS[syl % VOWELS.len()] as char);
                }
                s
            })
            .filter(|s| !taken.contains(s))
            .collect();
        batch.shuffle(rng);
        out.extend(batch.into_iter().take(count - out.len()));
        syllables += 1;
    }
    out
}

pub fn generate_world(n_entities: usize, n_relations: usize, seed: u64) -> Result<SyntheticWorld> {
    generate_world_with(n_entities, n_relations, seed, &WorldOptions::default())
}

pub fn generate_world_with(
    n_entities: usize,
    n_relations: usize,
    seed: u64,
    opts: &WorldOptions,
) -> Result<SyntheticWorld> {
    if n_entities < 10 {
        return Err(Error::contract(format!("need at least 10 entities, got {n_entities}")));
    }
    if n_relations == 0 {
        return Err(Error::contract("need at least one relation"));
    }
    if !(0.0..=1.0).contains(&opts.collision_rate) || !(0.0..=1.0).contains(&opts.long_alias_rate) {
        return Err(Error::contract("alias rates must lie in [0,1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vocab = Vocabulary::with_reserved();

    let relations: Vec<Relation> = (0..n_relations)
        .map(|r| match RELATIONS.get(r) {
            Some((name, templates, question)) => Relation {
                name: name.to_string(),
                templates: templates.iter().map(|t| parse_template(&mut vocab, t)).collect(),
                question: parse_template(&mut vocab, question),
            },
            None => Relation {
                name: format!("rel{r}"),
                templates: vec![
                    parse_template(&mut vocab, &format!("{{s}} rel{r} {{o}} .")),
                    parse_template(&mut vocab, &format!("{{s}} , rel{r} of {{o}} .")),
                ],
                question: parse_template(&mut vocab, &format!("rel{r} ask {{s}} ?")),
            },
        })
        .collect();

    // Two-token primary aliases drawn from shared first/last pools, so a
    // single token never identifies an entity on its own.
    let pool = ((n_entities as f64).sqrt() * 1.3).ceil().max(4.0) as usize;
    let n_mid = 12;
    let n_pairs = ((opts.collision_rate * n_entities as f64) / 2.0).round() as usize;
    let taken: HashSet<String> = (0..vocab.len()).map(|i| vocab.token(i).to_string()).collect();
    let names = name_pool(2 * pool + n_mid + n_pairs, &taken, &mut rng);
    let (first, rest) = names.split_at(pool);
    let (last, rest) = rest.split_at(pool);
    let (mid, nicks) = rest.split_at(n_mid);
    let first: Vec<usize> = first.iter().map(|w| vocab.intern(w)).collect();
    let last: Vec<usize> = last.iter().map(|w| vocab.intern(w)).collect();
    let mid: Vec<usize> = mid.iter().map(|w| vocab.intern(w)).collect();
    let nicks: Vec<usize> = nicks.iter().map(|w| vocab.intern(w)).collect();

    let mut pairs: Vec<(usize, usize)> = (0..pool).flat_map(|a| (0..pool).map(move |b| (a, b))).collect();
    pairs.shuffle(&mut rng);
    let mut aliases: Vec<Vec<Vec<usize>>> = Vec::with_capacity(n_entities);
    for (e, &(a, b)) in pairs.iter().take(n_entities).enumerate() {
        let name = format!("{} {}", vocab.token(first[a]), vocab.token(last[b]));
        let id = vocab.add_entity(name);
        debug_assert_eq!(id, e);
        let mut forms = vec![vec![first[a], last[b]]];
        if rng.random::<f64>() < opts.long_alias_rate {
            let m = *mid.choose(&mut rng).expect("non-empty middle pool");
            forms.push(vec![first[a], m, last[b]]);
        }
        aliases.push(forms);
    }

    // Deliberately ambiguous aliases: disjoint entity pairs share a nickname.
    let mut order: Vec<usize> = (0..n_entities).collect();
    order.shuffle(&mut rng);
    for (i, &nick) in nicks.iter().enumerate() {
        aliases[order[2 * i]].push(vec![nick]);
        aliases[order[2 * i + 1]].push(vec![nick]);
    }

    let objects = (0..n_entities)
        .map(|e| {
            (0..n_relations)
                .map(|_| loop {
                    let o = rng.random_range(0..n_entities);
                    if o != e {
                        break o;
                    }
                })
                .collect()
        })
        .collect();

    Ok(SyntheticWorld {
        vocab,
        relations,
        aliases,
        objects,
    })
}

impl SyntheticWorld {
    pub fn n_entities(&self) -> usize {
        self.aliases.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// All `(subject, relation, object)` triples.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.objects
            .iter()
            .enumerate()
            .flat_map(|(s, objs)| objs.iter().enumerate().map(move |(r, &o)| (s, r, o)))
    }

    /// Fraction of entities owning at least one alias that another entity also uses.
    pub fn alias_collision_rate(&self) -> f64 {
        let mut owners: HashMap<&[usize], HashSet<usize>> = HashMap::new();
        for (e, forms) in self.aliases.iter().enumerate() {
            for f in forms {
                owners.entry(f.as_slice()).or_default().insert(e);
            }
        }
        let collided: HashSet<usize> = owners
            .values()
            .filter(|s| s.len() > 1)
            .flat_map(|s| s.iter().copied())
            .collect();
        collided.len() as f64 / self.n_entities() as f64
    }

    /// Entities owning the given surface form.
    pub fn entities_with_alias(&self, form: &[usize]) -> Vec<usize> {
        (0..self.n_entities())
            .filter(|&e| self.aliases[e].iter().any(|f| f == form))
            .collect()
    }

    /// Emits `template` with the chosen subject/object aliases into `tokens`,
    /// returning the (subject, object) spans that were produced.
    fn verbalize(
        &self,
        template: &[Slot],
        subject: &[usize],
        object: &[usize],
        tokens: &mut Vec<usize>,
    ) -> Vec<(Slot, usize, usize)> {
        let mut spans = Vec::new();
        for slot in template {
            match *slot {
                Slot::Word(w) => tokens.push(w),
                Slot::Subject | Slot::Object => {
                    let form = if *slot == Slot::Subject { subject } else { object };
                    let start = tokens.len();
                    tokens.extend_from_slice(form);
                    spans.push((*slot, start, tokens.len() - 1));
                }
            }
        }
        spans
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusOptions {
    /// Probability that a mention is emitted without its entity link.
    pub unlinked_fraction: f64,
    pub max_len: usize,
    /// Facts verbalized per context are drawn uniformly from `1..=max_facts`.
    pub max_facts: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            unlinked_fraction: 0.5,
            max_len: 32,
            max_facts: 3,
        }
    }
}

pub fn generate_corpus(world: &SyntheticWorld, n_contexts: usize, seed: u64) -> Result<Vec<Context>> {
    generate_corpus_with(world, n_contexts, seed, &CorpusOptions::default())
}

/// Each context picks a subject and verbalizes 1..=`max_facts` of its facts.
/// Every surface form is annotated; links are dropped at `unlinked_fraction`.
pub fn generate_corpus_with(
    world: &SyntheticWorld,
    n_contexts: usize,
    seed: u64,
    opts: &CorpusOptions,
) -> Result<Vec<Context>> {
    if !(0.0..=1.0).contains(&opts.unlinked_fraction) {
        return Err(Error::contract("unlinked_fraction must lie in [0,1]"));
    }
    if opts.max_facts == 0 {
        return Err(Error::contract("max_facts must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = world.n_entities();
    let mut out = Vec::with_capacity(n_contexts);
    for _ in 0..n_contexts {
        let subject = rng.random_range(0..n);
        let n_facts = rng.random_range(1..=opts.max_facts.min(world.n_relations()));
        let mut rels: Vec<usize> = (0..world.n_relations()).collect();
        rels.shuffle(&mut rng);
        let mut tokens = Vec::new();
        let mut mentions = Vec::new();
        for &r in rels.iter().take(n_facts) {
            let object = world.objects[subject][r];
            let rel = &world.relations[r];
            let template = rel.templates.choose(&mut rng).expect("relation has templates");
            let s_form = world.aliases[subject].choose(&mut rng).expect("entity has aliases");
            let o_form = world.aliases[object].choose(&mut rng).expect("entity has aliases");
            let mut sentence = Vec::new();
            let spans = world.verbalize(template, s_form, o_form, &mut sentence);
            if tokens.len() + sentence.len() > opts.max_len {
                if tokens.is_empty() {
                    return Err(Error::contract(format!(
                        "max_len {} shorter than a single sentence",
                        opts.max_len
                    )));
                }
                break;
            }
            let offset = tokens.len();
            for (slot, s, e) in spans {
                let entity = if slot == Slot::Subject { subject } else { object };
                let linked = rng.random::<f64>() >= opts.unlinked_fraction;
                mentions.push(Mention::new(linked.then_some(entity), s + offset, e + offset));
            }
            tokens.extend(sentence);
        }
        out.push(Context::new(tokens, mentions)?);
    }
    Ok(out)
}

/// A closed-book question: the final token is `[ANS]`, `answer` its gold entity.
#[derive(Debug, Clone, PartialEq)]
pub struct Question {
    pub context: Context,
    pub answer: usize,
    pub subject: usize,
    pub relation: usize,
}

impl Question {
    pub fn ans_index(&self) -> usize {
        self.context.len() - 1
    }
}

/// Questions about `n` distinct facts, phrased with the held-out question
/// template of each relation and terminated by `[ANS]`.
pub fn generate_questions(world: &SyntheticWorld, n: usize, seed: u64) -> Result<Vec<Question>> {
    let total = world.n_entities() * world.n_relations();
    if n > total {
        return Err(Error::contract(format!("asked for {n} questions but only {total} facts exist")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let facts = rand::seq::index::sample(&mut rng, total, n).into_vec();
    facts
        .into_iter()
        .map(|f| {
            let (subject, relation) = (f / world.n_relations(), f % world.n_relations());
            let s_form = world.aliases[subject].choose(&mut rng).expect("entity has aliases");
            let mut tokens = Vec::new();
            let spans = world.verbalize(&world.relations[relation].question, s_form, &[], &mut tokens);
            let mentions = spans
                .into_iter()
                .filter(|(slot, _, _)| *slot == Slot::Subject)
                .map(|(_, s, e)| Mention::new(Some(subject), s, e))
                .collect();
            tokens.push(ANS);
            Ok(Question {
                context: Context::new(tokens, mentions)?,
                answer: world.objects[subject][relation],
                subject,
                relation,
            })
        })
        .collect()
}
