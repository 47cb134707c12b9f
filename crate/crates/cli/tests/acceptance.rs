//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. `ACCEPTANCE_ONLY=1,2,6` runs a subset.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use eae_core::corpus::{
    generate_corpus, generate_questions, generate_world, is_legal_bio, mask_mentions, spans_to_bio, split_contexts,
    Context, Mention, Question, SyntheticWorld, MASK,
};
use eae_core::entity_memory::{retrieve, Retrieval};
use eae_core::gradsuite::{full_suite, generic_point};
use eae_core::mention_bio::{decode, decode_labels};
use eae_core::modelzoo::{build, InferOptions, MentionSource, Model, ModelConfig, Variant};
use eae_core::numerics::Tensor;
use eae_core::probes::{cloze_eval, qa_eval, topk_sweep, EvalReport, QaReport, SweepTable};
use eae_core::training::{train, Objective, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Desk-scale experiment shared by the ordering, top-K, access and QA criteria.
const N_ENTITIES: usize = 1000;
const N_RELATIONS: usize = 4;
const N_CONTEXTS: usize = 50_000;
const TEST_FRACTION: f64 = 0.02;
const WORLD_SEED: u64 = 7;
const CORPUS_SEED: u64 = 8;
const SEEDS: [u64; 3] = [0, 1, 2];
const MAX_RUN: Duration = Duration::from_secs(30 * 60);
// Question answering needs facts the model has memorized, which the
// 1000-entity world does not reach at desk scale. A smaller world does.
const QA_ENTITIES: usize = 200;
const QA_WORLD_SEED: u64 = 17;
const QA_CORPUS_SEED: u64 = 18;
const QA_TRAIN: usize = 300;
const QA_EVAL: usize = 500;
const QA_SEED: u64 = 19;

struct Line {
    id: usize,
    pass: bool,
    detail: String,
}

struct Data {
    world: SyntheticWorld,
    train: Vec<Context>,
    test: Vec<Context>,
}

struct Trained {
    model: Model,
    report: EvalReport,
    elapsed: Duration,
}

fn model_config(world: &SyntheticWorld, variant: Variant, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig {
        vocab_size: world.vocab_size(),
        n_entities: world.n_entities(),
        seed,
        ..ModelConfig::default()
    };
    cfg.k_train = cfg.n_entities;
    cfg.with_variant(variant)
}

fn pretrain(data: &Data, cfg: &ModelConfig, seed: u64) -> Trained {
    let start = Instant::now();
    let mut model = build(cfg).expect("valid config");
    let tc = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let run = train(&mut model, Objective::Pretrain(&data.train), &tc).expect("training runs");
    let elapsed = start.elapsed();
    let report = cloze_eval(&model, &data.test, Retrieval::TopK(cfg.k_infer)).expect("eval runs");
    eprintln!(
        "  {} seed {seed}: {:.0}s, final loss {:.3}, entity {} token {:.1} ppl {:.2}",
        cfg.variant,
        elapsed.as_secs_f64(),
        run.records.last().map_or(f64::NAN, |r| r.window_total),
        report.entity_acc.map_or("-".into(), |e| format!("{:.1}", 100.0 * e)),
        100.0 * report.token_acc,
        report.ppl
    );
    Trained { model, report, elapsed }
}

fn main() {
    // Ignore libtest flags that `cargo test` forwards; only honour --list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|s| s.contains(&id));

    let mut lines = Vec::new();
    if wanted(1) {
        lines.push(gradient_suite());
    }
    if wanted(2) {
        lines.push(topk_equivalence());
    }
    if [3, 4, 5].iter().any(|&i| wanted(i)) {
        lines.extend(desk_experiment(&wanted));
    }
    if wanted(8) {
        lines.push(qa_finetune());
    }
    if wanted(6) {
        lines.push(bio_properties());
    }
    if wanted(7) {
        lines.push(masking_statistics());
    }
    if wanted(9) {
        lines.push(determinism());
    }
    lines.sort_by_key(|l| l.id);

    println!();
    for l in &lines {
        println!("criterion {} {} {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    }
    if lines.iter().any(|l| !l.pass) {
        std::process::exit(1);
    }
}

fn gradient_suite() -> Line {
    let start = Instant::now();
    let results = full_suite().expect("gradient suite runs");
    let elapsed = start.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("suite is non-empty");
    let failing: Vec<&str> = results.iter().filter(|r| !(r.max_rel_error < 1e-4)).map(|r| r.name.as_str()).collect();
    Line {
        id: 1,
        pass: failing.is_empty() && elapsed < Duration::from_secs(120),
        detail: format!(
            "gradient suite: {} checks, worst {:.2e} ({}), {:.1}s{}",
            results.len(),
            worst.max_rel_error,
            worst.name,
            elapsed.as_secs_f64(),
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(", ")) }
        ),
    }
}

/// Plain softmax attention over every row, computed without the library.
fn dense_readout(e: &Tensor, h: &[f64]) -> Vec<f64> {
    let scores: Vec<f64> = (0..e.rows()).map(|i| e.row(i).iter().zip(h).map(|(a, b)| a * b).sum()).collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; e.cols()];
    for (i, wi) in w.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(e.row(i)) {
            *o += wi / z * v;
        }
    }
    out
}

fn topk_equivalence() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_retrieve = 0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=16);
        let e = Tensor::randn(&[n, d], 1.0, &mut rng);
        let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = retrieve(&e, &h, n).expect("retrieve runs").readout;
        let want = dense_readout(&e, &h);
        for (a, b) in got.iter().zip(&want) {
            worst_retrieve = worst_retrieve.max((a - b).abs());
        }
    }

    let mut cfg = ModelConfig::toy(Variant::Eae);
    cfg.n_entities = 64;
    cfg.k_train = 64;
    cfg.k_infer = 64;
    let mut model = build(&cfg).expect("toy config");
    let ids: Vec<_> = model.params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let t = generic_point(model.params.get(id), 50 + i as u64);
        model.params.assign(id, t.into_data()).expect("same shape");
    }
    let mut worst_model = 0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let len = rng.random_range(3..=12);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(3..cfg.vocab_size)).collect();
        let mentions = vec![Mention::new(Some(1), 0, 1), Mention::new(None, len - 1, len - 1)];
        let ctx = Context::new(tokens, mentions).expect("valid mentions");
        let masked: Vec<usize> = (0..len).step_by(2).collect();
        let run = |r| {
            let opts = InferOptions {
                retrieval: Some(r),
                mention_source: MentionSource::Gold,
            };
            model.forward_infer(&ctx, &masked, opts).expect("inference runs")
        };
        let (top, dense) = (run(Retrieval::TopK(64)), run(Retrieval::Dense));
        assert_eq!(top.spans, dense.spans);
        for (a, b) in top.hidden.iter().zip(&dense.hidden) {
            worst_model = worst_model.max((a - b).abs());
        }
        for (ra, rb) in top.token_logits.iter().zip(&dense.token_logits) {
            for (a, b) in ra.iter().zip(rb) {
                worst_model = worst_model.max((a - b).abs());
            }
        }
    }
    Line {
        id: 2,
        pass: worst_retrieve <= 1e-12 && worst_model <= 1e-10,
        detail: format!("top-k equivalence: retrieve(k=N) vs dense max |diff| {worst_retrieve:.1e} (100 draws), model k_infer=N vs dense {worst_model:.1e}"),
    }
}

fn data(n_entities: usize, world_seed: u64, corpus_seed: u64) -> Data {
    let world = generate_world(n_entities, N_RELATIONS, world_seed).expect("world");
    let corpus = generate_corpus(&world, N_CONTEXTS, corpus_seed).expect("corpus");
    let (train, test) = split_contexts(&corpus, TEST_FRACTION, corpus_seed);
    Data { world, train, test }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_experiment(wanted: &dyn Fn(usize) -> bool) -> Vec<Line> {
    let data = data(N_ENTITIES, WORLD_SEED, CORPUS_SEED);
    eprintln!(
        "desk experiment: {} entities, {} relations, {} train / {} test contexts",
        data.world.n_entities(),
        data.world.n_relations(),
        data.train.len(),
        data.test.len()
    );
    let mut lines = Vec::new();
    let seeds: &[u64] = if wanted(3) { &SEEDS } else { &SEEDS[..1] };
    let variants: &[Variant] = if wanted(3) { &[Variant::Eae, Variant::NoEae, Variant::EaeUnsup] } else { &[Variant::Eae] };

    let mut eae_seed0 = None;
    let mut reports: Vec<(Variant, Vec<EvalReport>)> = Vec::new();
    let mut slowest = Duration::ZERO;
    for &v in variants {
        let mut rs = Vec::new();
        for &seed in seeds {
            let t = pretrain(&data, &model_config(&data.world, v, seed), seed);
            slowest = slowest.max(t.elapsed);
            rs.push(t.report.clone());
            if v == Variant::Eae && seed == SEEDS[0] {
                eae_seed0 = Some(t.model);
            }
        }
        reports.push((v, rs));
    }
    let eae = eae_seed0.expect("eae trained");

    if wanted(3) {
        let avg = |v: Variant, f: &dyn Fn(&EvalReport) -> f64| {
            let rs = &reports.iter().find(|(x, _)| *x == v).expect("variant trained").1;
            100.0 * mean(&rs.iter().map(f).collect::<Vec<_>>())
        };
        let ent = |r: &EvalReport| r.entity_acc.unwrap_or(0.0);
        let tok = |r: &EvalReport| r.token_acc;
        let (e_ent, e_tok) = (avg(Variant::Eae, &ent), avg(Variant::Eae, &tok));
        let (n_ent, n_tok) = (avg(Variant::NoEae, &ent), avg(Variant::NoEae, &tok));
        let u_tok = avg(Variant::EaeUnsup, &tok);
        let pass = e_ent - n_ent >= 5.0 && e_tok - n_tok >= 5.0 && e_tok - u_tok >= 5.0 && slowest <= MAX_RUN;
        lines.push(Line {
            id: 3,
            pass,
            detail: format!(
                "ablation ordering (mean of {} seeds): eae {e_ent:.1}/{e_tok:.1}, no_eae {n_ent:.1}/{n_tok:.1}, eae_unsup token {u_tok:.1}; \
                 margins entity {:+.1} token {:+.1} vs no_eae, token {:+.1} vs eae_unsup; slowest run {:.1} min",
                seeds.len(),
                e_ent - n_ent,
                e_tok - n_tok,
                e_tok - u_tok,
                slowest.as_secs_f64() / 60.0
            ),
        });
    }

    if wanted(4) {
        let rows = topk_sweep(&eae, &data.test, &[Some(1), Some(10), Some(100), None]).expect("sweep runs");
        eprint!("{}", SweepTable(&rows));
        let (k1, k10, full) = (&rows[0], &rows[1], &rows[3]);
        let gap = 100.0 * (full.entity_acc.unwrap_or(0.0) - k10.entity_acc.unwrap_or(0.0));
        lines.push(Line {
            id: 4,
            pass: gap.abs() <= 2.0 && k1.ppl >= full.ppl,
            detail: format!(
                "top-K robustness: entity acc K=10 {:.1} vs full {:.1} (gap {gap:+.1}); ppl K=1 {:.2} vs full {:.2}",
                100.0 * k10.entity_acc.unwrap_or(0.0),
                100.0 * full.entity_acc.unwrap_or(0.0),
                k1.ppl,
                full.ppl
            ),
        });
    }

    if wanted(5) {
        lines.push(sparse_access(&eae, &data.test));
    }
    lines
}

fn sparse_access(model: &Model, test: &[Context]) -> Line {
    let opts = InferOptions {
        retrieval: Some(Retrieval::TopK(10)),
        ..Default::default()
    };
    let mut violations = 0;
    let mut two_mention = Vec::new();
    for ctx in test {
        let out = model.forward_infer(ctx, &[], opts).expect("inference runs");
        if out.access.distinct_rows > out.spans.len() * 10 || out.access.rows_touched != out.spans.len() * 10 {
            violations += 1;
        }
        if out.spans.len() == 2 {
            two_mention.push(out.access.fraction_touched());
        }
    }
    let worst = two_mention.iter().cloned().fold(0.0, f64::max);
    Line {
        id: 5,
        pass: violations == 0 && !two_mention.is_empty() && worst <= 0.05,
        detail: format!(
            "sparse access at K=10: {violations} of {} contexts exceed mentions x 10 rows; {} two-mention contexts touch at most {:.2}% of E",
            test.len(),
            two_mention.len(),
            100.0 * worst
        ),
    }
}

fn questions(world: &SyntheticWorld) -> (Vec<Question>, Vec<Question>) {
    let mut all = generate_questions(world, QA_TRAIN + QA_EVAL, QA_SEED).expect("questions");
    let eval = all.split_off(QA_TRAIN);
    (all, eval)
}

fn pretrain_and_finetune(data: &Data, frozen: bool, train_q: &[Question], eval_q: &[Question]) -> QaReport {
    let mut cfg = model_config(&data.world, Variant::Eae, SEEDS[0]);
    cfg.frozen_embeddings = frozen;
    let mut model = pretrain(data, &cfg, SEEDS[0]).model;
    train(&mut model, Objective::Qa(train_q), &TrainConfig::qa()).expect("fine-tuning runs");
    qa_eval(&model, eval_q).expect("qa eval runs")
}

fn qa_finetune() -> Line {
    let data = data(QA_ENTITIES, QA_WORLD_SEED, QA_CORPUS_SEED);
    eprintln!("qa experiment: {} entities, {} relations", data.world.n_entities(), data.world.n_relations());
    let (train_q, eval_q) = questions(&data.world);
    let learned = pretrain_and_finetune(&data, false, &train_q, &eval_q);
    let frozen = pretrain_and_finetune(&data, true, &train_q, &eval_q);
    let margin = learned.accuracy - learned.chance.max(learned.majority_baseline);
    Line {
        id: 8,
        pass: margin >= 10.0 * learned.chance && frozen.accuracy < learned.accuracy,
        detail: format!(
            "qa fine-tune on {} held-out questions (N={QA_ENTITIES}): learned {:.1}%, frozen {:.1}%, majority {:.1}%, chance {:.2}% (margin {:.1} x chance)",
            eval_q.len(),
            100.0 * learned.accuracy,
            100.0 * frozen.accuracy,
            100.0 * learned.majority_baseline,
            100.0 * learned.chance,
            margin / learned.chance
        ),
    }
}

fn bio_properties() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut illegal = 0;
    for _ in 0..10_000 {
        let len = rng.random_range(1..=40);
        let logits: Vec<f64> = (0..3 * len).map(|_| rng.random_range(-5.0..5.0)).collect();
        if !is_legal_bio(&decode_labels(&logits)) {
            illegal += 1;
        }
    }
    let mut mismatched = 0;
    for _ in 0..10_000 {
        let len = rng.random_range(1..=40);
        let mut spans = Vec::new();
        let mut pos = 0;
        while pos < len {
            pos += rng.random_range(0..4);
            if pos >= len {
                break;
            }
            let end = (pos + rng.random_range(0..4)).min(len - 1);
            spans.push((pos, end));
            pos = end + 1;
        }
        let labels = spans_to_bio(&spans, len).expect("valid spans");
        let logits: Vec<f64> = labels
            .iter()
            .flat_map(|l| {
                let mut row = [0.0; 3];
                row[l.index()] = 1.0;
                row
            })
            .collect();
        if decode(&logits) != spans {
            mismatched += 1;
        }
    }
    Line {
        id: 6,
        pass: illegal == 0 && mismatched == 0,
        detail: format!("bio: {illegal} illegal decodes of 10000 fuzzed logits, {mismatched} round-trip mismatches of 10000 span sets"),
    }
}

fn masking_statistics() -> Line {
    let world = generate_world(200, 4, 10).expect("world");
    let corpus = generate_corpus(&world, 5000, 11).expect("corpus");
    let (mut mentions, mut masked, mut broken) = (0usize, 0usize, 0usize);
    for (i, ctx) in corpus.iter().enumerate() {
        if mentions >= 10_000 {
            break;
        }
        let (m, targets) = mask_mentions(ctx, 0.2, 1000 + i as u64).expect("rate in range");
        if m.mentions != ctx.mentions {
            broken += 1;
        }
        let positions: BTreeSet<usize> = targets.iter().map(|t| t.0).collect();
        for mention in &ctx.mentions {
            mentions += 1;
            let span: Vec<usize> = (mention.start..=mention.end).collect();
            let all = span.iter().all(|p| m.tokens[*p] == MASK);
            let none = span.iter().all(|p| !positions.contains(p));
            if all && span.iter().all(|p| positions.contains(p)) {
                masked += 1;
            } else if !none {
                broken += 1;
            }
        }
        for (p, tok) in &targets {
            if ctx.tokens[*p] != *tok {
                broken += 1;
            }
        }
        for (p, tok) in m.tokens.iter().enumerate() {
            if !positions.contains(&p) && *tok != ctx.tokens[p] {
                broken += 1;
            }
        }
    }
    let frac = masked as f64 / mentions as f64;
    Line {
        id: 7,
        pass: mentions >= 10_000 && (0.18..=0.22).contains(&frac) && broken == 0,
        detail: format!("masking: {masked} of {mentions} mentions masked ({:.2}%), {broken} partial spans or altered annotations", 100.0 * frac),
    }
}

fn run_cli(args: &[&str]) {
    let o = Command::new(env!("CARGO_BIN_EXE_eae")).args(args).output().expect("binary runs");
    assert!(o.status.success(), "eae {args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn determinism() -> Line {
    let dir = tempfile::tempdir().expect("temp dir");
    let p = |sub: &str| dir.path().join(sub).to_string_lossy().into_owned();
    let small = [
        "--set", "world.n_entities=200", "--set", "corpus.n_contexts=2000", "--set", "model.d_emb=32", "--set", "model.d_ent=32",
        "--set", "model.ffn_dim=64", "--set", "model.k_train=200", "--set", "model.k_infer=10", "--set", "train.total_steps=100",
        "--set", "train.batch_size=16", "--set", "train.eval_every=10",
    ];
    let with = |head: &[&str], out: &str| {
        let mut v: Vec<String> = head.iter().map(|s| s.to_string()).collect();
        v.extend(small.iter().map(|s| s.to_string()));
        v.extend(["--out".to_string(), out.to_string()]);
        v
    };
    let call = |v: Vec<String>| run_cli(&v.iter().map(String::as_str).collect::<Vec<_>>());
    call(with(&["gen-world", "--seed", "3"], &p("data")));
    let world = format!("{}/world.json", p("data"));
    call(with(&["gen-corpus", "--world", &world], &p("data")));
    let corpus = format!("{}/train.jsonl", p("data"));
    for run in ["a", "b"] {
        call(with(&["train", "--seed", "5", "--world", &world, "--corpus", &corpus], &p(run)));
    }
    let files = ["metrics.jsonl", "checkpoint/manifest.json", "checkpoint/tensors.bin"];
    let differing: Vec<&str> = files
        .iter()
        .filter(|f| {
            let read = |run: &str| std::fs::read(Path::new(&p(run)).join(f)).unwrap_or_default();
            let (a, b) = (read("a"), read("b"));
            a.is_empty() || a != b
        })
        .copied()
        .collect();
    let log_lines = std::fs::read_to_string(Path::new(&p("a")).join("metrics.jsonl")).map_or(0, |s| s.lines().count());
    Line {
        id: 9,
        pass: differing.is_empty() && log_lines == 10,
        detail: format!(
            "determinism: two `eae train` runs, {log_lines} metrics lines, {}",
            if differing.is_empty() { "logs and checkpoints byte-identical".to_string() } else { format!("differing: {}", differing.join(", ")) }
        ),
    }
}
