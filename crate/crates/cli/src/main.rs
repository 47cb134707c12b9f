//! `eae`: generate synthetic worlds and corpora, train and probe the models.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use eae_core::corpus::{
    generate_corpus_with, generate_questions, generate_world_with, read_corpus, split_contexts, write_corpus,
    write_vocabulary, Question, SyntheticWorld,
};
use eae_core::entity_memory::Retrieval;
use eae_core::gradsuite::full_suite;
use eae_core::modelzoo::{build, Model};
use eae_core::probes::{ablation_compare, cloze_eval_with, qa_eval, topk_sweep_with, SweepTable};
use eae_core::training::{load_checkpoint, read_manifest, train_with_eval, Objective, TrainConfig};
use serde::Serialize;

use config::Experiment;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "eae", version = build_id(), about = "Entity-memory transformer experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for whatever the subcommand samples (world, corpus, init and batching, or questions).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment configuration (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set model.d_emb=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a synthetic world and write `world.json` and `vocab.json`.
    GenWorld,
    /// Verbalize a world into `train.jsonl` and `test.jsonl`.
    GenCorpus {
        #[arg(long)]
        world: PathBuf,
    },
    /// Pre-train a model; writes `metrics.jsonl` and `checkpoint/`.
    Train {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Cloze evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Retrieval width; defaults to the model's `k_infer`. `full` reads every row.
        #[arg(long)]
        k: Option<String>,
    },
    /// Cloze evaluation at each width in the config's `ks`.
    TopkSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Fine-tune a checkpoint on synthetic questions and report held-out accuracy.
    QaFinetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: PathBuf,
    },
    /// Held-out question accuracy of a checkpoint.
    QaEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: PathBuf,
    },
    /// Train each configured variant identically and compare them.
    Ablate {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Finite-difference check of every op and of each variant's loss.
    Gradcheck,
    /// Print a checkpoint's configs and tensor table.
    InspectCheckpoint { checkpoint: PathBuf },
}

fn build_id() -> &'static str {
    concat!(env!("CARGO_PKG_VERSION"), " (", env!("CARGO_PKG_NAME"), ")")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    if g.threads == 0 {
        bail!("--threads must be at least 1");
    }
    let mut exp = config::load(g.config.as_deref(), &g.overrides)?;
    fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))?;
    match &cli.command {
        Command::GenWorld => {
            if let Some(s) = g.seed {
                exp.world.seed = s;
            }
            let w = &exp.world;
            let world = generate_world_with(w.n_entities, w.n_relations, w.seed, &w.options())?;
            write_json(&g.out.join("world.json"), &world)?;
            write_vocabulary(g.out.join("vocab.json"), &world.vocab)?;
            println!(
                "world: {} entities, {} relations, {} tokens, alias collision rate {:.3}",
                world.n_entities(),
                world.n_relations(),
                world.vocab_size(),
                world.alias_collision_rate()
            );
        }
        Command::GenCorpus { world } => {
            if let Some(s) = g.seed {
                exp.corpus.seed = s;
            }
            let world = read_world(world)?;
            let c = &exp.corpus;
            let contexts = generate_corpus_with(&world, c.n_contexts, c.seed, &c.options())?;
            let (train, test) = split_contexts(&contexts, c.test_fraction, c.seed);
            write_corpus(g.out.join("train.jsonl"), &train)?;
            write_corpus(g.out.join("test.jsonl"), &test)?;
            println!("corpus: {} train, {} test contexts", train.len(), test.len());
        }
        Command::Train { world, corpus } => {
            if let Some(s) = g.seed {
                exp.model.seed = s;
                exp.train.seed = s;
            }
            let world = read_world(world)?;
            let contexts = read_corpus(corpus)?;
            let mut model = build(&fit_world(&exp, &world))?;
            let mut tc = exp.train.clone();
            tc.checkpoint_dir = Some(g.out.clone());
            write_json(&g.out.join("config.json"), &exp)?;
            let report = train_with_eval(&mut model, Objective::Pretrain(&contexts), &tc, &mut |_| Ok(Default::default()))?;
            if let Some(last) = report.records.last() {
                println!("trained {} steps, final window loss {:.4}", last.step, last.window_total);
            }
            println!("checkpoint: {}", g.out.join("checkpoint").display());
        }
        Command::Eval { checkpoint, corpus, k } => {
            let model = load_model(checkpoint)?;
            let contexts = read_corpus(corpus)?;
            let retrieval = match k.as_deref() {
                None => Retrieval::TopK(model.cfg.k_infer),
                Some("full") => Retrieval::Dense,
                Some(v) => Retrieval::TopK(v.parse().with_context(|| format!("--k expects a number or `full`, got `{v}`"))?),
            };
            let report = cloze_eval_with(&model, &contexts, retrieval, g.threads)?;
            write_json(&g.out.join("eval.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            print!("{}", SweepTable(std::slice::from_ref(&report)));
        }
        Command::TopkSweep { checkpoint, corpus } => {
            let model = load_model(checkpoint)?;
            let contexts = read_corpus(corpus)?;
            let ks: Vec<Option<usize>> = exp.ks.iter().map(|k| k.width()).collect();
            let rows = topk_sweep_with(&model, &contexts, &ks, g.threads)?;
            write_json(&g.out.join("topk_sweep.json"), &rows)?;
            print!("{}", SweepTable(&rows));
        }
        Command::QaFinetune { checkpoint, world } => {
            if let Some(s) = g.seed {
                exp.qa.seed = s;
                exp.qa.train.seed = s;
            }
            let mut model = load_model(checkpoint)?;
            let (train_q, eval_q) = questions(&exp, &read_world(world)?)?;
            let mut tc: TrainConfig = exp.qa.train.clone();
            tc.checkpoint_dir = Some(g.out.clone());
            train_with_eval(&mut model, Objective::Qa(&train_q), &tc, &mut |_| Ok(Default::default()))?;
            let report = qa_eval(&model, &eval_q)?;
            write_json(&g.out.join("qa_eval.json"), &report)?;
            println!("{report}");
        }
        Command::QaEval { checkpoint, world } => {
            if let Some(s) = g.seed {
                exp.qa.seed = s;
            }
            let model = load_model(checkpoint)?;
            let (_, eval_q) = questions(&exp, &read_world(world)?)?;
            let report = qa_eval(&model, &eval_q)?;
            write_json(&g.out.join("qa_eval.json"), &report)?;
            println!("{report}");
        }
        Command::Ablate { world, corpus, test } => {
            if let Some(s) = g.seed {
                exp.model.seed = s;
                exp.train.seed = s;
            }
            let world = read_world(world)?;
            let train = read_corpus(corpus)?;
            let test = read_corpus(test)?;
            let base = fit_world(&exp, &world);
            let configs: Vec<_> = exp.variants.iter().map(|&v| base.with_variant(v)).collect();
            let mut tc = exp.train.clone();
            tc.checkpoint_dir = Some(g.out.clone());
            let table = ablation_compare(&configs, &train, &test, &tc)?;
            write_json(&g.out.join("ablation.json"), &table)?;
            print!("{table}");
        }
        Command::Gradcheck => {
            let results = full_suite()?;
            let mut ok = true;
            for r in &results {
                let pass = r.max_rel_error < GRADCHECK_TOLERANCE;
                ok &= pass;
                println!(
                    "{:<32} {:>10.3e} {:>6} coords  {}",
                    r.name,
                    r.max_rel_error,
                    r.coords,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            if !ok {
                eprintln!("gradient check failed (tolerance {GRADCHECK_TOLERANCE:e})");
                return Ok(ExitCode::from(1));
            }
        }
        Command::InspectCheckpoint { checkpoint } => {
            let m = read_manifest(checkpoint)?;
            println!("model: {}", serde_json::to_string(&m.model)?);
            if let Some(t) = &m.train {
                println!("train: {}", serde_json::to_string(t)?);
            }
            let mut total = 0;
            for t in &m.tensors {
                let n: usize = t.shape.iter().product();
                total += n;
                println!(
                    "{:<40} {:<14} {:>9} @ {:>10}{}",
                    t.name,
                    format!("{:?}", t.shape),
                    n,
                    t.offset,
                    if t.frozen { " frozen" } else { "" }
                );
            }
            println!("{} tensors, {} parameters", m.tensors.len(), total);
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// The configured model with vocabulary and entity count taken from `world`.
fn fit_world(exp: &Experiment, world: &SyntheticWorld) -> eae_core::modelzoo::ModelConfig {
    let mut cfg = exp.model.clone();
    cfg.vocab_size = world.vocab_size();
    cfg.n_entities = world.n_entities();
    cfg.with_variant(cfg.variant)
}

/// Disjoint fine-tuning and held-out question sets.
fn questions(exp: &Experiment, world: &SyntheticWorld) -> Result<(Vec<Question>, Vec<Question>)> {
    let q = &exp.qa;
    let mut all = generate_questions(world, q.train_questions + q.eval_questions, q.seed)?;
    let eval = all.split_off(q.train_questions);
    Ok((all, eval))
}

fn load_model(dir: &Path) -> Result<Model> {
    Ok(load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?.0)
}

fn read_world(path: &Path) -> Result<SyntheticWorld> {
    let text = fs::read_to_string(path).with_context(|| format!("reading world {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing world {}", path.display()))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}
