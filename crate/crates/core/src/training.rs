//! Adam with warmup and linear decay, gradient clipping, deterministic
//! batching, metrics logging and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{mask_mentions, Context, Question};
use crate::error::{Error, Result};
use crate::modelzoo::{build, Batch, Model, ModelConfig};
use crate::nn::ParamStore;
use crate::numerics::Tape;
use crate::objectives::{pretrain_loss, qa_loss, LossBreakdown};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Steps between metrics records. The final step is always recorded.
    pub eval_every: usize,
    /// Where the metrics log and final checkpoint go; `None` keeps both in memory.
    pub checkpoint_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale pre-training settings.
    fn default() -> Self {
        Self {
            lr: 2e-3,
            warmup_fraction: 0.05,
            total_steps: 5000,
            batch_size: 32,
            clip_norm: 1.0,
            eval_every: 500,
            checkpoint_dir: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The published large-scale optimiser settings (step count scaled down).
    pub fn paper() -> Self {
        Self {
            lr: 1e-4,
            ..Self::default()
        }
    }

    /// Question-answering fine-tuning defaults.
    pub fn qa() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            total_steps: 500,
            eval_every: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            v.push(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if !(self.clip_norm > 0.0) {
            v.push(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            v.push(format!("lr {} must be finite and non-negative", self.lr));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be positive".into());
        }
        if self.eval_every == 0 {
            v.push("eval_every must be positive".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).floor() as usize
    }
}

/// Linear ramp from 0 to `lr` over the warmup, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_steps();
    let total = cfg.total_steps;
    if step >= total {
        return 0.0;
    }
    if step < warm {
        return cfg.lr * step as f64 / warm as f64;
    }
    cfg.lr * (total - step) as f64 / (total - warm) as f64
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Frozen parameters are left untouched.
pub fn adam_step(params: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for (&id, g) in ids.iter().zip(grads) {
        if g.len() != params.get(id).numel() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: params.get(id).shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(params.name(id).to_string()));
        }
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (&id, g) in ids.iter().zip(grads) {
        if params.is_frozen(id) {
            continue;
        }
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        let w = params.get_mut(id).data_mut();
        for j in 0..g.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            w[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// What a training run optimises.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Masked-mention pre-training; masks are redrawn every step.
    Pretrain(&'a [Context]),
    /// Answer-slot entity prediction.
    Qa(&'a [Question]),
}

impl Objective<'_> {
    fn len(&self) -> usize {
        match self {
            Objective::Pretrain(c) => c.len(),
            Objective::Qa(q) => q.len(),
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
    /// Mean total loss since the previous record.
    pub window_total: f64,
    #[serde(flatten)]
    pub eval: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    /// Per-step breakdowns, in order.
    pub losses: Vec<LossBreakdown>,
    pub checkpoint: Option<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_SUBDIR: &str = "checkpoint";

/// Evaluation callback run at every metrics record.
pub type EvalHook<'a> = dyn FnMut(&Model) -> Result<BTreeMap<String, f64>> + 'a;

pub fn train(model: &mut Model, objective: Objective<'_>, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_eval(model, objective, cfg, &mut |_| Ok(BTreeMap::new()))
}

/// Runs `cfg.total_steps` optimiser steps. Batches walk a fresh seeded
/// permutation each epoch and every step draws its own masking seed, so the
/// run is a function of (model, data, cfg) alone.
pub fn train_with_eval(
    model: &mut Model,
    objective: Objective<'_>,
    cfg: &TrainConfig,
    eval: &mut EvalHook<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if objective.len() == 0 && cfg.total_steps > 0 {
        return Err(Error::contract("training data is empty"));
    }
    let mut log = match &cfg.checkpoint_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let mut state = AdamState::new(&model.params);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut records = Vec::new();
    let mut losses = Vec::with_capacity(cfg.total_steps);
    let mut window = (0.0, 0usize);

    for step in 1..=cfg.total_steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(objective.len()) {
            if cursor == order.len() {
                order = (0..objective.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch)));
                epoch += 1;
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }

        let mut tape = if model.cfg.dropout > 0.0 {
            Tape::training(mix(cfg.seed ^ 0x5eed, step as u64))
        } else {
            Tape::new()
        };
        let p = model.params.bind(&mut tape, true);
        let (loss, breakdown) = match objective {
            Objective::Pretrain(contexts) => {
                let mut masked = Vec::with_capacity(picked.len());
                let mut targets = Vec::with_capacity(picked.len());
                for (j, &i) in picked.iter().enumerate() {
                    let (c, t) = mask_mentions(&contexts[i], model.cfg.mask_rate, mix(mix(cfg.seed, step as u64), j as u64))?;
                    masked.push(c);
                    targets.push(t);
                }
                let batch = Batch::new(&masked, &targets)?;
                pretrain_loss(model, &mut tape, &p, &batch)?
            }
            Objective::Qa(questions) => {
                let qs: Vec<Question> = picked.iter().map(|&i| questions[i].clone()).collect();
                qa_loss(model, &mut tape, &p, &qs)?
            }
        };
        let mut g = tape.backward(loss)?;
        let mut grads: Vec<Vec<f64>> = model
            .params
            .ids()
            .map(|id| g.take(p[id]).unwrap_or_else(|| vec![0.0; model.params.get(id).numel()]))
            .collect();
        for (id, gr) in model.params.ids().zip(&grads) {
            if gr.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(model.params.name(id).to_string()));
            }
        }
        let grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
        let lr = lr_schedule(step - 1, cfg);
        adam_step(&mut model.params, &grads, &mut state, lr)?;

        losses.push(breakdown);
        window.0 += breakdown.total;
        window.1 += 1;
        if step % cfg.eval_every == 0 || step == cfg.total_steps {
            let rec = MetricsRecord {
                step,
                loss: breakdown,
                lr,
                grad_norm,
                window_total: window.0 / window.1 as f64,
                eval: eval(model)?,
            };
            window = (0.0, 0);
            log::info!("step {step}: total {:.4} (window {:.4})", rec.loss.total, rec.window_total);
            if let Some((file, path)) = log.as_mut() {
                let line = serde_json::to_string(&rec).map_err(|e| Error::json(path.clone(), e))?;
                writeln!(file, "{line}").map_err(|e| Error::io(path.clone(), e))?;
            }
            records.push(rec);
        }
    }

    let checkpoint = match &cfg.checkpoint_dir {
        Some(dir) => {
            let path = dir.join(CHECKPOINT_SUBDIR);
            save_checkpoint(&path, model, Some(cfg))?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainReport {
        records,
        losses,
        checkpoint,
    })
}

/// SplitMix-style combination of two seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(b.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ----------------------------------------------------------------------
// Checkpoints

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
const FORMAT: &str = "eae-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `manifest.json` and `tensors.bin` (little-endian f64) under `dir`.
pub fn save_checkpoint(dir: impl AsRef<Path>, model: &Model, train: Option<&TrainConfig>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.params.numel() * 8);
    let mut tensors = Vec::with_capacity(model.params.len());
    for (id, name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64le".into(),
            offset: blob.len(),
            frozen: model.params.is_frozen(id),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        model: model.cfg.clone(),
        // Where the run was written is not part of its configuration.
        train: train.map(|t| TrainConfig {
            checkpoint_dir: None,
            ..t.clone()
        }),
        tensors,
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&mpath, e))?;
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if m.format != FORMAT {
        return Err(Error::Validation(vec![format!(
            "{}: unknown format `{}` (expected `{FORMAT}`)",
            path.display(),
            m.format
        )]));
    }
    Ok(m)
}

/// Rebuilds the model from the stored config and overwrites every tensor.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, Option<TrainConfig>)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut model = build(&manifest.model)?;
    let mut problems = Vec::new();
    let mut seen = vec![false; model.params.len()];
    for entry in &manifest.tensors {
        let Some(id) = model.params.find(&entry.name) else {
            problems.push(format!("unexpected tensor `{}`", entry.name));
            continue;
        };
        seen[id.index()] = true;
        let want = model.params.get(id).shape().to_vec();
        if entry.shape != want || entry.dtype != "f64le" {
            problems.push(format!(
                "`{}`: expected f64le {:?}, found {} {:?}",
                entry.name, want, entry.dtype, entry.shape
            ));
            continue;
        }
        let n: usize = want.iter().product();
        let Some(bytes) = blob.get(entry.offset..entry.offset + 8 * n) else {
            problems.push(format!("`{}`: blob too short for offset {}", entry.name, entry.offset));
            continue;
        };
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        model.params.assign(id, data)?;
        model.params.set_frozen(id, entry.frozen);
    }
    for (id, name, _) in model.params.iter() {
        if !seen[id.index()] {
            problems.push(format!("missing tensor `{name}`"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok((model, manifest.train))
}
