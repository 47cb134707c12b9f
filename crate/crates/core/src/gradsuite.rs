//! Finite-difference checks for every differentiable op and the full
//! pre-training loss of a toy model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{mask_mentions, Context, Mention};
use crate::error::Result;
use crate::modelzoo::{build, Batch, ModelConfig, Variant};
use crate::nn::Bound;
use crate::numerics::{grad_check_with, GradCheckOptions, SeqLayout, Tape, Tensor, Var};
use crate::objectives::{pretrain_loss, qa_loss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    /// Input index and coordinate of the largest error.
    pub worst: Option<(usize, usize)>,
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reduces `y` to a scalar with fixed random weights, so every output
/// coordinate contributes a distinct gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = randn(tape.shape(y), seed);
    let wv = tape.leaf(&w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

fn check<F>(name: &str, inputs: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let r = grad_check_with(f, inputs, opts)?;
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: r.max_rel_error,
        coords: r.coords_checked,
        worst: r.worst,
    })
}

/// Step for whole-model checks, used with the five-point stencil.
pub const MODEL_STEP: f64 = 1e-3;

/// One entry per primitive op.
pub fn op_checks() -> Result<Vec<CheckResult>> {
    let o = GradCheckOptions::default();
    let a = randn(&[3, 4], 1);
    let b = randn(&[4, 2], 2);
    let c = randn(&[3, 4], 3);
    let row = randn(&[4], 4);
    let mut out = vec![
        check("matmul", &[a.clone(), b.clone()], &o, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 10)
        })?,
        check("matmul_bt", &[a.clone(), c.clone()], &o, |t, v| {
            let y = t.matmul_bt(v[0], v[1])?;
            project(t, y, 11)
        })?,
        check("transpose", &[a.clone()], &o, |t, v| {
            let y = t.transpose(v[0])?;
            project(t, y, 12)
        })?,
        check("add", &[a.clone(), c.clone()], &o, |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 13)
        })?,
        check("sub", &[a.clone(), c.clone()], &o, |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, 14)
        })?,
        check("mul", &[a.clone(), c.clone()], &o, |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 15)
        })?,
        check("add_row", &[a.clone(), row.clone()], &o, |t, v| {
            let y = t.add_row(v[0], v[1])?;
            project(t, y, 16)
        })?,
        check("scale", &[a.clone()], &o, |t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y, 17)
        })?,
        check("add_scalar", &[a.clone()], &o, |t, v| {
            let y = t.add_scalar(v[0], 0.3);
            project(t, y, 18)
        })?,
        check("gelu", &[a.clone()], &o, |t, v| {
            let y = t.gelu(v[0]);
            project(t, y, 19)
        })?,
        check(
            "dropout",
            &[a.clone()],
            &GradCheckOptions {
                training_seed: Some(5),
                ..o.clone()
            },
            |t, v| {
                let y = t.dropout(v[0], 0.3)?;
                project(t, y, 20)
            },
        )?,
        check("sum", &[a.clone()], &o, |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        })?,
        check("mean", &[a.clone()], &o, |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        })?,
        check("softmax", &[a.clone()], &o, |t, v| {
            let y = t.softmax(v[0], 1)?;
            project(t, y, 21)
        })?,
        check("softmax_axis0", &[a.clone()], &o, |t, v| {
            let y = t.softmax(v[0], 0)?;
            project(t, y, 22)
        })?,
        check("layer_norm", &[randn(&[2, 8], 6), randn(&[8], 7), randn(&[8], 8)], &o, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            project(t, y, 23)
        })?,
        check("cross_entropy", &[randn(&[4, 5], 9)], &o, |t, v| {
            t.cross_entropy(v[0], &[1, 4, 0, 2], &[true, true, false, true])
        })?,
        check("embedding_lookup", &[randn(&[6, 3], 24)], &o, |t, v| {
            let y = t.gather_rows(v[0], &[4, 1, 4, 0])?;
            project(t, y, 25)
        })?,
        check("scatter_rows", &[randn(&[2, 3], 26)], &o, |t, v| {
            let y = t.scatter_rows(v[0], &[3, 0], 5)?;
            project(t, y, 27)
        })?,
        check("concat", &[a.clone(), randn(&[3, 2], 28)], &o, |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            project(t, y, 29)
        })?,
        check("concat_axis0", &[a.clone(), c.clone()], &o, |t, v| {
            let y = t.concat(&[v[0], v[1]], 0)?;
            project(t, y, 30)
        })?,
    ];
    let layout = SeqLayout {
        batch: 2,
        seq: 3,
        pad: vec![false, false, false, false, false, true],
    };
    let qkv: Vec<Tensor> = (0..3).map(|i| randn(&[6, 4], 31 + i)).collect();
    out.push(check("attention", &qkv, &o, |t, v| {
        let y = t.attention(v[0], v[1], v[2], &layout, 2)?;
        project(t, y, 34)
    })?);
    for k in [1, 3, 7] {
        out.push(check(
            &format!("topk_readout_k{k}"),
            &[randn(&[2, 3], 35), randn(&[7, 3], 36)],
            &o,
            |t, v| {
                let y = t.topk_readout(v[0], v[1], k)?;
                project(t, y, 37)
            },
        )?);
    }
    Ok(out)
}

/// Adds noise so checks run away from the near-zero init, where analytic
/// gradients are smaller than finite-difference round-off. Matrices get
/// `N(0, 1/fan_in)` so no unit saturates; vectors get `N(0, 0.5²)`.
pub fn generic_point(t: &Tensor, seed: u64) -> Tensor {
    let std = match t.shape() {
        [_, cols] => 1.0 / (*cols as f64).sqrt(),
        _ => 0.5,
    };
    let noise = Tensor::randn(t.shape(), std, &mut ChaCha8Rng::seed_from_u64(seed));
    let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Two toy contexts (one padded) with linked, unlinked and masked mentions.
pub fn toy_batch(n_entities: usize, seed: u64) -> Result<Batch> {
    let a = Context::new(
        vec![5, 6, 7, 8, 9, 10, 11, 12],
        vec![
            Mention::new(Some(1 % n_entities), 0, 1),
            Mention::new(None, 3, 3),
            Mention::new(Some(0), 5, 6),
        ],
    )?;
    let b = Context::new(vec![13, 14, 15, 16, 17], vec![Mention::new(Some(n_entities - 1), 2, 2)])?;
    let (ma, ta) = mask_mentions(&a, 0.5, seed)?;
    let (mb, tb) = mask_mentions(&b, 1.0, seed)?;
    Batch::new(&[ma, mb], &[ta, tb])
}

/// Checks the total pre-training loss against every parameter of `cfg`'s model.
pub fn model_check(name: &str, cfg: &ModelConfig, max_coords: Option<usize>) -> Result<CheckResult> {
    model_check_step(name, cfg, max_coords, MODEL_STEP)
}

pub fn model_check_step(name: &str, cfg: &ModelConfig, max_coords: Option<usize>, step: f64) -> Result<CheckResult> {
    let model = build(cfg)?;
    let batch = toy_batch(cfg.n_entities, 1)?;
    let inputs: Vec<Tensor> = model
        .params
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| generic_point(t, 100 + i as u64))
        .collect();
    let opts = GradCheckOptions {
        max_coords,
        step,
        five_point: true,
        ..Default::default()
    };
    check(name, &inputs, &opts, |t, v| {
        let p = Bound::from_vars(v.to_vec());
        pretrain_loss(&model, t, &p, &batch).map(|(l, _)| l)
    })
}

/// Checks the question-answering loss of a toy model.
pub fn qa_check(cfg: &ModelConfig) -> Result<CheckResult> {
    use crate::corpus::{Question, ANS};
    let model = build(cfg)?;
    let qs = vec![
        Question {
            context: Context::new(vec![5, 6, 7, ANS], vec![Mention::new(Some(1), 1, 2)])?,
            answer: 3,
            subject: 1,
            relation: 0,
        },
        Question {
            context: Context::new(vec![8, 9, ANS], vec![Mention::new(Some(2), 0, 0)])?,
            answer: 0,
            subject: 2,
            relation: 1,
        },
    ];
    let inputs: Vec<Tensor> = model
        .params
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| generic_point(t, 300 + i as u64))
        .collect();
    check("qa_loss", &inputs, &GradCheckOptions::default(), |t, v| {
        let p = Bound::from_vars(v.to_vec());
        qa_loss(&model, t, &p, &qs).map(|(l, _)| l)
    })
}

/// Every op check plus whole-model checks of each variant on the toy config.
pub fn full_suite() -> Result<Vec<CheckResult>> {
    let mut out = op_checks()?;
    for v in Variant::ALL {
        let cfg = ModelConfig::toy(Variant::Eae).with_variant(v);
        out.push(model_check(&format!("pretrain_loss[{v}]"), &cfg, None)?);
    }
    let mut sparse = ModelConfig::toy(Variant::Eae);
    sparse.k_train = 3;
    out.push(model_check("pretrain_loss[eae,k=3]", &sparse, None)?);
    out.push(qa_check(&ModelConfig::toy(Variant::Eae))?);
    Ok(out)
}
