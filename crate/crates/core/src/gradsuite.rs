//! Finite-difference verification of every differentiable operation and of
//! the full training objective, in 64-bit precision.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, UnaryKind, Var};
use crate::config::{MaskMode, ModelConfig};
use crate::error::Result;
use crate::gradcheck::{random_tensor, GradCheck};
use crate::model::{Bound, CaptionModel};
use crate::multimodal::{attention_bias_on_tape, sparsity_loss_on_tape, AttentionLayout};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::text::{CaptionTokens, MlmSample, BOS, EOS, MASK, PAD};
use crate::training::loss_on_tape;
use crate::video::encode_on_tape;

pub const DEFAULT_SEEDS: [u64; 5] = [11, 23, 37, 41, 59];
pub const TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub coords: usize,
}

/// Contracts a non-scalar output with a fixed random weighting so every
/// output coordinate contributes to the checked scalar.
fn project(tape: &mut Tape<f64>, out: Var, rng: &mut Rng) -> Result<Var> {
    let w = random_tensor(rng, tape.shape(out), 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Values bounded away from zero so `abs` stays differentiable under the
/// finite-difference step.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = 0.2 + 1.3 * rng.uniform();
        if rng.below(2) == 0 {
            m
        } else {
            -m
        }
    })
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn op_checks(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let mut rng = Rng::derive(seed, &[0x6c]);
    let proj = seed ^ 0x5eed;
    let r = &mut rng;
    let mut v: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = Vec::new();
    let with_proj = move |f: fn(&mut Tape<f64>, &[Var]) -> Result<Var>| -> Build {
        Box::new(move |t: &mut Tape<f64>, x: &[Var]| {
            let out = f(t, x)?;
            project(t, out, &mut Rng::new(proj))
        })
    };

    v.push((
        "matmul",
        vec![
            random_tensor(r, &[3, 4], 1.0),
            random_tensor(r, &[4, 5], 1.0),
        ],
        with_proj(|t, x| t.matmul(x[0], x[1])),
    ));
    v.push((
        "add",
        vec![
            random_tensor(r, &[3, 4], 1.0),
            random_tensor(r, &[3, 4], 1.0),
        ],
        with_proj(|t, x| t.add(x[0], x[1])),
    ));
    v.push((
        "add_bias",
        vec![random_tensor(r, &[3, 4], 1.0), random_tensor(r, &[4], 1.0)],
        with_proj(|t, x| t.add_bias(x[0], x[1])),
    ));
    v.push((
        "mul",
        vec![
            random_tensor(r, &[3, 4], 1.0),
            random_tensor(r, &[3, 4], 1.0),
        ],
        with_proj(|t, x| t.mul(x[0], x[1])),
    ));
    v.push((
        "scale",
        vec![random_tensor(r, &[3, 4], 1.0)],
        with_proj(|t, x| t.scale(x[0], -1.7)),
    ));
    v.push((
        "sigmoid",
        vec![random_tensor(r, &[3, 4], 2.0)],
        with_proj(|t, x| t.sigmoid(x[0])),
    ));
    v.push((
        "gelu",
        vec![random_tensor(r, &[3, 4], 2.0)],
        with_proj(|t, x| t.gelu(x[0])),
    ));
    v.push((
        "abs",
        vec![away_from_zero(r, &[3, 4])],
        with_proj(|t, x| t.abs(x[0])),
    ));
    v.push((
        "log",
        vec![Tensor::from_fn(&[3, 4], |_| 0.05 + 0.95 * r.uniform())],
        with_proj(|t, x| t.unary(x[0], UnaryKind::Log { offset: 1e-8 })),
    ));
    v.push((
        "masked_softmax",
        vec![
            random_tensor(r, &[3, 5], 1.0),
            random_tensor(r, &[3, 5], 1.0),
        ],
        with_proj(|t, x| t.masked_softmax(x[0], x[1])),
    ));
    v.push((
        "masked_softmax_shared_bias",
        vec![random_tensor(r, &[3, 5], 1.0), random_tensor(r, &[5], 1.0)],
        with_proj(|t, x| t.masked_softmax(x[0], x[1])),
    ));
    v.push((
        "layer_norm",
        vec![
            random_tensor(r, &[3, 6], 1.0),
            random_tensor(r, &[6], 1.0),
            random_tensor(r, &[6], 1.0),
        ],
        with_proj(|t, x| t.layer_norm(x[0], x[1], x[2], 1e-5)),
    ));
    v.push((
        "gather",
        vec![random_tensor(r, &[5, 3], 1.0)],
        with_proj(|t, x| t.gather(x[0], &[4, 0, 4, 2])),
    ));
    v.push((
        "concat_rows",
        vec![
            random_tensor(r, &[2, 3], 1.0),
            random_tensor(r, &[3, 3], 1.0),
        ],
        with_proj(|t, x| t.concat_rows(&[x[0], x[1]])),
    ));
    v.push((
        "add_block",
        vec![
            random_tensor(r, &[4, 5], 1.0),
            random_tensor(r, &[2, 3], 1.0),
        ],
        with_proj(|t, x| t.add_block(x[0], x[1], 1, 2)),
    ));
    v.push((
        "attention",
        vec![
            random_tensor(r, &[8, 4], 1.0),
            random_tensor(r, &[8, 4], 1.0),
            random_tensor(r, &[8, 4], 1.0),
            random_tensor(r, &[4, 4], 1.0),
        ],
        with_proj(|t, x| t.attention(x[0], x[1], x[2], x[3], 2, 2)),
    ));
    v.push((
        "cross_entropy_mlm",
        vec![random_tensor(r, &[4, 6], 1.5)],
        Box::new(|t, x| t.cross_entropy_mlm(x[0], &[1, 5, 0, 3], &[true, false, true, true])),
    ));
    v.push((
        "mean",
        vec![random_tensor(r, &[3, 4], 1.0)],
        Box::new(|t, x| t.mean(x[0])),
    ));
    v.push((
        "sum",
        vec![random_tensor(r, &[3, 4], 1.0)],
        Box::new(|t, x| t.sum(x[0])),
    ));
    v.push((
        "linear",
        vec![
            random_tensor(r, &[3, 4], 1.0),
            random_tensor(r, &[4, 2], 1.0),
            random_tensor(r, &[2], 1.0),
        ],
        with_proj(|t, x| t.linear(x[0], x[1], x[2])),
    ));
    v
}

/// Small model whose every tensor is perturbed away from its initial value
/// so no coordinate sits at a trivial point.
pub fn check_model(seed: u64, mode: MaskMode) -> Result<CaptionModel<f64>> {
    let mut cfg = ModelConfig {
        frames: 4,
        height: 4,
        width: 4,
        ..ModelConfig::default()
    };
    cfg.patch.spatial = 2;
    cfg.patch.width = 4;
    cfg.patch.heads = 2;
    cfg.encoder.hidden = 4;
    cfg.encoder.heads = 2;
    cfg.encoder.layers = 1;
    cfg.encoder.mlp_ratio = 2;
    cfg.encoder.text_len = 5;
    cfg.encoder.vocab_size = 8;
    cfg.encoder.mask_mode = mode;
    cfg.encoder.mask_init = 0.0;
    let mut m = CaptionModel::<f32>::init(cfg, seed)?.cast::<f64>();
    let mut rng = Rng::derive(seed, &[0x9e]);
    for t in m.params.values_mut() {
        for x in t.data_mut() {
            *x += rng.normal(0.0, 0.3);
        }
    }
    Ok(m)
}

fn model_inputs(seed: u64, model: &CaptionModel<f64>) -> (Tensor<f64>, Vec<MlmSample>) {
    let cfg = &model.config;
    let mut rng = Rng::derive(seed, &[0xb1]);
    let rows = 2 * cfg.video_len();
    let blocks = Tensor::from_fn(&[rows, cfg.patch.block_len()], |_| rng.uniform());
    let samples = vec![
        MlmSample {
            corrupted: CaptionTokens {
                ids: vec![BOS, 5, MASK, MASK, PAD],
                length: 4,
            },
            targets: vec![BOS, 5, 6, EOS, PAD],
            supervised: vec![false, false, true, true, false],
        },
        MlmSample {
            corrupted: CaptionTokens {
                ids: vec![BOS, MASK, 7, 6, MASK],
                length: 5,
            },
            targets: vec![BOS, 7, 7, 6, EOS],
            supervised: vec![false, true, false, false, true],
        },
    ];
    (blocks, samples)
}

type ModelBuild = Box<dyn Fn(&mut Tape<f64>, &Bound) -> Result<Var>>;

fn model_checks(
    seed: u64,
) -> Result<
    Vec<(
        &'static str,
        &'static str,
        CaptionModel<f64>,
        Vec<String>,
        ModelBuild,
    )>,
> {
    let soft = check_model(seed, MaskMode::Soft)?;
    let (blocks, samples) = model_inputs(seed, &soft);
    let names = |m: &CaptionModel<f64>, pred: fn(&str) -> bool| -> Vec<String> {
        m.params.keys().filter(|n| pred(n)).cloned().collect()
    };
    let mut out: Vec<(
        &'static str,
        &'static str,
        CaptionModel<f64>,
        Vec<String>,
        ModelBuild,
    )> = Vec::new();

    let cfg = soft.config.clone();
    let vb = blocks.clone();
    out.push((
        "video-encoder",
        "encode_video",
        soft.clone(),
        names(&soft, |n| n.starts_with("video.")),
        Box::new(move |t, b| {
            let x = t.constant(vb.clone());
            let y = encode_on_tape(t, b, &cfg, x, 2)?;
            project(t, y, &mut Rng::new(seed))
        }),
    ));

    let layout = AttentionLayout::for_model(&soft.config);
    out.push((
        "multimodal-encoder",
        "soft_attention_bias",
        soft.clone(),
        names(&soft, |n| n == crate::model::MASK_PARAM),
        Box::new(move |t, b| {
            let bias = attention_bias_on_tape(
                t,
                &layout,
                b.get(crate::model::MASK_PARAM)?,
                MaskMode::Soft,
            )?;
            project(t, bias, &mut Rng::new(seed))
        }),
    ));
    out.push((
        "multimodal-encoder",
        "sparsity_loss",
        soft.clone(),
        names(&soft, |n| n == crate::model::MASK_PARAM),
        Box::new(|t, b| sparsity_loss_on_tape(t, b.get(crate::model::MASK_PARAM)?, 5.0)),
    ));

    for (name, mode) in [
        ("composite_loss_soft", MaskMode::Soft),
        ("composite_loss_full", MaskMode::Full),
    ] {
        let m = check_model(seed, mode)?;
        let cfg = m.config.clone();
        let (blocks, samples) = (blocks.clone(), samples.clone());
        let keep: fn(&str) -> bool = if mode == MaskMode::Soft {
            |_| true
        } else {
            |n| n != crate::model::MASK_PARAM
        };
        let trainable = names(&m, keep);
        out.push((
            "training",
            name,
            m,
            trainable,
            Box::new(
                move |t, b| Ok(loss_on_tape(t, b, &cfg, blocks.clone(), &samples, 5.0)?.total),
            ),
        ));
    }
    Ok(out)
}

/// Runs every check at every seed. `max_coords` bounds the coordinates
/// probed per tensor in the model-level checks.
pub fn run_suite(seeds: &[u64], max_coords: usize) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for &seed in seeds {
        for (name, params, build) in op_checks(seed) {
            let report = GradCheck {
                h: STEP,
                seed,
                ..GradCheck::default()
            }
            .run(&params, build)?;
            results.push(CheckResult {
                module: "tensor-autodiff",
                name,
                seed,
                max_rel_error: report.max_rel_error,
                coords: report.coords_checked,
            });
        }
        for (module, name, model, trainable, build) in model_checks(seed)? {
            let params: Vec<Tensor<f64>> =
                trainable.iter().map(|n| model.params[n].clone()).collect();
            let fixed = model.clone();
            let report = GradCheck {
                h: STEP,
                seed,
                max_coords: Some(max_coords),
                ..GradCheck::default()
            }
            .run(&params, |t, vars| {
                let mut b: Bound = fixed
                    .params
                    .iter()
                    .filter(|(n, _)| !trainable.contains(n))
                    .map(|(n, p)| (n.clone(), t.constant(p.clone())))
                    .collect();
                for (n, &v) in trainable.iter().zip(vars) {
                    b.insert(n, v);
                }
                build(t, &b)
            })?;
            results.push(CheckResult {
                module,
                name,
                seed,
                max_rel_error: report.max_rel_error,
                coords: report.coords_checked,
            });
        }
    }
    Ok(results)
}

/// Largest error per module, in module order.
pub fn max_by_module(results: &[CheckResult]) -> BTreeMap<&'static str, f64> {
    let mut out = BTreeMap::new();
    for r in results {
        let e = out.entry(r.module).or_insert(0.0f64);
        *e = e.max(r.max_rel_error);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_seed_passes() {
        let results = run_suite(&[5], 3).unwrap();
        assert!(results.len() > 20);
        for r in &results {
            assert!(r.max_rel_error <= TOLERANCE, "{r:?}");
            assert!(r.coords > 0);
        }
        let modules = max_by_module(&results);
        assert_eq!(modules.len(), 4);
    }
}
