//! Joint optimization of the encoders and the attention mask.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::config::{MaskMode, ModelConfig, RunConfig, TrainConfig, TrainMode};
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::masktools::MaskGrid;
use crate::metrics::cider_against;
use crate::model::{is_decayed, Bound, CaptionModel, ParamStore, MASK_PARAM};
use crate::multimodal::{
    attention_bias_on_tape, forward_mlm_on_tape, sparsity_loss_on_tape, AttentionLayout,
};
use crate::rng::Rng;
use crate::scene::{Split, VideoClip};
use crate::tensor::{Real, Tensor};
use crate::text::{apply_mlm_mask, encode_caption, CaptionTokens, MlmSample, Vocabulary, MASK};
use crate::video::{batch_blocks, encode_on_tape};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Activation below which a mask entry counts as closed in the logs.
pub const ZERO_THRESHOLD: f64 = 0.01;

const BATCH_STREAM: u64 = 0xba7c;
const MLM_STREAM: u64 = 0x313;

pub const LOG_HEADER: &str =
    "step,lr,l_mlm,l_sparse,mask_mean_activation,frac_below_0.01,val_cider";

/// Warmup from 0 to the base rate over the first `warmup` fraction of
/// steps, then linear decay to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.steps {
        return Err(Error::Config(format!(
            "step {step} beyond {} total steps",
            cfg.steps
        )));
    }
    let (s, total) = (step as f64, cfg.steps as f64);
    let warm = cfg.warmup * total;
    Ok(if s <= warm {
        cfg.lr * s / warm
    } else {
        cfg.lr * (total - s) / (total - warm)
    })
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
    pub step: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update. `lr_for` gives each tensor's learning rate and
    /// `decay_for` its weight-decay coefficient.
    pub fn update(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &BTreeMap<String, Vec<f32>>,
        lr_for: impl Fn(&str) -> f64,
        decay_for: impl Fn(&str) -> f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let lr = lr_for(name);
            let wd = decay_for(name);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = (BETA1 * *mi as f64 + (1.0 - BETA1) * gi as f64) as f32;
                *vi = (BETA2 * *vi as f64 + (1.0 - BETA2) * (gi as f64) * (gi as f64)) as f32;
                let mhat = *mi as f64 / c1;
                let vhat = *vi as f64 / c2;
                let x = *pi as f64;
                *pi = (x - lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * x)) as f32;
            }
        }
    }
}

/// Clips and captions of one split with the vocabulary they are encoded in.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub clips: Vec<VideoClip>,
    pub captions: Vec<String>,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let (split, vocab) = Split::read(dir)?;
        Ok(Self::from_split(split, vocab))
    }

    pub fn from_split(split: Split, vocab: Vocabulary) -> Self {
        Self {
            clips: split.clips,
            captions: split.captions,
            vocab,
        }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// One MLM training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[G·M, raw]` patch rows.
    pub blocks: Tensor<f32>,
    pub samples: Vec<MlmSample>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_mlm: f64,
    pub l_sparse: f64,
    /// `l_mlm + l_sparse` as computed on the tape.
    pub total: f64,
}

/// Whether `name` receives gradients under `mode`.
pub fn is_trainable(name: &str, mode: MaskMode) -> bool {
    name != MASK_PARAM || mode == MaskMode::Soft
}

/// Loss nodes of one batch on a tape.
pub struct LossVars {
    pub l_mlm: Var,
    pub l_sparse: Option<Var>,
    pub total: Var,
}

/// Builds the training objective: masked-token cross-entropy, plus the
/// mask sparsity penalty in soft mode.
pub fn loss_on_tape<F: Real>(
    tape: &mut Tape<F>,
    b: &Bound,
    cfg: &ModelConfig,
    blocks: Tensor<F>,
    samples: &[MlmSample],
    lambda: f64,
) -> Result<LossVars> {
    let mode = cfg.encoder.mask_mode;
    let blocks = tape.constant(blocks);
    let video = encode_on_tape(tape, b, cfg, blocks, samples.len())?;
    let mask = b.get(MASK_PARAM)?;
    let bias = attention_bias_on_tape(tape, &AttentionLayout::for_model(cfg), mask, mode)?;
    let captions: Vec<&[usize]> = samples.iter().map(|s| s.corrupted.ids.as_slice()).collect();
    let out = forward_mlm_on_tape(tape, b, cfg, &captions, video, bias)?;
    let targets: Vec<usize> = samples
        .iter()
        .flat_map(|s| s.targets.iter().copied())
        .collect();
    let supervised: Vec<bool> = samples
        .iter()
        .flat_map(|s| s.supervised.iter().copied())
        .collect();
    let l_mlm = tape.cross_entropy_mlm(out.logits, &targets, &supervised)?;
    if mode == MaskMode::Soft {
        let l_sparse = sparsity_loss_on_tape(tape, mask, lambda)?;
        let total = tape.add(l_mlm, l_sparse)?;
        Ok(LossVars {
            l_mlm,
            l_sparse: Some(l_sparse),
            total,
        })
    } else {
        Ok(LossVars {
            l_mlm,
            l_sparse: None,
            total: l_mlm,
        })
    }
}

/// Loss components and per-tensor gradients of one batch.
pub fn compute_gradients(
    model: &CaptionModel<f32>,
    batch: &Batch,
    lambda: f64,
) -> Result<(StepLosses, BTreeMap<String, Vec<f32>>)> {
    let mode = model.config.encoder.mask_mode;
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, |name| is_trainable(name, mode));
    let loss = loss_on_tape(
        &mut tape,
        &b,
        &model.config,
        batch.blocks.clone(),
        &batch.samples,
        lambda,
    )?;
    let grads = tape.backward(loss.total)?;
    let losses = StepLosses {
        l_mlm: tape.value(loss.l_mlm).item() as f64,
        l_sparse: loss.l_sparse.map_or(0.0, |v| tape.value(v).item() as f64),
        total: tape.value(loss.total).item() as f64,
    };
    let mut out = BTreeMap::new();
    for (name, var) in b.iter() {
        if let Some(gv) = grads.get(var) {
            out.insert(name.to_string(), gv.to_vec());
        }
    }
    Ok((losses, out))
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Owns the model and optimizer state of one run.
pub struct Trainer {
    pub model: CaptionModel<f32>,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: CaptionModel<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            opt: AdamW::new(),
            cfg,
            step: 0,
        })
    }

    /// Forward, backward and one update at the scheduled learning rate.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLosses> {
        if batch.samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let step = self.step + 1;
        let diverged = |l: Option<StepLosses>| Error::Diverged {
            step,
            l_mlm: l.map_or(f64::NAN, |l| l.l_mlm),
            l_sparse: l.map_or(f64::NAN, |l| l.l_sparse),
        };
        let (losses, mut grads) = match compute_gradients(&self.model, batch, self.cfg.lambda) {
            Err(Error::NonFinite { .. }) => return Err(diverged(None)),
            other => other?,
        };
        if !losses.total.is_finite() || grads.values().flatten().any(|g| !g.is_finite()) {
            return Err(diverged(Some(losses)));
        }
        clip_global_norm(&mut grads, self.cfg.clip_norm);
        let lr = lr_at(step, &self.cfg)?;
        let (scale, wd) = (self.cfg.mask_lr_scale, self.cfg.weight_decay);
        self.opt.update(
            &mut self.model.params,
            &grads,
            |name| if name == MASK_PARAM { lr * scale } else { lr },
            |name| if is_decayed(name) { wd } else { 0.0 },
        );
        self.step = step;
        Ok(losses)
    }
}

/// Patch rows and encoded captions, computed once per run.
pub struct Prepared {
    blocks: Vec<Tensor<f32>>,
    tokens: Vec<CaptionTokens>,
    raw: usize,
}

impl Prepared {
    pub fn new(data: &Dataset, model: &CaptionModel<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let cfg = &model.config;
        let blocks = data
            .clips
            .iter()
            .map(|c| batch_blocks::<f32>(&[c], cfg))
            .collect::<Result<Vec<_>>>()?;
        let tokens = data
            .captions
            .iter()
            .map(|c| encode_caption(c, &data.vocab, cfg.encoder.text_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            tokens,
            raw: cfg.patch.block_len(),
        })
    }

    /// Seeded batch for `step`: items drawn without replacement, words masked
    /// per item, and optionally the end token masked as well.
    pub fn batch(&self, cfg: &TrainConfig, step: usize) -> Result<Batch> {
        let picks = Rng::derive(cfg.seed, &[BATCH_STREAM, step as u64])
            .choose_indices(self.tokens.len(), cfg.batch_size);
        let mut data = Vec::with_capacity(picks.len() * self.blocks[0].numel());
        let mut samples = Vec::with_capacity(picks.len());
        for (slot, &i) in picks.iter().enumerate() {
            data.extend_from_slice(self.blocks[i].data());
            let seed = Rng::derive(cfg.seed, &[MLM_STREAM, step as u64, slot as u64]).next_u64();
            let mut s = apply_mlm_mask(&self.tokens[i], cfg.mask_ratio, seed)?;
            if cfg.supervise_eos {
                let eos = self.tokens[i].length - 1;
                s.corrupted.ids[eos] = MASK;
                s.supervised[eos] = true;
            }
            samples.push(s);
        }
        let rows = data.len() / self.raw;
        Ok(Batch {
            blocks: Tensor::new(vec![rows, self.raw], data)?,
            samples,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub l_mlm: f64,
    pub l_sparse: f64,
    pub mask_mean_activation: f64,
    pub frac_below_zero: f64,
    pub val_cider: Option<f64>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let cider = r.val_cider.map(|c| format!("{c:.6}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{:.6e},{:.6},{:.6},{:.6},{:.6},{}",
            r.step, r.lr, r.l_mlm, r.l_sparse, r.mask_mean_activation, r.frac_below_zero, cider
        );
    }
    s
}

pub struct TrainOutcome {
    pub model: CaptionModel<f32>,
    pub log: Vec<LogRow>,
}

impl TrainOutcome {
    pub fn final_row(&self) -> &LogRow {
        self.log.last().expect("at least one log row")
    }

    /// Last validation CIDEr-D in the log.
    pub fn final_cider(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|r| r.val_cider)
    }
}

/// Validation CIDEr-D of greedy captions against the reference captions.
pub fn validation_cider(
    model: &CaptionModel<f32>,
    val: &Dataset,
    clips: usize,
    max_len: usize,
) -> Result<f64> {
    let n = if clips == 0 {
        val.len()
    } else {
        clips.min(val.len())
    };
    if n == 0 {
        return Err(Error::Data("validation split is empty".into()));
    }
    let dec = if max_len == 0 {
        DecodeConfig::for_text_len(model.config.encoder.text_len)
    } else {
        DecodeConfig {
            max_len,
            ..DecodeConfig::for_text_len(model.config.encoder.text_len)
        }
    };
    let preds = model.caption_clips(&val.clips[..n], &val.vocab, &dec)?;
    cider_against(&preds, &val.captions[..n])
}

/// Model a run starts from: a fresh initialization, or `init` with its mask
/// binarized for binary finetuning.
pub fn starting_model(
    run: &RunConfig,
    vocab: &Vocabulary,
    init: Option<CaptionModel<f32>>,
) -> Result<CaptionModel<f32>> {
    let mode = run.train.mask_mode();
    match (run.train.mode, init) {
        (TrainMode::BinaryFinetune, None) => Err(Error::Config(
            "binary finetuning needs an input checkpoint".into(),
        )),
        (TrainMode::BinaryFinetune, Some(mut m)) => {
            let grid = m.config.grid();
            let hard = MaskGrid::from_logits(m.param(MASK_PARAM)?, grid)?.binarize(0.5)?;
            m.params.insert(MASK_PARAM.to_string(), hard.to_logits());
            m.config.encoder.mask_mode = mode;
            Ok(m)
        }
        (_, Some(mut m)) => {
            m.config.encoder.mask_mode = mode;
            Ok(m)
        }
        (_, None) => {
            let mut cfg = run.model.clone();
            cfg.encoder.vocab_size = vocab.len();
            cfg.encoder.mask_mode = mode;
            CaptionModel::init(cfg, run.train.seed)
        }
    }
}

fn mask_stats(model: &CaptionModel<f32>) -> Result<(f64, f64)> {
    let s = MaskGrid::from_logits(model.param(MASK_PARAM)?, model.config.grid())?
        .sparsity_stats(ZERO_THRESHOLD);
    Ok((s.mean_activation, s.frac_below_zero))
}

/// Full run: `steps` updates with interval logging, periodic validation
/// and optional checkpoints in `out_dir`.
pub fn run_training(
    train: &Dataset,
    val: Option<&Dataset>,
    run: &RunConfig,
    init: Option<CaptionModel<f32>>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    run.train.validate()?;
    let model = starting_model(run, &train.vocab, init)?;
    if model.config.encoder.vocab_size != train.vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match dataset vocabulary {}",
            model.config.encoder.vocab_size,
            train.vocab.len()
        )));
    }
    if let Some(c) = train.clips.first() {
        let mc = &model.config;
        if (c.frames(), c.height(), c.width()) != (mc.frames, mc.height, mc.width) {
            return Err(Error::Config(format!(
                "clips are {}×{}×{} but the model expects {}×{}×{}",
                c.frames(),
                c.height(),
                c.width(),
                mc.frames,
                mc.height,
                mc.width
            )));
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let prepared = Prepared::new(train, &model)?;
    let cfg = run.train.clone();
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut log = Vec::new();
    let (mut sum_mlm, mut sum_sparse, mut count) = (0.0, 0.0, 0usize);

    for step in 1..=cfg.steps {
        let batch = prepared.batch(&cfg, step)?;
        let l = trainer.train_step(&batch)?;
        sum_mlm += l.l_mlm;
        sum_sparse += l.l_sparse;
        count += 1;

        let last = step == cfg.steps;
        let eval_due =
            val.is_some() && (last || (cfg.eval_every > 0 && step % cfg.eval_every == 0));
        if step % cfg.log_every == 0 || last || eval_due {
            let (mean, below) = mask_stats(&trainer.model)?;
            let val_cider = match val {
                Some(v) if eval_due => Some(validation_cider(
                    &trainer.model,
                    v,
                    cfg.eval_clips,
                    cfg.decode_max_len,
                )?),
                _ => None,
            };
            log.push(LogRow {
                step,
                lr: lr_at(step, &cfg)?,
                l_mlm: sum_mlm / count as f64,
                l_sparse: sum_sparse / count as f64,
                mask_mean_activation: mean,
                frac_below_zero: below,
                val_cider,
            });
            (sum_mlm, sum_sparse, count) = (0.0, 0.0, 0);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && !last {
                checkpoint::save(&trainer.model, &dir.join(format!("checkpoint_{step}.bin")))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&trainer.model, &dir.join("model.bin"))?;
        let path = dir.join("metrics.csv");
        fs::write(&path, log_csv(&log)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny_run() -> (RunConfig, Dataset) {
        let mut run = RunConfig::default();
        run.model = ModelConfig {
            frames: 4,
            height: 8,
            width: 8,
            ..ModelConfig::default()
        };
        run.model.patch.spatial = 4;
        run.model.patch.width = 16;
        run.model.encoder.hidden = 16;
        run.model.encoder.heads = 2;
        run.model.encoder.layers = 1;
        run.model.encoder.text_len = 8;
        run.gen.shape_size = 3;
        run.train.steps = 20;
        run.train.batch_size = 4;
        run.train.log_every = 5;
        run.sync();
        let (split, _) = Split::generate(1, 0, 16, &run.gen).unwrap();
        let vocab = Vocabulary::build(&split.captions, 1).unwrap();
        (run, Dataset::from_split(split, vocab))
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig {
            steps: 1000,
            ..TrainConfig::default()
        };
        assert!((lr_at(50, &cfg).unwrap() - 5e-4).abs() < 1e-15);
        assert!((lr_at(100, &cfg).unwrap() - 1e-3).abs() < 1e-15);
        assert_eq!(lr_at(1000, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert!((lr_at(550, &cfg).unwrap() - 5e-4).abs() < 1e-15);
        assert!(lr_at(1001, &cfg).is_err());
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut params = ParamStore::new();
        params.insert(
            "w.w".to_string(),
            Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5),
        );
        let before = params.clone();
        let grads = BTreeMap::from([("w.w".to_string(), vec![0.0f32; 6])]);
        let mut opt = AdamW::new();
        for _ in 0..5 {
            opt.update(&mut params, &grads, |_| 1e-2, |_| 0.0);
        }
        assert_eq!(params, before);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn adamw_first_step_matches_closed_form() {
        let mut params = ParamStore::new();
        params.insert(
            "w.w".to_string(),
            Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap(),
        );
        let grads = BTreeMap::from([("w.w".to_string(), vec![0.5f32, -3.0])]);
        let mut opt = AdamW::new();
        opt.update(&mut params, &grads, |_| 0.1, |_| 0.05);
        // First step: m̂ = g, v̂ = g², so the move is lr·(sign(g) + wd·x).
        let want = [1.0 - 0.1 * (1.0 + 0.05), -2.0 - 0.1 * (-1.0 + 0.05 * -2.0)];
        for (p, w) in params["w.w"].data().iter().zip(want) {
            assert!((*p as f64 - w).abs() < 1e-6);
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = BTreeMap::from([
            ("a".to_string(), vec![3.0f32]),
            ("b".to_string(), vec![4.0f32]),
        ]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"][0] - 0.6).abs() < 1e-7 && (g["b"][0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn lambda_controls_sparsity_gradient() {
        let (run, data) = tiny_run();
        let model = starting_model(&run, &data.vocab, None).unwrap();
        let batch = Prepared::new(&data, &model)
            .unwrap()
            .batch(&run.train, 1)
            .unwrap();
        let (l0, g0) = compute_gradients(&model, &batch, 0.0).unwrap();
        let (l5, g5) = compute_gradients(&model, &batch, 5.0).unwrap();
        assert_eq!(l0.l_sparse, 0.0);
        assert_eq!(l0.total, l0.l_mlm + l0.l_sparse);
        assert_eq!(l5.total, (l5.l_mlm as f32 + l5.l_sparse as f32) as f64);
        assert!(l5.l_sparse > 0.0);
        let mean_abs = |g: &[f32]| g.iter().map(|x| x.abs() as f64).sum::<f64>() / g.len() as f64;
        assert!(mean_abs(&g5[MASK_PARAM]) > 0.0);
        // The sparsity term alone moves the mask gradient by λ·σ'(P)/M².
        let m = model.config.video_len() as f64;
        let s = 1.0 / (1.0 + (-3.0f64).exp());
        let expect = 5.0 * s * (1.0 - s) / (m * m);
        for (a, b) in g5[MASK_PARAM].iter().zip(&g0[MASK_PARAM]) {
            assert!(((a - b) as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn binary_mode_freezes_the_mask() {
        let (mut run, data) = tiny_run();
        let soft = run_training(&data, None, &run, None, None).unwrap();
        run.train.mode = TrainMode::BinaryFinetune;
        run.sync();
        assert!(run_training(&data, None, &run, None, None).is_err());
        let start = starting_model(&run, &data.vocab, Some(soft.model.clone())).unwrap();
        let out = run_training(&data, None, &run, Some(soft.model), None).unwrap();
        assert_eq!(out.model.params[MASK_PARAM], start.params[MASK_PARAM]);
        assert!(start.params[MASK_PARAM]
            .data()
            .iter()
            .all(|&v| v.abs() == 20.0));
        assert!(out.log.iter().all(|r| r.l_sparse == 0.0));
    }

    #[test]
    fn runs_are_deterministic_and_logged() {
        let (run, data) = tiny_run();
        let a = run_training(&data, Some(&data), &run, None, None).unwrap();
        let b = run_training(&data, Some(&data), &run, None, None).unwrap();
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        assert_eq!(a.model, b.model);
        let csv = log_csv(&a.log);
        assert!(csv.starts_with(LOG_HEADER));
        assert_eq!(
            a.log.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![5, 10, 15, 20]
        );
        assert!(a.final_cider().is_some());

        let mut zero = run.clone();
        zero.train.steps = 0;
        assert!(run_training(&data, None, &zero, None, None).is_err());
    }

    #[test]
    fn overfits_a_single_batch() {
        let (run, data) = tiny_run();
        let model = starting_model(&run, &data.vocab, None).unwrap();
        let batch = Prepared::new(&data, &model)
            .unwrap()
            .batch(&run.train, 1)
            .unwrap();
        let cfg = TrainConfig {
            steps: 200,
            lr: 3e-3,
            ..run.train.clone()
        };
        let mut t = Trainer::new(model, cfg).unwrap();
        let first = t.train_step(&batch).unwrap().l_mlm;
        let mut last = first;
        for _ in 1..200 {
            last = t.train_step(&batch).unwrap().l_mlm;
        }
        assert!(last < 0.1 * first, "{first} → {last}");
    }

    #[test]
    fn checkpoints_and_metrics_written() {
        let (mut run, data) = tiny_run();
        run.train.checkpoint_every = 10;
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(&data, None, &run, None, Some(dir.path())).unwrap();
        assert!(dir.path().join("checkpoint_10.bin").exists());
        let back = checkpoint::load(&dir.path().join("model.bin")).unwrap();
        assert_eq!(back, out.model);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv, log_csv(&out.log));
    }
}
