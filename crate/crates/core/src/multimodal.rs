//! Joint text/video encoder. Sequence order is the `N` caption positions
//! followed by the `M` video tokens.

use crate::autodiff::{Tape, UnaryKind, Var, BLOCKED};
use crate::config::{Grid, MaskMode, ModelConfig};
use crate::error::{Error, Result};
use crate::masktools::{heuristic_mask, MaskGrid};
use crate::model::{layer_norm, linear, transformer_block, Bound, CaptionModel, MASK_PARAM};
use crate::tensor::{Real, Tensor};
use crate::text::CaptionTokens;
use crate::video::VideoTokens;

/// Added inside the log so a fully closed soft entry stays finite.
pub const SOFT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub text_len: usize,
    pub grid: Grid,
}

impl AttentionLayout {
    pub fn new(text_len: usize, grid: Grid) -> Self {
        Self { text_len, grid }
    }

    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self::new(cfg.encoder.text_len, cfg.grid())
    }

    pub fn video_len(&self) -> usize {
        self.grid.len()
    }

    pub fn seq_len(&self) -> usize {
        self.text_len + self.video_len()
    }

    /// Bias with the text rows filled in and the video–video block left 0.
    fn structural<F: Real>(&self) -> Tensor<F> {
        let (n, s) = (self.text_len, self.seq_len());
        let blocked = F::of(-BLOCKED);
        Tensor::from_fn(&[s, s], |idx| {
            let (q, k) = (idx / s, idx % s);
            match (q < n, k < n) {
                (true, true) if k > q => blocked,
                (false, true) => blocked,
                _ => F::zero(),
            }
        })
    }
}

/// 1/0 video–video pattern for the hard modes. A query whose whole row is
/// closed keeps its own position so attention stays defined.
fn hard_pattern<F: Real>(
    layout: &AttentionLayout,
    logits: &Tensor<F>,
    mode: MaskMode,
) -> Result<Option<MaskGrid>> {
    let grid = match mode {
        MaskMode::Full | MaskMode::Soft => return Ok(None),
        MaskMode::Binary => MaskGrid::from_logits(logits, layout.grid)?.binarize(0.5)?,
        MaskMode::Heuristic { kind, width } => heuristic_mask(kind, width, layout.grid)?,
    };
    let m = layout.video_len();
    let mut values = grid.values().to_vec();
    for i in 0..m {
        if values[i * m..(i + 1) * m].iter().all(|&v| v == 0.0) {
            values[i * m + i] = 1.0;
        }
    }
    MaskGrid::new(layout.grid, values).map(Some)
}

fn check_mask_dims<F: Real>(layout: &AttentionLayout, logits: &Tensor<F>) -> Result<()> {
    let m = layout.video_len();
    if logits.shape() != [m, m] {
        return Err(Error::Shape {
            op: "attention bias",
            left: vec![m, m],
            right: logits.shape().to_vec(),
        });
    }
    Ok(())
}

/// Records the `(N+M)²` additive attention bias. Only the soft mode links
/// it to the mask variable.
pub fn attention_bias_on_tape<F: Real>(
    tape: &mut Tape<F>,
    layout: &AttentionLayout,
    mask: Var,
    mode: MaskMode,
) -> Result<Var> {
    let logits = tape.value(mask).clone();
    check_mask_dims(layout, &logits)?;
    let n = layout.text_len;
    let mut base = layout.structural::<F>();
    if let Some(pattern) = hard_pattern(layout, &logits, mode)? {
        let (s, m) = (layout.seq_len(), layout.video_len());
        let data = base.data_mut();
        for q in 0..m {
            for k in 0..m {
                if pattern.get(q, k) == 0.0 {
                    data[(n + q) * s + n + k] = F::of(-BLOCKED);
                }
            }
        }
    }
    let base = tape.constant(base);
    if mode != MaskMode::Soft {
        return Ok(base);
    }
    let act = tape.sigmoid(mask)?;
    let log = tape.unary(act, UnaryKind::Log { offset: SOFT_EPS })?;
    tape.add_block(base, log, n, n)
}

pub fn build_attention_bias<F: Real>(
    layout: &AttentionLayout,
    mask: &Tensor<F>,
    mode: MaskMode,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let p = tape.constant(mask.clone());
    let bias = attention_bias_on_tape(&mut tape, layout, p, mode)?;
    Ok(tape.value(bias).clone())
}

/// `lambda · mean(|sigmoid(P)|)`.
pub fn sparsity_loss_on_tape<F: Real>(tape: &mut Tape<F>, mask: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda {lambda} must be ≥ 0")));
    }
    let act = tape.sigmoid(mask)?;
    let act = tape.abs(act)?;
    let mean = tape.mean(act)?;
    tape.scale(mean, F::of(lambda))
}

pub fn sparsity_loss<F: Real>(mask: &Tensor<F>, lambda: f64) -> Result<F> {
    let mut tape = Tape::new();
    let p = tape.constant(mask.clone());
    let l = sparsity_loss_on_tape(&mut tape, p, lambda)?;
    Ok(tape.value(l).item())
}

pub struct MlmOutput {
    /// `[G·N, vocab]`
    pub logits: Var,
    /// Residual stream `[G·(N+M), d]` entering each layer, then the last output.
    pub hidden: Vec<Var>,
}

/// Runs `G` captions (each exactly `N` ids) with their `[G·M, d]` video
/// tokens through the joint encoder.
pub fn forward_mlm_on_tape<F: Real>(
    tape: &mut Tape<F>,
    b: &Bound,
    cfg: &ModelConfig,
    captions: &[&[usize]],
    video: Var,
    bias: Var,
) -> Result<MlmOutput> {
    let (n, m) = (cfg.encoder.text_len, cfg.video_len());
    let g = captions.len();
    if g == 0 {
        return Err(Error::Data("empty caption batch".into()));
    }
    if let Some(c) = captions.iter().find(|c| c.len() != n) {
        return Err(Error::Dimension(format!(
            "caption length {} != text length {n}",
            c.len()
        )));
    }
    if tape.shape(video) != [g * m, cfg.encoder.hidden] {
        return Err(Error::Dimension(format!(
            "video tokens {:?} do not match {g} clips of {m} tokens",
            tape.shape(video)
        )));
    }
    let ids: Vec<usize> = captions.iter().flat_map(|c| c.iter().copied()).collect();
    let tok = tape.gather(b.get("text.tok")?, &ids)?;
    let pos_ids: Vec<usize> = (0..g).flat_map(|_| 0..n).collect();
    let pos = tape.gather(b.get("text.pos")?, &pos_ids)?;
    let text = tape.add(tok, pos)?;
    let ty = b.get("text.type")?;
    let text_ty = tape.gather(ty, &vec![0; g * n])?;
    let text = tape.add(text, text_ty)?;
    let video_ty = tape.gather(ty, &vec![1; g * m])?;
    let vid = tape.add(video, video_ty)?;

    let joined = tape.concat_rows(&[text, vid])?;
    let order: Vec<usize> = (0..g)
        .flat_map(|i| (i * n..(i + 1) * n).chain(g * n + i * m..g * n + (i + 1) * m))
        .collect();
    let mut x = tape.gather(joined, &order)?;

    let mut hidden = vec![x];
    for l in 0..cfg.encoder.layers {
        x = transformer_block(tape, b, &format!("layer{l}"), x, bias, g, cfg.encoder.heads)?;
        hidden.push(x);
    }
    let x = layer_norm(tape, b, "final_ln", x)?;
    let s = n + m;
    let rows: Vec<usize> = (0..g).flat_map(|i| i * s..i * s + n).collect();
    let text_rows = tape.gather(x, &rows)?;
    let logits = linear(tape, b, "head", text_rows)?;
    Ok(MlmOutput { logits, hidden })
}

impl<F: Real> CaptionModel<F> {
    pub fn layout(&self) -> AttentionLayout {
        AttentionLayout::for_model(&self.config)
    }

    /// `N×vocab` logits for one caption and its encoded clip, under the
    /// model's configured mask mode.
    pub fn forward_mlm(
        &self,
        caption: &CaptionTokens,
        video: &VideoTokens<F>,
    ) -> Result<Tensor<F>> {
        if video.grid != self.config.grid() {
            return Err(Error::Dimension(
                "video grid does not match the model".into(),
            ));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let bias = attention_bias_on_tape(
            &mut tape,
            &self.layout(),
            b.get(MASK_PARAM)?,
            self.config.encoder.mask_mode,
        )?;
        let v = tape.constant(video.tokens.clone());
        let out = forward_mlm_on_tape(&mut tape, &b, &self.config, &[&caption.ids], v, bias)?;
        Ok(tape.value(out.logits).clone())
    }
}
