//! Video token encoder: 3D patch embedding, full-attention blocks and the
//! projection into the multimodal width.

use crate::autodiff::{Tape, Var};
use crate::config::{Grid, ModelConfig, PatchConfig};
use crate::error::{Error, Result};
use crate::model::{layer_norm, linear, transformer_block, Bound, CaptionModel, VIDEO_POS_PARAM};
use crate::scene::VideoClip;
use crate::tensor::{Real, Tensor};

/// Encoded clip: `M×d` rows in t-major, then h, then w order.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTokens<F = f32> {
    pub tokens: Tensor<F>,
    pub grid: Grid,
}

/// Token grid for a clip, or an error naming the axis a patch does not divide.
pub fn token_grid(frames: usize, height: usize, width: usize, patch: &PatchConfig) -> Result<Grid> {
    let axis = |name: &str, extent: usize, p: usize| {
        if p == 0 || extent % p != 0 {
            Err(Error::Config(format!(
                "{name} axis: patch {p} does not divide {extent}"
            )))
        } else {
            Ok(extent / p)
        }
    };
    Ok(Grid {
        t: axis("temporal", frames, patch.temporal)?,
        h: axis("height", height, patch.spatial)?,
        w: axis("width", width, patch.spatial)?,
    })
}

/// Flattens every non-overlapping `p_t×p_s×p_s×3` block into one row of
/// `[M, p_t·p_s²·3]`, ordered (dt, dy, dx, channel) within the row.
pub fn patch_blocks<F: Real>(clip: &VideoClip, patch: &PatchConfig) -> Result<(Tensor<F>, Grid)> {
    let grid = token_grid(clip.frames(), clip.height(), clip.width(), patch)?;
    let (pt, ps) = (patch.temporal, patch.spatial);
    let len = patch.block_len();
    let mut data = Vec::with_capacity(grid.len() * len);
    for bt in 0..grid.t {
        for by in 0..grid.h {
            for bx in 0..grid.w {
                for dt in 0..pt {
                    for dy in 0..ps {
                        let (t, y) = (bt * pt + dt, by * ps + dy);
                        let start = ((t * clip.height() + y) * clip.width() + bx * ps) * 3;
                        data.extend(
                            clip.data()[start..start + ps * 3]
                                .iter()
                                .map(|&v| F::of(v as f64)),
                        );
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts_unchecked(vec![grid.len(), len], data),
        grid,
    ))
}

/// Stacks the patch rows of several clips for one batched pass.
pub fn batch_blocks<F: Real>(clips: &[&VideoClip], cfg: &ModelConfig) -> Result<Tensor<F>> {
    if clips.is_empty() {
        return Err(Error::Data("empty clip batch".into()));
    }
    let expect = cfg.grid();
    let mut data = Vec::new();
    for clip in clips {
        let (t, grid) = patch_blocks::<F>(clip, &cfg.patch)?;
        if grid != expect {
            return Err(Error::Dimension(format!(
                "clip grid {}x{}x{} does not match model grid {}x{}x{}",
                grid.t, grid.h, grid.w, expect.t, expect.h, expect.w
            )));
        }
        data.extend(t.into_data());
    }
    Tensor::new(
        vec![clips.len() * expect.len(), cfg.patch.block_len()],
        data,
    )
}

/// Patch embedding: projected blocks plus the per-position embedding.
pub(crate) fn embed_patches<F: Real>(
    tape: &mut Tape<F>,
    b: &Bound,
    blocks: Var,
    groups: usize,
) -> Result<Var> {
    let x = linear(tape, b, "video.patch", blocks)?;
    let pos = b.get(VIDEO_POS_PARAM)?;
    let m = tape.shape(pos)[0];
    let ids: Vec<usize> = (0..groups).flat_map(|_| 0..m).collect();
    let pos = tape.gather(pos, &ids)?;
    tape.add(x, pos)
}

/// `[G·M, raw]` patch rows to `[G·M, d]` video tokens.
pub(crate) fn encode_on_tape<F: Real>(
    tape: &mut Tape<F>,
    b: &Bound,
    cfg: &ModelConfig,
    blocks: Var,
    groups: usize,
) -> Result<Var> {
    let m = cfg.video_len();
    let mut x = embed_patches(tape, b, blocks, groups)?;
    let open = tape.constant(Tensor::zeros(&[m, m]));
    for i in 0..cfg.patch.depth {
        x = transformer_block(
            tape,
            b,
            &format!("video.block{i}"),
            x,
            open,
            groups,
            cfg.patch.heads,
        )?;
    }
    let x = layer_norm(tape, b, "video.ln", x)?;
    let x = linear(tape, b, "video.proj1", x)?;
    let x = tape.gelu(x)?;
    linear(tape, b, "video.proj2", x)
}

impl<F: Real> CaptionModel<F> {
    /// Patch embeddings `M×d_v` of one clip.
    pub fn patchify(&self, clip: &VideoClip) -> Result<Tensor<F>> {
        let blocks = batch_blocks::<F>(&[clip], &self.config)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let x = tape.constant(blocks);
        let e = embed_patches(&mut tape, &b, x, 1)?;
        Ok(tape.value(e).clone())
    }

    pub fn encode_video(&self, clip: &VideoClip) -> Result<VideoTokens<F>> {
        let blocks = batch_blocks::<F>(&[clip], &self.config)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let x = tape.constant(blocks);
        let out = encode_on_tape(&mut tape, &b, &self.config, x, 1)?;
        Ok(VideoTokens {
            tokens: tape.value(out).clone(),
            grid: self.config.grid(),
        })
    }
}
