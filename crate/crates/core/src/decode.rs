//! Greedy caption generation.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{CaptionModel, MASK_PARAM};
use crate::multimodal::{attention_bias_on_tape, forward_mlm_on_tape};
use crate::scene::VideoClip;
use crate::tensor::{Real, Tensor};
use crate::text::{Vocabulary, BOS, EOS, MASK, PAD};
use crate::video::{batch_blocks, encode_on_tape, VideoTokens};

/// Clips encoded per pass when decoding a whole split.
const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeConfig {
    /// Most tokens generated, `[EOS]` included.
    pub max_len: usize,
    pub eos: usize,
}

impl DecodeConfig {
    /// Longest setting the model's caption length allows.
    pub fn for_text_len(text_len: usize) -> Self {
        Self {
            max_len: text_len - 1,
            eos: EOS,
        }
    }

    fn validate(&self, text_len: usize) -> Result<()> {
        if self.max_len < 1 || self.max_len >= text_len {
            return Err(Error::Config(format!(
                "decode length {} outside [1, {}]",
                self.max_len,
                text_len - 1
            )));
        }
        Ok(())
    }
}

fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<F: Real> CaptionModel<F> {
    /// `[G·M, d]` video tokens for a batch of clips.
    pub fn encode_videos(&self, clips: &[&VideoClip]) -> Result<Tensor<F>> {
        let blocks = batch_blocks::<F>(clips, &self.config)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let x = tape.constant(blocks);
        let out = encode_on_tape(&mut tape, &b, &self.config, x, clips.len())?;
        Ok(tape.value(out).clone())
    }

    /// Generated ids per clip, stopping at `[EOS]` (not included) or after
    /// `max_len` tokens. `video` stacks `G` clips of `M` tokens.
    pub fn greedy_decode_tokens(
        &self,
        video: &Tensor<F>,
        cfg: &DecodeConfig,
    ) -> Result<Vec<Vec<usize>>> {
        let n = self.config.encoder.text_len;
        let (m, d) = (self.config.video_len(), self.config.encoder.hidden);
        cfg.validate(n)?;
        if video.rank() != 2 || video.cols() != d || video.rows() % m != 0 || video.rows() == 0 {
            return Err(Error::Dimension(format!(
                "video tokens {:?} are not a stack of {m}×{d} clips",
                video.shape()
            )));
        }
        let g = video.rows() / m;
        let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; g];
        let mut done = vec![false; g];

        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let bias = attention_bias_on_tape(
            &mut tape,
            &self.layout(),
            b.get(MASK_PARAM)?,
            self.config.encoder.mask_mode,
        )?;
        let base_len = tape.len();

        for step in 1..=cfg.max_len {
            let active: Vec<usize> = (0..g).filter(|&i| !done[i]).collect();
            if active.is_empty() {
                break;
            }
            let captions: Vec<Vec<usize>> = active
                .iter()
                .map(|&i| {
                    let mut ids = seqs[i].clone();
                    ids.push(MASK);
                    ids.resize(n, PAD);
                    ids
                })
                .collect();
            let rows: Vec<F> = active
                .iter()
                .flat_map(|&i| video.data()[i * m * d..(i + 1) * m * d].iter().copied())
                .collect();
            tape.truncate(base_len);
            let v = tape.constant(Tensor::new(vec![active.len() * m, d], rows)?);
            let refs: Vec<&[usize]> = captions.iter().map(Vec::as_slice).collect();
            let out = forward_mlm_on_tape(&mut tape, &b, &self.config, &refs, v, bias)?;
            let logits = tape.value(out.logits);
            let vocab = logits.cols();
            for (slot, &i) in active.iter().enumerate() {
                let row = &logits.data()[(slot * n + step) * vocab..(slot * n + step + 1) * vocab];
                let next = argmax(row);
                if next == cfg.eos {
                    done[i] = true;
                } else {
                    seqs[i].push(next);
                }
            }
        }
        Ok(seqs.into_iter().map(|s| s[1..].to_vec()).collect())
    }

    pub fn greedy_decode(
        &self,
        video: &VideoTokens<F>,
        vocab: &Vocabulary,
        cfg: &DecodeConfig,
    ) -> Result<String> {
        if video.grid != self.config.grid() {
            return Err(Error::Dimension(
                "video grid does not match the model".into(),
            ));
        }
        let ids = self.greedy_decode_tokens(&video.tokens, cfg)?;
        Ok(vocab.words(&ids[0]).join(" "))
    }

    /// One caption per clip.
    pub fn caption_clips(
        &self,
        clips: &[VideoClip],
        vocab: &Vocabulary,
        cfg: &DecodeConfig,
    ) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(CHUNK) {
            let refs: Vec<&VideoClip> = chunk.iter().collect();
            let video = self.encode_videos(&refs)?;
            for ids in self.greedy_decode_tokens(&video, cfg)? {
                out.push(vocab.words(&ids).join(" "));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::scene::{generate_clip, GenConfig};

    fn setup() -> (CaptionModel<f32>, Vec<VideoClip>, Vocabulary) {
        let mut cfg = ModelConfig {
            frames: 4,
            height: 8,
            width: 8,
            ..ModelConfig::default()
        };
        cfg.patch.spatial = 4;
        cfg.patch.width = 8;
        cfg.encoder.hidden = 8;
        cfg.encoder.heads = 2;
        cfg.encoder.layers = 1;
        cfg.encoder.text_len = 6;
        cfg.encoder.vocab_size = 9;
        let vocab = Vocabulary::build(&["a b c d"], 1).unwrap();
        let gen = GenConfig {
            frames: 4,
            height: 8,
            width: 8,
            shape_size: 3,
            ..GenConfig::default()
        };
        let clips = (0..3).map(|s| generate_clip(s, &gen).unwrap().0).collect();
        (CaptionModel::init(cfg, 1).unwrap(), clips, vocab)
    }

    fn force_head(model: &mut CaptionModel<f32>, id: usize) {
        let b = model.params.get_mut("head.b").unwrap();
        for (i, v) in b.data_mut().iter_mut().enumerate() {
            *v = if i == id { 100.0 } else { 0.0 };
        }
    }

    #[test]
    fn eos_head_gives_empty_caption() {
        let (mut model, clips, vocab) = setup();
        force_head(&mut model, EOS);
        let v = model.encode_video(&clips[0]).unwrap();
        assert_eq!(
            model
                .greedy_decode(&v, &vocab, &DecodeConfig::for_text_len(6))
                .unwrap(),
            ""
        );
    }

    #[test]
    fn no_eos_runs_to_max_len() {
        let (mut model, clips, vocab) = setup();
        force_head(&mut model, 6);
        let v = model.encode_video(&clips[0]).unwrap();
        let cfg = DecodeConfig {
            max_len: 3,
            eos: EOS,
        };
        let ids = model.greedy_decode_tokens(&v.tokens, &cfg).unwrap();
        assert_eq!(ids, vec![vec![6, 6, 6]]);
        let text = model.greedy_decode(&v, &vocab, &cfg).unwrap();
        assert_eq!(text.split(' ').count(), 3);
        assert!(model
            .greedy_decode_tokens(
                &v.tokens,
                &DecodeConfig {
                    max_len: 6,
                    eos: EOS
                }
            )
            .is_err());
        assert!(model
            .greedy_decode_tokens(
                &v.tokens,
                &DecodeConfig {
                    max_len: 0,
                    eos: EOS
                }
            )
            .is_err());
    }

    #[test]
    fn unk_is_rendered_and_other_specials_are_not() {
        let (mut model, clips, vocab) = setup();
        force_head(&mut model, crate::text::UNK);
        let v = model.encode_video(&clips[0]).unwrap();
        let cfg = DecodeConfig {
            max_len: 2,
            eos: EOS,
        };
        assert_eq!(
            model.greedy_decode(&v, &vocab, &cfg).unwrap(),
            "[UNK] [UNK]"
        );
        force_head(&mut model, PAD);
        assert_eq!(model.greedy_decode(&v, &vocab, &cfg).unwrap(), "");
    }

    #[test]
    fn batched_equals_single_and_is_deterministic() {
        let (model, clips, vocab) = setup();
        let cfg = DecodeConfig::for_text_len(6);
        let batch = model.caption_clips(&clips, &vocab, &cfg).unwrap();
        for (clip, text) in clips.iter().zip(&batch) {
            let v = model.encode_video(clip).unwrap();
            assert_eq!(&model.greedy_decode(&v, &vocab, &cfg).unwrap(), text);
        }
        assert_eq!(batch, model.caption_clips(&clips, &vocab, &cfg).unwrap());
    }

    #[test]
    fn argmax_ties_pick_lowest_id() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    }
}
