//! `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::masktools::HeuristicKind;
use crate::scene::GenConfig;

/// Parsed assignments, consumed key by key so leftovers can be reported.
#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries
                .insert(key.clone(), (n + 1, v.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    n + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!("line {line}: invalid value `{v}` for `{key}`"))
            }),
        }
    }

    pub fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Errors on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key `{k}`"))),
        }
    }
}

/// How the video–video block of the attention bias is formed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    Full,
    Soft,
    Binary,
    Heuristic { kind: HeuristicKind, width: usize },
}

impl MaskMode {
    pub fn name(&self) -> &'static str {
        match self {
            MaskMode::Full => "full",
            MaskMode::Soft => "soft",
            MaskMode::Binary => "binary",
            MaskMode::Heuristic { .. } => "heuristic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchConfig {
    pub temporal: usize,
    pub spatial: usize,
    /// Encoder width `d_v`.
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            temporal: 2,
            spatial: 32,
            width: 32,
            depth: 1,
            heads: 2,
        }
    }
}

impl PatchConfig {
    pub fn block_len(&self) -> usize {
        self.temporal * self.spatial * self.spatial * 3
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    pub mask_mode: MaskMode,
    /// Initial pre-activation of every mask entry.
    pub mask_init: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            vocab_size: 32,
            text_len: 16,
            mask_mode: MaskMode::Soft,
            mask_init: 3.0,
        }
    }
}

/// Token grid `(t, h, w)`, flattened t-major then h then w.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.h + y) * self.w + x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: PatchConfig,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 64,
            width: 64,
            patch: PatchConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.patch;
        if p.temporal == 0 || self.frames % p.temporal != 0 || self.frames == 0 {
            return Err(Error::Config(format!(
                "temporal axis: patch {} does not divide {} frames",
                p.temporal, self.frames
            )));
        }
        if p.spatial == 0 || self.height % p.spatial != 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "height axis: patch {} does not divide height {}",
                p.spatial, self.height
            )));
        }
        if self.width % p.spatial != 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "width axis: patch {} does not divide width {}",
                p.spatial, self.width
            )));
        }
        if p.width == 0 || p.heads == 0 || p.width % p.heads != 0 {
            return Err(Error::Config(format!(
                "video width {} not divisible by {} heads",
                p.width, p.heads
            )));
        }
        let e = &self.encoder;
        if e.hidden == 0 || e.heads == 0 || e.hidden % e.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                e.hidden, e.heads
            )));
        }
        if e.text_len < 3 {
            return Err(Error::Config("text length must be ≥ 3".into()));
        }
        if e.vocab_size <= crate::text::SPECIALS.len() || e.layers == 0 || e.mlp_ratio == 0 {
            return Err(Error::Config(
                "vocab size, layer count and mlp ratio must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid {
            t: self.frames / self.patch.temporal,
            h: self.height / self.patch.spatial,
            w: self.width / self.patch.spatial,
        }
    }

    pub fn video_len(&self) -> usize {
        self.grid().len()
    }

    pub fn seq_len(&self) -> usize {
        self.encoder.text_len + self.video_len()
    }

    fn take_keys(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.set("frames", &mut self.frames)?;
        kv.set("height", &mut self.height)?;
        kv.set("width", &mut self.width)?;
        kv.set("patch_t", &mut self.patch.temporal)?;
        kv.set("patch_s", &mut self.patch.spatial)?;
        kv.set("video_width", &mut self.patch.width)?;
        kv.set("video_depth", &mut self.patch.depth)?;
        kv.set("video_heads", &mut self.patch.heads)?;
        kv.set("hidden", &mut self.encoder.hidden)?;
        kv.set("layers", &mut self.encoder.layers)?;
        kv.set("heads", &mut self.encoder.heads)?;
        kv.set("mlp_ratio", &mut self.encoder.mlp_ratio)?;
        kv.set("vocab_size", &mut self.encoder.vocab_size)?;
        kv.set("text_len", &mut self.encoder.text_len)?;
        kv.set("mask_init", &mut self.encoder.mask_init)?;
        Ok(())
    }

    /// Serialized form stored inside checkpoints.
    pub fn to_text(&self) -> String {
        let p = &self.patch;
        let e = &self.encoder;
        let mut s = String::new();
        let _ = writeln!(s, "frames = {}", self.frames);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "patch_t = {}", p.temporal);
        let _ = writeln!(s, "patch_s = {}", p.spatial);
        let _ = writeln!(s, "video_width = {}", p.width);
        let _ = writeln!(s, "video_depth = {}", p.depth);
        let _ = writeln!(s, "video_heads = {}", p.heads);
        let _ = writeln!(s, "hidden = {}", e.hidden);
        let _ = writeln!(s, "layers = {}", e.layers);
        let _ = writeln!(s, "heads = {}", e.heads);
        let _ = writeln!(s, "mlp_ratio = {}", e.mlp_ratio);
        let _ = writeln!(s, "vocab_size = {}", e.vocab_size);
        let _ = writeln!(s, "text_len = {}", e.text_len);
        let _ = writeln!(s, "mask_init = {}", e.mask_init);
        let _ = writeln!(s, "mask_mode = {}", e.mask_mode.name());
        if let MaskMode::Heuristic { kind, width } = e.mask_mode {
            let _ = writeln!(s, "heuristic_kind = {}", kind.name());
            let _ = writeln!(s, "heuristic_width = {width}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut cfg = ModelConfig::default();
        cfg.take_keys(&mut kv)?;
        let mode: String = kv.take("mask_mode")?.unwrap_or_else(|| "soft".into());
        let kind: Option<HeuristicKind> = kv.take("heuristic_kind")?;
        let width: Option<usize> = kv.take("heuristic_width")?;
        cfg.encoder.mask_mode = match mode.as_str() {
            "full" => MaskMode::Full,
            "soft" => MaskMode::Soft,
            "binary" => MaskMode::Binary,
            "heuristic" => MaskMode::Heuristic {
                kind: kind
                    .ok_or_else(|| Error::Config("heuristic mode needs heuristic_kind".into()))?,
                width: width
                    .ok_or_else(|| Error::Config("heuristic mode needs heuristic_width".into()))?,
            },
            other => return Err(Error::Config(format!("unknown mask mode `{other}`"))),
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainMode {
    Full,
    Soft,
    BinaryFinetune,
    Heuristic,
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "soft" => Ok(TrainMode::Soft),
            "binary-finetune" => Ok(TrainMode::BinaryFinetune),
            "heuristic" => Ok(TrainMode::Heuristic),
            other => Err(Error::Config(format!("unknown training mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub mask_ratio: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub heuristic_kind: HeuristicKind,
    pub heuristic_width: usize,
    pub weight_decay: f64,
    /// Learning-rate multiplier applied to the mask pre-activations.
    pub mask_lr_scale: f64,
    pub clip_norm: f64,
    /// Also replace `[EOS]` with `[MASK]` and supervise it, so the model
    /// learns where captions end.
    pub supervise_eos: bool,
    pub log_every: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// Validation clips decoded per evaluation (0 = all).
    pub eval_clips: usize,
    pub decode_max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 1e-3,
            warmup: 0.1,
            batch_size: 8,
            lambda: 5.0,
            mask_ratio: 0.15,
            seed: 0,
            mode: TrainMode::Soft,
            heuristic_kind: HeuristicKind::TemporalWindow,
            heuristic_width: 1,
            weight_decay: 0.05,
            mask_lr_scale: 10.0,
            clip_norm: 1.0,
            supervise_eos: true,
            log_every: 100,
            eval_every: 1000,
            checkpoint_every: 0,
            eval_clips: 0,
            decode_max_len: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("total steps must be positive".into()));
        }
        if !(self.warmup > 0.0 && self.warmup < 1.0) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside (0, 1)",
                self.warmup
            )));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be ≥ 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask ratio {} outside [0, 1]",
                self.mask_ratio
            )));
        }
        if self.batch_size == 0 || self.lr <= 0.0 || self.log_every == 0 {
            return Err(Error::Config(
                "batch size, learning rate and log interval must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn mask_mode(&self) -> MaskMode {
        match self.mode {
            TrainMode::Full => MaskMode::Full,
            TrainMode::Soft => MaskMode::Soft,
            TrainMode::BinaryFinetune => MaskMode::Binary,
            TrainMode::Heuristic => MaskMode::Heuristic {
                kind: self.heuristic_kind,
                width: self.heuristic_width,
            },
        }
    }

    fn take_keys(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.set("steps", &mut self.steps)?;
        kv.set("lr", &mut self.lr)?;
        kv.set("warmup", &mut self.warmup)?;
        kv.set("batch_size", &mut self.batch_size)?;
        kv.set("lambda", &mut self.lambda)?;
        kv.set("mask_ratio", &mut self.mask_ratio)?;
        kv.set("seed", &mut self.seed)?;
        kv.set("mode", &mut self.mode)?;
        kv.set("heuristic_kind", &mut self.heuristic_kind)?;
        kv.set("heuristic_width", &mut self.heuristic_width)?;
        kv.set("weight_decay", &mut self.weight_decay)?;
        kv.set("mask_lr_scale", &mut self.mask_lr_scale)?;
        kv.set("clip_norm", &mut self.clip_norm)?;
        kv.set("supervise_eos", &mut self.supervise_eos)?;
        kv.set("log_every", &mut self.log_every)?;
        kv.set("eval_every", &mut self.eval_every)?;
        kv.set("checkpoint_every", &mut self.checkpoint_every)?;
        kv.set("eval_clips", &mut self.eval_clips)?;
        kv.set("decode_max_len", &mut self.decode_max_len)?;
        Ok(())
    }
}

/// Everything a config file can set: model shape, training schedule and
/// synthetic-data generation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub train_clips: usize,
    pub val_clips: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            gen: GenConfig::default(),
            train_clips: 2000,
            val_clips: 200,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut cfg = RunConfig::default();
        cfg.model.take_keys(&mut kv)?;
        cfg.train.take_keys(&mut kv)?;
        kv.set("shape_size", &mut cfg.gen.shape_size)?;
        kv.set("min_speed", &mut cfg.gen.min_speed)?;
        kv.set("max_speed", &mut cfg.gen.max_speed)?;
        kv.set("train_clips", &mut cfg.train_clips)?;
        kv.set("val_clips", &mut cfg.val_clips)?;
        kv.finish()?;
        cfg.sync();
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.gen.validate()?;
        Ok(cfg)
    }

    /// Copies the shared clip geometry and mask mode into every section.
    pub fn sync(&mut self) {
        self.gen.frames = self.model.frames;
        self.gen.height = self.model.height;
        self.gen.width = self.model.width;
        self.model.encoder.mask_mode = self.train.mask_mode();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_unknown_keys() {
        let cfg =
            RunConfig::parse("# desk run\nsteps = 10 # short\nlambda=0\n\nmode = full\n").unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.lambda, 0.0);
        assert_eq!(cfg.model.encoder.mask_mode, MaskMode::Full);

        let err = RunConfig::parse("steps = 10\nbogus = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus") && err.contains("line 2"), "{err}");
        assert!(RunConfig::parse("steps = ten\n").is_err());
        assert!(RunConfig::parse("steps = 1\nsteps = 2\n").is_err());
        assert!(RunConfig::parse("steps = 0\n").is_err());
        assert!(RunConfig::parse("lambda = -1\n").is_err());
        assert!(RunConfig::parse("warmup = 1.0\n").is_err());
    }

    #[test]
    fn model_config_round_trips_through_text() {
        let mut cfg = ModelConfig::default();
        cfg.encoder.mask_mode = MaskMode::Heuristic {
            kind: HeuristicKind::SpatialWindow,
            width: 3,
        };
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn divisibility_errors_name_the_axis() {
        let cfg = ModelConfig {
            height: 48,
            ..ModelConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
        let cfg = ModelConfig {
            frames: 7,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("temporal"));
    }

    #[test]
    fn grid_arithmetic() {
        let mut cfg = ModelConfig::default();
        assert_eq!(cfg.video_len(), 16);
        assert_eq!(cfg.patch.block_len(), 6144);
        cfg.frames = 32;
        cfg.height = 224;
        cfg.width = 224;
        assert_eq!(cfg.video_len(), 784);
        cfg.frames = 64;
        assert_eq!(cfg.video_len(), 1568);
    }
}
