//! Synthetic moving-shape clips and their on-disk dataset format.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::text::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether pixel `(dx, dy)` of a `size`-wide bounding box is covered.
    fn covers(self, dx: usize, dy: usize, size: usize) -> bool {
        let half = size as f64 / 2.0;
        let (cx, cy) = (dx as f64 + 0.5, dy as f64 + 0.5);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => (cx - half).powi(2) + (cy - half).powi(2) <= half * half,
            ShapeKind::Triangle => (cx - half).abs() <= cy / 2.0,
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Left,
        Direction::Right,
        Direction::Up,
        Direction::Down,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    /// Unit step in image coordinates (y grows downward).
    pub fn delta(self) -> (i64, i64) {
        match self {
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shape_size: usize,
    pub min_speed: usize,
    pub max_speed: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
            shape_size: 6,
            min_speed: 1,
            max_speed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.frames % 2 != 0 {
            return Err(Error::Config(format!(
                "frame count {} must be even and ≥ 2",
                self.frames
            )));
        }
        if self.shape_size == 0 || self.shape_size > self.height.min(self.width) {
            return Err(Error::Config(format!(
                "shape size {} does not fit a {}×{} frame",
                self.shape_size, self.height, self.width
            )));
        }
        if self.min_speed > self.max_speed {
            return Err(Error::Config("min_speed exceeds max_speed".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    pub color: Color,
    pub direction: Direction,
    /// Pixels per frame.
    pub speed: usize,
    /// Top-left corner of the shape's bounding box at frame 0.
    pub start: (i64, i64),
}

impl SceneSpec {
    pub fn caption(&self) -> String {
        format!(
            "a {} {} moves {}",
            self.color.word(),
            self.shape.word(),
            self.direction.word()
        )
    }

    /// Bounding-box corner at frame `t`, clamped to the frame.
    pub fn position(&self, t: usize, cfg: &GenConfig) -> (i64, i64) {
        let (dx, dy) = self.direction.delta();
        let step = (self.speed * t) as i64;
        let max_x = (cfg.width - cfg.shape_size) as i64;
        let max_y = (cfg.height - cfg.shape_size) as i64;
        (
            (self.start.0 + dx * step).clamp(0, max_x),
            (self.start.1 + dy * step).clamp(0, max_y),
        )
    }

    /// The spec that replays this trajectory backwards over `cfg.frames`.
    pub fn reversed(&self, cfg: &GenConfig) -> SceneSpec {
        SceneSpec {
            direction: self.direction.opposite(),
            start: self.position(cfg.frames - 1, cfg),
            ..self.clone()
        }
    }
}

/// `frames × height × width × 3` volume of values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if frames < 2 || frames % 2 != 0 {
            return Err(Error::Data(format!(
                "clip frame count {frames} must be even and ≥ 2"
            )));
        }
        if height == 0 || width == 0 || data.len() != frames * height * width * 3 {
            return Err(Error::Data(format!(
                "clip {frames}×{height}×{width}×3 does not match {} values",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.frame_len()..(t + 1) * self.frame_len()]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((t * self.height + y) * self.width + x) * 3 + c]
    }

    /// Same frames in the order given by `order` (a permutation of frame indices).
    pub fn permuted(&self, order: &[usize]) -> VideoClip {
        assert_eq!(order.len(), self.frames);
        let data = order
            .iter()
            .flat_map(|&t| self.frame(t).iter().copied())
            .collect();
        VideoClip { data, ..*self }
    }

    pub fn time_reversed(&self) -> VideoClip {
        let order: Vec<usize> = (0..self.frames).rev().collect();
        self.permuted(&order)
    }
}

/// Vocabulary covering every caption the generator can produce.
pub fn caption_vocabulary() -> Result<Vocabulary> {
    let mut corpus = vec!["a moves".to_string()];
    corpus.extend(ShapeKind::ALL.iter().map(|s| s.word().to_string()));
    corpus.extend(Color::ALL.iter().map(|c| c.word().to_string()));
    corpus.extend(Direction::ALL.iter().map(|d| d.word().to_string()));
    Vocabulary::build(&corpus, 1)
}

pub fn render_scene(spec: &SceneSpec, cfg: &GenConfig) -> Result<VideoClip> {
    cfg.validate()?;
    let (h, w, size) = (cfg.height, cfg.width, cfg.shape_size);
    let rgb = spec.color.rgb();
    let mut data = vec![0f32; cfg.frames * h * w * 3];
    for t in 0..cfg.frames {
        let (x0, y0) = spec.position(t, cfg);
        for dy in 0..size {
            for dx in 0..size {
                if !spec.shape.covers(dx, dy, size) {
                    continue;
                }
                let (x, y) = (x0 as usize + dx, y0 as usize + dy);
                let base = ((t * h + y) * w + x) * 3;
                data[base..base + 3].copy_from_slice(&rgb);
            }
        }
    }
    VideoClip::new(cfg.frames, h, w, data)
}

/// Draws one scene from the seeded stream. The start point is chosen so
/// the full trajectory fits inside the frame whenever it can.
pub fn sample_scene(seed: u64, cfg: &GenConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let shape = ShapeKind::ALL[rng.below(3)];
    let color = Color::ALL[rng.below(4)];
    let direction = Direction::ALL[rng.below(4)];
    let speed = cfg.min_speed + rng.below(cfg.max_speed - cfg.min_speed + 1);
    let travel = (speed * (cfg.frames - 1)) as i64;
    let (dx, dy) = direction.delta();
    let axis = |room: i64, d: i64, rng: &mut Rng| -> i64 {
        if d == 0 {
            return rng.below(room as usize + 1) as i64;
        }
        let slack = room - travel;
        let offset = if slack >= 0 {
            rng.below(slack as usize + 1) as i64
        } else {
            0
        };
        if d > 0 {
            offset
        } else {
            room - offset
        }
    };
    let x = axis((cfg.width - cfg.shape_size) as i64, dx, &mut rng);
    let y = axis((cfg.height - cfg.shape_size) as i64, dy, &mut rng);
    Ok(SceneSpec {
        shape,
        color,
        direction,
        speed,
        start: (x, y),
    })
}

/// One clip as a pure function of `(seed, cfg)`.
pub fn generate_clip(seed: u64, cfg: &GenConfig) -> Result<(VideoClip, SceneSpec, String)> {
    let spec = sample_scene(seed, cfg)?;
    let clip = render_scene(&spec, cfg)?;
    let caption = spec.caption();
    Ok((clip, spec, caption))
}

/// A split: clips paired line-by-line with captions.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub clips: Vec<VideoClip>,
    pub captions: Vec<String>,
}

impl Split {
    /// `count` clips with per-clip seeds derived from `(seed, stream, index)`.
    pub fn generate(
        seed: u64,
        stream: u64,
        count: usize,
        cfg: &GenConfig,
    ) -> Result<(Split, Vec<SceneSpec>)> {
        let mut clips = Vec::with_capacity(count);
        let mut captions = Vec::with_capacity(count);
        let mut specs = Vec::with_capacity(count);
        for i in 0..count {
            let clip_seed = Rng::derive(seed, &[stream, i as u64]).next_u64();
            let (clip, spec, caption) = generate_clip(clip_seed, cfg)?;
            clips.push(clip);
            captions.push(caption);
            specs.push(spec);
        }
        Ok((Split { clips, captions }, specs))
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Writes `clips.bin`, `captions.txt` and `vocab.txt` into `dir`.
    pub fn write(&self, dir: &Path, vocab: &Vocabulary) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let clips_path = dir.join("clips.bin");
        let file = fs::File::create(&clips_path).map_err(|e| Error::io(&clips_path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(&clips_path, e);
        for clip in &self.clips {
            for dim in [clip.frames, clip.height, clip.width] {
                out.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
            }
            for v in &clip.data {
                out.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        out.flush().map_err(io)?;

        let captions_path = dir.join("captions.txt");
        let mut text = self.captions.join("\n");
        text.push('\n');
        fs::write(&captions_path, text).map_err(|e| Error::io(&captions_path, e))?;
        vocab.save(&dir.join("vocab.txt"))
    }

    pub fn read(dir: &Path) -> Result<(Split, Vocabulary)> {
        let clips_path = dir.join("clips.bin");
        let bytes = fs::read(&clips_path).map_err(|e| Error::io(&clips_path, e))?;
        let mut clips = Vec::new();
        let mut pos = 0;
        let truncated = || Error::Data(format!("{}: truncated clip record", clips_path.display()));
        while pos < bytes.len() {
            let mut dims = [0usize; 3];
            for d in dims.iter_mut() {
                let b = bytes.get(pos..pos + 4).ok_or_else(truncated)?;
                *d = u32::from_le_bytes(b.try_into().unwrap()) as usize;
                pos += 4;
            }
            let n = dims[0] * dims[1] * dims[2] * 3;
            let body = bytes.get(pos..pos + 4 * n).ok_or_else(truncated)?;
            let data = body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 4 * n;
            clips.push(VideoClip::new(dims[0], dims[1], dims[2], data)?);
        }
        let captions_path = dir.join("captions.txt");
        let captions: Vec<String> = fs::read_to_string(&captions_path)
            .map_err(|e| Error::io(&captions_path, e))?
            .lines()
            .map(str::to_string)
            .collect();
        if captions.len() != clips.len() {
            return Err(Error::Data(format!(
                "{}: {} captions for {} clips",
                dir.display(),
                captions.len(),
                clips.len()
            )));
        }
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        Ok((Split { clips, captions }, vocab))
    }
}
