use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vidcap_core::checkpoint::{self, retime};
use vidcap_core::config::{MaskMode, RunConfig, TrainMode};
use vidcap_core::decode::DecodeConfig;
use vidcap_core::gradsuite::{max_by_module, run_suite, DEFAULT_SEEDS, TOLERANCE};
use vidcap_core::masktools::{export_mask, ExportFormat, MaskGrid};
use vidcap_core::metrics::run_eval;
use vidcap_core::model::MASK_PARAM;
use vidcap_core::scene::{caption_vocabulary, Split};
use vidcap_core::training::{log_csv, run_training, Dataset};

#[derive(Parser)]
#[command(
    name = "vidcap",
    version,
    about = "Video captioning with a learnable sparse attention mask"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset split.
    GenData(GenData),
    /// Train a captioning model.
    Train(Train),
    /// Caption every clip of a dataset split.
    Decode(Decode),
    /// Score predicted captions against references.
    Eval(Eval),
    /// Inspect or transform the attention mask of a checkpoint.
    #[command(subcommand)]
    Mask(MaskCommand),
    /// Verify tape gradients against finite differences.
    Gradcheck(Gradcheck),
}

#[derive(Args)]
struct Common {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of clips (defaults to the configured training split size).
    #[arg(long)]
    clips: Option<usize>,
    /// Independent stream index, so splits from one seed do not overlap.
    #[arg(long, default_value_t = 0)]
    stream: u64,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    /// Training split directory.
    #[arg(long)]
    data: PathBuf,
    /// Validation split directory.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long)]
    out: PathBuf,
    /// Starting checkpoint (required for binary finetuning).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// full, soft, binary-finetune or heuristic.
    #[arg(long)]
    mode: Option<TrainMode>,
}

#[derive(Args)]
struct Decode {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset split directory.
    #[arg(long)]
    data: PathBuf,
    /// Caption file, one line per clip.
    #[arg(long)]
    out: PathBuf,
    /// Most tokens generated per caption.
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Also write the scores to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MaskCommand {
    /// Write the mask activations as a PGM image or CSV grid.
    Export {
        #[arg(long, alias = "in")]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// pgm or csv (defaults to the output extension).
        #[arg(long)]
        format: Option<ExportFormat>,
    },
    /// Threshold the mask to 0/1 and switch the model to binary mode.
    Binarize {
        #[arg(long, alias = "in")]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Resample the mask and video position embeddings to a new temporal
    /// token count.
    Interp {
        #[arg(long, alias = "in")]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Temporal token count of the result.
        #[arg(long)]
        t_new: usize,
    },
    /// Print sparsity statistics of the mask.
    Stats {
        #[arg(long, alias = "in")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        zero_threshold: f64,
    },
}

#[derive(Args)]
struct Gradcheck {
    /// Base seed; the suite runs at five points derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Coordinates probed per tensor in the model-level checks.
    #[arg(long, default_value_t = 16)]
    max_coords: usize,
    /// Print every individual check.
    #[arg(long)]
    verbose: bool,
}

fn gen_data(args: GenData) -> Result<()> {
    let cfg = args.common.run_config()?;
    let clips = args.clips.unwrap_or(cfg.train_clips);
    let (split, _) = Split::generate(cfg.train.seed, args.stream, clips, &cfg.gen)?;
    split.write(&args.out, &caption_vocabulary()?)?;
    println!("wrote {clips} clips to {}", args.out.display());
    Ok(())
}

fn train(args: Train) -> Result<()> {
    let mut cfg = args.common.run_config()?;
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(l) = args.lambda {
        cfg.train.lambda = l;
    }
    if let Some(m) = args.mode {
        cfg.train.mode = m;
    }
    cfg.sync();
    cfg.train.validate()?;
    let data = Dataset::load(&args.data)?;
    let val = args.val.as_deref().map(Dataset::load).transpose()?;
    if let Some(v) = &val {
        if v.vocab != data.vocab {
            bail!("validation vocabulary differs from the training vocabulary");
        }
    }
    let init = args
        .checkpoint
        .as_deref()
        .map(checkpoint::load)
        .transpose()?;
    let out = run_training(&data, val.as_ref(), &cfg, init, Some(&args.out))?;
    print!("{}", log_csv(&out.log));
    println!("saved {}", args.out.join("model.bin").display());
    Ok(())
}

fn decode(args: Decode) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let data = Dataset::load(&args.data)?;
    let mut dec = DecodeConfig::for_text_len(model.config.encoder.text_len);
    if let Some(n) = args.max_len {
        dec.max_len = n;
    }
    let captions = model.caption_clips(&data.clips, &data.vocab, &dec)?;
    let mut text = captions.join("\n");
    text.push('\n');
    fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} captions to {}",
        captions.len(),
        args.out.display()
    );
    Ok(())
}

fn eval(args: Eval) -> Result<()> {
    let scores = run_eval(&args.pred, &args.reference)?;
    let csv = scores.to_csv();
    print!("{csv}");
    if let Some(out) = args.out {
        fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn format_for(path: &Path, explicit: Option<ExportFormat>) -> Result<ExportFormat> {
    if let Some(f) = explicit {
        return Ok(f);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => Ok(ExportFormat::Pgm),
        Some("csv") => Ok(ExportFormat::Csv),
        _ => bail!(
            "cannot infer the export format from {}; pass --format",
            path.display()
        ),
    }
}

fn mask(cmd: MaskCommand) -> Result<()> {
    match cmd {
        MaskCommand::Export {
            checkpoint: ck,
            out,
            format,
        } => {
            let model = checkpoint::load(&ck)?;
            let grid = MaskGrid::from_logits(model.param(MASK_PARAM)?, model.config.grid())?;
            export_mask(&grid, &out, format_for(&out, format)?)?;
            println!("wrote {}", out.display());
        }
        MaskCommand::Binarize {
            checkpoint: ck,
            out,
            threshold,
        } => {
            let mut model = checkpoint::load(&ck)?;
            let grid = MaskGrid::from_logits(model.param(MASK_PARAM)?, model.config.grid())?;
            let hard = grid.binarize(threshold)?;
            let open = hard.values().iter().filter(|&&v| v == 1.0).count();
            model
                .params
                .insert(MASK_PARAM.to_string(), hard.to_logits());
            model.config.encoder.mask_mode = MaskMode::Binary;
            checkpoint::save(&model, &out)?;
            println!(
                "{open} of {} entries open; wrote {}",
                hard.len(),
                out.display()
            );
        }
        MaskCommand::Interp {
            checkpoint: ck,
            out,
            t_new,
        } => {
            if t_new == 0 {
                bail!("--t-new must be at least 1");
            }
            let model = checkpoint::load(&ck)?;
            let frames = t_new * model.config.patch.temporal;
            let moved = retime(&model, frames)?;
            checkpoint::save(&moved, &out)?;
            let g = moved.config.grid();
            println!(
                "mask grid t={} h={} w={}; wrote {}",
                g.t,
                g.h,
                g.w,
                out.display()
            );
        }
        MaskCommand::Stats {
            checkpoint: ck,
            zero_threshold,
        } => {
            let model = checkpoint::load(&ck)?;
            let grid = MaskGrid::from_logits(model.param(MASK_PARAM)?, model.config.grid())?;
            let s = grid.sparsity_stats(zero_threshold);
            let g = grid.grid;
            println!("grid,{}x{}x{}", g.t, g.h, g.w);
            println!("mean_activation,{:.6}", s.mean_activation);
            println!("frac_below_{zero_threshold},{:.6}", s.frac_below_zero);
            println!("frac_below_0.5,{:.6}", s.frac_below_half);
        }
    }
    Ok(())
}

fn gradcheck(args: Gradcheck) -> Result<()> {
    let seeds: Vec<u64> = match args.seed {
        Some(s) => (0..5).map(|i| s.wrapping_add(i)).collect(),
        None => DEFAULT_SEEDS.to_vec(),
    };
    let results = run_suite(&seeds, args.max_coords)?;
    if args.verbose {
        for r in &results {
            println!(
                "{} {} seed={} max_rel_error={:.3e}",
                r.module, r.name, r.seed, r.max_rel_error
            );
        }
    }
    let by_module = max_by_module(&results);
    for (module, err) in &by_module {
        println!("{module}: max relative error {err:.3e}");
    }
    let worst = by_module.values().copied().fold(0.0, f64::max);
    if worst > TOLERANCE {
        bail!("max relative error {worst:.3e} exceeds {TOLERANCE:e}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Mask(m) => mask(m),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
