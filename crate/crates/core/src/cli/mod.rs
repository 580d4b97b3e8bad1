//! Command-line front end.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 runtime
//! failure (divergence, degenerate data, unavailable baseline), 4 I/O error.

mod config;
mod pipeline;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::content_branch::ContentConfig;
use crate::embeddings::{synthesize_corpus, SynthSpec};
use crate::error::{Error, Result};
use crate::geometry::{load_sequence, save_sequence, standard_template};
use crate::image_translation::{synthetic_pairs, train_i2i, ConvFeatures, GeneratorConfig, RasterConfig};
use crate::metrics::format_report;
use crate::renderer::{to_pixel_space, PixelMapping, PortraitImage};
use crate::speaker_branch::SpeakerConfig;
use crate::training::{
    Checkpoint, ContentTrainer, Dataset, LandmarkSource, RetrievalMode, SpeakerTrainer, TrainConfig, TrainOutcome,
};

pub use config::{layered, merge, Mode, PipelineConfig};
pub use pipeline::{
    animate, content_model_from, edit_pose, evaluate_split, load_content_model, load_generator, load_speaker_model,
    frame_files, predict, predict_clip, sha256_file, speaker_model_from, AnimateManifest, Predictor,
};

#[derive(Debug, Parser)]
#[command(name = "talkhead", version, about = "Speaker-aware talking-head animation from audio embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Animate a portrait from content and speaker embeddings.
    Animate(AnimateArgs),
    /// Train the content branch.
    TrainContent(TrainContentArgs),
    /// Train the speaker-aware branch.
    TrainSpeaker(TrainSpeakerArgs),
    /// Train the landmark-to-image generator.
    TrainI2i(TrainI2iArgs),
    /// Score predictions or a retrieval baseline on a corpus split.
    Eval(EvalArgs),
    /// Write a procedural corpus.
    SynthCorpus(SynthArgs),
    /// Rotate every frame of a landmark file.
    PoseEdit(PoseEditArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitPart {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    SameId,
    RandomId,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// TOML file with optional [train] and [model] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

impl TrainFlags {
    fn file(&self) -> Result<Option<Value>> {
        self.config.as_deref().map(config::read_toml).transpose()
    }

    fn train(&self, file: Option<&Value>) -> Result<TrainConfig> {
        let flags = json!({
            "max_steps": self.steps,
            "learning_rate": self.lr,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "eval_every": self.eval_every,
            "clip_norm": self.clip_norm,
        });
        let cfg: TrainConfig = layered(&TrainConfig::default(), file, "train", flags)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn preset(&self, file: Option<&Value>) -> Result<Preset> {
        if let Some(p) = self.preset {
            return Ok(p);
        }
        match file.and_then(|f| f.get("preset")).and_then(Value::as_str) {
            None | Some("desk") => Ok(Preset::Desk),
            Some("full") => Ok(Preset::Full),
            Some(other) => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainContentArgs {
    /// Corpus manifest (see `synth-corpus`).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct TrainSpeakerArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Frozen content branch providing the input landmarks.
    #[arg(long, required_unless_present = "static_input")]
    pub content_checkpoint: Option<PathBuf>,
    /// Use the static face as input instead of a content branch.
    #[arg(long = "static", conflicts_with = "content_checkpoint")]
    pub static_input: bool,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct TrainI2iArgs {
    /// Corpus whose registered landmark frames drive the training pairs.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, requires = "portrait_landmarks")]
    pub portrait: Option<PathBuf>,
    #[arg(long)]
    pub portrait_landmarks: Option<PathBuf>,
    /// Number of training pairs.
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,
    #[arg(long, default_value_t = 256)]
    pub resolution: usize,
    /// Perceptual loss weight.
    #[arg(long, default_value_t = 1.0)]
    pub lambda_a: f64,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, required_unless_present = "baseline")]
    pub content_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub speaker_checkpoint: Option<PathBuf>,
    /// Score a pose-retrieval baseline drawn from the training part.
    #[arg(long, value_enum, conflicts_with_all = ["content_checkpoint", "speaker_checkpoint"])]
    pub baseline: Option<Baseline>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitPart,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with an optional [synth] table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub speakers: Option<usize>,
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub content_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PoseEditArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub pitch: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub roll: f64,
}

#[derive(Debug, Args)]
pub struct AnimateArgs {
    /// TOML file with pipeline fields at the top level.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, requires = "portrait_landmarks")]
    pub portrait: Option<PathBuf>,
    #[arg(long)]
    pub portrait_landmarks: Option<PathBuf>,
    #[arg(long)]
    pub synthetic_size: Option<u32>,
    #[arg(long)]
    pub content: Option<PathBuf>,
    #[arg(long)]
    pub speaker: Option<PathBuf>,
    #[arg(long)]
    pub content_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub speaker_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub i2i_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    pub yaw: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub pitch: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub roll: Option<f64>,
}

impl AnimateArgs {
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let file = self.config.as_deref().map(config::read_toml).transpose()?;
        let flags = json!({
            "portrait": self.portrait,
            "portrait_landmarks": self.portrait_landmarks,
            "synthetic_size": self.synthetic_size,
            "content": self.content,
            "speaker": self.speaker,
            "content_checkpoint": self.content_checkpoint,
            "speaker_checkpoint": self.speaker_checkpoint,
            "i2i_checkpoint": self.i2i_checkpoint,
            "template": self.template,
            "out": self.out,
            "mode": self.mode,
            "fps": self.fps,
            "seed": self.seed,
            "yaw": self.yaw,
            "pitch": self.pitch,
            "roll": self.roll,
        });
        layered(&PipelineConfig::default(), file.as_ref(), "", flags)
    }
}

fn load_dataset(manifest: &Path) -> Result<Dataset> {
    Dataset::load_manifest(manifest, &standard_template())
}

fn write_losses(ckpt: &Path, out: &TrainOutcome) -> Result<PathBuf> {
    let mut s = String::from("step\tloss");
    if !out.disc_losses.is_empty() {
        s.push_str("\tdisc_loss");
    }
    s.push('\n');
    for (i, l) in out.losses.iter().enumerate() {
        let _ = write!(s, "{}\t{l:.9e}", i + 1);
        if let Some(d) = out.disc_losses.get(i) {
            let _ = write!(s, "\t{d:.9e}");
        }
        s.push('\n');
    }
    for (step, l) in &out.val_losses {
        let _ = writeln!(s, "# val\t{step}\t{l:.9e}");
    }
    let path = ckpt.with_extension("losses.tsv");
    std::fs::write(&path, s)?;
    Ok(path)
}

fn train_content_cmd(a: &TrainContentArgs) -> Result<()> {
    let ds = load_dataset(&a.manifest)?;
    let file = a.train.file()?;
    let cfg = a.train.train(file.as_ref())?;
    let split = ds.split(cfg.seed);
    let (train, val) = (ds.subset(&split.train), ds.subset(&split.val));
    let val = (!val.clips.is_empty()).then_some(&val);
    let trainer = match &a.resume {
        Some(p) => ContentTrainer::resume(&train, &Checkpoint::load(p)?, cfg)?,
        None => {
            let d = ds.content_dim();
            let base = match a.train.preset(file.as_ref())? {
                Preset::Desk => ContentConfig::desk(d),
                Preset::Full => ContentConfig::full(d),
            };
            let model: ContentConfig = layered(&base, file.as_ref(), "model", Value::Null)?;
            ContentTrainer::new(&train, model, cfg)?
        }
    };
    let out = trainer.run(val)?;
    out.checkpoint.save(&a.out)?;
    let log = write_losses(&a.out, &out)?;
    println!("wrote {} (step {}) and {}", a.out.display(), out.checkpoint.step, log.display());
    Ok(())
}

fn train_speaker_cmd(a: &TrainSpeakerArgs) -> Result<()> {
    let ds = load_dataset(&a.manifest)?;
    let file = a.train.file()?;
    let cfg = a.train.train(file.as_ref())?;
    let split = ds.split(cfg.seed);
    let (train, val) = (ds.subset(&split.train), ds.subset(&split.val));
    let val = (!val.clips.is_empty()).then_some(&val);
    let source = match &a.content_checkpoint {
        Some(p) => LandmarkSource::Content(load_content_model(p)?),
        None => LandmarkSource::Static,
    };
    let trainer = match &a.resume {
        Some(p) => SpeakerTrainer::resume(&train, source, &Checkpoint::load(p)?, cfg)?,
        None => {
            let d = ds.content_dim();
            let base = match a.train.preset(file.as_ref())? {
                Preset::Desk => SpeakerConfig::desk(d),
                Preset::Full => SpeakerConfig::full(d),
            };
            let model: SpeakerConfig = layered(&base, file.as_ref(), "model", Value::Null)?;
            SpeakerTrainer::new(&train, source, model, cfg)?
        }
    };
    let out = trainer.run(val)?;
    out.checkpoint.save(&a.out)?;
    let log = write_losses(&a.out, &out)?;
    println!("wrote {} (step {}) and {}", a.out.display(), out.checkpoint.step, log.display());
    Ok(())
}

fn train_i2i_cmd(a: &TrainI2iArgs) -> Result<()> {
    let ds = load_dataset(&a.manifest)?;
    let file = a.train.file()?;
    let cfg = a.train.train(file.as_ref())?;
    let template = standard_template();
    let portrait = match (&a.portrait, &a.portrait_landmarks) {
        (Some(img), Some(lm)) => PortraitImage::load(img, lm)?,
        _ => PortraitImage::synthetic(a.resolution as u32, &template)?,
    };
    let map = PixelMapping::fit(&template, &portrait.landmarks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let frames = (0..a.pairs)
        .map(|_| {
            let clip = &ds.clips[rng.random_range(0..ds.clips.len())];
            let f = clip.registered.frame(rng.random_range(0..clip.len())).clone();
            let seq = crate::geometry::LandmarkSequence::new(vec![f], crate::geometry::CANONICAL_FPS)?;
            Ok(to_pixel_space(&seq, &map)?.frame(0).clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let raster = RasterConfig { width: portrait.width(), height: portrait.height(), ..Default::default() };
    let samples = synthetic_pairs(&portrait, &frames, &raster)?;
    let base = match a.train.preset(file.as_ref())? {
        Preset::Desk => GeneratorConfig::reduced(a.resolution),
        Preset::Full => GeneratorConfig { resolution: a.resolution, ..GeneratorConfig::full() },
    };
    let model: GeneratorConfig = layered(&base, file.as_ref(), "model", Value::Null)?;
    let phi = ConvFeatures::random(cfg.seed);
    let (ckpt, losses) = train_i2i(&samples, &phi, model, cfg, a.lambda_a)?;
    ckpt.save(&a.out)?;
    let log = write_losses(&a.out, &TrainOutcome { checkpoint: ckpt, losses, disc_losses: Vec::new(), val_losses: Vec::new() })?;
    println!("wrote {} and {}", a.out.display(), log.display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.manifest)?;
    let split = ds.split(a.seed);
    let part = match a.split {
        SplitPart::Train => ds.subset(&split.train),
        SplitPart::Val => ds.subset(&split.val),
        SplitPart::Test => ds.subset(&split.test),
        SplitPart::All => ds.clone(),
    };
    if part.clips.is_empty() {
        return Err(Error::Validation("the selected split has no clips".into()));
    }
    let pool = ds.subset(&split.train);
    let content = a.content_checkpoint.as_ref().map(load_content_model).transpose()?;
    let speaker = a.speaker_checkpoint.as_ref().map(load_speaker_model).transpose()?;
    let predictor = match (&a.baseline, &content, &speaker) {
        (Some(Baseline::SameId), _, _) => Predictor::Retrieval(&pool, RetrievalMode::SameId, a.seed),
        (Some(Baseline::RandomId), _, _) => Predictor::Retrieval(&pool, RetrievalMode::RandomId, a.seed),
        (None, Some(c), Some(s)) => Predictor::Full(c, s),
        (None, Some(c), None) => Predictor::ContentOnly(c),
        (None, None, _) => return Err(Error::Config("--content-checkpoint is required".into())),
    };
    let report = format_report(&evaluate_split(predictor, &part)?)?;
    print!("{report}");
    if let Some(out) = &a.out {
        std::fs::write(out, &report)?;
    }
    Ok(())
}

fn synth_cmd(a: &SynthArgs) -> Result<()> {
    let file = a.config.as_deref().map(config::read_toml).transpose()?;
    let flags = json!({
        "n_speakers": a.speakers,
        "clips_per_speaker": a.clips,
        "n_frames": a.frames,
        "content_dim": a.content_dim,
    });
    let spec: SynthSpec = layered(&SynthSpec::default(), file.as_ref(), "synth", flags)?;
    let corpus = synthesize_corpus(&spec, a.seed)?;
    let path = Dataset::from_synth(&corpus)?.write(&a.out)?;
    println!("wrote {} clips to {}", corpus.clips.len(), path.display());
    Ok(())
}

fn pose_edit_cmd(a: &PoseEditArgs) -> Result<()> {
    let seq = load_sequence(&a.input)?;
    save_sequence(&edit_pose(&seq, a.yaw, a.pitch, a.roll)?, &a.out)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Animate(a) => {
            let cfg = a.resolve()?;
            let m = animate(&cfg)?;
            println!("wrote {} frames to {}", m.frame_count, cfg.out.display());
            Ok(())
        }
        Command::TrainContent(a) => train_content_cmd(a),
        Command::TrainSpeaker(a) => train_speaker_cmd(a),
        Command::TrainI2i(a) => train_i2i_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::SynthCorpus(a) => synth_cmd(a),
        Command::PoseEdit(a) => pose_edit_cmd(a),
    }
}
