//! End-to-end inference: embeddings to landmarks to frames.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::content_branch::{ContentConfig, ContentModel};
use crate::embeddings::{ContentEmbedding, SpeakerEmbedding};
use crate::error::{Error, Result};
use crate::geometry::{
    apply_head_pose, resample, standard_template, HeadPose, LandmarkFrame, LandmarkSequence, PartTopology, CANONICAL_FPS,
};
use crate::image_translation::{image_to_tensor, rasterize_landmarks, tensor_to_image, Generator, GeneratorConfig, RasterConfig};
use crate::metrics::{corpus_reports, MetricReport};
use crate::renderer::{render_animation, to_pixel_space, PixelMapping, PortraitImage};
use crate::speaker_branch::{SpeakerConfig, SpeakerModel};
use crate::training::{retrieval_baseline, Checkpoint, Clip, Dataset, RetrievalMode};

use super::config::{Mode, PipelineConfig};

pub fn load_content_model(path: impl AsRef<Path>) -> Result<ContentModel> {
    let ckpt = Checkpoint::load(path)?;
    content_model_from(&ckpt)
}

pub fn content_model_from(ckpt: &Checkpoint) -> Result<ContentModel> {
    ckpt.expect_kind("content")?;
    let cfg: ContentConfig =
        serde_json::from_value(ckpt.config["model"].clone()).map_err(|e| Error::parse("config.model", e.to_string()))?;
    ContentModel::with_params(cfg, ckpt.params.clone())
}

pub fn load_speaker_model(path: impl AsRef<Path>) -> Result<SpeakerModel> {
    let ckpt = Checkpoint::load(path)?;
    speaker_model_from(&ckpt)
}

pub fn speaker_model_from(ckpt: &Checkpoint) -> Result<SpeakerModel> {
    ckpt.expect_kind("speaker")?;
    let cfg: SpeakerConfig =
        serde_json::from_value(ckpt.config["model"].clone()).map_err(|e| Error::parse("config.model", e.to_string()))?;
    SpeakerModel::with_params(cfg, ckpt.params.clone())
}

pub fn load_generator(path: impl AsRef<Path>) -> Result<Generator> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind("i2i")?;
    let cfg: GeneratorConfig =
        serde_json::from_value(ckpt.config["model"].clone()).map_err(|e| Error::parse("config.model", e.to_string()))?;
    Generator::with_params(cfg, ckpt.params)
}

/// Landmarks for one utterance. Without a speaker model the result is the
/// content branch output with the static pose of `q`.
pub fn predict(
    content: &ContentModel,
    speaker: Option<(&SpeakerModel, &SpeakerEmbedding)>,
    a: &ContentEmbedding,
    q: &LandmarkFrame,
) -> Result<LandmarkSequence> {
    let p = content.forward(a, q)?.landmarks;
    match speaker {
        None => Ok(p),
        Some((model, s)) => {
            let s = model.project(s)?;
            Ok(model.forward(a, &s, &p, q)?.landmarks)
        }
    }
}

/// Which prediction pathway [`evaluate_split`] scores.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'m> {
    /// Content branch only: static head.
    ContentOnly(&'m ContentModel),
    /// Speaker branch on top of the static face, no content branch.
    SpeakerOnly(&'m SpeakerModel),
    Full(&'m ContentModel, &'m SpeakerModel),
    /// Pose track copied from another clip of `pool`.
    Retrieval(&'m Dataset, RetrievalMode, u64),
}

pub fn predict_clip(predictor: Predictor, clip: &Clip) -> Result<LandmarkSequence> {
    match predictor {
        Predictor::ContentOnly(c) => predict(c, None, &clip.content, &clip.q),
        Predictor::Full(c, s) => predict(c, Some((s, &clip.speaker)), &clip.content, &clip.q),
        Predictor::SpeakerOnly(s) => {
            let p = LandmarkSequence::repeat(&clip.q, clip.len(), CANONICAL_FPS)?;
            Ok(s.forward(&clip.content, &s.project(&clip.speaker)?, &p, &clip.q)?.landmarks)
        }
        Predictor::Retrieval(pool, mode, seed) => retrieval_baseline(clip, pool, mode, seed),
    }
}

/// Metric reports for every clip of `ds`, reference = observed landmarks.
pub fn evaluate_split(predictor: Predictor, ds: &Dataset) -> Result<Vec<MetricReport>> {
    let triples = ds
        .clips
        .iter()
        .map(|c| Ok((c.id.clone(), predict_clip(predictor, c)?, c.landmarks.clone())))
        .collect::<Result<Vec<_>>>()?;
    corpus_reports(&triples, &ds.template, &PartTopology::standard68())
}

/// Rotates every frame about its stable centroid by the given angles.
pub fn edit_pose(seq: &LandmarkSequence, yaw: f64, pitch: f64, roll: f64) -> Result<LandmarkSequence> {
    if yaw == 0.0 && pitch == 0.0 && roll == 0.0 {
        return Ok(seq.clone());
    }
    Ok(apply_head_pose(seq, &[HeadPose::from_angles(yaw, pitch, roll)?])?)
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnimateManifest {
    pub config: PipelineConfig,
    /// SHA-256 of every input file, keyed by role.
    pub inputs: Vec<(String, String)>,
    pub fps: f64,
    pub frame_count: usize,
    pub frames: Vec<String>,
    pub fold_overs: Vec<usize>,
    pub landmarks: String,
}

fn portrait_for(cfg: &PipelineConfig, template: &LandmarkFrame) -> Result<PortraitImage> {
    match (&cfg.portrait, &cfg.portrait_landmarks) {
        (Some(img), Some(lm)) => PortraitImage::load(img, lm),
        (Some(_), None) => Err(Error::Config("--portrait needs --portrait-landmarks".into())),
        (None, _) => PortraitImage::synthetic(cfg.synthetic_size, template),
    }
}

/// Runs content branch, speaker branch, pose edit and rendering. Writes the
/// frames, the landmark track and `animate.json` into `cfg.out`.
pub fn animate(cfg: &PipelineConfig) -> Result<AnimateManifest> {
    cfg.validate()?;
    let out = &cfg.out;
    std::fs::create_dir_all(out)?;
    let template = match &cfg.template {
        Some(p) => crate::geometry::load_template(p)?,
        None => standard_template(),
    };
    let portrait = portrait_for(cfg, &template)?;
    let map = PixelMapping::fit(&template, &portrait.landmarks)?;
    let q = map.portrait_face(&portrait, &template)?;
    let content_path = cfg.content.as_ref().ok_or_else(|| Error::Config("missing --content embedding".into()))?;
    let a = ContentEmbedding::load(content_path)?;
    let ckpt_path = cfg.content_checkpoint.as_ref().ok_or_else(|| Error::Config("missing --content-checkpoint".into()))?;
    let content = load_content_model(ckpt_path)?;

    let mut inputs = vec![("content".to_string(), sha256_file(content_path)?), ("content_checkpoint".into(), sha256_file(ckpt_path)?)];
    let speaker = match &cfg.speaker_checkpoint {
        None => None,
        Some(sp) => {
            let emb_path = cfg.speaker.as_ref().ok_or_else(|| {
                Error::Config("speaker-aware mode needs a speaker embedding: pass --speaker <file>".into())
            })?;
            inputs.push(("speaker".into(), sha256_file(emb_path)?));
            inputs.push(("speaker_checkpoint".into(), sha256_file(sp)?));
            Some((load_speaker_model(sp)?, SpeakerEmbedding::load(emb_path)?))
        }
    };
    for (role, p) in [("portrait", &cfg.portrait), ("portrait_landmarks", &cfg.portrait_landmarks), ("template", &cfg.template)] {
        if let Some(p) = p {
            inputs.push((role.into(), sha256_file(p)?));
        }
    }

    let y = predict(&content, speaker.as_ref().map(|(m, s)| (m, s)), &a, &q)?;
    let y = edit_pose(&y, cfg.yaw, cfg.pitch, cfg.roll)?;
    let y = if (cfg.fps - y.fps()).abs() > 1e-9 { resample(&y, cfg.fps)? } else { y };
    let landmarks_name = "landmarks.txt".to_string();
    crate::geometry::save_sequence(&y, out.join(&landmarks_name))?;
    let px = to_pixel_space(&y, &map)?;

    let (frames, fold_overs) = match cfg.mode {
        Mode::Warp => {
            let m = render_animation(&portrait, &px, out)?;
            (m.frames, m.fold_overs)
        }
        Mode::Translate => {
            let ckpt = cfg.i2i_checkpoint.as_ref().ok_or_else(|| Error::Config("--mode translate needs --i2i-checkpoint".into()))?;
            inputs.push(("i2i_checkpoint".into(), sha256_file(ckpt)?));
            let gen = load_generator(ckpt)?;
            translate_frames(&gen, &portrait, &px, out)?
        }
    };
    let manifest = AnimateManifest {
        config: cfg.clone(),
        inputs,
        fps: y.fps(),
        frame_count: frames.len(),
        frames,
        fold_overs,
        landmarks: landmarks_name,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out.join("animate.json"), json)?;
    Ok(manifest)
}

fn translate_frames(gen: &Generator, portrait: &PortraitImage, px: &LandmarkSequence, out: &Path) -> Result<(Vec<String>, Vec<usize>)> {
    let r = gen.cfg.resolution as u32;
    if portrait.width() != r || portrait.height() != r {
        return Err(Error::Validation(format!(
            "translate mode needs a {r}x{r} portrait, got {}x{}",
            portrait.width(),
            portrait.height()
        )));
    }
    let topo = PartTopology::standard68();
    let raster = RasterConfig { width: r, height: r, ..Default::default() };
    let src = image_to_tensor(&portrait.image);
    let mut names = Vec::with_capacity(px.len());
    for (t, f) in px.frames().iter().enumerate() {
        let lm = image_to_tensor(&rasterize_landmarks(f, &topo, &raster));
        let img = tensor_to_image(&gen.forward(&src, &lm)?)?;
        let name = format!("frame_{t:06}.png");
        img.save(out.join(&name)).map_err(|e| Error::Image(e.to_string()))?;
        names.push(name);
    }
    let n = names.len();
    Ok((names, vec![0; n]))
}

/// Output directory paths of a manifest's frames.
pub fn frame_files(out: &Path, m: &AnimateManifest) -> Vec<PathBuf> {
    m.frames.iter().map(|f| out.join(f)).collect()
}
