//! Layered configuration: defaults, then a TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::CANONICAL_FPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Delaunay warp of the portrait.
    #[default]
    Warp,
    /// Landmark rasterization and image translation.
    Translate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub portrait: Option<PathBuf>,
    pub portrait_landmarks: Option<PathBuf>,
    /// Side of the built-in cartoon portrait used when no portrait is given.
    pub synthetic_size: u32,
    pub content: Option<PathBuf>,
    pub speaker: Option<PathBuf>,
    pub content_checkpoint: Option<PathBuf>,
    /// Without it the head stays still.
    pub speaker_checkpoint: Option<PathBuf>,
    pub i2i_checkpoint: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub out: PathBuf,
    pub mode: Mode,
    pub fps: f64,
    pub seed: u64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            portrait: None,
            portrait_landmarks: None,
            synthetic_size: 256,
            content: None,
            speaker: None,
            content_checkpoint: None,
            speaker_checkpoint: None,
            i2i_checkpoint: None,
            template: None,
            out: PathBuf::from("out"),
            mode: Mode::Warp,
            fps: CANONICAL_FPS,
            seed: 0,
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let files = [
            ("portrait", &self.portrait),
            ("portrait-landmarks", &self.portrait_landmarks),
            ("content", &self.content),
            ("speaker", &self.speaker),
            ("content-checkpoint", &self.content_checkpoint),
            ("speaker-checkpoint", &self.speaker_checkpoint),
            ("i2i-checkpoint", &self.i2i_checkpoint),
            ("template", &self.template),
        ];
        for (flag, p) in files {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::Config(format!("--{flag}: {} does not exist", p.display())));
                }
            }
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Config(format!("--fps must be positive, got {}", self.fps)));
        }
        for (flag, a) in [("yaw", self.yaw), ("pitch", self.pitch), ("roll", self.roll)] {
            if !(a > -180.0 && a <= 180.0) {
                return Err(Error::Config(format!("--{flag} {a} outside (-180, 180]")));
            }
        }
        Ok(())
    }
}

/// Overlays `over` onto `base`. Nulls in `over` mean "not given".
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (_, Value::Null) => {}
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

pub fn read_toml(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    let v: toml::Value = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    serde_json::to_value(v).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

/// `defaults`, overridden by `file[section]`, overridden by non-null `flags`.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Value>, section: &str, flags: Value) -> Result<T> {
    let mut v = serde_json::to_value(defaults).expect("defaults serialize");
    if let Some(f) = file {
        let part = if section.is_empty() { Some(f) } else { f.get(section) };
        if let Some(p) = part {
            merge(&mut v, p.clone());
        }
    }
    merge(&mut v, flags);
    serde_json::from_value(v).map_err(|e| Error::Config(format!("[{section}]: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file = json!({ "train": { "learning_rate": 0.5, "max_steps": 7 } });
        let flags = json!({ "max_steps": 9, "seed": null });
        let cfg: crate::training::TrainConfig = layered(&Default::default(), Some(&file), "train", flags).unwrap();
        assert_eq!(cfg.learning_rate, 0.5);
        assert_eq!(cfg.max_steps, 9);
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn unknown_mode_is_a_config_error() {
        let r: Result<PipelineConfig> = layered(&PipelineConfig::default(), None, "", json!({ "mode": "sketch" }));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn missing_file_names_the_flag() {
        let cfg = PipelineConfig { speaker: Some("/no/such/file".into()), ..Default::default() };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("--speaker"), "{msg}");
    }
}
