//! Clips, corpora on disk, and train/validation/test splits.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::embeddings::{ContentEmbedding, SpeakerEmbedding, SynthCorpus};
use crate::error::{Error, Result};
use crate::geometry::{
    load_sequence, register_to_template, resample, save_sequence, LandmarkFrame, LandmarkSequence, RegistrationMode,
    CANONICAL_FPS,
};

const MANIFEST_HEADER: &str = "clip_id\tspeaker_id\tcontent_path\tspeaker_path\tlandmarks_path";

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: String,
    pub speaker_id: String,
    pub content: ContentEmbedding,
    pub speaker: SpeakerEmbedding,
    /// Observed landmarks including head motion.
    pub landmarks: LandmarkSequence,
    /// Landmarks with head motion factored out.
    pub registered: LandmarkSequence,
    /// Static face: the first registered frame.
    pub q: LandmarkFrame,
}

impl Clip {
    pub fn new(
        id: impl Into<String>,
        speaker_id: impl Into<String>,
        content: ContentEmbedding,
        speaker: SpeakerEmbedding,
        landmarks: LandmarkSequence,
        template: &LandmarkFrame,
    ) -> Result<Self> {
        let id = id.into();
        let mut landmarks = landmarks;
        if landmarks.fps() != CANONICAL_FPS {
            landmarks = resample(&landmarks, CANONICAL_FPS)?;
        }
        let mut content = content;
        let n = content.len().min(landmarks.len());
        if content.len() != landmarks.len() {
            log::warn!("clip {id}: {} content frames vs {} landmark frames, using {n}", content.len(), landmarks.len());
            content = content.slice(0, n)?;
            landmarks = LandmarkSequence::new(landmarks.frames()[..n].to_vec(), CANONICAL_FPS)?;
        }
        let registered = register_to_template(&landmarks, template, RegistrationMode::PerFrame)?.sequence;
        let q = registered.frame(0).clone();
        Ok(Self { id, speaker_id: speaker_id.into(), content, speaker, landmarks, registered, q })
    }

    pub fn len(&self) -> usize {
        self.content.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub clips: Vec<Clip>,
    pub template: LandmarkFrame,
}

/// Clip indices for each part of a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn new(clips: Vec<Clip>, template: LandmarkFrame) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Validation("dataset has no clips".into()));
        }
        let d = clips[0].content.dim();
        if let Some(c) = clips.iter().find(|c| c.content.dim() != d) {
            return Err(Error::Validation(format!("clip {} has content width {}, expected {d}", c.id, c.content.dim())));
        }
        Ok(Self { clips, template })
    }

    pub fn from_synth(corpus: &SynthCorpus) -> Result<Self> {
        let template = crate::geometry::standard_template();
        let clips = corpus
            .clips
            .iter()
            .map(|c| {
                Clip::new(
                    c.clip_id.clone(),
                    format!("spk{:02}", c.speaker_id),
                    c.content.clone(),
                    c.speaker.clone(),
                    c.landmarks.clone(),
                    &template,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(clips, template)
    }

    pub fn content_dim(&self) -> usize {
        self.clips[0].content.dim()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { clips: idx.iter().map(|&i| self.clips[i].clone()).collect(), template: self.template.clone() }
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.clips.iter().map(|c| c.speaker_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// SHA-256 over every clip's identifiers and payloads.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.clips {
            h.update(c.id.as_bytes());
            h.update([0]);
            h.update(c.speaker_id.as_bytes());
            h.update([0]);
            for v in c.content.values() {
                h.update(v.to_le_bytes());
            }
            for v in c.speaker.raw() {
                h.update(v.to_le_bytes());
            }
            for v in c.landmarks.to_flat() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Seeded 60/20/20 split, made per speaker so every part sees every
    /// speaker when it has enough clips.
    pub fn split(&self, seed: u64) -> Split {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut split = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
        for spk in self.speakers() {
            let mut idx: Vec<usize> = (0..self.clips.len()).filter(|&i| self.clips[i].speaker_id == spk).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rand::Rng::random_range(&mut rng, 0..=i));
            }
            let n = idx.len();
            let n_test = ((n as f64) * 0.2).round() as usize;
            let n_val = ((n as f64) * 0.2).round() as usize;
            let n_train = n.saturating_sub(n_test + n_val).max(1.min(n));
            let n_val = n_val.min(n - n_train);
            split.train.extend_from_slice(&idx[..n_train]);
            split.val.extend_from_slice(&idx[n_train..n_train + n_val]);
            split.test.extend_from_slice(&idx[n_train + n_val..]);
        }
        split.train.sort_unstable();
        split.val.sort_unstable();
        split.test.sort_unstable();
        split
    }

    /// Writes every clip and a tab-separated manifest into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        for c in &self.clips {
            let (cp, sp, lp) = (format!("{}.content.arr", c.id), format!("{}.speaker.arr", c.id), format!("{}.landmarks.txt", c.id));
            c.content.save(dir.join(&cp))?;
            c.speaker.save(dir.join(&sp))?;
            save_sequence(&c.landmarks, dir.join(&lp))?;
            let _ = writeln!(manifest, "{}\t{}\t{cp}\t{sp}\t{lp}", c.id, c.speaker_id);
        }
        let path = dir.join("manifest.tsv");
        std::fs::write(&path, manifest)?;
        Ok(path)
    }

    /// Loads a manifest; relative paths resolve against its directory.
    pub fn load_manifest(path: impl AsRef<Path>, template: &LandmarkFrame) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(path)?;
        let mut clips = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || (lineno == 0 && line.starts_with("clip_id")) {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::parse("manifest", format!("line {}: expected 5 tab-separated columns", lineno + 1)));
            }
            let resolve = |p: &str| {
                let p = Path::new(p);
                if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
            };
            let content = ContentEmbedding::load(resolve(cols[2]))?;
            let speaker = SpeakerEmbedding::load(resolve(cols[3]))?;
            let landmarks = load_sequence(resolve(cols[4]))?;
            clips.push(Clip::new(cols[0], cols[1], content, speaker, landmarks, template)?);
        }
        Self::new(clips, template.clone())
    }
}
