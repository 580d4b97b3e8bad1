//! Procedural talking-head corpus.
//!
//! Each clip follows a random "phoneme" script. The script yields a mouth
//! opening and lip width per frame plus two prosody curves. The content
//! embedding is a fixed random linear encoding of those signals, identical for
//! every speaker. Speakers differ only in how prosody turns into head motion
//! and brow movement, so lips are speaker independent while pose is not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_pose_to_frame, standard_template, HeadPose, LandmarkFrame, LandmarkSequence, Point3, CANONICAL_FPS,
};

use super::types::{ContentEmbedding, SpeakerEmbedding, DEFAULT_CONTENT_DIM, SPEAKER_DIM};

const N_PHONEMES: usize = 8;
const FEATURES: usize = 4 + N_PHONEMES;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub clips_per_speaker: usize,
    /// Frames per clip at 62.5 fps.
    pub n_frames: usize,
    pub content_dim: usize,
    /// Clips shorter than this are rejected.
    pub tau_prime: usize,
    /// Scales every non-rigid deformation (lips, jaw, brows).
    pub expression_gain: f64,
    /// Scales every head-pose component.
    pub sway_gain: f64,
    /// Spread of per-clip speaker embeddings around the speaker's center.
    pub embedding_jitter: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 2,
            clips_per_speaker: 5,
            n_frames: 256,
            content_dim: DEFAULT_CONTENT_DIM,
            tau_prime: 64,
            expression_gain: 1.0,
            sway_gain: 1.0,
            embedding_jitter: 0.1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.clips_per_speaker == 0 {
            return Err(Error::Validation("corpus needs at least one speaker and one clip".into()));
        }
        if self.content_dim == 0 {
            return Err(Error::Validation("content_dim must be positive".into()));
        }
        if self.n_frames < self.tau_prime || self.n_frames == 0 {
            return Err(Error::Validation(format!(
                "clip length {} frames ({:.3} s) is shorter than the speaker window of {} frames",
                self.n_frames,
                self.n_frames as f64 / CANONICAL_FPS,
                self.tau_prime
            )));
        }
        Ok(())
    }
}

/// Head-motion and expression habits of one synthetic speaker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStyle {
    /// Resting head turn, degrees.
    pub yaw_offset: f64,
    pub yaw_amp: f64,
    pub pitch_offset: f64,
    pub pitch_amp: f64,
    pub roll_amp: f64,
    /// Weight of the slow prosody curve versus the fast one in yaw.
    pub band_mix: f64,
    pub brow_gain: f64,
    /// Lateral shift amplitude, in face widths.
    pub shift_amp: f64,
}

/// Speaker-independent signals of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentScript {
    pub phonemes: Vec<usize>,
    pub open: Vec<f64>,
    pub width: Vec<f64>,
    pub slow: Vec<f64>,
    pub fast: Vec<f64>,
}

impl ContentScript {
    pub fn random(n_frames: usize, rng: &mut impl Rng) -> Self {
        let targets: Vec<(f64, f64)> = std::iter::once((0.0, 0.0))
            .chain((1..N_PHONEMES).map(|k| {
                let open = 0.15 + 0.85 * (k as f64 / (N_PHONEMES - 1) as f64);
                let width = if k % 2 == 0 { 0.8 } else { -0.6 } * (1.0 - 0.5 * open);
                (open, width)
            }))
            .collect();
        let mut phonemes = Vec::with_capacity(n_frames);
        // a short silence so every clip starts from a closed mouth
        phonemes.extend(std::iter::repeat_n(0, 4.min(n_frames)));
        while phonemes.len() < n_frames {
            let p = if rng.random_bool(0.15) { 0 } else { rng.random_range(1..N_PHONEMES) };
            let len = rng.random_range(5..15);
            for _ in 0..len {
                if phonemes.len() < n_frames {
                    phonemes.push(p);
                }
            }
        }
        let (mut open, mut width) = (Vec::with_capacity(n_frames), Vec::with_capacity(n_frames));
        let (mut o, mut w) = (0.0, 0.0);
        for &p in &phonemes {
            o += 0.35 * (targets[p].0 - o);
            w += 0.35 * (targets[p].1 - w);
            open.push(o);
            width.push(w);
        }
        let curve = |lo: f64, hi: f64, rng: &mut dyn rand::RngCore| {
            let f1 = rng.random_range(lo..hi);
            let f2 = rng.random_range(lo..hi) * 1.7;
            let (a, b) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
            (0..n_frames)
                .map(|t| {
                    let s = t as f64 / CANONICAL_FPS * std::f64::consts::TAU;
                    0.7 * (f1 * s + a).sin() + 0.3 * (f2 * s + b).sin()
                })
                .collect::<Vec<f64>>()
        };
        let slow = curve(0.3, 0.7, rng);
        let fast = curve(1.5, 2.5, rng);
        Self { phonemes, open, width, slow, fast }
    }

    pub fn len(&self) -> usize {
        self.open.len()
    }

    pub fn is_empty(&self) -> bool {
        self.open.is_empty()
    }

    fn features(&self, t: usize) -> [f64; FEATURES] {
        let mut f = [0.0; FEATURES];
        f[0] = self.open[t];
        f[1] = self.width[t];
        f[2] = self.slow[t];
        f[3] = self.fast[t];
        f[4 + self.phonemes[t]] = 1.0;
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub clip_id: String,
    pub speaker_id: usize,
    pub content: ContentEmbedding,
    pub speaker: SpeakerEmbedding,
    /// Landmarks with head motion, as a tracker would observe them.
    pub landmarks: LandmarkSequence,
    /// The same frames before head motion was applied.
    pub registered: LandmarkSequence,
    pub poses: Vec<HeadPose>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub seed: u64,
    pub styles: Vec<SpeakerStyle>,
    pub speaker_centers: Vec<Vec<f64>>,
    pub clips: Vec<SynthClip>,
    /// Fixed `content_dim x FEATURES` encoder.
    encoder: Vec<f64>,
}

/// Stratified draw so that a handful of speakers still cover the range.
fn stratified(n: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut slots: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        slots.swap(i, rng.random_range(0..=i));
    }
    slots.iter().map(|&k| lo + (hi - lo) * (k as f64 + rng.random_range(0.2..0.8)) / n as f64).collect()
}

fn gaussian_vec(n: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

pub fn synthesize_corpus(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n_speakers;
    let yaw_offset = stratified(n, -10.0, 10.0, &mut rng);
    let yaw_amp = stratified(n, 3.0, 14.0, &mut rng);
    let pitch_offset = stratified(n, -5.0, 5.0, &mut rng);
    let pitch_amp = stratified(n, 2.0, 8.0, &mut rng);
    let roll_amp = stratified(n, 0.5, 4.0, &mut rng);
    let band_mix = stratified(n, 0.0, 1.0, &mut rng);
    let brow_gain = stratified(n, 0.0, 1.0, &mut rng);
    let shift_amp = stratified(n, 0.0, 0.05, &mut rng);
    let styles: Vec<SpeakerStyle> = (0..n)
        .map(|k| SpeakerStyle {
            yaw_offset: yaw_offset[k],
            yaw_amp: yaw_amp[k],
            pitch_offset: pitch_offset[k],
            pitch_amp: pitch_amp[k],
            roll_amp: roll_amp[k],
            band_mix: band_mix[k],
            brow_gain: brow_gain[k],
            shift_amp: shift_amp[k],
        })
        .collect();
    let speaker_centers: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v = gaussian_vec(SPEAKER_DIM, 1.0, &mut rng);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let encoder = gaussian_vec(spec.content_dim * FEATURES, 1.0 / (FEATURES as f64).sqrt(), &mut rng);

    let mut corpus = SynthCorpus { spec: *spec, seed, styles, speaker_centers, clips: Vec::new(), encoder };
    let jobs: Vec<(usize, usize)> =
        (0..n).flat_map(|s| (0..spec.clips_per_speaker).map(move |c| (s, c))).collect();
    let clips = jobs
        .par_iter()
        .enumerate()
        .map(|(idx, &(s, c))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 + idx as u64);
            let script = ContentScript::random(spec.n_frames, &mut rng);
            let jitter = gaussian_vec(SPEAKER_DIM, spec.embedding_jitter / (SPEAKER_DIM as f64).sqrt(), &mut rng);
            let raw: Vec<f64> = corpus.speaker_centers[s].iter().zip(&jitter).map(|(a, b)| a + b).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            // stored as f32 so files reproduce the in-memory corpus exactly
            let speaker = SpeakerEmbedding::new(raw.iter().map(|v| (v / norm) as f32 as f64).collect())?;
            let (landmarks, registered, poses) = corpus.animate(&script, &corpus.styles[s])?;
            Ok(SynthClip {
                clip_id: format!("s{s:02}_c{c:03}"),
                speaker_id: s,
                content: corpus.encode(&script)?,
                speaker,
                landmarks,
                registered,
                poses,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    corpus.clips = clips;
    Ok(corpus)
}

impl SynthCorpus {
    /// Content embedding of a script. Values are rounded to `f32` so that a
    /// saved and reloaded corpus is identical to the in-memory one.
    pub fn encode(&self, script: &ContentScript) -> Result<ContentEmbedding> {
        let d = self.spec.content_dim;
        let mut values = Vec::with_capacity(script.len() * d);
        for t in 0..script.len() {
            let f = script.features(t);
            for j in 0..d {
                let row = &self.encoder[j * FEATURES..(j + 1) * FEATURES];
                let v: f64 = row.iter().zip(&f).map(|(a, b)| a * b).sum();
                values.push(v as f32 as f64);
            }
        }
        ContentEmbedding::new(values, script.len(), d)
    }

    /// Ground-truth landmarks for `script` spoken with `style`: observed
    /// frames, head-motion-free frames, and the per-frame poses.
    pub fn animate(
        &self,
        script: &ContentScript,
        style: &SpeakerStyle,
    ) -> Result<(LandmarkSequence, LandmarkSequence, Vec<HeadPose>)> {
        let template = standard_template();
        let fw = template.face_width();
        let (ge, gs) = (self.spec.expression_gain, self.spec.sway_gain);
        let mut observed = Vec::with_capacity(script.len());
        let mut registered = Vec::with_capacity(script.len());
        let mut poses = Vec::with_capacity(script.len());
        for t in 0..script.len() {
            let brow = -0.06 * style.brow_gain * (0.5 * script.slow[t] + 0.5 * script.fast[t]);
            let frame = deform(&template, ge * script.open[t], ge * script.width[t], ge * brow)?;
            let sway = style.band_mix * script.slow[t] + (1.0 - style.band_mix) * script.fast[t];
            let nod = (1.0 - style.band_mix) * script.slow[t] + style.band_mix * script.fast[t];
            let pose = HeadPose::new(
                gs * (style.yaw_offset + style.yaw_amp * sway),
                gs * (style.pitch_offset + style.pitch_amp * nod),
                gs * style.roll_amp * script.slow[t],
                Point3::new(gs * style.shift_amp * sway, gs * 0.5 * style.shift_amp * nod, 0.0),
            )?;
            observed.push(apply_pose_to_frame(&frame, &pose, fw)?);
            registered.push(frame);
            poses.push(pose);
        }
        Ok((
            LandmarkSequence::new(observed, CANONICAL_FPS)?,
            LandmarkSequence::new(registered, CANONICAL_FPS)?,
            poses,
        ))
    }
}

/// Opens the jaw and mouth, stretches the lips and lifts the brows. Stable
/// landmarks (jaw ends, nose, eye corners) never move.
fn deform(template: &LandmarkFrame, open: f64, width: f64, brow: f64) -> Result<LandmarkFrame> {
    let mouth = Point3::new(0.0, 0.5, 0.0);
    Ok(template.map(|i, p| {
        let mut q = *p;
        match i {
            1..=15 => q.y += 0.2 * open * (std::f64::consts::PI * i as f64 / 16.0).sin(),
            17..=26 => q.y += brow,
            48..=67 => {
                let ry = if i < 60 { 0.15 } else { 0.05 };
                let oy = (p.y - mouth.y) / ry;
                q.y += open * (0.12 + 0.13 * oy);
                q.x += 0.2 * width * (p.x - mouth.x);
            }
            _ => {}
        }
        q
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{register_to_template, RegistrationMode, STABLE_INDICES};

    fn small() -> SynthSpec {
        SynthSpec { n_speakers: 2, clips_per_speaker: 2, n_frames: 80, content_dim: 16, tau_prime: 32, ..Default::default() }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = synthesize_corpus(&small(), 7).unwrap();
        let b = synthesize_corpus(&small(), 7).unwrap();
        assert_eq!(a.clips, b.clips);
        let c = synthesize_corpus(&small(), 8).unwrap();
        assert_ne!(a.clips[0].content, c.clips[0].content);
    }

    #[test]
    fn short_duration_rejected() {
        let spec = SynthSpec { n_frames: 20, tau_prime: 32, ..small() };
        assert!(matches!(synthesize_corpus(&spec, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_gains_give_constant_template() {
        let spec = SynthSpec { expression_gain: 0.0, sway_gain: 0.0, ..small() };
        let c = synthesize_corpus(&spec, 3).unwrap();
        let t = standard_template();
        for clip in &c.clips {
            for f in clip.landmarks.frames() {
                for (p, q) in f.points().iter().zip(t.points()) {
                    assert!((p - q).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stable_points_do_not_deform() {
        let t = standard_template();
        let f = deform(&t, 1.0, 0.8, 0.1).unwrap();
        for &i in &STABLE_INDICES {
            assert_eq!(f.point(i), t.point(i));
        }
    }

    #[test]
    fn lips_independent_of_speaker_pose_is_not() {
        let c = synthesize_corpus(&small(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let script = ContentScript::random(80, &mut rng);
        let (obs0, _, poses0) = c.animate(&script, &c.styles[0]).unwrap();
        let (obs1, _, poses1) = c.animate(&script, &c.styles[1]).unwrap();
        let t = standard_template();
        let r0 = register_to_template(&obs0, &t, RegistrationMode::PerFrame).unwrap().sequence;
        let r1 = register_to_template(&obs1, &t, RegistrationMode::PerFrame).unwrap().sequence;
        for (a, b) in r0.frames().iter().zip(r1.frames()) {
            for i in (0..17).chain(48..68) {
                assert!((a.point(i) - b.point(i)).norm() < 1e-9);
            }
        }
        let rms = (poses0
            .iter()
            .zip(&poses1)
            .map(|(a, b)| (a.yaw - b.yaw).powi(2) + (a.pitch - b.pitch).powi(2) + (a.roll - b.roll).powi(2))
            .sum::<f64>()
            / poses0.len() as f64)
            .sqrt();
        assert!(rms > 0.0);
        assert_eq!(c.encode(&script).unwrap(), c.encode(&script).unwrap());
    }

    #[test]
    fn clip_embeddings_cluster_by_speaker() {
        let c = synthesize_corpus(&small(), 5).unwrap();
        let dot = |a: &SpeakerEmbedding, b: &SpeakerEmbedding| a.raw().iter().zip(b.raw()).map(|(x, y)| x * y).sum::<f64>();
        let same = dot(&c.clips[0].speaker, &c.clips[1].speaker);
        let other = dot(&c.clips[0].speaker, &c.clips[2].speaker);
        assert!(same > 0.9 && other < 0.5, "same {same} other {other}");
    }
}
