use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_head_pose, decompose_sequence, LandmarkSequence};

use super::{Clip, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// Any other clip of the same speaker.
    SameId,
    /// Any other clip.
    RandomId,
}

/// Puts the head-pose track of another clip from `pool` onto the registered
/// landmarks of `test`. A shorter track holds its last pose; a longer one is
/// cut.
pub fn retrieval_baseline(test: &Clip, pool: &Dataset, mode: RetrievalMode, seed: u64) -> Result<LandmarkSequence> {
    let eligible: Vec<&Clip> = pool
        .clips
        .iter()
        .filter(|c| c.id != test.id && (mode == RetrievalMode::RandomId || c.speaker_id == test.speaker_id))
        .collect();
    if eligible.is_empty() {
        return Err(Error::BaselineUnavailable(format!("no {mode:?} clip available for {}", test.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = eligible[rng.random_range(0..eligible.len())];
    let track = decompose_sequence(&source.landmarks, &pool.template)?;
    let poses: Vec<_> = (0..test.registered.len()).map(|t| track[t.min(track.len() - 1)]).collect();
    Ok(apply_head_pose(&test.registered, &poses)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{synthesize_corpus, SynthSpec};

    fn dataset() -> Dataset {
        let spec = SynthSpec { n_speakers: 2, clips_per_speaker: 2, n_frames: 24, content_dim: 8, tau_prime: 8, ..Default::default() };
        Dataset::from_synth(&synthesize_corpus(&spec, 9).unwrap()).unwrap()
    }

    #[test]
    fn single_candidate_track_is_copied() {
        let ds = dataset();
        let pool = ds.subset(&[0, 1]);
        let out = retrieval_baseline(&ds.clips[0], &pool, RetrievalMode::SameId, 5).unwrap();
        let want = decompose_sequence(&ds.clips[1].landmarks, &ds.template).unwrap();
        let got = decompose_sequence(&out, &ds.template).unwrap();
        for (a, b) in got.iter().zip(&want) {
            for (x, y) in a.angles().iter().zip(b.angles()) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
            assert!((a.translation - b.translation).norm() < 1e-6);
        }
    }

    #[test]
    fn same_id_ignores_other_speakers() {
        let ds = dataset();
        let pool = ds.subset(&[0, 2, 3]);
        assert_ne!(ds.clips[0].speaker_id, ds.clips[2].speaker_id);
        let err = retrieval_baseline(&ds.clips[0], &pool, RetrievalMode::SameId, 0).unwrap_err();
        assert!(matches!(err, Error::BaselineUnavailable(_)));
        assert!(retrieval_baseline(&ds.clips[0], &pool, RetrievalMode::RandomId, 0).is_ok());
    }

    #[test]
    fn deterministic_given_seed() {
        let ds = dataset();
        let a = retrieval_baseline(&ds.clips[0], &ds, RetrievalMode::RandomId, 11).unwrap();
        let b = retrieval_baseline(&ds.clips[0], &ds, RetrievalMode::RandomId, 11).unwrap();
        assert_eq!(a, b);
    }
}
