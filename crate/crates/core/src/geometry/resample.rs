use super::landmarks::{LandmarkFrame, LandmarkSequence};
use super::GeometryError;

/// Linear-in-time resampling of every landmark.
///
/// Output frame `k` sits at time `k / target_fps`; the output covers the
/// input duration rounded down to a whole target period, and sample times
/// past the last input frame clamp to it.
pub fn resample(seq: &LandmarkSequence, target_fps: f64) -> Result<LandmarkSequence, GeometryError> {
    if !(target_fps.is_finite() && target_fps > 0.0) {
        return Err(GeometryError::Validation(format!("target fps must be positive, got {target_fps}")));
    }
    if target_fps == seq.fps() {
        return Ok(seq.clone());
    }
    let n = seq.len();
    let count = ((n - 1) as f64 * target_fps / seq.fps() + 1e-9).floor() as usize + 1;
    let frames = (0..count)
        .map(|k| {
            let pos = k as f64 * seq.fps() / target_fps;
            let i0 = (pos.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let w = (pos - i0 as f64).clamp(0.0, 1.0);
            let (a, b) = (seq.frame(i0), seq.frame(i1));
            if w == 0.0 || i0 == i1 {
                return Ok(a.clone());
            }
            a.map(|i, p| p + (b.point(i) - p) * w)
        })
        .collect::<Result<Vec<LandmarkFrame>, _>>()?;
    LandmarkSequence::new(frames, target_fps)
}
