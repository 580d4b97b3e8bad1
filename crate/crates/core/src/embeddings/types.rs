use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::CANONICAL_FPS;
use crate::nn::{Linear, ParamSet, Tensor};

use super::array::{Array, Dtype};

/// Width of the raw speaker-verification embedding.
pub const SPEAKER_DIM: usize = 256;
/// Width after projection.
pub const PROJECTED_DIM: usize = 128;
/// Default content embedding width.
pub const DEFAULT_CONTENT_DIM: usize = 64;

/// Per-frame speech content features, `T x D`, at 62.5 frames per second.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentEmbedding {
    values: Vec<f64>,
    frames: usize,
    dim: usize,
}

impl ContentEmbedding {
    pub fn new(values: Vec<f64>, frames: usize, dim: usize) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Validation(format!("content embedding needs T>=1 and D>=1, got {frames}x{dim}")));
        }
        if values.len() != frames * dim {
            return Err(Error::Validation(format!("{frames}x{dim} content embedding given {} values", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("content embedding has non-finite values".into()));
        }
        Ok(Self { values, frames, dim })
    }

    pub fn frame_rate(&self) -> f64 {
        CANONICAL_FPS
    }

    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Frame `t`, clamped to the last frame past the end.
    pub fn frame_clamped(&self, t: usize) -> &[f64] {
        self.frame(t.min(self.frames - 1))
    }

    /// Copy with one value replaced.
    pub fn with_value(&self, t: usize, j: usize, v: f64) -> Self {
        let mut out = self.clone();
        out.values[t * self.dim + j] = v;
        out
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::Validation(format!("bad frame range {start}..{end} of {}", self.frames)));
        }
        Self::new(self.values[start * self.dim..end * self.dim].to_vec(), end - start, self.dim)
    }

    pub fn to_array(&self) -> Array {
        Array { dims: vec![self.frames, self.dim], dtype: Dtype::F32, data: self.values.clone() }
    }

    pub fn from_array(a: Array) -> Result<Self> {
        if a.dims.len() != 2 {
            return Err(Error::parse("rank", format!("content embedding needs rank 2, got {}", a.dims.len())));
        }
        Self::new(a.data, a.dims[0], a.dims[1]).map_err(|e| Error::parse("dims", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_array().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_array(Array::load(path)?)
    }
}

/// Speaker-verification embedding with its optional 128-d projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    raw: Vec<f64>,
    pub projected: Option<Vec<f64>>,
}

impl SpeakerEmbedding {
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.len() != SPEAKER_DIM {
            return Err(Error::parse("dims", format!("speaker embedding must have {SPEAKER_DIM} values, got {}", raw.len())));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("speaker embedding has non-finite values".into()));
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::Validation(format!("speaker embedding norm {norm:.6} is not 1 within 1e-3")));
        }
        Ok(Self { raw, projected: None })
    }

    /// Scales `raw` to unit length first.
    pub fn normalized(raw: Vec<f64>) -> Result<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Validation("cannot normalize a zero or non-finite vector".into()));
        }
        Self::new(raw.into_iter().map(|v| v / norm).collect())
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn to_array(&self) -> Array {
        Array { dims: vec![SPEAKER_DIM], dtype: Dtype::F32, data: self.raw.clone() }
    }

    pub fn from_array(a: Array) -> Result<Self> {
        if a.dims.len() != 1 {
            return Err(Error::parse("rank", format!("speaker embedding needs rank 1, got {}", a.dims.len())));
        }
        Self::new(a.data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_array().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_array(Array::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Content,
    Speaker,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Embedding {
    Content(ContentEmbedding),
    Speaker(SpeakerEmbedding),
}

pub fn load_embedding(path: impl AsRef<Path>, kind: EmbeddingKind) -> Result<Embedding> {
    let a = Array::load(path)?;
    Ok(match kind {
        EmbeddingKind::Content => Embedding::Content(ContentEmbedding::from_array(a)?),
        EmbeddingKind::Speaker => Embedding::Speaker(SpeakerEmbedding::from_array(a)?),
    })
}

/// Applies the trainable 256 -> 128 layer. The layer stores its weight as
/// `[256, 128]`, so this computes `raw * W + b`, i.e. `W^T raw + b`.
pub fn project_speaker(s: &SpeakerEmbedding, ps: &ParamSet, layer: &Linear) -> Result<Vec<f64>> {
    let w = ps.get(layer.w);
    let b = ps.get(layer.b);
    if w.shape() != [SPEAKER_DIM, PROJECTED_DIM] || b.len() != PROJECTED_DIM {
        return Err(Error::Config(format!("projection weight has shape {:?}", w.shape())));
    }
    let x = Tensor::new(vec![1, SPEAKER_DIM], s.raw.clone());
    let mut y = crate::nn::matmul(&x, w).into_data();
    for (v, bb) in y.iter_mut().zip(b.data()) {
        *v += bb;
    }
    Ok(y)
}

/// Projects and stores the result on the embedding.
pub fn attach_projection(s: &mut SpeakerEmbedding, ps: &ParamSet, layer: &Linear) -> Result<()> {
    s.projected = Some(project_speaker(s, ps, layer)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(seed: u64) -> SpeakerEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpeakerEmbedding::normalized((0..SPEAKER_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn layer(seed: u64) -> (ParamSet, Linear) {
        let mut ps = ParamSet::new();
        let l = Linear::new(&mut ps, "proj", SPEAKER_DIM, PROJECTED_DIM, &mut ChaCha8Rng::seed_from_u64(seed));
        (ps, l)
    }

    #[test]
    fn content_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.arr");
        let vals: Vec<f64> = (0..640).map(|i| ((i as f64) * 0.01).sin() as f32 as f64).collect();
        let a = ContentEmbedding::new(vals, 10, 64).unwrap();
        a.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let Embedding::Content(b) = load_embedding(&p, EmbeddingKind::Content).unwrap() else { panic!() };
        assert_eq!((b.len(), b.dim()), (10, 64));
        b.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn speaker_wrong_dimension_rejected() {
        let a = Array::new(vec![255], Dtype::F32, vec![0.0625; 255]).unwrap();
        let err = SpeakerEmbedding::from_array(a).unwrap_err();
        assert!(err.to_string().contains("dims"));
        assert!(SpeakerEmbedding::new(vec![0.5; SPEAKER_DIM]).is_err());
    }

    #[test]
    fn zero_projection_gives_zero() {
        let (mut ps, l) = layer(1);
        ps.fill(0.0);
        assert!(project_speaker(&unit(2), &ps, &l).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_slice_projection() {
        let (mut ps, l) = layer(1);
        ps.fill(0.0);
        for i in 0..PROJECTED_DIM {
            ps.get_mut(l.w).data_mut()[i * PROJECTED_DIM + i] = 1.0;
        }
        let s = unit(3);
        assert_eq!(project_speaker(&s, &ps, &l).unwrap(), s.raw()[..PROJECTED_DIM].to_vec());
    }

    #[test]
    fn projection_matches_matvec_oracle() {
        let (ps, l) = layer(4);
        let s = unit(5);
        let got = project_speaker(&s, &ps, &l).unwrap();
        let w = ps.get(l.w).data();
        for (j, g) in got.iter().enumerate() {
            let mut acc = ps.get(l.b).data()[j];
            for i in 0..SPEAKER_DIM {
                acc += w[i * PROJECTED_DIM + j] * s.raw()[i];
            }
            assert!((acc - g).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_is_linear_without_bias() {
        let (mut ps, l) = layer(6);
        ps.get_mut(l.b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let (s1, s2) = (unit(7), unit(8));
        let (a, b) = (0.3, -1.7);
        let mix: Vec<f64> = s1.raw().iter().zip(s2.raw()).map(|(x, y)| a * x + b * y).collect();
        // the mixture is not unit length; evaluate the layer directly
        let x = Tensor::new(vec![1, SPEAKER_DIM], mix);
        let lhs = crate::nn::matmul(&x, ps.get(l.w));
        let p1 = project_speaker(&s1, &ps, &l).unwrap();
        let p2 = project_speaker(&s2, &ps, &l).unwrap();
        for (j, v) in lhs.data().iter().enumerate() {
            assert!((v - (a * p1[j] + b * p2[j])).abs() < 1e-12);
        }
    }
}
