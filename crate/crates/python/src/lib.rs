//! Python bindings: landmark tracks, pose editing, metrics, corpus synthesis,
//! inference and rendering.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use talkhead::cli::{self, Mode, PipelineConfig};
use talkhead::embeddings::{synthesize_corpus, ContentEmbedding, SpeakerEmbedding, SynthSpec};
use talkhead::geometry::{self, LandmarkFrame, Point3, RegistrationMode, CANONICAL_FPS};
use talkhead::metrics::MetricReport;
use talkhead::content_branch::ContentConfig;
use talkhead::speaker_branch::SpeakerConfig;
use talkhead::training::{train_content as fit_content, train_speaker as fit_speaker, Dataset, LandmarkSource, TrainConfig};
use talkhead::Error;

fn py_err(e: impl Into<Error>) -> PyErr {
    let e = e.into();
    let msg = e.to_string();
    match e.exit_code() {
        2 => PyValueError::new_err(msg),
        4 => PyOSError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn frame_from(points: Vec<[f64; 3]>) -> PyResult<LandmarkFrame> {
    LandmarkFrame::new(points.into_iter().map(|p| Point3::new(p[0], p[1], p[2])).collect()).map_err(py_err)
}

fn frame_to(f: &LandmarkFrame) -> Vec<[f64; 3]> {
    f.points().iter().map(|p| [p.x, p.y, p.z]).collect()
}

/// A landmark track: `T` frames of 68 points in 3-D at a fixed frame rate.
#[pyclass(name = "LandmarkSequence", module = "talkhead_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySequence {
    inner: geometry::LandmarkSequence,
}

#[pymethods]
impl PySequence {
    #[new]
    #[pyo3(signature = (frames, fps = CANONICAL_FPS))]
    fn new(frames: Vec<Vec<[f64; 3]>>, fps: f64) -> PyResult<Self> {
        let frames = frames.into_iter().map(frame_from).collect::<PyResult<Vec<_>>>()?;
        Ok(Self { inner: geometry::LandmarkSequence::new(frames, fps).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: geometry::load_sequence(path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        geometry::save_sequence(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn fps(&self) -> f64 {
        self.inner.fps()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn frame(&self, t: usize) -> PyResult<Vec<[f64; 3]>> {
        if t >= self.inner.len() {
            return Err(pyo3::exceptions::PyIndexError::new_err(format!("frame {t} out of range")));
        }
        Ok(frame_to(self.inner.frame(t)))
    }

    fn to_list(&self) -> Vec<Vec<[f64; 3]>> {
        self.inner.frames().iter().map(frame_to).collect()
    }

    /// Per-frame `(yaw, pitch, roll)` in degrees relative to the standard template.
    fn head_poses(&self) -> PyResult<Vec<(f64, f64, f64)>> {
        let poses = geometry::decompose_sequence(&self.inner, &geometry::standard_template()).map_err(py_err)?;
        Ok(poses.iter().map(|p| (p.yaw, p.pitch, p.roll)).collect())
    }

    /// Rotates every frame about its stable centroid.
    #[pyo3(signature = (yaw = 0.0, pitch = 0.0, roll = 0.0))]
    fn edit_pose(&self, yaw: f64, pitch: f64, roll: f64) -> PyResult<Self> {
        Ok(Self { inner: cli::edit_pose(&self.inner, yaw, pitch, roll).map_err(py_err)? })
    }

    fn resample(&self, fps: f64) -> PyResult<Self> {
        Ok(Self { inner: geometry::resample(&self.inner, fps).map_err(py_err)? })
    }

    /// Per-frame affine registration onto the standard template.
    fn registered(&self) -> PyResult<Self> {
        let r = geometry::register_to_template(&self.inner, &geometry::standard_template(), RegistrationMode::PerFrame)
            .map_err(py_err)?;
        Ok(Self { inner: r.sequence })
    }

    fn __repr__(&self) -> String {
        format!("LandmarkSequence(frames={}, fps={})", self.inner.len(), self.inner.fps())
    }
}

#[pyfunction]
fn standard_template() -> Vec<[f64; 3]> {
    frame_to(&geometry::standard_template())
}

/// Triangle index triples of the Delaunay triangulation of 2-D points.
#[pyfunction]
fn triangulate(points: Vec<[f64; 2]>) -> PyResult<Vec<[usize; 3]>> {
    Ok(talkhead::renderer::triangulate(&points).map_err(py_err)?.triangles)
}

fn report_dict<'py>(py: Python<'py>, r: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in [
        ("d_ll", r.d_ll),
        ("d_vl", r.d_vl),
        ("d_a", r.d_a),
        ("d_l", r.d_l),
        ("d_v", r.d_v),
        ("d_rot", r.d_rot),
        ("d_pos", r.d_pos),
        ("lip_width", r.lip_width),
        ("mouth_area", r.mouth_area),
        ("face_width", r.face_width),
    ] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Lip and pose distances between a prediction and a reference track.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, pred: &PySequence, reference: &PySequence) -> PyResult<Bound<'py, PyDict>> {
    let template = geometry::standard_template();
    let topo = geometry::PartTopology::standard68();
    let lip = talkhead::metrics::lip_metrics(&pred.inner, &reference.inner, &topo).map_err(py_err)?;
    let pose = talkhead::metrics::pose_metrics(&pred.inner, &reference.inner, &template).map_err(py_err)?;
    report_dict(py, &MetricReport::new("", lip, pose))
}

/// Writes a procedural corpus and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, speakers = 2, clips = 3, frames = 256, content_dim = 16, seed = 0))]
fn synth_corpus(out: PathBuf, speakers: usize, clips: usize, frames: usize, content_dim: usize, seed: u64) -> PyResult<PathBuf> {
    let spec = SynthSpec { n_speakers: speakers, clips_per_speaker: clips, n_frames: frames, content_dim, ..SynthSpec::default() };
    let corpus = synthesize_corpus(&spec, seed).map_err(py_err)?;
    Dataset::from_synth(&corpus).and_then(|ds| ds.write(&out)).map_err(py_err)
}

fn train_cfg(steps: u64, batch_size: usize, lr: f64, seed: u64) -> PyResult<TrainConfig> {
    let cfg = TrainConfig { max_steps: steps, batch_size, learning_rate: lr, seed, ..TrainConfig::default() };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Trains the desk-size content branch on a whole corpus, writes the
/// checkpoint and returns the per-step losses.
#[pyfunction]
#[pyo3(signature = (manifest, out, steps = 200, batch_size = 32, lr = 1e-3, seed = 0))]
fn train_content(py: Python<'_>, manifest: PathBuf, out: PathBuf, steps: u64, batch_size: usize, lr: f64, seed: u64) -> PyResult<Vec<f64>> {
    let cfg = train_cfg(steps, batch_size, lr, seed)?;
    py.detach(|| {
        let ds = Dataset::load_manifest(&manifest, &geometry::standard_template())?;
        let outcome = fit_content(&ds, None, ContentConfig::desk(ds.content_dim()), cfg)?;
        outcome.checkpoint.save(&out)?;
        Ok::<_, Error>(outcome.losses)
    })
    .map_err(py_err)
}

/// Trains the desk-size speaker branch on top of a content checkpoint.
#[pyfunction]
#[pyo3(signature = (manifest, content_checkpoint, out, steps = 200, batch_size = 8, lr = 1e-3, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train_speaker(
    py: Python<'_>,
    manifest: PathBuf,
    content_checkpoint: PathBuf,
    out: PathBuf,
    steps: u64,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let cfg = train_cfg(steps, batch_size, lr, seed)?;
    py.detach(|| {
        let ds = Dataset::load_manifest(&manifest, &geometry::standard_template())?;
        let source = LandmarkSource::Content(cli::load_content_model(&content_checkpoint)?);
        let outcome = fit_speaker(&ds, None, source, SpeakerConfig::desk(ds.content_dim()), cfg)?;
        outcome.checkpoint.save(&out)?;
        Ok::<_, Error>(outcome.losses)
    })
    .map_err(py_err)
}

/// Predicted landmarks for one utterance, starting from the standard template.
#[pyfunction]
#[pyo3(signature = (content_checkpoint, content, speaker_checkpoint = None, speaker = None))]
fn predict(
    content_checkpoint: PathBuf,
    content: PathBuf,
    speaker_checkpoint: Option<PathBuf>,
    speaker: Option<PathBuf>,
) -> PyResult<PySequence> {
    let model = cli::load_content_model(content_checkpoint).map_err(py_err)?;
    let a = ContentEmbedding::load(content).map_err(py_err)?;
    let sp = match (speaker_checkpoint, speaker) {
        (Some(c), Some(s)) => Some((
            cli::load_speaker_model(c).map_err(py_err)?,
            SpeakerEmbedding::load(s).map_err(py_err)?,
        )),
        (None, None) => None,
        _ => return Err(PyValueError::new_err("speaker_checkpoint and speaker go together")),
    };
    let q = geometry::standard_template();
    let inner = cli::predict(&model, sp.as_ref().map(|(m, s)| (m, s)), &a, &q).map_err(py_err)?;
    Ok(PySequence { inner })
}

/// Runs the animation pipeline and returns the written frame file names.
#[pyfunction]
#[pyo3(signature = (
    content, content_checkpoint, out, speaker = None, speaker_checkpoint = None, portrait = None,
    portrait_landmarks = None, synthetic_size = 256, i2i_checkpoint = None, fps = CANONICAL_FPS,
    seed = 0, yaw = 0.0, pitch = 0.0, roll = 0.0,
))]
#[allow(clippy::too_many_arguments)]
fn animate(
    content: PathBuf,
    content_checkpoint: PathBuf,
    out: PathBuf,
    speaker: Option<PathBuf>,
    speaker_checkpoint: Option<PathBuf>,
    portrait: Option<PathBuf>,
    portrait_landmarks: Option<PathBuf>,
    synthetic_size: u32,
    i2i_checkpoint: Option<PathBuf>,
    fps: f64,
    seed: u64,
    yaw: f64,
    pitch: f64,
    roll: f64,
) -> PyResult<Vec<String>> {
    let mode = if i2i_checkpoint.is_some() { Mode::Translate } else { Mode::Warp };
    let cfg = PipelineConfig {
        portrait,
        portrait_landmarks,
        synthetic_size,
        content: Some(content),
        speaker,
        content_checkpoint: Some(content_checkpoint),
        speaker_checkpoint,
        i2i_checkpoint,
        template: None,
        out,
        mode,
        fps,
        seed,
        yaw,
        pitch,
        roll,
    };
    Ok(cli::animate(&cfg).map_err(py_err)?.frames)
}

#[pymodule]
fn talkhead_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySequence>()?;
    m.add_function(wrap_pyfunction!(standard_template, m)?)?;
    m.add_function(wrap_pyfunction!(triangulate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train_content, m)?)?;
    m.add_function(wrap_pyfunction!(train_speaker, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(animate, m)?)?;
    m.add("CANONICAL_FPS", CANONICAL_FPS)?;
    Ok(())
}
