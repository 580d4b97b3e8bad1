//! Speech-content animation: an LSTM reads a short window of content
//! embedding frames, and an MLP turns its final state plus the static face
//! into per-frame landmark displacements.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::ContentEmbedding;
use crate::error::{Error, Result};
use crate::geometry::{laplacian_coords, LandmarkFrame, LandmarkSequence, PartTopology, CANONICAL_FPS, FLAT_DIM, N_LANDMARKS};
use crate::nn::{Activation, Graph, Lstm, Mlp, ParamSet, Tensor, Var};

/// Number of windows evaluated per graph during inference.
const INFER_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Content window: frame `t` sees `A[t..=t+tau]`.
    pub tau: usize,
    /// Speaker-branch window length.
    pub tau_prime: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { tau: 18, tau_prime: 256 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 || self.tau_prime < self.tau {
            return Err(Error::Config(format!(
                "window sizes need tau >= 1 and tau_prime >= tau, got tau={} tau_prime={}",
                self.tau, self.tau_prime
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentConfig {
    pub content_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Hidden MLP widths; a final 204-wide layer is always appended.
    pub mlp_hidden: Vec<usize>,
    pub activation: Activation,
    pub window: WindowConfig,
}

impl ContentConfig {
    /// Full-size network: 3x256 LSTM, 512/256/204 MLP.
    pub fn full(content_dim: usize) -> Self {
        Self {
            content_dim,
            lstm_hidden: 256,
            lstm_layers: 3,
            mlp_hidden: vec![512, 256],
            activation: Activation::Relu,
            window: WindowConfig::default(),
        }
    }

    /// Reduced widths for CPU-scale experiments.
    pub fn desk(content_dim: usize) -> Self {
        Self {
            content_dim,
            lstm_hidden: 32,
            lstm_layers: 3,
            mlp_hidden: vec![128, 128],
            activation: Activation::Relu,
            window: WindowConfig { tau: 18, tau_prime: 64 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.content_dim == 0 || self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return Err(Error::Config("content network sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ContentModel {
    pub cfg: ContentConfig,
    pub params: ParamSet,
    lstm: Lstm,
    mlp: Mlp,
}

/// Output of [`ContentModel::forward`].
#[derive(Debug, Clone)]
pub struct ContentOutput {
    pub landmarks: LandmarkSequence,
    /// Final LSTM state per frame, `[T, hidden]`.
    pub codes: Tensor,
}

/// LSTM inputs for a batch of windows. Row `r` of step `k` holds
/// `A[min(start_r + k, last_r)]`, where `last_r` is the final frame that
/// window may read (edge replication beyond it).
pub(crate) fn window_steps(a: &ContentEmbedding, rows: &[(usize, usize)], tau: usize) -> Vec<Tensor> {
    let d = a.dim();
    (0..=tau)
        .map(|k| {
            let mut data = Vec::with_capacity(rows.len() * d);
            for &(start, last) in rows {
                data.extend_from_slice(a.frame_clamped((start + k).min(last)));
            }
            Tensor::new(vec![rows.len(), d], data)
        })
        .collect()
}

/// `[204, 204]` operator mapping a flattened frame to its flattened
/// Laplacian coordinates.
pub fn laplacian_operator(topo: &PartTopology) -> Result<Tensor> {
    let l = topo.laplacian_matrix()?;
    let mut k = vec![0.0; FLAT_DIM * FLAT_DIM];
    for i in 0..N_LANDMARKS {
        for j in 0..N_LANDMARKS {
            let v = l[i * N_LANDMARKS + j];
            if v != 0.0 {
                for c in 0..3 {
                    k[(3 * i + c) * FLAT_DIM + 3 * j + c] = v;
                }
            }
        }
    }
    Ok(Tensor::new(vec![FLAT_DIM, FLAT_DIM], k))
}

/// Position plus weighted Laplacian squared error inside a graph.
/// `pred` and `target` are `[T, 204]`; `lap` is [`laplacian_operator`].
pub fn landmark_loss_graph(g: &mut Graph, pred: Var, target: Var, lap: Var, lambda: f64) -> Var {
    let diff = g.sub(pred, target);
    let sq = g.square(diff);
    let pos = g.sum(sq);
    if lambda == 0.0 {
        return pos;
    }
    let ld = g.matmul_nt(diff, lap);
    let lsq = g.square(ld);
    let lap_sum = g.sum(lsq);
    let lap_w = g.scale(lap_sum, lambda);
    g.add(pos, lap_w)
}

fn check_lengths(pred: &LandmarkSequence, reference: &LandmarkSequence) -> Result<()> {
    if pred.len() != reference.len() {
        return Err(Error::Validation(format!(
            "prediction has {} frames, reference {}",
            pred.len(),
            reference.len()
        )));
    }
    Ok(())
}

/// Sum over frames and landmarks of squared position error plus `lambda`
/// times squared Laplacian-coordinate error.
pub fn content_loss(pred: &LandmarkSequence, reference: &LandmarkSequence, topo: &PartTopology, lambda: f64) -> Result<f64> {
    check_lengths(pred, reference)?;
    let mut total = 0.0;
    for (p, r) in pred.frames().iter().zip(reference.frames()) {
        let lp = laplacian_coords(p, topo)?;
        let lr = laplacian_coords(r, topo)?;
        for i in 0..N_LANDMARKS {
            total += (p.point(i) - r.point(i)).norm_squared() + lambda * (lp[i] - lr[i]).norm_squared();
        }
    }
    Ok(total)
}

impl ContentModel {
    pub fn new(cfg: ContentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let lstm = Lstm::new(&mut params, "lstm_c", cfg.content_dim, cfg.lstm_hidden, cfg.lstm_layers, &mut rng);
        let mut sizes = cfg.mlp_hidden.clone();
        sizes.push(FLAT_DIM);
        let mlp = Mlp::new(&mut params, "mlp_c", cfg.lstm_hidden + FLAT_DIM, &sizes, cfg.activation, &mut rng);
        Ok(Self { cfg, params, lstm, mlp })
    }

    /// Rebuilds the network for `cfg` and installs `params`, which must
    /// match it name for name and shape for shape.
    pub fn with_params(cfg: ContentConfig, params: ParamSet) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        if params.len() != m.params.len() || m.params.copy_matching(&params) != m.params.len() {
            return Err(Error::Config("content parameters do not match the configured network".into()));
        }
        Ok(m)
    }

    fn check_input(&self, a: &ContentEmbedding) -> Result<()> {
        if a.dim() != self.cfg.content_dim {
            return Err(Error::Config(format!(
                "content embedding has D={}, network expects {}",
                a.dim(),
                self.cfg.content_dim
            )));
        }
        Ok(())
    }

    /// Builds predictions for frames `frames` of `a`. Returns the predicted
    /// landmarks `[n, 204]` and the LSTM codes `[n, hidden]`.
    pub fn build(&self, g: &mut Graph, a: &ContentEmbedding, q: &LandmarkFrame, frames: &[usize]) -> (Var, Var) {
        let last = a.len() - 1;
        let rows: Vec<(usize, usize)> = frames.iter().map(|&t| (t, last)).collect();
        let steps: Vec<Var> = window_steps(a, &rows, self.cfg.window.tau).into_iter().map(|t| g.constant(t)).collect();
        let codes = self.lstm.forward_last(g, &steps);
        let qv = g.constant(Tensor::new(vec![1, FLAT_DIM], q.to_flat()));
        let qrep = g.repeat_rows(qv, frames.len());
        let input = g.concat_cols(&[codes, qrep]);
        let delta = self.mlp.forward(g, input);
        (g.add(qrep, delta), codes)
    }

    pub fn forward(&self, a: &ContentEmbedding, q: &LandmarkFrame) -> Result<ContentOutput> {
        self.check_input(a)?;
        let t = a.len();
        let mut flat = Vec::with_capacity(t * FLAT_DIM);
        let mut codes = Vec::with_capacity(t * self.cfg.lstm_hidden);
        let all: Vec<usize> = (0..t).collect();
        for chunk in all.chunks(INFER_CHUNK) {
            let mut g = Graph::new(&self.params);
            let (p, c) = self.build(&mut g, a, q, chunk);
            flat.extend_from_slice(g.value(p).data());
            codes.extend_from_slice(g.value(c).data());
        }
        Ok(ContentOutput {
            landmarks: LandmarkSequence::from_flat(&flat, CANONICAL_FPS)?,
            codes: Tensor::new(vec![t, self.cfg.lstm_hidden], codes),
        })
    }
}
