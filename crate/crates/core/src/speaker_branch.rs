//! Speaker-aware animation: a second LSTM over content windows feeds a
//! self-attention encoder together with the projected speaker embedding.
//! The attention output and the static face produce displacements on top of
//! the content-branch landmarks. A self-attention discriminator scores the
//! realism of each frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::content_branch::{landmark_loss_graph, window_steps, WindowConfig};
use crate::embeddings::{ContentEmbedding, SpeakerEmbedding, PROJECTED_DIM, SPEAKER_DIM};
use crate::error::{Error, Result};
use crate::geometry::{laplacian_coords, LandmarkFrame, LandmarkSequence, PartTopology, CANONICAL_FPS, FLAT_DIM, N_LANDMARKS};
use crate::nn::{Activation, AttentionConfig, AttentionEncoder, Graph, Linear, Lstm, Mlp, ParamId, ParamSet, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerConfig {
    pub content_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub attention: AttentionConfig,
    /// Hidden widths of the generator decoder; 204 is appended.
    pub mlp_hidden: Vec<usize>,
    /// Hidden widths of the discriminator head; 1 is appended.
    pub disc_hidden: Vec<usize>,
    pub activation: Activation,
    pub window: WindowConfig,
    /// Add sinusoidal position codes before the attention layers.
    pub position_encoding: bool,
}

impl SpeakerConfig {
    pub fn full(content_dim: usize) -> Self {
        Self {
            content_dim,
            lstm_hidden: 256,
            lstm_layers: 3,
            attention: AttentionConfig::default(),
            mlp_hidden: vec![512, 256],
            disc_hidden: vec![512, 256],
            activation: Activation::Relu,
            window: WindowConfig::default(),
            position_encoding: true,
        }
    }

    pub fn desk(content_dim: usize) -> Self {
        Self {
            content_dim,
            lstm_hidden: 32,
            lstm_layers: 2,
            attention: AttentionConfig::default(),
            mlp_hidden: vec![128, 128],
            disc_hidden: vec![64, 64],
            activation: Activation::Relu,
            window: WindowConfig { tau: 18, tau_prime: 64 },
            position_encoding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        let a = &self.attention;
        if a.heads == 0 || !a.d_model.is_multiple_of(a.heads) {
            return Err(Error::Config(format!("{} heads do not divide model width {}", a.heads, a.d_model)));
        }
        if self.content_dim == 0 || self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return Err(Error::Config("speaker network sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SpeakerModel {
    pub cfg: SpeakerConfig,
    pub params: ParamSet,
    proj: Linear,
    lstm: Lstm,
    attn_g: AttentionEncoder,
    mlp_g: Mlp,
    attn_d: AttentionEncoder,
    mlp_d: Mlp,
}

/// Graph handles produced by [`SpeakerModel::build_generator`].
pub struct GeneratorVars {
    /// Projected speaker embedding, `[1, 128]`.
    pub s128: Var,
    /// Per window: output landmarks `[tau', 204]`.
    pub y: Vec<Var>,
    /// Per window: LSTM codes `[tau', hidden]`.
    pub codes: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct SpeakerOutput {
    pub landmarks: LandmarkSequence,
    /// LSTM codes over the padded length, `[n_windows * tau', hidden]`.
    pub codes: Tensor,
}

impl SpeakerModel {
    pub fn new(cfg: SpeakerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let proj = Linear::new(&mut ps, "proj", SPEAKER_DIM, PROJECTED_DIM, &mut rng);
        let lstm = Lstm::new(&mut ps, "lstm_s", cfg.content_dim, cfg.lstm_hidden, cfg.lstm_layers, &mut rng);
        let mut attn_g = AttentionEncoder::new(&mut ps, "attn_s", cfg.lstm_hidden + PROJECTED_DIM, cfg.attention, &mut rng);
        attn_g.use_position = cfg.position_encoding;
        let mut sizes = cfg.mlp_hidden.clone();
        sizes.push(FLAT_DIM);
        let mlp_g = Mlp::new(&mut ps, "mlp_s", cfg.attention.d_model + FLAT_DIM, &sizes, cfg.activation, &mut rng);
        let mut attn_d =
            AttentionEncoder::new(&mut ps, "disc.attn", FLAT_DIM + cfg.lstm_hidden + PROJECTED_DIM, cfg.attention, &mut rng);
        attn_d.use_position = cfg.position_encoding;
        let mut dsizes = cfg.disc_hidden.clone();
        dsizes.push(1);
        let mlp_d = Mlp::new(&mut ps, "disc.mlp", cfg.attention.d_model, &dsizes, Activation::LeakyRelu, &mut rng);
        Ok(Self { cfg, params: ps, proj, lstm, attn_g, mlp_g, attn_d, mlp_d })
    }

    pub fn with_params(cfg: SpeakerConfig, params: ParamSet) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        if params.len() != m.params.len() || m.params.copy_matching(&params) != m.params.len() {
            return Err(Error::Config("speaker parameters do not match the configured network".into()));
        }
        Ok(m)
    }

    pub fn generator_ids(&self) -> Vec<ParamId> {
        self.params.iter().filter(|(_, n, _)| !n.starts_with("disc.")).map(|(id, _, _)| id).collect()
    }

    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        self.params.group("disc.")
    }

    pub fn projection(&self) -> &Linear {
        &self.proj
    }

    /// Copy of `s` with its projection filled in by this model.
    pub fn project(&self, s: &SpeakerEmbedding) -> Result<SpeakerEmbedding> {
        let mut out = s.clone();
        crate::embeddings::attach_projection(&mut out, &self.params, &self.proj)?;
        Ok(out)
    }

    pub fn n_windows(&self, frames: usize) -> usize {
        frames.div_ceil(self.cfg.window.tau_prime)
    }

    fn check_content(&self, a: &ContentEmbedding) -> Result<()> {
        if a.dim() != self.cfg.content_dim {
            return Err(Error::Config(format!("content embedding has D={}, network expects {}", a.dim(), self.cfg.content_dim)));
        }
        Ok(())
    }

    /// Builds the generator for the listed windows. `s128` is either a
    /// constant or the output of [`Self::build_projection`]; `p` holds the
    /// input landmarks of the unpadded sequence, `[T, 204]`.
    pub fn build_generator(
        &self,
        g: &mut Graph,
        a: &ContentEmbedding,
        s128: Var,
        p: &Tensor,
        q: &LandmarkFrame,
        windows: &[usize],
    ) -> GeneratorVars {
        let tp = self.cfg.window.tau_prime;
        let t_len = p.rows();
        let rows: Vec<(usize, usize)> = windows
            .iter()
            .flat_map(|&w| (w * tp..(w + 1) * tp).map(move |t| (t, (w + 1) * tp - 1)))
            .collect();
        let steps: Vec<Var> = window_steps(a, &rows, self.cfg.window.tau).into_iter().map(|t| g.constant(t)).collect();
        let codes_all = self.lstm.forward_last(g, &steps);
        let srep = g.repeat_rows(s128, tp);
        let qv = g.constant(Tensor::new(vec![1, FLAT_DIM], q.to_flat()));
        let qrep = g.repeat_rows(qv, tp);
        let mut y = Vec::with_capacity(windows.len());
        let mut codes = Vec::with_capacity(windows.len());
        for (k, &w) in windows.iter().enumerate() {
            let c = if windows.len() == 1 { codes_all } else { g.slice_rows(codes_all, k * tp, (k + 1) * tp) };
            let input = g.concat_cols(&[c, srep]);
            let h = self.attn_g.forward(g, input);
            let dec_in = g.concat_cols(&[h, qrep]);
            let delta = self.mlp_g.forward(g, dec_in);
            let mut pw = Vec::with_capacity(tp * FLAT_DIM);
            for t in w * tp..(w + 1) * tp {
                pw.extend_from_slice(p.row(t.min(t_len - 1)));
            }
            let pv = g.constant(Tensor::new(vec![tp, FLAT_DIM], pw));
            y.push(g.add(pv, delta));
            codes.push(c);
        }
        GeneratorVars { s128, y, codes }
    }

    /// Projection of a raw speaker embedding inside the graph, `[1, 128]`.
    pub fn build_projection(&self, g: &mut Graph, s: &SpeakerEmbedding) -> Var {
        let x = g.constant(Tensor::new(vec![1, SPEAKER_DIM], s.raw().to_vec()));
        self.proj.forward(g, x)
    }

    /// Per-frame realism of one window, `[tau', 1]`.
    pub fn build_discriminator(&self, g: &mut Graph, y: Var, codes: Var, s128: Var) -> Var {
        let rows = g.value(y).rows();
        let srep = g.repeat_rows(s128, rows);
        let input = g.concat_cols(&[y, codes, srep]);
        let h = self.attn_d.forward(g, input);
        self.mlp_d.forward(g, h)
    }

    /// Speaker-aware landmarks for the whole clip. `s` must carry its
    /// projection (see [`Self::project`]).
    pub fn forward(&self, a: &ContentEmbedding, s: &SpeakerEmbedding, p: &LandmarkSequence, q: &LandmarkFrame) -> Result<SpeakerOutput> {
        self.check_content(a)?;
        let s128 = s
            .projected
            .as_ref()
            .ok_or_else(|| Error::Validation("speaker embedding has not been projected".into()))?;
        if s128.len() != PROJECTED_DIM {
            return Err(Error::Validation(format!("projected speaker embedding has {} values", s128.len())));
        }
        if p.len() != a.len() {
            return Err(Error::Validation(format!("{} landmark frames for {} content frames", p.len(), a.len())));
        }
        let tp = self.cfg.window.tau_prime;
        let n_windows = self.n_windows(a.len());
        let p_flat = Tensor::new(vec![p.len(), FLAT_DIM], p.to_flat());
        let mut flat = Vec::with_capacity(n_windows * tp * FLAT_DIM);
        let mut codes = Vec::with_capacity(n_windows * tp * self.cfg.lstm_hidden);
        let per_graph = (512 / tp).max(1);
        let all: Vec<usize> = (0..n_windows).collect();
        for chunk in all.chunks(per_graph) {
            let mut g = Graph::new(&self.params);
            let sv = g.constant(Tensor::new(vec![1, PROJECTED_DIM], s128.clone()));
            let out = self.build_generator(&mut g, a, sv, &p_flat, q, chunk);
            for (y, c) in out.y.iter().zip(&out.codes) {
                flat.extend_from_slice(g.value(*y).data());
                codes.extend_from_slice(g.value(*c).data());
            }
        }
        flat.truncate(a.len() * FLAT_DIM);
        Ok(SpeakerOutput {
            landmarks: LandmarkSequence::from_flat(&flat, CANONICAL_FPS)?,
            codes: Tensor::new(vec![n_windows * tp, self.cfg.lstm_hidden], codes),
        })
    }

    /// Realism score per frame of one `tau'` window.
    pub fn discriminator_score(&self, y: &LandmarkSequence, codes: &Tensor, s128: &[f64]) -> Result<Vec<f64>> {
        let tp = self.cfg.window.tau_prime;
        if y.len() != tp {
            return Err(Error::Validation(format!("discriminator window needs {tp} frames, got {}", y.len())));
        }
        if codes.shape() != [tp, self.cfg.lstm_hidden] {
            return Err(Error::Validation(format!("content codes have shape {:?}", codes.shape())));
        }
        if s128.len() != PROJECTED_DIM {
            return Err(Error::Validation(format!("projected speaker embedding has {} values", s128.len())));
        }
        let mut g = Graph::new(&self.params);
        let yv = g.constant(Tensor::new(vec![tp, FLAT_DIM], y.to_flat()));
        let cv = g.constant(codes.clone());
        let sv = g.constant(Tensor::new(vec![1, PROJECTED_DIM], s128.to_vec()));
        let r = self.build_discriminator(&mut g, yv, cv, sv);
        Ok(g.value(r).data().to_vec())
    }
}

/// Least-squares adversarial loss: `sum (r_real - 1)^2 + r_fake^2`.
pub fn lsgan_loss(r_real: &[f64], r_fake: &[f64]) -> Result<f64> {
    if r_real.len() != r_fake.len() {
        return Err(Error::Validation(format!("{} real scores vs {} fake", r_real.len(), r_fake.len())));
    }
    Ok(r_real.iter().zip(r_fake).map(|(r, f)| (r - 1.0).powi(2) + f * f).sum())
}

/// Position error, `lambda` times Laplacian error, and `mu` times the
/// realism penalty `sum (r - 1)^2`.
pub fn generator_loss(
    y: &LandmarkSequence,
    reference: &LandmarkSequence,
    topo: &PartTopology,
    r_fake: &[f64],
    lambda: f64,
    mu: f64,
) -> Result<f64> {
    if y.len() != reference.len() || r_fake.len() != y.len() {
        return Err(Error::Validation(format!(
            "lengths differ: {} predicted, {} reference, {} scores",
            y.len(),
            reference.len(),
            r_fake.len()
        )));
    }
    let mut total = 0.0;
    for (p, r) in y.frames().iter().zip(reference.frames()) {
        let lp = laplacian_coords(p, topo)?;
        let lr = laplacian_coords(r, topo)?;
        for i in 0..N_LANDMARKS {
            total += (p.point(i) - r.point(i)).norm_squared() + lambda * (lp[i] - lr[i]).norm_squared();
        }
    }
    Ok(total + mu * r_fake.iter().map(|r| (r - 1.0).powi(2)).sum::<f64>())
}

/// In-graph generator objective for one window.
pub fn generator_loss_graph(g: &mut Graph, y: Var, target: Var, lap: Var, r_fake: Var, lambda: f64, mu: f64) -> Var {
    let fit = landmark_loss_graph(g, y, target, lap, lambda);
    let ones = g.constant(Tensor::full(g.shape(r_fake), 1.0));
    let d = g.sub(r_fake, ones);
    let sq = g.square(d);
    let adv = g.sum(sq);
    let adv = g.scale(adv, mu);
    g.add(fit, adv)
}

/// In-graph least-squares discriminator objective.
pub fn lsgan_loss_graph(g: &mut Graph, r_real: Var, r_fake: Var) -> Var {
    let ones = g.constant(Tensor::full(g.shape(r_real), 1.0));
    let d = g.sub(r_real, ones);
    let a = g.square(d);
    let a = g.sum(a);
    let b = g.square(r_fake);
    let b = g.sum(b);
    g.add(a, b)
}
