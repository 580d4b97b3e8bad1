use rand::Rng;
use serde_json::json;

use crate::content_branch::{laplacian_operator, landmark_loss_graph, ContentModel};
use crate::error::{Error, Result};
use crate::geometry::{PartTopology, FLAT_DIM};
use crate::nn::{Adam, Graph, Tensor};
use crate::speaker_branch::{generator_loss_graph, lsgan_loss_graph, SpeakerConfig, SpeakerModel};

use super::{check_finite, Checkpoint, Dataset, TrainConfig, TrainOutcome};

/// Where the speaker branch gets its speaker-agnostic input landmarks.
#[derive(Debug, Clone)]
pub enum LandmarkSource {
    /// Output of a frozen content branch.
    Content(ContentModel),
    /// The static face `q` on every frame.
    Static,
}

impl LandmarkSource {
    fn name(&self) -> &'static str {
        match self {
            Self::Content(_) => "content",
            Self::Static => "static",
        }
    }

    /// Input landmarks for every clip, `[T, 204]`.
    fn inputs(&self, ds: &Dataset) -> Result<Vec<Tensor>> {
        ds.clips
            .iter()
            .map(|c| match self {
                Self::Content(m) => {
                    let out = m.forward(&c.content, &c.q)?;
                    Ok(Tensor::new(vec![c.len(), FLAT_DIM], out.landmarks.to_flat()))
                }
                Self::Static => {
                    let q = c.q.to_flat();
                    Ok(Tensor::new(vec![c.len(), FLAT_DIM], q.iter().copied().cycle().take(c.len() * FLAT_DIM).collect()))
                }
            })
            .collect()
    }
}

pub struct SpeakerTrainer<'d> {
    pub model: SpeakerModel,
    pub cfg: TrainConfig,
    pub step: u64,
    source: LandmarkSource,
    gen_opt: Adam,
    disc_opt: Adam,
    data: &'d Dataset,
    inputs: Vec<Tensor>,
    lap: Tensor,
}

/// Observed landmarks of one window, padded by repeating the last frame,
/// and the number of real frames in it.
fn target_window(ds: &Dataset, clip: usize, w: usize, tp: usize) -> (Tensor, usize) {
    let c = &ds.clips[clip];
    let t_len = c.len();
    let mut v = Vec::with_capacity(tp * FLAT_DIM);
    for t in w * tp..(w + 1) * tp {
        v.extend_from_slice(&c.landmarks.frame(t.min(t_len - 1)).to_flat());
    }
    (Tensor::new(vec![tp, FLAT_DIM], v), (t_len - w * tp).min(tp))
}

impl<'d> SpeakerTrainer<'d> {
    pub fn new(data: &'d Dataset, source: LandmarkSource, model_cfg: SpeakerConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = SpeakerModel::new(model_cfg, cfg.seed)?;
        let gen_opt = Adam::new(&model.params, model.generator_ids(), cfg.adam());
        let disc_opt = Adam::new(&model.params, model.discriminator_ids(), cfg.adam());
        Self::assemble(data, source, model, cfg, 0, gen_opt, disc_opt)
    }

    pub fn resume(data: &'d Dataset, source: LandmarkSource, ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        ckpt.expect_kind("speaker")?;
        let model_cfg: SpeakerConfig = serde_json::from_value(ckpt.config["model"].clone())
            .map_err(|e| Error::parse("config.model", e.to_string()))?;
        let model = SpeakerModel::with_params(model_cfg, ckpt.params.clone())?;
        let opt = |n: &str| ckpt.optimizer(n).cloned().ok_or_else(|| Error::parse("optimizers", format!("missing '{n}'")));
        let (gen_opt, disc_opt) = (opt("gen")?, opt("disc")?);
        Self::assemble(data, source, model, cfg, ckpt.step, gen_opt, disc_opt)
    }

    fn assemble(
        data: &'d Dataset,
        source: LandmarkSource,
        model: SpeakerModel,
        cfg: TrainConfig,
        step: u64,
        gen_opt: Adam,
        disc_opt: Adam,
    ) -> Result<Self> {
        if data.content_dim() != model.cfg.content_dim {
            return Err(Error::Config(format!(
                "corpus has content width {}, network expects {}",
                data.content_dim(),
                model.cfg.content_dim
            )));
        }
        let inputs = source.inputs(data)?;
        let lap = laplacian_operator(&PartTopology::standard68())?;
        Ok(Self { model, cfg, step, source, gen_opt, disc_opt, data, inputs, lap })
    }

    /// `(clip, window)` pairs drawn for one step.
    fn batch(&self) -> Vec<(usize, usize)> {
        let all: Vec<(usize, usize)> = self
            .data
            .clips
            .iter()
            .enumerate()
            .flat_map(|(i, c)| (0..self.model.n_windows(c.len())).map(move |w| (i, w)))
            .collect();
        if all.len() <= self.cfg.batch_size {
            return all;
        }
        let mut rng = self.cfg.step_rng(self.step);
        (0..self.cfg.batch_size).map(|_| all[rng.random_range(0..all.len())]).collect()
    }

    /// One generator update followed by one discriminator update. Returns
    /// `(generator loss, discriminator loss)`, both per frame.
    pub fn step(&mut self) -> Result<(f64, f64)> {
        let batch = self.batch();
        let tp = self.model.cfg.window.tau_prime;
        let mut fakes = Vec::with_capacity(batch.len());
        let (g_loss, g_grads, n_frames) = {
            let mut g = Graph::new(&self.model.params);
            let lap = g.constant(self.lap.clone());
            let mut total = None;
            let mut n_frames = 0;
            for &(ci, w) in &batch {
                let clip = &self.data.clips[ci];
                let s128 = self.model.build_projection(&mut g, &clip.speaker);
                let out = self.model.build_generator(&mut g, &clip.content, s128, &self.inputs[ci], &clip.q, &[w]);
                let (y, codes) = (out.y[0], out.codes[0]);
                let r = self.model.build_discriminator(&mut g, y, codes, s128);
                let (target, valid) = target_window(self.data, ci, w, tp);
                fakes.push((g.value(y).clone(), g.value(codes).clone(), g.value(s128).clone(), target.clone(), valid));
                let tv = g.constant(target);
                let (y, tv, r) = if valid < tp {
                    (g.slice_rows(y, 0, valid), g.slice_rows(tv, 0, valid), g.slice_rows(r, 0, valid))
                } else {
                    (y, tv, r)
                };
                let l = generator_loss_graph(&mut g, y, tv, lap, r, self.cfg.lambda_s, self.cfg.mu_s);
                n_frames += valid;
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l),
                });
            }
            let total = g.scale(total.expect("non-empty batch"), 1.0 / n_frames as f64);
            (g.value(total).item(), g.backward(total), n_frames)
        };
        check_finite(self.step, "generator loss", g_loss)?;

        let (d_loss, d_grads) = {
            let mut g = Graph::new(&self.model.params);
            let mut total = None;
            for (y, codes, s128, target, valid) in fakes {
                let (yv, cv, sv, rv) = (g.constant(y), g.constant(codes), g.constant(s128), g.constant(target));
                let r_fake = self.model.build_discriminator(&mut g, yv, cv, sv);
                let r_real = self.model.build_discriminator(&mut g, rv, cv, sv);
                let (r_real, r_fake) = if valid < tp {
                    (g.slice_rows(r_real, 0, valid), g.slice_rows(r_fake, 0, valid))
                } else {
                    (r_real, r_fake)
                };
                let l = lsgan_loss_graph(&mut g, r_real, r_fake);
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l),
                });
            }
            let total = g.scale(total.expect("non-empty batch"), 1.0 / n_frames as f64);
            (g.value(total).item(), g.backward(total))
        };
        check_finite(self.step, "discriminator loss", d_loss)?;

        self.gen_opt.update(&mut self.model.params, &g_grads);
        self.disc_opt.update(&mut self.model.params, &d_grads);
        self.step += 1;
        Ok((g_loss, d_loss))
    }

    /// Landmark fit per frame (position and Laplacian terms) on `ds`.
    pub fn evaluate(&self, ds: &Dataset) -> Result<f64> {
        let inputs = self.source.inputs(ds)?;
        let lap = self.lap.clone();
        let tp = self.model.cfg.window.tau_prime;
        let mut total = 0.0;
        let mut frames = 0;
        for (ci, clip) in ds.clips.iter().enumerate() {
            let windows: Vec<usize> = (0..self.model.n_windows(clip.len())).collect();
            for chunk in windows.chunks((512 / tp).max(1)) {
                let mut g = Graph::new(&self.model.params);
                let lv = g.constant(lap.clone());
                let s128 = self.model.build_projection(&mut g, &clip.speaker);
                let out = self.model.build_generator(&mut g, &clip.content, s128, &inputs[ci], &clip.q, chunk);
                for (k, &w) in chunk.iter().enumerate() {
                    let (target, valid) = target_window(ds, ci, w, tp);
                    let tv = g.constant(target);
                    let y = g.slice_rows(out.y[k], 0, valid);
                    let tv = g.slice_rows(tv, 0, valid);
                    let l = landmark_loss_graph(&mut g, y, tv, lv, self.cfg.lambda_s);
                    total += g.value(l).item();
                    frames += valid;
                }
            }
        }
        Ok(total / frames as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "speaker".into(),
            step: self.step,
            config: json!({ "model": self.model.cfg, "train": self.cfg, "source": self.source.name() }),
            corpus_fingerprint: self.data.fingerprint(),
            params: self.model.params.clone(),
            optimizers: vec![("gen".into(), self.gen_opt.clone()), ("disc".into(), self.disc_opt.clone())],
        }
    }
}

/// Adversarially trains the speaker branch and returns the state with the
/// lowest validation landmark fit.
pub fn train_speaker(
    train: &Dataset,
    val: Option<&Dataset>,
    source: LandmarkSource,
    model_cfg: SpeakerConfig,
    cfg: TrainConfig,
) -> Result<TrainOutcome> {
    SpeakerTrainer::new(train, source, model_cfg, cfg)?.run(val)
}

impl SpeakerTrainer<'_> {
    /// Steps until `cfg.max_steps`, validating every `eval_every` steps and
    /// at the end.
    pub fn run(mut self, val: Option<&Dataset>) -> Result<TrainOutcome> {
        let mut losses = Vec::new();
        let mut disc_losses = Vec::new();
        let mut val_losses = Vec::new();
        let mut best: Option<(f64, Checkpoint)> = None;
        let validate = |tr: &Self, best: &mut Option<(f64, Checkpoint)>, val_losses: &mut Vec<(u64, f64)>| -> Result<()> {
            if let Some(v) = val {
                let l = check_finite(tr.step, "validation loss", tr.evaluate(v)?)?;
                val_losses.push((tr.step, l));
                if best.as_ref().is_none_or(|(b, _)| l < *b) {
                    *best = Some((l, tr.checkpoint()));
                }
            }
            Ok(())
        };
        while self.step < self.cfg.max_steps {
            let (gl, dl) = self.step()?;
            losses.push(gl);
            disc_losses.push(dl);
            if self.cfg.eval_every > 0 && self.step.is_multiple_of(self.cfg.eval_every) && self.step < self.cfg.max_steps {
                validate(&self, &mut best, &mut val_losses)?;
            }
            if self.step.is_multiple_of(100) {
                log::info!("speaker step {} gen {:.6e} disc {:.6e}", self.step, gl, dl);
            }
        }
        validate(&self, &mut best, &mut val_losses)?;
        let checkpoint = match best {
            Some((_, c)) => c,
            None => self.checkpoint(),
        };
        Ok(TrainOutcome { checkpoint, losses, disc_losses, val_losses })
    }
}
