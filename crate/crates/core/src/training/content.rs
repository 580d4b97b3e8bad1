use std::collections::BTreeMap;

use rand::Rng;
use serde_json::json;

use crate::content_branch::{laplacian_operator, landmark_loss_graph, ContentConfig, ContentModel};
use crate::error::Result;
use crate::geometry::{PartTopology, FLAT_DIM};
use crate::nn::{Adam, Graph, Tensor};

use super::{check_finite, Checkpoint, Dataset, TrainConfig, TrainOutcome};

pub struct ContentTrainer<'d> {
    pub model: ContentModel,
    pub cfg: TrainConfig,
    pub step: u64,
    opt: Adam,
    data: &'d Dataset,
    lap: Tensor,
}

impl<'d> ContentTrainer<'d> {
    pub fn new(data: &'d Dataset, model_cfg: ContentConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ContentModel::new(model_cfg, cfg.seed)?;
        let opt = Adam::all(&model.params, cfg.adam());
        Ok(Self { model, cfg, step: 0, opt, data, lap: laplacian_operator(&PartTopology::standard68())? })
    }

    /// Restores model, optimizer and step counter. `cfg` may extend
    /// `max_steps`; everything else should match the original run.
    pub fn resume(data: &'d Dataset, ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        ckpt.expect_kind("content")?;
        let model_cfg: ContentConfig = serde_json::from_value(ckpt.config["model"].clone())
            .map_err(|e| crate::Error::parse("config.model", e.to_string()))?;
        let model = ContentModel::with_params(model_cfg, ckpt.params.clone())?;
        let opt = ckpt.optimizer("content").cloned().ok_or_else(|| crate::Error::parse("optimizers", "missing 'content'"))?;
        Ok(Self { model, cfg, step: ckpt.step, opt, data, lap: laplacian_operator(&PartTopology::standard68())? })
    }

    /// Frames drawn for one step, grouped by clip.
    fn batch(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let total: usize = self.data.clips.iter().map(|c| c.len()).sum();
        if total <= self.cfg.batch_size {
            for (i, c) in self.data.clips.iter().enumerate() {
                out.insert(i, (0..c.len()).collect());
            }
            return out;
        }
        let mut rng = self.cfg.step_rng(self.step);
        for _ in 0..self.cfg.batch_size {
            let c = rng.random_range(0..self.data.clips.len());
            let t = rng.random_range(0..self.data.clips[c].len());
            out.entry(c).or_default().push(t);
        }
        out
    }

    /// One optimizer step; returns the batch loss per frame.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.batch();
        let n_frames: usize = batch.values().map(Vec::len).sum();
        let (loss, grads) = {
            let mut g = Graph::new(&self.model.params);
            let lap = g.constant(self.lap.clone());
            let mut total = None;
            for (&ci, frames) in &batch {
                let clip = &self.data.clips[ci];
                let (pred, _) = self.model.build(&mut g, &clip.content, &clip.q, frames);
                let mut tgt = Vec::with_capacity(frames.len() * FLAT_DIM);
                for &t in frames {
                    tgt.extend_from_slice(&clip.registered.frame(t).to_flat());
                }
                let tv = g.constant(Tensor::new(vec![frames.len(), FLAT_DIM], tgt));
                let l = landmark_loss_graph(&mut g, pred, tv, lap, self.cfg.lambda_c);
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l),
                });
            }
            let total = g.scale(total.expect("non-empty batch"), 1.0 / n_frames as f64);
            (g.value(total).item(), g.backward(total))
        };
        check_finite(self.step, "content loss", loss)?;
        self.opt.update(&mut self.model.params, &grads);
        self.step += 1;
        Ok(loss)
    }

    /// Content loss per frame over every frame of `ds`.
    pub fn evaluate(&self, ds: &Dataset) -> Result<f64> {
        evaluate_content(&self.model, ds, self.cfg.lambda_c)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "content".into(),
            step: self.step,
            config: json!({ "model": self.model.cfg, "train": self.cfg }),
            corpus_fingerprint: self.data.fingerprint(),
            params: self.model.params.clone(),
            optimizers: vec![("content".into(), self.opt.clone())],
        }
    }
}

pub(crate) fn evaluate_content(model: &ContentModel, ds: &Dataset, lambda: f64) -> Result<f64> {
    let topo = PartTopology::standard68();
    let mut total = 0.0;
    let mut frames = 0;
    for c in &ds.clips {
        let out = model.forward(&c.content, &c.q)?;
        total += crate::content_branch::content_loss(&out.landmarks, &c.registered, &topo, lambda)?;
        frames += c.len();
    }
    Ok(total / frames as f64)
}

/// Trains the content branch on registered landmarks and returns the state
/// with the lowest validation loss.
pub fn train_content(train: &Dataset, val: Option<&Dataset>, model_cfg: ContentConfig, cfg: TrainConfig) -> Result<TrainOutcome> {
    ContentTrainer::new(train, model_cfg, cfg)?.run(val)
}

impl ContentTrainer<'_> {
    /// Steps until `cfg.max_steps`, validating every `eval_every` steps and
    /// at the end.
    pub fn run(mut self, val: Option<&Dataset>) -> Result<TrainOutcome> {
        let mut losses = Vec::new();
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
            losses.push(self.step()?);
            if self.cfg.eval_every > 0 && self.step.is_multiple_of(self.cfg.eval_every) && self.step < self.cfg.max_steps {
                validate(&self, &mut best, &mut val_losses)?;
            }
            if self.step.is_multiple_of(100) {
                log::info!("content step {} loss {:.6e}", self.step, losses.last().unwrap());
            }
        }
        validate(&self, &mut best, &mut val_losses)?;
        let checkpoint = match best {
            Some((_, c)) => c,
            None => self.checkpoint(),
        };
        Ok(TrainOutcome { checkpoint, losses, disc_losses: Vec::new(), val_losses })
    }
}
