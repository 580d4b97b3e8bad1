//! Landmark-to-image translation for natural faces: a U-shaped
//! encoder-decoder with residual blocks and skip connections that maps a
//! portrait plus a rasterized landmark image to a new frame.

mod raster;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::{Adam, Graph, ParamId, ParamSet, Tensor, Var};
use crate::training::{Checkpoint, TrainConfig};

pub use raster::{clip_segment, draw_line, rasterize_landmarks, RasterConfig, PART_PALETTE};

const N_LEVELS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Channel widths of the six encoder levels.
    pub widths: Vec<usize>,
    /// Square input and output resolution; a multiple of 64.
    pub resolution: usize,
    /// Residual blocks after every strided or upsampling convolution.
    pub res_blocks: usize,
    /// Recorded residual-block layout.
    pub block: String,
}

impl GeneratorConfig {
    pub fn full() -> Self {
        Self { widths: vec![64, 128, 256, 512, 512, 512], resolution: 256, res_blocks: 2, block: "pre_activation_relu".into() }
    }

    /// Widths divided by 16.
    pub fn reduced(resolution: usize) -> Self {
        Self { widths: vec![4, 8, 16, 32, 32, 32], resolution, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != N_LEVELS || self.widths.contains(&0) {
            return Err(Error::Config(format!("generator needs {N_LEVELS} positive widths")));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(64) {
            return Err(Error::Config(format!("resolution {} is not a positive multiple of 64", self.resolution)));
        }
        Ok(())
    }

    /// Output channels of each decoder level.
    fn decoder_widths(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.widths[..N_LEVELS - 1].iter().rev().copied().collect();
        d.push(3);
        d
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl Conv {
    fn new(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = cin * 9;
        let w = ps.add_uniform(format!("{name}.w"), &[cout, fan_in], fan_in, rng);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, b, 3, self.stride, 1)
    }
}

/// `x + conv(relu(conv(relu(x))))`.
#[derive(Debug, Clone, Copy)]
struct ResBlock {
    c1: Conv,
    c2: Conv,
}

impl ResBlock {
    fn new(ps: &mut ParamSet, name: &str, ch: usize, rng: &mut impl Rng) -> Self {
        Self { c1: Conv::new(ps, &format!("{name}.c1"), ch, ch, 1, rng), c2: Conv::new(ps, &format!("{name}.c2"), ch, ch, 1, rng) }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.relu(x);
        let h = self.c1.forward(g, h);
        let h = g.relu(h);
        let h = self.c2.forward(g, h);
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
struct Level {
    conv: Conv,
    res: Vec<ResBlock>,
    upsample: bool,
}

impl Level {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = if self.upsample { g.upsample2x(x) } else { x };
        h = self.conv.forward(g, h);
        for r in &self.res {
            h = r.forward(g, h);
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub params: ParamSet,
    down: Vec<Level>,
    up: Vec<Level>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let level = |ps: &mut ParamSet, name: String, cin: usize, cout: usize, up: bool, rng: &mut ChaCha8Rng| Level {
            conv: Conv::new(ps, &format!("{name}.conv"), cin, cout, if up { 1 } else { 2 }, rng),
            res: (0..cfg.res_blocks).map(|k| ResBlock::new(ps, &format!("{name}.res{k}"), cout, rng)).collect(),
            upsample: up,
        };
        let mut down = Vec::with_capacity(N_LEVELS);
        let mut cin = 6;
        for (k, &w) in cfg.widths.iter().enumerate() {
            down.push(level(&mut ps, format!("down{k}"), cin, w, false, &mut rng));
            cin = w;
        }
        let dec = cfg.decoder_widths();
        let mut up = Vec::with_capacity(N_LEVELS);
        for (k, &w) in dec.iter().enumerate() {
            let skip = if k == 0 { 0 } else { cfg.widths[N_LEVELS - 1 - k] };
            up.push(level(&mut ps, format!("up{k}"), cin + skip, w, true, &mut rng));
            cin = w;
        }
        Ok(Self { cfg, params: ps, down, up })
    }

    pub fn with_params(cfg: GeneratorConfig, params: ParamSet) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        if params.len() != m.params.len() || m.params.copy_matching(&params) != m.params.len() {
            return Err(Error::Config("generator parameters do not match the configured network".into()));
        }
        Ok(m)
    }

    /// `x` is the 6-channel input `[landmark image; portrait]`, `[6, R, R]`.
    /// Returns `[3, R, R]` in `[-1, 1]`.
    pub fn build(&self, g: &mut Graph, x: Var) -> Var {
        let mut skips = Vec::with_capacity(N_LEVELS);
        let mut h = x;
        for lvl in &self.down {
            h = lvl.forward(g, h);
            skips.push(h);
        }
        for (k, lvl) in self.up.iter().enumerate() {
            if k > 0 {
                h = g.concat_rows(&[h, skips[N_LEVELS - 1 - k]]);
            }
            h = lvl.forward(g, h);
        }
        g.tanh(h)
    }

    fn check_input(&self, t: &Tensor, what: &str) -> Result<()> {
        let r = self.cfg.resolution;
        if t.shape() != [3, r, r] {
            return Err(Error::Validation(format!("{what} has shape {:?}, generator expects [3, {r}, {r}]", t.shape())));
        }
        Ok(())
    }

    pub fn input(&self, portrait: &Tensor, landmarks: &Tensor) -> Result<Tensor> {
        self.check_input(portrait, "portrait")?;
        self.check_input(landmarks, "landmark image")?;
        let r = self.cfg.resolution;
        let mut data = landmarks.data().to_vec();
        data.extend_from_slice(portrait.data());
        Ok(Tensor::new(vec![6, r, r], data))
    }

    pub fn forward(&self, portrait: &Tensor, landmarks: &Tensor) -> Result<Tensor> {
        let x = self.input(portrait, landmarks)?;
        let mut g = Graph::new(&self.params);
        let xv = g.constant(x);
        let y = self.build(&mut g, xv);
        Ok(g.value(y).clone())
    }
}

/// Image as `[3, H, W]` with values in `[-1, 1]`.
pub fn image_to_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn tensor_to_image(t: &Tensor) -> Result<image::RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Validation(format!("expected a [3, H, W] tensor, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| ((t.data()[(c * h + y as usize) * w + x as usize] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

/// Feature maps compared by the perceptual term of the loss.
pub trait FeatureExtractor {
    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var>;
}

/// The image itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityFeatures;

impl FeatureExtractor for IdentityFeatures {
    fn features(&self, _g: &mut Graph, x: Var) -> Vec<Var> {
        vec![x]
    }
}

/// Frozen convolutional stack (3x3 kernels, ReLU); every layer's activation
/// is a feature. Load pretrained weights with [`ConvFeatures::from_layers`].
#[derive(Debug, Clone)]
pub struct ConvFeatures {
    layers: Vec<(Tensor, Tensor, usize)>,
}

impl ConvFeatures {
    /// `(weight [out, in*9], bias [out], stride)` per layer.
    pub fn from_layers(layers: Vec<(Tensor, Tensor, usize)>) -> Result<Self> {
        let mut cin = 3;
        for (k, (w, b, s)) in layers.iter().enumerate() {
            if w.shape().len() != 2 || w.cols() != cin * 9 || b.len() != w.rows() || *s == 0 {
                return Err(Error::Config(format!("feature layer {k} has inconsistent shapes")));
            }
            cin = w.rows();
        }
        Ok(Self { layers })
    }

    /// Two layers, 3 -> 8 -> 16 channels, both stride 2, seeded weights.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let w1 = ps.add_uniform("w1", &[8, 27], 27, &mut rng);
        let w2 = ps.add_uniform("w2", &[16, 72], 72, &mut rng);
        let layers = vec![
            (ps.get(w1).clone(), Tensor::zeros(&[8]), 2),
            (ps.get(w2).clone(), Tensor::zeros(&[16]), 2),
        ];
        Self { layers }
    }
}

impl FeatureExtractor for ConvFeatures {
    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (w, b, s) in &self.layers {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            let c = g.conv2d(h, wv, bv, 3, *s, 1);
            h = g.relu(c);
            out.push(h);
        }
        out
    }
}

/// `mean|out - target| + lambda * mean|phi(out) - phi(target)|`, the second
/// mean taken over all concatenated feature values.
pub fn i2i_loss_graph(g: &mut Graph, out: Var, target: Var, phi: &dyn FeatureExtractor, lambda: f64) -> Var {
    let d = g.sub(out, target);
    let a = g.abs(d);
    let pix = g.mean(a);
    if lambda == 0.0 {
        return pix;
    }
    let fo = phi.features(g, out);
    let ft = phi.features(g, target);
    let mut total = None;
    let mut count = 0;
    for (a, b) in fo.into_iter().zip(ft) {
        count += g.value(a).len();
        let d = g.sub(a, b);
        let d = g.abs(d);
        let s = g.sum(d);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s),
        });
    }
    let feat = g.scale(total.expect("at least one feature map"), lambda / count as f64);
    g.add(pix, feat)
}

pub fn i2i_loss(out: &Tensor, target: &Tensor, phi: &dyn FeatureExtractor, lambda: f64) -> Result<f64> {
    if out.shape() != target.shape() {
        return Err(Error::Validation(format!("output {:?} vs target {:?}", out.shape(), target.shape())));
    }
    let ps = ParamSet::new();
    let mut g = Graph::new(&ps);
    let (o, t) = (g.constant(out.clone()), g.constant(target.clone()));
    let l = i2i_loss_graph(&mut g, o, t, phi, lambda);
    Ok(g.value(l).item())
}

/// One training triple: source portrait, rasterized target landmarks, and
/// the target frame. All `[3, R, R]` in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct I2iSample {
    pub source: Tensor,
    pub landmarks: Tensor,
    pub target: Tensor,
}

/// Pairs built from the warp renderer: each target frame is the portrait
/// warped to `frames[k]` (pixel coordinates) and its landmark image.
pub fn synthetic_pairs(
    portrait: &crate::renderer::PortraitImage,
    frames: &[crate::geometry::LandmarkFrame],
    raster: &RasterConfig,
) -> Result<Vec<I2iSample>> {
    let mesh = crate::renderer::triangulate(&portrait.mesh_vertices())?;
    let anchors = crate::renderer::border_anchors(portrait.width(), portrait.height());
    let topo = crate::geometry::PartTopology::standard68();
    let source = image_to_tensor(&portrait.image);
    frames
        .iter()
        .map(|f| {
            let mut target: Vec<[f64; 2]> = f.points().iter().map(|p| [p.x, p.y]).collect();
            target.extend(anchors);
            let warped = crate::renderer::warp_frame(&portrait.image, &mesh, &target)?;
            Ok(I2iSample {
                source: source.clone(),
                landmarks: image_to_tensor(&rasterize_landmarks(f, &topo, raster)),
                target: image_to_tensor(&warped.image),
            })
        })
        .collect()
}

pub struct I2iTrainer<'a> {
    pub model: Generator,
    pub cfg: TrainConfig,
    pub lambda_a: f64,
    pub step: u64,
    opt: Adam,
    samples: &'a [I2iSample],
    phi: &'a dyn FeatureExtractor,
}

impl<'a> I2iTrainer<'a> {
    pub fn new(
        samples: &'a [I2iSample],
        phi: &'a dyn FeatureExtractor,
        model_cfg: GeneratorConfig,
        cfg: TrainConfig,
        lambda_a: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::Validation("no training pairs".into()));
        }
        let model = Generator::new(model_cfg, cfg.seed)?;
        for s in samples {
            model.input(&s.source, &s.landmarks)?;
            model.check_input(&s.target, "target")?;
        }
        let opt = Adam::all(&model.params, cfg.adam());
        Ok(Self { model, cfg, lambda_a, step: 0, opt, samples, phi })
    }

    /// One update on `batch_size` randomly drawn pairs; returns the mean loss.
    pub fn step(&mut self) -> Result<f64> {
        let mut rng = self.cfg.step_rng(self.step);
        let picks: Vec<usize> = if self.samples.len() == 1 {
            vec![0]
        } else {
            (0..self.cfg.batch_size.min(self.samples.len())).map(|_| rng.random_range(0..self.samples.len())).collect()
        };
        let (loss, grads) = {
            let mut g = Graph::new(&self.model.params);
            let mut total = None;
            for &i in &picks {
                let s = &self.samples[i];
                let x = g.constant(self.model.input(&s.source, &s.landmarks)?);
                let y = self.model.build(&mut g, x);
                let t = g.constant(s.target.clone());
                let l = i2i_loss_graph(&mut g, y, t, self.phi, self.lambda_a);
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l),
                });
            }
            let total = g.scale(total.expect("non-empty batch"), 1.0 / picks.len() as f64);
            (g.value(total).item(), g.backward(total))
        };
        crate::training::check_finite(self.step, "i2i loss", loss)?;
        self.opt.update(&mut self.model.params, &grads);
        self.step += 1;
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "i2i".into(),
            step: self.step,
            config: json!({ "model": self.model.cfg, "train": self.cfg, "lambda_a": self.lambda_a }),
            corpus_fingerprint: String::new(),
            params: self.model.params.clone(),
            optimizers: vec![("i2i".into(), self.opt.clone())],
        }
    }
}

/// Trains the generator for `cfg.max_steps`; returns the final checkpoint
/// and per-step losses.
pub fn train_i2i(
    samples: &[I2iSample],
    phi: &dyn FeatureExtractor,
    model_cfg: GeneratorConfig,
    cfg: TrainConfig,
    lambda_a: f64,
) -> Result<(Checkpoint, Vec<f64>)> {
    let mut tr = I2iTrainer::new(samples, phi, model_cfg, cfg, lambda_a)?;
    let mut losses = Vec::with_capacity(tr.cfg.max_steps as usize);
    while tr.step < tr.cfg.max_steps {
        losses.push(tr.step()?);
        if tr.step % 50 == 0 {
            log::info!("i2i step {} loss {:.5}", tr.step, losses.last().unwrap());
        }
    }
    Ok((tr.checkpoint(), losses))
}
