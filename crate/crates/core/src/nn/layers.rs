//! Building blocks shared by the animation branches and the image generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    LeakyRelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu => g.leaky_relu(x, 0.2),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Affine map `x W + b` applied row-wise.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = ps.add_uniform(format!("{name}.w"), &[in_dim, out_dim], in_dim, rng);
        let b = ps.add_uniform(format!("{name}.b"), &[out_dim], in_dim, rng);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

/// Stack of dense layers; the activation follows every layer but the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn new(ps: &mut ParamSet, name: &str, in_dim: usize, sizes: &[usize], act: Activation, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut d = in_dim;
        for (i, &s) in sizes.iter().enumerate() {
            layers.push(Linear::new(ps, &format!("{name}.{i}"), d, s, rng));
            d = s;
        }
        Self { layers, act }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i < last {
                x = self.act.apply(g, x);
            }
        }
        x
    }
}

#[derive(Debug, Clone)]
struct LstmLayer {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

/// Multi-layer LSTM with gate order (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct Lstm {
    layers: Vec<LstmLayer>,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(ps: &mut ParamSet, name: &str, in_dim: usize, hidden: usize, n_layers: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(n_layers);
        let mut d = in_dim;
        for i in 0..n_layers {
            layers.push(LstmLayer {
                w_ih: ps.add_uniform(format!("{name}.{i}.w_ih"), &[d, 4 * hidden], hidden, rng),
                w_hh: ps.add_uniform(format!("{name}.{i}.w_hh"), &[hidden, 4 * hidden], hidden, rng),
                b: ps.add_uniform(format!("{name}.{i}.b"), &[4 * hidden], hidden, rng),
            });
            d = hidden;
        }
        Self { layers, hidden }
    }

    /// Runs the stack from a zero state over `steps` (each `[B, in]`) and
    /// returns the top-layer output at the final step, `[B, hidden]`.
    pub fn forward_last(&self, g: &mut Graph, steps: &[Var]) -> Var {
        *self.forward_all(g, steps).last().expect("at least one step")
    }

    /// Top-layer outputs at every step.
    pub fn forward_all(&self, g: &mut Graph, steps: &[Var]) -> Vec<Var> {
        assert!(!steps.is_empty());
        let batch = g.value(steps[0]).rows();
        let h4 = self.hidden;
        let mut seq = steps.to_vec();
        for layer in &self.layers {
            let (w_ih, w_hh, b) = (g.param(layer.w_ih), g.param(layer.w_hh), g.param(layer.b));
            let mut h = g.constant(Tensor::zeros(&[batch, h4]));
            let mut c = h;
            let mut outs = Vec::with_capacity(seq.len());
            for (t, &x) in seq.iter().enumerate() {
                let zx = g.matmul(x, w_ih);
                let z = if t == 0 {
                    zx
                } else {
                    let zh = g.matmul(h, w_hh);
                    g.add(zx, zh)
                };
                let z = g.add_bias(z, b);
                let i = g.slice_cols(z, 0, h4);
                let f = g.slice_cols(z, h4, 2 * h4);
                let cc = g.slice_cols(z, 2 * h4, 3 * h4);
                let o = g.slice_cols(z, 3 * h4, 4 * h4);
                let (i, f, o) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o));
                let cc = g.tanh(cc);
                let ic = g.mul(i, cc);
                c = if t == 0 {
                    ic
                } else {
                    let fc = g.mul(f, c);
                    g.add(fc, ic)
                };
                let tc = g.tanh(c);
                h = g.mul(o, tc);
                outs.push(h);
            }
            seq = outs;
        }
        seq
    }
}

/// Sinusoidal position code, `[t, d]`.
pub fn position_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let k = (i / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(k as f64 / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, 1e-5)
    }
}

/// Post-norm encoder block: self-attention and a position-wise
/// feed-forward, each wrapped in a residual connection and layer norm.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
    heads: usize,
}

impl EncoderLayer {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, heads: usize, ff: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "head count {heads} must divide model width {d}");
        Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, rng),
            o: Linear::new(ps, &format!("{name}.o"), d, d, rng),
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
            ff1: Linear::new(ps, &format!("{name}.ff1"), d, ff, rng),
            ff2: Linear::new(ps, &format!("{name}.ff2"), ff, d, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let d = self.q.out_dim;
        let dh = d / self.heads;
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, x);
        let v = self.v.forward(g, x);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
            let s = g.matmul_nt(qh, kh);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax_rows(s);
            heads.push(g.matmul(a, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let att = self.o.forward(g, cat);
        let r = g.add(x, att);
        let x1 = self.ln1.forward(g, r);
        let f = self.ff1.forward(g, x1);
        let f = g.relu(f);
        let f = self.ff2.forward(g, f);
        let r2 = g.add(x1, f);
        self.ln2.forward(g, r2)
    }
}

/// Input embedding, optional sinusoidal position code and a stack of
/// encoder blocks. Maps `[T, in]` to `[T, d_model]`.
#[derive(Debug, Clone)]
pub struct AttentionEncoder {
    embed: Linear,
    layers: Vec<EncoderLayer>,
    pub d_model: usize,
    pub use_position: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { d_model: 32, heads: 2, layers: 2, ff: 32 }
    }
}

impl AttentionEncoder {
    pub fn new(ps: &mut ParamSet, name: &str, in_dim: usize, cfg: AttentionConfig, rng: &mut impl Rng) -> Self {
        let embed = Linear::new(ps, &format!("{name}.embed"), in_dim, cfg.d_model, rng);
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(ps, &format!("{name}.layer{i}"), cfg.d_model, cfg.heads, cfg.ff, rng))
            .collect();
        Self { embed, layers, d_model: cfg.d_model, use_position: true }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let t = g.value(x).rows();
        let mut h = self.embed.forward(g, x);
        if self.use_position {
            let pe = g.constant(position_encoding(t, self.d_model));
            h = g.add(h, pe);
        }
        for l in &self.layers {
            h = l.forward(g, h);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_lstm_step(x: &[f64], h: &[f64], c: &[f64], w_ih: &Tensor, w_hh: &Tensor, b: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let hd = h.len();
        let mut z = b.data().to_vec();
        for (j, zj) in z.iter_mut().enumerate() {
            for (i, xi) in x.iter().enumerate() {
                *zj += xi * w_ih.data()[i * 4 * hd + j];
            }
            for (i, hi) in h.iter().enumerate() {
                *zj += hi * w_hh.data()[i * 4 * hd + j];
            }
        }
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h2 = vec![0.0; hd];
        let mut c2 = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, g, o) = (sig(z[k]), sig(z[hd + k]), z[2 * hd + k].tanh(), sig(z[3 * hd + k]));
            c2[k] = f * c[k] + i * g;
            h2[k] = o * c2[k].tanh();
        }
        (h2, c2)
    }

    #[test]
    fn lstm_matches_scalar_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let lstm = Lstm::new(&mut ps, "l", 3, 4, 1, &mut rng);
        let xs: Vec<Vec<f64>> = (0..5).map(|t| (0..3).map(|i| ((t * 3 + i) as f64 * 0.7).sin()).collect()).collect();
        let mut g = Graph::new(&ps);
        let steps: Vec<Var> = xs.iter().map(|x| g.constant(Tensor::new(vec![1, 3], x.clone()))).collect();
        let out = lstm.forward_last(&mut g, &steps);
        let l = &lstm.layers[0];
        let (mut h, mut c) = (vec![0.0; 4], vec![0.0; 4]);
        for x in &xs {
            (h, c) = naive_lstm_step(x, &h, &c, ps.get(l.w_ih), ps.get(l.w_hh), ps.get(l.b));
        }
        for (a, b) in g.value(out).data().iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_without_position_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        let cfg = AttentionConfig { d_model: 8, heads: 2, layers: 2, ff: 8 };
        let mut enc = AttentionEncoder::new(&mut ps, "a", 5, cfg, &mut rng);
        enc.use_position = false;
        let t = 6;
        let x: Vec<f64> = (0..t * 5).map(|i| (i as f64 * 0.31).cos()).collect();
        let perm = [3, 0, 5, 1, 4, 2];
        let mut xp = vec![0.0; t * 5];
        for (dst, &src) in perm.iter().enumerate() {
            xp[dst * 5..dst * 5 + 5].copy_from_slice(&x[src * 5..src * 5 + 5]);
        }
        let mut g = Graph::new(&ps);
        let a = g.constant(Tensor::new(vec![t, 5], x));
        let b = g.constant(Tensor::new(vec![t, 5], xp));
        let ya = enc.forward(&mut g, a);
        let yb = enc.forward(&mut g, b);
        for (dst, &src) in perm.iter().enumerate() {
            for (u, v) in g.value(yb).row(dst).iter().zip(g.value(ya).row(src)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        enc.use_position = true;
        let ya = enc.forward(&mut g, a);
        let yb = enc.forward(&mut g, b);
        let diff: f64 = g.value(yb).row(0).iter().zip(g.value(ya).row(perm[0])).map(|(u, v)| (u - v).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn position_encoding_values() {
        let pe = position_encoding(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.row(2)[0] - 2f64.sin()).abs() < 1e-15);
        assert!((pe.row(2)[3] - (2.0 / 100.0f64).cos()).abs() < 1e-15);
    }
}
