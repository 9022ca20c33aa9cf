//! Layers built on the gradient tape, plus parameter initialization and Adam.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, rows, cols, bound)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(rows, cols, data).expect("shape is consistent by construction")
}

/// The diagonal of a `d × d` matrix, initialized to the identity.
#[derive(Clone, Copy, Debug)]
pub struct DiagonalBilinear {
    pub diag: ParamId,
}

impl DiagonalBilinear {
    pub fn identity(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            diag: ps.add(name, Tensor::filled(1, dim, 1.0)),
        }
    }

    pub fn dim(&self, ps: &ParamStore) -> usize {
        ps.value(self.diag).cols()
    }

    pub fn score(&self, g: &mut Graph, ps: &ParamStore, x: Var, y: Var) -> Result<Var> {
        let d = g.param(ps, self.diag);
        g.bilinear(x, d, y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: ps.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out)),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(1, fan_out)),
        }
    }

    /// `x · W + b` for an `n × fan_in` input.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

/// Stack of dense layers. Dropout follows every activation except the last
/// layer's, and is only active on training graphs.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub layers: Vec<Linear>,
    pub activations: Vec<Activation>,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        widths: &[usize],
        activations: &[Activation],
        dropout: f64,
    ) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 {
            return Err(Error::invalid(format!(
                "feed-forward `{name}` needs one activation per layer"
            )));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Ok(Self {
            layers,
            activations: activations.to_vec(),
            dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (layer, act)) in self.layers.iter().zip(&self.activations).enumerate() {
            h = layer.forward(g, ps, h)?;
            if *act == Activation::Relu {
                h = g.relu(h);
            }
            if i < last {
                h = g.dropout(h, self.dropout);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerNormParams {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNormParams {
    fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: ps.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0)),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(1, dim)),
        }
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, 1e-5);
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        let s = g.mul_row(n, gain)?;
        g.add_row(s, bias)
    }
}

/// Post-norm Transformer encoder layer: multi-head scaled dot-product
/// self-attention and a position-wise feed-forward block, each wrapped in a
/// residual connection followed by layer normalization.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub heads: usize,
    pub d_head: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    norm1: LayerNormParams,
    ffn: FeedForward,
    norm2: LayerNormParams,
    dropout: f64,
}

impl EncoderLayer {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        heads: usize,
        d_head: usize,
        ffn_width: usize,
        dropout: f64,
    ) -> Result<Self> {
        if heads == 0 || d_head == 0 {
            return Err(Error::invalid("attention needs at least one head of non-zero width"));
        }
        let d_model = heads * d_head;
        Ok(Self {
            heads,
            d_head,
            query: Linear::new(ps, rng, &format!("{name}.query"), d_model, d_model),
            key: Linear::new(ps, rng, &format!("{name}.key"), d_model, d_model),
            value: Linear::new(ps, rng, &format!("{name}.value"), d_model, d_model),
            output: Linear::new(ps, rng, &format!("{name}.output"), d_model, d_model),
            norm1: LayerNormParams::new(ps, &format!("{name}.norm1"), d_model),
            ffn: FeedForward::new(
                ps,
                rng,
                &format!("{name}.ffn"),
                &[d_model, ffn_width, d_model],
                &[Activation::Relu, Activation::Identity],
                dropout,
            )?,
            norm2: LayerNormParams::new(ps, &format!("{name}.norm2"), d_model),
            dropout,
        })
    }

    pub fn d_model(&self) -> usize {
        self.heads * self.d_head
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        self.forward_with_attention(g, ps, x).map(|(out, _)| out)
    }

    /// Also returns each head's `n × n` attention weights.
    pub fn forward_with_attention(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<(Var, Vec<Tensor>)> {
        let (n, d) = g.shape(x);
        if n == 0 {
            return Err(Error::Empty("self-attention"));
        }
        if d != self.d_model() {
            return Err(Error::Shape {
                op: "self-attention",
                left: (n, d),
                right: (n, self.d_model()),
            });
        }
        let q = self.query.forward(g, ps, x)?;
        let k = self.key.forward(g, ps, x)?;
        let v = self.value.forward(g, ps, x)?;
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.d_head;
            let qh = g.slice_cols(q, start, self.d_head)?;
            let kh = g.slice_cols(k, start, self.d_head)?;
            let vh = g.slice_cols(v, start, self.d_head)?;
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt)?;
            let logits = g.scale(logits, scale);
            let attn = g.softmax(logits)?;
            weights.push(g.value(attn).clone());
            let attn = g.dropout(attn, self.dropout);
            head_outputs.push(g.matmul(attn, vh)?);
        }
        let heads = g.hconcat(&head_outputs)?;
        let attended = self.output.forward(g, ps, heads)?;
        let attended = g.dropout(attended, self.dropout);
        let res1 = g.add(x, attended)?;
        let h1 = self.norm1.forward(g, ps, res1)?;
        let ff = self.ffn.forward(g, ps, h1)?;
        let ff = g.dropout(ff, self.dropout);
        let res2 = g.add(h1, ff)?;
        Ok((self.norm2.forward(g, ps, res2)?, weights))
    }
}

/// Adam with per-entry lazy updates: entries whose gradient is exactly zero
/// in a step keep their value and moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(ps: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = ps.ids().map(|id| vec![0.0; ps.value(id).len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Descends along the gradients currently held in `ps`.
    pub fn step(&mut self, ps: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = ps.ids().collect();
        for id in ids {
            let grad = ps.grad(id).data().to_vec();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let value = ps.value_mut(id).data_mut();
            for (i, gi) in grad.iter().enumerate() {
                if *gi == 0.0 {
                    continue;
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
