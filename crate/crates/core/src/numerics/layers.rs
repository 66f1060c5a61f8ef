//! Parameterised building blocks shared by the encoder and the agent.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const EMBEDDING_STD: f64 = 0.02;

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::xavier(fan_in, fan_out, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out))?;
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(1, width, 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, width))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub width: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = store.add(
            format!("{name}.table"),
            Tensor::normal(vocab, width, EMBEDDING_STD, rng),
        )?;
        Ok(Embedding {
            table,
            vocab,
            width,
        })
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::invalid(format!(
                "token id {bad} outside embedding of size {}",
                self.vocab
            )));
        }
        let t = g.param(self.table);
        Ok(g.gather(t, ids.to_vec()))
    }
}

/// Gated recurrent unit cell.
///
/// `z = σ(x Wz + h Uz + bz)`, `r = σ(x Wr + h Ur + br)`,
/// `ĥ = tanh(x Wh + (r ⊙ h) Uh + bh)`, `h' = (1 - z) ⊙ h + z ⊙ ĥ`.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub input_z: Linear,
    pub input_r: Linear,
    pub input_h: Linear,
    pub hidden_z: ParamId,
    pub hidden_r: ParamId,
    pub hidden_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input_z = Linear::new(store, &format!("{name}.wz"), input, hidden, rng)?;
        let input_r = Linear::new(store, &format!("{name}.wr"), input, hidden, rng)?;
        let input_h = Linear::new(store, &format!("{name}.wh"), input, hidden, rng)?;
        let hidden_z = store.add(format!("{name}.uz"), Tensor::xavier(hidden, hidden, rng))?;
        let hidden_r = store.add(format!("{name}.ur"), Tensor::xavier(hidden, hidden, rng))?;
        let hidden_h = store.add(format!("{name}.uh"), Tensor::xavier(hidden, hidden, rng))?;
        Ok(GruCell {
            input_z,
            input_r,
            input_h,
            hidden_z,
            hidden_r,
            hidden_h,
            input,
            hidden,
        })
    }

    /// One step for a batch: `x: [B, input]`, `h: [B, hidden]`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let uz = g.param(self.hidden_z);
        let ur = g.param(self.hidden_r);
        let uh = g.param(self.hidden_h);

        let xz = self.input_z.forward(g, x);
        let hz = g.matmul(h, uz);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);

        let xr = self.input_r.forward(g, x);
        let hr = g.matmul(h, ur);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);

        let rh = g.mul(r, h);
        let xh = self.input_h.forward(g, x);
        let hh = g.matmul(rh, uh);
        let cand = g.add(xh, hh);
        let cand = g.tanh(cand);

        // h + z * (cand - h)
        let delta = g.sub(cand, h);
        let upd = g.mul(z, delta);
        g.add(h, upd)
    }
}

/// Scaled dot-product attention `softmax(Q Kᵀ / √d) V`, with key columns
/// where `key_mask` is `false` receiving zero probability.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, key_mask: Option<&[bool]>) -> Var {
    let d = g.value(q).cols();
    let scores = g.matmul_nt(q, k);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let scores = match key_mask {
        Some(mask) => g.mask_fill(scores, mask.to_vec()),
        None => scores,
    };
    let probs = g.softmax(scores);
    g.matmul(probs, v)
}

/// Checked variant of [`attention`] for callers holding plain tensors.
pub fn attention_tensors(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_mask: Option<&[bool]>,
) -> Result<Tensor> {
    if q.cols() == 0 {
        return Err(Error::shape("attention with d_k = 0"));
    }
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "attention Q[{}x{}] K[{}x{}] V[{}x{}]",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    if let Some(m) = key_mask {
        if m.len() != k.rows() {
            return Err(Error::shape(format!(
                "key mask of length {} for {} keys",
                m.len(),
                k.rows()
            )));
        }
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = attention(&mut g, qv, kv, vv, key_mask);
    Ok(g.value(out).clone())
}
