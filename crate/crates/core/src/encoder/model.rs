use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::numerics::{Embedding, Graph, LayerNorm, Linear, ParamStore, Tensor, Var};
use crate::tokenizer::{TokenPair, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n: usize,
    pub d_k: usize,
    pub n_layers: usize,
    pub attn_heads: usize,
    pub d_ff: usize,
    pub t_size: usize,
    pub s_size: usize,
}

impl EncoderConfig {
    pub fn desk(vocab: &Vocabulary) -> Self {
        EncoderConfig {
            n: 64,
            d_k: 32,
            n_layers: 2,
            attn_heads: 2,
            d_ff: 64,
            t_size: vocab.t_size(),
            s_size: vocab.s_size(),
        }
    }

    pub fn paper(vocab: &Vocabulary) -> Self {
        EncoderConfig {
            n: 512,
            d_k: 128,
            n_layers: 6,
            attn_heads: 8,
            d_ff: 512,
            t_size: vocab.t_size(),
            s_size: vocab.s_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.n,
            self.d_k,
            self.n_layers,
            self.attn_heads,
            self.d_ff,
            self.t_size,
            self.s_size,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if self.d_k % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "d_k = {} is not divisible by {} heads",
                self.d_k, self.attn_heads
            )));
        }
        Ok(())
    }
}

/// Query/key/value/output projections of one multi-head attention.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttnParams {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(AttnParams {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
        })
    }

    /// Multi-head attention with queries from `xq` and keys/values from `xkv`.
    fn forward(&self, g: &mut Graph, xq: Var, xkv: Var, heads: usize, key_mask: Option<&[bool]>) -> Var {
        let q = self.q.forward(g, xq);
        let k = self.k.forward(g, xkv);
        let v = self.v.forward(g, xkv);
        let d = g.value(q).cols();
        let dh = d / heads;
        let out = if heads == 1 {
            crate::numerics::attention(g, q, k, v, key_mask)
        } else {
            let parts: Vec<Var> = (0..heads)
                .map(|h| {
                    let (a, b) = (h * dh, (h + 1) * dh);
                    let qh = g.slice_cols(q, a, b);
                    let kh = g.slice_cols(k, a, b);
                    let vh = g.slice_cols(v, a, b);
                    crate::numerics::attention(g, qh, kh, vh, key_mask)
                })
                .collect();
            g.concat_cols(&parts)
        };
        self.o.forward(g, out)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// One encoder block: per-stream self-attention, bi-cross attention and a
/// feed-forward network, each wrapped in a residual add followed by layer
/// normalisation.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub self_p: AttnParams,
    pub self_h: AttnParams,
    pub cross_p: AttnParams,
    pub cross_h: AttnParams,
    pub ffn_p: Ffn,
    pub ffn_h: Ffn,
    pub norms: [LayerNorm; 6],
}

/// Intermediate states of one block, for inspection and tests.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    /// `P + Attn(P)` before normalisation.
    pub self_sum_p: Tensor,
    pub self_sum_h: Tensor,
    /// Normalised self-attention outputs (`h_P`, `h_H`).
    pub h_p: Tensor,
    pub h_h: Tensor,
    /// `h_P + Attn(h_P, H)` before normalisation.
    pub cross_sum_p: Tensor,
    pub cross_sum_h: Tensor,
    pub out_p: Tensor,
    pub out_h: Tensor,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub h_p: Tensor,
    pub h_h: Tensor,
    pub logits_p: Tensor,
    pub logits_h: Tensor,
}

/// Dual-stream masked encoder over size and IPD token sequences.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub(crate) size_emb: Embedding,
    pub(crate) ipd_emb: Embedding,
    pub(crate) blocks: Vec<Block>,
    pub(crate) size_head: Linear,
    pub(crate) ipd_head: Linear,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    config: EncoderConfig,
    vocab_hash: String,
    checkpoint_sha256: String,
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_k;
        let size_emb = Embedding::new(&mut store, "emb.size", config.s_size, d, &mut rng)?;
        let ipd_emb = Embedding::new(&mut store, "emb.ipd", config.t_size, d, &mut rng)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("block{l}");
            let self_p = AttnParams::new(&mut store, &format!("{p}.self_p"), d, &mut rng)?;
            let self_h = AttnParams::new(&mut store, &format!("{p}.self_h"), d, &mut rng)?;
            let cross_p = AttnParams::new(&mut store, &format!("{p}.cross_p"), d, &mut rng)?;
            let cross_h = AttnParams::new(&mut store, &format!("{p}.cross_h"), d, &mut rng)?;
            let ffn_p = Ffn {
                up: Linear::new(&mut store, &format!("{p}.ffn_p.up"), d, config.d_ff, &mut rng)?,
                down: Linear::new(&mut store, &format!("{p}.ffn_p.down"), config.d_ff, d, &mut rng)?,
            };
            let ffn_h = Ffn {
                up: Linear::new(&mut store, &format!("{p}.ffn_h.up"), d, config.d_ff, &mut rng)?,
                down: Linear::new(&mut store, &format!("{p}.ffn_h.down"), config.d_ff, d, &mut rng)?,
            };
            let names = ["ln_self_p", "ln_self_h", "ln_cross_p", "ln_cross_h", "ln_ffn_p", "ln_ffn_h"];
            let mut norms = Vec::with_capacity(6);
            for nm in names {
                norms.push(LayerNorm::new(&mut store, &format!("{p}.{nm}"), d)?);
            }
            blocks.push(Block {
                self_p,
                self_h,
                cross_p,
                cross_h,
                ffn_p,
                ffn_h,
                norms: norms.try_into().expect("six norms"),
            });
        }
        let size_head = Linear::new(&mut store, "head.size", d, config.s_size, &mut rng)?;
        let ipd_head = Linear::new(&mut store, "head.ipd", d, config.t_size, &mut rng)?;
        Ok(EncoderModel {
            config,
            store,
            size_emb,
            ipd_emb,
            blocks,
            size_head,
            ipd_head,
        })
    }

    /// Sinusoidal position encoding for the given absolute positions.
    pub fn position_encoding(positions: &[u32], d: usize) -> Tensor {
        let mut t = Tensor::zeros(positions.len(), d);
        for (r, &pos) in positions.iter().enumerate() {
            for i in 0..d / 2 {
                let freq = 10000f64.powf(-(2.0 * i as f64) / d as f64);
                let a = pos as f64 * freq;
                t.set(r, 2 * i, a.sin());
                t.set(r, 2 * i + 1, a.cos());
            }
            if d % 2 == 1 {
                let freq = 10000f64.powf(-((d - 1) as f64) / d as f64);
                t.set(r, d - 1, (pos as f64 * freq).sin());
            }
        }
        t
    }

    fn check_pair(&self, pair: &TokenPair) -> Result<()> {
        if pair.len() != self.config.n {
            return Err(Error::shape(format!(
                "token pair of length {} for an encoder with n = {}",
                pair.len(),
                self.config.n
            )));
        }
        if pair.ipd_tokens.len() != pair.len() || pair.positions.len() != pair.len() {
            return Err(Error::shape("token sequences differ in length"));
        }
        if pair.valid_len == 0 || pair.valid_len > pair.len() {
            return Err(Error::invalid(format!("valid_len {} out of range", pair.valid_len)));
        }
        Ok(())
    }

    /// Builds the hidden states for the first `rows` slots of `pair`.
    ///
    /// With `rows == valid_len` this is exactly the valid part of the full
    /// forward pass: PAD slots never enter any key set, so dropping them
    /// changes nothing for the remaining rows.
    pub fn hidden(
        &self,
        g: &mut Graph,
        pair: &TokenPair,
        rows: usize,
        mut trace: Option<&mut Vec<BlockTrace>>,
    ) -> Result<(Var, Var)> {
        let size_ids: Vec<usize> = pair.size_tokens[..rows].iter().map(|&t| t as usize).collect();
        let ipd_ids: Vec<usize> = pair.ipd_tokens[..rows].iter().map(|&t| t as usize).collect();
        let mask: Vec<bool> = (0..rows).map(|i| i < pair.valid_len).collect();
        let key_mask = if rows > pair.valid_len { Some(mask.as_slice()) } else { None };

        let pe = g.constant(Self::position_encoding(&pair.positions[..rows], self.config.d_k));
        let ep = self.size_emb.forward(g, &size_ids)?;
        let eh = self.ipd_emb.forward(g, &ipd_ids)?;
        let mut p = g.add(ep, pe);
        let mut h = g.add(eh, pe);
        let heads = self.config.attn_heads;

        for b in &self.blocks {
            let ap = b.self_p.forward(g, p, p, heads, key_mask);
            let ah = b.self_h.forward(g, h, h, heads, key_mask);
            let sp = g.add(p, ap);
            let sh = g.add(h, ah);
            let hp = b.norms[0].forward(g, sp);
            let hh = b.norms[1].forward(g, sh);

            // Each stream queries the other stream's block input.
            let cp = b.cross_p.forward(g, hp, h, heads, key_mask);
            let ch = b.cross_h.forward(g, hh, p, heads, key_mask);
            let csp = g.add(hp, cp);
            let csh = g.add(hh, ch);
            let hp2 = b.norms[2].forward(g, csp);
            let hh2 = b.norms[3].forward(g, csh);

            let fp = b.ffn_p.forward(g, hp2);
            let fh = b.ffn_h.forward(g, hh2);
            let fsp = g.add(hp2, fp);
            let fsh = g.add(hh2, fh);
            let out_p = b.norms[4].forward(g, fsp);
            let out_h = b.norms[5].forward(g, fsh);

            if let Some(tr) = trace.as_deref_mut() {
                tr.push(BlockTrace {
                    self_sum_p: g.value(sp).clone(),
                    self_sum_h: g.value(sh).clone(),
                    h_p: g.value(hp).clone(),
                    h_h: g.value(hh).clone(),
                    cross_sum_p: g.value(csp).clone(),
                    cross_sum_h: g.value(csh).clone(),
                    out_p: g.value(out_p).clone(),
                    out_h: g.value(out_h).clone(),
                });
            }
            p = out_p;
            h = out_h;
        }
        Ok((p, h))
    }

    /// Logits of both heads for the selected rows of the final states.
    pub fn head_logits(&self, g: &mut Graph, hp: Var, hh: Var, rows: &[usize]) -> (Var, Var) {
        let sp = g.select_rows(hp, rows.to_vec());
        let sh = g.select_rows(hh, rows.to_vec());
        (self.size_head.forward(g, sp), self.ipd_head.forward(g, sh))
    }

    /// Full forward pass over all `n` slots.
    pub fn encode(&self, pair: &TokenPair) -> Result<EncoderOutput> {
        self.encode_traced(pair).map(|(o, _)| o)
    }

    pub fn encode_traced(&self, pair: &TokenPair) -> Result<(EncoderOutput, Vec<BlockTrace>)> {
        self.check_pair(pair)?;
        let mut g = Graph::new(&self.store);
        let mut trace = Vec::new();
        let (hp, hh) = self.hidden(&mut g, pair, pair.len(), Some(&mut trace))?;
        let all: Vec<usize> = (0..pair.len()).collect();
        let (lp, lh) = self.head_logits(&mut g, hp, hh, &all);
        let out = EncoderOutput {
            h_p: g.value(hp).clone(),
            h_h: g.value(hh).clone(),
            logits_p: g.value(lp).clone(),
            logits_h: g.value(lh).clone(),
        };
        Ok((out, trace))
    }

    /// Logits for selected slots, computing only the valid prefix.
    pub fn logits_at(&self, pair: &TokenPair, rows: &[usize]) -> Result<(Tensor, Tensor)> {
        self.check_pair(pair)?;
        if let Some(&r) = rows.iter().find(|&&r| r >= pair.valid_len) {
            return Err(Error::invalid(format!("slot {r} is padding")));
        }
        let mut g = Graph::new(&self.store);
        let (hp, hh) = self.hidden(&mut g, pair, pair.valid_len, None)?;
        let (lp, lh) = self.head_logits(&mut g, hp, hh, rows);
        Ok((g.value(lp).clone(), g.value(lh).clone()))
    }

    /// Sets every parameter whose name starts with `prefix` to zero and
    /// returns how many tensors were touched.
    pub fn zero_params(&mut self, prefix: &str) -> usize {
        let ids: Vec<_> = self
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect();
        for &id in &ids {
            self.store.get_mut(id).scale_assign(0.0);
        }
        ids.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn fingerprint(&self) -> String {
        checkpoint::fingerprint(&self.store)
    }

    /// Writes `encoder.json`/`encoder.bin` plus a sidecar binding the
    /// weights to the vocabulary hash.
    pub fn save(&self, dir: &Path, vocab: &Vocabulary) -> Result<()> {
        fs::create_dir_all(dir)?;
        let sha = checkpoint::save(&self.store, &dir.join("encoder"))?;
        let sidecar = Sidecar {
            version: 1,
            config: self.config.clone(),
            vocab_hash: vocab.hash(),
            checkpoint_sha256: sha,
        };
        fs::write(dir.join("encoder.meta.json"), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, vocab: &Vocabulary) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(dir.join("encoder.meta.json"))?)?;
        if sidecar.vocab_hash != vocab.hash() {
            return Err(Error::invalid("encoder checkpoint was trained with a different vocabulary"));
        }
        let mut model = EncoderModel::new(sidecar.config, 0)?;
        checkpoint::load_into(&mut model.store, &dir.join("encoder"))?;
        if model.fingerprint() != sidecar.checkpoint_sha256 {
            return Err(Error::invalid("encoder checkpoint hash does not match its sidecar"));
        }
        model.store.freeze_all();
        Ok(model)
    }
}
