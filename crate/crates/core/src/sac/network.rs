use rand::Rng;

use crate::error::Result;
use crate::mdp::{action_mask_for, ActionId};
use crate::numerics::graph::{log_sum_exp, MASKED_LOGIT};
use crate::numerics::{Embedding, Graph, GruCell, Linear, ParamStore, Tensor, Var};
use crate::tokenizer::{TokenPair, Vocabulary};

/// Token embeddings, a GRU over the valid prefix, and a linear head with one
/// output per action. Used for the policy and for every Q-network.
#[derive(Clone, Copy, Debug)]
pub struct RecurrentNet {
    pub size_emb: Embedding,
    pub ipd_emb: Embedding,
    pub gru: GruCell,
    pub head: Linear,
    pub n: usize,
}

impl RecurrentNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: &Vocabulary,
        n: usize,
        embed: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let size_emb = Embedding::new(store, &format!("{prefix}.emb.size"), vocab.s_size(), embed, rng)?;
        let ipd_emb = Embedding::new(store, &format!("{prefix}.emb.ipd"), vocab.t_size(), embed, rng)?;
        let gru = GruCell::new(store, &format!("{prefix}.gru"), 2 * embed, hidden, rng)?;
        let head = Linear::new(store, &format!("{prefix}.head"), hidden, ActionId::count(n), rng)?;
        Ok(RecurrentNet {
            size_emb,
            ipd_emb,
            gru,
            head,
            n,
        })
    }

    pub fn actions(&self) -> usize {
        ActionId::count(self.n)
    }

    /// Final hidden state for a batch of states, `[B, hidden]`. Each row stops
    /// updating once its own valid prefix is consumed.
    pub fn hidden_state(&self, g: &mut Graph, batch: &[&TokenPair]) -> Result<Var> {
        let b = batch.len();
        let steps = batch.iter().map(|p| p.valid_len).max().unwrap_or(0);
        let mut h = g.constant(Tensor::zeros(b, self.gru.hidden));
        for t in 0..steps {
            let sizes: Vec<usize> = batch.iter().map(|p| p.size_tokens[t] as usize).collect();
            let ipds: Vec<usize> = batch.iter().map(|p| p.ipd_tokens[t] as usize).collect();
            let es = self.size_emb.forward(g, &sizes)?;
            let ei = self.ipd_emb.forward(g, &ipds)?;
            let x = g.concat_cols(&[es, ei]);
            let cand = self.gru.step(g, x, h);
            if batch.iter().all(|p| t < p.valid_len) {
                h = cand;
            } else {
                let live: Vec<f64> = batch.iter().map(|p| f64::from(u8::from(t < p.valid_len))).collect();
                let m = g.constant(Tensor::from_rows(b, 1, live));
                let delta = g.sub(cand, h);
                let upd = g.mul_col(delta, m);
                h = g.add(h, upd);
            }
        }
        Ok(h)
    }

    /// Raw head outputs, `[B, 2n+1]`.
    pub fn forward(&self, g: &mut Graph, batch: &[&TokenPair]) -> Result<Var> {
        let h = self.hidden_state(g, batch)?;
        Ok(self.head.forward(g, h))
    }

    /// Forward pass without gradients.
    pub fn eval(&self, store: &ParamStore, batch: &[&TokenPair]) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, batch)?;
        Ok(g.value(out).clone())
    }
}

/// Row-major validity masks for a batch of states.
pub fn batch_masks(batch: &[&TokenPair], n: usize) -> Vec<bool> {
    batch.iter().flat_map(|p| action_mask_for(p.valid_len, n)).collect()
}

/// Masked log-probabilities from policy logits.
pub fn masked_log_policy(g: &mut Graph, logits: Var, mask: Vec<bool>) -> Var {
    let masked = g.mask_fill(logits, mask);
    g.log_softmax(masked)
}

/// The same quantity evaluated on plain numbers.
pub fn log_policy_rows(logits: &Tensor, mask: &[bool]) -> Tensor {
    let cols = logits.cols();
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for (c, v) in row.iter_mut().enumerate() {
            let ok = if mask.len() == cols { mask[c] } else { mask[r * cols + c] };
            if !ok {
                *v = MASKED_LOGIT;
            }
        }
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}
