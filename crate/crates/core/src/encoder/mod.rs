//! Dual-stream masked encoder over size and IPD token sequences.

mod masking;
mod model;

pub use masking::{apply_plan, mask_count, plan_masks, MaskPlan, Treatment};
pub use model::{BlockTrace, EncoderConfig, EncoderModel, EncoderOutput};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Gradients, Graph, Tensor, Var};
use crate::tokenizer::{ChunkSet, TokenId, TokenPair, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Long flows contribute at most this many evenly spaced chunks.
    pub max_chunks_per_flow: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 600,
            batch_size: 16,
            lr: 1e-3,
            max_chunks_per_flow: 4,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean masked-slot cross-entropy (size + IPD) per step.
    pub losses: Vec<f64>,
    pub chunks: usize,
    pub epochs: usize,
}

impl PretrainReport {
    /// Means over consecutive windows of `w` steps.
    pub fn smoothed(&self, w: usize) -> Vec<f64> {
        self.losses
            .chunks(w.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

fn training_chunks(corpus: &[ChunkSet], per_flow: usize) -> Vec<&TokenPair> {
    let mut out = Vec::new();
    for set in corpus {
        let k = set.chunks.len();
        if k <= per_flow {
            out.extend(set.chunks.iter());
        } else {
            let take = per_flow.max(1);
            for j in 0..take {
                let idx = if take == 1 { 0 } else { j * (k - 1) / (take - 1) };
                out.push(&set.chunks[idx]);
            }
        }
    }
    out
}

/// Summed masked cross-entropy of both heads for one corrupted chunk.
pub fn masked_loss(
    g: &mut Graph,
    model: &EncoderModel,
    corrupted: &TokenPair,
    target: &TokenPair,
    positions: &[usize],
) -> Result<Var> {
    let (hp, hh) = model.hidden(g, corrupted, corrupted.valid_len, None)?;
    let (lp, lh) = model.head_logits(g, hp, hh, positions);
    let ls = g.log_softmax(lp);
    let lh = g.log_softmax(lh);
    let ts: Vec<usize> = positions.iter().map(|&p| target.size_tokens[p] as usize).collect();
    let th: Vec<usize> = positions.iter().map(|&p| target.ipd_tokens[p] as usize).collect();
    let ps = g.pick(ls, ts);
    let ph = g.pick(lh, th);
    let both = g.add(ps, ph);
    let s = g.sum(both);
    Ok(g.scale(s, -1.0))
}

/// Mask-Fill pre-training with dynamic masking: every visit of a chunk draws
/// a fresh plan.
pub fn pretrain(
    model: &mut EncoderModel,
    corpus: &[ChunkSet],
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("pretrain needs batch_size >= 1 and lr > 0".into()));
    }
    let chunks = training_chunks(corpus, cfg.max_chunks_per_flow);
    if chunks.is_empty() {
        return Err(Error::invalid("pre-training corpus is empty"));
    }
    for c in &chunks {
        if c.len() != model.config.n {
            return Err(Error::shape(format!(
                "chunk of length {} for an encoder with n = {}",
                c.len(),
                model.config.n
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_b127);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut opt = AdamState::new(&model.store);
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut cursor = order.len();
    let mut epochs = 0;
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut grads = Gradients::empty(model.store.len());
        let mut total = 0.0;
        let mut slots = 0usize;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
                epochs += 1;
            }
            let target = chunks[order[cursor]];
            cursor += 1;
            let plan = plan_masks(target, &mut rng);
            let corrupted = apply_plan(target, &plan, vocab, &mut rng);
            let mut g = Graph::new(&model.store);
            let loss = masked_loss(&mut g, model, &corrupted, target, &plan.positions)?;
            total += g.value(loss).item();
            slots += plan.positions.len();
            grads.accumulate(&g.backward(loss));
        }
        let mean = total / slots as f64;
        if !mean.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "pre-training diverged at step {step} (loss {mean}, previous {:?})",
                losses.last()
            )));
        }
        grads.scale(1.0 / slots as f64);
        if cfg.grad_clip > 0.0 {
            grads.clip_global_norm(cfg.grad_clip);
        }
        opt.step(&mut model.store, &grads, &adam);
        losses.push(mean);
    }
    Ok(PretrainReport {
        losses,
        chunks: chunks.len(),
        epochs,
    })
}

/// Fraction of masked slots whose argmax prediction recovers the original
/// token, over both streams. Every slot of every chunk is masked in turn
/// by a fresh plan drawn from `seed`.
pub fn masked_accuracy(
    model: &EncoderModel,
    chunks: &[&TokenPair],
    vocab: &Vocabulary,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = &vocab.special_ids;
    let (mut hit, mut total) = (0usize, 0usize);
    for &c in chunks {
        let plan = plan_masks(c, &mut rng);
        let mut corrupted = c.clone();
        for &p in &plan.positions {
            corrupted.size_tokens[p] = sp.size_mask;
            corrupted.ipd_tokens[p] = sp.ipd_mask;
        }
        let filled = fill(model, &corrupted, vocab, &FillMode::Greedy)?;
        for &p in &plan.positions {
            hit += usize::from(filled.size_tokens[p] == c.size_tokens[p]);
            hit += usize::from(filled.ipd_tokens[p] == c.ipd_tokens[p]);
            total += 2;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// How MASK slots are decoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    Greedy,
    /// Inclusive id ranges per feature; `None` leaves a feature unrestricted.
    Constrained {
        size: Option<(TokenId, TokenId)>,
        ipd: Option<(TokenId, TokenId)>,
    },
    /// Samples from the softmax over value ids.
    Sample { seed: u64 },
}

fn candidates(values: std::ops::Range<TokenId>, range: Option<(TokenId, TokenId)>) -> Result<(TokenId, TokenId)> {
    let (lo, hi) = (values.start, values.end - 1);
    let (lo, hi) = match range {
        None => (lo, hi),
        Some((a, b)) => (a.max(lo), b.min(hi)),
    };
    if lo > hi {
        return Err(Error::invalid(format!("constrained fill range {range:?} has no value ids")));
    }
    Ok((lo, hi))
}

fn argmax_in(row: &[f64], lo: TokenId, hi: TokenId) -> TokenId {
    let mut best = lo;
    for id in lo..=hi {
        if row[id as usize] > row[best as usize] {
            best = id;
        }
    }
    best
}

fn sample_in<R: Rng>(row: &[f64], lo: TokenId, hi: TokenId, rng: &mut R) -> TokenId {
    let slice = &row[lo as usize..=hi as usize];
    let m = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = slice.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * z;
    for (i, &wi) in w.iter().enumerate() {
        if u < wi {
            return lo + i as TokenId;
        }
        u -= wi;
    }
    hi
}

/// Replaces every MASK with a value id predicted by its head. Other slots
/// are returned untouched.
pub fn fill(model: &EncoderModel, pair: &TokenPair, vocab: &Vocabulary, mode: &FillMode) -> Result<TokenPair> {
    let sp = &vocab.special_ids;
    let rows: Vec<usize> = (0..pair.valid_len)
        .filter(|&i| pair.size_tokens[i] == sp.size_mask || pair.ipd_tokens[i] == sp.ipd_mask)
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid("fill called on a pair without MASK tokens"));
    }
    let (size_range, ipd_range) = match mode {
        FillMode::Constrained { size, ipd } => (*size, *ipd),
        _ => (None, None),
    };
    let (slo, shi) = candidates(1..vocab.mtu + 1, size_range)?;
    let (ilo, ihi) = candidates(0..vocab.ipd_bins() as TokenId, ipd_range)?;
    let (lp, lh): (Tensor, Tensor) = model.logits_at(pair, &rows)?;
    let mut rng = match mode {
        FillMode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        _ => None,
    };
    let mut out = pair.clone();
    for (k, &r) in rows.iter().enumerate() {
        if out.size_tokens[r] == sp.size_mask {
            out.size_tokens[r] = match rng.as_mut() {
                Some(rng) => sample_in(lp.row(k), slo, shi, rng),
                None => argmax_in(lp.row(k), slo, shi),
            };
        }
        if out.ipd_tokens[r] == sp.ipd_mask {
            out.ipd_tokens[r] = match rng.as_mut() {
                Some(rng) => sample_in(lh.row(k), ilo, ihi, rng),
                None => argmax_in(lh.row(k), ilo, ihi),
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{tokenize, tokenize_slice};
    use crate::traffic::{Flow, Label};

    fn vocab() -> Vocabulary {
        let edges: Vec<f64> = (0..=53).map(|i| -7.0 + 10.0 * i as f64 / 53.0).collect();
        Vocabulary::from_edges(1500, 1606, edges).unwrap()
    }

    fn tiny(v: &Vocabulary, n: usize) -> EncoderConfig {
        EncoderConfig {
            n,
            d_k: 8,
            n_layers: 1,
            attn_heads: 2,
            d_ff: 16,
            t_size: v.t_size(),
            s_size: v.s_size(),
        }
    }

    fn pair(v: &Vocabulary, sizes: &[u32], n: usize) -> TokenPair {
        let ipds: Vec<f64> = (0..sizes.len()).map(|i| if i == 0 { 0.0 } else { 1e-3 }).collect();
        tokenize_slice(sizes, &ipds, 0, v, n)
    }

    #[test]
    fn shapes_and_config_checks() {
        let v = vocab();
        let m = EncoderModel::new(tiny(&v, 8), 1).unwrap();
        let out = m.encode(&pair(&v, &[100, 200, 300], 8)).unwrap();
        assert_eq!((out.h_p.rows(), out.h_p.cols()), (8, 8));
        assert_eq!((out.logits_p.rows(), out.logits_p.cols()), (8, v.s_size()));
        assert_eq!((out.logits_h.rows(), out.logits_h.cols()), (8, v.t_size()));
        assert!(m.encode(&pair(&v, &[100], 4)).is_err());
        let mut bad = tiny(&v, 8);
        bad.attn_heads = 3;
        assert!(EncoderModel::new(bad, 1).is_err());
    }

    #[test]
    fn prefix_forward_matches_full_forward() {
        let v = vocab();
        let m = EncoderModel::new(tiny(&v, 8), 2).unwrap();
        let p = pair(&v, &[60, 1500, 70, 400, 90], 8);
        let full = m.encode(&p).unwrap();
        let rows = [0, 2, 4];
        let (lp, lh) = m.logits_at(&p, &rows).unwrap();
        for (k, &r) in rows.iter().enumerate() {
            assert_eq!(lp.row(k), full.logits_p.row(r));
            assert_eq!(lh.row(k), full.logits_h.row(r));
        }
    }

    #[test]
    fn greedy_fill_only_touches_masks() {
        let v = vocab();
        let m = EncoderModel::new(tiny(&v, 8), 3).unwrap();
        let mut p = pair(&v, &[60, 70, 80, 90], 8);
        p.ipd_tokens[2] = v.special_ids.ipd_mask;
        let f = fill(&m, &p, &v, &FillMode::Greedy).unwrap();
        for i in 0..8 {
            if i != 2 {
                assert_eq!(f.ipd_tokens[i], p.ipd_tokens[i]);
            }
            assert_eq!(f.size_tokens[i], p.size_tokens[i]);
        }
        assert!(v.is_ipd_value(f.ipd_tokens[2]));
        assert_eq!(f, fill(&m, &p, &v, &FillMode::Greedy).unwrap());
    }

    #[test]
    fn constrained_fill_respects_ranges() {
        let v = vocab();
        let m = EncoderModel::new(tiny(&v, 8), 4).unwrap();
        let mut p = pair(&v, &[60, 70, 80], 8);
        p.size_tokens[1] = v.special_ids.size_mask;
        p.ipd_tokens[1] = v.special_ids.ipd_mask;
        let single = FillMode::Constrained {
            size: Some((777, 777)),
            ipd: Some((13, 13)),
        };
        let f = fill(&m, &p, &v, &single).unwrap();
        assert_eq!((f.size_tokens[1], f.ipd_tokens[1]), (777, 13));
        let empty = FillMode::Constrained {
            size: Some((1501, 1600)),
            ipd: None,
        };
        assert!(fill(&m, &p, &v, &empty).is_err());
        assert!(fill(&m, &pair(&v, &[60], 8), &v, &FillMode::Greedy).is_err());
    }

    #[test]
    fn constant_corpus_is_learned_exactly() {
        let v = vocab();
        let flows: Vec<Flow> = (0..4)
            .map(|i| {
                Flow::from_sizes_and_ipds(format!("c{i}"), Label::Benign, &[500; 6], &[0.0, 1e-3, 1e-3, 1e-3, 1e-3, 1e-3])
                    .unwrap()
            })
            .collect();
        let corpus: Vec<ChunkSet> = flows.iter().map(|f| tokenize(f, &v, 8)).collect();
        let mut m = EncoderModel::new(tiny(&v, 8), 5).unwrap();
        let cfg = PretrainConfig {
            steps: 150,
            batch_size: 4,
            lr: 1e-2,
            ..Default::default()
        };
        let rep = pretrain(&mut m, &corpus, &v, &cfg).unwrap();
        assert!(rep.losses.last().unwrap() < &rep.losses[0]);
        let chunks: Vec<&TokenPair> = corpus.iter().map(|c| &c.chunks[0]).collect();
        assert_eq!(masked_accuracy(&m, &chunks, &v, 9).unwrap(), 1.0);
    }
}
