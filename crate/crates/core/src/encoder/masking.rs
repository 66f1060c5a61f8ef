use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tokenizer::{TokenId, TokenPair, Vocabulary};

pub const MASK_FRACTION: f64 = 0.15;
pub const MASK_PROB: f64 = 0.8;
pub const RANDOM_PROB: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Treatment {
    Mask,
    Random,
    Keep,
}

/// Positions chosen for one training example; the same slots are corrupted
/// in both streams.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    pub treatments: Vec<Treatment>,
}

/// `round_half_up(0.15 * valid_len)`, at least one.
pub fn mask_count(valid_len: usize) -> usize {
    ((MASK_FRACTION * valid_len as f64 + 0.5).floor() as usize).clamp(1, valid_len.max(1))
}

pub fn plan_masks<R: Rng + ?Sized>(pair: &TokenPair, rng: &mut R) -> MaskPlan {
    let v = pair.valid_len;
    if v == 0 {
        return MaskPlan {
            positions: Vec::new(),
            treatments: Vec::new(),
        };
    }
    let mut positions = sample(rng, v, mask_count(v)).into_vec();
    positions.sort_unstable();
    let treatments = positions
        .iter()
        .map(|_| {
            let u: f64 = rng.random();
            if u < MASK_PROB {
                Treatment::Mask
            } else if u < MASK_PROB + RANDOM_PROB {
                Treatment::Random
            } else {
                Treatment::Keep
            }
        })
        .collect();
    MaskPlan {
        positions,
        treatments,
    }
}

/// Corrupted copy of `pair` under `plan`. Random replacements are drawn
/// uniformly from the value ids of each feature.
pub fn apply_plan<R: Rng + ?Sized>(
    pair: &TokenPair,
    plan: &MaskPlan,
    vocab: &Vocabulary,
    rng: &mut R,
) -> TokenPair {
    let sp = &vocab.special_ids;
    let mut out = pair.clone();
    for (&p, &t) in plan.positions.iter().zip(&plan.treatments) {
        match t {
            Treatment::Mask => {
                out.size_tokens[p] = sp.size_mask;
                out.ipd_tokens[p] = sp.ipd_mask;
            }
            Treatment::Random => {
                out.size_tokens[p] = rng.random_range(1..=vocab.mtu) as TokenId;
                out.ipd_tokens[p] = rng.random_range(0..vocab.ipd_bins()) as TokenId;
            }
            Treatment::Keep => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(valid: usize, n: usize) -> TokenPair {
        TokenPair {
            size_tokens: (0..n).map(|i| if i < valid { 100 } else { 1501 }).collect(),
            ipd_tokens: (0..n).map(|i| if i < valid { 5 } else { 53 }).collect(),
            positions: (0..n as u32).collect(),
            valid_len: valid,
        }
    }

    #[test]
    fn counts_round_half_up() {
        assert_eq!(mask_count(64), 10);
        assert_eq!(mask_count(1), 1);
        assert_eq!(mask_count(3), 1);
        assert_eq!(mask_count(10), 2);
        assert_eq!(mask_count(30), 5);
    }

    #[test]
    fn positions_stay_inside_valid_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = pair(5, 16);
        for _ in 0..1000 {
            let plan = plan_masks(&p, &mut rng);
            assert_eq!(plan.positions.len(), 1);
            assert!(plan.positions.iter().all(|&i| i < 5));
        }
    }
}
