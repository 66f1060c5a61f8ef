use std::collections::HashSet;

use flowmimic::encoder::{mask_count, plan_masks, Treatment};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Draws `plans` mask plans over benign chunks, checks the count rule on
/// each and returns the Mask/Random/Keep shares.
pub fn treatment_shares(plans: usize) -> [f64; 3] {
    let vocab = super::vocab();
    let flows = super::benign(300, 21);
    let pairs = super::pairs(&vocab, &flows, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut counts = [0usize; 3];
    let mut valid_total = 0usize;
    let mut masked_total = 0usize;
    for i in 0..plans {
        let pair = &pairs[i % pairs.len()];
        let v = pair.valid_len;
        let plan = plan_masks(pair, &mut rng);
        // Round half up, never below one slot.
        let expected = ((15 * v + 50) / 100).max(1);
        assert_eq!(plan.positions.len(), expected, "valid_len {v}");
        assert_eq!(mask_count(v), expected);
        assert_eq!(plan.treatments.len(), expected);
        let distinct: HashSet<usize> = plan.positions.iter().copied().collect();
        assert_eq!(distinct.len(), expected);
        assert!(plan.positions.iter().all(|&p| p < v));
        for t in &plan.treatments {
            counts[match t {
                Treatment::Mask => 0,
                Treatment::Random => 1,
                Treatment::Keep => 2,
            }] += 1;
        }
        valid_total += v;
        masked_total += expected;
    }
    let total = counts.iter().sum::<usize>() as f64;
    let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    println!("treatments {shares:?}, masked share {:.4}", masked_total as f64 / valid_total as f64);
    [shares[0], shares[1], shares[2]]
}

