mod common;

use std::sync::Arc;

use flowmimic::detectors::{Detector, DetectorOracle, Oracle, ThresholdDetector};
use flowmimic::mdp::action_mask_for;
use flowmimic::numerics::Tensor;
use flowmimic::sac::{SacAgent, SacConfig, SelectMode};
use flowmimic::traffic::{kl_from_probabilities, paired_histograms, Flow, Label};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn mask_plans_follow_count_rule_and_treatment_split() {
    let shares = common::masking::treatment_shares(100_000);
    for (share, target) in shares.iter().zip([0.8, 0.1, 0.1]) {
        assert!((share - target).abs() <= 0.02, "share {share} vs {target}");
    }
}

fn open_detector() -> Arc<Detector> {
    Arc::new(Detector::Threshold(ThresholdDetector {
        quantile: 0.99,
        min_mean_ipd: 0.0,
        max_window_rate: f64::INFINITY,
    }))
}

#[test]
fn oracle_noise_flips_at_the_configured_rate() {
    let flow = &common::floods(1, 3)[0];
    for p in [0.05, 0.3] {
        let oracle = DetectorOracle::new(open_detector()).with_noise(p, 8).unwrap();
        let n = 100_000;
        let flipped = (0..n).filter(|_| !oracle.query(flow).unwrap().flow_passed).count();
        let rate = flipped as f64 / n as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        println!("p {p}: observed {rate:.4}");
        assert!((rate - p).abs() < 5.0 * sd, "p {p}: observed {rate}");
        assert_eq!(Oracle::probes(&oracle), n as u64);

        let again = oracle.fresh();
        let a: Vec<bool> = (0..500).map(|_| again.query(flow).unwrap().flow_passed).collect();
        let b = oracle.fresh();
        let b: Vec<bool> = (0..500).map(|_| b.query(flow).unwrap().flow_passed).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn sampled_actions_match_policy_probabilities() {
    let vocab = common::vocab();
    let n = 8;
    let mut agent = SacAgent::new(&vocab, n, SacConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bias = agent.policy.head.bias;
    let cols = agent.policy_store.get(bias).cols();
    *agent.policy_store.get_mut(bias) = Tensor::normal(1, cols, 1.0, &mut rng);

    let short = Flow::from_sizes_and_ipds("s", Label::Benign, &[60, 1400, 52, 900, 60], &[0.0, 0.01, 0.2, 0.003, 1.5]).unwrap();
    let state = common::pairs(&vocab, &[short], n).remove(0);
    assert_eq!(state.valid_len, 5);
    let mask = action_mask_for(state.valid_len, n);
    let p = agent.probabilities(&state, &mask).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let draws = 100_000;
    let mut hist = vec![0usize; p.len()];
    for _ in 0..draws {
        let a = agent.select_action(&state, &mask, SelectMode::Sample, &mut rng).unwrap();
        assert!(mask[a.0], "masked action {} sampled", a.0);
        hist[a.0] += 1;
    }
    let tv: f64 = 0.5 * hist.iter().zip(&p).map(|(&c, &q)| (c as f64 / draws as f64 - q).abs()).sum::<f64>();
    println!("total variation {tv:.5}");
    assert!(tv < 0.01);

    let greedy = agent.select_action(&state, &mask, SelectMode::Greedy, &mut rng).unwrap();
    let best = (0..p.len()).filter(|&i| mask[i]).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
    assert_eq!(greedy.0, best);
}

/// Textbook form on normalised vectors, written independently of the library.
fn reference_kl(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let zp: f64 = p.iter().sum();
    let smoothed: Vec<f64> = q.iter().map(|v| v + eps).collect();
    let zq: f64 = smoothed.iter().sum();
    p.iter()
        .zip(&smoothed)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| (a / zp) * ((a / zp).ln() - (b / zq).ln()))
        .sum()
}

#[test]
fn kl_matches_reference_and_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let len = rng.random_range(2..60);
        let mut p: Vec<f64> = (0..len).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random() }).collect();
        p[0] += 0.1;
        let mut q: Vec<f64> = (0..len).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random() }).collect();
        let zp: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= zp);
        let zq: f64 = q.iter().sum::<f64>().max(1e-300);
        q.iter_mut().for_each(|v| *v /= zq);
        let got = kl_from_probabilities(&p, &q, 1e-9).unwrap();
        let want = reference_kl(&p, &q, 1e-9);
        assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
    }
    // Two Bernoulli distributions.
    let (a, b) = (0.3f64, 0.6f64);
    let closed = a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln();
    let got = kl_from_probabilities(&[a, 1.0 - a], &[b, 1.0 - b], 0.0).unwrap();
    assert!((got - closed).abs() < 1e-15);
}

#[test]
fn identical_flow_sets_have_zero_bandwidth_kl() {
    let flows = common::floods(20, 5);
    let (p, q) = paired_histograms(&flows, &flows);
    assert_eq!(p.probabilities(), q.probabilities());
    // Only the smoothing term remains, of order bins × eps.
    assert!(kl_from_probabilities(&p.probabilities(), &q.probabilities(), 1e-9).unwrap() < 1e-7);
    assert_eq!(kl_from_probabilities(&p.probabilities(), &q.probabilities(), 0.0).unwrap(), 0.0);
}
