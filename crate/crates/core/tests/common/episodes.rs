use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use flowmimic::detectors::{train_threshold, Detector, DetectorOracle, Oracle};
use flowmimic::encoder::{EncoderConfig, EncoderModel};
use flowmimic::mdp::{action_mask, ActionId, Edit, EnvConfig, Environment};
use flowmimic::tokenizer::{TokenPair, Vocabulary};
use flowmimic::traffic::{synth_malicious, Flow, MaliciousKind};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EPISODES: usize = 10_000;
pub const N: usize = 16;

pub fn encoder(vocab: &Vocabulary) -> EncoderModel {
    let cfg = EncoderConfig {
        n: N,
        d_k: 8,
        n_layers: 1,
        attn_heads: 2,
        d_ff: 16,
        t_size: vocab.t_size(),
        s_size: vocab.s_size(),
    };
    EncoderModel::new(cfg, 3).unwrap()
}

pub fn corpus() -> Vec<Arc<Flow>> {
    let mut flows = super::benign(60, 31);
    flows.extend(synth_malicious(60, 32, MaliciousKind::BurstFlood));
    flows.extend(synth_malicious(60, 33, MaliciousKind::Beacon));
    flows.into_iter().map(Arc::new).collect()
}

/// Exactly one slot differs: a rewritten delay in place, or a new packet
/// with the later slots shifted right by one.
pub fn assert_single_site(prev: &TokenPair, next: &TokenPair, edit: Edit) {
    let n = prev.len();
    match edit {
        Edit::Modify(p) => {
            assert_eq!(next.size_tokens, prev.size_tokens);
            assert_eq!(next.valid_len, prev.valid_len);
            for i in (0..n).filter(|&i| i != p) {
                assert_eq!(next.ipd_tokens[i], prev.ipd_tokens[i], "slot {i} changed by modify at {p}");
            }
        }
        Edit::Insert(p) => {
            assert_eq!(next.valid_len, (prev.valid_len + 1).min(n));
            assert_eq!(next.size_tokens[..p], prev.size_tokens[..p]);
            assert_eq!(next.ipd_tokens[..p], prev.ipd_tokens[..p]);
            assert_eq!(next.size_tokens[p + 1..next.valid_len], prev.size_tokens[p..next.valid_len - 1]);
            assert_eq!(next.ipd_tokens[p + 1..next.valid_len], prev.ipd_tokens[p..next.valid_len - 1]);
        }
    }
}

/// Runs every episode with uniformly random valid actions and returns a
/// digest of all transitions.
pub fn run_all(env: &Environment, oracle: &DetectorOracle, flows: &[Arc<Flow>], tau: usize) -> u64 {
    let mut digest = DefaultHasher::new();
    let mut steps_total = 0u64;
    for e in 0..EPISODES {
        let flow = Arc::clone(&flows[e % flows.len()]);
        let mut rng = ChaCha8Rng::seed_from_u64(e as u64);
        let mut s = env.reset(Arc::clone(&flow));
        let mut steps = 0;
        loop {
            let mask = action_mask(&s);
            let valid: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
            let a = ActionId(*valid.choose(&mut rng).expect("a valid action"));
            let before = Oracle::probes(oracle);
            let out = env.step(&s, a).unwrap();
            assert_eq!(Oracle::probes(oracle), before + 1);
            steps += 1;

            assert_eq!(out.transition.action, a.0);
            let stored_mask = flowmimic::mdp::action_mask_for(out.transition.state.valid_len, N);
            assert!(stored_mask[out.transition.action], "stored action {} is invalid", a.0);
            assert_single_site(&s.pair, &out.next.pair, a.edit());
            out.next.pair.check_alignment(env.vocab).unwrap();

            let restored = env.restore(&out.next).unwrap();
            let kept: Vec<u32> = restored.events().iter().filter(|p| !p.chaff).map(|p| p.size).collect();
            assert_eq!(kept, flow.sizes(), "original packets must survive in order");

            (a.0, out.reward.total.to_bits(), &out.next.pair, out.done).hash(&mut digest);
            s = out.next;
            if out.done {
                break;
            }
        }
        assert!(steps <= tau, "episode {e} ran {steps} steps");
        steps_total += steps as u64;
    }
    assert_eq!(Oracle::probes(oracle), steps_total);
    digest.finish()
}


/// Runs the full episode set twice on fresh oracles and returns both
/// digests.
pub fn replay_twice() -> (u64, u64) {
    let vocab = super::vocab();
    let model = encoder(&vocab);
    let detector = Arc::new(Detector::Threshold(train_threshold(&super::benign(400, 30), 0.99).unwrap()));
    let flows = corpus();
    let cfg = EnvConfig::default();
    let tau = cfg.tau;

    let first = DetectorOracle::new(Arc::clone(&detector));
    let env = Environment::new(&model, &vocab, &first, cfg.clone()).unwrap();
    let a = run_all(&env, &first, &flows, tau);

    let second = DetectorOracle::new(detector);
    let env = Environment::new(&model, &vocab, &second, cfg).unwrap();
    let b = run_all(&env, &second, &flows, tau);
    (a, b)
}
