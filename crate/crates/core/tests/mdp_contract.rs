mod common;

use flowmimic::mdp::EnvConfig;

#[test]
fn random_episodes_respect_the_contract_and_replay_exactly() {
    let (a, b) = common::episodes::replay_twice();
    assert_eq!(a, b, "replay diverged");
}

#[test]
fn zero_horizon_is_rejected() {
    let cfg = EnvConfig { tau: 0, ..EnvConfig::default() };
    assert!(cfg.validate().unwrap_err().is_config());
}
