use flowmimic::tokenizer::{tokenize, Vocabulary};
use flowmimic::traffic::{Flow, Label};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

pub fn assert_sizes_exact(vocab: &Vocabulary) {
    for b in 1..=vocab.mtu {
        let t = vocab.size_token(b);
        assert!(vocab.is_size_value(t));
        assert_eq!(vocab.size_bytes(t), Some(b));
    }
    assert_eq!(vocab.size_token(0), vocab.special_ids.size_unk);
    assert_eq!(vocab.size_token(vocab.mtu + 1), vocab.special_ids.size_unk);
}

pub fn assert_representatives_fixed(vocab: &Vocabulary) {
    for bin in 0..vocab.ipd_bins() as u32 {
        let rep = vocab.ipd_representative(bin).unwrap();
        assert_eq!(vocab.ipd_token(rep), bin, "bin {bin} representative {rep}");
    }
    assert_eq!(vocab.ipd_representative(vocab.ipd_bins() as u32), None);
}

pub fn flow_strategy(max_len: usize) -> impl Strategy<Value = Flow> {
    prop::collection::vec((1u32..=1500, 0.0f64..2.0), 1..max_len).prop_map(|pkts| {
        let sizes: Vec<u32> = pkts.iter().map(|p| p.0).collect();
        let ipds: Vec<f64> = pkts.iter().map(|p| p.1).collect();
        Flow::from_sizes_and_ipds("f", Label::Benign, &sizes, &ipds).unwrap()
    })
}

/// m − n + 1 chunks (one when m < n), each a window at its own offset.
pub fn check_chunks(vocab: &Vocabulary, flow: &Flow, n: usize) -> Result<(), TestCaseError> {
    let m = flow.len();
    let set = tokenize(flow, vocab, n);
    let expected = if m >= n { m - n + 1 } else { 1 };
    prop_assert_eq!(set.chunks.len(), expected);
    prop_assert_eq!(set.offsets(), (0..expected).collect::<Vec<_>>());
    let sizes = flow.sizes();
    for (i, c) in set.chunks.iter().enumerate() {
        prop_assert_eq!(c.len(), n);
        prop_assert_eq!(c.valid_len, m.min(n));
        c.check_alignment(vocab).unwrap();
        for j in 0..c.valid_len {
            prop_assert_eq!(c.size_tokens[j], sizes[i + j]);
        }
    }
    Ok(())
}

/// Runs [`check_chunks`] on `cases` random flows and chunk lengths.
pub fn chunk_count_cases(vocab: &Vocabulary, cases: u32) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&(flow_strategy(160), 1usize..64), |(flow, n)| check_chunks(vocab, &flow, n))
        .map_err(|e| e.to_string())
}
