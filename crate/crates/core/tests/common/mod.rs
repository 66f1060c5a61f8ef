#![allow(dead_code)]

pub mod episodes;
pub mod grad;
pub mod masking;
pub mod tokens;

use flowmimic::tokenizer::{build_vocab, tokenize, TokenPair, VocabConfig, Vocabulary};
use flowmimic::traffic::{synth_benign, synth_malicious, BenignProfile, Flow, MaliciousKind};

pub fn benign(count: usize, seed: u64) -> Vec<Flow> {
    synth_benign(count, seed, &BenignProfile::default())
}

pub fn vocab() -> Vocabulary {
    build_vocab(&benign(200, 11), &VocabConfig::default()).expect("vocab")
}

/// First chunk of each flow, tokenized at length `n`.
pub fn pairs(vocab: &Vocabulary, flows: &[Flow], n: usize) -> Vec<TokenPair> {
    flows
        .iter()
        .map(|f| tokenize(f, vocab, n).chunks.into_iter().next().expect("one chunk"))
        .collect()
}

pub fn floods(count: usize, seed: u64) -> Vec<Flow> {
    synth_malicious(count, seed, MaliciousKind::BurstFlood)
}
