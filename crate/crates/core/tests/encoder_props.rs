mod common;

use std::time::Instant;

use flowmimic::encoder::{pretrain, EncoderConfig, EncoderModel, PretrainConfig};
use flowmimic::tokenizer::{tokenize, TokenPair, Vocabulary};

fn config(vocab: &Vocabulary, n: usize, d_k: usize, layers: usize) -> EncoderConfig {
    EncoderConfig {
        n,
        d_k,
        n_layers: layers,
        attn_heads: 2,
        d_ff: 2 * d_k,
        t_size: vocab.t_size(),
        s_size: vocab.s_size(),
    }
}

fn long_pair(vocab: &Vocabulary, n: usize) -> TokenPair {
    let flows = common::benign(400, 50);
    let long = flows.iter().max_by_key(|f| f.len()).unwrap();
    let mut pair = tokenize(long, vocab, n).chunks.remove(0);
    // Cycle real tokens so every slot is valid regardless of flow length.
    let v = pair.valid_len;
    for i in v..n {
        pair.size_tokens[i] = pair.size_tokens[i % v];
        pair.ipd_tokens[i] = pair.ipd_tokens[i % v];
    }
    pair.valid_len = n;
    pair
}

#[test]
fn zeroed_bi_cross_attention_is_the_identity() {
    let vocab = common::vocab();
    let mut model = EncoderModel::new(config(&vocab, 16, 16, 2), 8).unwrap();
    let pair = common::pairs(&vocab, &common::benign(20, 51), 16).remove(3);
    let (_, before) = model.encode_traced(&pair).unwrap();
    assert_ne!(before[0].cross_sum_p.data(), before[0].h_p.data());

    assert_eq!(model.zero_params("block0.cross_"), 16);
    let (_, after) = model.encode_traced(&pair).unwrap();
    assert_eq!(after[0].cross_sum_p.data(), after[0].h_p.data());
    assert_eq!(after[0].cross_sum_h.data(), after[0].h_h.data());
}

#[test]
fn zeroed_self_attention_is_the_identity() {
    let vocab = common::vocab();
    let mut model = EncoderModel::new(config(&vocab, 16, 16, 2), 9).unwrap();
    let pair = common::pairs(&vocab, &common::benign(20, 52), 16).remove(1);
    assert_eq!(model.zero_params("block1.self_"), 8 * 2);
    let (_, trace) = model.encode_traced(&pair).unwrap();
    // The second block's input is the first block's output.
    assert_eq!(trace[1].self_sum_p.data(), trace[0].out_p.data());
    assert_eq!(trace[1].self_sum_h.data(), trace[0].out_h.data());
}

fn median_encode_seconds(model: &EncoderModel, pair: &TokenPair, reps: usize) -> f64 {
    model.encode(pair).unwrap();
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            model.encode(pair).unwrap();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[reps / 2]
}

#[test]
fn block_cost_grows_at_most_quadratically() {
    let vocab = common::vocab();
    let small = EncoderModel::new(config(&vocab, 128, 32, 1), 1).unwrap();
    let large = EncoderModel::new(config(&vocab, 256, 32, 1), 1).unwrap();
    let t1 = median_encode_seconds(&small, &long_pair(&vocab, 128), 9);
    let t2 = median_encode_seconds(&large, &long_pair(&vocab, 256), 9);
    let ratio = t2 / t1;
    println!("n=128: {t1:.4}s, n=256: {t2:.4}s, ratio {ratio:.2}");
    assert!(ratio <= 4.5, "doubling n cost {ratio:.2}x");
}

#[test]
fn pretraining_lowers_masked_loss_on_one_chunk() {
    let vocab = common::vocab();
    let flow = &common::benign(30, 53)[4];
    let corpus = [tokenize(flow, &vocab, 16)];
    let mut model = EncoderModel::new(config(&vocab, 16, 16, 1), 4).unwrap();
    let report = pretrain(
        &mut model,
        &corpus[..],
        &vocab,
        &PretrainConfig {
            steps: 200,
            batch_size: 1,
            max_chunks_per_flow: 1,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    let smooth = report.smoothed(20);
    println!("step 0 {:.3}, last window {:.3}", report.losses[0], smooth.last().unwrap());
    assert!(smooth.last().unwrap() < &report.losses[0]);
    assert!(smooth.last().unwrap() < &smooth[0]);
}
