use flowmimic::encoder::{masked_loss, EncoderConfig, EncoderModel};
use flowmimic::numerics::{
    attention, grad_check, GradCheckOptions, GradCheckReport, Graph, GruCell, LayerNorm, Linear, ParamId, ParamStore,
    Tensor,
};
use flowmimic::sac::{actor_loss, critic_loss, temperature_loss, RecurrentNet};
use flowmimic::tokenizer::{TokenPair, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;

pub fn opts() -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-5,
        max_entries_per_param: 96,
    }
}

fn ids_with(store: &ParamStore, pred: impl Fn(&str) -> bool) -> Vec<ParamId> {
    store.iter().filter(|(_, p)| pred(&p.name)).map(|(id, _)| id).collect()
}

pub fn assert_passes(label: &str, report: GradCheckReport) {
    println!(
        "{label}: {} entries, max rel {:.3e} (abs {:.3e}) at {:?}",
        report.checked, report.max_rel_err, report.max_abs_err, report.worst_param
    );
    assert!(report.checked > 0, "{label}: nothing checked");
    assert!(report.passes(TOL), "{label}: max rel error {:.3e}", report.max_rel_err);
}

fn small_vocab() -> Vocabulary {
    let edges: Vec<f64> = (0..7).map(|i| -6.0 + i as f64).collect();
    Vocabulary::from_edges(12, 16, edges).unwrap()
}

/// One block with sharpened query/key projections, so the attention rows
/// are far from uniform and every path carries a sizeable gradient.
fn tiny_encoder(vocab: &Vocabulary) -> EncoderModel {
    let cfg = EncoderConfig {
        n: 8,
        d_k: 8,
        n_layers: 1,
        attn_heads: 2,
        d_ff: 12,
        t_size: vocab.t_size(),
        s_size: vocab.s_size(),
    };
    let mut model = EncoderModel::new(cfg, 5).unwrap();
    let ids = ids_with(&model.store, |n| n.ends_with(".q.weight") || n.ends_with(".k.weight"));
    for id in ids {
        model.store.get_mut(id).scale_assign(3.0);
    }
    model
}

/// A padded chunk, corrupted at two slots, plus the masked positions.
fn encoder_sample(vocab: &Vocabulary) -> (TokenPair, TokenPair, Vec<usize>) {
    let sp = vocab.special_ids;
    let mut size_tokens = vec![3, 7, 12, 1, 5, 9];
    let mut ipd_tokens = vec![0, 2, 5, 1, 3, 4];
    size_tokens.extend([sp.size_pad; 2]);
    ipd_tokens.extend([sp.ipd_pad; 2]);
    let target = TokenPair {
        size_tokens,
        ipd_tokens,
        positions: (0..8).collect(),
        valid_len: 6,
    };
    target.check_alignment(vocab).unwrap();
    let mut corrupted = target.clone();
    corrupted.size_tokens[1] = sp.size_mask;
    corrupted.ipd_tokens[1] = sp.ipd_mask;
    corrupted.size_tokens[4] = 11;
    (corrupted, target, vec![1, 4])
}

pub fn encoder_group(pred: impl Fn(&str) -> bool) -> GradCheckReport {
    let vocab = small_vocab();
    let model = tiny_encoder(&vocab);
    let (corrupted, target, positions) = encoder_sample(&vocab);
    let mut store = model.store.clone();
    let ids = ids_with(&store, pred);
    assert!(!ids.is_empty(), "no parameters matched");
    grad_check(&mut store, &ids, opts(), |g| masked_loss(g, &model, &corrupted, &target, &positions)).unwrap()
}

pub fn attention_inputs() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let q = store.add("q", Tensor::normal(5, 4, 1.0, &mut rng)).unwrap();
    let k = store.add("k", Tensor::normal(5, 4, 1.0, &mut rng)).unwrap();
    let v = store.add("v", Tensor::normal(5, 4, 1.0, &mut rng)).unwrap();
    let w = Tensor::normal(5, 4, 1.0, &mut rng);
    let mask = [true, true, false, true, false];
    grad_check(&mut store, &[q, k, v], opts(), |g| {
        let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
        let out = attention(g, qv, kv, vv, Some(&mask));
        let wv = g.constant(w.clone());
        let p = g.mul(out, wv);
        Ok(g.sum(p))
    })
    .unwrap()
}

pub fn linear_and_layer_norm() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 6, 5, &mut rng).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 5).unwrap();
    let x = store.add("x", Tensor::normal(3, 6, 1.0, &mut rng)).unwrap();
    let w = Tensor::normal(3, 5, 1.0, &mut rng);
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check(&mut store, &ids, opts(), |g| {
        let xv = g.param(x);
        let h = lin.forward(g, xv);
        let h = ln.forward(g, h);
        let wv = g.constant(w.clone());
        let p = g.mul(h, wv);
        Ok(g.sum(p))
    })
    .unwrap()
}

pub fn gru_five_steps() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng).unwrap();
    let xs = store.add("xs", Tensor::normal(10, 3, 1.0, &mut rng)).unwrap();
    let w = Tensor::normal(2, 4, 1.0, &mut rng);
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check(&mut store, &ids, opts(), |g| {
        let all = g.param(xs);
        let mut h = g.constant(Tensor::zeros(2, 4));
        for t in 0..5 {
            let x = g.select_rows(all, vec![2 * t, 2 * t + 1]);
            h = cell.step(g, x, h);
        }
        let wv = g.constant(w.clone());
        let p = g.mul(h, wv);
        Ok(g.sum(p))
    })
    .unwrap()
}

struct SacFixture {
    states: Vec<TokenPair>,
    net: RecurrentNet,
    q1: ParamStore,
    q2: ParamStore,
    policy: RecurrentNet,
    policy_store: ParamStore,
}

fn sac_fixture() -> SacFixture {
    let vocab = super::vocab();
    let n = 6;
    let mut flows = super::floods(2, 4);
    flows.extend(super::benign(2, 5));
    let states = super::pairs(&vocab, &flows, n);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut q1 = ParamStore::new();
    let net = RecurrentNet::new(&mut q1, "q", &vocab, n, 4, 5, &mut rng).unwrap();
    let mut q2 = ParamStore::new();
    RecurrentNet::new(&mut q2, "q", &vocab, n, 4, 5, &mut rng).unwrap();
    let mut policy_store = ParamStore::new();
    let policy = RecurrentNet::new(&mut policy_store, "policy", &vocab, n, 4, 5, &mut rng).unwrap();
    SacFixture {
        states,
        net,
        q1,
        q2,
        policy,
        policy_store,
    }
}

fn critic_check(pick: impl Fn(&SacFixture) -> ParamStore) -> GradCheckReport {
    let fx = sac_fixture();
    let mut store = pick(&fx);
    let refs: Vec<&TokenPair> = fx.states.iter().collect();
    let actions = [1usize, 0, 3, 2];
    let targets = [0.7, -0.2, 1.3, 0.1];
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check(&mut store, &ids, opts(), |g| critic_loss(g, &fx.net, &refs, &actions, &targets)).unwrap()
}

pub fn critic_q1() -> GradCheckReport {
    critic_check(|fx| fx.q1.clone())
}

pub fn critic_q2() -> GradCheckReport {
    critic_check(|fx| fx.q2.clone())
}

pub fn actor() -> GradCheckReport {
    let fx = sac_fixture();
    let refs: Vec<&TokenPair> = fx.states.iter().collect();
    let q1 = fx.net.eval(&fx.q1, &refs).unwrap();
    let q2 = fx.net.eval(&fx.q2, &refs).unwrap();
    let min_q = Tensor::from_rows(
        q1.rows(),
        q1.cols(),
        q1.data().iter().zip(q2.data()).map(|(a, b)| a.min(*b)).collect(),
    );
    let mut store = fx.policy_store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check(&mut store, &ids, opts(), |g| actor_loss(g, &fx.policy, &refs, &min_q, 0.3)).unwrap()
}

/// Finite-difference report plus the absolute gap between the analytic
/// gradient and e^θ(H̄ − H₀) worked by hand.
pub fn temperature() -> (GradCheckReport, f64) {
    let mut store = ParamStore::new();
    let la = store.add("log_alpha", Tensor::scalar(-0.4)).unwrap();
    let report = grad_check(&mut store, &[la], opts(), |g| Ok(temperature_loss(g, la, 1.7, 2.3))).unwrap();
    let mut g = Graph::new(&store);
    let out = temperature_loss(&mut g, la, 1.7, 2.3);
    let grads = g.backward(out);
    let expected = (-0.4f64).exp() * (1.7 - 2.3);
    (report, (grads.get(la).unwrap().item() - expected).abs())
}

/// Every group checked, labelled.
pub fn every_layer() -> Vec<(&'static str, GradCheckReport)> {
    vec![
        ("embeddings", encoder_group(|n| n.starts_with("emb."))),
        ("self attention", encoder_group(|n| n.contains(".self_"))),
        ("bi-cross attention", encoder_group(|n| n.contains(".cross_"))),
        ("feed-forward", encoder_group(|n| n.contains(".ffn_"))),
        ("layer norms", encoder_group(|n| n.contains(".ln"))),
        ("output heads", encoder_group(|n| n.starts_with("head."))),
        ("attention", attention_inputs()),
        ("linear + layer norm", linear_and_layer_norm()),
        ("gru", gru_five_steps()),
        ("critic Q1", critic_q1()),
        ("critic Q2", critic_q2()),
        ("actor", actor()),
        ("temperature", temperature().0),
    ]
}
