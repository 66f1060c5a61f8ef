//! Discrete soft actor-critic over the edit MDP.

mod buffer;
mod network;
mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use buffer::ReplayBuffer;
pub use network::{batch_masks, log_policy_rows, masked_log_policy, RecurrentNet};
pub use train::{
    calibrate_xi_prime, infer, train, EpisodeLog, InferOptions, InferOutcome, StopRule, TrainOptions, TrainReport,
    XI_PRIME_PERCENTILE, XI_PRIME_WINDOW,
};

use crate::error::{Error, Result};
use crate::mdp::{action_mask_for, ActionId, Transition};
use crate::numerics::{checkpoint, AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokenizer::{TokenPair, Vocabulary};

pub const AGENT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub embed: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub min_buffer: usize,
    pub buffer_capacity: usize,
    /// Discount factor.
    pub eta: f64,
    /// Soft update weight of the online Q-networks.
    pub lambda: f64,
    pub target_entropy: f64,
    pub init_alpha: f64,
    pub lr: f64,
    pub alpha_lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            embed: 8,
            hidden: 16,
            batch_size: 64,
            min_buffer: 256,
            buffer_capacity: 100_000,
            eta: 1.0,
            lambda: 0.9,
            target_entropy: -10.0,
            init_alpha: 0.05,
            lr: 3e-4,
            alpha_lr: 3e-4,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("agent: {m}")));
        if self.embed == 0 || self.hidden == 0 {
            return bad("embed and hidden must be positive");
        }
        if self.batch_size == 0 || self.min_buffer < self.batch_size {
            return bad("need 0 < batch_size <= min_buffer");
        }
        if self.buffer_capacity < self.min_buffer {
            return bad("buffer_capacity below min_buffer");
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad("eta outside [0, 1]");
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("lambda outside (0, 1]");
        }
        if !(self.init_alpha > 0.0) || !(self.lr > 0.0) || !(self.alpha_lr >= 0.0) {
            return bad("alpha and learning rates must be positive");
        }
        if !(self.grad_clip > 0.0) || !self.target_entropy.is_finite() {
            return bad("grad_clip must be positive and target_entropy finite");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Sample,
    Greedy,
}

/// A mini-batch view over stored transitions.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub states: Vec<&'a TokenPair>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<&'a TokenPair>,
    pub done: Vec<bool>,
}

impl<'a> Batch<'a> {
    pub fn new(items: &[&'a Transition]) -> Self {
        Batch {
            states: items.iter().map(|t| &t.state).collect(),
            actions: items.iter().map(|t| t.action).collect(),
            rewards: items.iter().map(|t| t.reward).collect(),
            next_states: items.iter().map(|t| &t.next_state).collect(),
            done: items.iter().map(|t| t.done).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Losses of one full update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateLosses {
    pub critic1: f64,
    pub critic2: f64,
    pub actor: f64,
    pub temperature: f64,
}

/// Squared error of the Q-values of the taken actions against fixed targets.
pub fn critic_loss(g: &mut Graph, net: &RecurrentNet, states: &[&TokenPair], actions: &[usize], targets: &[f64]) -> Result<Var> {
    Ok(critic_loss_with_values(g, net, states, actions, targets)?.0)
}

fn critic_loss_with_values(g: &mut Graph, net: &RecurrentNet, states: &[&TokenPair], actions: &[usize], targets: &[f64]) -> Result<(Var, Var)> {
    let q = net.forward(g, states)?;
    let picked = g.pick(q, actions.to_vec());
    let y = g.constant(Tensor::from_rows(targets.len(), 1, targets.to_vec()));
    let diff = g.sub(picked, y);
    let sq = g.mul(diff, diff);
    Ok((g.mean(sq), q))
}

/// `mean_s Σ_a π(a|s) [α log π(a|s) − min_j Q_j(s,a)]` over valid actions.
pub fn actor_loss(g: &mut Graph, policy: &RecurrentNet, states: &[&TokenPair], min_q: &Tensor, alpha: f64) -> Result<Var> {
    Ok(actor_loss_with_policy(g, policy, states, min_q, alpha)?.0)
}

fn actor_loss_with_policy(g: &mut Graph, policy: &RecurrentNet, states: &[&TokenPair], min_q: &Tensor, alpha: f64) -> Result<(Var, Var)> {
    let masks = batch_masks(states, policy.n);
    let valid = Tensor::from_rows(
        states.len(),
        policy.actions(),
        masks.iter().map(|&m| f64::from(u8::from(m))).collect(),
    );
    let logits = policy.forward(g, states)?;
    let lp = masked_log_policy(g, logits, masks);
    let p = g.exp(lp);
    let alp = g.scale(lp, alpha);
    let qc = g.constant(min_q.clone());
    let inner = g.sub(alp, qc);
    let w = g.mul(p, inner);
    let vc = g.constant(valid);
    let w = g.mul(w, vc);
    let per_state = g.sum_rows(w);
    Ok((g.mean(per_state), lp))
}

fn elementwise_min(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_rows(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(x, y)| x.min(*y)).collect())
}

/// `α (H̄ − H₀)`, the expectation of `−α (log π(a|s) + H₀)` under the policy,
/// with `mean_entropy` held fixed.
pub fn temperature_loss(g: &mut Graph, log_alpha: ParamId, mean_entropy: f64, target_entropy: f64) -> Var {
    let la = g.param(log_alpha);
    let a = g.exp(la);
    let s = g.scale(a, mean_entropy - target_entropy);
    g.sum(s)
}

/// Mean entropy of masked policy rows given as log-probabilities.
pub fn mean_entropy(log_probs: &Tensor, masks: &[bool]) -> f64 {
    let cols = log_probs.cols();
    let rows = log_probs.rows();
    let mut total = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            if masks[r * cols + c] {
                let lp = log_probs.get(r, c);
                total -= lp.exp() * lp;
            }
        }
    }
    total / rows.max(1) as f64
}

/// Policy, twin critics, target critics and temperature.
#[derive(Clone, Debug)]
pub struct SacAgent {
    pub config: SacConfig,
    pub n: usize,
    pub policy: RecurrentNet,
    pub policy_store: ParamStore,
    /// Layout shared by both critics and both targets.
    pub critic: RecurrentNet,
    pub q1: ParamStore,
    pub q2: ParamStore,
    pub q1_target: ParamStore,
    pub q2_target: ParamStore,
    pub temperature: ParamStore,
    pub log_alpha: ParamId,
    /// Q-value stopping threshold used at inference.
    pub xi_prime: Option<f64>,
    opt_policy: AdamState,
    opt_q1: AdamState,
    opt_q2: AdamState,
    opt_alpha: AdamState,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AgentMeta {
    version: u32,
    n: usize,
    config: SacConfig,
    config_hash: String,
    vocab_hash: String,
    xi_prime: Option<f64>,
    checkpoints: Vec<(String, String)>,
}

const STORES: [&str; 6] = ["policy", "q1", "q2", "q1_target", "q2_target", "temperature"];

impl SacAgent {
    pub fn new(vocab: &Vocabulary, n: usize, config: SacConfig) -> Result<Self> {
        config.validate()?;
        if n == 0 {
            return Err(Error::invalid("sequence length must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ac0);
        let mut policy_store = ParamStore::new();
        let policy = RecurrentNet::new(&mut policy_store, "policy", vocab, n, config.embed, config.hidden, &mut rng)?;
        let mut q1 = ParamStore::new();
        let critic = RecurrentNet::new(&mut q1, "q", vocab, n, config.embed, config.hidden, &mut rng)?;
        let mut q2 = ParamStore::new();
        RecurrentNet::new(&mut q2, "q", vocab, n, config.embed, config.hidden, &mut rng)?;
        let mut temperature = ParamStore::new();
        let log_alpha = temperature.add("log_alpha", Tensor::scalar(config.init_alpha.ln()))?;
        Ok(SacAgent {
            opt_policy: AdamState::new(&policy_store),
            opt_q1: AdamState::new(&q1),
            opt_q2: AdamState::new(&q2),
            opt_alpha: AdamState::new(&temperature),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            config,
            n,
            policy,
            policy_store,
            critic,
            q1,
            q2,
            temperature,
            log_alpha,
            xi_prime: None,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.temperature.get(self.log_alpha).item().exp()
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(alpha > 0.0) {
            return Err(Error::invalid("alpha must be positive"));
        }
        self.temperature.get_mut(self.log_alpha).data_mut()[0] = alpha.ln();
        Ok(())
    }

    /// Masked log-probabilities for a batch of states.
    pub fn log_policy(&self, states: &[&TokenPair]) -> Result<Tensor> {
        let logits = self.policy.eval(&self.policy_store, states)?;
        Ok(log_policy_rows(&logits, &batch_masks(states, self.n)))
    }

    /// Action probabilities for one state under `mask`.
    pub fn probabilities(&self, state: &TokenPair, mask: &[bool]) -> Result<Vec<f64>> {
        if mask.len() != ActionId::count(self.n) {
            return Err(Error::shape(format!("mask of length {} for {} actions", mask.len(), ActionId::count(self.n))));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid("no valid action"));
        }
        let logits = self.policy.eval(&self.policy_store, &[state])?;
        let lp = log_policy_rows(&logits, mask);
        Ok(lp.row(0).iter().zip(mask).map(|(&l, &m)| if m { l.exp() } else { 0.0 }).collect())
    }

    pub fn select_action<R: Rng + ?Sized>(&self, state: &TokenPair, mask: &[bool], mode: SelectMode, rng: &mut R) -> Result<ActionId> {
        let p = self.probabilities(state, mask)?;
        let a = match mode {
            SelectMode::Greedy => {
                let mut best = None;
                for (i, &pi) in p.iter().enumerate() {
                    if mask[i] && best.is_none_or(|(_, bp)| pi > bp) {
                        best = Some((i, pi));
                    }
                }
                best.expect("mask has a valid action").0
            }
            SelectMode::Sample => {
                let mut u = rng.random::<f64>();
                let mut pick = None;
                for (i, &pi) in p.iter().enumerate() {
                    if !mask[i] {
                        continue;
                    }
                    pick = Some(i);
                    if u < pi {
                        break;
                    }
                    u -= pi;
                }
                pick.expect("mask has a valid action")
            }
        };
        Ok(ActionId(a))
    }

    /// Online Q-values of both critics for a batch, `([B,A], [B,A])`.
    pub fn q_values(&self, states: &[&TokenPair]) -> Result<(Tensor, Tensor)> {
        Ok((self.critic.eval(&self.q1, states)?, self.critic.eval(&self.q2, states)?))
    }

    /// `max_j Q_j(s, a)`.
    pub fn max_q(&self, state: &TokenPair, a: ActionId) -> Result<f64> {
        let (q1, q2) = self.q_values(&[state])?;
        Ok(q1.get(0, a.0).max(q2.get(0, a.0)))
    }

    /// Soft Bellman targets `r + η V̄(s′)` with the expectation over the
    /// masked next-state policy; terminal transitions bootstrap zero.
    pub fn critic_targets(&self, batch: &Batch) -> Result<Vec<f64>> {
        let lp = self.log_policy(&batch.next_states)?;
        let t1 = self.critic.eval(&self.q1_target, &batch.next_states)?;
        let t2 = self.critic.eval(&self.q2_target, &batch.next_states)?;
        let alpha = self.alpha();
        let cols = ActionId::count(self.n);
        let mut y = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let v = if batch.done[i] {
                0.0
            } else {
                let mask = action_mask_for(batch.next_states[i].valid_len, self.n);
                (0..cols)
                    .filter(|&a| mask[a])
                    .map(|a| {
                        let l = lp.get(i, a);
                        l.exp() * (t1.get(i, a).min(t2.get(i, a)) - alpha * l)
                    })
                    .sum()
            };
            y.push(batch.rewards[i] + self.config.eta * v);
        }
        Ok(y)
    }

    fn fit_critic(which: &mut ParamStore, opt: &mut AdamState, net: &RecurrentNet, batch: &Batch, y: &[f64], lr: f64, clip: f64) -> Result<(f64, Tensor)> {
        let (value, q, mut grads) = {
            let mut g = Graph::new(which);
            let (loss, q) = critic_loss_with_values(&mut g, net, &batch.states, &batch.actions, y)?;
            (g.value(loss).item(), g.value(q).clone(), g.backward(loss))
        };
        if !value.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("critic loss {value}")));
        }
        grads.clip_global_norm(clip);
        opt.step(which, &grads, &AdamConfig::with_lr(lr));
        Ok((value, q))
    }

    fn critic_step(&mut self, batch: &Batch) -> Result<(f64, f64, Tensor)> {
        let y = self.critic_targets(batch)?;
        let (lr, clip) = (self.config.lr, self.config.grad_clip);
        let (l1, q1) = Self::fit_critic(&mut self.q1, &mut self.opt_q1, &self.critic, batch, &y, lr, clip)?;
        let (l2, q2) = Self::fit_critic(&mut self.q2, &mut self.opt_q2, &self.critic, batch, &y, lr, clip)?;
        Ok((l1, l2, elementwise_min(&q1, &q2)))
    }

    /// Regresses both critics onto the soft Bellman targets.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let (l1, l2, _) = self.critic_step(batch)?;
        Ok((l1, l2))
    }

    /// One policy step against the current critics. Returns the loss and the
    /// mean policy entropy before the step.
    pub fn actor_update(&mut self, states: &[&TokenPair]) -> Result<(f64, f64)> {
        if states.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let (q1, q2) = self.q_values(states)?;
        self.actor_step(states, &elementwise_min(&q1, &q2))
    }

    fn actor_step(&mut self, states: &[&TokenPair], min_q: &Tensor) -> Result<(f64, f64)> {
        let alpha = self.alpha();
        let masks = batch_masks(states, self.n);
        let (value, entropy, mut grads) = {
            let mut g = Graph::new(&self.policy_store);
            let (loss, lp) = actor_loss_with_policy(&mut g, &self.policy, states, min_q, alpha)?;
            (g.value(loss).item(), mean_entropy(g.value(lp), &masks), g.backward(loss))
        };
        if !value.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("actor loss {value}")));
        }
        grads.clip_global_norm(self.config.grad_clip);
        self.opt_policy.step(&mut self.policy_store, &grads, &AdamConfig::with_lr(self.config.lr));
        Ok((value, entropy))
    }

    /// One step on `log α` given the policy's mean entropy.
    pub fn temperature_update(&mut self, mean_entropy: f64) -> Result<f64> {
        let (value, grads) = {
            let mut g = Graph::new(&self.temperature);
            let loss = temperature_loss(&mut g, self.log_alpha, mean_entropy, self.config.target_entropy);
            (g.value(loss).item(), g.backward(loss))
        };
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("temperature loss {value}")));
        }
        if self.config.alpha_lr > 0.0 {
            self.opt_alpha.step(&mut self.temperature, &grads, &AdamConfig::with_lr(self.config.alpha_lr));
        }
        Ok(value)
    }

    /// `Q̄ := λ Q + (1 − λ) Q̄` for both critics.
    pub fn soft_update(&mut self) -> Result<()> {
        let lambda = self.config.lambda;
        soft_update(&mut self.q1_target, &self.q1, lambda)?;
        soft_update(&mut self.q2_target, &self.q2, lambda)
    }

    /// Critic, actor, temperature and target updates on one mini-batch.
    pub fn update(&mut self, batch: &Batch) -> Result<UpdateLosses> {
        let (critic1, critic2, min_q) = self.critic_step(batch)?;
        let (actor, entropy) = self.actor_step(&batch.states, &min_q)?;
        let temperature = self.temperature_update(entropy)?;
        self.soft_update()?;
        Ok(UpdateLosses {
            critic1,
            critic2,
            actor,
            temperature,
        })
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in [&self.policy_store, &self.q1, &self.q2, &self.q1_target, &self.q2_target, &self.temperature] {
            h.update(checkpoint::fingerprint(s).as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn stores(&self) -> [&ParamStore; 6] {
        [&self.policy_store, &self.q1, &self.q2, &self.q1_target, &self.q2_target, &self.temperature]
    }

    /// Writes every network, the temperature and a metadata sidecar.
    pub fn save(&self, dir: &Path, vocab: &Vocabulary) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut checkpoints = Vec::new();
        for (name, store) in STORES.iter().zip(self.stores()) {
            let digest = checkpoint::save(store, &dir.join(format!("agent_{name}")))?;
            checkpoints.push((name.to_string(), digest));
        }
        let meta = AgentMeta {
            version: AGENT_FORMAT_VERSION,
            n: self.n,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            vocab_hash: vocab.hash(),
            xi_prime: self.xi_prime,
            checkpoints,
        };
        std::fs::write(dir.join("agent.meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    /// Restores an agent written by [`SacAgent::save`]. Optimiser state is
    /// not persisted.
    pub fn load(dir: &Path, vocab: &Vocabulary) -> Result<Self> {
        let meta: AgentMeta = serde_json::from_slice(&std::fs::read(dir.join("agent.meta.json"))?)?;
        if meta.version != AGENT_FORMAT_VERSION {
            return Err(Error::invalid(format!("agent format version {}", meta.version)));
        }
        if meta.config.hash() != meta.config_hash {
            return Err(Error::invalid("agent config hash mismatch"));
        }
        if meta.vocab_hash != vocab.hash() {
            return Err(Error::invalid("agent was trained with a different vocabulary"));
        }
        let mut agent = SacAgent::new(vocab, meta.n, meta.config)?;
        let names: Vec<&str> = STORES.to_vec();
        for (name, digest) in &meta.checkpoints {
            if !names.contains(&name.as_str()) {
                return Err(Error::invalid(format!("unknown agent checkpoint `{name}`")));
            }
            let stem = dir.join(format!("agent_{name}"));
            let target = match name.as_str() {
                "policy" => &mut agent.policy_store,
                "q1" => &mut agent.q1,
                "q2" => &mut agent.q2,
                "q1_target" => &mut agent.q1_target,
                "q2_target" => &mut agent.q2_target,
                _ => &mut agent.temperature,
            };
            checkpoint::load_into(target, &stem)?;
            if &checkpoint::fingerprint(target) != digest {
                return Err(Error::invalid(format!("checkpoint `{name}` does not match its recorded hash")));
            }
        }
        agent.xi_prime = meta.xi_prime;
        Ok(agent)
    }
}

/// `target := λ source + (1 − λ) target`.
pub fn soft_update(target: &mut ParamStore, source: &ParamStore, lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid(format!("soft update weight {lambda} outside (0, 1]")));
    }
    target.blend_from(source, lambda)
}
