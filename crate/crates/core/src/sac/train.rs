use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, ReplayBuffer, SacAgent, SelectMode, UpdateLosses};
use crate::error::{Error, Result};
use crate::mdp::{action_mask, effectiveness_penalty, ActionId, Environment, MdpState};
use crate::traffic::{quantile, Flow};

/// Successful episodes considered when calibrating the stopping threshold.
pub const XI_PRIME_WINDOW: usize = 50;
pub const XI_PRIME_PERCENTILE: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub episodes: usize,
    /// When false the agent acts but never learns.
    pub updates: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            episodes: 500,
            updates: true,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub flow_id: String,
    pub steps: usize,
    pub evaded_ratio: f64,
    pub success: bool,
    /// Largest `max_j Q_j(s_t, a_t)` along the episode.
    pub max_q: f64,
    /// `max_j Q_j` of the last action taken.
    pub final_q: f64,
    pub probes: u64,
    pub alpha: f64,
    /// Mean losses of the updates run during the episode.
    pub losses: Option<UpdateLosses>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub episodes: Vec<EpisodeLog>,
    pub updates: u64,
    pub budget_exhausted: bool,
    pub buffer: ReplayBuffer,
}

impl TrainReport {
    pub fn success_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().filter(|e| e.success).count() as f64 / self.episodes.len() as f64
    }
}

fn mean_losses(all: &[UpdateLosses]) -> Option<UpdateLosses> {
    if all.is_empty() {
        return None;
    }
    let k = all.len() as f64;
    Some(UpdateLosses {
        critic1: all.iter().map(|l| l.critic1).sum::<f64>() / k,
        critic2: all.iter().map(|l| l.critic2).sum::<f64>() / k,
        actor: all.iter().map(|l| l.actor).sum::<f64>() / k,
        temperature: all.iter().map(|l| l.temperature).sum::<f64>() / k,
    })
}

/// Runs training episodes over `flows`, visiting them in shuffled passes.
/// A probe-budget error ends training after logging the partial episode.
pub fn train(
    agent: &mut SacAgent,
    env: &Environment,
    flows: &[Arc<Flow>],
    opts: &TrainOptions,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    if flows.is_empty() {
        return Err(Error::invalid("no training flows"));
    }
    if env.n() != agent.n {
        return Err(Error::shape(format!("agent built for n = {}, environment uses {}", agent.n, env.n())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(agent.config.seed ^ 0x7a11);
    let mut buffer = ReplayBuffer::new(agent.config.buffer_capacity)?;
    let mut order: Vec<usize> = Vec::new();
    let mut report_eps = Vec::new();
    let mut updates = 0u64;
    let mut budget_exhausted = false;

    for episode in 0..opts.episodes {
        if order.is_empty() {
            order = (0..flows.len()).collect();
            order.shuffle(&mut rng);
        }
        let flow = Arc::clone(&flows[order.pop().expect("refilled above")]);
        let mut s = env.reset(Arc::clone(&flow));
        let mut steps = 0;
        let mut max_q = f64::NEG_INFINITY;
        let mut final_q = f64::NEG_INFINITY;
        let mut passed = false;
        let mut losses = Vec::new();
        loop {
            let mask = action_mask(&s);
            let a = agent.select_action(&s.pair, &mask, SelectMode::Sample, &mut rng)?;
            let q = agent.max_q(&s.pair, a)?;
            let out = match env.step(&s, a) {
                Ok(out) => out,
                Err(Error::BudgetExhausted { .. }) => {
                    budget_exhausted = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            steps += 1;
            max_q = max_q.max(q);
            final_q = q;
            passed = out.verdict.flow_passed;
            buffer.push(out.transition);
            if opts.updates && buffer.len() >= agent.config.min_buffer {
                let items = buffer.sample(agent.config.batch_size, &mut rng)?;
                let batch = Batch::new(&items);
                losses.push(agent.update(&batch)?);
                updates += 1;
            }
            s = out.next;
            if out.done {
                break;
            }
        }
        if steps > 0 || !budget_exhausted {
            let entry = EpisodeLog {
                episode,
                flow_id: flow.id.clone(),
                steps,
                evaded_ratio: s.evaded_ratio(),
                success: passed,
                max_q,
                final_q,
                probes: env.oracle.probes(),
                alpha: agent.alpha(),
                losses: mean_losses(&losses),
            };
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &entry)?;
                w.write_all(b"\n")?;
            }
            report_eps.push(entry);
        }
        if budget_exhausted {
            break;
        }
    }
    Ok(TrainReport {
        episodes: report_eps,
        updates,
        budget_exhausted,
        buffer,
    })
}

/// Low percentile of the last-step Q-values of the most recent successful
/// episodes, or `None` when no episode succeeded.
pub fn calibrate_xi_prime(episodes: &[EpisodeLog]) -> Option<f64> {
    let finals: Vec<f64> = episodes
        .iter()
        .rev()
        .filter(|e| e.success && e.final_q.is_finite())
        .take(XI_PRIME_WINDOW)
        .map(|e| e.final_q)
        .collect();
    (!finals.is_empty()).then(|| quantile(&finals, XI_PRIME_PERCENTILE))
}

/// Inference-time termination test on `max_j Q_j(s_t, a_t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop once the value reaches a fixed threshold.
    QValue(f64),
    /// Stop once the value reaches `ξ − β r_D − γ r_M`, with `r_M` measured
    /// on the flow produced so far.
    Adjusted { xi: f64 },
}

#[derive(Clone, Debug)]
pub struct InferOutcome {
    pub flow: Flow,
    pub state: MdpState,
    pub steps: usize,
    /// `(action, max_j Q_j)` per step.
    pub trace: Vec<(usize, f64)>,
    pub stopped_by_value: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub rule: StopRule,
    pub mode: SelectMode,
    pub seed: u64,
}

/// Policy rollout without oracle access, stopping on the step cap or the
/// value rule.
pub fn infer(agent: &SacAgent, env: &Environment, flow: Arc<Flow>, opts: &InferOptions) -> Result<InferOutcome> {
    let mut s = env.reset(flow);
    let mut trace = Vec::new();
    let mut stopped_by_value = false;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..env.config.tau {
        let mask = action_mask(&s);
        let a: ActionId = agent.select_action(&s.pair, &mask, opts.mode, &mut rng)?;
        let q = agent.max_q(&s.pair, a)?;
        s = env.advance(&s, a)?;
        trace.push((a.0, q));
        let threshold = match opts.rule {
            StopRule::QValue(x) => x,
            StopRule::Adjusted { xi } => {
                let current = env.restore(&s)?;
                let r_m = effectiveness_penalty(&s.original, &current, env.config.penalty)?;
                xi + env.config.beta - env.config.gamma * r_m
            }
        };
        if q >= threshold {
            stopped_by_value = true;
            break;
        }
    }
    let flow = env.restore(&s)?;
    Ok(InferOutcome {
        flow,
        steps: trace.len(),
        state: s,
        trace,
        stopped_by_value,
    })
}
