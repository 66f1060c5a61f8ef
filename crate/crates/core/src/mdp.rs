//! Finite-horizon editing environment: each step masks one slot of the
//! first chunk of a malicious flow (modify an IPD or insert a chaff packet),
//! fills it, restores the flow and asks the oracle.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detectors::{Oracle, OracleVerdict};
use crate::encoder::{fill, EncoderModel, FillMode};
use crate::error::{Error, Result};
use crate::tokenizer::{tokenize_slice, TokenId, TokenPair, Vocabulary};
use crate::traffic::{flow_rate, Flow, PacketEvent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// Penalise rate loss relative to the original flow.
    Rate,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub tau: usize,
    pub xi: f64,
    pub beta: f64,
    pub gamma: f64,
    pub penalty: PenaltyKind,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            tau: 10,
            xi: 0.95,
            beta: 0.05,
            gamma: 0.1,
            penalty: PenaltyKind::Rate,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if !(0.01..=0.1).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0.01, 0.1]", self.beta)));
        }
        if !(0.0..=0.2).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 0.2]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(Error::Config(format!("xi {} outside [0, 1]", self.xi)));
        }
        Ok(())
    }
}

/// Action id in `[0, 2n]`: odd ids modify the IPD at `a / 2`, even ids
/// insert a packet at `a / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edit {
    Modify(usize),
    Insert(usize),
}

impl ActionId {
    pub fn edit(self) -> Edit {
        if self.0 % 2 == 1 {
            Edit::Modify(self.0 / 2)
        } else {
            Edit::Insert(self.0 / 2)
        }
    }

    pub fn count(n: usize) -> usize {
        2 * n + 1
    }
}

/// Provenance of one slot of the state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    /// Index into the original flow, `None` for chaff.
    pub origin: Option<usize>,
    /// Whether the original delay is still in place.
    pub ipd_kept: bool,
}

impl Slot {
    pub fn is_chaff(&self) -> bool {
        self.origin.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdpState {
    pub pair: TokenPair,
    pub slots: Vec<Slot>,
    /// Packets pushed out of the window by insertions at full capacity, in
    /// flow order, as (size, delay from predecessor).
    pub overflow: Vec<(u32, f64)>,
    pub t: usize,
    /// Non-chaff packets that evaded in this state.
    pub evaded: usize,
    pub original: Arc<Flow>,
}

impl MdpState {
    pub fn n(&self) -> usize {
        self.pair.len()
    }

    pub fn valid_len(&self) -> usize {
        self.pair.valid_len
    }

    pub fn chaff_map(&self) -> Vec<bool> {
        (0..self.n())
            .map(|i| i < self.valid_len() && self.slots[i].is_chaff())
            .collect()
    }

    pub fn n_total(&self) -> usize {
        self.original.len()
    }

    pub fn evaded_ratio(&self) -> f64 {
        self.evaded as f64 / self.n_total() as f64
    }
}

/// Valid actions: modify below `valid_len`, insert at or below `valid_len`
/// (at full capacity the last slot is dropped).
pub fn action_mask_for(valid_len: usize, n: usize) -> Vec<bool> {
    (0..ActionId::count(n))
        .map(|a| match ActionId(a).edit() {
            Edit::Modify(p) => p < valid_len,
            Edit::Insert(p) => p <= valid_len && p < n,
        })
        .collect()
}

pub fn action_mask(s: &MdpState) -> Vec<bool> {
    action_mask_for(s.valid_len(), s.n())
}

/// Places MASK tokens for `a` without filling them.
pub fn apply_action(s: &MdpState, a: ActionId, vocab: &Vocabulary) -> Result<MdpState> {
    let n = s.n();
    if a.0 >= ActionId::count(n) || !action_mask(s)[a.0] {
        return Err(Error::invalid(format!("action {} is not valid in this state", a.0)));
    }
    let sp = &vocab.special_ids;
    let mut out = s.clone();
    match a.edit() {
        Edit::Modify(p) => {
            out.pair.ipd_tokens[p] = sp.ipd_mask;
            out.slots[p].ipd_kept = false;
        }
        Edit::Insert(p) => {
            let v = s.valid_len();
            if v == n {
                let last = n - 1;
                if !s.slots[last].is_chaff() {
                    let size = s.original.events()[s.slots[last].origin.expect("original slot")].size;
                    out.overflow.insert(0, (size, slot_delay(s, last, vocab)?));
                }
                out.pair.size_tokens.pop();
                out.pair.ipd_tokens.pop();
                out.slots.pop();
            } else {
                out.pair.size_tokens.pop();
                out.pair.ipd_tokens.pop();
                out.slots.pop();
                out.pair.valid_len += 1;
            }
            out.pair.size_tokens.insert(p, sp.size_mask);
            out.pair.ipd_tokens.insert(p, sp.ipd_mask);
            out.slots.insert(
                p,
                Slot {
                    origin: None,
                    ipd_kept: false,
                },
            );
        }
    }
    Ok(out)
}

fn slot_delay(s: &MdpState, i: usize, vocab: &Vocabulary) -> Result<f64> {
    let slot = s.slots[i];
    if let (Some(o), true) = (slot.origin, slot.ipd_kept) {
        return Ok(s.original.ipds()[o]);
    }
    let h = s.pair.ipd_tokens[i];
    if h == vocab.special_ids.ipd_unk {
        return Ok(0.0);
    }
    vocab
        .ipd_representative(h)
        .ok_or_else(|| Error::invalid(format!("slot {i} holds IPD token {h} without a delay")))
}

/// Concrete flow for a state: the edited window, packets pushed out of it,
/// then the untouched remainder of the original flow.
pub fn restore(s: &MdpState, vocab: &Vocabulary) -> Result<Flow> {
    let orig = s.original.events();
    let ipds = s.original.ipds();
    let mut t = orig[0].arrival_time;
    let mut events = Vec::with_capacity(s.valid_len() + s.overflow.len() + orig.len());
    for i in 0..s.valid_len() {
        let slot = s.slots[i];
        let size = match slot.origin {
            Some(o) => orig[o].size,
            None => vocab.size_bytes(s.pair.size_tokens[i]).ok_or_else(|| {
                Error::invalid(format!("slot {i} holds size token {} without a byte value", s.pair.size_tokens[i]))
            })?,
        };
        if i > 0 {
            t += slot_delay(s, i, vocab)?;
        }
        events.push(PacketEvent {
            arrival_time: t,
            size,
            chaff: slot.is_chaff(),
        });
    }
    for &(size, d) in &s.overflow {
        t += d;
        events.push(PacketEvent::new(t, size));
    }
    let window = s.slots[..s.valid_len()].iter().filter(|x| !x.is_chaff()).count() + s.overflow.len();
    for k in window..orig.len() {
        t += ipds[k];
        events.push(PacketEvent::new(t, orig[k].size));
    }
    Flow::new(s.original.id.clone(), s.original.label, events)
}

/// How masked slots are filled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filler {
    Encoder(FillMode),
    /// Uniform value between the original window's smallest and largest.
    UniformRange { seed: u64 },
    /// Mean of the original window's values.
    FlowMean,
}

impl Default for Filler {
    fn default() -> Self {
        Filler::Encoder(FillMode::Greedy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_e: f64,
    pub r_d: f64,
    pub r_m: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: TokenPair,
    pub action: usize,
    pub reward: f64,
    pub next_state: TokenPair,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: MdpState,
    pub transition: Transition,
    pub reward: RewardBreakdown,
    pub verdict: OracleVerdict,
    pub done: bool,
}

/// One line of an episode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub action: usize,
    pub reward: RewardBreakdown,
    pub evaded_ratio: f64,
    pub probe_count: u64,
}

pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn is_terminal(t: usize, evaded_ratio: f64, tau: usize, xi: f64) -> bool {
    t >= tau || evaded_ratio > xi
}

/// `min(0, Δrate / rate)` for the rate kind, zero otherwise.
pub fn effectiveness_penalty(original: &Flow, current: &Flow, kind: PenaltyKind) -> Result<f64> {
    match kind {
        PenaltyKind::None => Ok(0.0),
        PenaltyKind::Rate => {
            let r0 = flow_rate(original);
            if !(r0 > 0.0) {
                return Err(Error::invalid("original flow has zero rate"));
            }
            Ok(((flow_rate(current) - r0) / r0).min(0.0))
        }
    }
}

pub struct Environment<'a> {
    pub encoder: &'a EncoderModel,
    pub vocab: &'a Vocabulary,
    pub oracle: &'a dyn Oracle,
    pub config: EnvConfig,
    pub filler: Filler,
}

impl<'a> Environment<'a> {
    pub fn new(encoder: &'a EncoderModel, vocab: &'a Vocabulary, oracle: &'a dyn Oracle, config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Environment {
            encoder,
            vocab,
            oracle,
            config,
            filler: Filler::default(),
        })
    }

    pub fn with_filler(mut self, filler: Filler) -> Self {
        self.filler = filler;
        self
    }

    pub fn n(&self) -> usize {
        self.encoder.config.n
    }

    /// Initial state from the first chunk of `flow`. No probe is spent; the
    /// initial evasion count is taken to be zero.
    pub fn reset(&self, flow: Arc<Flow>) -> MdpState {
        let n = self.n();
        let m = flow.len().min(n);
        let sizes = flow.sizes();
        let ipds = flow.ipds();
        let pair = tokenize_slice(&sizes[..m], &ipds[..m], 0, self.vocab, n);
        let slots = (0..n)
            .map(|i| Slot {
                origin: (i < m).then_some(i),
                ipd_kept: i < m,
            })
            .collect();
        MdpState {
            pair,
            slots,
            overflow: Vec::new(),
            t: 0,
            evaded: 0,
            original: flow,
        }
    }

    fn fill_state(&self, s: &MdpState, a: ActionId) -> Result<TokenPair> {
        match &self.filler {
            Filler::Encoder(mode) => fill(self.encoder, &s.pair, self.vocab, mode),
            Filler::UniformRange { seed } => {
                let (sz, ipd) = self.original_ranges(s);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((s.t as u64) << 32) ^ a.0 as u64);
                Ok(self.fill_with(s, |is_size, rng: &mut ChaCha8Rng| {
                    let (lo, hi) = if is_size { sz } else { ipd };
                    rng.random_range(lo..=hi)
                }, &mut rng))
            }
            Filler::FlowMean => {
                let (ms, mh) = self.original_means(s);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                Ok(self.fill_with(s, |is_size, _| if is_size { ms } else { mh }, &mut rng))
            }
        }
    }

    fn fill_with<F>(&self, s: &MdpState, mut f: F, rng: &mut ChaCha8Rng) -> TokenPair
    where
        F: FnMut(bool, &mut ChaCha8Rng) -> TokenId,
    {
        let sp = &self.vocab.special_ids;
        let mut out = s.pair.clone();
        for i in 0..out.valid_len {
            if out.size_tokens[i] == sp.size_mask {
                out.size_tokens[i] = f(true, rng);
            }
            if out.ipd_tokens[i] == sp.ipd_mask {
                out.ipd_tokens[i] = f(false, rng);
            }
        }
        out
    }

    fn window(&self, s: &MdpState) -> (Vec<u32>, Vec<f64>) {
        let m = s.original.len().min(self.n());
        let sizes = s.original.sizes()[..m].iter().map(|&x| x.min(self.vocab.mtu)).collect();
        let ipds = s.original.ipds()[1..m].to_vec();
        (sizes, ipds)
    }

    fn original_ranges(&self, s: &MdpState) -> ((TokenId, TokenId), (TokenId, TokenId)) {
        let (sizes, ipds) = self.window(s);
        let smin = *sizes.iter().min().expect("non-empty flow");
        let smax = *sizes.iter().max().expect("non-empty flow");
        let toks: Vec<TokenId> = if ipds.is_empty() {
            vec![self.vocab.ipd_token(0.0)]
        } else {
            ipds.iter().map(|&h| self.vocab.ipd_token(h)).collect()
        };
        let hmin = *toks.iter().min().expect("non-empty");
        let hmax = *toks.iter().max().expect("non-empty");
        ((self.vocab.size_token(smin), self.vocab.size_token(smax)), (hmin, hmax))
    }

    fn original_means(&self, s: &MdpState) -> (TokenId, TokenId) {
        let (sizes, ipds) = self.window(s);
        let ms = sizes.iter().map(|&x| x as f64).sum::<f64>() / sizes.len() as f64;
        let mh = if ipds.is_empty() {
            0.0
        } else {
            ipds.iter().sum::<f64>() / ipds.len() as f64
        };
        (self.vocab.size_token(ms.round().max(1.0) as u32), self.vocab.ipd_token(mh))
    }

    pub fn restore(&self, s: &MdpState) -> Result<Flow> {
        restore(s, self.vocab)
    }

    /// Masks and fills without consulting the oracle.
    pub fn advance(&self, s: &MdpState, a: ActionId) -> Result<MdpState> {
        let masked = apply_action(s, a, self.vocab)?;
        let filled = self.fill_state(&masked, a)?;
        let mut next = masked;
        next.pair = filled;
        next.t = s.t + 1;
        Ok(next)
    }

    /// Masks, fills, restores and queries once.
    pub fn step(&self, s: &MdpState, a: ActionId) -> Result<StepOutcome> {
        let mut next = self.advance(s, a)?;
        let flow = restore(&next, self.vocab)?;
        let verdict = self.oracle.query(&flow)?;
        next.evaded = verdict.evaded_non_chaff;

        let n_total = s.n_total() as f64;
        let r_e = (next.evaded as f64 - s.evaded as f64) / n_total;
        let r_d = -1.0;
        let r_m = effectiveness_penalty(&s.original, &flow, self.config.penalty)?;
        let total = r_e + self.config.beta * r_d + self.config.gamma * r_m;
        let done = is_terminal(next.t, next.evaded_ratio(), self.config.tau, self.config.xi);
        let reward = RewardBreakdown { r_e, r_d, r_m, total };
        Ok(StepOutcome {
            transition: Transition {
                state: s.pair.clone(),
                action: a.0,
                reward: total,
                next_state: next.pair.clone(),
                done,
            },
            next,
            reward,
            verdict,
            done,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_decoding() {
        assert_eq!(ActionId(7).edit(), Edit::Modify(3));
        assert_eq!(ActionId(4).edit(), Edit::Insert(2));
        assert_eq!(ActionId(0).edit(), Edit::Insert(0));
    }

    #[test]
    fn mask_matches_definition() {
        let m = action_mask_for(3, 8);
        assert_eq!(m.len(), 17);
        let modify: Vec<usize> = (0..17).filter(|&a| a % 2 == 1 && m[a]).map(|a| a / 2).collect();
        let insert: Vec<usize> = (0..17).filter(|&a| a % 2 == 0 && m[a]).map(|a| a / 2).collect();
        assert_eq!(modify, vec![0, 1, 2]);
        assert_eq!(insert, vec![0, 1, 2, 3]);
        let full = action_mask_for(8, 8);
        assert!((0..16).all(|a| full[a]));
        assert!(!full[16]);
    }

    #[test]
    fn terminal_rule() {
        assert!(is_terminal(10, 0.0, 10, 0.95));
        assert!(is_terminal(2, 1.0, 10, 0.95));
        assert!(!is_terminal(3, 0.95, 10, 0.95));
    }

    #[test]
    fn penalty_values() {
        use crate::traffic::Label;
        let a = Flow::from_sizes_and_ipds("a", Label::Malicious, &[100, 100], &[0.0, 0.01]).unwrap();
        let b = Flow::from_sizes_and_ipds("b", Label::Malicious, &[100, 100], &[0.0, 0.02]).unwrap();
        assert_eq!(effectiveness_penalty(&a, &a, PenaltyKind::Rate).unwrap(), 0.0);
        assert!((effectiveness_penalty(&a, &b, PenaltyKind::Rate).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(effectiveness_penalty(&a, &b, PenaltyKind::None).unwrap(), 0.0);
        assert_eq!(effectiveness_penalty(&b, &a, PenaltyKind::Rate).unwrap(), 0.0);
    }
}
