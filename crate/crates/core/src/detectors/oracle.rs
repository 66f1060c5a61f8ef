use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Detector;
use crate::error::{Error, Result};
use crate::traffic::Flow;

/// Hard-label answer for one submitted flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleVerdict {
    /// Non-chaff packets that were not flagged.
    pub evaded_non_chaff: usize,
    pub flow_passed: bool,
}

impl OracleVerdict {
    /// All-or-nothing verdict of a flow-level detector.
    pub fn flow_level(flow: &Flow, passed: bool) -> Self {
        OracleVerdict {
            evaded_non_chaff: if passed { flow.non_chaff_count() } else { 0 },
            flow_passed: passed,
        }
    }
}

/// Black-box pass/fail interface seen by the attacker.
pub trait Oracle: Send + Sync {
    fn query(&self, flow: &Flow) -> Result<OracleVerdict>;
    /// Queries that reached the detector so far.
    fn probes(&self) -> u64;
}

/// A trained detector behind a probe counter, with optional label noise and
/// an optional query budget.
#[derive(Debug)]
pub struct DetectorOracle {
    detector: Arc<Detector>,
    noise: Option<(f64, u64)>,
    budget: Option<u64>,
    counter: AtomicU64,
}

impl DetectorOracle {
    pub fn new(detector: Arc<Detector>) -> Self {
        DetectorOracle {
            detector,
            noise: None,
            budget: None,
            counter: AtomicU64::new(0),
        }
    }

    /// Flips each verdict independently with probability `p`; the flip of
    /// query `i` depends only on `(seed, i)`.
    pub fn with_noise(mut self, p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=0.5).contains(&p) {
            return Err(Error::invalid(format!("noise probability {p} outside [0, 0.5]")));
        }
        self.noise = (p > 0.0).then_some((p, seed));
        Ok(self)
    }

    pub fn with_budget(mut self, budget: u64) -> Result<Self> {
        if budget == 0 {
            return Err(Error::invalid("probe budget must be at least 1"));
        }
        self.budget = Some(budget);
        Ok(self)
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    /// Same detector and wrappers with a fresh counter.
    pub fn fresh(&self) -> Self {
        DetectorOracle {
            detector: Arc::clone(&self.detector),
            noise: self.noise,
            budget: self.budget,
            counter: AtomicU64::new(0),
        }
    }

    fn reserve(&self) -> Result<u64> {
        match self.budget {
            None => Ok(self.counter.fetch_add(1, Ordering::SeqCst)),
            Some(b) => self
                .counter
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| (c < b).then_some(c + 1))
                .map_err(|_| Error::BudgetExhausted { budget: b }),
        }
    }
}

pub(crate) fn flip(seed: u64, index: u64, p: f64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.random::<f64>() < p
}

impl Oracle for DetectorOracle {
    fn query(&self, flow: &Flow) -> Result<OracleVerdict> {
        let index = self.reserve()?;
        let v = self.detector.verdict(flow);
        match self.noise {
            Some((p, seed)) if flip(seed, index, p) => Ok(OracleVerdict::flow_level(flow, !v.flow_passed)),
            _ => Ok(v),
        }
    }

    fn probes(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }
}

/// Stand-in for settings without detector access; every query fails.
#[derive(Clone, Copy, Debug, Default)]
pub struct Offline;

impl Oracle for Offline {
    fn query(&self, _flow: &Flow) -> Result<OracleVerdict> {
        Err(Error::Oracle("no detector is reachable".into()))
    }

    fn probes(&self) -> u64 {
        0
    }
}
