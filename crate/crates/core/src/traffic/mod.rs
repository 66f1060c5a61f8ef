//! Flows, their on-disk format, synthetic corpora and flow-level metrics.

pub mod csv_io;
pub mod metrics;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_io::{load_flows, save_flows};
pub use metrics::{
    bandwidth_histogram, flow_rate, kl_divergence, kl_from_probabilities, paired_histograms, quantile, window_rates,
    BandwidthHistogram, MetricRecord, HISTOGRAM_BINS, KL_SMOOTHING, SINGLE_PACKET_DURATION,
    WINDOW_SECONDS,
};
pub use synth::{synth_benign, synth_malicious, BenignProfile, MaliciousKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacketEvent {
    /// Seconds since the start of the flow.
    pub arrival_time: f64,
    pub size: u32,
    /// Attacker-inserted packet that the receiver discards.
    pub chaff: bool,
}

impl PacketEvent {
    pub fn new(arrival_time: f64, size: u32) -> Self {
        PacketEvent {
            arrival_time,
            size,
            chaff: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malicious,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => "benign",
            Label::Malicious => "malicious",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "benign" | "0" => Ok(Label::Benign),
            "malicious" | "1" => Ok(Label::Malicious),
            other => Err(Error::invalid(format!("unknown label `{other}`"))),
        }
    }
}

/// An ordered, non-empty sequence of packets sharing one identifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub id: String,
    pub label: Label,
    events: Vec<PacketEvent>,
}

impl Flow {
    pub fn new(id: impl Into<String>, label: Label, events: Vec<PacketEvent>) -> Result<Self> {
        let id = id.into();
        if events.is_empty() {
            return Err(Error::invalid(format!("flow {id} has no packets")));
        }
        for (i, e) in events.iter().enumerate() {
            if e.size == 0 {
                return Err(Error::invalid(format!("flow {id} packet {i} has size 0")));
            }
            if !e.arrival_time.is_finite() || e.arrival_time < 0.0 {
                return Err(Error::invalid(format!(
                    "flow {id} packet {i} has arrival time {}",
                    e.arrival_time
                )));
            }
        }
        if events.windows(2).any(|w| w[1].arrival_time < w[0].arrival_time) {
            return Err(Error::invalid(format!("flow {id} has non-monotone arrival times")));
        }
        Ok(Flow { id, label, events })
    }

    /// Builds a flow from sizes and inter-packet delays, where `ipds[0]` is
    /// ignored and each later delay is measured from the previous packet.
    pub fn from_sizes_and_ipds(
        id: impl Into<String>,
        label: Label,
        sizes: &[u32],
        ipds: &[f64],
    ) -> Result<Self> {
        if sizes.len() != ipds.len() {
            return Err(Error::invalid("sizes and ipds differ in length"));
        }
        let mut t = 0.0;
        let events = sizes
            .iter()
            .zip(ipds)
            .enumerate()
            .map(|(i, (&s, &h))| {
                if i > 0 {
                    t += h;
                }
                PacketEvent::new(t, s)
            })
            .collect();
        Flow::new(id, label, events)
    }

    pub fn events(&self) -> &[PacketEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `h_0 = 0`, `h_i = t_i - t_{i-1}`.
    pub fn ipds(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.events.len());
        out.push(0.0);
        out.extend(self.events.windows(2).map(|w| w[1].arrival_time - w[0].arrival_time));
        out
    }

    pub fn sizes(&self) -> Vec<u32> {
        self.events.iter().map(|e| e.size).collect()
    }

    pub fn duration(&self) -> f64 {
        self.events.last().map_or(0.0, |l| l.arrival_time) - self.events[0].arrival_time
    }

    pub fn total_bytes(&self) -> u64 {
        self.events.iter().map(|e| e.size as u64).sum()
    }

    pub fn non_chaff_count(&self) -> usize {
        self.events.iter().filter(|e| !e.chaff).count()
    }

    pub fn chaff_count(&self) -> usize {
        self.events.len() - self.non_chaff_count()
    }

    /// Copy with every arrival time shifted by `dt`.
    pub fn shifted(&self, dt: f64) -> Result<Flow> {
        let events = self
            .events
            .iter()
            .map(|e| PacketEvent {
                arrival_time: e.arrival_time + dt,
                ..*e
            })
            .collect();
        Flow::new(self.id.clone(), self.label, events)
    }
}
