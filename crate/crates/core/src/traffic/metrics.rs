use serde::{Deserialize, Serialize};

use super::Flow;
use crate::error::{Error, Result};

/// Duration assumed for flows whose packets share one timestamp.
pub const SINGLE_PACKET_DURATION: f64 = 1e-3;
pub const WINDOW_SECONDS: f64 = 0.1;
pub const HISTOGRAM_BINS: usize = 50;
/// Added to every bin of the reference histogram before renormalising.
pub const KL_SMOOTHING: f64 = 1e-9;

/// Mean rate in Mbps: total bits over the flow span.
pub fn flow_rate(flow: &Flow) -> f64 {
    let mut d = flow.duration();
    if d <= 0.0 {
        d = SINGLE_PACKET_DURATION;
    }
    flow.total_bytes() as f64 * 8.0 / d / 1e6
}

/// Per-window rates (Mbps) over consecutive windows anchored at the first
/// packet, including empty windows between the first and last packet.
pub fn window_rates(flow: &Flow, window: f64) -> Vec<f64> {
    let t0 = flow.events()[0].arrival_time;
    let nwin = ((flow.duration() / window).floor() as usize) + 1;
    let mut bits = vec![0.0; nwin];
    for e in flow.events() {
        let k = (((e.arrival_time - t0) / window).floor() as usize).min(nwin - 1);
        bits[k] += e.size as f64 * 8.0;
    }
    bits.into_iter().map(|b| b / window / 1e6).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl BandwidthHistogram {
    /// Equal-width bins on `[0, 1.2 * max_rate]`.
    pub fn edges_for(max_rate: f64, bins: usize) -> Vec<f64> {
        let top = if max_rate > 0.0 { 1.2 * max_rate } else { 1.0 };
        (0..=bins).map(|i| top * i as f64 / bins as f64).collect()
    }

    pub fn from_rates(rates: &[f64], bin_edges: Vec<f64>) -> Self {
        let bins = bin_edges.len() - 1;
        let lo = bin_edges[0];
        let width = (bin_edges[bins] - lo) / bins as f64;
        let mut counts = vec![0u64; bins];
        for &r in rates {
            let k = (((r - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[k] += 1;
        }
        BandwidthHistogram { bin_edges, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let t = self.total() as f64;
        if t == 0.0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}

pub fn bandwidth_histogram(flows: &[Flow], bin_edges: Vec<f64>) -> BandwidthHistogram {
    let rates: Vec<f64> = flows.iter().flat_map(|f| window_rates(f, WINDOW_SECONDS)).collect();
    BandwidthHistogram::from_rates(&rates, bin_edges)
}

/// Histograms of two corpora over shared edges spanning both.
pub fn paired_histograms(a: &[Flow], b: &[Flow]) -> (BandwidthHistogram, BandwidthHistogram) {
    let max = a
        .iter()
        .chain(b)
        .flat_map(|f| window_rates(f, WINDOW_SECONDS))
        .fold(0.0, f64::max);
    let edges = BandwidthHistogram::edges_for(max, HISTOGRAM_BINS);
    (bandwidth_histogram(a, edges.clone()), bandwidth_histogram(b, edges))
}

/// `Σ p_i ln(p_i / q_i)` with `q` smoothed by `eps` per bin.
pub fn kl_divergence(p: &BandwidthHistogram, q: &BandwidthHistogram, eps: f64) -> Result<f64> {
    if p.bin_edges != q.bin_edges {
        return Err(Error::invalid("histograms have different bin edges"));
    }
    kl_from_probabilities(&p.probabilities(), &q.probabilities(), eps)
}

pub fn kl_from_probabilities(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid("probability vectors differ in length"));
    }
    let z: f64 = q.iter().map(|v| v + eps).sum();
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            let qs = (qi + eps) / z;
            if qs <= 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += pi * (pi / qs).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Linearly interpolated quantile of unsorted values; NaN for an empty slice.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// One line of machine-readable metrics output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    #[serde(default)]
    pub tags: serde_json::Map<String, serde_json::Value>,
}

impl MetricRecord {
    pub fn new(metric: impl Into<String>, value: f64) -> Self {
        MetricRecord {
            metric: metric.into(),
            value,
            tags: Default::default(),
        }
    }

    pub fn tag(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.tags.insert(key.to_string(), value.into());
        self
    }
}
