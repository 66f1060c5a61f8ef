use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traffic::{quantile, window_rates, Flow, WINDOW_SECONDS};

/// Flags flows whose mean IPD is unusually small or whose busiest window
/// carries an unusually high rate relative to benign traffic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDetector {
    pub quantile: f64,
    pub min_mean_ipd: f64,
    /// Upper bound on [`peak_window_rate`], in Mbps.
    pub max_window_rate: f64,
}

/// Relative margin used when every benign flow has the same statistic.
const DEGENERATE_MARGIN: f64 = 1e-3;

pub fn mean_ipd(flow: &Flow) -> Option<f64> {
    (flow.len() >= 2).then(|| flow.duration() / (flow.len() - 1) as f64)
}

/// Highest rate over the flow's consecutive 100 ms windows, in Mbps.
pub fn peak_window_rate(flow: &Flow) -> f64 {
    window_rates(flow, WINDOW_SECONDS).into_iter().fold(0.0, f64::max)
}

/// Each bound takes half of the allowed tail, so the union of both tests
/// keeps the benign false-positive rate near `1 - q`.
pub fn train_threshold(benign: &[Flow], q: f64) -> Result<ThresholdDetector> {
    if benign.is_empty() {
        return Err(Error::invalid("threshold detector needs benign flows"));
    }
    if !(q > 0.5 && q < 1.0) {
        return Err(Error::invalid(format!("quantile {q} outside (0.5, 1)")));
    }
    let tail = (1.0 - q) / 2.0;
    let ipds: Vec<f64> = benign.iter().filter_map(mean_ipd).collect();
    let rates: Vec<f64> = benign.iter().map(peak_window_rate).collect();

    let min_mean_ipd = if ipds.is_empty() {
        0.0
    } else {
        let lo = quantile(&ipds, tail);
        let spread = quantile(&ipds, 1.0) - quantile(&ipds, 0.0);
        if spread <= 0.0 {
            lo * (1.0 - DEGENERATE_MARGIN)
        } else {
            lo
        }
    };
    let hi = quantile(&rates, 1.0 - tail);
    let spread = quantile(&rates, 1.0) - quantile(&rates, 0.0);
    let max_window_rate = if spread <= 0.0 {
        hi * (1.0 + DEGENERATE_MARGIN)
    } else {
        hi
    };
    Ok(ThresholdDetector {
        quantile: q,
        min_mean_ipd,
        max_window_rate,
    })
}

impl ThresholdDetector {
    /// Log-ratio by which the flow exceeds its nearest bound; positive means
    /// flagged.
    pub fn score(&self, flow: &Flow) -> f64 {
        let rate = (peak_window_rate(flow) / self.max_window_rate).ln();
        match mean_ipd(flow) {
            Some(h) if self.min_mean_ipd > 0.0 => rate.max((self.min_mean_ipd / h.max(1e-15)).ln()),
            _ => rate,
        }
    }
}
