use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detectors::{Detector, DetectorKind, EvalReport};
use crate::error::{Error, Result};
use crate::traffic::{flow_rate, kl_divergence, paired_histograms, quantile, Flow, MaliciousKind, KL_SMOOTHING};

/// Per-flow inference result stored next to the adversarial flows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferRecord {
    pub flow_id: String,
    pub steps: usize,
    pub stopped_by_value: bool,
    pub actions: Vec<usize>,
    /// `max_j Q_j` of each action; empty for policies without critics.
    pub q_values: Vec<f64>,
}

/// Held-out quality of one detector against one attack family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorEval {
    pub detector: DetectorKind,
    pub attack: MaliciousKind,
    pub report: EvalReport,
}

/// Outcome of one adversarial flow, as written to the verdict log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowVerdict {
    pub scenario: String,
    pub flow_id: String,
    pub steps: usize,
    pub stopped_by_value: bool,
    pub original_flagged: bool,
    pub flagged: bool,
    pub original_rate_mbps: f64,
    pub adversarial_rate_mbps: f64,
    pub chaff_packets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub max: usize,
}

impl StepStats {
    pub fn from_steps(steps: &[usize]) -> Self {
        let v: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
        StepStats {
            mean: if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 },
            p50: quantile(&v, 0.5),
            p90: quantile(&v, 0.9),
            max: steps.iter().copied().max().unwrap_or(0),
        }
    }
}

/// Deterministic metrics of one attacked scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub flows: usize,
    pub evaded: usize,
    pub asr: f64,
    /// Share of the untouched test flows the detector already misses.
    pub baseline_asr: f64,
    pub steps: StepStats,
    pub stopped_by_value: usize,
    pub bandwidth_kl: f64,
    pub train_episodes: usize,
    pub train_success_rate: f64,
    pub train_probes: u64,
    pub budget_exhausted: bool,
    pub xi_prime: Option<f64>,
}

/// Scores adversarial flows against the noise-free detector.
pub fn verdicts(
    scenario: &str,
    detector: &Detector,
    originals: &[Flow],
    adversarial: &[Flow],
    records: &[InferRecord],
) -> Result<Vec<FlowVerdict>> {
    if originals.len() != adversarial.len() || originals.len() != records.len() {
        return Err(Error::invalid(format!(
            "{scenario}: {} originals, {} adversarial flows, {} records",
            originals.len(),
            adversarial.len(),
            records.len()
        )));
    }
    originals
        .iter()
        .zip(adversarial)
        .zip(records)
        .map(|((o, a), r)| {
            if o.id != a.id || o.id != r.flow_id {
                return Err(Error::invalid(format!("{scenario}: flow `{}` is out of order", o.id)));
            }
            Ok(FlowVerdict {
                scenario: scenario.to_string(),
                flow_id: o.id.clone(),
                steps: r.steps,
                stopped_by_value: r.stopped_by_value,
                original_flagged: detector.flags(o),
                flagged: detector.flags(a),
                original_rate_mbps: flow_rate(o),
                adversarial_rate_mbps: flow_rate(a),
                chaff_packets: a.chaff_count(),
            })
        })
        .collect()
}

/// Training-side figures carried into a [`ScenarioReport`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub probes: u64,
    pub budget_exhausted: bool,
    pub xi_prime: Option<f64>,
}

pub fn summarize(
    scenario: &str,
    verdicts: &[FlowVerdict],
    originals: &[Flow],
    adversarial: &[Flow],
    train: &TrainSummary,
) -> Result<ScenarioReport> {
    let flows = verdicts.len();
    let evaded = verdicts.iter().filter(|v| !v.flagged).count();
    let missed = verdicts.iter().filter(|v| !v.original_flagged).count();
    let steps: Vec<usize> = verdicts.iter().map(|v| v.steps).collect();
    let (p, q) = paired_histograms(originals, adversarial);
    Ok(ScenarioReport {
        scenario: scenario.to_string(),
        flows,
        evaded,
        asr: share(evaded, flows),
        baseline_asr: share(missed, flows),
        steps: StepStats::from_steps(&steps),
        stopped_by_value: verdicts.iter().filter(|v| v.stopped_by_value).count(),
        bandwidth_kl: kl_divergence(&p, &q, KL_SMOOTHING)?,
        train_episodes: train.episodes,
        train_success_rate: train.success_rate,
        train_probes: train.probes,
        budget_exhausted: train.budget_exhausted,
        xi_prime: train.xi_prime,
    })
}

fn share(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Everything in `report.json`. Wall-clock figures live in `timings.json`
/// so that reruns produce identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub detectors: Vec<DetectorEval>,
    pub scenarios: Vec<ScenarioReport>,
    pub mean_asr: f64,
}

impl RunReport {
    pub fn new(config_hash: String, seed: u64, detectors: Vec<DetectorEval>, scenarios: Vec<ScenarioReport>) -> Self {
        let mean_asr = if scenarios.is_empty() {
            0.0
        } else {
            scenarios.iter().map(|s| s.asr).sum::<f64>() / scenarios.len() as f64
        };
        RunReport {
            config_hash,
            seed,
            detectors,
            scenarios,
            mean_asr,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub scenario: String,
    pub flows_per_second: f64,
    pub packets_per_second: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<StageTiming>,
    pub inference: Vec<Throughput>,
}

pub fn write_verdicts<W: Write>(w: W, rows: &[FlowVerdict]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::{train_threshold, ThresholdDetector};
    use crate::traffic::{synth_benign, synth_malicious, BenignProfile};

    fn records(flows: &[Flow]) -> Vec<InferRecord> {
        flows
            .iter()
            .map(|f| InferRecord {
                flow_id: f.id.clone(),
                steps: 0,
                stopped_by_value: false,
                actions: Vec::new(),
                q_values: Vec::new(),
            })
            .collect()
    }

    #[test]
    fn permissive_and_blocking_detectors_bound_asr() {
        let benign = synth_benign(200, 1, &BenignProfile::default());
        let flows = synth_malicious(6, 2, MaliciousKind::BurstFlood);
        let recs = records(&flows);
        let train = TrainSummary::default();

        let open = Detector::Threshold(ThresholdDetector {
            quantile: 0.99,
            min_mean_ipd: 0.0,
            max_window_rate: f64::INFINITY,
        });
        let v = verdicts("s", &open, &flows, &flows, &recs).unwrap();
        let r = summarize("s", &v, &flows, &flows, &train).unwrap();
        assert_eq!(r.asr, 1.0);
        assert!(r.bandwidth_kl < 1e-7);

        let shut = Detector::Threshold(ThresholdDetector {
            quantile: 0.99,
            min_mean_ipd: f64::INFINITY,
            max_window_rate: 0.0,
        });
        let v = verdicts("s", &shut, &flows, &flows, &recs).unwrap();
        assert_eq!(summarize("s", &v, &flows, &flows, &train).unwrap().asr, 0.0);

        let fitted = Detector::Threshold(train_threshold(&benign, 0.99).unwrap());
        let v = verdicts("s", &fitted, &flows, &flows, &recs).unwrap();
        let r = summarize("s", &v, &flows, &flows, &train).unwrap();
        assert_eq!(r.asr, r.baseline_asr);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let flows = synth_malicious(3, 2, MaliciousKind::Beacon);
        let det = Detector::Threshold(ThresholdDetector {
            quantile: 0.99,
            min_mean_ipd: 0.0,
            max_window_rate: 1.0,
        });
        let mut recs = records(&flows);
        assert!(verdicts("s", &det, &flows, &flows[..2], &recs).is_err());
        recs.swap(0, 1);
        assert!(verdicts("s", &det, &flows, &flows, &recs).is_err());
    }

    #[test]
    fn step_stats() {
        let s = StepStats::from_steps(&[1, 2, 3, 10]);
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.max, 10);
        assert_eq!(s.p50, 2.5);
    }
}
