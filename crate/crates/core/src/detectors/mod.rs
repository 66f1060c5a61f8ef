//! Hard-label reference detectors and the oracle interface wrapped around
//! them.

mod centroid;
pub mod features;
mod mlp;
mod oracle;
mod threshold;

pub use centroid::{kmeans, train_centroid, CentroidConfig, CentroidDetector};
pub use features::{flow_features, FEATURE_NAMES, NUM_FEATURES};
pub use mlp::{train_mlp, MlpConfig, MlpDetector};
pub use oracle::{DetectorOracle, Offline, Oracle, OracleVerdict};
pub use threshold::{mean_ipd, peak_window_rate, train_threshold, ThresholdDetector};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{checkpoint, Linear, ParamStore, Tensor};
use crate::traffic::Flow;
use features::Standardizer;

#[derive(Clone, Debug)]
pub enum Detector {
    Threshold(ThresholdDetector),
    Mlp(MlpDetector),
    Centroid(CentroidDetector),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Threshold,
    Mlp,
    Centroid,
}

impl std::str::FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(DetectorKind::Threshold),
            "mlp" => Ok(DetectorKind::Mlp),
            "centroid" => Ok(DetectorKind::Centroid),
            other => Err(Error::invalid(format!("unknown detector `{other}`"))),
        }
    }
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Threshold => "threshold",
            DetectorKind::Mlp => "mlp",
            DetectorKind::Centroid => "centroid",
        }
    }
}

impl Detector {
    pub fn kind(&self) -> DetectorKind {
        match self {
            Detector::Threshold(_) => DetectorKind::Threshold,
            Detector::Mlp(_) => DetectorKind::Mlp,
            Detector::Centroid(_) => DetectorKind::Centroid,
        }
    }

    /// Suspicion score; flows scoring above [`Detector::threshold`] (at or
    /// above for the MLP) are flagged.
    pub fn score(&self, flow: &Flow) -> f64 {
        match self {
            Detector::Threshold(d) => d.score(flow),
            Detector::Mlp(d) => d.score(flow),
            Detector::Centroid(d) => d.score(flow),
        }
    }

    pub fn threshold(&self) -> f64 {
        match self {
            Detector::Threshold(_) => 0.0,
            Detector::Mlp(d) => d.threshold,
            Detector::Centroid(d) => d.threshold,
        }
    }

    pub fn flags_score(&self, score: f64) -> bool {
        match self {
            Detector::Mlp(d) => score >= d.threshold,
            _ => score > self.threshold(),
        }
    }

    pub fn flags(&self, flow: &Flow) -> bool {
        !self.verdict(flow).flow_passed
    }

    /// Noise-free verdict. Only the windowed centroid detector reports
    /// partial evasion.
    pub fn verdict(&self, flow: &Flow) -> OracleVerdict {
        match self {
            Detector::Centroid(d) if d.window_packets.is_some() => {
                let units = d.unit_scores(flow);
                let evaded = units.iter().filter(|(s, _)| *s <= d.threshold).map(|(_, n)| n).sum();
                OracleVerdict {
                    evaded_non_chaff: evaded,
                    flow_passed: units.iter().all(|(s, _)| *s <= d.threshold),
                }
            }
            _ => OracleVerdict::flow_level(flow, !self.flags_score(self.score(flow))),
        }
    }

    pub fn scores(&self, flows: &[Flow]) -> Vec<f64> {
        match self {
            Detector::Mlp(d) => d.scores(flows),
            _ => flows.iter().map(|f| self.score(f)).collect(),
        }
    }

    pub fn evaluate(&self, benign: &[Flow], malicious: &[Flow]) -> EvalReport {
        let sb = self.scores(benign);
        let sm = self.scores(malicious);
        let fp = benign.iter().filter(|f| self.flags(f)).count();
        let tp = malicious.iter().filter(|f| self.flags(f)).count();
        let (precision, recall, f1) = prf(tp, fp, malicious.len() - tp);
        EvalReport {
            detector: self.kind(),
            auc: auc(&sb, &sm),
            f1,
            precision,
            recall,
            threshold: self.threshold(),
            benign_flagged: ratio(fp, benign.len()),
            malicious_flagged: ratio(tp, malicious.len()),
            n_benign: benign.len(),
            n_malicious: malicious.len(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir)?;
        let mut store = ParamStore::new();
        let meta = match self {
            Detector::Threshold(d) => {
                store.add("bounds", Tensor::from_rows(1, 2, vec![d.min_mean_ipd, d.max_window_rate]))?;
                Meta {
                    kind: DetectorKind::Threshold,
                    quantile: Some(d.quantile),
                    hidden: None,
                    window_packets: None,
                }
            }
            Detector::Mlp(d) => {
                store = d.store.clone();
                add_norm(&mut store, &d.norm)?;
                store.add("threshold", Tensor::scalar(d.threshold))?;
                Meta {
                    kind: DetectorKind::Mlp,
                    quantile: None,
                    hidden: Some(d.hidden()),
                    window_packets: None,
                }
            }
            Detector::Centroid(d) => {
                add_norm(&mut store, &d.norm)?;
                let k = d.centroids.len();
                store.add(
                    "centroids",
                    Tensor::from_rows(k, NUM_FEATURES, d.centroids.iter().flatten().copied().collect()),
                )?;
                store.add("threshold", Tensor::scalar(d.threshold))?;
                Meta {
                    kind: DetectorKind::Centroid,
                    quantile: Some(d.quantile),
                    hidden: None,
                    window_packets: d.window_packets,
                }
            }
        };
        let sha = checkpoint::save(&store, &dir.join("detector"))?;
        fs::write(dir.join("detector.meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(sha)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_slice(&fs::read(dir.join("detector.meta.json"))?)?;
        let store = checkpoint::load(&dir.join("detector"))?;
        let get = |name: &str| -> Result<&Tensor> {
            store
                .id(name)
                .map(|id| store.get(id))
                .ok_or_else(|| Error::invalid(format!("detector checkpoint lacks `{name}`")))
        };
        Ok(match meta.kind {
            DetectorKind::Threshold => {
                let b = get("bounds")?;
                Detector::Threshold(ThresholdDetector {
                    quantile: meta.quantile.unwrap_or(0.99),
                    min_mean_ipd: b.data()[0],
                    max_window_rate: b.data()[1],
                })
            }
            DetectorKind::Mlp => {
                let norm = read_norm(&get("norm.mean")?.clone(), &get("norm.std")?.clone());
                let threshold = get("threshold")?.item();
                let hidden = meta.hidden.ok_or_else(|| Error::invalid("MLP checkpoint lacks hidden size"))?;
                let mut fresh = ParamStore::new();
                MlpDetector::layers(&mut fresh, hidden, 0)?;
                for (id, p) in fresh.clone().iter() {
                    let src = get(&p.name)?;
                    if src.shape() != p.tensor.shape() {
                        return Err(Error::shape(format!("parameter `{}` has the wrong shape", p.name)));
                    }
                    *fresh.get_mut(id) = src.clone();
                }
                let linear = |name: &str, fan_in, fan_out| Linear {
                    weight: fresh.id(&format!("{name}.weight")).expect("layer"),
                    bias: fresh.id(&format!("{name}.bias")).expect("layer"),
                    fan_in,
                    fan_out,
                };
                let l1 = linear("mlp.l1", NUM_FEATURES, hidden);
                let l2 = linear("mlp.l2", hidden, 2);
                Detector::Mlp(MlpDetector {
                    norm,
                    store: fresh,
                    l1,
                    l2,
                    threshold,
                })
            }
            DetectorKind::Centroid => {
                let norm = read_norm(&get("norm.mean")?.clone(), &get("norm.std")?.clone());
                let c = get("centroids")?;
                let centroids = (0..c.rows())
                    .map(|r| c.row(r).try_into().expect("feature width"))
                    .collect();
                Detector::Centroid(CentroidDetector {
                    norm,
                    centroids,
                    threshold: get("threshold")?.item(),
                    quantile: meta.quantile.unwrap_or(0.99),
                    window_packets: meta.window_packets,
                })
            }
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    kind: DetectorKind,
    quantile: Option<f64>,
    hidden: Option<usize>,
    window_packets: Option<usize>,
}

fn add_norm(store: &mut ParamStore, norm: &Standardizer) -> Result<()> {
    store.add("norm.mean", Tensor::from_rows(1, NUM_FEATURES, norm.mean.to_vec()))?;
    store.add("norm.std", Tensor::from_rows(1, NUM_FEATURES, norm.std.to_vec()))?;
    Ok(())
}

fn read_norm(mean: &Tensor, std: &Tensor) -> Standardizer {
    Standardizer {
        mean: mean.data().try_into().expect("feature width"),
        std: std.data().try_into().expect("feature width"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector: DetectorKind,
    pub auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub benign_flagged: f64,
    pub malicious_flagged: f64,
    pub n_benign: usize,
    pub n_malicious: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Precision, recall and F1 from confusion counts.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Probability that a random malicious score exceeds a random benign one,
/// ties counting one half.
pub fn auc(benign: &[f64], malicious: &[f64]) -> f64 {
    if benign.is_empty() || malicious.is_empty() {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = benign
        .iter()
        .map(|&s| (s, false))
        .chain(malicious.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let j = i + all[i..].iter().take_while(|x| x.0 == all[i].0).count();
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let nm = malicious.len() as f64;
    let nb = benign.len() as f64;
    (rank_sum - nm * (nm + 1.0) / 2.0) / (nm * nb)
}

/// F1-optimal probability threshold over the grid `0, 0.01, ..., 1`,
/// flagging scores at or above it. Among equally good thresholds the centre
/// of the first optimal run is taken.
pub fn f1_grid_threshold(benign: &[f64], malicious: &[f64]) -> f64 {
    let f1s: Vec<f64> = (0..=100)
        .map(|i| {
            let t = i as f64 / 100.0;
            let tp = malicious.iter().filter(|&&s| s >= t).count();
            let fp = benign.iter().filter(|&&s| s >= t).count();
            prf(tp, fp, malicious.len() - tp).2
        })
        .collect();
    let best = f1s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let start = f1s.iter().position(|&f| f == best).expect("non-empty grid");
    let len = f1s[start..].iter().take_while(|&&f| f == best).count();
    (start + (len - 1) / 2) as f64 / 100.0
}
