use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{flow_features, log_features, Standardizer, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::traffic::{quantile, Flow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CentroidConfig {
    pub k: usize,
    pub quantile: f64,
    pub iterations: usize,
    /// Share of the benign corpus held back to calibrate the threshold.
    pub calibration_fraction: f64,
    /// Score consecutive windows of this many packets instead of whole flows.
    pub window_packets: Option<usize>,
    pub seed: u64,
}

impl Default for CentroidConfig {
    fn default() -> Self {
        CentroidConfig {
            k: 8,
            quantile: 0.99,
            iterations: 50,
            calibration_fraction: 0.3,
            window_packets: None,
            seed: 0,
        }
    }
}

/// Nearest-centroid anomaly detector over standardised flow statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidDetector {
    pub norm: Standardizer,
    pub centroids: Vec<[f64; NUM_FEATURES]>,
    pub threshold: f64,
    pub quantile: f64,
    pub window_packets: Option<usize>,
}

fn dist2(a: &[f64; NUM_FEATURES], b: &[f64; NUM_FEATURES]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Seeded k-means with k-means++ initialisation.
pub fn kmeans(points: &[[f64; NUM_FEATURES]], k: usize, iterations: usize, seed: u64) -> Result<Vec<[f64; NUM_FEATURES]>> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!("k = {k} for {} points", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &di) in d.iter().enumerate() {
                if u < di {
                    pick = i;
                    break;
                }
                u -= di;
            }
            pick
        };
        centroids.push(points[next]);
        for (i, p) in points.iter().enumerate() {
            d[i] = d[i].min(dist2(p, &points[next]));
        }
    }
    let mut assign = vec![0usize; points.len()];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| dist2(p, &centroids[a]).total_cmp(&dist2(p, &centroids[b])))
                .expect("k >= 1");
            changed |= best != assign[i];
            assign[i] = best;
        }
        let mut sums = vec![[0.0; NUM_FEATURES]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for j in 0..NUM_FEATURES {
                sums[a][j] += p[j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..NUM_FEATURES {
                    centroids[c][j] = sums[c][j] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(centroids)
}

/// Packet windows of a flow as standalone flows.
fn windows(flow: &Flow, w: usize) -> Vec<(Flow, usize)> {
    flow.events()
        .chunks(w.max(1))
        .map(|evs| {
            let sub = Flow::new(flow.id.clone(), flow.label, evs.to_vec()).expect("slice of a valid flow");
            let non_chaff = evs.iter().filter(|e| !e.chaff).count();
            (sub, non_chaff)
        })
        .collect()
}

impl CentroidDetector {
    fn distance(&self, flow: &Flow) -> f64 {
        let x = self.norm.apply(&log_features(&flow_features(flow)));
        self.centroids
            .iter()
            .map(|c| dist2(&x, c))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    /// Distance of each scored unit with its non-chaff packet count.
    pub fn unit_scores(&self, flow: &Flow) -> Vec<(f64, usize)> {
        match self.window_packets {
            None => vec![(self.distance(flow), flow.non_chaff_count())],
            Some(w) => windows(flow, w)
                .into_iter()
                .map(|(sub, nc)| (self.distance(&sub), nc))
                .collect(),
        }
    }

    pub fn score(&self, flow: &Flow) -> f64 {
        self.unit_scores(flow).into_iter().map(|(s, _)| s).fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn train_centroid(benign: &[Flow], cfg: &CentroidConfig) -> Result<CentroidDetector> {
    if benign.is_empty() {
        return Err(Error::invalid("centroid detector needs benign flows"));
    }
    if !(cfg.quantile > 0.0 && cfg.quantile < 1.0) || !(0.0..1.0).contains(&cfg.calibration_fraction) {
        return Err(Error::Config(format!("bad centroid config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xce47);
    let mut idx: Vec<usize> = (0..benign.len()).collect();
    idx.shuffle(&mut rng);
    let nc = ((benign.len() as f64) * cfg.calibration_fraction).round() as usize;
    let nc = nc.min(benign.len().saturating_sub(1));
    let (cal, fit) = idx.split_at(nc);

    let units = |ids: &[usize]| -> Vec<Flow> {
        ids.iter()
            .flat_map(|&i| match cfg.window_packets {
                None => vec![benign[i].clone()],
                Some(w) => windows(&benign[i], w).into_iter().map(|(f, _)| f).collect(),
            })
            .collect()
    };
    let fit_units = units(fit);
    let raw: Vec<[f64; NUM_FEATURES]> = fit_units.iter().map(|f| log_features(&flow_features(f))).collect();
    let norm = Standardizer::fit(&raw);
    let pts: Vec<[f64; NUM_FEATURES]> = raw.iter().map(|r| norm.apply(r)).collect();
    let centroids = kmeans(&pts, cfg.k, cfg.iterations, cfg.seed)?;

    let mut det = CentroidDetector {
        norm,
        centroids,
        threshold: 0.0,
        quantile: cfg.quantile,
        window_packets: cfg.window_packets,
    };
    let cal_units = if cal.is_empty() { fit_units } else { units(cal) };
    let d: Vec<f64> = cal_units.iter().map(|f| det.distance(f)).collect();
    det.threshold = quantile(&d, cfg.quantile);
    Ok(det)
}
