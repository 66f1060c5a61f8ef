//! Raw statistical flow features, independent of the attacker's tokenizer.

use crate::traffic::{flow_rate, Flow};

pub const NUM_FEATURES: usize = 12;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "size_mean",
    "size_std",
    "size_min",
    "size_max",
    "ipd_mean",
    "ipd_std",
    "ipd_min",
    "ipd_max",
    "count",
    "duration",
    "rate_mbps",
    "size_entropy",
];

fn moments(xs: &[f64]) -> [f64; 4] {
    if xs.is_empty() {
        return [0.0; 4];
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    [mean, var.sqrt(), min, max]
}

/// Shannon entropy (bits) of the empirical size distribution.
pub fn size_entropy(sizes: &[u32]) -> f64 {
    let mut s = sizes.to_vec();
    s.sort_unstable();
    let n = s.len() as f64;
    let mut h = 0.0;
    let mut i = 0;
    while i < s.len() {
        let j = s[i..].iter().take_while(|&&x| x == s[i]).count();
        let p = j as f64 / n;
        h -= p * p.log2();
        i += j;
    }
    h
}

/// Size moments, IPD moments (first delay excluded), count, duration,
/// rate and size entropy.
pub fn flow_features(flow: &Flow) -> [f64; NUM_FEATURES] {
    let sizes = flow.sizes();
    let sz: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let ipds: Vec<f64> = flow.ipds().into_iter().skip(1).collect();
    let s = moments(&sz);
    let h = moments(&ipds);
    [
        s[0],
        s[1],
        s[2],
        s[3],
        h[0],
        h[1],
        h[2],
        h[3],
        flow.len() as f64,
        flow.duration(),
        flow_rate(flow),
        size_entropy(&sizes),
    ]
}

/// Compresses heavy-tailed features onto comparable scales.
pub fn log_features(raw: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
    let mut out = [0.0; NUM_FEATURES];
    for (i, &x) in raw.iter().enumerate() {
        out[i] = match i {
            0..=3 => x / 1500.0,
            4..=7 | 9 => (x + 1e-7).log10(),
            8 | 10 => (x + 1.0).log10(),
            _ => x,
        };
    }
    out
}

/// Per-feature z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

impl Standardizer {
    pub fn fit(rows: &[[f64; NUM_FEATURES]]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = [0.0; NUM_FEATURES];
        let mut std = [0.0; NUM_FEATURES];
        for r in rows {
            for i in 0..NUM_FEATURES {
                mean[i] += r[i] / n;
            }
        }
        for r in rows {
            for i in 0..NUM_FEATURES {
                std[i] += (r[i] - mean[i]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt();
            if *s < 1e-9 {
                *s = 1.0;
            }
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, row: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        let mut out = [0.0; NUM_FEATURES];
        for i in 0..NUM_FEATURES {
            out[i] = (row[i] - self.mean[i]) / self.std[i];
        }
        out
    }
}
