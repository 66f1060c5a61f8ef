//! Seeded synthetic corpora.
//!
//! Benign flows follow a request/response shape: an initial round-trip gap,
//! then packet trains with microsecond spacing separated by millisecond
//! gaps and occasional idle periods. Packets opening a train are mostly
//! small requests; packets inside a train are mostly full-size responses.
//! Lengths are log-normal, so short flows dominate while a thin tail
//! exceeds the model length.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Flow, Label};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenignProfile {
    /// Median of the log-normal length component (packets beyond the first two).
    pub length_median: f64,
    pub length_sigma: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Mean number of packets per train.
    pub train_mean: f64,
    /// log10 range of the first (round-trip) delay.
    pub rtt_log10: (f64, f64),
    /// log10 range of delays inside a train.
    pub intra_log10: (f64, f64),
    /// log10 range of gaps between trains.
    pub gap_log10: (f64, f64),
    /// log10 range of idle periods and the chance that a gap is one.
    pub idle_log10: (f64, f64),
    pub idle_prob: f64,
    /// Chance that a packet after a gap is small (40..=100 bytes).
    pub request_small_prob: f64,
    /// Share of small packets that are bare acknowledgements.
    pub ack_prob: f64,
    pub ack_size: u32,
    /// Chance that a packet inside a train is a full-size segment.
    pub train_large_prob: f64,
    pub segment_size: u32,
}

impl Default for BenignProfile {
    fn default() -> Self {
        BenignProfile {
            length_median: 10.0,
            length_sigma: 0.75,
            min_len: 2,
            max_len: 400,
            train_mean: 4.0,
            rtt_log10: (-3.5, -2.0),
            intra_log10: (-6.0, -4.3),
            gap_log10: (-4.0, -1.5),
            idle_log10: (-1.5, 0.5),
            idle_prob: 0.04,
            request_small_prob: 0.7,
            ack_prob: 0.5,
            ack_size: 66,
            train_large_prob: 0.75,
            segment_size: 1500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaliciousKind {
    /// Dense run of equal-size packets at microsecond spacing.
    BurstFlood,
    /// Sparse, near-periodic equal-size packets.
    Beacon,
}

impl MaliciousKind {
    pub fn name(self) -> &'static str {
        match self {
            MaliciousKind::BurstFlood => "burst_flood",
            MaliciousKind::Beacon => "beacon",
        }
    }
}

impl std::str::FromStr for MaliciousKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "burst_flood" => Ok(MaliciousKind::BurstFlood),
            "beacon" => Ok(MaliciousKind::Beacon),
            other => Err(crate::Error::invalid(format!("unknown attack kind `{other}`"))),
        }
    }
}

fn log_uniform<R: Rng>(rng: &mut R, range: (f64, f64)) -> f64 {
    10f64.powf(rng.random_range(range.0..range.1))
}

fn benign_size<R: Rng>(rng: &mut R, p: &BenignProfile, opens_train: bool) -> u32 {
    let u: f64 = rng.random();
    if opens_train {
        if u < p.request_small_prob * p.ack_prob {
            p.ack_size
        } else if u < p.request_small_prob {
            rng.random_range(40..=100)
        } else {
            rng.random_range(101..1400)
        }
    } else if u < p.train_large_prob {
        p.segment_size
    } else {
        rng.random_range(101..p.segment_size)
    }
}

pub fn synth_benign(count: usize, seed: u64, profile: &BenignProfile) -> Vec<Flow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe_9e_11);
    let len_noise = Normal::new(0.0, profile.length_sigma).expect("valid sigma");
    let train_stop = 1.0 / profile.train_mean.max(1.0);
    (0..count)
        .map(|i| {
            let extra = profile.length_median * len_noise.sample(&mut rng).exp();
            let len = (profile.min_len + extra.floor() as usize).min(profile.max_len);
            let mut sizes = Vec::with_capacity(len);
            let mut ipds = Vec::with_capacity(len);
            sizes.push(rng.random_range(54..=74));
            ipds.push(0.0);
            for k in 1..len {
                let opens = k == 1 || rng.random::<f64>() < train_stop;
                let h = if k == 1 {
                    log_uniform(&mut rng, profile.rtt_log10)
                } else if opens {
                    if rng.random::<f64>() < profile.idle_prob {
                        log_uniform(&mut rng, profile.idle_log10)
                    } else {
                        log_uniform(&mut rng, profile.gap_log10)
                    }
                } else {
                    log_uniform(&mut rng, profile.intra_log10)
                };
                ipds.push(h);
                sizes.push(benign_size(&mut rng, profile, opens));
            }
            Flow::from_sizes_and_ipds(format!("benign-{seed}-{i}"), Label::Benign, &sizes, &ipds)
                .expect("generator emits valid flows")
        })
        .collect()
}

pub fn synth_malicious(count: usize, seed: u64, kind: MaliciousKind) -> Vec<Flow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a_77_ac);
    (0..count)
        .map(|i| {
            let (sizes, ipds) = match kind {
                MaliciousKind::BurstFlood => {
                    let len = rng.random_range(12..=40);
                    let size = [60u32, 64, 74, 78][rng.random_range(0..4)];
                    let ipds: Vec<f64> = (0..len)
                        .map(|k| if k == 0 { 0.0 } else { log_uniform(&mut rng, (-6.0, -5.0)) })
                        .collect();
                    (vec![size; len], ipds)
                }
                MaliciousKind::Beacon => {
                    let len = rng.random_range(8..=40);
                    let size = rng.random_range(80..=300);
                    let period = log_uniform(&mut rng, (-2.0, -1.3));
                    let jitter = Normal::new(0.0, 0.03 * period).expect("valid jitter");
                    let ipds: Vec<f64> = (0..len)
                        .map(|k| {
                            if k == 0 {
                                0.0
                            } else {
                                (period + jitter.sample(&mut rng)).max(0.5 * period)
                            }
                        })
                        .collect();
                    (vec![size; len], ipds)
                }
            };
            Flow::from_sizes_and_ipds(
                format!("{}-{seed}-{i}", kind.name()),
                Label::Malicious,
                &sizes,
                &ipds,
            )
            .expect("generator emits valid flows")
        })
        .collect()
}
