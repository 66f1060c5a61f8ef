//! Flow ↔ token conversion.
//!
//! Packet sizes map directly to their byte value (`1..=mtu`); inter-packet
//! delays are hashed into log10-spaced bins whose edges are empirical
//! quantiles of the benign corpus, so every bin carries roughly equal mass.
//! Each feature has its own id space with `PAD`, `MASK` and `UNK` appended
//! after the value ids.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::traffic::{Flow, PacketEvent};

pub const VOCAB_VERSION: u32 = 1;
/// Smallest gap enforced between neighbouring bin edges (log10 units).
const MIN_EDGE_GAP: f64 = 1e-6;

pub type TokenId = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub mtu: u32,
    pub size_capacity: usize,
    pub ipd_value_bins: usize,
    pub log10_min: f64,
    pub log10_max: f64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            mtu: 1500,
            size_capacity: 1606,
            ipd_value_bins: 53,
            log10_min: -7.0,
            log10_max: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub size_pad: TokenId,
    pub size_mask: TokenId,
    pub size_unk: TokenId,
    pub ipd_pad: TokenId,
    pub ipd_mask: TokenId,
    pub ipd_unk: TokenId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub version: u32,
    pub mtu: u32,
    pub size_capacity: usize,
    pub ipd_bin_edges: Vec<f64>,
    pub special_ids: SpecialIds,
}

impl Vocabulary {
    pub fn from_edges(mtu: u32, size_capacity: usize, ipd_bin_edges: Vec<f64>) -> Result<Self> {
        if mtu == 0 {
            return Err(Error::invalid("mtu must be positive"));
        }
        if size_capacity < mtu as usize + 4 {
            return Err(Error::invalid(format!(
                "size capacity {size_capacity} cannot hold ids 0..={mtu} plus three specials"
            )));
        }
        if ipd_bin_edges.len() < 2 {
            return Err(Error::invalid("need at least one IPD bin"));
        }
        if ipd_bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("IPD bin edges must be strictly increasing"));
        }
        let bins = (ipd_bin_edges.len() - 1) as TokenId;
        Ok(Vocabulary {
            version: VOCAB_VERSION,
            mtu,
            size_capacity,
            special_ids: SpecialIds {
                size_pad: mtu + 1,
                size_mask: mtu + 2,
                size_unk: mtu + 3,
                ipd_pad: bins,
                ipd_mask: bins + 1,
                ipd_unk: bins + 2,
            },
            ipd_bin_edges,
        })
    }

    /// Number of IPD value bins.
    pub fn ipd_bins(&self) -> usize {
        self.ipd_bin_edges.len() - 1
    }

    /// IPD vocabulary size including specials.
    pub fn t_size(&self) -> usize {
        self.ipd_bins() + 3
    }

    /// Size vocabulary size including specials and reserved ids.
    pub fn s_size(&self) -> usize {
        self.size_capacity
    }

    pub fn size_token(&self, bytes: u32) -> TokenId {
        if bytes >= 1 && bytes <= self.mtu {
            bytes
        } else {
            self.special_ids.size_unk
        }
    }

    pub fn ipd_token(&self, seconds: f64) -> TokenId {
        if !(seconds > 0.0) {
            return 0;
        }
        let x = seconds.log10();
        let interior = &self.ipd_bin_edges[1..self.ipd_bin_edges.len() - 1];
        interior.partition_point(|&e| e <= x) as TokenId
    }

    /// Geometric mean of the bin's edges, in seconds.
    pub fn ipd_representative(&self, bin: TokenId) -> Option<f64> {
        let b = bin as usize;
        if b >= self.ipd_bins() {
            return None;
        }
        let (lo, hi) = (self.ipd_bin_edges[b], self.ipd_bin_edges[b + 1]);
        Some(10f64.powf(0.5 * (lo + hi)))
    }

    pub fn size_bytes(&self, token: TokenId) -> Option<u32> {
        if token >= 1 && token <= self.mtu {
            Some(token)
        } else if token == self.special_ids.size_unk {
            Some(self.mtu)
        } else {
            None
        }
    }

    pub fn is_size_value(&self, token: TokenId) -> bool {
        token >= 1 && token <= self.mtu
    }

    pub fn is_ipd_value(&self, token: TokenId) -> bool {
        (token as usize) < self.ipd_bins()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("vocabulary serialises");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Vocabulary = serde_json::from_slice(&fs::read(path)?)?;
        let check = Vocabulary::from_edges(v.mtu, v.size_capacity, v.ipd_bin_edges.clone())?;
        if check.special_ids != v.special_ids {
            return Err(Error::invalid("vocabulary special ids are inconsistent"));
        }
        Ok(v)
    }
}

/// Quantile-balanced vocabulary over the positive IPDs of `benign`.
pub fn build_vocab(benign: &[Flow], config: &VocabConfig) -> Result<Vocabulary> {
    if benign.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    if config.ipd_value_bins == 0 || !(config.log10_max > config.log10_min) {
        return Err(Error::invalid("need at least one bin and a non-empty log10 range"));
    }
    let mut logs: Vec<f64> = benign
        .iter()
        .flat_map(|f| f.ipds())
        .filter(|&h| h > 0.0)
        .map(f64::log10)
        .collect();
    if logs.is_empty() {
        return Err(Error::invalid("corpus has no positive inter-packet delays"));
    }
    logs.sort_by(f64::total_cmp);

    let bins = config.ipd_value_bins;
    let (lo, hi) = (config.log10_min, config.log10_max);
    let mut edges = Vec::with_capacity(bins + 1);
    edges.push(lo);
    for k in 1..bins {
        let idx = ((k * logs.len()) / bins).min(logs.len() - 1);
        let q = logs[idx].clamp(lo, hi);
        let prev = *edges.last().expect("non-empty");
        let remaining = (bins - k) as f64 * MIN_EDGE_GAP;
        edges.push(q.max(prev + MIN_EDGE_GAP).min(hi - remaining));
    }
    edges.push(hi);
    Vocabulary::from_edges(config.mtu, config.size_capacity, edges)
}

/// Power of two closest to the 99th-percentile flow length (ties upward).
pub fn choose_n(corpus: &[Flow]) -> usize {
    let mut lens: Vec<usize> = corpus.iter().map(Flow::len).collect();
    if lens.is_empty() {
        return 1;
    }
    lens.sort_unstable();
    let rank = ((0.99 * lens.len() as f64).ceil() as usize).clamp(1, lens.len());
    nearest_power_of_two(lens[rank - 1])
}

pub fn nearest_power_of_two(x: usize) -> usize {
    if x <= 1 {
        return 1;
    }
    let lower = 1usize << (usize::BITS - 1 - x.leading_zeros());
    if lower == x {
        return x;
    }
    let upper = lower << 1;
    if x - lower < upper - x {
        lower
    } else {
        upper
    }
}

/// Aligned size/IPD token sequences of fixed length.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenPair {
    pub size_tokens: Vec<TokenId>,
    pub ipd_tokens: Vec<TokenId>,
    pub positions: Vec<u32>,
    pub valid_len: usize,
}

impl TokenPair {
    pub fn len(&self) -> usize {
        self.size_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.size_tokens.is_empty()
    }

    /// `true` for non-PAD slots.
    pub fn key_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| i < self.valid_len).collect()
    }

    pub fn check_alignment(&self, vocab: &Vocabulary) -> Result<()> {
        let sp = &vocab.special_ids;
        if self.ipd_tokens.len() != self.size_tokens.len()
            || self.positions.len() != self.size_tokens.len()
        {
            return Err(Error::shape("token sequences differ in length"));
        }
        for i in 0..self.len() {
            let sp_pad = self.size_tokens[i] == sp.size_pad;
            let ip_pad = self.ipd_tokens[i] == sp.ipd_pad;
            if sp_pad != ip_pad {
                return Err(Error::invalid(format!("PAD placement differs at slot {i}")));
            }
            if sp_pad != (i >= self.valid_len) {
                return Err(Error::invalid(format!(
                    "slot {i} PAD flag disagrees with valid_len {}",
                    self.valid_len
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkSet {
    pub flow_id: String,
    pub chunks: Vec<TokenPair>,
}

impl ChunkSet {
    pub fn offsets(&self) -> Vec<usize> {
        self.chunks.iter().map(|c| c.positions[0] as usize).collect()
    }
}

/// Tokenises one window of packets starting at `offset`.
pub fn tokenize_slice(
    sizes: &[u32],
    ipds: &[f64],
    offset: usize,
    vocab: &Vocabulary,
    n: usize,
) -> TokenPair {
    let m = sizes.len().min(n);
    let sp = &vocab.special_ids;
    let mut size_tokens = vec![sp.size_pad; n];
    let mut ipd_tokens = vec![sp.ipd_pad; n];
    for i in 0..m {
        size_tokens[i] = vocab.size_token(sizes[i]);
        ipd_tokens[i] = vocab.ipd_token(ipds[i]);
    }
    TokenPair {
        size_tokens,
        ipd_tokens,
        positions: (offset as u32..(offset + n) as u32).collect(),
        valid_len: m,
    }
}

pub fn tokenize(flow: &Flow, vocab: &Vocabulary, n: usize) -> ChunkSet {
    let sizes = flow.sizes();
    let ipds = flow.ipds();
    let m = sizes.len();
    let chunks = if m <= n {
        vec![tokenize_slice(&sizes, &ipds, 0, vocab, n)]
    } else {
        (0..=m - n)
            .map(|i| tokenize_slice(&sizes[i..i + n], &ipds[i..i + n], i, vocab, n))
            .collect()
    };
    ChunkSet {
        flow_id: flow.id.clone(),
        chunks,
    }
}

/// Maps tokens back to packets. Arrival times are cumulative sums of the
/// representative delays starting from `base_time`.
pub fn detokenize(pair: &TokenPair, vocab: &Vocabulary, base_time: f64) -> Result<Vec<PacketEvent>> {
    pair.check_alignment(vocab)?;
    let sp = &vocab.special_ids;
    let mut t = base_time;
    let mut out = Vec::with_capacity(pair.valid_len);
    for i in 0..pair.valid_len {
        let (s, h) = (pair.size_tokens[i], pair.ipd_tokens[i]);
        if s == sp.size_mask || h == sp.ipd_mask {
            return Err(Error::invalid(format!("MASK token remains at slot {i}")));
        }
        let bytes = vocab
            .size_bytes(s)
            .ok_or_else(|| Error::invalid(format!("size token {s} has no byte value")))?;
        let delay = if h == sp.ipd_unk {
            0.0
        } else {
            vocab
                .ipd_representative(h)
                .ok_or_else(|| Error::invalid(format!("IPD token {h} has no delay value")))?
        };
        t += delay;
        out.push(PacketEvent::new(t, bytes));
    }
    Ok(out)
}
