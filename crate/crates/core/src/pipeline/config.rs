use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::detectors::{CentroidConfig, DetectorKind, MlpConfig};
use crate::encoder::{EncoderConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::mdp::EnvConfig;
use crate::sac::{SacConfig, SelectMode};
use crate::tokenizer::{VocabConfig, Vocabulary};
use crate::traffic::{BenignProfile, MaliciousKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub benign: usize,
    pub burst_flood: usize,
    pub beacon: usize,
    pub benign_profile: BenignProfile,
    /// Benign share used for the vocabulary, the encoder and detector fitting.
    pub benign_train_fraction: f64,
    /// Per-kind malicious shares; the remainder is the attack test set.
    pub detector_train_fraction: f64,
    pub detector_eval_fraction: f64,
    pub attack_train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            benign: 5000,
            burst_flood: 1000,
            beacon: 1000,
            benign_profile: BenignProfile::default(),
            benign_train_fraction: 0.7,
            detector_train_fraction: 0.4,
            detector_eval_fraction: 0.1,
            attack_train_fraction: 0.3,
        }
    }
}

impl DataConfig {
    pub fn count(&self, kind: MaliciousKind) -> usize {
        match kind {
            MaliciousKind::BurstFlood => self.burst_flood,
            MaliciousKind::Beacon => self.beacon,
        }
    }
}

/// Encoder shape; the vocabulary sizes come from the built vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderShape {
    pub n: usize,
    pub d_k: usize,
    pub n_layers: usize,
    pub attn_heads: usize,
    pub d_ff: usize,
}

impl EncoderShape {
    pub fn desk() -> Self {
        EncoderShape {
            n: 64,
            d_k: 32,
            n_layers: 2,
            attn_heads: 2,
            d_ff: 64,
        }
    }

    pub fn paper() -> Self {
        EncoderShape {
            n: 512,
            d_k: 128,
            n_layers: 6,
            attn_heads: 8,
            d_ff: 512,
        }
    }

    pub fn build(&self, vocab: &Vocabulary) -> EncoderConfig {
        EncoderConfig {
            n: self.n,
            d_k: self.d_k,
            n_layers: self.n_layers,
            attn_heads: self.attn_heads,
            d_ff: self.d_ff,
            t_size: vocab.t_size(),
            s_size: vocab.s_size(),
        }
    }
}

impl Default for EncoderShape {
    fn default() -> Self {
        EncoderShape::desk()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub threshold_quantile: f64,
    pub mlp: MlpConfig,
    pub centroid: CentroidConfig,
    /// Detectors whose held-out F1 falls below this abort the run.
    pub min_f1: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection {
            threshold_quantile: 0.99,
            mlp: MlpConfig::default(),
            centroid: CentroidConfig::default(),
            min_f1: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopKind {
    /// Stop once `max_j Q_j` reaches ξ′.
    QValue,
    /// Stop once `max_j Q_j` reaches ξ′ + β − γ r_M.
    Adjusted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    /// Fixed ξ′; when absent it is calibrated from the training log.
    pub xi_prime: Option<f64>,
    pub stop: StopKind,
    pub mode: SelectMode,
}

impl Default for InferSection {
    fn default() -> Self {
        InferSection {
            xi_prime: None,
            stop: StopKind::QValue,
            mode: SelectMode::Sample,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// Probability of flipping each training verdict.
    pub noise: f64,
    /// Maximum number of training probes per scenario.
    pub budget: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub attack: MaliciousKind,
    pub detector: DetectorKind,
}

impl Scenario {
    pub fn name(&self) -> String {
        format!("{}_{}", self.attack.name(), self.detector.name())
    }
}

/// Extra training runs emitted as plot data. Each entry retrains the first
/// scenario with one oracle setting changed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub budgets: Vec<u64>,
    pub noise: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub profile: Profile,
    pub data: DataConfig,
    pub vocab: VocabConfig,
    pub encoder: EncoderShape,
    pub pretrain: PretrainConfig,
    pub detectors: DetectorSection,
    pub agent: SacConfig,
    pub env: EnvConfig,
    pub episodes: usize,
    pub infer: InferSection,
    pub oracle: OracleSection,
    pub scenarios: Vec<Scenario>,
    pub sweeps: SweepSection,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::for_profile(Profile::Desk)
    }
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (encoder, agent, out) = match profile {
            Profile::Desk => (
                EncoderShape::desk(),
                SacConfig {
                    eta: 0.5,
                    ..SacConfig::default()
                },
                "runs/desk",
            ),
            Profile::Paper => (
                EncoderShape::paper(),
                SacConfig {
                    embed: 16,
                    hidden: 64,
                    ..SacConfig::default()
                },
                "runs/paper",
            ),
        };
        ExperimentConfig {
            seed: 0,
            profile,
            data: DataConfig::default(),
            vocab: VocabConfig::default(),
            encoder,
            pretrain: PretrainConfig::default(),
            detectors: DetectorSection::default(),
            agent,
            env: EnvConfig::default(),
            episodes: 500,
            infer: InferSection::default(),
            oracle: OracleSection::default(),
            scenarios: vec![
                Scenario {
                    attack: MaliciousKind::BurstFlood,
                    detector: DetectorKind::Threshold,
                },
                Scenario {
                    attack: MaliciousKind::BurstFlood,
                    detector: DetectorKind::Mlp,
                },
                Scenario {
                    attack: MaliciousKind::Beacon,
                    detector: DetectorKind::Mlp,
                },
            ],
            sweeps: SweepSection::default(),
            out: PathBuf::from(out),
        }
    }

    /// Profile defaults overlaid with `doc`. `profile` and `seed` override
    /// the document when given.
    pub fn resolve(doc: Option<&Value>, profile: Option<Profile>, seed: Option<u64>) -> Result<Self> {
        let doc_profile = match doc.and_then(|d| d.get("profile")) {
            None => None,
            Some(v) => Some(
                serde_json::from_value::<Profile>(v.clone())
                    .map_err(|e| Error::Config(format!("profile: {e}")))?,
            ),
        };
        let profile = profile.or(doc_profile).unwrap_or_default();
        let mut merged = serde_json::to_value(ExperimentConfig::for_profile(profile))?;
        if let Some(d) = doc {
            if !d.is_object() {
                return Err(Error::Config("configuration must be a JSON object".into()));
            }
            merge(&mut merged, d);
        }
        merged["profile"] = serde_json::to_value(profile)?;
        if let Some(s) = seed {
            merged["seed"] = Value::from(s);
        }
        let cfg: ExperimentConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str, profile: Option<Profile>, seed: Option<u64>) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        ExperimentConfig::resolve(Some(&doc), profile, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.env.validate()?;
        self.agent.validate()?;
        let d = &self.data;
        if d.benign < 2 {
            return bad("data.benign must be at least 2".into());
        }
        for (name, x) in [
            ("benign_train_fraction", d.benign_train_fraction),
            ("detector_train_fraction", d.detector_train_fraction),
            ("detector_eval_fraction", d.detector_eval_fraction),
            ("attack_train_fraction", d.attack_train_fraction),
        ] {
            if !(x > 0.0 && x < 1.0) {
                return bad(format!("data.{name} = {x} outside (0, 1)"));
            }
        }
        if d.detector_train_fraction + d.detector_eval_fraction + d.attack_train_fraction >= 1.0 {
            return bad("malicious split fractions leave no attack test flows".into());
        }
        let e = &self.encoder;
        if !e.n.is_power_of_two() || e.n < 2 {
            return bad(format!("encoder.n = {} is not a power of two", e.n));
        }
        if e.d_k == 0 || e.attn_heads == 0 || e.d_k % e.attn_heads != 0 || e.n_layers == 0 || e.d_ff == 0 {
            return bad("encoder shape must be positive with d_k divisible by attn_heads".into());
        }
        if self.episodes == 0 {
            return bad("episodes must be positive".into());
        }
        if let Some(x) = self.infer.xi_prime {
            if x.is_nan() {
                return bad("infer.xi_prime is NaN".into());
            }
        }
        if !(0.0..=0.5).contains(&self.oracle.noise) {
            return bad(format!("oracle.noise {} outside [0, 0.5]", self.oracle.noise));
        }
        if self.oracle.budget == Some(0) || self.sweeps.budgets.contains(&0) {
            return bad("probe budgets must be positive".into());
        }
        if self.sweeps.noise.iter().any(|p| !(0.0..=0.5).contains(p)) {
            return bad("sweep noise levels must lie in [0, 0.5]".into());
        }
        if self.scenarios.is_empty() {
            return bad("at least one scenario is required".into());
        }
        for s in &self.scenarios {
            if self.data.count(s.attack) == 0 {
                return bad(format!("scenario {} has no {} flows", s.name(), s.attack.name()));
            }
        }
        if !(0.0..=1.0).contains(&self.detectors.min_f1) {
            return bad("detectors.min_f1 outside [0, 1]".into());
        }
        Ok(())
    }

    /// Digest of every setting except the output directory.
    pub fn hash(&self) -> String {
        let mut doc = serde_json::to_value(self).expect("config serialises");
        if let Value::Object(map) = &mut doc {
            map.remove("out");
        }
        hex::encode(Sha256::digest(doc.to_string()))
    }

    /// Seed for a named component, stable across runs.
    pub fn derive_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Recursive object merge; non-object values in `over` replace `base`.
fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn hash_ignores_output_directory() {
        let a = ExperimentConfig::resolve(None, None, Some(3)).unwrap();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 4;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn defaults_validate_for_both_profiles() {
        ExperimentConfig::for_profile(Profile::Desk).validate().unwrap();
        ExperimentConfig::for_profile(Profile::Paper).validate().unwrap();
    }

    #[test]
    fn partial_document_keeps_sibling_defaults() {
        let cfg = ExperimentConfig::resolve(Some(&json!({"env": {"gamma": 0.0}, "seed": 9})), None, None).unwrap();
        assert_eq!(cfg.env.gamma, 0.0);
        assert_eq!(cfg.env.tau, EnvConfig::default().tau);
        assert_eq!(cfg.seed, 9);
        let cfg = ExperimentConfig::resolve(Some(&json!({"seed": 9})), Some(Profile::Paper), Some(4)).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.encoder.n, 512);
    }

    #[test]
    fn rejects_unknown_keys_and_zero_tau() {
        for doc in [json!({"colour": 1}), json!({"env": {"tau": 0}}), json!({"env": {"tua": 3}})] {
            let err = ExperimentConfig::resolve(Some(&doc), None, None).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{err}");
        }
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }
}
