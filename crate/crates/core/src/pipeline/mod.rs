//! Run-directory orchestration: every stage reads its inputs from and writes
//! its artifacts to one directory, so stages can run together or one at a
//! time from the command line.

pub mod config;
pub mod report;

pub use config::{
    derive_seed, DataConfig, DetectorSection, EncoderShape, ExperimentConfig, InferSection, OracleSection, Profile,
    Scenario, StopKind, SweepSection,
};
pub use report::{
    summarize, verdicts, DetectorEval, FlowVerdict, InferRecord, RunReport, ScenarioReport, StageTiming, StepStats,
    Throughput, Timings, TrainSummary,
};

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detectors::{
    train_centroid, train_mlp, train_threshold, CentroidConfig, Detector, DetectorKind, DetectorOracle, MlpConfig,
    Offline, Oracle,
};
use crate::encoder::{pretrain as pretrain_encoder, EncoderModel, PretrainConfig};
use crate::error::{Error, Result};
use crate::mdp::{action_mask, ActionId, Environment, Filler};
use crate::sac::{calibrate_xi_prime, infer, train, InferOptions, SacAgent, SacConfig, StopRule, TrainOptions};
use crate::tokenizer::{build_vocab as build_vocabulary, tokenize, ChunkSet, Vocabulary};
use crate::traffic::{load_flows, save_flows, synth_benign, synth_malicious, Flow, MaliciousKind};

pub const MALICIOUS_PARTS: [&str; 4] = ["detector_train", "detector_eval", "attack_train", "attack_test"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    BuildVocab,
    Pretrain,
    TrainDetector,
    AttackTrain,
    AttackInfer,
    Eval,
    Ablate,
    Sweep,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::BuildVocab => "build-vocab",
            Stage::Pretrain => "pretrain",
            Stage::TrainDetector => "train-detector",
            Stage::AttackTrain => "attack-train",
            Stage::AttackInfer => "attack-infer",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
            Stage::Sweep => "sweep",
        }
    }
}

/// Ablation arms compared against the full pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationMode {
    /// Random edit positions, encoder fills.
    S1,
    /// Learned positions, uniform fills between the flow's extremes.
    #[serde(rename = "S2_S")]
    S2S,
    /// Learned positions, per-flow mean fills.
    #[serde(rename = "S2_F")]
    S2F,
    #[serde(rename = "full")]
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [AblationMode::S1, AblationMode::S2S, AblationMode::S2F, AblationMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::S1 => "S1",
            AblationMode::S2S => "S2_S",
            AblationMode::S2F => "S2_F",
            AblationMode::Full => "full",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub mode: AblationMode,
    pub report: ScenarioReport,
}

/// One scenario retrained under a swept budget or noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: Option<u64>,
    pub noise: f64,
    pub report: ScenarioReport,
}

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.csv"))
    }

    pub fn vocab(&self) -> PathBuf {
        self.path("vocab.json")
    }

    pub fn encoder(&self) -> PathBuf {
        self.path("encoder")
    }

    pub fn detector(&self, kind: DetectorKind) -> PathBuf {
        self.root.join("detectors").join(kind.name())
    }

    pub fn scenario(&self, name: &str) -> PathBuf {
        self.root.join("scenarios").join(name)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn read_flows(path: &Path) -> Result<Vec<Flow>> {
    load_flows(path).map_err(|e| match e {
        Error::Io(io) => Error::invalid(format!("{}: {io}", path.display())),
        other => other,
    })
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn staged<T>(stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        already @ Error::Stage { .. } => already,
        other => Error::Stage {
            stage: stage.name(),
            source: Box::new(other),
        },
    })
}

/// Shared state of a run: resolved configuration plus its directory.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: RunDir,
}

impl Run {
    /// Creates the run directory and writes the resolved configuration and
    /// every derived seed.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = RunDir::new(cfg.out.clone());
        fs::create_dir_all(&dir.root)?;
        write_json(&dir.path("config.json"), &cfg)?;
        write_json(&dir.path("seeds.json"), &seeds(&cfg))?;
        Ok(Run { cfg, dir })
    }

    fn seed(&self, label: &str) -> u64 {
        self.cfg.derive_seed(label)
    }

    fn record_hashes(&self, entries: &[(String, String)]) -> Result<()> {
        let path = self.dir.path("hashes.json");
        let mut map: BTreeMap<String, String> = if path.exists() { read_json(&path)? } else { BTreeMap::new() };
        for (k, v) in entries {
            map.insert(k.clone(), v.clone());
        }
        write_json(&path, &map)
    }

    fn record_timing(&self, stage: &str, seconds: f64, throughput: Option<Throughput>) -> Result<()> {
        let path = self.dir.path("timings.json");
        let mut t: Timings = if path.exists() { read_json(&path)? } else { Timings::default() };
        t.stages.retain(|s| s.stage != stage);
        t.stages.push(StageTiming {
            stage: stage.to_string(),
            seconds,
        });
        if let Some(tp) = throughput {
            t.inference.retain(|x| x.scenario != tp.scenario);
            t.inference.push(tp);
        }
        write_json(&path, &t)
    }

    fn timed<T>(&self, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = staged(stage, f)?;
        staged(stage, || self.record_timing(stage.name(), t0.elapsed().as_secs_f64(), None))?;
        Ok(out)
    }

    fn load_vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.dir.vocab())
    }

    fn load_encoder(&self, vocab: &Vocabulary) -> Result<EncoderModel> {
        EncoderModel::load(&self.dir.encoder(), vocab)
    }

    fn load_detector(&self, kind: DetectorKind) -> Result<Arc<Detector>> {
        Ok(Arc::new(Detector::load(&self.dir.detector(kind))?))
    }

    fn malicious(&self, kind: MaliciousKind, part: &str) -> Result<Vec<Flow>> {
        read_flows(&self.dir.data(&format!("{}_{part}", kind.name())))
    }

    fn detector_kinds(&self) -> Vec<DetectorKind> {
        let mut kinds: Vec<DetectorKind> = Vec::new();
        for s in &self.cfg.scenarios {
            if !kinds.contains(&s.detector) {
                kinds.push(s.detector);
            }
        }
        kinds
    }

    fn attack_kinds(&self) -> Vec<MaliciousKind> {
        [MaliciousKind::BurstFlood, MaliciousKind::Beacon]
            .into_iter()
            .filter(|&k| self.cfg.data.count(k) > 0)
            .collect()
    }

    // ---- stages -------------------------------------------------------

    /// Synthesises and splits the benign and malicious corpora.
    pub fn gen_data(&self) -> Result<()> {
        self.timed(Stage::GenData, || {
            let d = &self.cfg.data;
            let mut benign = synth_benign(d.benign, self.seed("data/benign"), &d.benign_profile);
            benign.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed("split/benign")));
            let cut = ((d.benign as f64 * d.benign_train_fraction).round() as usize).clamp(1, d.benign - 1);
            let mut files = vec![("benign_train".to_string(), benign[..cut].to_vec())];
            files.push(("benign_eval".to_string(), benign[cut..].to_vec()));
            for kind in self.attack_kinds() {
                let mut flows = synth_malicious(d.count(kind), self.seed(&format!("data/{}", kind.name())), kind);
                flows.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed(&format!("split/{}", kind.name()))));
                let m = flows.len();
                let a = (m as f64 * d.detector_train_fraction).round() as usize;
                let b = a + (m as f64 * d.detector_eval_fraction).round() as usize;
                let c = b + (m as f64 * d.attack_train_fraction).round() as usize;
                let bounds = [0, a.min(m), b.min(m), c.min(m), m];
                for (i, part) in MALICIOUS_PARTS.iter().enumerate() {
                    let slice = &flows[bounds[i]..bounds[i + 1]];
                    if slice.is_empty() {
                        return Err(Error::Config(format!("{} split `{part}` is empty", kind.name())));
                    }
                    files.push((format!("{}_{part}", kind.name()), slice.to_vec()));
                }
            }
            let mut hashes = Vec::new();
            for (name, flows) in &files {
                let path = self.dir.data(name);
                fs::create_dir_all(path.parent().expect("data dir"))?;
                save_flows(&path, flows)?;
                hashes.push((format!("data/{name}.csv"), file_sha(&path)?));
            }
            self.record_hashes(&hashes)
        })
    }

    pub fn build_vocab(&self) -> Result<Vocabulary> {
        self.timed(Stage::BuildVocab, || {
            let benign = read_flows(&self.dir.data("benign_train"))?;
            let vocab = build_vocabulary(&benign, &self.cfg.vocab)?;
            vocab.save(&self.dir.vocab())?;
            self.record_hashes(&[("vocab".into(), vocab.hash())])?;
            Ok(vocab)
        })
    }

    /// Masked pre-training of the encoder on the benign training corpus.
    pub fn pretrain(&self) -> Result<EncoderModel> {
        self.timed(Stage::Pretrain, || {
            let vocab = self.load_vocab()?;
            let benign = read_flows(&self.dir.data("benign_train"))?;
            let ecfg = self.cfg.encoder.build(&vocab);
            let corpus: Vec<ChunkSet> = benign.iter().map(|f| tokenize(f, &vocab, ecfg.n)).collect();
            let mut model = EncoderModel::new(ecfg, self.seed("encoder/init"))?;
            let pcfg = PretrainConfig {
                seed: self.seed("encoder/pretrain") ^ self.cfg.pretrain.seed,
                ..self.cfg.pretrain.clone()
            };
            let rep = pretrain_encoder(&mut model, &corpus, &vocab, &pcfg)?;
            model.save(&self.dir.encoder(), &vocab)?;
            let mut w = csv::Writer::from_path(self.dir.path("pretrain_loss.csv"))?;
            w.write_record(["step", "loss"])?;
            for (i, l) in rep.losses.iter().enumerate() {
                w.write_record([i.to_string(), l.to_string()])?;
            }
            w.flush()?;
            self.record_hashes(&[("encoder".into(), model.fingerprint())])?;
            Ok(model)
        })
    }

    /// Fits every detector named by a scenario and scores it on held-out
    /// flows of each attack family.
    pub fn train_detectors(&self) -> Result<Vec<DetectorEval>> {
        self.timed(Stage::TrainDetector, || {
            let benign = read_flows(&self.dir.data("benign_train"))?;
            let benign_eval = read_flows(&self.dir.data("benign_eval"))?;
            // Held-out benign flows in the same proportion as the attack
            // splits, so F1 is measured at the corpus class ratio.
            let d = &self.cfg.data;
            let held = ((d.benign as f64 * d.detector_eval_fraction).round() as usize).clamp(1, benign_eval.len());
            let benign_eval = &benign_eval[..held];
            let mut mal_train = Vec::new();
            for kind in self.attack_kinds() {
                mal_train.extend(self.malicious(kind, "detector_train")?);
            }
            let sec = &self.cfg.detectors;
            let mut evals = Vec::new();
            let mut hashes = Vec::new();
            for kind in self.detector_kinds() {
                let det = match kind {
                    DetectorKind::Threshold => Detector::Threshold(train_threshold(&benign, sec.threshold_quantile)?),
                    DetectorKind::Mlp => Detector::Mlp(train_mlp(
                        &benign,
                        &mal_train,
                        &MlpConfig {
                            seed: self.seed("detector/mlp") ^ sec.mlp.seed,
                            ..sec.mlp.clone()
                        },
                    )?),
                    DetectorKind::Centroid => Detector::Centroid(train_centroid(
                        &benign,
                        &CentroidConfig {
                            seed: self.seed("detector/centroid") ^ sec.centroid.seed,
                            ..sec.centroid.clone()
                        },
                    )?),
                };
                let sha = det.save(&self.dir.detector(kind))?;
                hashes.push((format!("detector/{}", kind.name()), sha));
                for attack in self.attack_kinds() {
                    let report = det.evaluate(benign_eval, &self.malicious(attack, "detector_eval")?);
                    evals.push(DetectorEval {
                        detector: kind,
                        attack,
                        report,
                    });
                }
            }
            write_json(&self.dir.path("detectors.json"), &evals)?;
            self.record_hashes(&hashes)?;
            for s in &self.cfg.scenarios {
                let e = evals
                    .iter()
                    .find(|e| e.detector == s.detector && e.attack == s.attack)
                    .expect("every scenario pair is evaluated");
                if e.report.f1 < sec.min_f1 {
                    return Err(Error::invalid(format!(
                        "{} held-out F1 {:.3} on {} is below {}",
                        s.detector.name(),
                        e.report.f1,
                        s.attack.name(),
                        sec.min_f1
                    )));
                }
            }
            Ok(evals)
        })
    }

    /// Trains one agent per scenario and stores it with its training log.
    pub fn attack_train(&self) -> Result<Vec<TrainSummary>> {
        self.timed(Stage::AttackTrain, || {
            let vocab = self.load_vocab()?;
            let encoder = self.load_encoder(&vocab)?;
            let mut out = Vec::new();
            for s in &self.cfg.scenarios {
                let name = s.name();
                let variant = Variant::main(&self.cfg);
                let (agent, summary) =
                    self.train_variant(&vocab, &encoder, s, &variant, Some(&self.dir.scenario(&name)))?;
                agent.save(&self.dir.scenario(&name).join("agent"), &vocab)?;
                write_json(&self.dir.scenario(&name).join("train_summary.json"), &summary)?;
                self.record_hashes(&[(format!("agent/{name}"), agent.fingerprint())])?;
                out.push(summary);
            }
            Ok(out)
        })
    }

    /// Oracle-free rollouts of every trained agent over its attack test set.
    pub fn attack_infer(&self) -> Result<()> {
        self.timed(Stage::AttackInfer, || {
            let vocab = self.load_vocab()?;
            let encoder = self.load_encoder(&vocab)?;
            for s in &self.cfg.scenarios {
                let name = s.name();
                let dir = self.dir.scenario(&name);
                let agent = SacAgent::load(&dir.join("agent"), &vocab)?;
                let flows = self.malicious(s.attack, "attack_test")?;
                let t0 = Instant::now();
                let (adv, records) = self.rollouts(&vocab, &encoder, &agent, Filler::default(), &flows, &name)?;
                let secs = t0.elapsed().as_secs_f64().max(1e-9);
                let packets: usize = adv.iter().map(Flow::len).sum();
                save_flows(&dir.join("adversarial.csv"), &adv)?;
                write_json(&dir.join("infer.json"), &records)?;
                self.record_timing(
                    &format!("attack-infer/{name}"),
                    secs,
                    Some(Throughput {
                        scenario: name.clone(),
                        flows_per_second: adv.len() as f64 / secs,
                        packets_per_second: packets as f64 / secs,
                    }),
                )?;
            }
            Ok(())
        })
    }

    /// Scores the stored adversarial flows and writes the run report, the
    /// verdict log and the training curves.
    pub fn eval(&self) -> Result<RunReport> {
        self.timed(Stage::Eval, || {
            let detectors: Vec<DetectorEval> = read_json(&self.dir.path("detectors.json"))?;
            let mut reports = Vec::new();
            let mut all_verdicts = Vec::new();
            let mut curve = csv::Writer::from_path(self.dir.path("maxq_curve.csv"))?;
            curve.write_record(["scenario", "episode", "steps", "success", "max_q", "final_q", "alpha"])?;
            for s in &self.cfg.scenarios {
                let name = s.name();
                let dir = self.dir.scenario(&name);
                let det = self.load_detector(s.detector)?;
                let originals = self.malicious(s.attack, "attack_test")?;
                let adv = read_flows(&dir.join("adversarial.csv"))?;
                let records: Vec<InferRecord> = read_json(&dir.join("infer.json"))?;
                let summary: TrainSummary = read_json(&dir.join("train_summary.json"))?;
                let v = verdicts(&name, &det, &originals, &adv, &records)?;
                reports.push(summarize(&name, &v, &originals, &adv, &summary)?);
                all_verdicts.extend(v);
                for line in fs::read_to_string(dir.join("train_log.jsonl"))?.lines() {
                    let e: crate::sac::EpisodeLog = serde_json::from_str(line)?;
                    curve.write_record([
                        name.clone(),
                        e.episode.to_string(),
                        e.steps.to_string(),
                        e.success.to_string(),
                        e.max_q.to_string(),
                        e.final_q.to_string(),
                        e.alpha.to_string(),
                    ])?;
                }
            }
            curve.flush()?;
            report::write_verdicts(File::create(self.dir.path("verdicts.csv"))?, &all_verdicts)?;
            let rep = RunReport::new(self.cfg.hash(), self.cfg.seed, detectors, reports);
            write_json(&self.dir.path("report.json"), &rep)?;
            Ok(rep)
        })
    }

    /// Compares the full pipeline with its ablated variants on every
    /// configured scenario.
    pub fn ablate(&self, modes: &[AblationMode]) -> Result<Vec<AblationEntry>> {
        self.timed(Stage::Ablate, || {
            let vocab = self.load_vocab()?;
            let encoder = self.load_encoder(&vocab)?;
            let mut entries = Vec::new();
            for s in &self.cfg.scenarios {
                let name = s.name();
                let det = self.load_detector(s.detector)?;
                let flows = self.malicious(s.attack, "attack_test")?;
                for &mode in modes {
                    let label = format!("{name}/{}", mode.name());
                    let (adv, records, summary) = match mode {
                        AblationMode::S1 => {
                            let (adv, records) = self.random_rollouts(&vocab, &encoder, &flows, &label)?;
                            (adv, records, TrainSummary::default())
                        }
                        _ => {
                            let variant = Variant::ablation(&self.cfg, mode, self.seed(&format!("fill/{label}")));
                            let saved = self.dir.scenario(&name).join("agent");
                            let (agent, summary) = if mode == AblationMode::Full && saved.exists() {
                                let summary = read_json(&self.dir.scenario(&name).join("train_summary.json"))?;
                                (SacAgent::load(&saved, &vocab)?, summary)
                            } else {
                                self.train_variant(&vocab, &encoder, s, &variant, None)?
                            };
                            let (adv, records) =
                                self.rollouts(&vocab, &encoder, &agent, variant.filler.clone(), &flows, &name)?;
                            (adv, records, summary)
                        }
                    };
                    let v = verdicts(&label, &det, &flows, &adv, &records)?;
                    entries.push(AblationEntry {
                        mode,
                        report: summarize(&label, &v, &flows, &adv, &summary)?,
                    });
                }
            }
            write_json(&self.dir.path("ablation.json"), &entries)?;
            let mut w = csv::Writer::from_path(self.dir.path("ablation.csv"))?;
            w.write_record(["scenario", "mode", "asr", "steps_mean", "train_success_rate"])?;
            for e in &entries {
                w.write_record([
                    e.report.scenario.clone(),
                    e.mode.name().to_string(),
                    e.report.asr.to_string(),
                    e.report.steps.mean.to_string(),
                    e.report.train_success_rate.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(entries)
        })
    }

    /// Retrains every scenario under each swept probe budget and noise
    /// level and writes ASR curves. The configured run is the first row of
    /// each scenario's curves.
    pub fn sweep(&self) -> Result<Vec<SweepRow>> {
        self.timed(Stage::Sweep, || {
            let report: RunReport = read_json(&self.dir.path("report.json"))?;
            let mut rows = Vec::new();
            for s in &self.cfg.scenarios {
                let name = s.name();
                let main = report
                    .scenarios
                    .iter()
                    .find(|r| r.scenario == name)
                    .ok_or_else(|| Error::invalid(format!("report lacks scenario {name}")))?;
                rows.push(SweepRow {
                    budget: self.cfg.oracle.budget,
                    noise: self.cfg.oracle.noise,
                    report: main.clone(),
                });
                for &b in &self.cfg.sweeps.budgets {
                    let variant = Variant {
                        budget: Some(b),
                        ..Variant::main(&self.cfg)
                    };
                    rows.push(SweepRow {
                        budget: Some(b),
                        noise: variant.noise,
                        report: self.evaluate_variant(s, &variant)?,
                    });
                }
                for &p in &self.cfg.sweeps.noise {
                    let variant = Variant {
                        noise: p,
                        ..Variant::main(&self.cfg)
                    };
                    rows.push(SweepRow {
                        budget: variant.budget,
                        noise: p,
                        report: self.evaluate_variant(s, &variant)?,
                    });
                }
            }
            write_json(&self.dir.path("sweep.json"), &rows)?;
            let mut w = csv::Writer::from_path(self.dir.path("sweep.csv"))?;
            w.write_record(["scenario", "budget", "noise", "asr", "steps_mean", "train_probes", "budget_exhausted"])?;
            for r in &rows {
                w.write_record([
                    r.report.scenario.clone(),
                    r.budget.map_or_else(|| "none".to_string(), |b| b.to_string()),
                    r.noise.to_string(),
                    r.report.asr.to_string(),
                    r.report.steps.mean.to_string(),
                    r.report.train_probes.to_string(),
                    r.report.budget_exhausted.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(rows)
        })
    }

    /// Trains `variant` on one scenario and scores it on the attack test set.
    pub fn evaluate_variant(&self, scenario: &Scenario, variant: &Variant) -> Result<ScenarioReport> {
        let vocab = self.load_vocab()?;
        let encoder = self.load_encoder(&vocab)?;
        let det = self.load_detector(scenario.detector)?;
        let flows = self.malicious(scenario.attack, "attack_test")?;
        let name = scenario.name();
        let (agent, summary) = self.train_variant(&vocab, &encoder, scenario, variant, None)?;
        let (adv, records) = self.rollouts(&vocab, &encoder, &agent, variant.filler.clone(), &flows, &name)?;
        let v = verdicts(&name, &det, &flows, &adv, &records)?;
        summarize(&name, &v, &flows, &adv, &summary)
    }

    /// Every stage in order.
    pub fn pipeline(&self) -> Result<RunReport> {
        self.gen_data()?;
        self.build_vocab()?;
        self.pretrain()?;
        self.train_detectors()?;
        self.attack_train()?;
        self.attack_infer()?;
        let report = self.eval()?;
        self.sweep()?;
        Ok(report)
    }

    // ---- helpers ------------------------------------------------------

    /// Trains a fresh agent under `variant`. When `log_dir` is given the
    /// episode log is written there.
    pub fn train_variant(
        &self,
        vocab: &Vocabulary,
        encoder: &EncoderModel,
        scenario: &Scenario,
        variant: &Variant,
        log_dir: Option<&Path>,
    ) -> Result<(SacAgent, TrainSummary)> {
        let det = self.load_detector(scenario.detector)?;
        let label = format!("{}/{}", scenario.name(), variant.label);
        let mut oracle = DetectorOracle::new(det);
        if variant.noise > 0.0 {
            oracle = oracle.with_noise(variant.noise, self.seed(&format!("noise/{label}")))?;
        }
        if let Some(b) = variant.budget {
            oracle = oracle.with_budget(b)?;
        }
        let env = Environment::new(encoder, vocab, &oracle, self.cfg.env.clone())?.with_filler(variant.filler.clone());
        let flows: Vec<Arc<Flow>> = self
            .malicious(scenario.attack, "attack_train")?
            .into_iter()
            .map(Arc::new)
            .collect();
        let acfg = SacConfig {
            seed: self.seed(&format!("agent/{label}")) ^ self.cfg.agent.seed,
            ..self.cfg.agent.clone()
        };
        let mut agent = SacAgent::new(vocab, encoder.config.n, acfg)?;
        let opts = TrainOptions {
            episodes: self.cfg.episodes,
            updates: true,
        };
        let rep = match log_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let mut w = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
                let rep = train(&mut agent, &env, &flows, &opts, Some(&mut w))?;
                w.flush()?;
                rep
            }
            None => train(&mut agent, &env, &flows, &opts, None)?,
        };
        agent.xi_prime = self.cfg.infer.xi_prime.or_else(|| calibrate_xi_prime(&rep.episodes));
        let summary = TrainSummary {
            episodes: rep.episodes.len(),
            success_rate: rep.success_rate(),
            probes: Oracle::probes(&oracle),
            budget_exhausted: rep.budget_exhausted,
            xi_prime: agent.xi_prime,
        };
        Ok((agent, summary))
    }

    fn stop_rule(&self, agent: &SacAgent) -> StopRule {
        let xi = agent.xi_prime.unwrap_or(f64::INFINITY);
        match self.cfg.infer.stop {
            StopKind::QValue => StopRule::QValue(xi),
            StopKind::Adjusted => StopRule::Adjusted { xi },
        }
    }

    /// Runs the agent on each flow without oracle access.
    pub fn rollouts(
        &self,
        vocab: &Vocabulary,
        encoder: &EncoderModel,
        agent: &SacAgent,
        filler: Filler,
        flows: &[Flow],
        label: &str,
    ) -> Result<(Vec<Flow>, Vec<InferRecord>)> {
        let env = Environment::new(encoder, vocab, &Offline, self.cfg.env.clone())?.with_filler(filler);
        let base = self.seed(&format!("infer/{label}"));
        let rule = self.stop_rule(agent);
        let mut adv = Vec::with_capacity(flows.len());
        let mut records = Vec::with_capacity(flows.len());
        for (i, f) in flows.iter().enumerate() {
            let opts = InferOptions {
                rule,
                mode: self.cfg.infer.mode,
                seed: base ^ i as u64,
            };
            let out = infer(agent, &env, Arc::new(f.clone()), &opts)?;
            records.push(InferRecord {
                flow_id: f.id.clone(),
                steps: out.steps,
                stopped_by_value: out.stopped_by_value,
                actions: out.trace.iter().map(|t| t.0).collect(),
                q_values: out.trace.iter().map(|t| t.1).collect(),
            });
            adv.push(out.flow);
        }
        Ok((adv, records))
    }

    /// τ uniformly random valid edits per flow with encoder fills.
    fn random_rollouts(
        &self,
        vocab: &Vocabulary,
        encoder: &EncoderModel,
        flows: &[Flow],
        label: &str,
    ) -> Result<(Vec<Flow>, Vec<InferRecord>)> {
        let env = Environment::new(encoder, vocab, &Offline, self.cfg.env.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(&format!("random/{label}")));
        let mut adv = Vec::with_capacity(flows.len());
        let mut records = Vec::with_capacity(flows.len());
        for f in flows {
            let mut s = env.reset(Arc::new(f.clone()));
            let mut actions = Vec::new();
            for _ in 0..self.cfg.env.tau {
                let valid: Vec<usize> = action_mask(&s)
                    .iter()
                    .enumerate()
                    .filter_map(|(a, &ok)| ok.then_some(a))
                    .collect();
                let a = valid[rng.random_range(0..valid.len())];
                s = env.advance(&s, ActionId(a))?;
                actions.push(a);
            }
            records.push(InferRecord {
                flow_id: f.id.clone(),
                steps: actions.len(),
                stopped_by_value: false,
                actions,
                q_values: Vec::new(),
            });
            adv.push(env.restore(&s)?);
        }
        Ok((adv, records))
    }
}

/// One training configuration of a scenario.
#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub filler: Filler,
    pub noise: f64,
    pub budget: Option<u64>,
}

impl Variant {
    pub fn main(cfg: &ExperimentConfig) -> Self {
        Variant {
            label: "main".into(),
            filler: Filler::default(),
            noise: cfg.oracle.noise,
            budget: cfg.oracle.budget,
        }
    }

    pub fn ablation(cfg: &ExperimentConfig, mode: AblationMode, seed: u64) -> Self {
        let filler = match mode {
            AblationMode::S2S => Filler::UniformRange { seed },
            AblationMode::S2F => Filler::FlowMean,
            AblationMode::S1 | AblationMode::Full => Filler::default(),
        };
        Variant {
            label: if mode == AblationMode::Full {
                "main".into()
            } else {
                mode.name().into()
            },
            filler,
            ..Variant::main(cfg)
        }
    }
}

/// Every seed the run derives, keyed by component.
pub fn seeds(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    let mut labels = vec![
        "data/benign".to_string(),
        "split/benign".to_string(),
        "encoder/init".to_string(),
        "encoder/pretrain".to_string(),
        "detector/mlp".to_string(),
        "detector/centroid".to_string(),
    ];
    for k in [MaliciousKind::BurstFlood, MaliciousKind::Beacon] {
        labels.push(format!("data/{}", k.name()));
        labels.push(format!("split/{}", k.name()));
    }
    for s in &cfg.scenarios {
        let name = s.name();
        labels.push(format!("agent/{name}/main"));
        labels.push(format!("infer/{name}"));
    }
    let mut map: BTreeMap<String, u64> = labels.into_iter().map(|l| (l.clone(), cfg.derive_seed(&l))).collect();
    map.insert("root".into(), cfg.seed);
    map
}

/// Runs one CLI stage by name.
pub fn run_stage(run: &Run, stage: Stage, modes: &[AblationMode]) -> Result<()> {
    match stage {
        Stage::GenData => run.gen_data(),
        Stage::BuildVocab => run.build_vocab().map(drop),
        Stage::Pretrain => run.pretrain().map(drop),
        Stage::TrainDetector => run.train_detectors().map(drop),
        Stage::AttackTrain => run.attack_train().map(drop),
        Stage::AttackInfer => run.attack_infer(),
        Stage::Eval => run.eval().map(drop),
        Stage::Ablate => run.ablate(modes).map(drop),
        Stage::Sweep => run.sweep().map(drop),
    }
}
