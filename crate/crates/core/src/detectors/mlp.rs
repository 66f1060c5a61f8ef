use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{flow_features, log_features, Standardizer, NUM_FEATURES};
use super::f1_grid_threshold;
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Graph, Linear, ParamStore, Tensor};
use crate::traffic::Flow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: 16,
            epochs: 60,
            batch_size: 128,
            lr: 1e-2,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Two-layer classifier over standardised flow statistics.
#[derive(Clone, Debug)]
pub struct MlpDetector {
    pub norm: Standardizer,
    pub store: ParamStore,
    pub(crate) l1: Linear,
    pub(crate) l2: Linear,
    /// Flows with malicious probability at or above this value are flagged.
    pub threshold: f64,
}

fn rows(flows: &[Flow]) -> Vec<[f64; NUM_FEATURES]> {
    flows.iter().map(|f| log_features(&flow_features(f))).collect()
}

impl MlpDetector {
    pub(crate) fn layers(store: &mut ParamStore, hidden: usize, seed: u64) -> Result<(Linear, Linear)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l1 = Linear::new(store, "mlp.l1", NUM_FEATURES, hidden, &mut rng)?;
        let l2 = Linear::new(store, "mlp.l2", hidden, 2, &mut rng)?;
        Ok((l1, l2))
    }

    fn probs_of(&self, x: &[[f64; NUM_FEATURES]]) -> Vec<f64> {
        let data: Vec<f64> = x.iter().flat_map(|r| self.norm.apply(r)).collect();
        let mut g = Graph::new(&self.store);
        let xv = g.constant(Tensor::from_rows(x.len(), NUM_FEATURES, data));
        let h = self.l1.forward(&mut g, xv);
        let h = g.tanh(h);
        let z = self.l2.forward(&mut g, h);
        let p = g.softmax(z);
        let t = g.value(p);
        (0..x.len()).map(|i| t.get(i, 1)).collect()
    }

    /// Probability that `flow` is malicious.
    pub fn score(&self, flow: &Flow) -> f64 {
        self.probs_of(&[log_features(&flow_features(flow))])[0]
    }

    pub fn scores(&self, flows: &[Flow]) -> Vec<f64> {
        if flows.is_empty() {
            return Vec::new();
        }
        self.probs_of(&rows(flows))
    }

    pub fn hidden(&self) -> usize {
        self.l1.fan_out
    }
}

fn split<'a>(flows: &'a [Flow], frac: f64, rng: &mut ChaCha8Rng) -> (Vec<&'a Flow>, Vec<&'a Flow>) {
    let mut idx: Vec<usize> = (0..flows.len()).collect();
    idx.shuffle(rng);
    let nv = ((flows.len() as f64) * frac).round() as usize;
    let nv = nv.min(flows.len().saturating_sub(1));
    let val = idx[..nv].iter().map(|&i| &flows[i]).collect();
    let train = idx[nv..].iter().map(|&i| &flows[i]).collect();
    (train, val)
}

/// Trains the classifier with cross-entropy and picks the F1-optimal
/// threshold on a held-out validation split.
pub fn train_mlp(benign: &[Flow], malicious: &[Flow], cfg: &MlpConfig) -> Result<MlpDetector> {
    if benign.is_empty() || malicious.is_empty() {
        return Err(Error::invalid("MLP detector needs both benign and malicious flows"));
    }
    if cfg.hidden == 0 || cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Config(format!("bad MLP config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x31f0);
    let (bt, bv) = split(benign, cfg.val_fraction, &mut rng);
    let (mt, mv) = split(malicious, cfg.val_fraction, &mut rng);

    let mut x: Vec<[f64; NUM_FEATURES]> = Vec::new();
    let mut y: Vec<usize> = Vec::new();
    for f in &bt {
        x.push(log_features(&flow_features(f)));
        y.push(0);
    }
    for f in &mt {
        x.push(log_features(&flow_features(f)));
        y.push(1);
    }
    let norm = Standardizer::fit(&x);
    let xs: Vec<[f64; NUM_FEATURES]> = x.iter().map(|r| norm.apply(r)).collect();

    let mut store = ParamStore::new();
    let (l1, l2) = MlpDetector::layers(&mut store, cfg.hidden, cfg.seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut opt = AdamState::new(&store);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let data: Vec<f64> = batch.iter().flat_map(|&i| xs[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new(&store);
            let xv = g.constant(Tensor::from_rows(batch.len(), NUM_FEATURES, data));
            let h = l1.forward(&mut g, xv);
            let h = g.tanh(h);
            let z = l2.forward(&mut g, h);
            let lp = g.log_softmax(z);
            let picked = g.pick(lp, labels);
            let m = g.mean(picked);
            let loss = g.scale(m, -1.0);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("MLP loss diverged in epoch {epoch}")));
            }
            let grads = g.backward(loss);
            opt.step(&mut store, &grads, &adam);
        }
    }

    let mut det = MlpDetector {
        norm,
        store,
        l1,
        l2,
        threshold: 0.5,
    };
    let vb: Vec<Flow> = bv.into_iter().cloned().collect();
    let vm: Vec<Flow> = mv.into_iter().cloned().collect();
    if !vb.is_empty() && !vm.is_empty() {
        det.threshold = f1_grid_threshold(&det.scores(&vb), &det.scores(&vm));
    }
    Ok(det)
}
