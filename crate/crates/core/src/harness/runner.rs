use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::network::{train_step, AsymFusionNet, LossConfig, OptimConfig, Optimizer};
use crate::rng::Lcg64;
use crate::synth::{evaluate, Dataset, MetricsReport};
use crate::tensor::{argmax_channels, LabelMap};

const ORDER_STREAM: u64 = 0x0d_e7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples / self.batch_size.max(1)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLog {
    pub steps: usize,
    pub epoch_loss: Vec<f64>,
}

/// Trains `net` on `train`. Each epoch visits a fresh seeded permutation;
/// a trailing partial batch is dropped so every step sees the same batch
/// size.
pub fn fit(net: &mut AsymFusionNet, train: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<(Optimizer, TrainLog)> {
    let per_epoch = cfg.steps_per_epoch(train.len());
    let mut opt = Optimizer::new(cfg.optim, per_epoch * cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        Lcg64::derived(seed ^ ORDER_STREAM, epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        for b in 0..per_epoch {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let batch = train.batch(idx)?;
            sum += train_step(net, &batch, &mut opt, &cfg.loss)?.loss.total;
        }
        epoch_loss.push(if per_epoch == 0 { 0.0 } else { sum / per_epoch as f64 });
    }
    Ok((
        opt,
        TrainLog {
            steps: per_epoch * cfg.epochs,
            epoch_loss,
        },
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Metrics of the ensemble prediction.
    pub ensemble: MetricsReport,
    pub per_modality: Vec<MetricsReport>,
    pub alpha: Vec<f64>,
}

/// Eval-mode metrics on `test`, batched for speed; results do not depend
/// on the batch size.
pub fn evaluate_net(net: &AsymFusionNet, test: &Dataset, batch_size: usize) -> Result<EvalReport> {
    let s_count = net.modalities();
    let mut ens_pred = Vec::new();
    let mut mod_pred: Vec<Vec<LabelMap>> = vec![Vec::new(); s_count];
    let mut refs = Vec::new();
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = test.batch(chunk)?;
        let pred = net.predict(&batch.inputs)?;
        ens_pred.push(argmax_channels(&pred.ensemble));
        for (s, l) in pred.logits.iter().enumerate() {
            mod_pred[s].push(argmax_channels(l));
        }
        refs.push(batch.labels);
    }
    let k = test.classes;
    Ok(EvalReport {
        ensemble: evaluate(&ens_pred, &refs, k)?,
        per_modality: mod_pred
            .iter()
            .map(|p| evaluate(p, &refs, k))
            .collect::<Result<_>>()?,
        alpha: net.alpha(),
    })
}
