use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::loss::{distillation_loss_graph, LossBreakdown, LossConfig};
use super::model::{AsymFusionNet, Mode, ParamKey};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exponent of the poly schedule `lr * (1 - step / total)^power`.
    pub poly_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
        }
    }
}

/// SGD with momentum and a poly learning-rate schedule.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimConfig,
    pub step: usize,
    pub total_steps: usize,
    velocity: BTreeMap<ParamKey, Tensor>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig, total_steps: usize) -> Self {
        Self {
            cfg,
            step: 0,
            total_steps,
            velocity: BTreeMap::new(),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.cfg.lr;
        }
        let frac = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        self.cfg.lr * (1.0 - frac).powf(self.cfg.poly_power)
    }

    pub fn velocity(&self, key: ParamKey) -> Option<&Tensor> {
        self.velocity.get(&key)
    }

    pub fn set_velocity(&mut self, key: ParamKey, v: Tensor) {
        self.velocity.insert(key, v);
    }

    pub fn velocities(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.velocity.iter()
    }

    fn apply(&mut self, net: &mut AsymFusionNet, key: ParamKey, grad: &Tensor, lr: f64) {
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        let decay = key.decays() && wd != 0.0;
        let p = net.param_mut(key);
        let v = self
            .velocity
            .entry(key)
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
            let g = if decay { gv + wd * *pv } else { *gv };
            *vv = mu * *vv + g;
            *pv -= lr * *vv;
        }
    }
}

/// One mini-batch: a tensor per modality plus the shared label map.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Loss and gradients for `batch` without touching parameters or running
/// statistics.
pub fn loss_and_grads(
    net: &AsymFusionNet,
    batch: &Batch,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, BTreeMap<ParamKey, Tensor>, Vec<super::model::StatUpdate>)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = batch.inputs.iter().map(|t| g.constant(t.clone())).collect();
    let fwd = net.forward_graph(&mut g, &ids, Mode::Train, BTreeMap::new())?;
    let nodes = distillation_loss_graph(&mut g, &fwd.logits, fwd.ensemble, &batch.labels, loss_cfg, None)?;
    let values = nodes.values(&g);
    let grads = g.backward(nodes.total)?;
    let grads = fwd.leaves.iter().map(|(&k, &id)| (k, grads.get(id))).collect();
    Ok((values, grads, fwd.stat_updates))
}

/// Forward, backward and one SGD update. Shared weights receive the sum of
/// their per-branch gradients through the shared graph leaf.
pub fn train_step(
    net: &mut AsymFusionNet,
    batch: &Batch,
    opt: &mut Optimizer,
    loss_cfg: &LossConfig,
) -> Result<StepReport> {
    let (loss, grads, updates) = loss_and_grads(net, batch, loss_cfg)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite {
            step: opt.step,
            detail: format!(
                "total {} ce {:?} kl {:?} ensemble_nll {}",
                loss.total, loss.ce, loss.kl, loss.ensemble_nll
            ),
        });
    }
    if let Some((k, _)) = grads.iter().find(|(_, g)| g.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            step: opt.step,
            detail: format!("gradient of {} is not finite", net.param_name(*k)),
        });
    }
    net.commit_stats(&updates);
    let lr = opt.lr_at(opt.step);
    for key in net.param_keys() {
        if let Some(g) = grads.get(&key) {
            opt.apply(net, key, g, lr);
        }
    }
    let report = StepReport {
        step: opt.step,
        lr,
        loss,
    };
    opt.step += 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule() {
        let opt = Optimizer::new(OptimConfig::default(), 100);
        assert_eq!(opt.lr_at(0), 0.05);
        assert_eq!(opt.lr_at(100), 0.0);
        assert!((opt.lr_at(50) - 0.05 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert_eq!(Optimizer::new(OptimConfig::default(), 0).lr_at(7), 0.05);
    }
}
