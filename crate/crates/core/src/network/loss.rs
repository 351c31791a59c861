use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::{LabelMap, Tensor};

pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the distillation term.
    pub lambda: f64,
    pub distill: bool,
    pub ignore_index: Option<u8>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            distill: true,
            ignore_index: None,
        }
    }
}

impl LossConfig {
    pub fn effective_lambda(&self) -> f64 {
        if self.distill {
            self.lambda
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossNodes {
    pub total: NodeId,
    pub ce: Vec<NodeId>,
    pub kl: Vec<NodeId>,
    pub ensemble_nll: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: Vec<f64>,
    pub kl: Vec<f64>,
    pub ensemble_nll: f64,
}

impl LossNodes {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        let v = |ids: &[NodeId]| ids.iter().map(|&i| g.value(i).item()).collect();
        LossBreakdown {
            total: g.value(self.total).item(),
            ce: v(&self.ce),
            kl: v(&self.kl),
            ensemble_nll: g.value(self.ensemble_nll).item(),
        }
    }
}

/// `sum_s CE(logits_s) + lambda * sum_s KL(ens || softmax(logits_s)) + NLL(ens)`.
///
/// The ensemble map enters the KL terms as a constant. `target` overrides
/// it; by default the current value of `ensemble` is used.
pub fn distillation_loss_graph(
    g: &mut Graph,
    logits: &[NodeId],
    ensemble: NodeId,
    labels: &LabelMap,
    cfg: &LossConfig,
    target: Option<&Tensor>,
) -> Result<LossNodes> {
    let target = target.cloned().unwrap_or_else(|| g.value(ensemble).clone());
    let mut ce = Vec::with_capacity(logits.len());
    let mut kl = Vec::with_capacity(logits.len());
    for &l in logits {
        ce.push(g.softmax_ce(l, labels, cfg.ignore_index)?);
        kl.push(g.kl_to_target(l, &target)?);
    }
    let ensemble_nll = g.nll(ensemble, labels, cfg.ignore_index)?;
    let mut total = ce[0];
    for &c in &ce[1..] {
        total = g.add(total, c)?;
    }
    let lambda = cfg.effective_lambda();
    if lambda != 0.0 {
        for &k in &kl {
            let scaled = g.scale(k, lambda);
            total = g.add(total, scaled)?;
        }
    }
    total = g.add(total, ensemble_nll)?;
    Ok(LossNodes {
        total,
        ce,
        kl,
        ensemble_nll,
    })
}

/// Loss value for already computed logits and ensemble probabilities.
pub fn distillation_loss(
    logits: &[Tensor],
    ensemble: &Tensor,
    labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = logits.iter().map(|t| g.constant(t.clone())).collect();
    let ens = g.constant(ensemble.clone());
    let nodes = distillation_loss_graph(&mut g, &ids, ens, labels, cfg, None)?;
    Ok(nodes.values(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Lcg64;
    use crate::tensor::softmax_channels;

    fn labels() -> LabelMap {
        LabelMap::new(1, 2, 2, vec![0, 1, 2, 1]).unwrap()
    }

    #[test]
    fn kl_vanishes_when_modalities_match_ensemble() {
        let mut rng = Lcg64::new(1);
        let l = Tensor::randn([1, 3, 2, 2], 1.0, &mut rng);
        let ens = softmax_channels(&l);
        let b = distillation_loss(&[l.clone(), l], &ens, &labels(), &LossConfig::default()).unwrap();
        for k in &b.kl {
            assert!(k.abs() < 1e-15, "{k}");
        }
    }

    #[test]
    fn zero_lambda_is_ce_plus_ensemble_nll() {
        let mut rng = Lcg64::new(2);
        let l1 = Tensor::randn([1, 3, 2, 2], 1.0, &mut rng);
        let l2 = Tensor::randn([1, 3, 2, 2], 1.0, &mut rng);
        let ens = crate::tensor::scale(
            &crate::tensor::add(&softmax_channels(&l1), &softmax_channels(&l2)).unwrap(),
            0.5,
        );
        let cfg = LossConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let b = distillation_loss(&[l1, l2], &ens, &labels(), &cfg).unwrap();
        assert_eq!(b.total, b.ce[0] + b.ce[1] + b.ensemble_nll);
        assert!(b.kl.iter().all(|&k| k > 0.0));
    }
}
