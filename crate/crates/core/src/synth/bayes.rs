use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use super::data::SynthConfig;
use crate::error::Result;

/// Upper bounds on pixel accuracy for a pixel-wise classifier that knows
/// the generative model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BayesCeiling {
    /// Using one modality at a time.
    pub per_modality: Vec<f64>,
    /// Using the product likelihood of all modalities.
    pub fused: f64,
    /// Noise-free limits: distinct intensity signatures over `K`. No model
    /// can beat these, whatever context it uses.
    pub noise_free_per_modality: Vec<f64>,
    pub noise_free_fused: f64,
}

/// Classes sharing a mean vector cannot be told apart; under a uniform
/// class prior the Bayes rule picks any member of the most likely group,
/// so only the distinct mean vectors matter.
fn distinct(points: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for p in points {
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// Accuracy of the Bayes rule on a 1-D mixture of equal-weight unit
/// groups `N(m_g, sigma^2)`: decision boundaries sit at midpoints.
fn ceiling_1d(means: &[f64], sigma: f64, classes: usize) -> f64 {
    let mut m = means.to_vec();
    m.sort_by(f64::total_cmp);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut total = 0.0;
    for (i, &mi) in m.iter().enumerate() {
        let lo = if i == 0 { f64::NEG_INFINITY } else { 0.5 * (m[i - 1] + mi) };
        let hi = if i + 1 == m.len() { f64::INFINITY } else { 0.5 * (mi + m[i + 1]) };
        total += unit.cdf((hi - mi) / sigma) - unit.cdf((lo - mi) / sigma);
    }
    total / classes as f64
}

/// Midpoint-rule quadrature of `integral max_g phi(y - m_g) dy` over a box
/// covering every group mean by 8 sigma.
fn ceiling_grid(groups: &[Vec<f64>], sigma: f64, classes: usize) -> f64 {
    let dims = groups[0].len();
    let per_dim = ((4.0e6f64).powf(1.0 / dims as f64).floor() as usize).max(64);
    let lo: Vec<f64> = (0..dims)
        .map(|d| groups.iter().map(|g| g[d]).fold(f64::INFINITY, f64::min) - 8.0 * sigma)
        .collect();
    let hi: Vec<f64> = (0..dims)
        .map(|d| groups.iter().map(|g| g[d]).fold(f64::NEG_INFINITY, f64::max) + 8.0 * sigma)
        .collect();
    let step: Vec<f64> = (0..dims).map(|d| (hi[d] - lo[d]) / per_dim as f64).collect();
    let cell: f64 = step.iter().product();
    let norm = (2.0 * std::f64::consts::PI * sigma * sigma).powf(-0.5 * dims as f64);
    let mut idx = vec![0usize; dims];
    let mut y = vec![0.0; dims];
    let mut total = 0.0;
    'outer: loop {
        for d in 0..dims {
            y[d] = lo[d] + (idx[d] as f64 + 0.5) * step[d];
        }
        let best = groups
            .iter()
            .map(|g| g.iter().zip(&y).map(|(m, v)| (v - m) * (v - m)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        total += (-best / (2.0 * sigma * sigma)).exp();
        for d in 0..dims {
            idx[d] += 1;
            if idx[d] < per_dim {
                continue 'outer;
            }
            idx[d] = 0;
        }
        break;
    }
    total * norm * cell / classes as f64
}

pub fn bayes_ceiling(cfg: &SynthConfig) -> Result<BayesCeiling> {
    cfg.validate()?;
    let vis = cfg.visibility_matrix();
    let k_count = cfg.classes;
    let sigma = cfg.noise_sigma;
    let means = |mods: &[usize]| -> Vec<Vec<f64>> {
        distinct(
            (0..k_count)
                .map(|k| mods.iter().map(|&s| cfg.level(s, k, &vis)).collect())
                .collect(),
        )
    };
    let all: Vec<usize> = (0..cfg.modalities).collect();
    let fused_groups = means(&all);
    let mut per_modality = Vec::new();
    let mut noise_free_per_modality = Vec::new();
    for s in 0..cfg.modalities {
        let groups = means(&[s]);
        noise_free_per_modality.push(groups.len() as f64 / k_count as f64);
        per_modality.push(if sigma == 0.0 {
            groups.len() as f64 / k_count as f64
        } else {
            let flat: Vec<f64> = groups.iter().map(|g| g[0]).collect();
            ceiling_1d(&flat, sigma, k_count)
        });
    }
    let noise_free_fused = fused_groups.len() as f64 / k_count as f64;
    let fused = if sigma == 0.0 {
        noise_free_fused
    } else if cfg.modalities == 1 {
        per_modality[0]
    } else {
        ceiling_grid(&fused_groups, sigma, k_count)
    };
    Ok(BayesCeiling {
        per_modality,
        fused,
        noise_free_per_modality,
        noise_free_fused,
    })
}
