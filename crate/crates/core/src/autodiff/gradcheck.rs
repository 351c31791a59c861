use serde::Serialize;

use super::{Graph, NodeId};
use crate::error::Result;
use crate::rng::Lcg64;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[derive(Debug, Clone, Serialize)]
pub struct InputError {
    pub input: usize,
    pub elements: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `||a - n|| / max(||a||, ||n||)` over the whole tensor.
    pub norm_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub op: String,
    pub max_rel_error: f64,
    pub max_norm_rel_error: f64,
    /// Perturbed evaluations that landed on a different relu piece than
    /// the unperturbed one; differences across a kink are not derivatives.
    pub kink_crossings: usize,
    pub inputs: Vec<InputError>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares reverse-mode gradients of `build` against fourth-order central
/// differences `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
///
/// `build` receives one differentiable leaf per entry of `inputs` and
/// returns an output node. Non-scalar outputs are reduced with a fixed
/// random projection so every output element contributes.
pub fn grad_check<F>(op: &str, inputs: &[Tensor], step: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut projection: Option<Tensor> = None;
    let mut eval = |xs: &[Tensor], want_grads: bool| -> Result<(f64, u64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        let loss = if g.value(out).is_scalar() {
            out
        } else {
            let w = projection
                .get_or_insert_with(|| {
                    let mut rng = Lcg64::new(0x5eed_0f_9a4d);
                    Tensor::randn(g.value(out).shape(), 1.0, &mut rng)
                })
                .clone();
            g.dot(out, &w)?
        };
        let value = g.value(loss).item();
        let grads = if want_grads {
            let grads = g.backward(loss)?;
            ids.iter().map(|&i| grads.get(i)).collect()
        } else {
            Vec::new()
        };
        Ok((value, g.relu_pattern(), grads))
    };

    let (_, pattern, analytic) = eval(inputs, true)?;
    let mut report = GradReport {
        op: op.to_string(),
        max_rel_error: 0.0,
        max_norm_rel_error: 0.0,
        kink_crossings: 0,
        inputs: Vec::new(),
    };
    let mut work = inputs.to_vec();
    for (k, base) in inputs.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for j in 0..base.len() {
            let orig = base.data()[j];
            let mut f = [0.0; 4];
            for (slot, m) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                work[k].data_mut()[j] = orig + m * step;
                let (value, p, _) = eval(&work, false)?;
                *slot = value;
                report.kink_crossings += (p != pattern) as usize;
            }
            work[k].data_mut()[j] = orig;
            let numeric = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * step);
            let a = analytic[k].data()[j];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let norm_rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-12);
        report.max_rel_error = report.max_rel_error.max(max_rel);
        report.max_norm_rel_error = report.max_norm_rel_error.max(norm_rel);
        report.inputs.push(InputError {
            input: k,
            elements: base.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            norm_rel_error: norm_rel,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-13, 0.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_passes() {
        let mut rng = Lcg64::new(3);
        let x = Tensor::randn([1, 2, 3, 3], 1.0, &mut rng);
        let r = grad_check("sigmoid", &[x], DEFAULT_STEP, |g, ids| Ok(g.sigmoid(ids[0]))).unwrap();
        assert!(r.passes(1e-6), "{r:?}");
        assert_eq!(r.inputs[0].elements, 18);
    }
}
