//! Reverse-mode gradients of a small conv + norm + relu stack against
//! finite differences, then the full built-in suite.

use asymfusion::autodiff::{grad_check, DEFAULT_STEP};
use asymfusion::harness::run_gradcheck_suite;
use asymfusion::norm::{ModalityNorm, NormMode};
use asymfusion::rng::Lcg64;
use asymfusion::tensor::Tensor;

fn main() -> asymfusion::Result<()> {
    let mut rng = Lcg64::new(7);
    let x = Tensor::randn([2, 3, 6, 6], 1.0, &mut rng);
    let w = Tensor::randn([4, 3, 3, 3], 0.4, &mut rng);
    let gamma = Tensor::full([1, 4, 1, 1], 1.0);
    let beta = Tensor::zeros([1, 4, 1, 1]);
    let norm = ModalityNorm::new(4, 1, NormMode::Private)?;

    let report = grad_check("conv-norm-sigmoid", &[x, w, gamma, beta], DEFAULT_STEP, |g, i| {
        let y = g.conv2d(i[0], i[1], None, 1, 1)?;
        let y = norm.clone().forward_node(g, y, 0, i[2], i[3], true)?;
        Ok(g.sigmoid(y))
    })?;
    println!("{}: max relative error {:.2e}", report.op, report.max_rel_error);
    for input in &report.inputs {
        println!("  {input:?}");
    }

    let suite = run_gradcheck_suite(0)?;
    for e in &suite.entries {
        let tag = if e.passed { "ok  " } else { "FAIL" };
        println!("{tag} {:<45} {:.2e} (tol {:.0e})", e.report.op, e.report.max_rel_error, e.tolerance);
    }
    Ok(())
}
