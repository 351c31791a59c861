//! Private per-modality norm statistics versus one shared set, on two
//! streams with very different means.

use asymfusion::norm::{batch_stats, ModalityNorm, NormMode};
use asymfusion::rng::Lcg64;
use asymfusion::tensor::Tensor;

fn main() -> asymfusion::Result<()> {
    let mut rng = Lcg64::new(3);
    let depth = Tensor::randn([4, 2, 8, 8], 0.5, &mut rng).map(|v| v + 6.0);
    let color = Tensor::randn([4, 2, 8, 8], 2.0, &mut rng).map(|v| v - 1.0);

    for mode in [NormMode::Private, NormMode::Shared] {
        let mut norm = ModalityNorm::new(2, 2, mode)?;
        for _ in 0..50 {
            norm.forward_train(&depth, 0)?;
            norm.forward_train(&color, 1)?;
        }
        println!("{mode:?}: {} learnable parameters", norm.learnable_params());
        for (s, x) in [(0, &depth), (1, &color)] {
            let set = norm.set_of(s)?;
            let y = batch_stats(&norm.forward_eval(x, s)?);
            println!(
                "  modality {s}: running mean {:.3?}, eval output mean {:.3?}",
                norm.running_mean(set),
                y.mean
            );
        }
    }
    Ok(())
}
