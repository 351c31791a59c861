//! Trains the default network briefly, evaluates it, and checks that a
//! checkpoint reloads to the same predictions.

use asymfusion::harness::{evaluate_net, fit, load_checkpoint, save_checkpoint, RunConfig};
use asymfusion::network::AsymFusionNet;
use asymfusion::synth::generate;

fn main() -> asymfusion::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 15;
    cfg.data.train_size = 128;
    cfg.data.test_size = 32;
    let (train, test) = generate(&cfg.data)?;

    let mut net = AsymFusionNet::build(&cfg.net)?;
    let (opt, log) = fit(&mut net, &train, &cfg.train, cfg.seed)?;
    for (e, loss) in log.epoch_loss.iter().enumerate() {
        println!("epoch {e}: loss {loss:.4}");
    }
    let report = evaluate_net(&net, &test, cfg.eval_batch)?;
    println!("ensemble mIoU {:.4}, pixel accuracy {:.4}", report.ensemble.mean_iou, report.ensemble.pixel_accuracy);
    for (s, m) in report.per_modality.iter().enumerate() {
        println!("branch {s}: mIoU {:.4} (alpha {:.3})", m.mean_iou, report.alpha[s]);
    }

    let path = std::env::temp_dir().join("asymfusion-example.bin");
    let manifest = save_checkpoint(&net, Some(&opt), &path)?;
    let (back, _) = load_checkpoint(&path)?;
    let again = evaluate_net(&back, &test, cfg.eval_batch)?;
    println!(
        "checkpoint: {} tensors, reloaded metrics identical: {}",
        manifest.tensors.len(),
        again.ensemble == report.ensemble
    );
    Ok(())
}
