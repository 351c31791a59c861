//! A shortened fusion-direction ablation: every direction crossed with
//! every fusion method, two seeds, a few epochs.

use asymfusion::harness::{run_experiment, ExperimentName, RunConfig};

fn main() -> asymfusion::Result<()> {
    let mut base = RunConfig::default();
    base.train.epochs = 8;
    base.data.train_size = 64;
    base.data.test_size = 16;
    let report = run_experiment(ExperimentName::Direction, &base, &[0, 1], &mut |line| eprintln!("{line}"))?;
    print!("{}", report.summary_csv());
    Ok(())
}
