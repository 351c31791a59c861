use asymfusion::harness::{
    evaluate_net, experiment_cells, run_cells, run_experiment, CellSpec, ExperimentName, MeanStd, RunConfig,
};
use asymfusion::network::{AsymFusionNet, SharingStrategy};
use asymfusion::synth::generate;

fn quick() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 0;
    cfg.data.train_size = 8;
    cfg.data.test_size = 4;
    cfg
}

#[test]
fn untrained_grid_ignores_the_loss_choice() {
    let base = quick();
    let report = run_experiment(ExperimentName::Components, &base, &[0], &mut |_| {}).unwrap();
    assert_eq!(report.cells.len(), 9);
    for row in ["none", "shuffle", "shift", "shuffle+shift"] {
        let a = report.cell(row, "distill").unwrap();
        let b = report.cell(row, "no distill").unwrap();
        assert_eq!(a.mean_iou.mean, b.mean_iou.mean, "{row}");
        assert_eq!(a.params_total, b.params_total);
    }
    let csv = report.summary_csv();
    assert_eq!(csv.lines().count(), 10);
    assert!(csv.starts_with("experiment,row,column,seeds,miou_mean"));
}

#[test]
fn metrics_are_reproducible_across_runs() {
    let base = quick();
    let cells = experiment_cells(ExperimentName::Sharing, &base);
    let a = run_cells("sharing", &cells, &base, &[3, 4], &mut |_| {}).unwrap();
    let b = run_cells("sharing", &cells, &base, &[3, 4], &mut |_| {}).unwrap();
    assert_eq!(a.metrics_json().unwrap(), b.metrics_json().unwrap());
    let runs = &a.cells[0].runs;
    assert_ne!(runs[0].train_checksum, runs[1].train_checksum);

    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    for f in ["report.json", "metrics.json", "summary.csv"] {
        assert!(dir.path().join(f).exists());
    }
}

#[test]
fn individual_networks_cost_about_twice_the_shared_one() {
    let base = quick();
    let cells = experiment_cells(ExperimentName::Sharing, &base);
    let report = run_cells("sharing", &cells, &base, &[0], &mut |_| {}).unwrap();
    let total = |s: SharingStrategy| report.cells.iter().find(|c| c.row == s.label()).unwrap().params_total;
    let ratio = total(SharingStrategy::IndividualConvsIndividualNorms) as f64
        / total(SharingStrategy::SharedConvsSharedNorms) as f64;
    assert!((1.9..=2.0).contains(&ratio), "{ratio}");
    assert!(total(SharingStrategy::SharedConvsIndividualNorms) > total(SharingStrategy::SharedConvsSharedNorms));
}

#[test]
fn unimodal_cells_train_single_branch_networks() {
    let base = quick();
    let report = run_cells("baseline", &[CellSpec::unimodal(&base, 1)], &base, &[0], &mut |_| {}).unwrap();
    let cell = &report.cells[0];
    assert_eq!(cell.unimodal, Some(1));
    assert_eq!(cell.runs[0].metrics.per_modality.len(), 1);
    assert_eq!(cell.params_extra, 0);
}

#[test]
fn unidirectional_runs_record_donor_purity() {
    let base = quick();
    let cells = experiment_cells(ExperimentName::Direction, &base);
    let uni: Vec<CellSpec> = cells.into_iter().filter(|c| c.row != "bidirectional").collect();
    let report = run_cells("direction", &uni, &base, &[0], &mut |_| {}).unwrap();
    for c in &report.cells {
        assert_eq!(c.runs[0].donor_pure, Some(true), "{}", c.name);
    }
}

#[test]
fn evaluation_does_not_depend_on_batch_size() {
    let cfg = quick();
    let (_, test) = generate(&cfg.data).unwrap();
    let net = AsymFusionNet::build(&cfg.net).unwrap();
    let a = evaluate_net(&net, &test, 1).unwrap();
    let b = evaluate_net(&net, &test, 3).unwrap();
    assert_eq!(a.ensemble, b.ensemble);
    assert_eq!(a.per_modality, b.per_modality);
}

#[test]
fn sample_standard_deviation() {
    let m = MeanStd::of(&[1.0, 2.0, 3.0]);
    assert_eq!(m.mean, 2.0);
    assert!((m.std - 1.0).abs() < 1e-15);
    assert_eq!(MeanStd::of(&[5.0]).std, 0.0);
}
