use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use super::config::{canonical_json, RunConfig};
use super::runner::{evaluate_net, fit, EvalReport};
use crate::error::{Error, Result};
use crate::network::{
    count_params, AsymFusionNet, Direction, FusionConfig, FusionMethod, ParamReport, SharingStrategy,
};
use crate::synth::{bayes_ceiling, generate, BayesCeiling, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    /// Encoder sharing strategies.
    Sharing,
    /// Shuffle / shift / distillation ablation grid.
    Components,
    /// Fusion directions against fusion methods.
    Direction,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 3] = [Self::Sharing, Self::Components, Self::Direction];

    pub fn label(self) -> &'static str {
        match self {
            Self::Sharing => "sharing",
            Self::Components => "components",
            Self::Direction => "direction",
        }
    }
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}` (sharing, components, direction)")))
    }
}

/// One grid cell: a configuration trained once per seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSpec {
    pub row: String,
    pub column: String,
    pub config: RunConfig,
    /// Train a single-branch network on this modality alone.
    pub unimodal: Option<usize>,
}

impl CellSpec {
    pub fn new(row: impl Into<String>, column: impl Into<String>, config: RunConfig) -> Self {
        Self {
            row: row.into(),
            column: column.into(),
            config,
            unimodal: None,
        }
    }

    pub fn unimodal(base: &RunConfig, modality: usize) -> Self {
        let mut config = base.clone();
        config.net.fusion = FusionConfig::disabled();
        Self {
            row: format!("unimodal m{}", modality + 1),
            column: "-".into(),
            config,
            unimodal: Some(modality),
        }
    }

    pub fn name(&self) -> String {
        if self.column == "-" {
            self.row.clone()
        } else {
            format!("{} / {}", self.row, self.column)
        }
    }
}

fn with_fusion(base: &RunConfig, f: impl FnOnce(&mut FusionConfig)) -> RunConfig {
    let mut c = base.clone();
    f(&mut c.net.fusion);
    c
}

/// The ablation grid of `name` built around `base`.
pub fn experiment_cells(name: ExperimentName, base: &RunConfig) -> Vec<CellSpec> {
    match name {
        ExperimentName::Sharing => [
            SharingStrategy::IndividualConvsIndividualNorms,
            SharingStrategy::SharedConvsSharedNorms,
            SharingStrategy::SharedConvsIndividualNorms,
        ]
        .into_iter()
        .map(|s| {
            let mut c = base.clone();
            c.net.sharing = s;
            CellSpec::new(s.label(), base.net.fusion.method.label(), c)
        })
        .collect(),
        ExperimentName::Components => {
            let mut cells = Vec::new();
            for distill in [true, false] {
                let column = if distill { "distill" } else { "no distill" };
                for (row, shuffle, shift) in [
                    ("none", false, false),
                    ("shuffle", true, false),
                    ("shift", false, true),
                    ("shuffle+shift", true, true),
                ] {
                    let mut c = with_fusion(base, |f| {
                        f.method = FusionMethod::AsymFusion;
                        f.shuffle = shuffle;
                        f.shift = shift;
                        f.cross_skip_only = false;
                        if !shuffle && !shift {
                            f.direction = Direction::None;
                        }
                    });
                    c.train.loss.distill = distill;
                    cells.push(CellSpec::new(row, column, c));
                }
            }
            let mut c = with_fusion(base, |f| {
                f.method = FusionMethod::AsymFusion;
                f.shuffle = true;
                f.shift = true;
                f.cross_skip_only = true;
            });
            c.train.loss.distill = true;
            cells.push(CellSpec::new("shuffle+shift cross-skip only", "distill", c));
            cells
        }
        ExperimentName::Direction => {
            let mut cells = Vec::new();
            for dir in [Direction::OneToTwo, Direction::TwoToOne, Direction::Bidirectional] {
                for method in [
                    FusionMethod::Concat,
                    FusionMethod::Average,
                    FusionMethod::Attention,
                    FusionMethod::AsymFusion,
                ] {
                    let c = with_fusion(base, |f| {
                        f.method = method;
                        f.direction = dir;
                    });
                    cells.push(CellSpec::new(dir.label(), method.label(), c));
                }
            }
            cells
        }
    }
}

/// Result of one seeded training run.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub metrics: EvalReport,
    pub params: ParamReport,
    pub steps: usize,
    pub epoch_loss: Vec<f64>,
    pub train_checksum: String,
    pub test_checksum: String,
    /// For one-way fusion: whether the donor branch's activations at
    /// initialization match a twin network without fusion bit for bit.
    pub donor_pure: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub name: String,
    pub row: String,
    pub column: String,
    pub unimodal: Option<usize>,
    pub config: RunConfig,
    pub mean_iou: MeanStd,
    pub pixel_accuracy: MeanStd,
    pub mean_accuracy: MeanStd,
    pub per_modality_mean_iou: Vec<MeanStd>,
    pub params_total: usize,
    pub params_extra: usize,
    pub runs: Vec<RunRecord>,
}

impl CellSummary {
    fn new(spec: &CellSpec, runs: Vec<RunRecord>) -> Self {
        let pick = |f: &dyn Fn(&RunRecord) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        let branches = runs.first().map_or(0, |r| r.metrics.per_modality.len());
        let per_modality_mean_iou = (0..branches)
            .map(|s| pick(&|r: &RunRecord| r.metrics.per_modality[s].mean_iou))
            .collect();
        let params = runs.first().map(|r| r.params.clone());
        Self {
            name: spec.name(),
            row: spec.row.clone(),
            column: spec.column.clone(),
            unimodal: spec.unimodal,
            config: spec.config.clone(),
            mean_iou: pick(&|r: &RunRecord| r.metrics.ensemble.mean_iou),
            pixel_accuracy: pick(&|r: &RunRecord| r.metrics.ensemble.pixel_accuracy),
            mean_accuracy: pick(&|r: &RunRecord| r.metrics.ensemble.mean_accuracy),
            per_modality_mean_iou,
            params_total: params.as_ref().map_or(0, |p| p.total),
            params_extra: params.as_ref().map_or(0, ParamReport::extra),
            runs,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunTiming {
    pub cell: String,
    pub seed: u64,
    pub seconds: f64,
}

/// Aggregated grid. Everything except `timing` is a pure function of the
/// base configuration and seeds.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub bayes_ceiling: BayesCeiling,
    pub cells: Vec<CellSummary>,
    pub timing: Vec<RunTiming>,
    pub total_seconds: f64,
}

#[derive(Serialize)]
struct DeterministicView<'a> {
    experiment: &'a str,
    seeds: &'a [u64],
    bayes_ceiling: &'a BayesCeiling,
    cells: &'a [CellSummary],
}

impl ExperimentReport {
    pub fn cell(&self, row: &str, column: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.row == row && c.column == column)
    }

    /// Canonical JSON without wall-clock fields.
    pub fn metrics_json(&self) -> Result<String> {
        canonical_json(&DeterministicView {
            experiment: &self.experiment,
            seeds: &self.seeds,
            bayes_ceiling: &self.bayes_ceiling,
            cells: &self.cells,
        })
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "experiment,row,column,seeds,miou_mean,miou_std,pixel_acc_mean,pixel_acc_std,mean_acc_mean,mean_acc_std,params_total,params_extra\n",
        );
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{},{}",
                self.experiment,
                c.row,
                c.column,
                c.runs.len(),
                c.mean_iou.mean,
                c.mean_iou.std,
                c.pixel_accuracy.mean,
                c.pixel_accuracy.std,
                c.mean_accuracy.mean,
                c.mean_accuracy.std,
                c.params_total,
                c.params_extra,
            );
        }
        s
    }

    /// Writes `report.json`, `metrics.json` and `summary.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), canonical_json(self)?)?;
        std::fs::write(dir.join("metrics.json"), self.metrics_json()?)?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        Ok(())
    }
}

fn donor_purity(net: &AsymFusionNet, probe: &Dataset) -> Result<Option<bool>> {
    let cfg = net.config();
    let donor = match (cfg.modalities, cfg.fusion.direction) {
        (2, Direction::OneToTwo) => 0,
        (2, Direction::TwoToOne) => 1,
        _ => return Ok(None),
    };
    let mut twin_cfg = cfg.clone();
    twin_cfg.fusion.direction = Direction::None;
    let twin = AsymFusionNet::build(&twin_cfg)?;
    let batch = probe.batch(&[0])?;
    let a = net.predict(&batch.inputs)?;
    let b = twin.predict(&batch.inputs)?;
    Ok(Some(
        a.activations[donor]
            .iter()
            .zip(&b.activations[donor])
            .all(|(x, y)| x.bit_eq(y)),
    ))
}

/// Generates data, trains and evaluates one cell for one seed.
pub fn run_cell(spec: &CellSpec, seed: u64) -> Result<RunRecord> {
    let cfg = spec.config.with_seed(seed);
    cfg.validate()?;
    let (mut train, mut test) = generate(&cfg.data)?;
    let mut net_cfg = cfg.net.clone();
    if let Some(s) = spec.unimodal {
        train = train.select_modality(s)?;
        test = test.select_modality(s)?;
        net_cfg.modalities = 1;
        net_cfg.fusion = FusionConfig::disabled();
    }
    let mut net = AsymFusionNet::build(&net_cfg)?;
    let params = count_params(&net);
    let donor_pure = if test.is_empty() { None } else { donor_purity(&net, &test)? };
    let (_, log) = fit(&mut net, &train, &cfg.train, seed)?;
    let metrics = evaluate_net(&net, &test, cfg.eval_batch)?;
    Ok(RunRecord {
        seed,
        metrics,
        params,
        steps: log.steps,
        epoch_loss: log.epoch_loss,
        train_checksum: format!("{:016x}", train.checksum()),
        test_checksum: format!("{:016x}", test.checksum()),
        donor_pure,
    })
}

/// Runs every cell for every seed. `progress` receives one line per run.
pub fn run_cells(
    experiment: &str,
    cells: &[CellSpec],
    base: &RunConfig,
    seeds: &[u64],
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    for c in cells {
        c.config.validate()?;
    }
    let started = Instant::now();
    let mut timing = Vec::new();
    let mut summaries = Vec::with_capacity(cells.len());
    for spec in cells {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let t0 = Instant::now();
            let rec = run_cell(spec, seed)?;
            let seconds = t0.elapsed().as_secs_f64();
            progress(&format!(
                "{experiment}: {} seed {seed}: mIoU {:.4} pixel acc {:.4} ({seconds:.1}s)",
                spec.name(),
                rec.metrics.ensemble.mean_iou,
                rec.metrics.ensemble.pixel_accuracy
            ));
            timing.push(RunTiming {
                cell: spec.name(),
                seed,
                seconds,
            });
            runs.push(rec);
        }
        summaries.push(CellSummary::new(spec, runs));
    }
    Ok(ExperimentReport {
        experiment: experiment.to_string(),
        seeds: seeds.to_vec(),
        bayes_ceiling: bayes_ceiling(&base.data)?,
        cells: summaries,
        timing,
        total_seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn run_experiment(
    name: ExperimentName,
    base: &RunConfig,
    seeds: &[u64],
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentReport> {
    base.validate()?;
    run_cells(name.label(), &experiment_cells(name, base), base, seeds, progress)
}
