use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{canonical_json, resolve_alias, RunConfig};
use super::experiment::{run_experiment, ExperimentName};
use super::gradsuite::run_gradcheck_suite;
use super::runner::{evaluate_net, fit};
use crate::error::{Error, Result};
use crate::fusion::{
    refute_symmetry_by_search, verify_symmetric_by_construction, Block, ProbeShape, RefuteOptions,
};
use crate::network::{
    count_params, count_params_config, preset_report, AsymFusionNet, ResNetShape, RESNET101_REFERENCE_TOTAL,
};
use crate::synth::{bayes_ceiling, generate, write_dataset};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "asymfusion", version, about = "Multimodal fusion segmentation on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: config, then ASYMFUSION_OUT, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    #[value(name = "resnet101-shape")]
    Resnet101,
    #[value(name = "resnet50-shape")]
    Resnet50,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SymmetryMethod {
    /// Construction when the block has one, search otherwise.
    Auto,
    Construct,
    Refute,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExperimentArg {
    Sharing,
    Components,
    Direction,
}

impl From<ExperimentArg> for ExperimentName {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::Sharing => ExperimentName::Sharing,
            ExperimentArg::Components => ExperimentName::Components,
            ExperimentArg::Direction => ExperimentName::Direction,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the train and test splits and write them as dataset files.
    GenData(RunArgs),
    /// Train one network and save a checkpoint.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Symmetry verdicts for the fusion blocks.
    VerifySymmetry {
        /// Block name, or `all`.
        #[arg(long, default_value = "all")]
        block: String,
        #[arg(long, value_enum, default_value_t = SymmetryMethod::Auto)]
        method: SymmetryMethod,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter accounting for a config or a ResNet-shaped preset.
    CountParams {
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        modalities: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run an ablation grid over several seeds.
    Experiment {
        #[arg(value_enum)]
        name: ExperimentArg,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[command(flatten)]
        run: RunArgs,
    },
}

/// Subcommands that accept run configuration overrides.
const CONFIGURABLE: &[&str] = &["gen-data", "train", "eval", "count-params", "experiment"];
const TOP_LEVEL_KEYS: &[&str] = &["seed", "eval_batch", "out_dir"];

/// Splits `--key value` config overrides from the arguments clap should
/// see. Flags declared by the subcommand always go to clap.
fn split_overrides(args: Vec<OsString>) -> (Vec<OsString>, Vec<(String, String)>) {
    let strings: Option<Vec<String>> = args.iter().map(|a| a.to_str().map(str::to_string)).collect();
    let Some(strings) = strings else {
        return (args, Vec::new());
    };
    let Some(sub_pos) = strings.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return (args, Vec::new());
    };
    let sub = strings[sub_pos].as_str();
    if !CONFIGURABLE.contains(&sub) {
        return (args, Vec::new());
    }
    let cmd = Cli::command();
    let declared: Vec<String> = cmd
        .find_subcommand(sub)
        .map(|c| c.get_arguments().filter_map(|a| a.get_long().map(str::to_string)).collect())
        .unwrap_or_default();

    let mut kept: Vec<OsString> = strings[..=sub_pos].iter().map(OsString::from).collect();
    let mut overrides = Vec::new();
    let mut i = sub_pos + 1;
    while i < strings.len() {
        let a = &strings[i];
        let flag = a.strip_prefix("--").filter(|f| !f.is_empty());
        let (key, inline) = match flag {
            Some(f) => match f.split_once('=') {
                Some((k, v)) => (Some(k), Some(v.to_string())),
                None => (Some(f), None),
            },
            None => (None, None),
        };
        let is_override = key.is_some_and(|k| {
            !declared.iter().any(|d| d == k)
                && (k.contains('.') || resolve_alias(k).is_some() || TOP_LEVEL_KEYS.contains(&k))
        });
        if is_override {
            let key = key.expect("checked").to_string();
            match inline {
                Some(v) => overrides.push((key, v)),
                None if i + 1 < strings.len() => {
                    overrides.push((key, strings[i + 1].clone()));
                    i += 1;
                }
                None => overrides.push((key, String::new())),
            }
        } else {
            kept.push(OsString::from(a));
        }
        i += 1;
    }
    (kept, overrides)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::UnknownBlock(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn error_record(kind: &str, message: &str, code: i32) -> String {
    json!({"error": {"kind": kind, "message": message, "exit_code": code}}).to_string()
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    print!("{}", canonical_json(value)?);
    Ok(())
}

fn load_run_config(run: &RunArgs, overrides: &[(String, String)]) -> Result<RunConfig> {
    let base = match &run.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, canonical_json(value)?)?;
    Ok(path)
}

fn gen_data(run: &RunArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_run_config(run, overrides)?;
    let dir = cfg.output_dir(run.out.as_deref());
    let (train, test) = generate(&cfg.data)?;
    std::fs::create_dir_all(&dir)?;
    let train_path = dir.join("train.afds");
    let test_path = dir.join("test.afds");
    write_dataset(&train_path, &train)?;
    write_dataset(&test_path, &test)?;
    print_json(&json!({
        "train": {"path": train_path, "samples": train.len(), "checksum": format!("{:016x}", train.checksum())},
        "test": {"path": test_path, "samples": test.len(), "checksum": format!("{:016x}", test.checksum())},
        "bayes_ceiling": bayes_ceiling(&cfg.data)?,
    }))
}

fn train(run: &RunArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_run_config(run, overrides)?;
    let dir = cfg.output_dir(run.out.as_deref());
    let started = Instant::now();
    let (train, test) = generate(&cfg.data)?;
    let mut net = AsymFusionNet::build(&cfg.net)?;
    let (opt, log) = fit(&mut net, &train, &cfg.train, cfg.seed)?;
    let metrics = evaluate_net(&net, &test, cfg.eval_batch)?;
    let checkpoint = dir.join("checkpoint.bin");
    save_checkpoint(&net, Some(&opt), &checkpoint)?;
    let deterministic = json!({
        "config": cfg,
        "params": count_params(&net),
        "train_log": log,
        "metrics": metrics,
    });
    write_json(&dir, "metrics.json", &deterministic)?;
    let mut report = deterministic;
    report["checkpoint"] = json!(checkpoint);
    report["wall_seconds"] = json!(started.elapsed().as_secs_f64());
    write_json(&dir, "report.json", &report)?;
    print_json(&report)
}

fn eval(checkpoint: &Path, run: &RunArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_run_config(run, overrides)?;
    let (net, _) = load_checkpoint(checkpoint)?;
    let nc = net.config();
    if nc.modalities != cfg.data.modalities || nc.classes != cfg.data.classes {
        return Err(Error::Config(format!(
            "checkpoint has {} modalities and {} classes, data has {} and {}",
            nc.modalities, nc.classes, cfg.data.modalities, cfg.data.classes
        )));
    }
    let (_, test) = generate(&cfg.data)?;
    let metrics = evaluate_net(&net, &test, cfg.eval_batch)?;
    let dir = cfg.output_dir(run.out.as_deref());
    let report = json!({"checkpoint": checkpoint, "data": cfg.data, "metrics": metrics});
    write_json(&dir, "eval.json", &report)?;
    print_json(&report)
}

fn gradcheck(seed: u64) -> Result<bool> {
    let report = run_gradcheck_suite(seed)?;
    print_json(&report)?;
    Ok(report.passed)
}

fn verify_symmetry(block: &str, method: SymmetryMethod, trials: usize, seed: u64) -> Result<()> {
    let blocks: Vec<Block> = if block == "all" {
        Block::ALL.to_vec()
    } else {
        vec![block.parse()?]
    };
    let mut verdicts = Vec::new();
    for b in blocks {
        let construct = match method {
            SymmetryMethod::Auto => b.has_swap_construction(),
            SymmetryMethod::Construct => true,
            SymmetryMethod::Refute => false,
        };
        verdicts.push(if construct {
            verify_symmetric_by_construction(b, ProbeShape::default(), trials, seed)?
        } else {
            refute_symmetry_by_search(
                b,
                &RefuteOptions {
                    seed,
                    ..RefuteOptions::default()
                },
            )?
        });
    }
    print_json(&verdicts)
}

fn count(preset: Option<Preset>, modalities: Option<usize>, run: &RunArgs, overrides: &[(String, String)]) -> Result<()> {
    match preset {
        Some(p) => {
            let shape = match p {
                Preset::Resnet101 => ResNetShape::resnet101(),
                Preset::Resnet50 => ResNetShape::resnet50(),
            };
            print_json(&preset_report(&shape, modalities.unwrap_or(2), RESNET101_REFERENCE_TOTAL))
        }
        None => {
            let mut cfg = load_run_config(run, overrides)?;
            if let Some(m) = modalities {
                cfg.net.modalities = m;
                cfg.net.validate()?;
            }
            print_json(&count_params_config(&cfg.net))
        }
    }
}

fn experiment(name: ExperimentArg, seeds: u64, first: u64, run: &RunArgs, overrides: &[(String, String)]) -> Result<()> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let cfg = load_run_config(run, overrides)?;
    let name = ExperimentName::from(name);
    let dir = cfg.output_dir(run.out.as_deref()).join(name.label());
    let seeds: Vec<u64> = (first..first + seeds).collect();
    let report = run_experiment(name, &cfg, &seeds, &mut |line| eprintln!("{line}"))?;
    report.write(&dir)?;
    print!("{}", report.summary_csv());
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let (args, overrides) = split_overrides(args.into_iter().map(Into::into).collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", error_record("usage", &e.kind().to_string(), EXIT_USAGE));
                return EXIT_USAGE;
            }
            return 0;
        }
    };
    let result = match &cli.command {
        Command::GenData(run) => gen_data(run, &overrides),
        Command::Train(run) => train(run, &overrides),
        Command::Eval { checkpoint, run } => eval(checkpoint, run, &overrides),
        Command::Gradcheck { seed } => match gradcheck(*seed) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!(
                    "{}",
                    error_record("gradcheck", "at least one check exceeded its tolerance", EXIT_FAILURE)
                );
                return EXIT_FAILURE;
            }
            Err(e) => Err(e),
        },
        Command::VerifySymmetry {
            block,
            method,
            trials,
            seed,
        } => verify_symmetry(block, *method, *trials, *seed),
        Command::CountParams { preset, modalities, run } => count(*preset, *modalities, run, &overrides),
        Command::Experiment {
            name,
            seeds,
            first_seed,
            run,
        } => experiment(*name, *seeds, *first_seed, run, &overrides),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", error_record(e.kind(), &e.to_string(), code));
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_from_declared_flags() {
        let (kept, ov) = split_overrides(os(&[
            "asymfusion",
            "count-params",
            "--modalities",
            "3",
            "--net.fusion.shift=false",
            "--epochs",
            "2",
        ]));
        assert_eq!(kept, os(&["asymfusion", "count-params", "--modalities", "3"]));
        assert_eq!(
            ov,
            vec![
                ("net.fusion.shift".to_string(), "false".to_string()),
                ("epochs".to_string(), "2".to_string())
            ]
        );
    }

    #[test]
    fn non_configurable_subcommands_keep_everything() {
        let args = os(&["asymfusion", "gradcheck", "--epochs", "2"]);
        assert_eq!(split_overrides(args.clone()).0, args);
    }
}
