use std::collections::BTreeMap;

use serde::Serialize;

use crate::autodiff::{grad_check, GradReport, Graph, NodeId, DEFAULT_STEP};
use crate::error::{Error, Result};
use crate::fusion::ShiftSpec;
use crate::network::{distillation_loss_graph, AsymFusionNet, LossConfig, Mode, NetConfig};
use crate::norm::{ModalityNorm, NormMode};
use crate::rng::Lcg64;
use crate::tensor::{softmax_channels, LabelMap, Tensor};

pub const OP_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-5;
/// Draws with a relu input closer than this to zero are skipped before
/// the check; draws whose stencil still crosses a relu kink are skipped
/// after it.
pub const RELU_MARGIN: f64 = 1e-3;
const MAX_RESAMPLES: u64 = 64;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub report: GradReport,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradSuiteReport {
    pub entries: Vec<GradCheckEntry>,
    pub passed: bool,
}

fn entry(report: GradReport, tolerance: f64) -> GradCheckEntry {
    GradCheckEntry {
        passed: report.passes(tolerance),
        report,
        tolerance,
    }
}

fn labels(rng: &mut Lcg64, n: usize, h: usize, w: usize, k: usize) -> LabelMap {
    let data = (0..n * h * w).map(|_| rng.below(k) as u8).collect();
    LabelMap::new(n, h, w, data).expect("sizes match")
}

/// Inputs whose entries all stay at least `margin` away from zero.
fn away_from_zero(shape: [usize; 4], rng: &mut Lcg64, margin: f64) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin - v.abs() } else { margin + v.abs() };
        }
    }
    t
}

/// Checks for the individual differentiable operations.
pub fn op_checks(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = Lcg64::derived(seed, 0x0b5);
    let mut out = Vec::new();

    let x = Tensor::randn([2, 3, 5, 5], 1.0, &mut rng);
    let w = Tensor::randn([4, 3, 3, 3], 0.5, &mut rng);
    let b = Tensor::randn([1, 4, 1, 1], 0.5, &mut rng);
    out.push(grad_check("conv2d 3x3 stride 2 pad 1", &[x, w, b], DEFAULT_STEP, |g, i| {
        g.conv2d(i[0], i[1], Some(i[2]), 2, 1)
    })?);

    let x = Tensor::randn([2, 4, 3, 3], 1.0, &mut rng);
    let w = Tensor::randn([5, 4, 1, 1], 0.5, &mut rng);
    out.push(grad_check("conv2d 1x1", &[x, w], DEFAULT_STEP, |g, i| {
        g.conv2d(i[0], i[1], None, 1, 0)
    })?);

    for (label, mode, s) in [
        ("modality norm train, private set", NormMode::Private, 1),
        ("modality norm train, shared set", NormMode::Shared, 0),
    ] {
        let norm = ModalityNorm::new(3, 2, mode)?;
        let x = Tensor::randn([2, 3, 3, 3], 1.5, &mut rng).map(|v| v + 0.3);
        let gamma = Tensor::randn([1, 3, 1, 1], 1.0, &mut rng);
        let beta = Tensor::randn([1, 3, 1, 1], 1.0, &mut rng);
        out.push(grad_check(label, &[x, gamma, beta], DEFAULT_STEP, |g, i| {
            norm.clone().forward_node(g, i[0], s, i[1], i[2], true)
        })?);
    }

    let a = Tensor::randn([2, 6, 3, 3], 1.0, &mut rng);
    let b = Tensor::randn([2, 6, 3, 3], 1.0, &mut rng);
    out.push(grad_check("channel shuffle", &[a, b], DEFAULT_STEP, |g, i| {
        let (y1, y2) = g.channel_shuffle(i[0], i[1], 4)?;
        g.channel_concat(y1, y2)
    })?);

    let spec = ShiftSpec::default();
    let x = Tensor::randn([2, 8, 4, 4], 1.0, &mut rng);
    out.push(grad_check("pixel shift", &[x], DEFAULT_STEP, |g, i| g.pixel_shift(i[0], &spec))?);

    let a = Tensor::randn([2, 8, 4, 4], 1.0, &mut rng);
    let b = Tensor::randn([2, 8, 4, 4], 1.0, &mut rng);
    out.push(grad_check("shift fusion", &[a, b], DEFAULT_STEP, |g, i| {
        let s2 = g.pixel_shift(i[1], &spec)?;
        let s1 = g.pixel_shift(i[0], &spec)?;
        let f1 = g.add(i[0], s2)?;
        let f2 = g.add(i[1], s1)?;
        g.channel_concat(f1, f2)
    })?);

    let logits = Tensor::randn([2, 4, 3, 3], 1.5, &mut rng);
    let lab = labels(&mut rng, 2, 3, 3, 4);
    out.push(grad_check("softmax cross-entropy", &[logits.clone()], DEFAULT_STEP, |g, i| {
        g.softmax_ce(i[0], &lab, None)
    })?);
    out.push(grad_check("softmax cross-entropy, ignore index", &[logits], DEFAULT_STEP, |g, i| {
        g.softmax_ce(i[0], &lab, Some(1))
    })?);

    let logits = Tensor::randn([2, 4, 3, 3], 1.0, &mut rng);
    let target = softmax_channels(&Tensor::randn([2, 4, 3, 3], 1.0, &mut rng));
    out.push(grad_check("kl to fixed target", &[logits], DEFAULT_STEP, |g, i| {
        g.kl_to_target(i[0], &target)
    })?);

    let w = Tensor::randn([1, 2, 1, 1], 1.0, &mut rng);
    let l1 = Tensor::randn([2, 3, 2, 2], 1.0, &mut rng);
    let l2 = Tensor::randn([2, 3, 2, 2], 1.0, &mut rng);
    let lab = labels(&mut rng, 2, 2, 2, 3);
    out.push(grad_check("ensemble mixture nll", &[w, l1, l2], DEFAULT_STEP, |g, i| {
        let p1 = g.softmax(i[1]);
        let p2 = g.softmax(i[2]);
        let m = g.mixture(i[0], &[p1, p2])?;
        g.nll(m, &lab, None)
    })?);

    let x = Tensor::randn([1, 3, 2, 3], 1.0, &mut rng);
    out.push(grad_check("upsample 2x", &[x], DEFAULT_STEP, |g, i| Ok(g.upsample2x(i[0])))?);

    let x = away_from_zero([2, 3, 3, 3], &mut rng, 0.05);
    out.push(grad_check("relu", &[x], DEFAULT_STEP, |g, i| Ok(g.relu(i[0])))?);

    let a = Tensor::randn([2, 3, 3, 3], 1.0, &mut rng);
    let b = Tensor::randn([2, 3, 3, 3], 1.0, &mut rng);
    out.push(grad_check("sigmoid gate product", &[a, b], DEFAULT_STEP, |g, i| {
        let s = g.sigmoid(i[1]);
        g.mul(i[0], s)
    })?);

    let a = Tensor::randn([2, 3, 2, 2], 1.0, &mut rng);
    let b = Tensor::randn([2, 5, 2, 2], 1.0, &mut rng);
    out.push(grad_check("channel concat and slice", &[a, b], DEFAULT_STEP, |g, i| {
        let c = g.channel_concat(i[0], i[1])?;
        let s = g.channel_slice(c, 2, 6)?;
        Ok(g.scale(s, 1.5))
    })?);
    Ok(out)
}

/// Two stages of width 8, two modalities, two input channels, 4x4 inputs.
/// With a single input channel the 1x1 stem followed by a normalization
/// is invariant to each stem weight up to eps, leaving true gradients
/// below finite-difference resolution.
pub fn tiny_net_config(seed: u64) -> NetConfig {
    NetConfig {
        in_channels: 2,
        classes: 3,
        decoder_width: 4,
        seed,
        ..NetConfig::with_widths(&[8, 8])
    }
}

/// End-to-end check through the whole network and loss, every parameter
/// and input a leaf. The KL target is fixed so the loss is a smooth
/// function of the leaves; draws whose stencil crosses a relu kink are
/// rejected.
pub fn network_check(seed: u64) -> Result<GradReport> {
    for attempt in 0..MAX_RESAMPLES {
        let cfg = tiny_net_config(seed.wrapping_mul(MAX_RESAMPLES).wrapping_add(attempt));
        let net = AsymFusionNet::build(&cfg)?;
        let mut rng = Lcg64::derived(cfg.seed, 0xe2e);
        let (n, h, w) = (2, 4, 4);
        let inputs: Vec<Tensor> = (0..cfg.modalities)
            .map(|_| Tensor::randn([n, cfg.in_channels, h, w], 1.0, &mut rng))
            .collect();
        let lab = labels(&mut rng, n, h, w, cfg.classes);
        let target = softmax_channels(&Tensor::randn([n, cfg.classes, h, w], 1.0, &mut rng));
        let keys = net.param_keys();
        let loss_cfg = LossConfig::default();

        let build = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
            let leaves: BTreeMap<_, _> = keys.iter().copied().zip(ids.iter().copied()).collect();
            let fwd = net.forward_graph(g, &ids[keys.len()..], Mode::Train, leaves)?;
            Ok(distillation_loss_graph(g, &fwd.logits, fwd.ensemble, &lab, &loss_cfg, Some(&target))?.total)
        };

        let mut leaves: Vec<Tensor> = keys.iter().map(|&k| net.param(k).clone()).collect();
        leaves.extend(inputs);
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| g.param(t.clone())).collect();
        build(&mut g, &ids)?;
        if g.relu_margin() < RELU_MARGIN {
            continue;
        }
        let mut report = grad_check("tiny network end to end", &leaves, DEFAULT_STEP, build)?;
        if report.kink_crossings > 0 {
            continue;
        }
        report.op = format!("tiny network end to end (seed {})", cfg.seed);
        return Ok(report);
    }
    Err(Error::Config(format!(
        "no draw stayed clear of relu kinks in {MAX_RESAMPLES} attempts"
    )))
}

/// Every registered check with its tolerance.
pub fn run_gradcheck_suite(seed: u64) -> Result<GradSuiteReport> {
    let mut entries: Vec<GradCheckEntry> = op_checks(seed)?
        .into_iter()
        .map(|r| entry(r, OP_TOLERANCE))
        .collect();
    entries.push(entry(network_check(seed)?, NETWORK_TOLERANCE));
    let passed = entries.iter().all(|e| e.passed);
    Ok(GradSuiteReport { entries, passed })
}
