//! Executable probes for fusion-block symmetry.
//!
//! [`verify_symmetric_by_construction`] builds the swapped parameters
//! (`theta2`, `C2`) a symmetric block admits and checks the identity
//! numerically. [`refute_symmetry_by_search`] handles parameter-free blocks:
//! with `theta` empty the existential reduces to finding a pointwise
//! convolution `C2`, and the best such `C2` is a linear least-squares fit.
//! A large held-out residual is a witness that no `C2` exists.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ops::{channel_shuffle, shift_fuse, ShiftSpec, ShuffleConfig};
use crate::error::{Error, Result};
use crate::rng::Lcg64;
use crate::tensor::{self, conv2d, Tensor};

pub const CONSTRUCTIVE_TOL: f64 = 1e-9;
pub const REFUTE_TOL: f64 = 0.1;
pub const RIDGE: f64 = 1e-8;

/// Fusion blocks the probes know about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Average,
    Add,
    Concat,
    Attention,
    ChannelShuffle,
    ShiftFuse,
}

impl Block {
    pub const ALL: [Block; 6] = [
        Block::Average,
        Block::Add,
        Block::Concat,
        Block::Attention,
        Block::ChannelShuffle,
        Block::ShiftFuse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Average => "average",
            Block::Add => "add",
            Block::Concat => "concat",
            Block::Attention => "attention",
            Block::ChannelShuffle => "channel_shuffle",
            Block::ShiftFuse => "shift_fuse",
        }
    }

    pub fn is_parameter_free(self) -> bool {
        self != Block::Attention
    }

    /// Blocks with a known swap construction.
    pub fn has_swap_construction(self) -> bool {
        matches!(self, Block::Average | Block::Add | Block::Concat | Block::Attention)
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "average" | "avg" => Block::Average,
            "add" | "sum" => Block::Add,
            "concat" | "concatenation" => Block::Concat,
            "attention" => Block::Attention,
            "channel_shuffle" | "shuffle" => Block::ChannelShuffle,
            "shift_fuse" | "shift" | "pixel_shift" => Block::ShiftFuse,
            _ => return Err(Error::UnknownBlock(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    SymmetricConstructive,
    AsymmetricWitness,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct Witness {
    pub pair_index: usize,
    pub residual: f64,
    pub shape: [usize; 4],
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SymmetryVerdict {
    pub block: String,
    pub method: &'static str,
    pub verdict: Verdict,
    /// Relative L2 mismatch `||lhs - rhs|| / ||lhs||`.
    pub residual: f64,
    pub max_abs: f64,
    pub tolerance: f64,
    pub trials: usize,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
}

/// Feature-map geometry used by the probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ProbeShape {
    fn default() -> Self {
        Self {
            channels: 8,
            height: 6,
            width: 6,
        }
    }
}

impl ProbeShape {
    fn tensor_shape(&self) -> [usize; 4] {
        [1, self.channels, self.height, self.width]
    }
}

/// A single pointwise (1x1) convolutional layer with bias.
#[derive(Debug, Clone)]
pub struct PointwiseConv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl PointwiseConv {
    pub fn random(cout: usize, cin: usize, rng: &mut Lcg64) -> Self {
        Self {
            weight: Tensor::randn([cout, cin, 1, 1], 1.0 / (cin as f64).sqrt(), rng),
            bias: Tensor::randn([1, cout, 1, 1], 0.1, rng),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), 1, 0)
    }

    /// Same layer with its two halves of input channels exchanged.
    pub fn with_input_halves_swapped(&self) -> Self {
        let [cout, cin, _, _] = self.weight.shape();
        let half = cin / 2;
        let mut w = vec![0.0; cout * cin];
        for o in 0..cout {
            for i in 0..cin {
                let src = if i < half { i + half } else { i - half };
                w[o * cin + i] = self.weight.data()[o * cin + src];
            }
        }
        Self {
            weight: Tensor::from_parts([cout, cin, 1, 1], w),
            bias: self.bias.clone(),
        }
    }
}

/// Minimal attention fusion: the concatenated features pass a bottleneck
/// 1x1 convolution and a sigmoid gate, which scales each modality before
/// the two are summed.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub squeeze_w: Tensor,
    pub squeeze_b: Tensor,
    pub gate_w: Tensor,
    pub gate_b: Tensor,
}

impl AttentionParams {
    pub fn random(channels: usize, bottleneck: usize, rng: &mut Lcg64) -> Self {
        let c2 = 2 * channels;
        Self {
            squeeze_w: Tensor::randn([bottleneck, c2, 1, 1], 1.0 / (c2 as f64).sqrt(), rng),
            squeeze_b: Tensor::randn([1, bottleneck, 1, 1], 0.1, rng),
            gate_w: Tensor::randn([c2, bottleneck, 1, 1], 1.0 / (bottleneck as f64).sqrt(), rng),
            gate_b: Tensor::randn([1, c2, 1, 1], 0.1, rng),
        }
    }

    pub fn fuse(&self, x1: &Tensor, x2: &Tensor) -> Result<Tensor> {
        let c = x1.c();
        let z = tensor::channel_concat(x1, x2)?;
        let hidden = tensor::relu(&conv2d(&z, &self.squeeze_w, Some(&self.squeeze_b), 1, 0)?);
        let gate = tensor::sigmoid(&conv2d(&hidden, &self.gate_w, Some(&self.gate_b), 1, 0)?);
        let g1 = tensor::channel_slice(&gate, 1, c)?;
        let g2 = tensor::channel_slice(&gate, c + 1, 2 * c)?;
        tensor::add(&tensor::mul(&g1, x1)?, &tensor::mul(&g2, x2)?)
    }

    /// Parameters with the two modality-specific groups exchanged: input
    /// columns of the squeeze layer and output rows of the gate layer.
    pub fn swapped(&self) -> Self {
        let [r, c2, _, _] = self.squeeze_w.shape();
        let c = c2 / 2;
        let mut sw = vec![0.0; r * c2];
        for o in 0..r {
            for i in 0..c2 {
                let src = (i + c) % c2;
                sw[o * c2 + i] = self.squeeze_w.data()[o * c2 + src];
            }
        }
        let mut gw = vec![0.0; c2 * r];
        let mut gb = vec![0.0; c2];
        for o in 0..c2 {
            let src = (o + c) % c2;
            gw[o * r..(o + 1) * r].copy_from_slice(&self.gate_w.data()[src * r..(src + 1) * r]);
            gb[o] = self.gate_b.data()[src];
        }
        Self {
            squeeze_w: Tensor::from_parts([r, c2, 1, 1], sw),
            squeeze_b: self.squeeze_b.clone(),
            gate_w: Tensor::from_parts([c2, r, 1, 1], gw),
            gate_b: Tensor::from_parts([1, c2, 1, 1], gb),
        }
    }
}

/// Evaluates a parameter-free block.
fn fuse_free(block: Block, x1: &Tensor, x2: &Tensor, split: usize, spec: &ShiftSpec) -> Result<Tensor> {
    Ok(match block {
        Block::Average => tensor::scale(&tensor::add(x1, x2)?, 0.5),
        Block::Add => tensor::add(x1, x2)?,
        Block::Concat => tensor::channel_concat(x1, x2)?,
        Block::ChannelShuffle => channel_shuffle(x1, x2, split)?.0,
        Block::ShiftFuse => shift_fuse(x1, x2, spec)?.0,
        Block::Attention => {
            return Err(Error::Config(
                "attention has internal parameters; use the constructive check".into(),
            ))
        }
    })
}

fn output_channels(block: Block, channels: usize) -> usize {
    if block == Block::Concat {
        2 * channels
    } else {
        channels
    }
}

/// Checks `C1(F(x1, x2; theta1)) == C2(F(x2, x1; theta2))` with the swap
/// construction, over `trials` seeded draws of `theta1`, `C1` and inputs.
pub fn verify_symmetric_by_construction(
    block: Block,
    shape: ProbeShape,
    trials: usize,
    seed: u64,
) -> Result<SymmetryVerdict> {
    if !block.has_swap_construction() {
        return Err(Error::UnknownBlock(format!(
            "{block} has no swap construction (try the refuter)"
        )));
    }
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let c = shape.channels;
    let mut max_abs: f64 = 0.0;
    let mut residual: f64 = 0.0;
    for t in 0..trials {
        let mut rng = Lcg64::derived(seed, t as u64 + 1);
        let c1 = PointwiseConv::random(c, output_channels(block, c), &mut rng);
        let attn = (block == Block::Attention).then(|| AttentionParams::random(c, (c / 2).max(1), &mut rng));
        let x1 = Tensor::randn(shape.tensor_shape(), 1.0, &mut rng);
        let x2 = Tensor::randn(shape.tensor_shape(), 1.0, &mut rng);

        let (lhs, rhs) = match block {
            Block::Average | Block::Add => {
                let f12 = fuse_free(block, &x1, &x2, 1, &ShiftSpec::default())?;
                let f21 = fuse_free(block, &x2, &x1, 1, &ShiftSpec::default())?;
                (c1.apply(&f12)?, c1.apply(&f21)?)
            }
            Block::Concat => {
                let c2 = c1.with_input_halves_swapped();
                (
                    c1.apply(&tensor::channel_concat(&x1, &x2)?)?,
                    c2.apply(&tensor::channel_concat(&x2, &x1)?)?,
                )
            }
            Block::Attention => {
                let theta1 = attn.expect("drawn above");
                let theta2 = theta1.swapped();
                (c1.apply(&theta1.fuse(&x1, &x2)?)?, c1.apply(&theta2.fuse(&x2, &x1)?)?)
            }
            _ => unreachable!(),
        };
        max_abs = max_abs.max(lhs.max_abs_diff(&rhs));
        let diff = tensor::add(&lhs, &tensor::scale(&rhs, -1.0))?;
        residual = residual.max(diff.l2_norm() / lhs.l2_norm().max(f64::MIN_POSITIVE));
    }
    let verdict = if max_abs < CONSTRUCTIVE_TOL {
        Verdict::SymmetricConstructive
    } else {
        Verdict::Inconclusive
    };
    let swap_rule = match block {
        Block::Average | Block::Add => "C2 = C1",
        Block::Concat => "C2 = C1 with input-channel halves exchanged",
        _ => "theta2 = theta1 with modality parameter groups exchanged, C2 = C1",
    };
    Ok(SymmetryVerdict {
        block: block.name().to_string(),
        method: "constructive",
        verdict,
        residual,
        max_abs,
        tolerance: CONSTRUCTIVE_TOL,
        trials,
        notes: vec![swap_rule.to_string()],
        witness: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefuteOptions {
    pub shape: ProbeShape,
    /// Input pairs used to fit `C2`.
    pub samples: usize,
    /// Held-out pairs used to measure the residual.
    pub holdout: usize,
    pub tolerance: f64,
    /// Force `x1 = 0` in every pair.
    pub zero_first: bool,
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for RefuteOptions {
    fn default() -> Self {
        Self {
            shape: ProbeShape::default(),
            samples: 256,
            holdout: 64,
            tolerance: REFUTE_TOL,
            zero_first: false,
            split_fraction: ShuffleConfig::default().split_fraction,
            seed: 0,
        }
    }
}

struct Pair {
    x1: Tensor,
    x2: Tensor,
    target: Tensor,
    regressors: Tensor,
}

/// Fits the best pointwise `C2` (weights plus bias) mapping
/// `F(x2, x1)` onto `C1(F(x1, x2))` and reports the held-out residual.
pub fn refute_symmetry_by_search(block: Block, opts: &RefuteOptions) -> Result<SymmetryVerdict> {
    if !block.is_parameter_free() {
        return Err(Error::Config(format!(
            "refuter needs a parameter-free block; {block} has internal parameters"
        )));
    }
    if opts.samples == 0 || opts.holdout == 0 {
        return Err(Error::Config("refuter needs samples >= 1 and holdout >= 1".into()));
    }
    let c = opts.shape.channels;
    let split = ShuffleConfig {
        split_fraction: opts.split_fraction,
    }
    .split_point(c)?;
    let spec = ShiftSpec::default();
    let d = output_channels(block, c);
    let mut rng = Lcg64::derived(opts.seed, 0);
    let c1 = PointwiseConv::random(c, d, &mut rng);

    let make_pair = |index: usize| -> Result<Pair> {
        let mut rng = Lcg64::derived(opts.seed, index as u64 + 1);
        let mut x1 = Tensor::randn(opts.shape.tensor_shape(), 1.0, &mut rng);
        let x2 = Tensor::randn(opts.shape.tensor_shape(), 1.0, &mut rng);
        if opts.zero_first {
            x1 = Tensor::zeros(x1.shape());
        }
        let target = c1.apply(&fuse_free(block, &x1, &x2, split, &spec)?)?;
        let regressors = fuse_free(block, &x2, &x1, split, &spec)?;
        Ok(Pair {
            x1,
            x2,
            target,
            regressors,
        })
    };

    // Normal equations over every pixel of every fit pair; the last
    // regressor column is the constant 1 for the bias.
    let cols = d + 1;
    let mut xtx = DMatrix::<f64>::zeros(cols, cols);
    let mut xty = DMatrix::<f64>::zeros(cols, c);
    let mut row = DVector::<f64>::zeros(cols);
    for i in 0..opts.samples {
        let p = make_pair(i)?;
        let hw = opts.shape.height * opts.shape.width;
        for px in 0..hw {
            for k in 0..d {
                row[k] = p.regressors.data()[k * hw + px];
            }
            row[d] = 1.0;
            xtx.ger(1.0, &row, &row, 1.0);
            for o in 0..c {
                let y = p.target.data()[o * hw + px];
                for k in 0..cols {
                    xty[(k, o)] += row[k] * y;
                }
            }
        }
    }

    let mut notes = Vec::new();
    let coeffs = match xtx.clone().cholesky() {
        Some(ch) => ch.solve(&xty),
        None => {
            notes.push(format!("normal equations singular; ridge {RIDGE:e} applied"));
            let ridged = xtx + DMatrix::<f64>::identity(cols, cols) * RIDGE;
            ridged
                .cholesky()
                .ok_or_else(|| Error::Config("normal equations singular even with ridge".into()))?
                .solve(&xty)
        }
    };

    let hw = opts.shape.height * opts.shape.width;
    let (mut err2, mut tot2) = (0.0, 0.0);
    let mut max_abs: f64 = 0.0;
    let mut worst: Option<(usize, f64, Pair)> = None;
    for j in 0..opts.holdout {
        let index = opts.samples + j;
        let p = make_pair(index)?;
        let (mut e2, mut t2) = (0.0, 0.0);
        for px in 0..hw {
            for o in 0..c {
                let mut pred = coeffs[(d, o)];
                for k in 0..d {
                    pred += coeffs[(k, o)] * p.regressors.data()[k * hw + px];
                }
                let y = p.target.data()[o * hw + px];
                e2 += (y - pred) * (y - pred);
                t2 += y * y;
                max_abs = max_abs.max((y - pred).abs());
            }
        }
        err2 += e2;
        tot2 += t2;
        let r = (e2 / t2.max(f64::MIN_POSITIVE)).sqrt();
        if worst.as_ref().is_none_or(|w| r > w.1) {
            worst = Some((index, r, p));
        }
    }
    let residual = (err2 / tot2.max(f64::MIN_POSITIVE)).sqrt();
    let asymmetric = residual > opts.tolerance;
    if opts.zero_first {
        notes.push("x1 forced to zero".into());
    }
    let witness = if asymmetric {
        worst.map(|(pair_index, residual, p)| Witness {
            pair_index,
            residual,
            shape: p.x1.shape(),
            x1: p.x1.into_data(),
            x2: p.x2.into_data(),
        })
    } else {
        None
    };
    Ok(SymmetryVerdict {
        block: block.name().to_string(),
        method: "least_squares_refutation",
        verdict: if asymmetric {
            Verdict::AsymmetricWitness
        } else {
            Verdict::Inconclusive
        },
        residual,
        max_abs,
        tolerance: opts.tolerance,
        trials: opts.samples,
        notes,
        witness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_names_round_trip() {
        for b in Block::ALL {
            assert_eq!(b.name().parse::<Block>().unwrap(), b);
        }
        assert!(matches!("mmf".parse::<Block>(), Err(Error::UnknownBlock(_))));
    }

    #[test]
    fn average_is_exactly_symmetric() {
        let v = verify_symmetric_by_construction(Block::Average, ProbeShape::default(), 5, 1).unwrap();
        assert_eq!(v.verdict, Verdict::SymmetricConstructive);
        assert_eq!(v.max_abs, 0.0);
    }

    #[test]
    fn concat_swap_construction() {
        let v = verify_symmetric_by_construction(Block::Concat, ProbeShape::default(), 20, 2).unwrap();
        assert_eq!(v.verdict, Verdict::SymmetricConstructive);
        assert!(v.max_abs < 1e-12, "{}", v.max_abs);
    }

    #[test]
    fn attention_swap_construction() {
        let v = verify_symmetric_by_construction(Block::Attention, ProbeShape::default(), 20, 3).unwrap();
        assert_eq!(v.verdict, Verdict::SymmetricConstructive);
        assert!(v.max_abs < 1e-9);
    }

    #[test]
    fn unswapped_attention_is_not_matched() {
        // Without exchanging the parameter groups the identity fails, which
        // shows the check is not vacuous.
        let mut rng = Lcg64::new(4);
        let theta = AttentionParams::random(4, 2, &mut rng);
        let x1 = Tensor::randn([1, 4, 3, 3], 1.0, &mut rng);
        let x2 = Tensor::randn([1, 4, 3, 3], 1.0, &mut rng);
        let a = theta.fuse(&x1, &x2).unwrap();
        let b = theta.fuse(&x2, &x1).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
        assert!(a.max_abs_diff(&theta.swapped().fuse(&x2, &x1).unwrap()) < 1e-12);
    }

    #[test]
    fn shuffle_has_no_constructive_rule() {
        assert!(verify_symmetric_by_construction(Block::ChannelShuffle, ProbeShape::default(), 1, 0).is_err());
        assert!(refute_symmetry_by_search(Block::Attention, &RefuteOptions::default()).is_err());
    }

    #[test]
    fn refuter_recovers_average() {
        let opts = RefuteOptions {
            samples: 64,
            holdout: 16,
            ..Default::default()
        };
        let v = refute_symmetry_by_search(Block::Average, &opts).unwrap();
        assert_eq!(v.verdict, Verdict::Inconclusive);
        assert!(v.residual < 1e-9, "{}", v.residual);
        assert!(v.witness.is_none());
    }

    #[test]
    fn refuter_finds_shuffle_witness() {
        let opts = RefuteOptions {
            samples: 64,
            holdout: 16,
            ..Default::default()
        };
        let v = refute_symmetry_by_search(Block::ChannelShuffle, &opts).unwrap();
        assert_eq!(v.verdict, Verdict::AsymmetricWitness);
        assert!(v.residual > REFUTE_TOL);
        let w = v.witness.unwrap();
        assert!(w.residual >= v.residual * 0.5);
        assert!(w.pair_index >= opts.samples);
    }
}
