use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ShiftSpec, ShuffleConfig, DEFAULT_SPLIT_FRACTION};
use crate::norm::{NormMode, DEFAULT_EPS, DEFAULT_MOMENTUM};

/// Which branches receive fused features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Bidirectional,
    /// Modality 1 donates, modality 2 receives.
    #[serde(alias = "1->2", alias = "1to2")]
    OneToTwo,
    /// Modality 2 donates, modality 1 receives.
    #[serde(alias = "2->1", alias = "2to1")]
    TwoToOne,
    None,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::Bidirectional => "bidirectional",
            Direction::OneToTwo => "1->2",
            Direction::TwoToOne => "2->1",
            Direction::None => "none",
        }
    }

    /// `(receiver, donor)` pairs for `s` branches, 0-based. Bidirectional
    /// fusion with more than two branches uses a ring: branch `s` receives
    /// from branch `(s + 1) mod S`.
    pub fn pairs(self, s: usize) -> Vec<(usize, usize)> {
        if s < 2 {
            return Vec::new();
        }
        match self {
            Direction::Bidirectional => (0..s).map(|r| (r, (r + 1) % s)).collect(),
            Direction::OneToTwo => vec![(1, 0)],
            Direction::TwoToOne => vec![(0, 1)],
            Direction::None => Vec::new(),
        }
    }
}

/// How features are exchanged at a fusion site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    /// Channel shuffle and pixel shift inside the residual block.
    #[serde(alias = "asym")]
    AsymFusion,
    Average,
    Add,
    Concat,
    Attention,
}

impl FusionMethod {
    pub fn label(self) -> &'static str {
        match self {
            FusionMethod::AsymFusion => "asymfusion",
            FusionMethod::Average => "average",
            FusionMethod::Add => "add",
            FusionMethod::Concat => "concat",
            FusionMethod::Attention => "attention",
        }
    }
}

/// Encoder parameter sharing across modality branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingStrategy {
    #[serde(alias = "individual")]
    IndividualConvsIndividualNorms,
    #[serde(alias = "shared")]
    SharedConvsSharedNorms,
    #[serde(alias = "private")]
    SharedConvsIndividualNorms,
}

impl SharingStrategy {
    pub fn label(self) -> &'static str {
        match self {
            SharingStrategy::IndividualConvsIndividualNorms => "individual_convs_individual_norms",
            SharingStrategy::SharedConvsSharedNorms => "shared_convs_shared_norms",
            SharingStrategy::SharedConvsIndividualNorms => "shared_convs_individual_norms",
        }
    }

    pub(crate) fn conv_copies(self, modalities: usize) -> usize {
        match self {
            SharingStrategy::IndividualConvsIndividualNorms => modalities,
            _ => 1,
        }
    }

    pub(crate) fn encoder_norm_mode(self) -> NormMode {
        match self {
            SharingStrategy::SharedConvsSharedNorms => NormMode::Shared,
            _ => NormMode::Private,
        }
    }

    /// Separate networks per modality duplicate the decoder norms as well.
    pub(crate) fn decoder_norm_mode(self) -> NormMode {
        match self {
            SharingStrategy::IndividualConvsIndividualNorms => NormMode::Private,
            _ => NormMode::Shared,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub shuffle: bool,
    pub shift: bool,
    /// Keep the cross-branch additions but skip the shift itself.
    pub cross_skip_only: bool,
    pub direction: Direction,
    pub split_fraction: f64,
    pub shift_spec: ShiftSpec,
    /// Bottleneck width of the attention block; 0 means half the channels.
    pub attention_bottleneck: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            method: FusionMethod::AsymFusion,
            shuffle: true,
            shift: true,
            cross_skip_only: false,
            direction: Direction::Bidirectional,
            split_fraction: DEFAULT_SPLIT_FRACTION,
            shift_spec: ShiftSpec::default(),
            attention_bottleneck: 0,
        }
    }
}

impl FusionConfig {
    pub fn disabled() -> Self {
        Self {
            shuffle: false,
            shift: false,
            direction: Direction::None,
            ..Self::default()
        }
    }

    pub fn shuffle_config(&self) -> ShuffleConfig {
        ShuffleConfig {
            split_fraction: self.split_fraction,
        }
    }
}

/// One encoder stage: `blocks` bottleneck blocks, the first of which
/// applies `stride` and a projection shortcut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub blocks: usize,
    pub mid: usize,
    pub out: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub modalities: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub stem_width: usize,
    pub stages: Vec<StageConfig>,
    pub decoder_width: usize,
    pub sharing: SharingStrategy,
    pub fusion: FusionConfig,
    pub norm_eps: f64,
    pub norm_momentum: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            modalities: 2,
            in_channels: 1,
            classes: 5,
            stem_width: 8,
            stages: vec![
                StageConfig {
                    blocks: 1,
                    mid: 8,
                    out: 16,
                    stride: 2,
                },
                StageConfig {
                    blocks: 1,
                    mid: 16,
                    out: 32,
                    stride: 2,
                },
                StageConfig {
                    blocks: 1,
                    mid: 16,
                    out: 32,
                    stride: 2,
                },
            ],
            decoder_width: 8,
            sharing: SharingStrategy::SharedConvsIndividualNorms,
            fusion: FusionConfig::default(),
            norm_eps: DEFAULT_EPS,
            norm_momentum: DEFAULT_MOMENTUM,
            seed: 0,
        }
    }
}

/// Resolved wiring of one residual block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FusionBlockConfig {
    pub in_channels: usize,
    pub mid: usize,
    pub out: usize,
    pub stride: usize,
    pub shuffle: Option<ShuffleConfig>,
    pub shift: Option<ShiftSpec>,
    pub cross_skip_only: bool,
    pub direction: Direction,
    pub method: FusionMethod,
}

impl FusionBlockConfig {
    pub fn is_fusion_site(&self) -> bool {
        self.direction != Direction::None
    }

    pub fn split_point(&self) -> Result<Option<usize>> {
        self.shuffle.map(|s| s.split_point(self.mid)).transpose()
    }

    /// Cross-branch addition after the 3x3 convolution.
    pub fn cross_add(&self) -> bool {
        self.shift.is_some() || self.cross_skip_only
    }
}

impl NetConfig {
    /// A four-stage configuration with the given output widths and
    /// bottleneck width `out / 2`; the first stage keeps the resolution.
    pub fn with_widths(widths: &[usize]) -> Self {
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &out)| StageConfig {
                blocks: 1,
                mid: (out / 2).max(4),
                out,
                stride: if i == 0 { 1 } else { 2 },
            })
            .collect();
        Self {
            stem_width: widths.first().copied().unwrap_or(8),
            stages,
            ..Self::default()
        }
    }

    /// Fusion is effective only with at least two branches and a direction.
    pub fn fusion_active(&self) -> bool {
        self.modalities >= 2 && self.fusion.direction != Direction::None
    }

    pub fn downsampling_factor(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.modalities == 0 {
            return bad("modalities must be >= 1".into());
        }
        if self.in_channels == 0 || self.stem_width == 0 || self.decoder_width == 0 {
            return bad("widths must be >= 1".into());
        }
        if !(2..=255).contains(&self.classes) {
            return bad(format!("classes must be in [2, 255], got {}", self.classes));
        }
        if self.stages.len() < 2 {
            return bad(format!("need at least 2 stages, got {}", self.stages.len()));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.blocks == 0 || st.mid == 0 || st.out == 0 {
                return bad(format!("stage {}: blocks and widths must be >= 1", i + 1));
            }
            if st.stride != 1 && st.stride != 2 {
                return bad(format!("stage {}: stride must be 1 or 2", i + 1));
            }
        }
        if !(self.norm_eps > 0.0) || !(0.0..=1.0).contains(&self.norm_momentum) {
            return bad("norm eps must be > 0 and momentum in [0, 1]".into());
        }
        let f = &self.fusion;
        if matches!(f.direction, Direction::OneToTwo | Direction::TwoToOne) && self.modalities != 2 {
            return bad(format!(
                "direction {} needs exactly 2 modalities, got {}",
                f.direction.label(),
                self.modalities
            ));
        }
        if self.fusion_active() && f.method == FusionMethod::AsymFusion {
            f.shift_spec.validate()?;
            for (i, st) in self.stages.iter().enumerate() {
                if f.shuffle {
                    f.shuffle_config().split_point(st.mid)?;
                }
                if f.shift && !f.cross_skip_only && st.mid % 4 != 0 {
                    return bad(format!(
                        "stage {}: mid width {} must be divisible by 4 for pixel shift",
                        i + 1,
                        st.mid
                    ));
                }
            }
        }
        Ok(())
    }

    /// Block wiring for block `block` of stage `stage` (both 0-based).
    pub fn block_config(&self, stage: usize, block: usize) -> FusionBlockConfig {
        let st = self.stages[stage];
        let in_channels = if block > 0 {
            st.out
        } else if stage == 0 {
            self.stem_width
        } else {
            self.stages[stage - 1].out
        };
        let site = self.fusion_active() && block + 1 == st.blocks;
        let asym = site && self.fusion.method == FusionMethod::AsymFusion;
        FusionBlockConfig {
            in_channels,
            mid: st.mid,
            out: st.out,
            stride: if block == 0 { st.stride } else { 1 },
            shuffle: (asym && self.fusion.shuffle).then(|| self.fusion.shuffle_config()),
            shift: (asym && self.fusion.shift && !self.fusion.cross_skip_only).then_some(self.fusion.shift_spec),
            cross_skip_only: asym && self.fusion.cross_skip_only,
            direction: if site { self.fusion.direction } else { Direction::None },
            method: self.fusion.method,
        }
    }
}
