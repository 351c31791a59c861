//! Parameter accounting. Running statistics are buffers and never count.

use serde::Serialize;

use super::config::{FusionMethod, NetConfig};
use super::model::{AsymFusionNet, ParamKey};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    pub modalities: usize,
    /// Convolution weights and biases of encoder and decoder, all copies.
    pub conv: usize,
    /// Affine parameters of one encoder norm set (`2 * sum of channels`).
    pub encoder_norm_set: usize,
    pub encoder_norm_sets: usize,
    pub decoder_norm_set: usize,
    pub decoder_norm_sets: usize,
    pub ensemble: usize,
    /// Parameters of symmetric fusion blocks (concat, attention).
    pub fusion: usize,
    pub total: usize,
    /// Same configuration with a single modality.
    pub unimodal_total: usize,
    pub overhead: f64,
    pub learnable_tensors: usize,
    pub buffer_tensors: usize,
}

impl ParamReport {
    pub fn extra(&self) -> usize {
        self.total - self.unimodal_total
    }
}

fn conv_count(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k
}

struct Tally {
    conv: usize,
    enc_norm_channels: usize,
    dec_norm_channels: usize,
    fusion: usize,
    conv_layers: usize,
    biased_layers: usize,
    enc_norms: usize,
    dec_norms: usize,
    fusion_layers: usize,
}

/// Walks the layer table of `cfg` the way the builder does.
fn tally(cfg: &NetConfig) -> Tally {
    let mut t = Tally {
        conv: conv_count(cfg.in_channels, cfg.stem_width, 1),
        enc_norm_channels: cfg.stem_width,
        dec_norm_channels: 0,
        fusion: 0,
        conv_layers: 1,
        biased_layers: 0,
        enc_norms: 1,
        dec_norms: 0,
        fusion_layers: 0,
    };
    for (si, st) in cfg.stages.iter().enumerate() {
        for bi in 0..st.blocks {
            let bc = cfg.block_config(si, bi);
            t.conv += conv_count(bc.in_channels, bc.mid, 1) + conv_count(bc.mid, bc.mid, 3) + conv_count(bc.mid, bc.out, 1);
            t.enc_norm_channels += 2 * bc.mid + bc.out;
            t.conv_layers += 3;
            t.enc_norms += 3;
            if bi == 0 {
                t.conv += conv_count(bc.in_channels, bc.out, 1);
                t.enc_norm_channels += bc.out;
                t.conv_layers += 1;
                t.enc_norms += 1;
            }
            if bc.is_fusion_site() {
                let receivers = bc.direction.pairs(cfg.modalities).len();
                let per = match bc.method {
                    FusionMethod::Concat => {
                        t.fusion_layers += 1;
                        conv_count(2 * bc.out, bc.out, 1) + bc.out
                    }
                    FusionMethod::Attention => {
                        let r = if cfg.fusion.attention_bottleneck > 0 {
                            cfg.fusion.attention_bottleneck
                        } else {
                            (bc.out / 2).max(1)
                        };
                        t.fusion_layers += 2;
                        conv_count(2 * bc.out, r, 1) + r + conv_count(r, 2 * bc.out, 1) + 2 * bc.out
                    }
                    _ => 0,
                };
                t.fusion += receivers * per;
            }
        }
    }
    let dw = cfg.decoder_width;
    let last = cfg.stages.last().map_or(0, |s| s.out);
    t.conv += conv_count(last, dw, 1);
    t.dec_norm_channels += dw;
    t.conv_layers += 1;
    t.dec_norms += 1;
    for (si, st) in cfg.stages.iter().enumerate() {
        if st.stride == 2 {
            let in_w = if si == 0 { cfg.stem_width } else { cfg.stages[si - 1].out };
            t.conv += conv_count(in_w, dw, 1) + conv_count(dw, dw, 3);
            t.dec_norm_channels += dw;
            t.conv_layers += 2;
            t.dec_norms += 1;
        }
    }
    t.conv += conv_count(dw, cfg.classes, 1) + cfg.classes;
    t.conv_layers += 1;
    t.biased_layers += 1;
    t
}

/// Analytic parameter count of the network `cfg` would build.
pub fn count_params_config(cfg: &NetConfig) -> ParamReport {
    let t = tally(cfg);
    let s = cfg.modalities;
    let copies = cfg.sharing.conv_copies(s);
    let enc_sets = if cfg.sharing.encoder_norm_mode() == crate::norm::NormMode::Private { s } else { 1 };
    let dec_sets = if cfg.sharing.decoder_norm_mode() == crate::norm::NormMode::Private { s } else { 1 };
    let conv = copies * t.conv;
    let enc_set = 2 * t.enc_norm_channels;
    let dec_set = 2 * t.dec_norm_channels;
    let total = conv + enc_sets * enc_set + dec_sets * dec_set + s + t.fusion;
    let unimodal_total = t.conv + enc_set + dec_set + 1;
    let receivers = if t.fusion > 0 {
        cfg.fusion.direction.pairs(s).len()
    } else {
        0
    };
    ParamReport {
        modalities: s,
        conv,
        encoder_norm_set: enc_set,
        encoder_norm_sets: enc_sets,
        decoder_norm_set: dec_set,
        decoder_norm_sets: dec_sets,
        ensemble: s,
        fusion: t.fusion,
        total,
        unimodal_total,
        overhead: (total as f64 - unimodal_total as f64) / unimodal_total as f64,
        learnable_tensors: copies * (t.conv_layers + t.biased_layers)
            + 2 * (enc_sets * t.enc_norms + dec_sets * t.dec_norms)
            + 1
            + 2 * receivers * t.fusion_layers,
        buffer_tensors: 2 * (enc_sets * t.enc_norms + dec_sets * t.dec_norms),
    }
}

/// Parameter count taken from the tensors the network holds.
pub fn count_params(net: &AsymFusionNet) -> ParamReport {
    let mut conv = 0;
    let mut fusion = 0;
    for c in net.convs() {
        if c.name.contains(".fuse.") {
            fusion += c.param_count();
        } else {
            conv += c.param_count();
        }
    }
    let (mut enc_set, mut dec_set, mut enc_sets, mut dec_sets) = (0, 0, 1, 1);
    for site in net.norms() {
        let per_set = 2 * site.norm.channels();
        if site.encoder {
            enc_set += per_set;
            enc_sets = site.norm.sets();
        } else {
            dec_set += per_set;
            dec_sets = site.norm.sets();
        }
    }
    let ensemble = net.param(ParamKey::Ensemble).len();
    let total = net.learnable_count();
    let cfg = net.config();
    let copies = cfg.sharing.conv_copies(cfg.modalities);
    let unimodal_total = conv / copies + enc_set + dec_set + 1;
    ParamReport {
        modalities: cfg.modalities,
        conv,
        encoder_norm_set: enc_set,
        encoder_norm_sets: enc_sets,
        decoder_norm_set: dec_set,
        decoder_norm_sets: dec_sets,
        ensemble,
        fusion,
        total,
        unimodal_total,
        overhead: (total as f64 - unimodal_total as f64) / unimodal_total as f64,
        learnable_tensors: net.param_keys().len(),
        buffer_tensors: net.buffer_keys().len(),
    }
}

/// Channel layout of a standard bottleneck ResNet encoder.
#[derive(Debug, Clone, Serialize)]
pub struct ResNetShape {
    pub name: &'static str,
    pub in_channels: usize,
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub blocks: [usize; 4],
    pub widths: [usize; 4],
    pub expansion: usize,
}

impl ResNetShape {
    pub fn resnet101() -> Self {
        Self {
            name: "resnet101-shape",
            in_channels: 3,
            stem_width: 64,
            stem_kernel: 7,
            blocks: [3, 4, 23, 3],
            widths: [64, 128, 256, 512],
            expansion: 4,
        }
    }

    pub fn resnet50() -> Self {
        Self {
            name: "resnet50-shape",
            blocks: [3, 4, 6, 3],
            ..Self::resnet101()
        }
    }

    /// Sum of channels over every norm site (stem, three per block, one
    /// per projection shortcut).
    pub fn norm_channels(&self) -> usize {
        let mut total = self.stem_width;
        for (&n, &w) in self.blocks.iter().zip(&self.widths) {
            total += n * (2 * w + w * self.expansion) + w * self.expansion;
        }
        total
    }

    /// Bias-free convolution weights of the encoder.
    pub fn conv_params(&self) -> usize {
        let mut total = conv_count(self.in_channels, self.stem_width, self.stem_kernel);
        let mut cin = self.stem_width;
        for (&n, &w) in self.blocks.iter().zip(&self.widths) {
            let out = w * self.expansion;
            total += conv_count(cin, out, 1);
            for b in 0..n {
                let bin = if b == 0 { cin } else { out };
                total += conv_count(bin, w, 1) + conv_count(w, w, 3) + conv_count(w, out, 1);
            }
            cin = out;
        }
        total
    }
}

/// Reference model size the preset overhead is measured against.
pub const RESNET101_REFERENCE_TOTAL: usize = 118_100_000;

#[derive(Debug, Clone, Serialize)]
pub struct PresetReport {
    pub preset: &'static str,
    pub modalities: usize,
    pub encoder_norm_channels: usize,
    pub encoder_conv_params: usize,
    /// Norm affine parameters added by each extra modality.
    pub extra_per_modality: usize,
    pub extra_total: usize,
    /// Ensemble logits added beyond the first, reported separately.
    pub extra_ensemble_logits: usize,
    pub reference_total: usize,
    pub overhead: f64,
}

pub fn preset_report(shape: &ResNetShape, modalities: usize, reference_total: usize) -> PresetReport {
    let per = 2 * shape.norm_channels();
    let extra_total = modalities.saturating_sub(1) * per;
    PresetReport {
        preset: shape.name,
        modalities,
        encoder_norm_channels: shape.norm_channels(),
        encoder_conv_params: shape.conv_params(),
        extra_per_modality: per,
        extra_total,
        extra_ensemble_logits: modalities.saturating_sub(1),
        reference_total,
        overhead: extra_total as f64 / reference_total as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Direction, SharingStrategy};

    #[test]
    fn resnet101_norm_channels() {
        assert_eq!(ResNetShape::resnet101().norm_channels(), 52_672);
        let r = preset_report(&ResNetShape::resnet101(), 2, RESNET101_REFERENCE_TOTAL);
        assert_eq!(r.extra_total, 105_344);
        assert!((r.overhead - 0.000892).abs() < 5e-7);
    }

    #[test]
    fn analytic_count_matches_built_net() {
        let mut cfgs = vec![NetConfig::default(), NetConfig::with_widths(&[16, 32, 64, 128])];
        for sharing in [
            SharingStrategy::IndividualConvsIndividualNorms,
            SharingStrategy::SharedConvsSharedNorms,
        ] {
            cfgs.push(NetConfig {
                sharing,
                ..NetConfig::default()
            });
        }
        for method in [FusionMethod::Concat, FusionMethod::Attention, FusionMethod::Average] {
            let mut c = NetConfig::default();
            c.fusion.method = method;
            cfgs.push(c.clone());
            c.fusion.direction = Direction::TwoToOne;
            cfgs.push(c);
        }
        let mut c = NetConfig {
            modalities: 3,
            ..NetConfig::default()
        };
        c.fusion.method = FusionMethod::Attention;
        cfgs.push(c);
        for cfg in cfgs {
            let net = AsymFusionNet::build(&cfg).unwrap();
            assert_eq!(count_params(&net), count_params_config(&cfg), "{cfg:?}");
        }
    }
}
