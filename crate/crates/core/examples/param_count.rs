//! What a second modality costs: the toy network and the ResNet-shaped
//! presets.

use asymfusion::network::{
    count_params_config, preset_report, NetConfig, ResNetShape, SharingStrategy, RESNET101_REFERENCE_TOTAL,
};

fn main() {
    for sharing in [
        SharingStrategy::SharedConvsIndividualNorms,
        SharingStrategy::SharedConvsSharedNorms,
        SharingStrategy::IndividualConvsIndividualNorms,
    ] {
        let cfg = NetConfig {
            sharing,
            ..NetConfig::default()
        };
        let r = count_params_config(&cfg);
        println!(
            "{:<36} total {:>6}  unimodal {:>6}  extra {:>6} ({:.2}%)",
            sharing.label(),
            r.total,
            r.unimodal_total,
            r.extra(),
            100.0 * r.overhead
        );
    }
    for shape in [ResNetShape::resnet50(), ResNetShape::resnet101()] {
        let p = preset_report(&shape, 2, RESNET101_REFERENCE_TOTAL);
        println!(
            "{}: {} norm channels, {} extra parameters per modality, {:.3}% of {}",
            p.preset, p.encoder_norm_channels, p.extra_per_modality, 100.0 * p.overhead, p.reference_total
        );
    }
}
