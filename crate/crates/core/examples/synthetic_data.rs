//! Generates the two-modality segmentation set, prints its accuracy
//! ceilings and writes it to disk.

use asymfusion::synth::{bayes_ceiling, generate, read_dataset, write_dataset, SynthConfig};

fn main() -> asymfusion::Result<()> {
    let cfg = SynthConfig::default();
    let (train, test) = generate(&cfg)?;
    println!("{} train / {} test samples, checksum {:016x}", train.len(), test.len(), train.checksum());

    let c = bayes_ceiling(&cfg)?;
    println!("per-pixel Bayes accuracy: modality {:.3?}, fused {:.3}", c.per_modality, c.fused);
    println!("noise-free limits: modality {:.3?}, fused {:.3}", c.noise_free_per_modality, c.noise_free_fused);

    let sample = &train.samples[0];
    for (y, row) in sample.labels.data.chunks(cfg.width).take(4).enumerate() {
        let m0: Vec<String> = sample.inputs[0].plane(0, 0)[y * cfg.width..][..8].iter().map(|v| format!("{v:5.2}")).collect();
        println!("labels {:?}  modality 0 {}", &row[..8], m0.join(" "));
    }

    let dir = std::env::temp_dir();
    let path = dir.join("asymfusion-example.afds");
    write_dataset(&path, &test)?;
    println!("wrote {} ({} samples read back)", path.display(), read_dataset(&path)?.len());
    Ok(())
}
