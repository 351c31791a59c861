//! Channel shuffle and pixel-shift fusion on small hand-readable maps.

use asymfusion::fusion::{channel_shuffle, pixel_shift, shift_fuse, ShiftSpec, ShuffleConfig};
use asymfusion::tensor::Tensor;

fn ramp(channels: usize, base: f64) -> asymfusion::Result<Tensor> {
    let data = (0..channels * 9).map(|i| base + i as f64).collect();
    Tensor::new([1, channels, 3, 3], data)
}

fn main() -> asymfusion::Result<()> {
    let x1 = ramp(8, 0.0)?;
    let x2 = ramp(8, 100.0)?;

    let split = ShuffleConfig::default().split_point(8)?;
    let (f1, f2) = channel_shuffle(&x1, &x2, split)?;
    println!("split point {split}: branch 1 keeps channels 0..{split}, takes the rest from branch 2");
    for c in 0..8 {
        println!("  channel {c}: f1 starts {:>5}, f2 starts {:>5}", f1.plane(0, c)[0], f2.plane(0, c)[0]);
    }
    let (g1, g2) = channel_shuffle(&f1, &f2, split)?;
    println!("shuffling twice restores the inputs: {}", g1.bit_eq(&x1) && g2.bit_eq(&x2));

    let spec = ShiftSpec::default();
    let shifted = pixel_shift(&x1, &spec)?;
    for c in [0, 2, 4, 6] {
        println!("  group of channel {c}, offset {:?}:", spec.offsets[ShiftSpec::group(c, 8)]);
        for row in shifted.plane(0, c).chunks(3) {
            println!("    {row:?}");
        }
    }

    let zero = Tensor::zeros(x2.shape());
    let (h1, _) = shift_fuse(&zero, &x2, &spec)?;
    println!("with a zero receiver, the fused map is the shifted donor: {}", h1.bit_eq(&pixel_shift(&x2, &spec)?));
    Ok(())
}
