//! Channel shuffle and pixel shift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{add, expect_same_shape, Tensor};

pub const DEFAULT_SPLIT_FRACTION: f64 = 0.7;

/// Fraction of channels a branch keeps from itself during a shuffle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShuffleConfig {
    pub split_fraction: f64,
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        Self {
            split_fraction: DEFAULT_SPLIT_FRACTION,
        }
    }
}

impl ShuffleConfig {
    /// Split point `T` for `channels` channels: `round(fraction * C)`
    /// clamped to `[1, C - 1]`. Channels `1..=T` stay, `T+1..=C` move.
    pub fn split_point(&self, channels: usize) -> Result<usize> {
        if channels < 2 {
            return Err(Error::Config(format!(
                "channel shuffle needs at least 2 channels, got {channels}"
            )));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split fraction {} not in (0, 1)",
                self.split_fraction
            )));
        }
        let t = (self.split_fraction * channels as f64).round() as usize;
        Ok(t.clamp(1, channels - 1))
    }
}

/// Channels `[0, t)` from `a`, `[t, C)` from `b`.
pub(crate) fn mix_channels(a: &Tensor, b: &Tensor, t: usize) -> Tensor {
    let [n_, c, h, w] = a.shape();
    let hw = h * w;
    let mut data = Vec::with_capacity(a.len());
    for n in 0..n_ {
        data.extend_from_slice(&a.data()[n * c * hw..(n * c + t) * hw]);
        data.extend_from_slice(&b.data()[(n * c + t) * hw..(n + 1) * c * hw]);
    }
    Tensor::from_parts(a.shape(), data)
}

pub(crate) fn check_split(x: &Tensor, t: usize) -> Result<()> {
    if t < 1 || t >= x.c() {
        return Err(Error::index(
            "channel_shuffle",
            format!("split point {t} not in [1, {})", x.c()),
        ));
    }
    Ok(())
}

/// Exchanges channels `T+1..=C` between two feature maps:
/// `f1 = x1[1..T] || x2[T+1..C]`, `f2 = x2[1..T] || x1[T+1..C]`.
pub fn channel_shuffle(x1: &Tensor, x2: &Tensor, split: usize) -> Result<(Tensor, Tensor)> {
    expect_same_shape("channel_shuffle", x1, x2)?;
    check_split(x1, split)?;
    Ok((mix_channels(x1, x2, split), mix_channels(x2, x1, split)))
}

pub fn channel_shuffle_with(x1: &Tensor, x2: &Tensor, cfg: &ShuffleConfig) -> Result<(Tensor, Tensor)> {
    channel_shuffle(x1, x2, cfg.split_point(x1.c())?)
}

/// One-pixel offsets `(dh, dw)` for the four contiguous channel groups.
/// Output pixel `(h, w)` of group `g` reads input `(h + dh_g, w + dw_g)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub offsets: [(i8, i8); 4],
}

impl Default for ShiftSpec {
    /// Groups 0..3 move their content right, down, left, up.
    fn default() -> Self {
        Self {
            offsets: [(0, -1), (-1, 0), (0, 1), (1, 0)],
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, &(dh, dw)) in self.offsets.iter().enumerate() {
            if (dh.abs() + dw.abs()) != 1 {
                return Err(Error::Config(format!(
                    "shift group {i}: offset ({dh}, {dw}) is not a unit step"
                )));
            }
            if self.offsets[..i].contains(&(dh, dw)) {
                return Err(Error::Config(format!("shift group {i}: duplicate direction")));
            }
        }
        Ok(())
    }

    pub fn check_channels(channels: usize) -> Result<()> {
        if channels % 4 != 0 {
            return Err(Error::Config(format!(
                "pixel shift needs channels divisible by 4, got {channels}"
            )));
        }
        Ok(())
    }

    /// Group of 0-based channel `c`: `floor(4c / C)`.
    pub fn group(c: usize, channels: usize) -> usize {
        4 * c / channels
    }

    fn reversed(&self) -> ShiftSpec {
        let mut offsets = self.offsets;
        for o in &mut offsets {
            *o = (-o.0, -o.1);
        }
        ShiftSpec { offsets }
    }
}

fn shift_with(x: &Tensor, spec: &ShiftSpec) -> Tensor {
    let [n_, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for n in 0..n_ {
        for ch in 0..c {
            let (dh, dw) = spec.offsets[ShiftSpec::group(ch, c)];
            let (dh, dw) = (dh as isize, dw as isize);
            let src = x.plane(n, ch);
            let dst = &mut out[(n * c + ch) * hw..(n * c + ch + 1) * hw];
            for y in 0..h {
                let sy = y as isize + dh;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx as isize + dw;
                    if sx >= 0 && sx < w as isize {
                        dst[y * w + xx] = src[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::from_parts(x.shape(), out)
}

/// Shifts each quarter of the channels by one pixel with zero fill.
pub fn pixel_shift(x: &Tensor, spec: &ShiftSpec) -> Result<Tensor> {
    ShiftSpec::check_channels(x.c())?;
    spec.validate()?;
    Ok(shift_with(x, spec))
}

/// Adjoint of [`pixel_shift`]: routes gradients by the opposite offsets.
pub(crate) fn pixel_shift_adjoint(g: &Tensor, spec: &ShiftSpec) -> Tensor {
    shift_with(g, &spec.reversed())
}

/// `f1 = x1 + shift(x2)`, `f2 = x2 + shift(x1)`.
pub fn shift_fuse(x1: &Tensor, x2: &Tensor, spec: &ShiftSpec) -> Result<(Tensor, Tensor)> {
    expect_same_shape("shift_fuse", x1, x2)?;
    let s1 = pixel_shift(x1, spec)?;
    let s2 = pixel_shift(x2, spec)?;
    Ok((add(x1, &s2)?, add(x2, &s1)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Lcg64;

    #[test]
    fn split_point_rounding_and_clamp() {
        let cfg = ShuffleConfig::default();
        assert_eq!(cfg.split_point(10).unwrap(), 7);
        assert_eq!(cfg.split_point(8).unwrap(), 6);
        assert_eq!(cfg.split_point(2).unwrap(), 1);
        assert_eq!(ShuffleConfig { split_fraction: 0.99 }.split_point(4).unwrap(), 3);
        assert!(cfg.split_point(1).is_err());
        assert!(ShuffleConfig { split_fraction: 1.0 }.split_point(4).is_err());
    }

    #[test]
    fn shuffle_routes_channels() {
        let mut rng = Lcg64::new(1);
        let x1 = Tensor::randn([2, 10, 3, 3], 1.0, &mut rng);
        let x2 = Tensor::randn([2, 10, 3, 3], 1.0, &mut rng);
        let (f1, f2) = channel_shuffle_with(&x1, &x2, &ShuffleConfig::default()).unwrap();
        for n in 0..2 {
            for c in 0..10 {
                let (src1, src2) = if c < 7 { (&x1, &x2) } else { (&x2, &x1) };
                assert_eq!(f1.plane(n, c), src1.plane(n, c));
                assert_eq!(f2.plane(n, c), src2.plane(n, c));
            }
        }
    }

    #[test]
    fn shuffle_of_identical_inputs_is_identity() {
        let mut rng = Lcg64::new(2);
        let x = Tensor::randn([1, 6, 2, 2], 1.0, &mut rng);
        let (f1, f2) = channel_shuffle(&x, &x, 4).unwrap();
        assert_eq!(f1, x);
        assert_eq!(f2, x);
    }

    #[test]
    fn shuffle_errors() {
        let a = Tensor::zeros([1, 4, 2, 2]);
        assert!(channel_shuffle(&a, &Tensor::zeros([1, 4, 2, 3]), 2).is_err());
        assert!(channel_shuffle(&a, &a, 0).is_err());
        assert!(channel_shuffle(&a, &a, 4).is_err());
    }

    #[test]
    fn single_pixel_moves_per_group() {
        let mut x = Tensor::zeros([1, 4, 3, 3]);
        for c in 0..4 {
            let i = x.index(0, c, 1, 1);
            x.data_mut()[i] = 1.0;
        }
        let y = pixel_shift(&x, &ShiftSpec::default()).unwrap();
        let expect = [(1, 2), (2, 1), (1, 0), (0, 1)];
        for (c, &(h, w)) in expect.iter().enumerate() {
            for yy in 0..3 {
                for xx in 0..3 {
                    let v = y.at(0, c, yy, xx);
                    assert_eq!(v, if (yy, xx) == (h, w) { 1.0 } else { 0.0 }, "c{c} ({yy},{xx})");
                }
            }
        }
    }

    #[test]
    fn ones_lose_one_border_line() {
        let y = pixel_shift(&Tensor::ones([1, 4, 3, 3]), &ShiftSpec::default()).unwrap();
        for c in 0..4 {
            assert_eq!(y.plane(0, c).iter().sum::<f64>(), 6.0);
        }
        assert_eq!(y.plane(0, 0)[0], 0.0); // left column vacated by a right shift
    }

    #[test]
    fn zeros_and_divisibility() {
        let z = Tensor::zeros([2, 8, 4, 4]);
        assert_eq!(pixel_shift(&z, &ShiftSpec::default()).unwrap(), z);
        assert!(pixel_shift(&Tensor::zeros([1, 6, 4, 4]), &ShiftSpec::default()).is_err());
        let bad = ShiftSpec {
            offsets: [(0, -1), (0, -1), (0, 1), (1, 0)],
        };
        assert!(pixel_shift(&z, &bad).is_err());
    }

    #[test]
    fn contiguous_groups() {
        let groups: Vec<usize> = (0..8).map(|c| ShiftSpec::group(c, 8)).collect();
        assert_eq!(groups, vec![0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn shift_fuse_identities() {
        let mut rng = Lcg64::new(3);
        let spec = ShiftSpec::default();
        let x1 = Tensor::randn([1, 8, 5, 5], 1.0, &mut rng);
        let x2 = Tensor::randn([1, 8, 5, 5], 1.0, &mut rng);
        let zero = Tensor::zeros(x1.shape());

        let (f1, f2) = shift_fuse(&x1, &zero, &spec).unwrap();
        assert_eq!(f1, x1);
        assert_eq!(f2, pixel_shift(&x1, &spec).unwrap());

        let (f1, f2) = shift_fuse(&x1, &x1, &spec).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1, add(&x1, &pixel_shift(&x1, &spec).unwrap()).unwrap());

        let (f1, _) = shift_fuse(&x1, &x2, &spec).unwrap();
        let shifted = pixel_shift(&x2, &spec).unwrap();
        for ((a, b), s) in f1.data().iter().zip(x1.data()).zip(shifted.data()) {
            assert_eq!(*a, b + s);
            // subtraction only loses what rounding in the addition lost
            assert!(((a - b) - s).abs() <= f64::EPSILON * (b.abs() + s.abs()));
        }
    }
}
