use super::{expect_same_shape, LabelMap, Tensor};
use crate::error::{Error, Result};

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn scale(x: &Tensor, factor: f64) -> Tensor {
    x.map(|v| v * factor)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape("add", a, b)?;
    Ok(Tensor::from_parts(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape("mul", a, b)?;
    Ok(Tensor::from_parts(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    ))
}

/// Channel-wise concatenation, `a`'s channels first.
pub fn channel_concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    for (i, axis) in [(0, "N"), (2, "H"), (3, "W")] {
        if a.shape()[i] != b.shape()[i] {
            return Err(Error::dim("channel_concat", axis, a.shape()[i], b.shape()[i]));
        }
    }
    let hw = a.h() * a.w();
    let (ca, cb) = (a.c(), b.c());
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..a.n() {
        data.extend_from_slice(&a.data()[n * ca * hw..(n + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[n * cb * hw..(n + 1) * cb * hw]);
    }
    Ok(Tensor::from_parts([a.n(), ca + cb, a.h(), a.w()], data))
}

/// Channels `lo..=hi`, 1-based inclusive.
pub fn channel_slice(x: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    if lo < 1 || lo > hi || hi > x.c() {
        return Err(Error::index(
            "channel_slice",
            format!("[{lo}, {hi}] not within [1, {}]", x.c()),
        ));
    }
    Ok(slice_zero_based(x, lo - 1, hi))
}

/// Channels `[start, end)`, 0-based. Caller guarantees the range is valid.
pub(crate) fn slice_zero_based(x: &Tensor, start: usize, end: usize) -> Tensor {
    let hw = x.h() * x.w();
    let c = x.c();
    let mut data = Vec::with_capacity(x.n() * (end - start) * hw);
    for n in 0..x.n() {
        data.extend_from_slice(&x.data()[(n * c + start) * hw..(n * c + end) * hw]);
    }
    Tensor::from_parts([x.n(), end - start, x.h(), x.w()], data)
}

/// Writes `g` into channels `[start, start + g.c())` of a zero tensor of `shape`.
pub(crate) fn embed_channels(shape: super::Shape, start: usize, g: &Tensor) -> Tensor {
    let [n_, c, h, w] = shape;
    let hw = h * w;
    let mut data = vec![0.0; n_ * c * hw];
    let gc = g.c();
    for n in 0..n_ {
        data[(n * c + start) * hw..(n * c + start + gc) * hw]
            .copy_from_slice(&g.data()[n * gc * hw..(n + 1) * gc * hw]);
    }
    Tensor::from_parts(shape, data)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Tensor) -> Tensor {
    let [n_, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut data = vec![0.0; n_ * c * oh * ow];
    for (plane_idx, out) in data.chunks_mut(oh * ow).enumerate() {
        let src = &x.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                out[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_parts([n_, c, oh, ow], data)
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block.
pub(crate) fn upsample2x_backward(g: &Tensor) -> Tensor {
    let [n_, c, oh, ow] = g.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut data = vec![0.0; n_ * c * h * w];
    for (plane_idx, out) in data.chunks_mut(h * w).enumerate() {
        let src = &g.data()[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                out[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    Tensor::from_parts([n_, c, h, w], data)
}

/// Softmax over the channel axis at every pixel.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let [n_, c, h, w] = logits.shape();
    let hw = h * w;
    let mut out = vec![0.0; logits.len()];
    for n in 0..n_ {
        let base = n * c * hw;
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                m = m.max(logits.data()[base + k * hw + p]);
            }
            let mut z = 0.0;
            for k in 0..c {
                let e = (logits.data()[base + k * hw + p] - m).exp();
                out[base + k * hw + p] = e;
                z += e;
            }
            for k in 0..c {
                out[base + k * hw + p] /= z;
            }
        }
    }
    Tensor::from_parts(logits.shape(), out)
}

pub(crate) fn check_labels(
    op: &'static str,
    shape: super::Shape,
    labels: &LabelMap,
    ignore_index: Option<u8>,
) -> Result<usize> {
    let [n_, c, h, w] = shape;
    if labels.n != n_ {
        return Err(Error::dim(op, "N", n_, labels.n));
    }
    if labels.h != h {
        return Err(Error::dim(op, "H", h, labels.h));
    }
    if labels.w != w {
        return Err(Error::dim(op, "W", w, labels.w));
    }
    let mut counted = 0;
    for &l in &labels.data {
        if Some(l) == ignore_index {
            continue;
        }
        if l as usize >= c {
            return Err(Error::Label {
                label: l as u32,
                classes: c,
            });
        }
        counted += 1;
    }
    Ok(counted)
}

/// Softmax cross-entropy over channels, averaged over non-ignored pixels.
///
/// Returns the probability map and the scalar loss. When every pixel is
/// ignored the loss is 0.
pub fn softmax_ce(logits: &Tensor, labels: &LabelMap, ignore_index: Option<u8>) -> Result<(Tensor, f64)> {
    let counted = check_labels("softmax_ce", logits.shape(), labels, ignore_index)?;
    let [n_, c, h, w] = logits.shape();
    let hw = h * w;
    let probs = softmax_channels(logits);
    let mut loss = 0.0;
    for n in 0..n_ {
        for p in 0..hw {
            let l = labels.data[n * hw + p];
            if Some(l) == ignore_index {
                continue;
            }
            let base = n * c * hw + p;
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                m = m.max(logits.data()[base + k * hw]);
            }
            let lse = m + (0..c)
                .map(|k| (logits.data()[base + k * hw] - m).exp())
                .sum::<f64>()
                .ln();
            loss += lse - logits.data()[base + l as usize * hw];
        }
    }
    Ok((probs, if counted == 0 { 0.0 } else { loss / counted as f64 }))
}

/// Per-pixel argmax over channels.
pub fn argmax_channels(x: &Tensor) -> LabelMap {
    let [n_, c, h, w] = x.shape();
    let hw = h * w;
    let mut data = vec![0u8; n_ * hw];
    for n in 0..n_ {
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for k in 0..c {
                let v = x.data()[(n * c + k) * hw + p];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            data[n * hw + p] = best as u8;
        }
    }
    LabelMap { n: n_, h, w, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Lcg64;

    #[test]
    fn relu_values() {
        let x = Tensor::new([1, 3, 1, 1], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_identity_and_commutativity() {
        let mut rng = Lcg64::new(11);
        let x = Tensor::randn([2, 3, 4, 4], 1.0, &mut rng);
        let y = Tensor::randn([2, 3, 4, 4], 1.0, &mut rng);
        assert_eq!(add(&x, &Tensor::zeros(x.shape())).unwrap(), x);
        assert!(add(&x, &y).unwrap().bit_eq(&add(&y, &x).unwrap()));
        assert!(add(&x, &Tensor::zeros([2, 3, 4, 5])).is_err());
    }

    #[test]
    fn concat_shape_and_slice_inverse() {
        let mut rng = Lcg64::new(2);
        let a = Tensor::randn([1, 2, 2, 2], 1.0, &mut rng);
        let b = Tensor::randn([1, 3, 2, 2], 1.0, &mut rng);
        let ab = channel_concat(&a, &b).unwrap();
        assert_eq!(ab.shape(), [1, 5, 2, 2]);
        assert_eq!(channel_slice(&ab, 1, 2).unwrap(), a);
        assert_eq!(channel_slice(&ab, 3, 5).unwrap(), b);
        assert_eq!(channel_slice(&ab, 1, 5).unwrap(), ab);
    }

    #[test]
    fn slice_rejects_bad_ranges() {
        let x = Tensor::zeros([1, 4, 2, 2]);
        assert!(channel_slice(&x, 0, 2).is_err());
        assert!(channel_slice(&x, 3, 2).is_err());
        assert!(channel_slice(&x, 2, 5).is_err());
        assert!(channel_concat(&x, &Tensor::zeros([1, 4, 2, 3])).is_err());
    }

    #[test]
    fn upsample_single_pixel_and_shape() {
        let x = Tensor::full([1, 1, 1, 1], 5.0);
        assert_eq!(upsample2x(&x), Tensor::full([1, 1, 2, 2], 5.0));
        assert_eq!(upsample2x(&Tensor::zeros([1, 3, 4, 4])).shape(), [1, 3, 8, 8]);
    }

    #[test]
    fn upsample_then_average_pool_is_identity() {
        // Independent oracle: 2x2 stride-2 average pooling written inline.
        let mut rng = Lcg64::new(9);
        let x = Tensor::randn([2, 3, 3, 5], 1.0, &mut rng);
        let up = upsample2x(&x);
        let mut pooled = Vec::new();
        for n in 0..2 {
            for c in 0..3 {
                for y in 0..3 {
                    for xx in 0..5 {
                        let s = up.at(n, c, 2 * y, 2 * xx)
                            + up.at(n, c, 2 * y + 1, 2 * xx)
                            + up.at(n, c, 2 * y, 2 * xx + 1)
                            + up.at(n, c, 2 * y + 1, 2 * xx + 1);
                        pooled.push(s / 4.0);
                    }
                }
            }
        }
        assert_eq!(Tensor::new(x.shape(), pooled).unwrap(), x);
    }

    #[test]
    fn softmax_ce_uniform_and_near_delta() {
        let k = 5;
        let logits = Tensor::zeros([1, k, 2, 2]);
        let labels = LabelMap::new(1, 2, 2, vec![0, 1, 2, 4]).unwrap();
        let (p, loss) = softmax_ce(&logits, &labels, None).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!((loss - (k as f64).ln()).abs() < 1e-14);

        let mut d = vec![0.0; k * 4];
        for (pix, &l) in labels.data.iter().enumerate() {
            d[l as usize * 4 + pix] = 30.0;
        }
        let (_, loss) = softmax_ce(&Tensor::new([1, k, 2, 2], d).unwrap(), &labels, None).unwrap();
        assert!(loss < 1e-9, "{loss}");
    }

    #[test]
    fn softmax_ce_ignores_and_validates() {
        let logits = Tensor::zeros([1, 3, 1, 2]);
        let labels = LabelMap::new(1, 1, 2, vec![1, 255]).unwrap();
        let (_, loss) = softmax_ce(&logits, &labels, Some(255)).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-14);
        let bad = LabelMap::new(1, 1, 2, vec![3, 0]).unwrap();
        assert!(matches!(
            softmax_ce(&logits, &bad, Some(255)),
            Err(Error::Label { label: 3, classes: 3 })
        ));
    }
}
