//! 2-D cross-correlation via im2col + GEMM.

use super::Tensor;
use crate::error::{Error, Result};

/// `C[m x n] (+)= A[m x k] * B[k x n]`, where `A`/`B` may be stored
/// transposed (`a_t` means `a` holds a row-major `k x m` matrix).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv_output_size(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn check(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Self> {
        let [cout, cin, kh, kw] = w.shape();
        if kh != kw {
            return Err(Error::dim("conv2d", "kernel width", kh, kw));
        }
        let k = kh;
        if k != 1 && k != 3 {
            return Err(Error::Config(format!("conv2d: kernel size {k} not in {{1, 3}}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("conv2d: stride {stride} not in {{1, 2}}")));
        }
        if pad != 0 && pad != (k - 1) / 2 {
            return Err(Error::Config(format!(
                "conv2d: padding {pad} not in {{0, {}}}",
                (k - 1) / 2
            )));
        }
        if x.c() != cin {
            return Err(Error::dim("conv2d", "C", cin, x.c()));
        }
        if let Some(b) = b {
            if b.shape() != [1, cout, 1, 1] {
                return Err(Error::dim("conv2d", "bias", cout, b.len()));
            }
        }
        let oh = conv_output_size(x.h(), k, stride, pad)
            .ok_or_else(|| Error::dim("conv2d", "H", k, x.h() + 2 * pad))?;
        let ow = conv_output_size(x.w(), k, stride, pad)
            .ok_or_else(|| Error::dim("conv2d", "W", k, x.w() + 2 * pad))?;
        Ok(Self {
            n: x.n(),
            cin,
            h: x.h(),
            w: x.w(),
            cout,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Fills `cols` (`cin*k*k x oh*ow`) for sample `x_n`.
    fn im2col(&self, x_n: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.cin {
            let plane = &x_n[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into `dx_n`.
    fn col2im(&self, cols: &[f64], dx_n: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.cin {
            let plane = &mut dx_n[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip) with zero padding.
///
/// `w` is `Cout x Cin x k x k`, `b` (optional) is `1 x Cout x 1 x 1`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = Geom::check(x, w, b, stride, pad)?;
    let p = g.positions();
    let in_per = g.cin * g.h * g.w;
    let mut out = vec![0.0; g.n * g.cout * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.patch() * p]
    };
    for n in 0..g.n {
        let x_n = &x.data()[n * in_per..(n + 1) * in_per];
        let rhs: &[f64] = if g.is_pointwise() {
            x_n
        } else {
            g.im2col(x_n, &mut cols);
            &cols
        };
        let out_n = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        gemm(g.cout, g.patch(), p, w.data(), false, rhs, false, out_n, false);
        if let Some(b) = b {
            for (co, row) in out_n.chunks_mut(p).enumerate() {
                let bias = b.data()[co];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    Ok(Tensor::from_parts([g.n, g.cout, g.oh, g.ow], out))
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

/// Gradients of [`conv2d`] given the upstream gradient `gy`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads> {
    let g = Geom::check(x, w, None, stride, pad)?;
    if gy.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::dim("conv2d_backward", "grad", g.n * g.cout * g.oh * g.ow, gy.len()));
    }
    let p = g.positions();
    let in_per = g.cin * g.h * g.w;
    let mut dw = vec![0.0; g.cout * g.patch()];
    let mut db = vec![0.0; g.cout];
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.patch() * p]
    };
    for n in 0..g.n {
        let x_n = &x.data()[n * in_per..(n + 1) * in_per];
        let gy_n = &gy.data()[n * g.cout * p..(n + 1) * g.cout * p];
        for (co, row) in gy_n.chunks(p).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
        let rhs: &[f64] = if g.is_pointwise() {
            x_n
        } else {
            g.im2col(x_n, &mut cols);
            &cols
        };
        // dW += gY_n * cols^T
        gemm(g.cout, p, g.patch(), gy_n, false, rhs, true, &mut dw, true);
        if need_dx {
            let dx_n = &mut dx[n * in_per..(n + 1) * in_per];
            if g.is_pointwise() {
                gemm(g.patch(), g.cout, p, w.data(), true, gy_n, false, dx_n, true);
            } else {
                gemm(g.patch(), g.cout, p, w.data(), true, gy_n, false, &mut cols, false);
                g.col2im(&cols, dx_n);
            }
        }
    }
    Ok(ConvGrads {
        dx: need_dx.then(|| Tensor::from_parts(x.shape(), dx)),
        dw: Tensor::from_parts(w.shape(), dw),
        db: Tensor::from_parts([1, g.cout, 1, 1], db),
    })
}
