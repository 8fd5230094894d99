//! Same-padded 2-D convolution (cross-correlation) via im2col and GEMM.

use crate::error::{invalid, shape_err, Result};
use crate::numerics::Tensor;

/// `c = a * b` (or `c += a * b` when `accumulate`) for row-major matrices,
/// where `a` is `m x k` (or `k x m` if `trans_a`) and `b` is `k x n`
/// (or `n x k` if `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these row/column strides.
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

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn plane(&self) -> usize {
        self.h * self.w
    }
}

fn dims(input: &Tensor, kernel: &Tensor) -> Result<ConvDims> {
    let (batch, cin, h, w) = match *input.shape() {
        [c, h, w] => (1, c, h, w),
        [b, c, h, w] => (b, c, h, w),
        ref s => return shape_err(format!("conv2d input must be [C,H,W] or [B,C,H,W], got {s:?}")),
    };
    let (cout, kc, kh, kw) = match *kernel.shape() {
        [k, c, kh, kw] => (k, c, kh, kw),
        ref s => return shape_err(format!("conv2d kernel must be [K,C,kh,kw], got {s:?}")),
    };
    if kc != cin {
        return shape_err(format!("conv2d channel mismatch: input has {cin}, kernel expects {kc}"));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return invalid(format!("conv2d kernel size must be odd, got {kh}x{kw}"));
    }
    Ok(ConvDims { batch, cin, h, w, cout, kh, kw })
}

fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let (ph, pw) = (d.kh / 2, d.kw / 2);
    let plane = d.plane();
    for c in 0..d.cin {
        let src = &x[c * plane..(c + 1) * plane];
        for dy in 0..d.kh {
            for dx in 0..d.kw {
                let row = ((c * d.kh + dy) * d.kw + dx) * plane;
                let dst = &mut cols[row..row + plane];
                for y in 0..d.h {
                    let sy = y as isize + dy as isize - ph as isize;
                    let out = &mut dst[y * d.w..(y + 1) * d.w];
                    if sy < 0 || sy >= d.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let srow = &src[sy as usize * d.w..(sy as usize + 1) * d.w];
                    for (xo, o) in out.iter_mut().enumerate() {
                        let sx = xo as isize + dx as isize - pw as isize;
                        *o = if sx < 0 || sx >= d.w as isize { 0.0 } else { srow[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, x: &mut [f64]) {
    let (ph, pw) = (d.kh / 2, d.kw / 2);
    let plane = d.plane();
    for c in 0..d.cin {
        let dst = &mut x[c * plane..(c + 1) * plane];
        for dy in 0..d.kh {
            for dx in 0..d.kw {
                let row = ((c * d.kh + dy) * d.kw + dx) * plane;
                let src = &cols[row..row + plane];
                for y in 0..d.h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= d.h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * d.w..(sy as usize + 1) * d.w];
                    for xo in 0..d.w {
                        let sx = xo as isize + dx as isize - pw as isize;
                        if sx >= 0 && sx < d.w as isize {
                            drow[sx as usize] += src[y * d.w + xo];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(d: &ConvDims) -> bool {
    d.kh == 1 && d.kw == 1
}

/// Same-padded convolution. Accepts `[C,H,W]` or `[B,C,H,W]` input and
/// returns the same rank with `K` output channels.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let d = dims(input, kernel)?;
    if let Some(b) = bias {
        if b.shape() != [d.cout] {
            return shape_err(format!("conv2d bias must be [{}], got {:?}", d.cout, b.shape()));
        }
    }
    let plane = d.plane();
    let mut out = vec![0.0; d.batch * d.cout * plane];
    let mut cols = if is_pointwise(&d) { Vec::new() } else { vec![0.0; d.patch() * plane] };
    for b in 0..d.batch {
        let x = &input.data()[b * d.cin * plane..(b + 1) * d.cin * plane];
        let o = &mut out[b * d.cout * plane..(b + 1) * d.cout * plane];
        let src: &[f64] = if is_pointwise(&d) {
            x
        } else {
            im2col(x, &d, &mut cols);
            &cols
        };
        gemm(d.cout, d.patch(), plane, kernel.data(), false, src, false, o, false);
        if let Some(bias) = bias {
            for (k, &bv) in bias.data().iter().enumerate() {
                for v in &mut o[k * plane..(k + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    let shape = if input.ndim() == 3 {
        vec![d.cout, d.h, d.w]
    } else {
        vec![d.batch, d.cout, d.h, d.w]
    };
    Tensor::new(shape, out)
}

/// Gradients of a same-padded convolution.
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, kernel: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let d = dims(input, kernel)?;
    let plane = d.plane();
    if grad_out.len() != d.batch * d.cout * plane {
        return shape_err(format!("conv2d grad_out has shape {:?}", grad_out.shape()));
    }
    let mut gin = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; d.cout];
    let pointwise = is_pointwise(&d);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; d.patch() * plane] };
    let mut gcols = vec![0.0; d.patch() * plane];
    for b in 0..d.batch {
        let x = &input.data()[b * d.cin * plane..(b + 1) * d.cin * plane];
        let go = &grad_out.data()[b * d.cout * plane..(b + 1) * d.cout * plane];
        for k in 0..d.cout {
            gb[k] += go[k * plane..(k + 1) * plane].iter().sum::<f64>();
        }
        let src: &[f64] = if pointwise {
            x
        } else {
            im2col(x, &d, &mut cols);
            &cols
        };
        // dK[K, P] += dO[K, HW] * cols[P, HW]^T
        gemm(d.cout, plane, d.patch(), go, false, src, true, &mut gk, true);
        // dcols[P, HW] = K[K, P]^T * dO[K, HW]
        let gi = &mut gin[b * d.cin * plane..(b + 1) * d.cin * plane];
        if pointwise {
            gemm(d.patch(), d.cout, plane, kernel.data(), true, go, false, gi, true);
        } else {
            gemm(d.patch(), d.cout, plane, kernel.data(), true, go, false, &mut gcols, false);
            col2im(&gcols, &d, gi);
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gin)?,
        kernel: Tensor::new(kernel.shape().to_vec(), gk)?,
        bias: Tensor::from_vec(gb),
    })
}
