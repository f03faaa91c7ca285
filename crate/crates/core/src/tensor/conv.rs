//! 2-D convolution via im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{NdArray, Real, Tensor};

/// `c[m,n] = alpha * a[m,k] * b[k,n] + beta * c[m,n]` with explicit
/// row/column strides, so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    (rsa, csa): (isize, isize),
    b: &[Real],
    (rsb, csb): (isize, isize),
    beta: Real,
    c: &mut [Real],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    debug_assert!(k == 0 || a.len() as isize > (m as isize - 1) * rsa + (k as isize - 1) * csa);
    debug_assert!(k == 0 || b.len() as isize > (k as isize - 1) * rsb + (n as isize - 1) * csb);
    // SAFETY: operand extents are covered by the assertions above.
    unsafe {
        #[cfg(not(feature = "f64"))]
        matrixmultiply::sgemm(
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
        #[cfg(feature = "f64")]
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
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn im2col(x: &[Real], g: &Geometry) -> Vec<Real> {
    let p = g.cols();
    let mut cols = vec![0.0; g.rows() * p];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[Real], g: &Geometry) -> Vec<Real> {
    let p = g.cols();
    let mut x = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, &s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation of a `[C_in, H, W]` input with a `[C_out, C_in, kh, kw]`
/// kernel, zero padding on all sides.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let xv = input.value();
    let kv = kernel.value().clone();
    let (c, h, w) = xv.dims3()?;
    let (o, kc, kh, kw) = match kv.shape()[..] {
        [o, kc, kh, kw] => (o, kc, kh, kw),
        _ => {
            return Err(Error::Dimension(format!(
                "conv kernel must be [C_out,C_in,kh,kw], got {:?}",
                kv.shape()
            )))
        }
    };
    if kc != c {
        return Err(Error::Dimension(format!(
            "conv input has {c} channels but kernel expects {kc}"
        )));
    }
    if stride == 0 {
        return Err(Error::Parameter("conv stride must be >= 1".into()));
    }
    let (ho, wo) = match (
        conv_output_size(h, kh, stride, padding),
        conv_output_size(w, kw, stride, padding),
    ) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::Dimension(format!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
            )))
        }
    };
    let g = Geometry {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        ho,
        wo,
    };
    let cols = if g.is_pointwise() {
        xv.data().to_vec()
    } else {
        im2col(xv.data(), &g)
    };
    drop(xv);

    let (k, p) = (g.rows(), g.cols());
    let mut out = vec![0.0; o * p];
    gemm(o, k, p, kv.data(), (k as isize, 1), &cols, (p as isize, 1), 0.0, &mut out);

    let need_input_grad = input.requires_grad();
    let need_kernel_grad = kernel.requires_grad();
    Ok(Tensor::from_op(
        NdArray::new(vec![o, ho, wo], out)?,
        vec![input.clone(), kernel.clone()],
        Box::new(move |grad| {
            let gd = grad.data();
            let gx = need_input_grad.then(|| {
                // dcols[K,P] = W^T[K,O] * g[O,P]
                let mut dcols = vec![0.0; k * p];
                gemm(k, o, p, kv.data(), (1, k as isize), gd, (p as isize, 1), 0.0, &mut dcols);
                let dx = if g.is_pointwise() { dcols } else { col2im(&dcols, &g) };
                NdArray::new(vec![g.c, g.h, g.w], dx).unwrap()
            });
            let gk = need_kernel_grad.then(|| {
                // dW[O,K] = g[O,P] * cols^T[P,K]
                let mut dw = vec![0.0; o * k];
                gemm(o, p, k, gd, (p as isize, 1), &cols, (1, p as isize), 0.0, &mut dw);
                NdArray::new(vec![o, g.c, g.kh, g.kw], dw).unwrap()
            });
            vec![gx, gk]
        }),
    ))
}
