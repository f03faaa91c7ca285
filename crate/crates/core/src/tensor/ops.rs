//! Differentiable operators. Shapes are checked at every boundary; the only
//! implicit broadcast is a single-element operand against a tensor.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{NdArray, Real, Tensor};

fn unary(
    x: &Tensor,
    f: impl Fn(Real) -> Real,
    df: impl Fn(Real, Real) -> Real + 'static,
) -> Tensor {
    // df(input, output) -> local derivative
    let xv = x.value().clone();
    let yv = xv.map(f);
    let saved_y = yv.clone();
    Tensor::from_op(
        yv,
        vec![x.clone()],
        Box::new(move |g| {
            let data = g
                .data()
                .iter()
                .zip(xv.data().iter().zip(saved_y.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(NdArray::new(g.shape().to_vec(), data).unwrap())]
        }),
    )
}

#[derive(Clone, Copy)]
enum Operand {
    Full,
    Scalar,
}

fn broadcast_pair(a: &NdArray, b: &NdArray) -> Result<(Vec<usize>, Operand, Operand)> {
    if a.shape() == b.shape() {
        return Ok((a.shape().to_vec(), Operand::Full, Operand::Full));
    }
    match (a.len(), b.len()) {
        (1, _) => Ok((b.shape().to_vec(), Operand::Scalar, Operand::Full)),
        (_, 1) => Ok((a.shape().to_vec(), Operand::Full, Operand::Scalar)),
        _ => Err(Error::Dimension(format!(
            "elementwise shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ))),
    }
}

#[inline]
fn at(data: &[Real], kind: Operand, i: usize) -> Real {
    match kind {
        Operand::Full => data[i],
        Operand::Scalar => data[0],
    }
}

fn reduce_to(kind: Operand, shape: &[usize], full: Vec<Real>) -> NdArray {
    match kind {
        Operand::Full => NdArray::new(shape.to_vec(), full).unwrap(),
        Operand::Scalar => NdArray::new(shape.to_vec(), vec![full.iter().sum()]).unwrap(),
    }
}

/// Shared machinery for binary elementwise ops. `da`/`db` give the local
/// partial derivatives at `(a, b)`.
fn binary(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(Real, Real) -> Real,
    da: impl Fn(Real, Real) -> Real + 'static,
    db: impl Fn(Real, Real) -> Real + 'static,
) -> Result<Tensor> {
    let av = a.value().clone();
    let bv = b.value().clone();
    let (shape, ka, kb) = broadcast_pair(&av, &bv)?;
    let n: usize = shape.iter().product();
    let out: Vec<Real> = (0..n)
        .map(|i| f(at(av.data(), ka, i), at(bv.data(), kb, i)))
        .collect();
    let a_shape = av.shape().to_vec();
    let b_shape = bv.shape().to_vec();
    Ok(Tensor::from_op(
        NdArray::new(shape, out)?,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let gd = g.data();
            let mut ga = Vec::with_capacity(gd.len());
            let mut gb = Vec::with_capacity(gd.len());
            for (i, &gi) in gd.iter().enumerate() {
                let x = at(av.data(), ka, i);
                let y = at(bv.data(), kb, i);
                ga.push(gi * da(x, y));
                gb.push(gi * db(x, y));
            }
            vec![
                Some(reduce_to(ka, &a_shape, ga)),
                Some(reduce_to(kb, &b_shape, gb)),
            ]
        }),
    ))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |x, y| x * y, |_, y| y, |x, _| x)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
}

/// Elementwise max; the gradient goes to `a` on ties.
pub fn maximum(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(
        a,
        b,
        |x, y| if x >= y { x } else { y },
        |x, y| if x >= y { 1.0 } else { 0.0 },
        |x, y| if x >= y { 0.0 } else { 1.0 },
    )
}

/// Elementwise min; the gradient goes to `a` on ties.
pub fn minimum(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(
        a,
        b,
        |x, y| if x <= y { x } else { y },
        |x, y| if x <= y { 1.0 } else { 0.0 },
        |x, y| if x <= y { 0.0 } else { 1.0 },
    )
}

pub fn neg(x: &Tensor) -> Tensor {
    mul_scalar(x, -1.0)
}

pub fn mul_scalar(x: &Tensor, c: Real) -> Tensor {
    unary(x, move |v| v * c, move |_, _| c)
}

pub fn add_scalar(x: &Tensor, c: Real) -> Tensor {
    unary(x, move |v| v + c, |_, _| 1.0)
}

pub fn clamp_min(x: &Tensor, floor: Real) -> Tensor {
    unary(
        x,
        move |v| if v > floor { v } else { floor },
        move |v, _| if v > floor { 1.0 } else { 0.0 },
    )
}

pub fn exp(x: &Tensor) -> Tensor {
    unary(x, Real::exp, |_, y| y)
}

pub fn ln(x: &Tensor) -> Tensor {
    unary(x, Real::ln, |x, _| 1.0 / x)
}

pub fn sqrt(x: &Tensor) -> Tensor {
    unary(x, Real::sqrt, |_, y| 0.5 / y)
}

pub fn square(x: &Tensor) -> Tensor {
    unary(x, |v| v * v, |x, _| 2.0 * x)
}

pub fn atan(x: &Tensor) -> Tensor {
    unary(x, Real::atan, |x, _| 1.0 / (1.0 + x * x))
}

/// Logistic function, evaluated without overflow for large `|x|`. Results
/// below the smallest normal float are flushed to zero; subnormals stall the
/// FPU and would otherwise leak into every downstream product.
#[inline]
pub fn sigmoid_scalar(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        if e < Real::MIN_POSITIVE {
            return 0.0;
        }
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    unary(x, sigmoid_scalar, |_, y| y * (1.0 - y))
}

/// `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Tensor {
    let xv = x.value();
    let sig: Vec<Real> = xv.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let out: Vec<Real> = xv.data().iter().zip(&sig).map(|(&v, &s)| v * s).collect();
    let shape = xv.shape().to_vec();
    drop(xv);
    let saved_x = x.clone();
    Tensor::from_op(
        NdArray::new(shape, out).expect("same length"),
        vec![x.clone()],
        Box::new(move |g| {
            let xv = saved_x.value();
            let data = g
                .data()
                .iter()
                .zip(xv.data().iter().zip(&sig))
                .map(|(&g, (&x, &s))| g * s * (1.0 + x * (1.0 - s)))
                .collect();
            vec![Some(NdArray::new(g.shape().to_vec(), data).unwrap())]
        }),
    )
}

pub fn sum(x: &Tensor) -> Tensor {
    let v = x.value();
    let total = v.sum();
    let shape = v.shape().to_vec();
    drop(v);
    Tensor::from_op(
        NdArray::scalar(total),
        vec![x.clone()],
        Box::new(move |g| vec![Some(NdArray::full(shape.clone(), g.data()[0]))]),
    )
}

pub fn mean(x: &Tensor) -> Tensor {
    let v = x.value();
    let n = v.len().max(1);
    let m = v.data().iter().map(|&e| e as f64).sum::<f64>() / n as f64;
    let shape = v.shape().to_vec();
    drop(v);
    Tensor::from_op(
        NdArray::scalar(m as Real),
        vec![x.clone()],
        Box::new(move |g| vec![Some(NdArray::full(shape.clone(), g.data()[0] / n as Real))]),
    )
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let old = x.shape();
    let v = x.value().clone().reshape(shape.to_vec())?;
    Ok(Tensor::from_op(
        v,
        vec![x.clone()],
        Box::new(move |g| vec![Some(g.clone().reshape(old.clone()).unwrap())]),
    ))
}

/// Picks flat elements of `x` into a 1-D tensor (indices may repeat).
pub fn gather(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let v = x.value();
    let n = v.len();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::Dimension(format!(
            "gather index {bad} out of range for {n} elements"
        )));
    }
    let out: Vec<Real> = indices.iter().map(|&i| v.data()[i]).collect();
    let shape = v.shape().to_vec();
    drop(v);
    let idx = indices.to_vec();
    Ok(Tensor::from_op(
        NdArray::new(vec![idx.len()], out)?,
        vec![x.clone()],
        Box::new(move |g| {
            let mut full = NdArray::zeros(shape.clone());
            let fd = full.data_mut();
            for (&i, &gi) in idx.iter().zip(g.data()) {
                fd[i] += gi;
            }
            vec![Some(full)]
        }),
    ))
}

/// Per-channel `x[c] * scale[c] + bias[c]` on a `[C, H, W]` tensor.
pub fn channel_affine(x: &Tensor, scale: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let xv = x.value().clone();
    let (c, h, w) = xv.dims3()?;
    let sv = scale.value().clone();
    let bv = bias.value().clone();
    if sv.shape() != [c] || bv.shape() != [c] {
        return Err(Error::Dimension(format!(
            "channel_affine on {c} channels with scale {:?} and bias {:?}",
            sv.shape(),
            bv.shape()
        )));
    }
    let plane = h * w;
    let mut out = xv.clone();
    for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (s, b) = (sv.data()[ch], bv.data()[ch]);
        for v in chunk {
            *v = *v * s + b;
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![x.clone(), scale.clone(), bias.clone()],
        Box::new(move |g| {
            let mut gx = g.clone();
            let mut gs = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for ch in 0..c {
                let s = sv.data()[ch];
                let gch = &mut gx.data_mut()[ch * plane..(ch + 1) * plane];
                let xch = xv.channel(ch);
                let mut acc_s = 0.0;
                let mut acc_b = 0.0;
                for (gv, &xval) in gch.iter_mut().zip(xch) {
                    acc_s += *gv * xval;
                    acc_b += *gv;
                    *gv *= s;
                }
                gs[ch] = acc_s;
                gb[ch] = acc_b;
            }
            vec![
                Some(gx),
                Some(NdArray::new(vec![c], gs).unwrap()),
                Some(NdArray::new(vec![c], gb).unwrap()),
            ]
        }),
    ))
}

/// Softmax over the `H x W` positions of each channel of a `[C, H, W]`
/// tensor. Each output channel sums to one.
pub fn spatial_softmax(x: &Tensor) -> Result<Tensor> {
    let xv = x.value();
    let (_, h, w) = xv.dims3()?;
    let plane = h * w;
    let mut out = xv.clone();
    drop(xv);
    let mut e = vec![0.0f64; plane];
    for chunk in out.data_mut().chunks_mut(plane) {
        let max = chunk.iter().copied().fold(Real::NEG_INFINITY, Real::max) as f64;
        for (ev, &v) in e.iter_mut().zip(chunk.iter()) {
            *ev = (v as f64 - max).exp();
        }
        let total: f64 = e.iter().sum();
        for (v, &ev) in chunk.iter_mut().zip(&e) {
            *v = (ev / total) as Real;
        }
    }
    let y = out.clone();
    Ok(Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = g.clone();
            for (gch, ych) in gx.data_mut().chunks_mut(plane).zip(y.data().chunks(plane)) {
                let dot: Real = gch.iter().zip(ych).map(|(a, b)| a * b).sum();
                for (gv, &yv) in gch.iter_mut().zip(ych) {
                    *gv = yv * (*gv - dot);
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Elementwise mean and population variance over `N >= 2` equally shaped
/// samples.
pub fn stack_mean_var(samples: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let shape = samples[0].shape();
    if let Some(bad) = samples.iter().find(|s| s.shape() != shape) {
        return Err(Error::Dimension(format!(
            "stack samples disagree: {shape:?} vs {:?}",
            bad.shape()
        )));
    }
    let n = samples.len();
    let inv_n = 1.0 / n as Real;
    let numel: usize = shape.iter().product();

    // Shifted two-pass: deviations from the first sample keep an identical
    // stack at exactly zero variance and its mean bitwise equal to a sample.
    let values: Vec<NdArray> = samples.iter().map(|s| s.value().clone()).collect();
    let base = values[0].data();
    let mut shift_mean = vec![0.0; numel];
    for v in &values[1..] {
        for ((m, &x), &b) in shift_mean.iter_mut().zip(v.data()).zip(base) {
            *m += x - b;
        }
    }
    for m in &mut shift_mean {
        *m *= inv_n;
    }
    let mut var = vec![0.0; numel];
    for v in &values {
        for (((acc, &x), &b), &m) in var.iter_mut().zip(v.data()).zip(base).zip(&shift_mean) {
            let d = (x - b) - m;
            *acc += d * d;
        }
    }
    for s in &mut var {
        *s *= inv_n;
    }
    let mean: Vec<Real> = base.iter().zip(&shift_mean).map(|(b, m)| b + m).collect();

    let mean_t = Tensor::from_op(
        NdArray::new(shape.clone(), mean.clone())?,
        samples.to_vec(),
        Box::new(move |g| {
            let gi = g.map(|v| v * inv_n);
            (0..n).map(|_| Some(gi.clone())).collect()
        }),
    );
    let var_t = Tensor::from_op(
        NdArray::new(shape, var)?,
        samples.to_vec(),
        Box::new(move |g| {
            // d var / d x_i = 2 (x_i - mean) / N; the mean's own dependence
            // on x_i cancels because deviations sum to zero.
            values
                .iter()
                .map(|v| {
                    let data = g
                        .data()
                        .iter()
                        .zip(v.data().iter().zip(&mean))
                        .map(|(&gv, (&x, &m))| gv * 2.0 * (x - m) * inv_n)
                        .collect();
                    Some(NdArray::new(g.shape().to_vec(), data).unwrap())
                })
                .collect()
        }),
    );
    Ok((mean_t, var_t))
}

/// Inverted dropout. When `active` and `p > 0`, every element is zeroed with
/// probability `p` and survivors are scaled by `1 / (1 - p)`; otherwise the
/// input handle is returned untouched.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: Real, active: bool, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if !active || p == 0.0 {
        return Ok(x.clone());
    }
    let keep_scale = 1.0 / (1.0 - p);
    let xv = x.value();
    let mask: Vec<Real> = (0..xv.len())
        .map(|_| {
            if rng.gen::<Real>() < p {
                0.0
            } else {
                keep_scale
            }
        })
        .collect();
    let out: Vec<Real> = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
    let shape = xv.shape().to_vec();
    drop(xv);
    Ok(Tensor::from_op(
        NdArray::new(shape, out)?,
        vec![x.clone()],
        Box::new(move |g| {
            let data = g.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
            vec![Some(NdArray::new(g.shape().to_vec(), data).unwrap())]
        }),
    ))
}

/// Elementwise binary cross-entropy between `sigmoid(logits)` and fixed
/// `targets`, computed in the stable `max(x,0) - x t + ln(1 + e^{-|x|})` form.
pub fn bce_with_logits(logits: &Tensor, targets: &NdArray) -> Result<Tensor> {
    let lv = logits.value().clone();
    lv.expect_same_shape(targets)?;
    let out = lv.zip_map(targets, |x, t| {
        x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
    })?;
    let t = targets.clone();
    Ok(Tensor::from_op(
        out,
        vec![logits.clone()],
        Box::new(move |g| {
            let data = g
                .data()
                .iter()
                .zip(lv.data().iter().zip(t.data()))
                .map(|(&gv, (&x, &t))| gv * (sigmoid_scalar(x) - t))
                .collect();
            vec![Some(NdArray::new(g.shape().to_vec(), data).unwrap())]
        }),
    ))
}

/// Normalizes a tensor by the mean and variance of all its elements.
pub fn layer_norm(x: &Tensor, eps: Real) -> Tensor {
    let xv = x.value().clone();
    let n64 = xv.len() as f64;
    let mean = xv.data().iter().map(|&v| v as f64).sum::<f64>() / n64;
    let var = xv.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n64;
    let inv_std64 = 1.0 / (var + eps as f64).sqrt();
    let xhat = xv.map(|v| ((v as f64 - mean) * inv_std64) as Real);
    let (n, inv_std) = (n64 as Real, inv_std64 as Real);
    let saved = xhat.clone();
    Tensor::from_op(
        xhat,
        vec![x.clone()],
        Box::new(move |g| {
            let gd = g.data();
            let g_mean = gd.iter().sum::<Real>() / n;
            let gx_mean = gd
                .iter()
                .zip(saved.data())
                .map(|(a, b)| a * b)
                .sum::<Real>()
                / n;
            let data = gd
                .iter()
                .zip(saved.data())
                .map(|(&gv, &xh)| inv_std * (gv - g_mean - xh * gx_mean))
                .collect();
            vec![Some(NdArray::new(g.shape().to_vec(), data).unwrap())]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::parameter(NdArray::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn sigmoid_values() {
        let y = sigmoid(&t(&[3], &[0.0, 100.0, 1.0]));
        let v = y.value();
        assert_eq!(v.data()[0], 0.5);
        assert!((1.0 - v.data()[1] as f64).abs() < 1e-9);
        let closed = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((v.data()[2] as f64 - closed).abs() < 1e-6);
        let y = sigmoid(&t(&[2], &[-1000.0, 1000.0]));
        assert!(y.value().all_finite());
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let x = t(&[2, 2], &[0.0; 4]);
        sum(&sigmoid(&x)).backward().unwrap();
        assert!(x.grad().unwrap().data().iter().all(|&g| g == 0.25));
    }

    #[test]
    fn spatial_softmax_uniform_for_constant_map() {
        let x = t(&[2, 3, 4], &[1.5; 24]);
        let y = spatial_softmax(&x).unwrap();
        for &v in y.value().data() {
            assert!((v - 1.0 / 12.0).abs() < 1e-7);
        }
    }

    #[test]
    fn spatial_softmax_log_ratios() {
        let ln = |v: f64| v.ln() as Real;
        let x = t(&[1, 2, 2], &[0.0, ln(2.0), ln(3.0), ln(4.0)]);
        let y = spatial_softmax(&x).unwrap();
        for (got, want) in y.value().data().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn spatial_softmax_peak_dominates() {
        let mut data = vec![0.0; 64];
        data[27] = 20.0;
        let y = spatial_softmax(&t(&[1, 8, 8], &data)).unwrap();
        // e^20 / (e^20 + 63)
        assert!(y.value().data()[27] > 0.999);
    }

    #[test]
    fn spatial_softmax_is_stable_for_large_inputs() {
        let data: Vec<Real> = (0..50).map(|i| if i % 2 == 0 { 1e4 } else { -1e4 }).collect();
        let y = spatial_softmax(&t(&[2, 5, 5], &data)).unwrap();
        assert!(y.value().all_finite());
        for ch in 0..2 {
            let s: Real = y.value().channel(ch).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn stack_mean_var_two_point() {
        let a = t(&[2, 2], &[0.0; 4]);
        let b = t(&[2, 2], &[2.0; 4]);
        let (m, v) = stack_mean_var(&[a, b]).unwrap();
        assert!(m.value().data().iter().all(|&x| x == 1.0));
        assert!(v.value().data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn stack_mean_var_identical_samples_have_zero_variance() {
        let a = t(&[3], &[0.3, -1.7, 2.2]);
        let (_, v) = stack_mean_var(&[a.clone(), a.clone(), a]).unwrap();
        assert!(v.value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stack_mean_var_rejects_single_sample() {
        let a = t(&[3], &[0.0; 3]);
        assert!(matches!(
            stack_mean_var(&[a]),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn dropout_identity_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        assert!(dropout(&x, 0.0, true, &mut rng).unwrap().ptr_eq(&x));
        assert!(dropout(&x, 0.5, false, &mut rng).unwrap().ptr_eq(&x));
        assert!(matches!(
            dropout(&x, 1.0, true, &mut rng),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let x = Tensor::constant(NdArray::full(vec![n], 1.0));
        let y = dropout(&x, 0.2, true, &mut rng).unwrap();
        let v = y.value();
        let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let zeros = v.data().iter().filter(|&&x| x == 0.0).count() as f64 / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((zeros - 0.2).abs() < 0.01 * 0.2 + 0.002, "zero fraction {zeros}");
    }

    #[test]
    fn scalar_broadcast_and_mismatch() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let s = t(&[], &[2.0]);
        let y = mul(&a, &s).unwrap();
        assert_eq!(y.value().data(), &[2.0, 4.0, 6.0]);
        sum(&y).backward().unwrap();
        assert_eq!(s.grad().unwrap().data(), &[6.0]);
        assert!(add(&a, &t(&[2], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn bce_matches_naive_formula() {
        let logits = t(&[3], &[-2.0, 0.5, 3.0]);
        let targets = NdArray::new(vec![3], vec![0.0, 1.0, 1.0]).unwrap();
        let y = bce_with_logits(&logits, &targets).unwrap();
        for ((&l, &tt), &got) in logits
            .value()
            .data()
            .iter()
            .zip(targets.data())
            .zip(y.value().data())
        {
            let p = 1.0 / (1.0 + (-(l as f64)).exp());
            let want = -(tt as f64 * p.ln() + (1.0 - tt as f64) * (1.0 - p).ln());
            assert!((got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let y = layer_norm(&x, 1e-12);
        let v = y.value();
        let mean: Real = v.sum() / 8.0;
        let var: Real = v.data().iter().map(|a| a * a).sum::<Real>() / 8.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }
}
