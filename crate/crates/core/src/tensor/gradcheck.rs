//! Finite-difference gradient checking.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::tensor::{ops, NdArray, Real, Rng, Tensor};

/// Analytic and central-difference derivative of one leaf coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradSample {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `sum_j |w_j * dy_j/dx|`: the numeric derivative without cancellation
    /// between outputs. At least `|numeric|`.
    pub magnitude: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    /// Largest `|analytic - numeric|` over the probed coordinates.
    pub fn max_abs_error(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| (s.analytic - s.numeric).abs())
            .fold(0.0, f64::max)
    }

    /// Norm-wise relative error: the largest absolute discrepancy over the
    /// largest derivative scale, where a coordinate's scale is the larger of
    /// `|analytic|` and the cancellation-free `magnitude`. Zero when every
    /// probed derivative is exactly zero on both sides.
    pub fn relative_error(&self) -> f64 {
        let scale = self
            .samples
            .iter()
            .map(|s| s.analytic.abs().max(s.magnitude))
            .fold(0.0, f64::max);
        let err = self.max_abs_error();
        if err == 0.0 {
            0.0
        } else {
            err / scale
        }
    }

    /// Coordinate with the largest absolute discrepancy.
    pub fn worst(&self) -> Option<GradSample> {
        self.samples.iter().copied().max_by(|a, b| {
            (a.analytic - a.numeric)
                .abs()
                .total_cmp(&(b.analytic - b.numeric).abs())
        })
    }
}

/// Compares backpropagated gradients of `f` with respect to `leaves` against
/// central differences of step `step`.
///
/// The output of `f` is contracted with random weights of magnitude in
/// `[0.5, 1)`, so any output shape works. `f` must be deterministic (reseed any dropout generator
/// inside it). At most `max_coords` coordinates per leaf are probed, chosen
/// at random.
pub fn gradcheck(
    leaves: &[Tensor],
    f: impl Fn() -> Result<Tensor>,
    step: Real,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    if leaves.iter().any(|l| !l.is_leaf() || !l.requires_grad()) {
        return Err(Error::Contract("gradcheck leaves must be parameters".into()));
    }
    for l in leaves {
        l.zero_grad();
    }
    let y = f()?;
    let shape = y.shape();
    // magnitudes bounded away from zero so no output is silently ignored
    let weights = NdArray::from_fn(shape, |_| {
        let m: Real = rng.gen_range(0.5..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let w64: Vec<f64> = weights.data().iter().map(|&w| w as f64).collect();
    ops::sum(&ops::mul(&y, &Tensor::constant(weights))?).backward()?;
    drop(y);

    let project = |t: &Tensor| -> Vec<Real> { t.value().data().to_vec() };
    let mut report = GradCheckReport::default();
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.value().len();
        let grad = leaf.take_grad().unwrap_or_else(|| NdArray::zeros(leaf.shape()));
        let mut coords: Vec<usize> = (0..n).collect();
        if n > max_coords {
            coords = rand::seq::index::sample(rng, n, max_coords).into_vec();
            coords.sort_unstable();
        }
        for i in coords {
            let orig = leaf.value().data()[i];
            leaf.value_mut()?.data_mut()[i] = orig + step;
            let plus = project(&f()?);
            leaf.value_mut()?.data_mut()[i] = orig - step;
            let minus = project(&f()?);
            leaf.value_mut()?.data_mut()[i] = orig;
            let (mut diff, mut magnitude) = (0.0f64, 0.0f64);
            for ((&p, &m), &w) in plus.iter().zip(&minus).zip(&w64) {
                let d = w * (p as f64 - m as f64);
                diff += d;
                magnitude += d.abs();
            }
            // the realized step, not the nominal one, after rounding
            let h = (orig + step) as f64 - (orig - step) as f64;
            report.samples.push(GradSample {
                leaf: li,
                index: i,
                analytic: grad.data()[i] as f64,
                numeric: diff / h,
                magnitude: magnitude / h,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn square_matches_closed_form() {
        let mut rng = seeded_rng(0);
        let x = Tensor::parameter(NdArray::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let xc = x.clone();
        let r = gradcheck(&[x], || Ok(ops::square(&xc)), 1e-3, 10, &mut rng).unwrap();
        assert_eq!(r.samples.len(), 3);
        assert!(r.relative_error() < 1e-3, "{:?}", r.worst());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = seeded_rng(1);
        let x = Tensor::parameter(NdArray::new(vec![2], vec![0.3, 0.7]).unwrap());
        let xc = x.clone();
        // d/dx of x*x computed through a detached factor is half the truth
        let r = gradcheck(&[x], || ops::mul(&xc, &xc.detach()), 1e-3, 10, &mut rng).unwrap();
        assert!(r.relative_error() > 0.4);
    }

    #[test]
    fn rejects_non_parameters() {
        let mut rng = seeded_rng(2);
        let c = Tensor::constant(NdArray::zeros(vec![1]));
        let cc = c.clone();
        assert!(gradcheck(&[c], || Ok(cc.clone()), 1e-3, 1, &mut rng).is_err());
    }
}
