//! Finite-difference cases for every operator and for the full detector
//! graph, written against whichever engine the including module names `ugf`.
#![allow(dead_code)]

use rand::Rng as _;

use super::ugf::bfe::{BranchTag, FeatureStack};
use super::ugf::error::Result;
use super::ugf::fusion::{ugf_fuse, FusionStrategy};
use super::ugf::mdn::{detection_loss, BBox};
use super::ugf::pipeline::{DetectorModel, FrameInputs, RunConfig};
use super::ugf::tensor::{conv2d, gradcheck, ops, seeded_rng, GradCheckReport, NdArray, Real, Rng, Tensor};

const SINGLE: bool = std::mem::size_of::<Real>() == 4;

/// Central-difference step and pass threshold for this engine's precision.
pub const GRAD_STEP: Real = if SINGLE { 1e-3 } else { 1e-6 };
pub const GRAD_TOL: f64 = if SINGLE { 1e-3 } else { 1e-6 };

pub const OPS: &[&str] = &[
    "add", "sub", "mul", "div", "maximum", "minimum", "neg", "mul_scalar", "add_scalar", "clamp_min", "exp", "ln",
    "sqrt", "square", "atan", "sigmoid", "silu", "sum", "mean", "reshape", "gather", "channel_affine",
    "spatial_softmax", "stack_mean", "stack_var", "dropout", "bce_with_logits", "layer_norm", "conv2d", "ugf_fuse", "conv_softmax_chain",
];

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> NdArray {
    NdArray::from_fn(shape, |_| rng.gen_range(lo..hi) as Real)
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn signed_away_from_zero(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> NdArray {
    NdArray::from_fn(shape, |_| {
        let m = rng.gen_range(lo..hi);
        (if rng.gen_bool(0.5) { m } else { -m }) as Real
    })
}

fn param(a: NdArray) -> Tensor {
    Tensor::parameter(a)
}

fn small_shape(rng: &mut Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=3);
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

fn chw(rng: &mut Rng) -> Vec<usize> {
    vec![rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)]
}

/// Pair of arrays whose elements differ by at least `gap` everywhere.
fn separated_pair(shape: Vec<usize>, gap: f64, rng: &mut Rng) -> (NdArray, NdArray) {
    let a = uniform(shape.clone(), -2.0, 2.0, rng);
    let b = NdArray::from_fn(shape, |i| {
        let off = rng.gen_range(gap..1.0);
        a.data()[i] + if rng.gen_bool(0.5) { off } else { -off } as Real
    });
    (a, b)
}

fn stack(n: usize, shape: &[usize], rng: &mut Rng) -> Vec<Tensor> {
    (0..n).map(|_| param(uniform(shape.to_vec(), -1.0, 1.0, rng))).collect()
}

/// One random instance of `op`, checked at every coordinate (up to 16 per
/// leaf).
pub fn op_case(op: &str, rng: &mut Rng) -> Result<GradCheckReport> {
    op_case_with_step(op, GRAD_STEP, rng)
}

/// `op_case` with an explicit finite-difference step.
pub fn op_case_with_step(op: &str, step: Real, rng: &mut Rng) -> Result<GradCheckReport> {
    let gap = 20.0 * step as f64;
    let shape = small_shape(rng);
    let seed: u64 = rng.gen();
    let probe = 16;
    macro_rules! check {
        ($leaves:expr, $f:expr) => {{
            let leaves: Vec<Tensor> = $leaves;
            gradcheck(&leaves, $f, step, probe, rng)
        }};
    }
    match op {
        "add" | "sub" | "mul" => {
            let a = param(uniform(shape.clone(), -2.0, 2.0, rng));
            // exercises the single-element broadcast too
            let b_shape = if rng.gen_bool(0.3) { vec![1] } else { shape };
            let b = param(uniform(b_shape, -2.0, 2.0, rng));
            let (x, y) = (a.clone(), b.clone());
            let f = match op {
                "add" => ops::add,
                "sub" => ops::sub,
                _ => ops::mul,
            };
            check!(vec![a, b], || f(&x, &y))
        }
        "div" => {
            let a = param(uniform(shape.clone(), -2.0, 2.0, rng));
            let b = param(signed_away_from_zero(shape, 0.5, 2.0, rng));
            let (x, y) = (a.clone(), b.clone());
            check!(vec![a, b], || ops::div(&x, &y))
        }
        "maximum" | "minimum" => {
            let (a, b) = separated_pair(shape, gap, rng);
            let (a, b) = (param(a), param(b));
            let (x, y) = (a.clone(), b.clone());
            let f = if op == "maximum" { ops::maximum } else { ops::minimum };
            check!(vec![a, b], || f(&x, &y))
        }
        "silu" => {
            // away from the stationary point near -1.28 where the derivative vanishes
            let a = NdArray::from_fn(shape, |_| loop {
                let v: f64 = rng.gen_range(-3.0..3.0);
                if (v + 1.2785).abs() > 0.25 {
                    break v as Real;
                }
            });
            let a = param(a);
            let x = a.clone();
            check!(vec![a], || Ok(ops::silu(&x)))
        }
        "sum" | "mean" => {
            // O(1) outputs; a sum near 20 has an f32 spacing of 2e-6, the
            // same order as the finite-difference resolution at this step
            let a = param(uniform(shape, -1.0, 1.0, rng));
            let x = a.clone();
            let f = if op == "sum" { ops::sum } else { ops::mean };
            check!(vec![a], || Ok(f(&x)))
        }
        "neg" | "exp" | "square" | "atan" | "sigmoid" => {
            let a = param(uniform(shape, -3.0, 3.0, rng));
            let x = a.clone();
            let f: fn(&Tensor) -> Tensor = match op {
                "neg" => ops::neg,
                "exp" => ops::exp,
                "square" => ops::square,
                "atan" => ops::atan,
                _ => ops::sigmoid,
            };
            check!(vec![a], || Ok(f(&x)))
        }
        "mul_scalar" | "add_scalar" => {
            let a = param(uniform(shape, -2.0, 2.0, rng));
            let c = rng.gen_range(-3.0..3.0) as Real;
            let x = a.clone();
            let add = op == "add_scalar";
            check!(vec![a], || Ok(if add { ops::add_scalar(&x, c) } else { ops::mul_scalar(&x, c) }))
        }
        "clamp_min" => {
            let floor = rng.gen_range(-1.0..1.0);
            let a = NdArray::from_fn(shape, |_| {
                let off = rng.gen_range(gap..2.0);
                (floor + if rng.gen_bool(0.5) { off } else { -off }) as Real
            });
            let a = param(a);
            let x = a.clone();
            check!(vec![a], || Ok(ops::clamp_min(&x, floor as Real)))
        }
        "ln" | "sqrt" => {
            let a = param(uniform(shape, 0.5, 3.0, rng));
            let x = a.clone();
            let f = if op == "ln" { ops::ln } else { ops::sqrt };
            check!(vec![a], || Ok(f(&x)))
        }
        "reshape" => {
            let a = param(uniform(shape.clone(), -1.0, 1.0, rng));
            let n: usize = shape.iter().product();
            let x = a.clone();
            check!(vec![a], || ops::reshape(&x, &[n]))
        }
        "gather" => {
            let a = param(uniform(shape.clone(), -1.0, 1.0, rng));
            let n: usize = shape.iter().product();
            let idx: Vec<usize> = (0..rng.gen_range(1..=2 * n)).map(|_| rng.gen_range(0..n)).collect();
            let x = a.clone();
            check!(vec![a], || ops::gather(&x, &idx))
        }
        "channel_affine" => {
            let s = chw(rng);
            let c = s[0];
            let x = param(uniform(s, -2.0, 2.0, rng));
            let scale = param(uniform(vec![c], -2.0, 2.0, rng));
            let bias = param(uniform(vec![c], -1.0, 1.0, rng));
            let (a, b, d) = (x.clone(), scale.clone(), bias.clone());
            check!(vec![x, scale, bias], || ops::channel_affine(&a, &b, &d))
        }
        "spatial_softmax" => {
            // unsaturated, like the sigmoid outputs it weights in fusion
            let x = param(uniform(chw(rng), -1.0, 1.0, rng));
            let a = x.clone();
            check!(vec![x], || ops::spatial_softmax(&a))
        }
        "stack_mean" | "stack_var" => {
            let n = rng.gen_range(2..=5);
            let samples = stack(n, &chw(rng), rng);
            let s = samples.clone();
            let var = op == "stack_var";
            check!(samples, || {
                let (m, v) = ops::stack_mean_var(&s)?;
                Ok(if var { v } else { m })
            })
        }
        "dropout" => {
            let a = param(uniform(shape, -2.0, 2.0, rng));
            let p = rng.gen_range(0.05..0.5) as Real;
            let x = a.clone();
            check!(vec![a], || ops::dropout(&x, p, true, &mut seeded_rng(seed)))
        }
        "bce_with_logits" => {
            let a = param(uniform(shape.clone(), -4.0, 4.0, rng));
            // binary targets, as the objectness loss uses
            let t = NdArray::from_fn(shape, |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
            let x = a.clone();
            check!(vec![a], || ops::bce_with_logits(&x, &t))
        }
        "layer_norm" => {
            // two elements always normalize to +-1, a constant
            let s = vec![rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4)];
            let a = param(uniform(s, -2.0, 2.0, rng));
            let x = a.clone();
            check!(vec![a], || Ok(ops::layer_norm(&x, 1e-5)))
        }
        "conv2d" => {
            let c_in = rng.gen_range(1..=3);
            let c_out = rng.gen_range(1..=3);
            let k = if rng.gen_bool(0.5) { 1 } else { 3 };
            let stride = rng.gen_range(1..=2);
            let padding = rng.gen_range(0..=1);
            let h = rng.gen_range(k..=6);
            let w = rng.gen_range(k..=6);
            let x = param(uniform(vec![c_in, h, w], -1.0, 1.0, rng));
            let kern = param(uniform(vec![c_out, c_in, k, k], -1.0, 1.0, rng));
            let (a, b) = (x.clone(), kern.clone());
            check!(vec![x, kern], || conv2d(&a, &b, stride, padding))
        }
        "ugf_fuse" => {
            let n = rng.gen_range(2..=4);
            let s = chw(rng);
            let fm = stack(n, &s, rng);
            let fa = stack(n, &s, rng);
            let leaves: Vec<Tensor> = fm.iter().chain(&fa).cloned().collect();
            let (m, a) = (fm.clone(), fa.clone());
            check!(leaves, || {
                let fused = ugf_fuse(
                    &FeatureStack { samples: m.clone(), branch: BranchTag::Main },
                    &FeatureStack { samples: a.clone(), branch: BranchTag::Auxiliary },
                    false,
                )?;
                Ok(fused.map)
            })
        }
        "conv_softmax_chain" => {
            // conv -> sigmoid -> spatial softmax; the checker's weighted f64
            // contraction is the final sum
            let c_in = rng.gen_range(1..=3);
            let c_out = rng.gen_range(1..=3);
            let x = param(uniform(vec![c_in, rng.gen_range(3..=6), rng.gen_range(3..=6)], -1.0, 1.0, rng));
            let kern = param(uniform(vec![c_out, c_in, 3, 3], -1.0, 1.0, rng));
            let (a, b) = (x.clone(), kern.clone());
            check!(vec![x, kern], || ops::spatial_softmax(&ops::sigmoid(&conv2d(&a, &b, 1, 1)?)))
        }
        other => panic!("unknown op {other}"),
    }
}

/// Small UGF detector on a 32x32 frame with random ground truth.
pub struct CompositeCase {
    pub cfg: RunConfig,
    pub model: DetectorModel,
    pub inputs: FrameInputs,
    pub gt: Vec<BBox>,
    pub seed: u64,
}

pub fn composite_case(rng: &mut Rng) -> Result<CompositeCase> {
    let mut cfg = RunConfig::default();
    cfg.strategy = FusionStrategy::Ugf;
    cfg.bfe.forward_passes = rng.gen_range(2..=3);
    cfg.bfe.channels = vec![4, 8, 8, 16, 128];
    let model = DetectorModel::new(&cfg, rng)?;
    let (w, h) = (32, 32);
    let inputs = FrameInputs {
        frame_id: "g".into(),
        main: uniform(vec![3, h, w], 0.0, 1.0, rng),
        auxiliary: uniform(vec![3, h, w], 0.0, 1.0, rng),
        image_size: (w, h),
    };
    let gt = (0..rng.gen_range(0..=2))
        .map(|_| {
            let x0 = rng.gen_range(0.0..20.0);
            let y0 = rng.gen_range(0.0..12.0);
            BBox::new(x0, y0, x0 + rng.gen_range(4.0..12.0), y0 + rng.gen_range(8.0..20.0))
        })
        .collect();
    Ok(CompositeCase { cfg, model, inputs, gt, seed: rng.gen() })
}

/// Checks one random coordinate of every parameter leaf of the composite
/// MC-dropout UGF, detection net and loss graph.
pub fn composite_check(case: &CompositeCase, rng: &mut Rng) -> Result<GradCheckReport> {
    let leaves = case.model.parameters();
    gradcheck(
        &leaves,
        || {
            let raw = case.model.forward(&case.inputs, &case.cfg, &mut seeded_rng(case.seed))?;
            detection_loss(&raw, &case.gt, &case.model.anchors, &case.cfg.loss)
        },
        GRAD_STEP,
        1,
        rng,
    )
}

/// Checks one random coordinate of every parameter leaf of the forward graph
/// alone, against each of the three raw head outputs.
pub fn forward_check(case: &CompositeCase, rng: &mut Rng) -> Result<GradCheckReport> {
    let leaves = case.model.parameters();
    let mut report = GradCheckReport::default();
    for scale in 0..3 {
        let r = gradcheck(
            &leaves,
            || Ok(case.model.forward(&case.inputs, &case.cfg, &mut seeded_rng(case.seed))?[scale].clone()),
            GRAD_STEP,
            1,
            rng,
        )?;
        report.samples.extend(r.samples);
    }
    Ok(report)
}
