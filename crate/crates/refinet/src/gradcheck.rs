//! Central finite-difference verification of every backend op's gradients.
//!
//! Each trial builds a random small case, scalarizes the op output through a
//! fixed random weighting, and compares the recorded backward pass against
//! (f(x+eps) - f(x-eps)) / 2eps element by element. The suite runs in the
//! f32 working precision and again in f64 verification mode with a tighter
//! tolerance.

use std::fmt;

use crate::backend::{Real, ResizeDir, SeededRng, Shape, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Random cases per op, per mode.
    pub trials: usize,
    /// Test hook: added to one analytic gradient element per case so the
    /// failure path can be exercised deliberately.
    pub perturbation: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { seed: 0, trials: 20, perturbation: None }
    }
}

#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub max_rel_err_f32: f64,
    pub max_rel_err_f64: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol_f32: f64,
    pub tol_f64: f64,
    pub ops: Vec<OpReport>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.ops.iter().all(|r| r.pass)
    }

    pub fn failing_ops(&self) -> Vec<&'static str> {
        self.ops.iter().filter(|r| !r.pass).map(|r| r.op).collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<18} {:>14} {:>14}  status (tol f32 {:.0e}, f64 {:.0e})",
            "op", "f32 max rel", "f64 max rel", self.tol_f32, self.tol_f64
        )?;
        for r in &self.ops {
            writeln!(
                f,
                "{:<18} {:>14.3e} {:>14.3e}  {}",
                r.op,
                r.max_rel_err_f32,
                r.max_rel_err_f64,
                if r.pass { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

const TOL_F32: f64 = 1e-2;
const TOL_F64: f64 = 1e-4;
const EPS_F32: f64 = 1e-3;
const EPS_F64: f64 = 1e-5;
/// Denominator floor for the relative error, so near-zero gradients are
/// judged on an absolute scale instead of exploding the ratio.
const REL_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq)]
enum OpKind {
    Add,
    Sub,
    Mul,
    Scale { factor: f64 },
    Mean,
    L1Mean,
    Elu,
    Conv3x3,
    FullyConnected,
    Reshape,
    ResizeUp { factor: usize },
    ResizeDown { factor: usize },
    ConcatChannels,
}

const OP_ORDER: [(&str, u8); 13] = [
    ("add", 0),
    ("sub", 1),
    ("mul", 2),
    ("scale", 3),
    ("mean", 4),
    ("l1_mean", 5),
    ("elu", 6),
    ("conv3x3", 7),
    ("fully_connected", 8),
    ("reshape", 9),
    ("resize_up", 10),
    ("resize_down", 11),
    ("concat_channels", 12),
];

struct InputSpec {
    shape: Shape,
    data: Vec<f64>,
    diff: bool,
}

struct Case {
    kind: OpKind,
    inputs: Vec<InputSpec>,
    /// Fixed weights applied before the final mean; empty when the op
    /// already yields a scalar.
    scalarizer: Vec<f64>,
}

pub fn run_suite(opts: &GradCheckOptions) -> GradCheckReport {
    let mut ops = Vec::with_capacity(OP_ORDER.len());
    for (name, tag) in OP_ORDER {
        let e32 = max_error_for_op::<f32>(tag, opts, EPS_F32);
        let e64 = max_error_for_op::<f64>(tag, opts, EPS_F64);
        ops.push(OpReport {
            op: name,
            max_rel_err_f32: e32,
            max_rel_err_f64: e64,
            pass: e32 < TOL_F32 && e64 < TOL_F64,
        });
    }
    GradCheckReport { tol_f32: TOL_F32, tol_f64: TOL_F64, ops }
}

fn max_error_for_op<T: Real>(tag: u8, opts: &GradCheckOptions, eps: f64) -> f64 {
    let mut worst = 0.0f64;
    for trial in 0..opts.trials {
        // Same cases in both precisions: the stream depends only on
        // (seed, op, trial).
        let mut rng = SeededRng::from_seed_and_stream(opts.seed, (tag as u64) << 32 | trial as u64);
        let case = make_case(tag, &mut rng);
        let err = check_case::<T>(&case, eps, opts.perturbation);
        worst = worst.max(err);
    }
    worst
}

fn make_case(tag: u8, rng: &mut SeededRng) -> Case {
    let small_shape = |rng: &mut SeededRng| {
        Shape::new(
            1 + rng.below(2) as usize,
            1 + rng.below(3) as usize,
            1 + rng.below(4) as usize,
            1 + rng.below(4) as usize,
        )
    };
    let fill = |rng: &mut SeededRng, n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..n).map(|_| lo + rng.next_f64() * (hi - lo)).collect()
    };
    // Magnitudes in [0.2, 2] with random sign: away from the |.| and ELU kinks.
    let fill_off_zero = |rng: &mut SeededRng, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let mag = 0.2 + rng.next_f64() * 1.8;
                if rng.below(2) == 0 {
                    mag
                } else {
                    -mag
                }
            })
            .collect()
    };

    let (kind, inputs, out_numel) = match tag {
        0..=2 => {
            let s = small_shape(rng);
            let kind = match tag {
                0 => OpKind::Add,
                1 => OpKind::Sub,
                _ => OpKind::Mul,
            };
            let a = InputSpec { shape: s, data: fill(rng, s.numel(), -2.0, 2.0), diff: true };
            let b = InputSpec { shape: s, data: fill(rng, s.numel(), -2.0, 2.0), diff: true };
            (kind, vec![a, b], s.numel())
        }
        3 => {
            let s = small_shape(rng);
            let factor = 0.25 + rng.next_f64() * 1.5;
            let factor = if rng.below(2) == 0 { factor } else { -factor };
            let a = InputSpec { shape: s, data: fill(rng, s.numel(), -2.0, 2.0), diff: true };
            (OpKind::Scale { factor }, vec![a], s.numel())
        }
        4 => {
            let s = small_shape(rng);
            let a = InputSpec { shape: s, data: fill(rng, s.numel(), -2.0, 2.0), diff: true };
            (OpKind::Mean, vec![a], 1)
        }
        5 => {
            // keep |a - b| bounded away from zero so eps never crosses the kink
            let s = small_shape(rng);
            let a = fill(rng, s.numel(), -2.0, 2.0);
            let b: Vec<f64> = a
                .iter()
                .map(|&v| {
                    let gap = 0.3 + rng.next_f64() * 0.7;
                    if rng.below(2) == 0 {
                        v + gap
                    } else {
                        v - gap
                    }
                })
                .collect();
            let ia = InputSpec { shape: s, data: a, diff: true };
            let ib = InputSpec { shape: s, data: b, diff: true };
            (OpKind::L1Mean, vec![ia, ib], 1)
        }
        6 => {
            let s = small_shape(rng);
            let a = InputSpec { shape: s, data: fill_off_zero(rng, s.numel()), diff: true };
            (OpKind::Elu, vec![a], s.numel())
        }
        7 => {
            let batch = 1 + rng.below(2) as usize;
            let in_ch = 1 + rng.below(3) as usize;
            let out_ch = 1 + rng.below(3) as usize;
            let side = 3 + rng.below(3) as usize;
            let xs = Shape::new(batch, in_ch, side, side);
            let ws = Shape::new(out_ch, in_ch, 3, 3);
            let bs = Shape::new(1, out_ch, 1, 1);
            let x = InputSpec { shape: xs, data: fill(rng, xs.numel(), -1.0, 1.0), diff: true };
            let w = InputSpec { shape: ws, data: fill(rng, ws.numel(), -1.0, 1.0), diff: true };
            let b = InputSpec { shape: bs, data: fill(rng, bs.numel(), -1.0, 1.0), diff: true };
            (OpKind::Conv3x3, vec![x, w, b], batch * out_ch * side * side)
        }
        8 => {
            let batch = 1 + rng.below(3) as usize;
            let n = 2 + rng.below(5) as usize;
            let m = 2 + rng.below(4) as usize;
            let xs = Shape::new(batch, n, 1, 1);
            let ws = Shape::new(1, 1, m, n);
            let bs = Shape::new(1, m, 1, 1);
            let x = InputSpec { shape: xs, data: fill(rng, xs.numel(), -1.5, 1.5), diff: true };
            let w = InputSpec { shape: ws, data: fill(rng, ws.numel(), -1.5, 1.5), diff: true };
            let b = InputSpec { shape: bs, data: fill(rng, bs.numel(), -1.5, 1.5), diff: true };
            (OpKind::FullyConnected, vec![x, w, b], batch * m)
        }
        9 => {
            let s = small_shape(rng);
            let a = InputSpec { shape: s, data: fill(rng, s.numel(), -2.0, 2.0), diff: true };
            (OpKind::Reshape, vec![a], s.numel())
        }
        10 => {
            let factor = 2 + rng.below(2) as usize;
            let s = small_shape(rng);
            let a = InputSpec { shape: s, data: fill(rng, s.numel(), -2.0, 2.0), diff: true };
            (OpKind::ResizeUp { factor }, vec![a], s.numel() * factor * factor)
        }
        11 => {
            let factor = 2 + rng.below(2) as usize;
            let blocks_h = 1 + rng.below(2) as usize;
            let blocks_w = 1 + rng.below(2) as usize;
            let s = Shape::new(
                1 + rng.below(2) as usize,
                1 + rng.below(2) as usize,
                blocks_h * factor,
                blocks_w * factor,
            );
            let a = InputSpec { shape: s, data: fill(rng, s.numel(), -2.0, 2.0), diff: true };
            let out = s.batch * s.channels * blocks_h * blocks_w;
            (OpKind::ResizeDown { factor }, vec![a], out)
        }
        12 => {
            let base = small_shape(rng);
            let ca = 1 + rng.below(3) as usize;
            let cb = 1 + rng.below(3) as usize;
            let sa = Shape::new(base.batch, ca, base.height, base.width);
            let sb = Shape::new(base.batch, cb, base.height, base.width);
            let a = InputSpec { shape: sa, data: fill(rng, sa.numel(), -2.0, 2.0), diff: true };
            let b = InputSpec { shape: sb, data: fill(rng, sb.numel(), -2.0, 2.0), diff: true };
            let out = (ca + cb) * base.batch * base.height * base.width;
            (OpKind::ConcatChannels, vec![a, b], out)
        }
        _ => unreachable!("unknown op tag"),
    };

    let scalarizer = if out_numel == 1 {
        Vec::new()
    } else {
        (0..out_numel).map(|_| 0.5 + rng.next_f64()).collect()
    };
    Case { kind, inputs, scalarizer }
}

fn apply<T: Real>(kind: OpKind, xs: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    match kind {
        OpKind::Add => xs[0].add(&xs[1]),
        OpKind::Sub => xs[0].sub(&xs[1]),
        OpKind::Mul => xs[0].mul(&xs[1]),
        OpKind::Scale { factor } => {
            Ok(xs[0].scale(T::from_f64(factor).expect("factor fits element type")))
        }
        OpKind::Mean => Ok(xs[0].mean()),
        OpKind::L1Mean => xs[0].l1_mean(&xs[1]),
        OpKind::Elu => Ok(xs[0].elu()),
        OpKind::Conv3x3 => xs[0].conv3x3(&xs[1], &xs[2]),
        OpKind::FullyConnected => xs[0].fully_connected(&xs[1], &xs[2]),
        OpKind::Reshape => {
            let s = xs[0].shape();
            xs[0].reshape(Shape::new(s.channels, s.batch, s.width, s.height))
        }
        OpKind::ResizeUp { factor } => xs[0].resize_nearest(factor, ResizeDir::Up),
        OpKind::ResizeDown { factor } => xs[0].resize_nearest(factor, ResizeDir::Down),
        OpKind::ConcatChannels => xs[0].concat_channels(&xs[1]),
    }
}

fn tensor_from<T: Real>(shape: Shape, data: &[f64], param: bool) -> Tensor<T> {
    let cast: Vec<T> = data
        .iter()
        .map(|&v| T::from_f64(v).expect("sample fits element type"))
        .collect();
    if param {
        Tensor::parameter(shape, cast).expect("shape/data agree")
    } else {
        Tensor::from_vec(shape, cast).expect("shape/data agree")
    }
}

/// Evaluate the scalarized loss for finite differencing. The op runs in T,
/// but the scalarizing dot product is accumulated in f64 so that output
/// elements untouched by the perturbed input cancel exactly in the central
/// difference instead of contributing reduction-order rounding noise.
fn loss_value<T: Real>(case: &Case, override_elem: Option<(usize, usize, f64)>) -> f64 {
    let tensors: Vec<Tensor<T>> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut data = spec.data.clone();
            if let Some((input_idx, elem_idx, delta)) = override_elem {
                if input_idx == i {
                    data[elem_idx] += delta;
                }
            }
            tensor_from::<T>(spec.shape, &data, false)
        })
        .collect();
    let out = apply(case.kind, &tensors).expect("case shapes are valid");
    if case.scalarizer.is_empty() {
        return out.item().expect("loss is scalar").to_f64().expect("finite loss");
    }
    let values = out.to_vec();
    let n = values.len() as f64;
    values
        .iter()
        .zip(&case.scalarizer)
        .map(|(v, w)| v.to_f64().expect("finite output") * w)
        .sum::<f64>()
        / n
}

fn scalarize<T: Real>(case: &Case, out: &Tensor<T>) -> Tensor<T> {
    if case.scalarizer.is_empty() {
        return out.clone();
    }
    let weights = tensor_from::<T>(out.shape(), &case.scalarizer, false);
    out.mul(&weights).expect("scalarizer matches output shape").mean()
}

/// Max relative error between analytic and finite-difference gradients over
/// every element of every differentiable input of the case.
fn check_case<T: Real>(case: &Case, eps: f64, perturbation: Option<f64>) -> f64 {
    let tensors: Vec<Tensor<T>> = case
        .inputs
        .iter()
        .map(|spec| tensor_from::<T>(spec.shape, &spec.data, spec.diff))
        .collect();
    let out = apply(case.kind, &tensors).expect("case shapes are valid");
    let loss = scalarize(case, &out);
    loss.backward().expect("scalar loss");

    let mut worst = 0.0f64;
    let mut first = true;
    for (i, spec) in case.inputs.iter().enumerate() {
        if !spec.diff {
            continue;
        }
        let analytic = tensors[i]
            .grad()
            .map(|g| g.iter().map(|v| v.to_f64().expect("finite grad")).collect::<Vec<f64>>())
            .unwrap_or_else(|| vec![0.0; spec.data.len()]);
        for (elem, &an_elem) in analytic.iter().enumerate() {
            let up = loss_value::<T>(case, Some((i, elem, eps)));
            let down = loss_value::<T>(case, Some((i, elem, -eps)));
            let fd = (up - down) / (2.0 * eps);
            let mut an = an_elem;
            if first {
                if let Some(p) = perturbation {
                    an += p;
                }
                first = false;
            }
            let denom = fd.abs().max(an.abs()).max(REL_FLOOR);
            worst = worst.max((fd - an).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_both_modes() {
        let report = run_suite(&GradCheckOptions { seed: 11, trials: 5, perturbation: None });
        assert!(report.all_pass(), "failing ops: {:?}\n{report}", report.failing_ops());
    }

    #[test]
    fn perturbed_gradients_are_caught() {
        let report = run_suite(&GradCheckOptions {
            seed: 11,
            trials: 2,
            perturbation: Some(1.0),
        });
        assert!(!report.all_pass());
    }

    #[test]
    fn report_is_deterministic_for_a_seed() {
        let opts = GradCheckOptions { seed: 5, trials: 3, perturbation: None };
        let a = format!("{}", run_suite(&opts));
        let b = format!("{}", run_suite(&opts));
        assert_eq!(a, b);
    }
}
