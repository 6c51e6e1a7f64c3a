//! Central finite-difference verification of the engine's analytic gradients.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{Activation, BatchNormMode, PointBatch, RunningStats, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::{self, Rng};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of checking one differentiable operation.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    /// Largest per-parameter relative error `‖g − ĝ‖ / (‖g‖ + ‖ĝ‖)`.
    pub max_rel_error: f64,
    pub parameters: usize,
    pub passed: bool,
}

/// Compares analytic gradients of `build` with central differences for every
/// entry of every parameter.
pub fn check<F>(name: &str, params: &[Tensor<f64>], build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.data).unwrap_or_default())
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).data[0])
    };
    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        let mut diff = 0.0;
        let mut norm_a = 0.0;
        let mut norm_n = 0.0;
        for j in 0..params[k].len() {
            let x0 = params[k].data[j];
            work[k].data[j] = x0 + STEP;
            let up = eval(&work)?;
            work[k].data[j] = x0 - STEP;
            let down = eval(&work)?;
            work[k].data[j] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            diff += (a[j] - numeric).powi(2);
            norm_a += a[j] * a[j];
            norm_n += numeric * numeric;
        }
        let denom = norm_a.sqrt() + norm_n.sqrt();
        let rel = if denom < 1e-12 { diff.sqrt() } else { diff.sqrt() / denom };
        worst = worst.max(rel);
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
        parameters: params.iter().map(Tensor::len).sum(),
        passed: worst < TOLERANCE,
    })
}

fn randn(rng: &mut Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
    Tensor { shape, data }
}

fn targets(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0..2) as f64).collect()
}

/// Nonlinear scalar head used to reduce an op's output: BCE against fixed random targets.
fn head(tape: &mut Tape<f64>, out: Var, y: &[f64]) -> Result<Var> {
    let n = tape.value(out).len();
    let flat = tape.reshape(out, vec![1, n])?;
    tape.bce_with_logits(flat, y)
}

fn points(rng: &mut Rng, batch: usize, n: usize, range: f64) -> PointBatch {
    let coords = (0..batch * n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-range..range)))
        .collect();
    PointBatch { batch, points: n, coords }
}

/// Checks every differentiable operation plus a composite
/// conv → pool → sample → pointwise → loss graph on randomized micro-shapes.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = rng::stream(seed, &[0x6772_6164]);
    let r = &mut rng;
    let mut out = Vec::new();

    let ps = [randn(r, vec![1, 1, 4, 4, 4], 1.0), randn(r, vec![2, 1, 3, 3, 3], 0.3), randn(r, vec![2], 0.1)];
    let y = targets(r, 2 * 64);
    out.push(check("conv3d", &ps, |t, v| {
        let c = t.conv3d(v[0], v[1], v[2])?;
        head(t, c, &y)
    })?);

    let ps = [randn(r, vec![2, 2, 2, 2, 2], 1.0), randn(r, vec![2], 1.0), randn(r, vec![2], 1.0)];
    let y = targets(r, 32);
    out.push(check("batchnorm3d/train", &ps, |t, v| {
        let mut stats = RunningStats::new(2);
        let b = t.batchnorm3d(v[0], v[1], v[2], &mut stats, BatchNormMode::Train, 1e-5)?;
        head(t, b, &y)
    })?);
    out.push(check("batchnorm3d/eval", &ps, |t, v| {
        let mut stats = RunningStats {
            mean: vec![0.3, -0.2],
            var: vec![1.5, 0.7],
            momentum: 0.1,
        };
        let b = t.batchnorm3d(v[0], v[1], v[2], &mut stats, BatchNormMode::Eval, 1e-5)?;
        head(t, b, &y)
    })?);

    let ps = [randn(r, vec![1, 2, 4, 4, 4], 1.0)];
    let y = targets(r, 16);
    out.push(check("maxpool3d", &ps, |t, v| {
        let m = t.maxpool3d(v[0])?;
        head(t, m, &y)
    })?);

    let ps = [randn(r, vec![2, 3, 5], 1.0), randn(r, vec![4, 3], 0.7), randn(r, vec![4], 0.2)];
    let y = targets(r, 40);
    for (name, act) in [("pointwise/relu", Activation::Relu), ("pointwise/none", Activation::None)] {
        out.push(check(name, &ps, |t, v| {
            let p = t.pointwise_layer(v[0], v[1], v[2], act)?;
            head(t, p, &y)
        })?);
    }

    let ps = [randn(r, vec![2, 2, 3, 4, 5], 1.0)];
    let pb = points(r, 2, 7, 1.2);
    let y = targets(r, 28);
    out.push(check("trilinear_sample", &ps, |t, v| {
        let s = t.trilinear_sample(v[0], &pb)?;
        head(t, s, &y)
    })?);

    let ps = [randn(r, vec![4, 8], 2.0)];
    let y = targets(r, 32);
    out.push(check("bce_with_logits", &ps, |t, v| t.bce_with_logits(v[0], &y))?);

    let ps = [randn(r, vec![2, 3, 5], 1.5)];
    let ids: Vec<usize> = (0..10).map(|_| r.random_range(0..3)).collect();
    out.push(check("cross_entropy", &ps, |t, v| t.cross_entropy(v[0], &ids))?);

    let ps = [randn(r, vec![1, 2, 3], 1.0), randn(r, vec![1, 1, 3], 1.0)];
    let y = targets(r, 3);
    out.push(check("relu/concat/select", &ps, |t, v| {
        let c = t.concat_channels(&[v[0], v[1]])?;
        let a = t.relu(c);
        let s = t.select_channel(a, 2)?;
        let s2 = t.select_channel(c, 0)?;
        let sum = t.add(s, s2)?;
        head(t, sum, &y)
    })?);

    let ps = [
        randn(r, vec![1, 1, 4, 4, 4], 1.0),
        randn(r, vec![2, 1, 3, 3, 3], 0.3),
        randn(r, vec![2], 0.1),
        randn(r, vec![3, 3], 0.5),
        randn(r, vec![3], 0.1),
        randn(r, vec![1, 3], 0.5),
        randn(r, vec![1], 0.1),
    ];
    let pb = points(r, 1, 6, 1.0);
    let y = targets(r, 6);
    out.push(check("composite", &ps, |t, v| {
        let c = t.conv3d(v[0], v[1], v[2])?;
        let p = t.maxpool3d(c)?;
        let f0 = t.trilinear_sample(v[0], &pb)?;
        let f1 = t.trilinear_sample(p, &pb)?;
        let f = t.concat_channels(&[f0, f1])?;
        let h = t.pointwise_layer(f, v[3], v[4], Activation::Relu)?;
        let o = t.pointwise_layer(h, v[5], v[6], Activation::None)?;
        head(t, o, &y)
    })?);
    Ok(out)
}
