use serde::{Deserialize, Serialize};

use super::{matmul, Op, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::continuous_index;

/// Query points for a batch: `batch × points` normalized `(x, y, z)` coordinates,
/// batch-major. `x` indexes the fastest (W) grid axis, `z` the slowest (D).
#[derive(Debug, Clone, PartialEq)]
pub struct PointBatch {
    pub batch: usize,
    pub points: usize,
    pub coords: Vec<[f64; 3]>,
}

impl PointBatch {
    pub fn new(batch: usize, points: usize, coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.len() != batch * points {
            return Err(Error::invalid(format!(
                "{} coordinates for a {batch}×{points} point batch",
                coords.len()
            )));
        }
        if coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("query coordinates must be finite"));
        }
        Ok(Self { batch, points, coords })
    }

    pub fn single(coords: Vec<[f64; 3]>) -> Self {
        Self {
            batch: 1,
            points: coords.len(),
            coords,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// Lower corner and fractional offset along one axis, clamped to the edge voxels.
fn axis_cell(n: f64, d: usize) -> (usize, f64) {
    if d == 1 {
        return (0, 0.0);
    }
    let c = continuous_index(n, d).clamp(0.0, (d - 1) as f64);
    let i0 = (c.floor() as usize).min(d - 2);
    (i0, c - i0 as f64)
}

impl<T: Scalar> Tape<T> {
    /// Trilinear interpolation of `[N, C, D, H, W]` at continuous points,
    /// giving `[N, C, P]`. Differentiable with respect to the grid only.
    pub fn trilinear_sample(&mut self, grid: Var, points: &PointBatch) -> Result<Var> {
        let shape = self.shape(grid).to_vec();
        let [n, c, d, h, w] = shape[..] else {
            return Err(Error::invalid(format!("trilinear_sample expects [N, C, D, H, W], got {shape:?}")));
        };
        if points.batch != n {
            return Err(Error::invalid(format!("{} point sets for a batch of {n}", points.batch)));
        }
        let p = points.points;
        let s = d * h * w;
        let mut corners = Vec::with_capacity(n * p * 8);
        let mut weights = Vec::with_capacity(n * p * 8);
        for q in &points.coords {
            let (x0, fx) = axis_cell(q[0], w);
            let (y0, fy) = axis_cell(q[1], h);
            let (z0, fz) = axis_cell(q[2], d);
            let (sx, sy, sz) = ((w > 1) as usize, (h > 1) as usize, (d > 1) as usize);
            for k in 0..8 {
                let (bx, by, bz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
                let wx = if bx == 1 { fx } else { 1.0 - fx };
                let wy = if by == 1 { fy } else { 1.0 - fy };
                let wz = if bz == 1 { fz } else { 1.0 - fz };
                let off = ((z0 + bz * sz) * h + y0 + by * sy) * w + x0 + bx * sx;
                corners.push(off as u32);
                weights.push(T::of(wx * wy * wz));
            }
        }
        let g = &self.value(grid).data;
        let mut out = vec![T::zero(); n * c * p];
        for b in 0..n {
            for ch in 0..c {
                let plane = &g[(b * c + ch) * s..(b * c + ch + 1) * s];
                let dst = &mut out[(b * c + ch) * p..(b * c + ch + 1) * p];
                for (j, o) in dst.iter_mut().enumerate() {
                    let base = (b * p + j) * 8;
                    let mut acc = T::zero();
                    for k in 0..8 {
                        acc = acc + weights[base + k] * plane[corners[base + k] as usize];
                    }
                    *o = acc;
                }
            }
        }
        let rg = self.any_grad(&[grid]);
        Ok(self.push(
            Tensor {
                shape: vec![n, c, p],
                data: out,
            },
            rg,
            Op::Trilinear { grid, corners, weights },
        ))
    }

    /// Per-point affine map shared over the point axis (a 1×1 convolution):
    /// `[N, F, P] → [N, G, P]` with `weight [G, F]` and `bias [G]`.
    pub fn pointwise_layer(&mut self, input: Var, weight: Var, bias: Var, activation: Activation) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let [n, f, p] = s[..] else {
            return Err(Error::invalid(format!("pointwise layer expects [N, F, P], got {s:?}")));
        };
        if ws.len() != 2 || ws[1] != f || self.shape(bias) != [ws[0]] {
            return Err(Error::invalid(format!(
                "pointwise layer: weight {ws:?} / bias {:?} for {f} input features",
                self.shape(bias)
            )));
        }
        let gdim = ws[0];
        let x = &self.value(input).data;
        let wt = &self.value(weight).data;
        let b = &self.value(bias).data;
        let mut out = vec![T::zero(); n * gdim * p];
        for bi in 0..n {
            let o = &mut out[bi * gdim * p..(bi + 1) * gdim * p];
            for (row, chunk) in o.chunks_exact_mut(p.max(1)).enumerate().take(gdim) {
                chunk.fill(b[row]);
            }
            matmul(gdim, f, p, wt, false, &x[bi * f * p..(bi + 1) * f * p], false, o, true);
        }
        let relu = activation == Activation::Relu;
        if relu {
            for v in &mut out {
                *v = v.max(T::zero());
            }
        }
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            Tensor {
                shape: vec![n, gdim, p],
                data: out,
            },
            rg,
            Op::Pointwise {
                input,
                weight,
                bias,
                relu,
            },
        ))
    }
}

pub(super) fn trilinear_backward<T: Scalar>(tape: &mut Tape<T>, grid: Var, corners: &[u32], weights: &[T], g: &[T]) {
    let shape = tape.shape(grid).to_vec();
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let p = corners.len() / (8 * n.max(1));
    let mut gg = vec![T::zero(); n * c * s];
    for b in 0..n {
        for ch in 0..c {
            let plane = &mut gg[(b * c + ch) * s..(b * c + ch + 1) * s];
            let src = &g[(b * c + ch) * p..(b * c + ch + 1) * p];
            for (j, &gv) in src.iter().enumerate() {
                let base = (b * p + j) * 8;
                for k in 0..8 {
                    let idx = corners[base + k] as usize;
                    plane[idx] = plane[idx] + weights[base + k] * gv;
                }
            }
        }
    }
    tape.accumulate_owned(grid, gg);
}

pub(super) fn pointwise_backward<T: Scalar>(
    tape: &mut Tape<T>,
    node: usize,
    input: Var,
    weight: Var,
    bias: Var,
    relu: bool,
    g: &[T],
) {
    let [n, f, p] = tape.shape(input)[..] else { unreachable!() };
    let gdim = tape.shape(weight)[0];
    let masked: Vec<T>;
    let g = if relu {
        let y = &tape.nodes[node].value.data;
        masked = g
            .iter()
            .zip(y)
            .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
            .collect();
        &masked[..]
    } else {
        g
    };
    if tape.requires_grad(bias) {
        let mut gb = vec![T::zero(); gdim];
        for bi in 0..n {
            for (row, acc) in gb.iter_mut().enumerate() {
                let off = (bi * gdim + row) * p;
                *acc = *acc + g[off..off + p].iter().copied().sum::<T>();
            }
        }
        tape.accumulate_owned(bias, gb);
    }
    if tape.requires_grad(weight) {
        let x = &tape.value(input).data;
        let mut gw = vec![T::zero(); gdim * f];
        for bi in 0..n {
            matmul(
                gdim,
                p,
                f,
                &g[bi * gdim * p..(bi + 1) * gdim * p],
                false,
                &x[bi * f * p..(bi + 1) * f * p],
                true,
                &mut gw,
                true,
            );
        }
        tape.accumulate_owned(weight, gw);
    }
    if tape.requires_grad(input) {
        let wt = &tape.value(weight).data;
        let mut gx = vec![T::zero(); n * f * p];
        for bi in 0..n {
            matmul(
                f,
                gdim,
                p,
                wt,
                true,
                &g[bi * gdim * p..(bi + 1) * gdim * p],
                false,
                &mut gx[bi * f * p..(bi + 1) * f * p],
                false,
            );
        }
        tape.accumulate_owned(input, gx);
    }
}
