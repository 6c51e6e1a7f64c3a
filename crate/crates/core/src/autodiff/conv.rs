//! 3×3×3 convolution (zero padding 1, stride 1) and 2×2×2 max pooling on
//! `[N, C, D, H, W]` tensors.

use super::{matmul, Op, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

const TAPS: usize = 27;

fn spatial(shape: &[usize]) -> Result<[usize; 5]> {
    match *shape {
        [n, c, d, h, w] if d > 0 && h > 0 && w > 0 => Ok([n, c, d, h, w]),
        _ => Err(Error::invalid(format!("expected [N, C, D, H, W] tensor, got {shape:?}"))),
    }
}

/// Unfolds one `[C, D, H, W]` volume into `[C·27, D·H·W]` columns.
fn im2col<T: Scalar>(x: &[T], c: usize, [d, h, w]: [usize; 3], cols: &mut [T]) {
    let s = d * h * w;
    for ch in 0..c {
        let src = &x[ch * s..(ch + 1) * s];
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ((ch * 3 + kz) * 3 + ky) * 3 + kx;
                    let dst = &mut cols[row * s..(row + 1) * s];
                    for z in 0..d {
                        let zz = z as isize + kz as isize - 1;
                        for y in 0..h {
                            let yy = y as isize + ky as isize - 1;
                            let out = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                            if zz < 0 || zz >= d as isize || yy < 0 || yy >= h as isize {
                                out.fill(T::zero());
                                continue;
                            }
                            let line = &src[(zz as usize * h + yy as usize) * w..][..w];
                            match kx {
                                0 => {
                                    out[0] = T::zero();
                                    out[1..].copy_from_slice(&line[..w - 1]);
                                }
                                1 => out.copy_from_slice(line),
                                _ => {
                                    out[..w - 1].copy_from_slice(&line[1..]);
                                    out[w - 1] = T::zero();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds column gradients back onto the volume.
fn col2im<T: Scalar>(cols: &[T], c: usize, [d, h, w]: [usize; 3], x: &mut [T]) {
    let s = d * h * w;
    for ch in 0..c {
        let dst = &mut x[ch * s..(ch + 1) * s];
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ((ch * 3 + kz) * 3 + ky) * 3 + kx;
                    let src = &cols[row * s..(row + 1) * s];
                    for z in 0..d {
                        let zz = z as isize + kz as isize - 1;
                        if zz < 0 || zz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            let g = &src[(z * h + y) * w..][..w];
                            let line = &mut dst[(zz as usize * h + yy as usize) * w..][..w];
                            match kx {
                                0 => {
                                    for i in 1..w {
                                        line[i - 1] = line[i - 1] + g[i];
                                    }
                                }
                                1 => {
                                    for i in 0..w {
                                        line[i] = line[i] + g[i];
                                    }
                                }
                                _ => {
                                    for i in 0..w - 1 {
                                        line[i + 1] = line[i + 1] + g[i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation with a `[K, C, 3, 3, 3]` kernel and `[K]` bias.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, c, d, h, w] = spatial(self.shape(input))?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 5 || ws[1] != c || ws[2..] != [3, 3, 3] {
            return Err(Error::invalid(format!("conv3d: weight {ws:?} for input channels {c}")));
        }
        let k = ws[0];
        if self.shape(bias) != [k] {
            return Err(Error::invalid(format!("conv3d: bias {:?} for {k} filters", self.shape(bias))));
        }
        let s = d * h * w;
        let rows = c * TAPS;
        let mut cols = vec![T::zero(); n * rows * s];
        let mut out = vec![T::zero(); n * k * s];
        {
            let x = &self.value(input).data;
            let wt = &self.value(weight).data;
            let b = &self.value(bias).data;
            for bi in 0..n {
                let col = &mut cols[bi * rows * s..(bi + 1) * rows * s];
                im2col(&x[bi * c * s..(bi + 1) * c * s], c, [d, h, w], col);
                let o = &mut out[bi * k * s..(bi + 1) * k * s];
                for (kk, chunk) in o.chunks_exact_mut(s).enumerate() {
                    chunk.fill(b[kk]);
                }
                matmul(k, rows, s, wt, false, col, false, o, true);
            }
        }
        let rg = self.any_grad(&[input, weight, bias]);
        if !rg {
            cols = Vec::new();
        }
        let value = Tensor {
            shape: vec![n, k, d, h, w],
            data: out,
        };
        Ok(self.push(
            value,
            rg,
            Op::Conv3d {
                input,
                weight,
                bias,
                cols,
            },
        ))
    }

    /// 2×2×2 max pooling with stride 2. Ties go to the lowest flat index.
    pub fn maxpool3d(&mut self, input: Var) -> Result<Var> {
        let [n, c, d, h, w] = spatial(self.shape(input))?;
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!(
                "maxpool3d needs even spatial dims, got {:?}",
                [d, h, w]
            )));
        }
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let x = &self.value(input).data;
        let mut out = Vec::with_capacity(n * c * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..n * c {
            let base = plane * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut best = base + ((2 * z) * h + 2 * y) * w + 2 * xo;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let j = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx;
                                    if x[j] > x[best] {
                                        best = j;
                                    }
                                }
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best as u32);
                    }
                }
            }
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor {
                shape: vec![n, c, od, oh, ow],
                data: out,
            },
            rg,
            Op::MaxPool { input, argmax },
        ))
    }
}

pub(super) fn conv3d_backward<T: Scalar>(tape: &mut Tape<T>, input: Var, weight: Var, bias: Var, cols: &[T], g: &[T]) {
    let [n, c, d, h, w] = spatial(tape.shape(input)).expect("validated in forward");
    let k = tape.shape(weight)[0];
    let s = d * h * w;
    let rows = c * TAPS;
    if tape.requires_grad(bias) {
        let mut gb = vec![T::zero(); k];
        for bi in 0..n {
            for (kk, acc) in gb.iter_mut().enumerate() {
                let off = (bi * k + kk) * s;
                *acc = *acc + g[off..off + s].iter().copied().sum::<T>();
            }
        }
        tape.accumulate_owned(bias, gb);
    }
    if tape.requires_grad(weight) {
        let mut gw = vec![T::zero(); k * rows];
        for bi in 0..n {
            let go = &g[bi * k * s..(bi + 1) * k * s];
            let col = &cols[bi * rows * s..(bi + 1) * rows * s];
            matmul(k, s, rows, go, false, col, true, &mut gw, true);
        }
        tape.accumulate_owned(weight, gw);
    }
    if tape.requires_grad(input) {
        let wt = tape.value(weight).data.clone();
        let mut gx = vec![T::zero(); n * c * s];
        let mut gcols = vec![T::zero(); rows * s];
        for bi in 0..n {
            let go = &g[bi * k * s..(bi + 1) * k * s];
            matmul(rows, k, s, &wt, true, go, false, &mut gcols, false);
            col2im(&gcols, c, [d, h, w], &mut gx[bi * c * s..(bi + 1) * c * s]);
        }
        tape.accumulate_owned(input, gx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 4 * 3 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(t(vec![1, 2, 4, 3, 5], data.clone()));
        let mut wdata = vec![0.0; 2 * 2 * 27];
        wdata[13] = 1.0; // filter 0 reads channel 0 centre
        wdata[2 * 27 + 27 + 13] = 1.0; // filter 1 reads channel 1 centre
        let wv = tape.param(t(vec![2, 2, 3, 3, 3], wdata));
        let b = tape.param(Tensor::zeros(vec![2]));
        let y = tape.conv3d(x, wv, b).unwrap();
        assert_eq!(tape.value(y).data, data);
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 5, 5, 5], 1.0));
        let wv = tape.param(Tensor::full(vec![1, 1, 3, 3, 3], 1.0));
        let b = tape.param(Tensor::zeros(vec![1]));
        let y = tape.conv3d(x, wv, b).unwrap();
        let v = &tape.value(y).data;
        assert_eq!(v[(2 * 5 + 2) * 5 + 2], 27.0);
        assert_eq!(v[0], 8.0);
    }

    #[test]
    fn conv_rejects_mismatched_weight() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 2, 2, 2]));
        let wv = tape.param(Tensor::zeros(vec![1, 3, 3, 3, 3]));
        let b = tape.param(Tensor::zeros(vec![1]));
        assert!(tape.conv3d(x, wv, b).is_err());
    }

    #[test]
    fn maxpool_values_and_onehot_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(vec![1, 1, 2, 2, 2], (0..8).map(|i| i as f64).collect()));
        let y = tape.maxpool3d(x).unwrap();
        assert_eq!(tape.value(y).data, vec![7.0]);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(vec![1, 2, 4, 4, 4], 3.0));
        let y = tape.maxpool3d(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 2, 2]);
        assert!(tape.value(y).data.iter().all(|&v| v == 3.0));
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap().data;
        // ties: the first element of each window
        assert_eq!(g[0], 1.0);
        assert_eq!(g[1], 0.0);
        assert_eq!(g.iter().sum::<f64>(), 16.0);
        let odd = tape.constant(Tensor::zeros(vec![1, 1, 3, 2, 2]));
        assert!(tape.maxpool3d(odd).is_err());
    }
}
