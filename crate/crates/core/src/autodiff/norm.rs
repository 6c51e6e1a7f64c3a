use serde::{Deserialize, Serialize};

use super::{Op, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel running statistics updated in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::of(0.1),
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Batch normalization over `[N, C, ...]`, per channel `C`.
    ///
    /// Train mode normalizes with the biased batch variance and folds the batch
    /// mean and unbiased variance into `stats` with the configured momentum.
    /// Eval mode normalizes with `stats`.
    pub fn batchnorm3d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BatchNormMode,
        eps: T,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid(format!("batchnorm expects [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return Err(Error::invalid(format!("batchnorm: affine/statistics size mismatch for {c} channels")));
        }
        let count = n * s;
        let train = mode == BatchNormMode::Train;
        if train && count < 2 {
            return Err(Error::invalid("batchnorm train mode needs at least 2 values per channel"));
        }
        let x = &self.value(input).data;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut sum = 0.0f64;
                for bi in 0..n {
                    let off = (bi * c + ch) * s;
                    sum += x[off..off + s].iter().map(|v| v.f64()).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0f64;
                for bi in 0..n {
                    let off = (bi * c + ch) * s;
                    sq += x[off..off + s].iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>();
                }
                let var = sq / count as f64;
                let m = stats.momentum;
                stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * T::of(mean);
                let unbiased = sq / (count - 1) as f64;
                stats.var[ch] = (T::one() - m) * stats.var[ch] + m * T::of(unbiased);
                (T::of(mean), T::of(var))
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for bi in 0..n {
                let off = (bi * c + ch) * s;
                for j in off..off + s {
                    let h = (x[j] - mean) * is;
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            Tensor { shape, data: out },
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batchnorm_backward<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    g: &[T],
) {
    let shape = tape.shape(input).to_vec();
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let count = T::of((n * s) as f64);
    let gam = tape.value(gamma).data.clone();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for bi in 0..n {
            let off = (bi * c + ch) * s;
            for j in off..off + s {
                dgamma[ch] = dgamma[ch] + g[j] * xhat[j];
                dbeta[ch] = dbeta[ch] + g[j];
            }
        }
    }
    if tape.requires_grad(input) {
        let mut gx = vec![T::zero(); g.len()];
        for ch in 0..c {
            let scale = gam[ch] * inv_std[ch];
            for bi in 0..n {
                let off = (bi * c + ch) * s;
                for j in off..off + s {
                    gx[j] = if train {
                        // d x = γ/σ · (dy − mean(dy) − x̂ · mean(dy · x̂))
                        scale * (g[j] - dbeta[ch] / count - xhat[j] * dgamma[ch] / count)
                    } else {
                        scale * g[j]
                    };
                }
            }
        }
        tape.accumulate_owned(input, gx);
    }
    tape.accumulate_owned(gamma, dgamma);
    tape.accumulate_owned(beta, dbeta);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(v: &[f64]) -> (f64, f64) {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
        (m, var)
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 8).map(|i| ((i * 7919) % 13) as f64 * 0.5 - 2.0).collect();
        let x = tape.constant(Tensor::new(vec![2, 3, 2, 2, 2], data).unwrap());
        let g = tape.param(Tensor::full(vec![3], 1.0));
        let b = tape.param(Tensor::zeros(vec![3]));
        let mut stats = RunningStats::new(3);
        let y = tape.batchnorm3d(x, g, b, &mut stats, BatchNormMode::Train, 1e-12).unwrap();
        let out = &tape.value(y).data;
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|bi| out[(bi * 3 + ch) * 8..(bi * 3 + ch + 1) * 8].to_vec()).collect();
            let (m, v) = moments(&vals);
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5, "{m} {v}");
        }
        // running stats moved toward the batch statistics
        assert!(stats.mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn affine_parameters_shift_and_scale() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..16).map(|i| (i as f64).sqrt()).collect();
        let x = tape.constant(Tensor::new(vec![2, 1, 2, 2, 2], data).unwrap());
        let g = tape.param(Tensor::full(vec![1], 2.0));
        let b = tape.param(Tensor::full(vec![1], 3.0));
        let mut stats = RunningStats::new(1);
        let y = tape.batchnorm3d(x, g, b, &mut stats, BatchNormMode::Train, 1e-12).unwrap();
        let (m, v) = moments(&tape.value(y).data);
        assert!((m - 3.0).abs() < 1e-9);
        assert!((v.sqrt() - 2.0).abs() < 1e-5);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 1, 2], vec![3.0, 5.0]).unwrap());
        let g = tape.param(Tensor::full(vec![1], 1.0));
        let b = tape.param(Tensor::zeros(vec![1]));
        let mut stats = RunningStats { mean: vec![1.0], var: vec![4.0], momentum: 0.1 };
        let y = tape.batchnorm3d(x, g, b, &mut stats, BatchNormMode::Eval, 0.0).unwrap();
        assert_eq!(tape.value(y).data, vec![1.0, 2.0]);
        assert_eq!(stats.mean, vec![1.0]);
    }

    #[test]
    fn zero_variance_is_handled_by_epsilon() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 2, 2, 2], 4.0));
        let g = tape.param(Tensor::full(vec![1], 1.0));
        let b = tape.param(Tensor::zeros(vec![1]));
        let mut stats = RunningStats::new(1);
        let y = tape.batchnorm3d(x, g, b, &mut stats, BatchNormMode::Train, 1e-5).unwrap();
        assert!(tape.value(y).data.iter().all(|&v| v == 0.0));
    }
}
