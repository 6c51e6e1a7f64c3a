use super::{Op, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    /// Mean binary cross-entropy on logits, in the stable form
    /// `max(x, 0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let x = &self.value(logits).data;
        if x.len() != targets.len() || x.is_empty() {
            return Err(Error::invalid(format!(
                "bce: {} logits against {} targets",
                x.len(),
                targets.len()
            )));
        }
        let mut total = 0.0f64;
        for (&l, &y) in x.iter().zip(targets) {
            let (l, y) = (l.f64(), y.f64());
            total += l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
        }
        let loss = T::of(total / x.len() as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::Bce {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy over `[b, K, n]` logits with class ids in `0..K`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [b, k, n] = shape[..] else {
            return Err(Error::invalid(format!("cross_entropy expects [b, K, n] logits, got {shape:?}")));
        };
        if targets.len() != b * n || targets.is_empty() {
            return Err(Error::invalid(format!("cross_entropy: {} targets for {b}×{n} points", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("class id {bad} out of range 0..{k}")));
        }
        let x = &self.value(logits).data;
        let mut probs = vec![T::zero(); x.len()];
        let mut total = 0.0f64;
        for bi in 0..b {
            for j in 0..n {
                let at = |c: usize| (bi * k + c) * n + j;
                let m = (0..k).map(|c| x[at(c)].f64()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (x[at(c)].f64() - m).exp()).sum();
                for c in 0..k {
                    probs[at(c)] = T::of((x[at(c)].f64() - m).exp() / z);
                }
                let t = targets[bi * n + j];
                total += m + z.ln() - x[at(t)].f64();
            }
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::of(total / (b * n) as f64)),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }
}

pub(super) fn bce_backward<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[T], g: T) {
    let m = T::of(targets.len() as f64);
    let gx: Vec<T> = tape
        .value(logits)
        .data
        .iter()
        .zip(targets)
        .map(|(&x, &y)| g * (sigmoid(x) - y) / m)
        .collect();
    tape.accumulate_owned(logits, gx);
}

pub(super) fn cross_entropy_backward<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize], probs: &[T], g: T) {
    let [b, k, n] = tape.shape(logits)[..] else { unreachable!() };
    let scale = g / T::of((b * n) as f64);
    let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for bi in 0..b {
        for j in 0..n {
            let idx = (bi * k + targets[bi * n + j]) * n + j;
            gx[idx] = gx[idx] - scale;
        }
    }
    tape.accumulate_owned(logits, gx);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn bce(logits: Vec<f64>, targets: &[f64]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let n = logits.len();
        let x = tape.param(Tensor::new(vec![1, n], logits).unwrap());
        let l = tape.bce_with_logits(x, targets).unwrap();
        tape.value(l).data[0]
    }

    #[test]
    fn bce_examples() {
        assert!((bce(vec![0.0], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce(vec![20.0], &[1.0]) < 1e-8);
        assert!(bce(vec![-1000.0], &[1.0]).is_finite());
    }

    #[test]
    fn bce_matches_naive_formula() {
        let mut rng = crate::rng::seeded(3);
        let logits: Vec<f64> = (0..32).map(|_| rng.random_range(-6.0..6.0)).collect();
        let targets: Vec<f64> = (0..32).map(|_| rng.random_range(0..2) as f64).collect();
        let naive = logits
            .iter()
            .zip(&targets)
            .map(|(&x, &y)| {
                let s = 1.0 / (1.0 + (-x).exp());
                -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / 32.0;
        assert!((bce(logits, &targets) - naive).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(vec![1, 3, 2]));
        let l = tape.cross_entropy(x, &[0, 2]).unwrap();
        assert!((tape.value(l).data[0] - 3f64.ln()).abs() < 1e-15);

        let x = tape.param(Tensor::new(vec![1, 3, 1], vec![0.0, 50.0, 0.0]).unwrap());
        let l = tape.cross_entropy(x, &[1]).unwrap();
        assert!(tape.value(l).data[0] < 1e-20);
        assert!(tape.cross_entropy(x, &[3]).is_err());
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_target() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap());
        let l = tape.bce_with_logits(x, &[1.0, 0.0]).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap().data;
        assert!((g[0] - (-0.25)).abs() < 1e-15);
        assert!((g[1] - sigmoid(2.0) / 2.0).abs() < 1e-15);
    }
}
