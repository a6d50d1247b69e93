//! Parameter initialization and the Adam optimizer with stepped decay.

use rand::Rng;

use crate::arch::Param;
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Uniform Xavier/Glorot init on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<T: Element, R: Rng>(
    shape: Shape,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    assert!(fan_in > 0 && fan_out > 0, "fans must be positive");
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with a stepped learning-rate schedule:
/// `lr = base * decay_rate^floor(step / decay_interval)`.
pub struct OptimizerState<T: Element> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: usize,
    pub base_lr: f64,
    pub decay_rate: f64,
    pub decay_interval: usize,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &[Param<T>], base_lr: f64, decay_rate: f64, decay_interval: usize) -> Self {
        OptimizerState {
            m: params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
            step: 0,
            base_lr,
            decay_rate,
            decay_interval,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate applied to the *next* step.
    pub fn effective_lr(&self) -> f64 {
        self.base_lr * self.decay_rate.powi((self.step / self.decay_interval) as i32)
    }

    /// One Adam update. Rejects non-finite gradients without touching the
    /// parameters.
    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Vec<T>]) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        for (p, g) in params.iter().zip(grads) {
            if p.tensor.numel() != g.len() {
                return Err(Error::Invalid(format!(
                    "gradient length {} does not match parameter {} ({})",
                    g.len(),
                    p.name,
                    p.tensor.numel()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "non-finite gradient for parameter {}; step rejected",
                    p.name
                )));
            }
        }
        let lr = T::from_f64(self.effective_lr());
        let b1 = T::from_f64(ADAM_BETA1);
        let b2 = T::from_f64(ADAM_BETA2);
        let eps = T::from_f64(ADAM_EPS);
        let t = self.step as i32 + 1;
        let corr1 = T::from_f64(1.0 - ADAM_BETA1.powi(t));
        let corr2 = T::from_f64(1.0 - ADAM_BETA2.powi(t));
        let one = T::one();
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / corr1;
                let vhat = v[i] / corr2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_param(vals: Vec<f64>) -> Vec<Param<f64>> {
        vec![Param {
            name: "p".to_string(),
            tensor: Tensor::new(Shape::new(vec![vals.len()]), vals).unwrap(),
        }]
    }

    #[test]
    fn xavier_bound_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // fan_in = fan_out = 3 -> bound sqrt(1) = 1
        let t: Tensor<f64> = xavier_init(Shape::new(vec![100_000]), 3, 3, &mut rng);
        let mut sum = 0.0;
        for &v in t.data() {
            assert!((-1.0..1.0).contains(&v));
            sum += v;
        }
        let n = t.numel() as f64;
        let mean = sum / n;
        // uniform(-1,1): sd = 1/sqrt(3); 3 standard errors of the mean
        let se = (1.0 / 3.0f64).sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn xavier_fixed_seed_is_reproducible() {
        let a: Tensor<f64> =
            xavier_init(Shape::new(vec![64]), 8, 8, &mut ChaCha8Rng::seed_from_u64(1));
        let b: Tensor<f64> =
            xavier_init(Shape::new(vec![64]), 8, 8, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn learning_rate_schedule() {
        let mut opt = OptimizerState::<f64>::new(&one_param(vec![0.0]), 1e-3, 0.97, 500);
        assert!((opt.effective_lr() - 1e-3).abs() < 1e-12);
        opt.step = 500;
        assert!((opt.effective_lr() - 9.7e-4).abs() < 1e-12);
        opt.step = 1500;
        assert!((opt.effective_lr() - 1e-3 * 0.97f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(vec![1.0, -2.0, 3.0]);
        let mut opt = OptimizerState::new(&params, 1e-3, 0.97, 500);
        opt.step(&mut params, &[vec![0.0; 3]]).unwrap();
        assert_eq!(params[0].tensor.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn opposite_gradients_move_opposite_ways() {
        let base = one_param(vec![1.0, -1.0]);
        let mut p1 = base.clone();
        let mut p2 = base.clone();
        let mut o1 = OptimizerState::new(&p1, 1e-3, 0.97, 500);
        let mut o2 = OptimizerState::new(&p2, 1e-3, 0.97, 500);
        let g = vec![0.3, -0.7];
        let ng: Vec<f64> = g.iter().map(|v| -v).collect();
        o1.step(&mut p1, &[g]).unwrap();
        o2.step(&mut p2, &[ng]).unwrap();
        for i in 0..2 {
            let d1 = p1[0].tensor.data()[i] - base[0].tensor.data()[i];
            let d2 = p2[0].tensor.data()[i] - base[0].tensor.data()[i];
            assert!((d1 + d2).abs() < 1e-12, "not symmetric: {d1} vs {d2}");
            assert!(d1 != 0.0);
        }
    }

    #[test]
    fn non_finite_gradient_rejected_and_reported() {
        let mut params = one_param(vec![1.0]);
        let mut opt = OptimizerState::new(&params, 1e-3, 0.97, 500);
        let err = opt.step(&mut params, &[vec![f64::NAN]]).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
        assert_eq!(params[0].tensor.data(), &[1.0]);
        assert_eq!(opt.step_count(), 0);
    }
}
