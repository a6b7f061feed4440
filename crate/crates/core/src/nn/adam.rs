use serde::{Deserialize, Serialize};

use super::{Mlp, MlpGradients, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for one network, with bias-corrected updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    first: Vec<T>,
    second: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, net: &Mlp<T>) -> Self {
        let n = net.spec().param_count();
        Adam {
            config,
            step: 0,
            first: vec![T::zero(); n],
            second: vec![T::zero(); n],
        }
    }

    /// Restores optimizer state saved with [`Adam::state`].
    pub fn from_state(config: AdamConfig, step: u64, first: Vec<T>, second: Vec<T>) -> Self {
        assert_eq!(first.len(), second.len());
        Adam {
            config,
            step,
            first,
            second,
        }
    }

    pub fn state(&self) -> (u64, &[T], &[T]) {
        (self.step, &self.first, &self.second)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, net: &mut Mlp<T>, grads: &MlpGradients<T>, lr: f64) {
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let step_size = T::of(lr / correction1);
        let sqrt_c2 = T::of(correction2.sqrt());
        let eps = T::of(epsilon);

        let mut at = 0;
        for (params, grad) in net.params_mut().zip(grads.slices()) {
            for (p, &g) in params.iter_mut().zip(grad) {
                let m = &mut self.first[at];
                let v = &mut self.second[at];
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v).sqrt() / sqrt_c2 + eps);
                at += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{MlpSpec, OutputRange};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> Mlp<f64> {
        let spec = MlpSpec {
            input_dim: 1,
            output_dim: 1,
            hidden_width: 4,
            hidden_layers: 1,
            frequency_bands: 1,
            output_range: OutputRange::UNIT,
        };
        Mlp::new(spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_weights_unchanged() {
        let mut n = net();
        let before = n.clone();
        let mut adam = Adam::new(AdamConfig::default(), &n);
        let zero = MlpGradients::zeros_like(&n);
        for _ in 0..5 {
            adam.update(&mut n, &zero, 1e-2);
        }
        assert_eq!(n, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut n = net();
        let before = n.flat_params();
        let mut adam = Adam::new(AdamConfig::default(), &n);
        let mut g = MlpGradients::zeros_like(&n);
        g.biases[0][0] = 3.0;
        adam.update(&mut n, &g, 1e-3);
        let after = n.flat_params();
        // bias 0 of layer 0 sits right after the 3x4 weight block
        let idx = 3 * 4;
        assert!(((before[idx] - after[idx]) - 1e-3).abs() < 1e-9);
    }
}
