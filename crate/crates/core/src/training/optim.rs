//! Adam with decoupled weight decay.

use crate::error::{Result, VleError};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One update. A missing gradient counts as zero.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(VleError::contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_m_b1, one_m_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let bias1 = T::lit(1.0 - c.beta1.powf(self.step as f64));
        let bias2 = T::lit(1.0 - c.beta2.powf(self.step as f64));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let decay = T::lit(c.lr * c.weight_decay);

        for (i, p) in params.iter_mut().enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let g = grads[i];
            if let Some(g) = g {
                g.expect_shape(p.shape())?;
            }
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + one_m_b1 * gj;
                v[j] = b2 * v[j] + one_m_b2 * gj * gj;
                let mhat = m[j] / bias1;
                let vhat = v[j] / bias2;
                *w -= decay * *w;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let mut params = vec![Tensor::from_vec(&[3], vec![0.5f32, -1.25, 3.0]).unwrap()];
        let before = params.clone();
        let g = Tensor::from_vec(&[3], vec![1.0f32, -2.0, 0.1]).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.0, weight_decay: 0.1, ..AdamConfig::default() }, &params);
        for _ in 0..5 {
            opt.update(&mut params, &[Some(&g)]).unwrap();
        }
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&params[0]), bits(&before[0]));
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = vec![Tensor::from_vec(&[2], vec![1.0f64, 1.0]).unwrap()];
        let g = Tensor::from_vec(&[2], vec![4.0f64, -0.5]).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, eps: 0.0, ..AdamConfig::default() }, &params);
        opt.update(&mut params, &[Some(&g)]).unwrap();
        assert!((params[0].data()[0] - 0.9).abs() < 1e-12);
        assert!((params[0].data()[1] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = vec![Tensor::from_vec(&[1], vec![5.0f64]).unwrap()];
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &params);
        for _ in 0..500 {
            let g = params[0].map(|x| 2.0 * (x - 1.0));
            opt.update(&mut params, &[Some(&g)]).unwrap();
        }
        assert!((params[0].data()[0] - 1.0).abs() < 1e-2);
    }
}
