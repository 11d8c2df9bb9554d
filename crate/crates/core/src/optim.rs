//! Adam with L2 weight decay and the polynomial learning-rate schedule.

use alloc::vec::Vec;

use crate::error::{config_err, dim_err, Result};
use crate::math;
use crate::tensor::Tensor;

/// `lr0 * (1 - epoch / epochs)^power`.
pub fn poly_lr(epoch: usize, epochs: usize, lr0: f64, power: f64) -> Result<f64> {
    if epochs == 0 || epoch > epochs {
        return Err(config_err!("poly_lr: epoch {epoch} outside 0..={epochs}"));
    }
    Ok(lr0 * math::powf(1.0 - epoch as f64 / epochs as f64, power))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamSlot {
    pub fn new(len: usize) -> Self {
        Self {
            m: alloc::vec![0.0; len],
            v: alloc::vec![0.0; len],
        }
    }
}

/// Optimizer state: one slot per parameter plus the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            config,
            step: 0,
            slots: sizes.into_iter().map(AdamSlot::new).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter. The weight decay term
    /// `wd * param` is added to the gradient before the moments.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(dim_err!(
                "adam: {} slots for {} params and {} grads",
                self.slots.len(),
                params.len(),
                grads.len()
            ));
        }
        for ((p, g), s) in params.iter().zip(grads).zip(&self.slots) {
            if p.shape() != g.shape() || p.len() != s.m.len() {
                return Err(dim_err!("adam: param {:?} vs grad {:?}", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - math::powf(c.beta1, self.step as f64);
        let bc2 = 1.0 - math::powf(c.beta2, self.step as f64);
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            for (((w, &gr), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut s.m).zip(&mut s.v) {
                let gr = gr + c.weight_decay * *w;
                *m = c.beta1 * *m + (1.0 - c.beta1) * gr;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gr * gr;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * mh / (math::sqrt(vh) + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0, 150, 5e-4, 0.9).unwrap(), 5e-4);
        assert_eq!(poly_lr(150, 150, 5e-4, 0.9).unwrap(), 0.0);
        let mid = poly_lr(75, 150, 5e-4, 0.9).unwrap();
        // 0.5^0.9 = exp(-0.9 ln 2)
        let expect = 5e-4 * (-0.9 * core::f64::consts::LN_2).exp();
        assert!((mid - expect).abs() < 1e-18);
        assert!((mid - 2.6795e-4).abs() < 1e-8);
        assert!(poly_lr(151, 150, 5e-4, 0.9).is_err());
        let lrs: Vec<f64> = (0..=40).map(|e| poly_lr(e, 40, 1.0, 0.9).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::vector(&[1.0, -2.0]);
        let g = Tensor::zeros(p.shape());
        let mut opt = Adam::new(AdamConfig::default(), [2]);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[&g], 1e-3).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::vector(&[0.0, 3.0]);
        let g = Tensor::vector(&[1.0, 1.0]);
        let mut opt = Adam::new(AdamConfig::default(), [2]);
        opt.step(&mut [&mut p], &[&g], 1e-3).unwrap();
        // m_hat = 1, v_hat = 1: the step is lr / (1 + eps).
        let step = 1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] + step).abs() < 1e-18);
        assert!((p.data()[1] - 3.0 + step).abs() < 1e-15);
    }

    #[test]
    fn order_of_parameters_does_not_matter() {
        let a0 = Tensor::vector(&[0.5, 0.1]);
        let b0 = Tensor::vector(&[-1.0]);
        let (ga, gb) = (Tensor::vector(&[0.3, -0.2]), Tensor::vector(&[2.0]));
        let cfg = AdamConfig {
            weight_decay: 1e-4,
            ..AdamConfig::default()
        };
        let (mut a1, mut b1) = (a0.clone(), b0.clone());
        let mut o1 = Adam::new(cfg, [2, 1]);
        let (mut a2, mut b2) = (a0, b0);
        let mut o2 = Adam::new(cfg, [1, 2]);
        for _ in 0..3 {
            o1.step(&mut [&mut a1, &mut b1], &[&ga, &gb], 1e-2).unwrap();
            o2.step(&mut [&mut b2, &mut a2], &[&gb, &ga], 1e-2).unwrap();
        }
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::vector(&[0.0, 3.0]);
        let g = Tensor::vector(&[1.0]);
        let mut opt = Adam::new(AdamConfig::default(), [2]);
        assert!(matches!(
            opt.step(&mut [&mut p], &[&g], 1e-3),
            Err(crate::Error::Dimension(_))
        ));
    }
}
