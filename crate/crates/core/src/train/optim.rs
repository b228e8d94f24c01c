use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Updates every parameter from its accumulated gradient.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        let grads = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.grad()
                    .ok_or_else(|| contract(format!("parameter {i} has no gradient")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for ((p, g), (m, v)) in params.iter().zip(&grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if m.len() != g.len() {
                return Err(contract("parameter shape changed under the optimizer"));
            }
            let mut data = p.to_vec();
            for k in 0..data.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let (mh, vh) = (m[k] / bc1, v[k] / bc2);
                data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

/// Step decay: `base · gamma^(number of milestones ≤ epoch)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 1e-4,
            milestones: vec![10, 15],
            gamma: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base: lr,
            milestones: Vec::new(),
            gamma: 1.0,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

/// Learning rate of the default schedule at `epoch`.
pub fn lr_schedule(epoch: usize) -> f64 {
    LrSchedule::default().at(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(p: &Tensor, g: &[f64]) {
        p.zero_grad();
        let w = Tensor::new(g.to_vec(), p.shape()).unwrap();
        p.mul(&w).unwrap().sum_all().backward().unwrap();
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let p = Tensor::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let mut adam = Adam::new(std::slice::from_ref(&p), 0.1);
        for _ in 0..3 {
            with_grad(&p, &[0.0; 3]);
            adam.step(std::slice::from_ref(&p)).unwrap();
        }
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn single_step_closed_form() {
        let p = Tensor::param(vec![0.0], &[1]).unwrap();
        let mut adam = Adam::new(std::slice::from_ref(&p), 0.1);
        with_grad(&p, &[1.0]);
        adam.step(std::slice::from_ref(&p)).unwrap();
        // m̂ = 1, v̂ = 1
        assert!((p.item() + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_rolled() {
        let x0 = [0.5, -1.0, 2.0];
        let gs = [[0.3, -0.7, 1.1], [-0.2, 0.4, 0.9]];
        let p = Tensor::param(x0.to_vec(), &[3]).unwrap();
        let mut adam = Adam::new(std::slice::from_ref(&p), 0.05);
        for g in &gs {
            with_grad(&p, g);
            adam.step(std::slice::from_ref(&p)).unwrap();
        }
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let mut x = x0;
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        for (t, g) in gs.iter().enumerate() {
            let t = (t + 1) as i32;
            for k in 0..3 {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                x[k] -= lr * (m[k] / (1.0 - b1.powi(t))) / ((v[k] / (1.0 - b2.powi(t))).sqrt() + eps);
            }
        }
        for (a, b) in p.to_vec().iter().zip(x) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn missing_gradient_is_error() {
        let p = Tensor::param(vec![1.0], &[1]).unwrap();
        let mut adam = Adam::new(std::slice::from_ref(&p), 0.1);
        assert!(adam.step(&[p]).unwrap_err().to_string().contains("no gradient"));
    }

    #[test]
    fn schedule_decays_at_milestones() {
        assert_eq!(lr_schedule(0), 1e-4);
        assert!((lr_schedule(9) - 1e-4).abs() < 1e-20);
        assert!((lr_schedule(12) - 1e-5).abs() < 1e-18);
        assert!((lr_schedule(20) - 1e-6).abs() < 1e-18);
        assert_eq!(LrSchedule::constant(1e-3).at(400), 1e-3);
    }
}
