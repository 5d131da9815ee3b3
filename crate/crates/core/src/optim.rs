//! Adam optimizer over a flat list of parameter matrices.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Adam with bias correction. Moment buffers are allocated lazily on the
/// first step and keyed by parameter position, so the parameter list must
/// keep a stable order across steps.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", lr)));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0,1), got ({}, {})",
                beta1, beta2
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("eps must be > 0, got {}", eps)));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over aligned parameter/gradient slices.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract {
                op: "adam_step",
                detail: format!("{} params vs {} grads", params.len(), grads.len()),
            });
        }
        if self.first_moment.is_empty() {
            for p in params.iter() {
                self.first_moment.push(Matrix::zeros(p.rows(), p.cols()));
                self.second_moment.push(Matrix::zeros(p.rows(), p.cols()));
            }
        } else if self.first_moment.len() != params.len() {
            return Err(Error::Contract {
                op: "adam_step",
                detail: "parameter count changed between steps".into(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if param.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!(
                        "param {} is {:?}, grad is {:?}",
                        idx,
                        param.shape(),
                        grad.shape()
                    ),
                });
            }
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            for r in 0..param.rows() {
                for c in 0..param.cols() {
                    let g = grad.get(r, c);
                    let m_new = self.beta1 * m.get(r, c) + (1.0 - self.beta1) * g;
                    let v_new = self.beta2 * v.get(r, c) + (1.0 - self.beta2) * g * g;
                    m.set(r, c, m_new);
                    v.set(r, c, v_new);
                    let m_hat = m_new / bc1;
                    let v_hat = v_new / bc2;
                    let update = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    param.set(r, c, param.get(r, c) - update);
                }
            }
            param.check_finite("adam_step")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nonpositive_lr() {
        assert!(Adam::new(0.0).is_err());
        assert!(Adam::new(-1.0).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut opt = Adam::new(0.1).unwrap();
        let mut p = Matrix::from_vec(1, 2, vec![3.0, -4.0]).unwrap();
        let g = Matrix::zeros(1, 2);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data(), &[3.0, -4.0]);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // With g = 1 and defaults, bias correction makes m_hat = v_hat = 1,
        // so the first update is lr / (1 + eps).
        let mut opt = Adam::new(0.1).unwrap();
        let mut p = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        opt.step(&mut [&mut p], &[&g]).unwrap();
        let expect = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut opt = Adam::new(0.01).unwrap();
        let mut p = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let g = Matrix::from_vec(1, 2, vec![2.0, -3.0]).unwrap();
        for _ in 0..50 {
            opt.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert!(p.get(0, 0) < 0.0);
        assert!(p.get(0, 1) > 0.0);
    }
}
