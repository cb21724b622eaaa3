//! Adam with decoupled weight decay and the linear warmup/decay schedule.

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Tensor};

/// Linear warmup to `base_lr` over `warmup_steps`, then linear decay to 0 at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 || warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "schedule needs 0 <= warmup ({}) <= total ({}) and total > 0",
                warmup_steps, total_steps
            )));
        }
        Ok(Schedule {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }
}

/// Learning rate at step `t`. Steps past the end clamp to 0 with a warning.
pub fn lr_at_step(s: &Schedule, t: u64) -> f64 {
    if t > s.total_steps {
        log::warn!(
            "lr_at_step: step {} beyond total_steps {}, clamping to 0",
            t,
            s.total_steps
        );
        return 0.0;
    }
    if s.warmup_steps > 0 && t <= s.warmup_steps {
        s.base_lr * t as f64 / s.warmup_steps as f64
    } else if s.total_steps == s.warmup_steps {
        // Degenerate all-warmup schedule still ends at zero.
        if t == s.total_steps {
            0.0
        } else {
            s.base_lr * t as f64 / s.warmup_steps as f64
        }
    } else {
        s.base_lr * (s.total_steps - t) as f64 / (s.total_steps - s.warmup_steps) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Whether decoupled weight decay applies to a parameter. Matrices are
/// decayed; biases and layer-norm gains/biases (all rank-1) are not.
pub fn applies_weight_decay<T: Dtype>(tensor: &Tensor<T>) -> bool {
    tensor.rank() >= 2
}

/// First/second moment accumulators, aligned index-for-index with the
/// parameter list they were created from.
pub struct AdamState<T: Dtype> {
    pub t: u64,
    pub hp: AdamParams,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Dtype> AdamState<T> {
    pub fn new(params: &[(String, Tensor<T>)], hp: AdamParams) -> Self {
        AdamState {
            t: 0,
            hp,
            m: params.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect(),
        }
    }

    /// One bias-corrected update over every parameter with a populated
    /// gradient; parameters whose gradient is absent are left untouched.
    /// Decoupled weight decay `lr * wd * theta` applies to decayed params.
    pub fn step(&mut self, params: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "optimizer built for another parameter list");
        self.t += 1;
        let b1 = T::c(self.hp.beta1);
        let b2 = T::c(self.hp.beta2);
        let one_m_b1 = T::c(1.0 - self.hp.beta1);
        let one_m_b2 = T::c(1.0 - self.hp.beta2);
        let corr1 = T::c(1.0 / (1.0 - self.hp.beta1.powi(self.t as i32)));
        let corr2 = T::c(1.0 / (1.0 - self.hp.beta2.powi(self.t as i32)));
        let eps = T::c(self.hp.eps);
        let lr_t = T::c(lr);
        let decay = T::c(lr * self.hp.weight_decay);
        for (idx, (name, p)) in params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            for (i, &g) in grad.iter().enumerate() {
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("gradient of {}", name),
                    });
                }
                let m = &mut self.m[idx][i];
                *m = b1 * *m + one_m_b1 * g;
                let v = &mut self.v[idx][i];
                *v = b2 * *v + one_m_b2 * g * g;
            }
            let mut data = p.to_vec();
            let decayed = applies_weight_decay(p);
            for i in 0..data.len() {
                let m_hat = self.m[idx][i] * corr1;
                let v_hat = self.v[idx][i] * corr2;
                let mut next = data[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
                if decayed {
                    next = next - decay * data[i];
                }
                data[i] = next;
            }
            p.set_data(&data)?;
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Dtype>(params: &[(String, Tensor<T>)], max_norm: f64) -> f64 {
    let mut total = 0.0f64;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            for v in g {
                let v = v.f64();
                total += v * v;
            }
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = T::c(max_norm / norm);
        for (_, p) in params {
            if let Some(g) = p.grad() {
                let scaled: Vec<T> = g.iter().map(|&v| v * factor).collect();
                p.set_grad(&scaled);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_apex_end_and_midpoint() {
        let s = Schedule::new(1e-4, 100, 2_000).unwrap();
        assert_eq!(lr_at_step(&s, 100), 1e-4);
        assert_eq!(lr_at_step(&s, 2_000), 0.0);
        assert!((lr_at_step(&s, 50) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at_step(&s, 0), 0.0);
        // Past the end clamps to zero.
        assert_eq!(lr_at_step(&s, 3_000), 0.0);
    }

    #[test]
    fn schedule_is_piecewise_linear_and_continuous() {
        let s = Schedule::new(2e-3, 10, 40).unwrap();
        let mut prev = lr_at_step(&s, 0);
        let mut peak = (0u64, prev);
        for t in 1..=40 {
            let lr = lr_at_step(&s, t);
            assert!((lr - prev).abs() <= 2e-3 / 10.0 + 1e-15, "jump at {}", t);
            if lr > peak.1 {
                peak = (t, lr);
            }
            prev = lr;
        }
        assert_eq!(peak.0, 10);
    }

    #[test]
    fn adam_zero_grad_zero_decay_leaves_params() {
        let p = Tensor::<f32>::param(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        p.set_grad(&[0.0, 0.0, 0.0]);
        let params = vec![("w".to_string(), p.clone())];
        let hp = AdamParams {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = AdamState::new(&params, hp);
        state.step(&params, 1e-2).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_matches_hand_recurrence() {
        // Scalar parameter, constant gradient 1, from zero moments:
        // m_hat = 1, v_hat = 1, update = -lr / (1 + eps).
        let p = Tensor::<f64>::param(vec![1], vec![0.0]).unwrap();
        p.set_grad(&[1.0]);
        let params = vec![("w".to_string(), p.clone())];
        let hp = AdamParams {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = AdamState::new(&params, hp);
        let lr = 1e-3;
        state.step(&params, lr).unwrap();
        let expect = -lr * 1.0 / (1.0 + hp.eps);
        assert!((p.to_vec()[0] - expect).abs() < 1e-15);
        assert!((p.to_vec()[0] + lr).abs() < 1e-6);
    }

    #[test]
    fn adam_skips_params_without_gradients() {
        let p = Tensor::<f32>::param(vec![2], vec![1.0, 1.0]).unwrap();
        let params = vec![("untouched".to_string(), p.clone())];
        let mut state = AdamState::new(&params, AdamParams::default());
        state.step(&params, 1e-2).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_name() {
        let p = Tensor::<f32>::param(vec![1], vec![0.0]).unwrap();
        p.set_grad(&[f32::NAN]);
        let params = vec![("layer0.attn.wq".to_string(), p)];
        let mut state = AdamState::new(&params, AdamParams::default());
        let err = state.step(&params, 1e-3).unwrap_err().to_string();
        assert!(err.contains("layer0.attn.wq"), "{err}");
    }

    #[test]
    fn weight_decay_spares_rank_one_params() {
        let w = Tensor::<f64>::param(vec![2, 2], vec![1.0; 4]).unwrap();
        let b = Tensor::<f64>::param(vec![2], vec![1.0; 2]).unwrap();
        assert!(applies_weight_decay(&w));
        assert!(!applies_weight_decay(&b));
        w.set_grad(&[0.0; 4]);
        b.set_grad(&[0.0; 2]);
        let params = vec![("w".to_string(), w.clone()), ("norm.bias".to_string(), b.clone())];
        let mut state = AdamState::new(&params, AdamParams::default());
        state.step(&params, 1e-2).unwrap();
        // The matrix shrank, the bias did not.
        assert!(w.to_vec().iter().all(|&v| v < 1.0));
        assert_eq!(b.to_vec(), vec![1.0; 2]);
    }

    #[test]
    fn clip_rescales_to_unit_global_norm() {
        let p = Tensor::<f64>::param(vec![2], vec![0.0; 2]).unwrap();
        p.set_grad(&[3.0, 4.0]);
        let params = vec![("w".to_string(), p.clone())];
        let pre = clip_global_norm(&params, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let g = p.grad().unwrap();
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
