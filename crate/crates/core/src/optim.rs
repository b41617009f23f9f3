//! Adam with bias-corrected moments and an inverse-sqrt warmup schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam state over a fixed set of parameter slots. Slot order is chosen by
/// the caller and must stay stable for the lifetime of the state; moment
/// buffers are indexed by slot.
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far; incremented by each `step` call.
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(slot_sizes: &[usize], learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn n_slots(&self) -> usize {
        self.m.len()
    }

    /// One in-place update: m and v accumulate, parameters move by
    /// -lr * m_hat / (sqrt(v_hat) + eps). `params` and `grads` must align
    /// with the slots this state was created for.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam step: {} params / {} grads for {} slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != self.m[slot].len() || g.len() != self.m[slot].len() {
                return Err(Error::contract(format!(
                    "adam step: slot {slot} size mismatch"
                )));
            }
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let pd = p.data_mut();
            let gd = g.data();
            for i in 0..pd.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gd[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pd[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over `warmup` steps, then inverse-sqrt decay:
/// lr(s) = base_lr * min(s / warmup, sqrt(warmup / s)), s counted from 1.
pub fn lr_at(step: u64, base_lr: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    base_lr * (s / w).min((w / s).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// First step from fresh state moves a parameter by about -lr for a
    /// unit gradient, regardless of the gradient's scale entering m and v.
    #[test]
    fn first_step_magnitude_is_lr() {
        let mut state = AdamState::new(&[1], 1e-3);
        let mut p = Tensor::scalar(0.5);
        let g = Tensor::scalar(1.0);
        state.step(&mut [&mut p], &[g]).unwrap();
        let delta = p.item() - 0.5;
        assert!(
            (delta + 1e-3).abs() < 1e-9,
            "expected about -1e-3, got {delta}"
        );
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_fresh_state_does_not_move() {
        let mut state = AdamState::new(&[3], 1e-3);
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(vec![3]);
        for _ in 0..5 {
            state.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let base = 1e-3;
        let w = 200;
        assert!((lr_at(1, base, w) - base / 200.0).abs() < 1e-15);
        assert!((lr_at(200, base, w) - base).abs() < 1e-15);
        assert!((lr_at(800, base, w) - base * 0.5).abs() < 1e-15);
        assert!(lr_at(799, base, w) > lr_at(800, base, w));
        for s in 1..200 {
            assert!(lr_at(s, base, w) < lr_at(s + 1, base, w));
        }
    }

    #[test]
    fn step_rejects_misaligned_slots() {
        let mut state = AdamState::new(&[2], 1e-3);
        let mut p = Tensor::zeros(vec![2]);
        assert!(state.step(&mut [&mut p], &[]).is_err());
        let bad = Tensor::zeros(vec![3]);
        assert!(state.step(&mut [&mut p], &[bad]).is_err());
    }
}
