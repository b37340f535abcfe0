use crate::error::{Error, Result};

use super::TrainConfig;

/// Learning rate at `step`: linear warmup from 0 to `cfg.lr` over
/// `cfg.warmup_steps`, then cosine decay reaching exactly 0 at `cfg.total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    let (warmup, total) = (cfg.warmup_steps, cfg.total_steps);
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    if step == total {
        return Ok(0.0);
    }
    if step < warmup {
        return Ok(cfg.lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moment estimates for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One AdamW update at 1-based `step` with learning rate `lr`.
///
/// Parameters are first decayed by `lr * weight_decay`, then moved by the
/// bias-corrected moment ratio. Nothing is modified if any gradient is non-finite.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    step: usize,
    lr: f64,
    cfg: &AdamW,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters, {} gradients, moments of length {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if step == 0 {
        return Err(Error::InvalidValue("optimizer steps are 1-based".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { step });
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * cfg.weight_decay * params[i];
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(lr: f64, warmup: usize, total: usize) -> TrainConfig {
        TrainConfig { lr, warmup_steps: warmup, total_steps: total, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = sched(1e-3, 100, 1000);
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(100, &cfg).unwrap(), 1e-3);
        assert_eq!(lr_at(1000, &cfg).unwrap(), 0.0);
        assert!((lr_at(550, &cfg).unwrap() - 0.5e-3).abs() < 1e-12);
        assert!((lr_at(50, &cfg).unwrap() - 0.5e-3).abs() < 1e-15);
        assert!(matches!(lr_at(1001, &cfg), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn schedule_is_continuous() {
        let cfg = sched(1.0, 10, 200);
        let mut prev = lr_at(0, &cfg).unwrap();
        for s in 1..=200 {
            let cur = lr_at(s, &cfg).unwrap();
            assert!((cur - prev).abs() <= 0.1 + 1e-12, "jump at {s}");
            assert!(cur >= 0.0);
            prev = cur;
        }
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let cfg = sched(0.1, 0, 10);
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut st, 1, 0.1, &AdamW::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st, AdamState::new(2));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adamw_step(&mut p, &[1.0], &mut st, 1, 0.1, &AdamW::default()).unwrap();
        // m_hat = v_hat = 1 after bias correction
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        let err = adamw_step(&mut p, &[f64::NAN], &mut st, 7, 0.1, &AdamW::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { step: 7 }));
        assert_eq!(p, vec![0.0]);
    }

    #[test]
    fn matches_reference_trajectory_on_quadratic() {
        // f(w) = w^2 / 2, grad = w. Reference written out with scalar state.
        let cfg = AdamW { weight_decay: 0.01, ..AdamW::default() };
        let lr = 0.05;
        let (mut w_ref, mut m, mut v) = (3.0f64, 0.0f64, 0.0f64);
        let mut w = vec![3.0];
        let mut st = AdamState::new(1);
        for t in 1..=50 {
            let g = w_ref;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w_ref = w_ref * (1.0 - lr * 0.01) - lr * mh / (vh.sqrt() + 1e-8);

            let g = w[0];
            adamw_step(&mut w, &[g], &mut st, t as usize, lr, &cfg).unwrap();
            assert!((w[0] - w_ref).abs() < 1e-10, "step {t}: {} vs {w_ref}", w[0]);
        }
        assert!(w[0].abs() < 3.0);
    }
}
