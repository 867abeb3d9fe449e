//! Decoupled-weight-decay Adam and the warmup + cosine learning-rate schedule.

use tensorad::{Real, Tensor};

use crate::config::RunConfig;
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// First and second moments per parameter, plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let zeros = || params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update with bias correction:
///
/// `p ← p − lr·λ·p − lr · m̂ / (√v̂ + ε)`
///
/// Parameters whose gradient is `None` are skipped entirely (no moment
/// update, no decay). Decay applies only to parameters flagged `decay`.
pub fn adamw_step<F: Real>(
    params: &mut ModelParams<F>,
    grads: &[Option<Tensor<F>>],
    state: &mut OptimizerState<F>,
    hp: &AdamWConfig,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let c = |x: f64| F::from_f64(x).unwrap();
    let (b1, b2) = (c(hp.beta1), c(hp.beta2));
    let bc1 = c(1.0 - hp.beta1.powi(t));
    let bc2 = c(1.0 - hp.beta2.powi(t));
    let eps = c(hp.eps);
    let lr_f = c(lr);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let decay = if params.specs[i].decay { c(lr * hp.weight_decay) } else { F::zero() };
        let p = params.tensors[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            m[j] = b1 * m[j] + (F::one() - b1) * gj;
            v[j] = b2 * v[j] + (F::one() - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] = p[j] - decay * p[j] - lr_f * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Learning rate at 0-based `step`: linear warmup over `warmup_steps`, then
/// half-cosine decay to zero at `steps` when `cosine` is on.
pub fn lr_at(cfg: &RunConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    if !cfg.cosine {
        return cfg.lr;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Init, ParamSpec};

    fn single(value: f64, decay: bool) -> ModelParams<f64> {
        let spec = ParamSpec {
            name: "p".into(),
            shape: vec![1],
            init: Init::Zeros,
            decay,
        };
        ModelParams::from_tensors(&[spec], vec![Tensor::new(&[1], vec![value]).unwrap()]).unwrap()
    }

    fn hp(wd: f64) -> AdamWConfig {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = single(1.0, true);
        let mut st = OptimizerState::new(&p);
        let g = vec![Some(Tensor::new(&[1], vec![1.0]).unwrap())];
        adamw_step(&mut p, &g, &mut st, &hp(0.0), 0.1);
        assert!((st.m[0].item() - 0.1).abs() < 1e-15);
        assert!((st.v[0].item() - 0.001).abs() < 1e-15);
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.tensors[0].item() - expected).abs() < 1e-15);
        assert!((p.tensors[0].item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_fixed_point_and_decay() {
        let zero = vec![Some(Tensor::new(&[1], vec![0.0]).unwrap())];
        let mut p = single(0.7, true);
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &zero, &mut st, &hp(0.0), 0.1);
        assert_eq!(p.tensors[0].item(), 0.7);
        let mut p = single(2.0, true);
        let mut st = OptimizerState::new(&p);
        for k in 1..=3 {
            adamw_step(&mut p, &zero, &mut st, &hp(0.5), 0.1);
            assert!((p.tensors[0].item() - 2.0 * 0.95f64.powi(k)).abs() < 1e-14);
        }
    }

    #[test]
    fn first_update_is_linear_in_lr() {
        let g = vec![Some(Tensor::new(&[1], vec![0.3]).unwrap())];
        let delta = |lr: f64| {
            let mut p = single(1.0, false);
            let mut st = OptimizerState::new(&p);
            adamw_step(&mut p, &g, &mut st, &hp(0.0), lr);
            1.0 - p.tensors[0].item()
        };
        assert!((delta(0.02) - 2.0 * delta(0.01)).abs() < 1e-15);
    }

    #[test]
    fn schedule_shape() {
        let cfg = RunConfig::desk();
        assert!((lr_at(&cfg, 0) - cfg.lr / 20.0).abs() < 1e-15);
        assert!((lr_at(&cfg, 19) - cfg.lr).abs() < 1e-15);
        assert!((lr_at(&cfg, 20) - cfg.lr).abs() < 1e-15);
        assert!(lr_at(&cfg, 199) < 1e-5 * cfg.lr * 10.0);
        assert!((1..200).all(|s| s < 20 || lr_at(&cfg, s) <= lr_at(&cfg, s - 1)));
    }
}
