//! Layer-wise adaptive rate scaling with heavy-ball momentum.

use crate::params::ParamSet;
use std::collections::HashMap;

pub const LARS_TRUST: f64 = 0.001;
pub const LARS_MOMENTUM: f64 = 0.9;
pub const LARS_EPS: f64 = 1e-9;

/// Per-parameter momentum buffers, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub momentum: HashMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One LARS update over every parameter that received a gradient.
///
/// Non-exempt parameters get a local learning rate of
/// `trust * ||w|| / (||g|| + wd * ||w|| + eps)` and weight decay folded
/// into the update direction; exempt parameters (biases, normalization
/// scales/offsets) use a local rate of one and no decay. The velocity is
/// `v <- momentum * v + local_lr * (g + wd * w)` and the step is
/// `w <- w - lr * v`.
pub fn lars_step(
    params: &mut ParamSet,
    grads: &HashMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) {
    for def in params.iter_mut() {
        let Some(grad) = grads.get(&def.name) else {
            continue;
        };
        assert_eq!(grad.len(), def.values.len(), "gradient size for {}", def.name);
        let (local_lr, wd) = if def.decay_exempt {
            (1.0, 0.0)
        } else {
            let wn = l2(&def.values);
            let gn = l2(grad);
            let local = if wn > 0.0 && gn > 0.0 {
                LARS_TRUST * wn / (gn + weight_decay * wn + LARS_EPS)
            } else {
                1.0
            };
            (local, weight_decay)
        };
        let vel = state
            .momentum
            .entry(def.name.clone())
            .or_insert_with(|| vec![0.0; def.values.len()]);
        for k in 0..def.values.len() {
            let update = grad[k] + wd * def.values[k];
            vel[k] = LARS_MOMENTUM * vel[k] + local_lr * update;
            def.values[k] -= lr * vel[k];
        }
    }
}

/// Cosine-decayed learning rate with a linear warmup over the first
/// `warmup_steps` steps. `step` counts from zero.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    assert!(total_steps > 0);
    let step = step.min(total_steps);
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let denom = (total_steps - warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / denom;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Linear batch-size scaling of the base learning rate.
pub fn effective_base_lr(lr_per_256: f64, batch_size: usize) -> f64 {
    lr_per_256 * batch_size as f64 / 256.0
}

#[cfg(test)]
mod tests {
    use super::*;
    

    fn one_param(name: &str, values: Vec<f64>, exempt: bool) -> ParamSet {
        let mut set = ParamSet::new();
        let shape = vec![values.len()];
        set.add(name, &shape, values, exempt);
        set
    }

    #[test]
    fn lars_single_step_closed_form() {
        // w = (3, 4) -> ||w|| = 5, g = (0.6, 0.8) -> ||g|| = 1
        let mut params = one_param("w", vec![3.0, 4.0], false);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), vec![0.6, 0.8]);
        let mut state = OptimizerState::new();
        let wd = 0.01;
        let lr = 0.1;
        lars_step(&mut params, &grads, &mut state, lr, wd);
        let local = LARS_TRUST * 5.0 / (1.0 + wd * 5.0 + LARS_EPS);
        let want0 = 3.0 - lr * local * (0.6 + wd * 3.0);
        let want1 = 4.0 - lr * local * (0.8 + wd * 4.0);
        let got = &params.get("w").values;
        assert!((got[0] - want0).abs() < 1e-12);
        assert!((got[1] - want1).abs() < 1e-12);
    }

    #[test]
    fn lars_momentum_accumulates() {
        let mut params = one_param("w", vec![1.0], false);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        let mut state = OptimizerState::new();
        lars_step(&mut params, &grads, &mut state, 0.0, 0.0);
        let v1 = state.momentum["w"][0];
        grads.insert("w".to_string(), vec![1.0]);
        lars_step(&mut params, &grads, &mut state, 0.0, 0.0);
        let v2 = state.momentum["w"][0];
        // second velocity = 0.9 * v1 + local_lr * g, strictly larger
        assert!(v2 > v1);
        let local = LARS_TRUST * 1.0 / (1.0 + LARS_EPS);
        assert!((v2 - (LARS_MOMENTUM * v1 + local)).abs() < 1e-12);
    }

    #[test]
    fn exempt_params_use_unit_rate_and_no_decay() {
        let mut params = one_param("bn.gamma", vec![2.0], true);
        let mut grads = HashMap::new();
        grads.insert("bn.gamma".to_string(), vec![0.5]);
        let mut state = OptimizerState::new();
        lars_step(&mut params, &grads, &mut state, 0.1, 10.0); // huge wd must not apply
        let got = params.get("bn.gamma").values[0];
        assert!((got - (2.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_weight_falls_back_to_unit_local_rate() {
        let mut params = one_param("w", vec![0.0, 0.0], false);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), vec![1.0, 0.0]);
        let mut state = OptimizerState::new();
        lars_step(&mut params, &grads, &mut state, 0.1, 0.01);
        assert!((params.get("w").values[0] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn params_without_grads_are_untouched() {
        let mut params = one_param("w", vec![1.0], false);
        let grads = HashMap::new();
        let mut state = OptimizerState::new();
        lars_step(&mut params, &grads, &mut state, 0.1, 0.01);
        assert_eq!(params.get("w").values[0], 1.0);
        assert!(state.momentum.is_empty());
    }

    #[test]
    fn cosine_schedule_shape() {
        let base = 1.0;
        let total = 100;
        let warmup = 5;
        // linear warmup hits base at the warmup boundary
        assert!((cosine_lr(0, total, base, warmup) - 0.2).abs() < 1e-12);
        assert!((cosine_lr(4, total, base, warmup) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(5, total, base, warmup) - 1.0).abs() < 1e-12);
        // midpoint of decay is half
        let mid = warmup + (total - warmup) / 2;
        assert!((cosine_lr(mid, total, base, warmup) - 0.5).abs() < 0.02);
        // end decays to zero
        assert!(cosine_lr(total, total, base, warmup) < 1e-12);
        // monotone nonincreasing after warmup
        let mut prev = f64::INFINITY;
        for s in warmup..=total {
            let v = cosine_lr(s, total, base, warmup);
            assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn batch_scaling_is_linear() {
        assert!((effective_base_lr(1.0, 256) - 1.0).abs() < 1e-12);
        assert!((effective_base_lr(1.0, 4) - 4.0 / 256.0).abs() < 1e-12);
        assert!((effective_base_lr(2.0, 512) - 4.0).abs() < 1e-12);
    }
}
