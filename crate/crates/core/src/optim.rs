//! AdamW with per-parameter learning rates, global-norm gradient
//! clipping, and a warmup-then-constant schedule.
//!
//! The per-parameter learning-rate map is how a resolved `ParamPlan`
//! reaches the optimizer: each named parameter steps with its own rate
//! while sharing betas, eps, and the schedule. Decoupled weight decay
//! multiplies the width-independent base rate (`decay_lr`), not the
//! per-parameter rate, so the effective decay stays the same at every
//! width.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// Warmup-then-constant learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_steps: u64,
}

/// Schedule multiplier at step `t` (0-based): a linear ramp 0 -> 1 over
/// `warmup_steps`, then 1.
pub fn lr_at_step(schedule: Schedule, t: u64) -> f64 {
    if schedule.warmup_steps == 0 || t >= schedule.warmup_steps {
        1.0
    } else {
        t as f64 / schedule.warmup_steps as f64
    }
}

/// Optimizer hyperparameters shared by all parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Base (width-independent) rate used for decoupled decay.
    pub decay_lr: f64,
    pub clip_max_norm: Option<f64>,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decay_lr: 0.0,
            clip_max_norm: None,
            schedule: Schedule { warmup_steps: 0 },
        }
    }
}

/// First/second moment buffers plus the shared step counter.
pub struct AdamWState<R> {
    m: BTreeMap<String, Vec<R>>,
    v: BTreeMap<String, Vec<R>>,
    pub t: u64,
}

impl<R: Real> AdamWState<R> {
    /// Allocate zeroed moments for every `(name, len)` parameter.
    pub fn new<'a>(params: impl Iterator<Item = (&'a str, usize)>) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, len) in params {
            m.insert(String::from(name), vec![R::ZERO; len]);
            v.insert(String::from(name), vec![R::ZERO; len]);
        }
        AdamWState { m, v, t: 0 }
    }

    pub fn second_moment(&self, name: &str) -> Option<&[R]> {
        self.v.get(name).map(|v| v.as_slice())
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
///
/// Returns the scale factor applied (1.0 when no clipping occurred).
/// Non-finite gradients are a divergence signal.
pub fn clip_global_norm<R: Real>(grads: &mut [(&str, &mut [R])], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::Config(alloc::format!("clip max_norm must be positive, got {max_norm}")));
    }
    let mut ss = 0.0f64;
    for (name, g) in grads.iter() {
        for &x in g.iter() {
            let v = x.to_f64();
            if !v.is_finite() {
                return Err(Error::Diverged(alloc::format!("non-finite gradient in {name}")));
            }
            ss += v * v;
        }
    }
    let norm = crate::real::sqrt64(ss);
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    let s = R::from_f64(scale);
    for (_, g) in grads.iter_mut() {
        for x in g.iter_mut() {
            *x *= s;
        }
    }
    Ok(scale)
}

/// One AdamW step over named parameters.
///
/// For each parameter with gradient `g` and rate `lr` from
/// `per_param_lr`:
///
/// ```text
/// m <- b1 m + (1-b1) g
/// v <- b2 v + (1-b2) g^2
/// mhat = m / (1 - b1^t),  vhat = v / (1 - b2^t)
/// theta <- theta - lr*sched(t)*mhat/(sqrt(vhat)+eps)
///                - decay_lr*sched(t)*wd*theta
/// ```
///
/// The state's step counter is incremented once per call; the schedule
/// is evaluated at the pre-increment step index.
pub fn adamw_step<R: Real>(
    params: &mut [(&str, &mut [R])],
    grads: &BTreeMap<String, Vec<R>>,
    state: &mut AdamWState<R>,
    per_param_lr: &BTreeMap<String, f64>,
    config: &OptimConfig,
) -> Result<()> {
    let sched = lr_at_step(config.schedule, state.t);
    let t = state.t + 1; // bias-correction step number
    let bc1 = 1.0 - powi(config.beta1, t);
    let bc2 = 1.0 - powi(config.beta2, t);
    let b1 = R::from_f64(config.beta1);
    let b2 = R::from_f64(config.beta2);
    let one_m_b1 = R::from_f64(1.0 - config.beta1);
    let one_m_b2 = R::from_f64(1.0 - config.beta2);
    let eps = R::from_f64(config.eps);
    let decay = R::from_f64(config.decay_lr * sched * config.weight_decay);

    for (name, theta) in params.iter_mut() {
        let lr = *per_param_lr
            .get(*name)
            .ok_or_else(|| Error::Config(alloc::format!("no learning rate for parameter {name}")))?;
        let g = grads
            .get(*name)
            .ok_or_else(|| Error::Config(alloc::format!("no gradient for parameter {name}")))?;
        let m = state.m.get_mut(*name).expect("state covers every parameter");
        let v = state.v.get_mut(*name).expect("state covers every parameter");
        let step_scale = R::from_f64(lr * sched / bc1);
        let vhat_scale = 1.0 / bc2;
        for i in 0..theta.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + one_m_b1 * gi;
            v[i] = b2 * v[i] + one_m_b2 * gi * gi;
            let vhat = R::from_f64(v[i].to_f64() * vhat_scale);
            let update = step_scale * m[i] / (vhat.sqrt() + eps);
            let next = theta[i] - update - decay * theta[i];
            if !next.is_finite() {
                return Err(Error::Diverged(alloc::format!("non-finite update in {name}")));
            }
            theta[i] = next;
        }
    }
    state.t += 1;
    Ok(())
}

fn powi(base: f64, exp: u64) -> f64 {
    let mut acc = 1.0;
    let mut b = base;
    let mut e = exp;
    while e > 0 {
        if e & 1 == 1 {
            acc *= b;
        }
        b *= b;
        e >>= 1;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(entries: &[(&str, Vec<f64>)]) -> BTreeMap<String, Vec<f64>> {
        entries.iter().map(|(n, v)| (String::from(*n), v.clone())).collect()
    }

    #[test]
    fn schedule_ramp() {
        let s = Schedule { warmup_steps: 100 };
        assert_eq!(lr_at_step(s, 50), 0.5);
        assert_eq!(lr_at_step(s, 1_000_000), 1.0);
        assert_eq!(lr_at_step(Schedule { warmup_steps: 0 }, 0), 1.0);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        // norm 10 -> scale 0.1
        let mut g = vec![6.0f64, 8.0];
        let mut grads = [("w", g.as_mut_slice())];
        let scale = clip_global_norm(&mut grads, 1.0).unwrap();
        assert!((scale - 0.1).abs() < 1e-15);
        let post = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((post - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_noop_below_max() {
        let mut g = vec![0.3f64, 0.4];
        let mut grads = [("w", g.as_mut_slice())];
        let scale = clip_global_norm(&mut grads, 1.0).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
    }

    #[test]
    fn clip_post_norm_is_min() {
        let mut g: Vec<f64> = (0..32).map(|i| (i as f64) * 0.37 - 3.0).collect();
        let pre: f64 = g.iter().map(|x| x * x).sum::<f64>();
        let pre = pre.sqrt();
        let mut grads = [("w", g.as_mut_slice())];
        clip_global_norm(&mut grads, 2.0).unwrap();
        let post: f64 = g.iter().map(|x| x * x).sum::<f64>();
        let post = post.sqrt();
        assert!((post - pre.min(2.0)).abs() < 1e-12);
    }

    #[test]
    fn clip_non_finite_signals_divergence() {
        let mut g = vec![1.0f64, f64::NAN];
        let mut grads = [("w", g.as_mut_slice())];
        assert!(matches!(clip_global_norm(&mut grads, 1.0), Err(Error::Diverged(_))));
    }

    #[test]
    fn clip_idempotent() {
        let g: Vec<f64> = (0..16).map(|i| (i as f64) - 5.5).collect();
        let mut once = g.clone();
        {
            let mut grads = [("w", once.as_mut_slice())];
            clip_global_norm(&mut grads, 1.5).unwrap();
        }
        let mut twice = g.clone();
        {
            let mut grads = [("w", twice.as_mut_slice())];
            clip_global_norm(&mut grads, 1.5).unwrap();
            let mut grads = [("w", twice.as_mut_slice())];
            clip_global_norm(&mut grads, 1.5).unwrap();
        }
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_hand_oracle() {
        // theta=1, g=1, lr=0.1, betas (0.9, 0.999), eps 1e-8, wd 0:
        // mhat = 1, vhat = 1, theta' = 1 - 0.1/(1 + 1e-8)
        let mut theta = vec![1.0f64];
        let grads = map(&[("w", vec![1.0])]);
        let mut state = AdamWState::new([("w", 1usize)].into_iter());
        let lrs: BTreeMap<String, f64> = [(String::from("w"), 0.1)].into_iter().collect();
        let cfg = OptimConfig::default();
        let mut params = [("w", theta.as_mut_slice())];
        adamw_step(&mut params, &grads, &mut state, &lrs, &cfg).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0f64.sqrt() + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-12);
        assert!((theta[0] - 0.9).abs() < 1e-8);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut theta = vec![0.7f64, -0.2];
        let grads = map(&[("w", vec![0.0, 0.0])]);
        let mut state = AdamWState::new([("w", 2usize)].into_iter());
        let lrs: BTreeMap<String, f64> = [(String::from("w"), 0.1)].into_iter().collect();
        let cfg = OptimConfig::default();
        let mut params = [("w", theta.as_mut_slice())];
        adamw_step(&mut params, &grads, &mut state, &lrs, &cfg).unwrap();
        assert_eq!(theta, vec![0.7, -0.2]);
    }

    #[test]
    fn updates_linear_in_lr_at_step_one() {
        let mut t1 = vec![1.0f64];
        let mut t2 = vec![1.0f64];
        let grads = map(&[("a", vec![0.3]), ("b", vec![0.3])]);
        let mut state = AdamWState::new([("a", 1usize), ("b", 1usize)].into_iter());
        let lrs: BTreeMap<String, f64> =
            [(String::from("a"), 0.1), (String::from("b"), 0.2)].into_iter().collect();
        let cfg = OptimConfig { eps: 0.0, ..OptimConfig::default() };
        let mut params = [("a", t1.as_mut_slice()), ("b", t2.as_mut_slice())];
        adamw_step(&mut params, &grads, &mut state, &lrs, &cfg).unwrap();
        let da = 1.0 - t1[0];
        let db = 1.0 - t2[0];
        assert!((db / da - 2.0).abs() < 1e-12);
    }

    #[test]
    fn missing_lr_is_config_error() {
        let mut theta = vec![1.0f64];
        let grads = map(&[("w", vec![1.0])]);
        let mut state = AdamWState::new([("w", 1usize)].into_iter());
        let lrs: BTreeMap<String, f64> = BTreeMap::new();
        let cfg = OptimConfig::default();
        let mut params = [("w", theta.as_mut_slice())];
        assert!(matches!(
            adamw_step(&mut params, &grads, &mut state, &lrs, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn step_one_update_opposes_gradient_sign() {
        let mut theta = vec![0.0f64; 7];
        let g: Vec<f64> = vec![0.5, -0.25, 1.5, -2.0, 0.01, -0.01, 3.0];
        let grads = map(&[("w", g.clone())]);
        let mut state = AdamWState::new([("w", 7usize)].into_iter());
        let lrs: BTreeMap<String, f64> = [(String::from("w"), 0.05)].into_iter().collect();
        let cfg = OptimConfig { eps: 1e-30, ..OptimConfig::default() };
        let mut params = [("w", theta.as_mut_slice())];
        adamw_step(&mut params, &grads, &mut state, &lrs, &cfg).unwrap();
        for (th, gi) in theta.iter().zip(&g) {
            assert!(th * gi < 0.0, "update {th} does not oppose gradient {gi}");
        }
    }
}
