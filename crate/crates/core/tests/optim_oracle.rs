//! Cross-checks the optimizer against an independently coded reference
//! stepper, plus the per-group decomposition property.

use std::collections::BTreeMap;

use mupdit_core::optim::{adamw_step, AdamWState, OptimConfig, Schedule};
use mupdit_core::rng::SeededRng;

/// Straight-line AdamW for one parameter vector; written from the update
/// equations, sharing nothing with the library implementation.
struct RefStepper {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl RefStepper {
    fn new(len: usize) -> Self {
        RefStepper { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        theta: &mut [f64],
        g: &[f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        wd: f64,
        decay_lr: f64,
        sched: f64,
    ) {
        self.t += 1;
        let t = self.t as i32;
        for i in 0..theta.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = self.m[i] / (1.0 - beta1.powi(t));
            let vhat = self.v[i] / (1.0 - beta2.powi(t));
            theta[i] -= lr * sched * mhat / (vhat.sqrt() + eps) + decay_lr * sched * wd * theta[i];
        }
    }
}

#[test]
fn multi_step_matches_reference_to_1e10() {
    let names = ["a", "b", "c", "d", "e"];
    let lrs = [1e-2, 5e-3, 2e-3, 1e-3, 4e-2];
    let mut rng = SeededRng::new(7, "adamw/oracle");

    let mut theta: Vec<Vec<f64>> = (0..5).map(|i| (0..3 + i).map(|_| rng.normal()).collect()).collect();
    let mut theta_ref = theta.clone();

    let cfg = OptimConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
        decay_lr: 1e-2,
        clip_max_norm: None,
        schedule: Schedule { warmup_steps: 10 },
    };
    let mut state: AdamWState<f64> =
        AdamWState::new(names.iter().enumerate().map(|(i, n)| (*n, 3 + i)));
    let mut refs: Vec<RefStepper> = (0..5).map(|i| RefStepper::new(3 + i)).collect();
    let lr_map: BTreeMap<String, f64> =
        names.iter().zip(lrs).map(|(n, l)| (n.to_string(), l)).collect();

    for step in 0..100u64 {
        let grads: BTreeMap<String, Vec<f64>> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), (0..3 + i).map(|_| rng.normal()).collect()))
            .collect();

        let sched = if step >= 10 { 1.0 } else { step as f64 / 10.0 };
        for (i, n) in names.iter().enumerate() {
            refs[i].step(
                &mut theta_ref[i],
                &grads[*n],
                lrs[i],
                cfg.beta1,
                cfg.beta2,
                cfg.eps,
                cfg.weight_decay,
                cfg.decay_lr,
                sched,
            );
        }

        let mut slices: Vec<(&str, &mut [f64])> = Vec::new();
        for (n, th) in names.iter().zip(theta.iter_mut()) {
            slices.push((*n, th.as_mut_slice()));
        }
        adamw_step(&mut slices, &grads, &mut state, &lr_map, &cfg).unwrap();
    }

    for (i, n) in names.iter().enumerate() {
        for (x, y) in theta[i].iter().zip(&theta_ref[i]) {
            assert!(
                (x - y).abs() < 1e-10,
                "{n}: {x} vs reference {y} after 100 steps"
            );
        }
    }
}

#[test]
fn per_param_map_equals_per_group_runs() {
    // Stepping all parameters with a per-parameter lr map must equal
    // running a separate single-lr optimizer per lr group.
    let mut rng = SeededRng::new(11, "adamw/groups");
    let names = ["g1/w1", "g1/w2", "g2/w1"];
    let lrs = [3e-3, 3e-3, 7e-4];
    let lens = [4usize, 2, 5];

    let init: Vec<Vec<f64>> = lens.iter().map(|&l| (0..l).map(|_| rng.normal()).collect()).collect();
    let grad_steps: Vec<BTreeMap<String, Vec<f64>>> = (0..20)
        .map(|_| {
            names
                .iter()
                .zip(lens)
                .map(|(n, l)| (n.to_string(), (0..l).map(|_| rng.normal()).collect()))
                .collect()
        })
        .collect();
    let cfg = OptimConfig { weight_decay: 0.1, decay_lr: 1e-3, ..OptimConfig::default() };

    // combined run
    let mut combined = init.clone();
    {
        let mut state: AdamWState<f64> = AdamWState::new(names.iter().zip(lens).map(|(n, l)| (*n, l)));
        let lr_map: BTreeMap<String, f64> =
            names.iter().zip(lrs).map(|(n, l)| (n.to_string(), l)).collect();
        for grads in &grad_steps {
            let mut slices: Vec<(&str, &mut [f64])> = names
                .iter()
                .zip(combined.iter_mut())
                .map(|(n, th)| (*n, th.as_mut_slice()))
                .collect();
            adamw_step(&mut slices, grads, &mut state, &lr_map, &cfg).unwrap();
        }
    }

    // one optimizer per group, single lr each
    let mut grouped = init.clone();
    let (g1, g2) = grouped.split_at_mut(2);
    {
        let mut state: AdamWState<f64> = AdamWState::new([("g1/w1", 4usize), ("g1/w2", 2)].into_iter());
        let lr_map: BTreeMap<String, f64> =
            [("g1/w1".to_string(), 3e-3), ("g1/w2".to_string(), 3e-3)].into_iter().collect();
        for grads in &grad_steps {
            let (a, b) = g1.split_at_mut(1);
            let mut slices = vec![("g1/w1", a[0].as_mut_slice()), ("g1/w2", b[0].as_mut_slice())];
            adamw_step(&mut slices, grads, &mut state, &lr_map, &cfg).unwrap();
        }
    }
    {
        let mut state: AdamWState<f64> = AdamWState::new([("g2/w1", 5usize)].into_iter());
        let lr_map: BTreeMap<String, f64> = [("g2/w1".to_string(), 7e-4)].into_iter().collect();
        for grads in &grad_steps {
            let mut slices = vec![("g2/w1", g2[0].as_mut_slice())];
            adamw_step(&mut slices, grads, &mut state, &lr_map, &cfg).unwrap();
        }
    }

    for (c, g) in combined.iter().zip(&grouped) {
        assert_eq!(c, g, "group decomposition must be exact");
    }
}
