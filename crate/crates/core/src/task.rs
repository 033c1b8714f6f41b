//! Desk-scale generative training: synthetic class-conditioned images,
//! DDPM and flow-matching corruptions, and the inner training loop that
//! every sweep and check drives.
//!
//! Data and noise streams are keyed only by `(seed, sample index)` and
//! step, never by model width, so runs at different widths see the
//! identical batch sequence.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::arch::{bind_weights, freq_features, ForwardInput, Model, ModelSpec, WeightStore};
use crate::error::{Error, Result};
use crate::mup::{make_plan, BaseHps, ParamPlan, Scheme};
use crate::optim::{adamw_step, clip_global_norm, AdamWState, OptimConfig, Schedule};
use crate::real::{exp64, sqrt64, Real};
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, TensorId};

/// Procedural class-conditioned images: one Gaussian blob per class at
/// a class-determined position, plus pixel noise, in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub image_side: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub blob_sigma: f64,
    pub noise_std: f64,
    pub jitter: f64,
}

impl Default for ToyDataset {
    fn default() -> Self {
        ToyDataset {
            image_side: 8,
            channels: 1,
            num_classes: 4,
            blob_sigma: 1.4,
            noise_std: 0.1,
            jitter: 0.5,
        }
    }
}

impl ToyDataset {
    pub fn image_numel(&self) -> usize {
        self.image_side * self.image_side * self.channels
    }

    /// Blob center for a class, on a small grid inside the image.
    fn class_center(&self, class: usize) -> (f64, f64) {
        let side = self.image_side as f64;
        let grid = [(0.3, 0.3), (0.3, 0.7), (0.7, 0.3), (0.7, 0.7)];
        let (fy, fx) = grid[class % grid.len()];
        // classes beyond four get shifted copies of the grid
        let extra = (class / grid.len()) as f64 * 0.1;
        ((fy + extra).min(0.9) * side, (fx + extra).min(0.9) * side)
    }

    /// Sample `index` of the infinite stream for `seed`; pure in
    /// `(seed, index)`.
    pub fn sample(&self, seed: u64, index: u64) -> (Vec<f64>, usize) {
        let mut rng = SeededRng::new(seed, &alloc::format!("data/{index}"));
        let class = rng.below(self.num_classes as u64) as usize;
        let (cy, cx) = self.class_center(class);
        let cy = cy + self.jitter * rng.normal();
        let cx = cx + self.jitter * rng.normal();
        let inv2s2 = 1.0 / (2.0 * self.blob_sigma * self.blob_sigma);
        let mut pixels = Vec::with_capacity(self.image_numel());
        for _c in 0..self.channels {
            for y in 0..self.image_side {
                for x in 0..self.image_side {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let blob = exp64(-(dy * dy + dx * dx) * inv2s2);
                    let v = 2.0 * blob - 1.0 + self.noise_std * rng.normal();
                    pixels.push(v.clamp(-1.0, 1.0));
                }
            }
        }
        (pixels, class)
    }
}

/// Which corruption process generates training pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    Ddpm,
    FlowMatching,
}

/// Linear-beta DDPM schedule with cached cumulative products.
#[derive(Clone, Debug)]
pub struct DdpmSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl DdpmSchedule {
    /// Linear betas from `beta_min` to `beta_max` over `t_max` steps.
    pub fn linear(beta_min: f64, beta_max: f64, t_max: usize) -> Result<Self> {
        if t_max == 0 || beta_min <= 0.0 || beta_max < beta_min || beta_max >= 1.0 {
            return Err(Error::Config(alloc::format!(
                "bad ddpm schedule: beta {beta_min}..{beta_max} over {t_max}"
            )));
        }
        let mut betas = Vec::with_capacity(t_max);
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for i in 0..t_max {
            let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
            let beta = beta_min + (beta_max - beta_min) * frac;
            prod *= 1.0 - beta;
            betas.push(beta);
            alpha_bar.push(prod);
        }
        Ok(DdpmSchedule { betas, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`, `t` in `1..=t_max`.
    pub fn corrupt(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        if t == 0 || t > self.t_max() {
            return Err(Error::Config(alloc::format!("ddpm timestep {t} out of 1..={}", self.t_max())));
        }
        if x0.len() != eps.len() {
            return Err(Error::Shape(String::from("ddpm corrupt: x0 and eps length mismatch")));
        }
        let ab = self.alpha_bar[t - 1];
        let c0 = sqrt64(ab);
        let c1 = sqrt64(1.0 - ab);
        Ok(x0.iter().zip(eps).map(|(&x, &e)| c0 * x + c1 * e).collect())
    }
}

/// `x_t = (1 - t) x0 + t eps`; regression target `v = eps - x0`.
pub fn fm_corrupt(x0: &[f64], t: f64, eps: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x0.len() != eps.len() {
        return Err(Error::Shape(String::from("fm corrupt: x0 and eps length mismatch")));
    }
    let xt = x0.iter().zip(eps).map(|(&x, &e)| (1.0 - t) * x + t * e).collect();
    let v = x0.iter().zip(eps).map(|(&x, &e)| e - x).collect();
    Ok((xt, v))
}

/// Auxiliary loss hooks, keyed by the name used in `loss_weights`.
/// `pred_sq` penalizes output energy; it exists so the loss-weight
/// hyperparameter has an observable effect at desk scale.
fn aux_term<R: Real>(tape: &mut Tape<R>, name: &str, pred: TensorId) -> Result<TensorId> {
    match name {
        "pred_sq" => {
            let sq = tape.mul(pred, pred)?;
            tape.mean_all(sq)
        }
        _ => Err(Error::Config(alloc::format!("unknown aux loss {name}"))),
    }
}

/// One training run's outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    /// Per-step loss values (length = completed steps).
    pub trace: Vec<f64>,
    /// Mean loss over the final 10% of steps; +inf when diverged.
    pub final_loss: f64,
    pub diverged: bool,
    /// Step at which divergence was flagged, if any.
    pub diverged_at: Option<u64>,
    pub steps_completed: u64,
    pub seed: u64,
    /// Filled by the harness (the run itself does not measure time).
    pub wall_time_s: f64,
}

/// Everything needed to execute one trial.
#[derive(Clone, Debug)]
pub struct TrainSpec {
    pub model: ModelSpec,
    pub scheme: Scheme,
    pub base: BaseHps,
    pub schedule: ScheduleKind,
    pub dataset: ToyDataset,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    /// Diverged when loss exceeds this multiple of the step-0 loss.
    pub divergence_factor: f64,
}

impl TrainSpec {
    pub fn new(model: ModelSpec, scheme: Scheme, base: BaseHps, steps: u64, batch: usize, seed: u64) -> Self {
        TrainSpec {
            model,
            scheme,
            base,
            schedule: ScheduleKind::Ddpm,
            dataset: ToyDataset::default(),
            steps,
            batch,
            seed,
            divergence_factor: 10.0,
        }
    }
}

/// Observer hook for instrumented runs (coordinate checks).
pub trait StepObserver<R: Real> {
    /// Called after each optimizer step with the step's forward tape,
    /// its named activation probes, and the post-update weights.
    fn observe(
        &mut self,
        step: u64,
        tape: &Tape<R>,
        probes: &[(String, TensorId)],
        store: &WeightStore<R>,
    );
}

/// Rearrange a flat `[channels, H, W]` image into `[tokens, patch_dim]`
/// rows (patches in row-major grid order, channel-major within a patch).
pub fn patchify(image: &[f64], side: usize, patch: usize, channels: usize) -> Vec<f64> {
    let tokens_side = side / patch;
    let mut out = Vec::with_capacity(image.len());
    for ty in 0..tokens_side {
        for tx in 0..tokens_side {
            for c in 0..channels {
                for py in 0..patch {
                    for px in 0..patch {
                        let y = ty * patch + py;
                        let x = tx * patch + px;
                        out.push(image[c * side * side + y * side + x]);
                    }
                }
            }
        }
    }
    out
}

/// The state a running trial carries between steps.
pub struct Trainer<R: Real> {
    pub model: Model<R>,
    pub plan: ParamPlan,
    pub store: WeightStore<R>,
    state: AdamWState<R>,
    lr_map: BTreeMap<String, f64>,
    optim: OptimConfig,
    ddpm: Option<DdpmSchedule>,
    spec: TrainSpec,
}

impl<R: Real> Trainer<R> {
    pub fn new(spec: TrainSpec) -> Result<Self> {
        spec.model.validate()?;
        if spec.dataset.image_side != spec.model.patch.image_side
            || spec.dataset.channels != spec.model.patch.channels
            || spec.dataset.num_classes != spec.model.num_classes
        {
            return Err(Error::Config(String::from("dataset geometry does not match the model spec")));
        }
        let model = Model::new(spec.model.clone())?;
        let plan = make_plan(model.graph.weights.iter(), spec.model.widths, &spec.base, spec.scheme)?;
        let store = WeightStore::init(&model.graph, &plan, spec.seed)?;
        let state = AdamWState::new(store.iter().map(|(n, t)| (n, t.numel())));
        let lr_map = plan.lr_map();
        let optim = OptimConfig {
            weight_decay: spec.base.weight_decay,
            decay_lr: spec.base.eta,
            clip_max_norm: spec.base.grad_clip,
            schedule: Schedule { warmup_steps: spec.base.warmup_steps },
            ..OptimConfig::default()
        };
        let ddpm = match spec.schedule {
            ScheduleKind::Ddpm => Some(DdpmSchedule::linear(1e-4, 2e-2, 1000)?),
            ScheduleKind::FlowMatching => None,
        };
        Ok(Trainer { model, plan, store, state, lr_map, optim, ddpm, spec })
    }

    pub fn spec(&self) -> &TrainSpec {
        &self.spec
    }

    /// Assemble the batch for `step`: corrupted tokens, timestep
    /// features, labels, and regression targets.
    fn prepare_batch(&self, step: u64) -> Result<(ForwardInput<R>, Tensor<R>)> {
        let spec = &self.spec;
        let p = &spec.model.patch;
        let tokens = spec.model.tokens();
        let pd = p.patch_dim();
        let b = spec.batch;
        let mut x_tokens = Vec::with_capacity(b * tokens * pd);
        let mut targets = Vec::with_capacity(b * tokens * pd);
        let mut t_feats = Vec::with_capacity(b * spec.model.freq_dim);
        let mut labels = Vec::with_capacity(b);
        for i in 0..b {
            let index = step * b as u64 + i as u64;
            let (x0, class) = spec.dataset.sample(spec.seed, index);
            let mut noise_rng = SeededRng::new(spec.seed, &alloc::format!("noise/{index}"));
            let eps: Vec<f64> = (0..x0.len()).map(|_| noise_rng.normal()).collect();
            let (xt, target, t_for_embed) = match spec.schedule {
                ScheduleKind::Ddpm => {
                    let sched = self.ddpm.as_ref().expect("ddpm schedule present");
                    let t = 1 + noise_rng.below(sched.t_max() as u64) as usize;
                    (sched.corrupt(&x0, t, &eps)?, eps.clone(), t as f64)
                }
                ScheduleKind::FlowMatching => {
                    let t = noise_rng.uniform();
                    let (xt, v) = fm_corrupt(&x0, t, &eps)?;
                    (xt, v, t * 1000.0)
                }
            };
            x_tokens.extend(patchify(&xt, p.image_side, p.patch_side, p.channels).into_iter().map(R::from_f64));
            targets.extend(patchify(&target, p.image_side, p.patch_side, p.channels).into_iter().map(R::from_f64));
            t_feats.extend(freq_features(t_for_embed, spec.model.freq_dim).into_iter().map(R::from_f64));
            labels.push(class);
        }
        let input = ForwardInput {
            x_tokens: Tensor::from_vec(vec![b * tokens, pd], x_tokens)?,
            t_feats: Tensor::from_vec(vec![b, spec.model.freq_dim], t_feats)?,
            labels,
        };
        let target = Tensor::from_vec(vec![b * tokens, pd], targets)?;
        Ok((input, target))
    }

    /// Forward + loss for `step` without updating weights. Exposed for
    /// loss-at-init checks.
    pub fn eval_loss(&self, step: u64) -> Result<f64> {
        let (input, target) = self.prepare_batch(step)?;
        let mut tape = Tape::new();
        let bound = bind_weights(&mut tape, &self.store)?;
        let out = self.model.forward(&mut tape, &bound.eff, &input)?;
        let tgt = tape.leaf(target);
        let loss = self.loss_with_aux(&mut tape, out.pred, tgt)?;
        Ok(tape.scalar_value(loss)?.to_f64())
    }

    fn loss_with_aux(&self, tape: &mut Tape<R>, pred: TensorId, target: TensorId) -> Result<TensorId> {
        let mut loss = tape.mse(pred, target)?;
        for (name, &weight) in &self.spec.base.loss_weights {
            if weight == 0.0 {
                continue;
            }
            let term = aux_term(tape, name, pred)?;
            let scaled = tape.scale(term, R::from_f64(weight))?;
            loss = tape.add(loss, scaled)?;
        }
        Ok(loss)
    }

    /// One optimizer step; returns the loss, or a `Diverged` error when
    /// gradients or updates go non-finite.
    fn step(&mut self, step: u64, observer: &mut Option<&mut dyn StepObserver<R>>) -> Result<f64> {
        #[cfg(feature = "std")]
        let t0 = std::time::Instant::now();
        let (input, target) = self.prepare_batch(step)?;
        #[cfg(feature = "std")]
        let t1 = std::time::Instant::now();
        let mut tape = Tape::new();
        let bound = bind_weights(&mut tape, &self.store)?;
        #[cfg(feature = "std")]
        let t2 = std::time::Instant::now();
        let out = self.model.forward(&mut tape, &bound.eff, &input)?;
        let tgt = tape.leaf(target);
        let loss = self.loss_with_aux(&mut tape, out.pred, tgt)?;
        let loss_value = tape.scalar_value(loss)?.to_f64();
        if !loss_value.is_finite() {
            return Err(Error::Diverged(alloc::format!("non-finite loss at step {step}")));
        }
        #[cfg(feature = "std")]
        let t3 = std::time::Instant::now();
        tape.backward(loss)?;
        #[cfg(feature = "std")]
        let t4 = std::time::Instant::now();

        // collect gradients per weight; absent means unused in graph
        let mut grads: BTreeMap<String, Vec<R>> = BTreeMap::new();
        for (name, id) in &bound.leaf {
            let g = match tape.grad(*id) {
                Some(g) => g.to_vec(),
                None => vec![R::ZERO; tape.tensor(*id).numel()],
            };
            grads.insert(name.clone(), g);
        }

        if let Some(max_norm) = self.optim.clip_max_norm {
            let mut views: Vec<(&str, &mut [R])> = grads
                .iter_mut()
                .map(|(n, g)| (n.as_str(), g.as_mut_slice()))
                .collect();
            clip_global_norm(&mut views, max_norm)?;
        }

        {
            let mut params: Vec<(&str, &mut [R])> = Vec::with_capacity(self.store.len());
            let names = &self.store.names;
            for (name, tensor) in names.iter().zip(self.store.tensors.iter_mut()) {
                params.push((name.as_str(), tensor.data.as_mut_slice()));
            }
            adamw_step(&mut params, &grads, &mut self.state, &self.lr_map, &self.optim)?;
        }

        if let Some(obs) = observer.as_deref_mut() {
            obs.observe(step, &tape, &out.probes, &self.store);
        }
        #[cfg(feature = "std")]
        if std::env::var("MUPDIT_PROFILE").is_ok() {
            let t5 = std::time::Instant::now();
            eprintln!(
                "prof step {step}: prep {:.2}ms bind {:.2}ms fwd {:.2}ms bwd {:.2}ms opt {:.2}ms",
                (t1 - t0).as_secs_f64() * 1e3,
                (t2 - t1).as_secs_f64() * 1e3,
                (t3 - t2).as_secs_f64() * 1e3,
                (t4 - t3).as_secs_f64() * 1e3,
                (t5 - t4).as_secs_f64() * 1e3
            );
        }
        Ok(loss_value)
    }
}

/// Mean over the final 10% of the trace (at least one step).
pub fn smoothed_final(trace: &[f64]) -> f64 {
    if trace.is_empty() {
        return f64::INFINITY;
    }
    let window = (trace.len() / 10).max(1);
    let tail = &trace[trace.len() - window..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Run a full trial. Divergence (non-finite loss, non-finite update, or
/// loss exceeding `divergence_factor` times the step-0 loss) stops the
/// run and is recorded as an outcome, not an error.
pub fn train_run<R: Real>(spec: &TrainSpec) -> Result<TrialResult> {
    train_run_observed::<R>(spec, None)
}

/// [`train_run`] with an optional per-step observer.
pub fn train_run_observed<R: Real>(
    spec: &TrainSpec,
    observer: Option<&mut dyn StepObserver<R>>,
) -> Result<TrialResult> {
    train_run_capture::<R>(spec, observer).map(|(result, _)| result)
}

/// [`train_run`] returning the trained state alongside the result so
/// callers can snapshot the final weights.
pub fn train_run_capture<R: Real>(
    spec: &TrainSpec,
    mut observer: Option<&mut dyn StepObserver<R>>,
) -> Result<(TrialResult, Trainer<R>)> {
    let seed = spec.seed;
    let mut trainer: Trainer<R> = Trainer::new(spec.clone())?;
    let mut trace = Vec::with_capacity(spec.steps as usize);
    let mut diverged = false;
    let mut diverged_at = None;
    for step in 0..spec.steps {
        match trainer.step(step, &mut observer) {
            Ok(loss) => {
                let baseline = *trace.first().unwrap_or(&loss);
                trace.push(loss);
                if !loss.is_finite() || loss > spec.divergence_factor * baseline {
                    diverged = true;
                    diverged_at = Some(step);
                    break;
                }
            }
            Err(Error::Diverged(_)) => {
                diverged = true;
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let final_loss = if diverged { f64::INFINITY } else { smoothed_final(&trace) };
    let result = TrialResult {
        steps_completed: trace.len() as u64,
        trace,
        final_loss,
        diverged,
        diverged_at,
        seed,
        wall_time_s: 0.0,
    };
    Ok((result, trainer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Variant;

    #[test]
    fn dataset_is_pure_and_bounded() {
        let ds = ToyDataset::default();
        let (a, ca) = ds.sample(3, 17);
        let (b, cb) = ds.sample(3, 17);
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert!(a.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let (c, _) = ds.sample(3, 18);
        assert_ne!(a, c);
    }

    #[test]
    fn ddpm_schedule_monotone_and_identity() {
        let s = DdpmSchedule::linear(1e-4, 2e-2, 1000).unwrap();
        assert_eq!(s.t_max(), 1000);
        for w in s.alpha_bar.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(s.alpha_bar[999] > 0.0 && s.alpha_bar[999] < 1.0);
        // coefficient identity at every t
        for t in [1, 250, 1000] {
            let ab = s.alpha_bar[t - 1];
            let c0 = ab.sqrt();
            let c1 = (1.0 - ab).sqrt();
            assert!((c0 * c0 + c1 * c1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ddpm_corrupt_range_check() {
        let s = DdpmSchedule::linear(1e-4, 2e-2, 10).unwrap();
        let x0 = vec![0.5; 4];
        let eps = vec![1.0; 4];
        assert!(s.corrupt(&x0, 0, &eps).is_err());
        assert!(s.corrupt(&x0, 11, &eps).is_err());
        assert!(s.corrupt(&x0, 10, &eps).is_ok());
    }

    #[test]
    fn fm_endpoints_and_identity() {
        let x0 = vec![0.2, -0.4, 0.9];
        let eps = vec![1.0, 0.5, -0.3];
        let (xt0, _) = fm_corrupt(&x0, 0.0, &eps).unwrap();
        assert_eq!(xt0, x0);
        let (xt1, _) = fm_corrupt(&x0, 1.0, &eps).unwrap();
        assert_eq!(xt1, eps);
        let t = 0.37;
        let (xt, v) = fm_corrupt(&x0, t, &eps).unwrap();
        for i in 0..3 {
            assert!((xt[i] + (1.0 - t) * v[i] - eps[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn patchify_counts() {
        let image: Vec<f64> = (0..64).map(|x| x as f64).collect();
        let p = patchify(&image, 8, 2, 1);
        assert_eq!(p.len(), 64);
        // first patch holds the top-left 2x2 block
        assert_eq!(&p[..4], &[0.0, 1.0, 8.0, 9.0]);
    }

    #[test]
    fn zero_steps_gives_empty_trace() {
        let model = ModelSpec::toy(Variant::Dit, 32, 32, 8).unwrap();
        let spec = TrainSpec::new(model, Scheme::Mup, BaseHps::default(), 0, 2, 1);
        let r = train_run::<f64>(&spec).unwrap();
        assert!(r.trace.is_empty());
        assert!(!r.diverged);
        assert_eq!(r.final_loss, f64::INFINITY);
    }

    #[test]
    fn aux_weight_zero_matches_no_aux_exactly() {
        let model = ModelSpec::toy(Variant::Dit, 32, 32, 8).unwrap();
        let mut base = BaseHps::default();
        base.loss_weights.insert(String::from("pred_sq"), 0.0);
        let with_zero = train_run::<f64>(&TrainSpec::new(model.clone(), Scheme::Mup, base, 5, 4, 1)).unwrap();
        let without = train_run::<f64>(&TrainSpec::new(model, Scheme::Mup, BaseHps::default(), 5, 4, 1)).unwrap();
        assert_eq!(with_zero.trace, without.trace);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let model = ModelSpec::toy(Variant::Dit, 32, 32, 8).unwrap();
        let spec = TrainSpec::new(model, Scheme::Mup, BaseHps::default(), 8, 4, 9);
        let a = train_run::<f64>(&spec).unwrap();
        let b = train_run::<f64>(&spec).unwrap();
        assert_eq!(a.trace, b.trace);
        let a32 = train_run::<f32>(&spec).unwrap();
        let b32 = train_run::<f32>(&spec).unwrap();
        assert_eq!(a32.trace, b32.trace);
    }

    #[test]
    fn smoothed_final_uses_last_tenth() {
        let trace: Vec<f64> = (0..100).map(|i| i as f64).collect();
        // last 10 entries: 90..=99
        assert_eq!(smoothed_final(&trace), 94.5);
        assert_eq!(smoothed_final(&[3.0]), 3.0);
    }
}
