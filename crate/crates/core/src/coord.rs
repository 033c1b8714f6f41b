//! Coordinate checks: do activation and update magnitudes stay stable
//! as width grows?
//!
//! For each width the same short training run executes on the identical
//! data stream; per step the run records the RMS of every named block
//! output and the RMS of every weight's drift from its initial value.
//! The verdict compares activation magnitudes across widths per layer:
//! a layer passes when its max/min ratio over widths stays within a
//! threshold at every step. Width-stable activations are the scaling
//! behavior the per-role learning-rate rules are supposed to buy.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mup::{Scheme, WidthSpec};
use crate::real::Real;
use crate::task::{train_run_observed, StepObserver, TrainSpec, TrialResult};
use crate::tensor::{Tape, TensorId};

/// Statistics of one `(width, layer, step)` cell, averaged over seeds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CoordCell {
    pub act_rms: f64,
    pub upd_rms: f64,
}

/// Full report over widths x layers x steps.
#[derive(Clone, Debug, Default)]
pub struct CoordReport {
    pub widths: Vec<usize>,
    pub scheme_label: String,
    pub steps: u64,
    /// Activation probe names, in forward order.
    pub act_layers: Vec<String>,
    /// Weight names.
    pub upd_layers: Vec<String>,
    /// `(width, layer, step) -> cell`; activation steps run `0..steps`
    /// (pre-update forward), update steps run `1..=steps` (drift after
    /// that many updates).
    pub act: BTreeMap<(usize, String, u64), f64>,
    pub upd: BTreeMap<(usize, String, u64), f64>,
    /// Widths whose runs diverged.
    pub diverged: Vec<usize>,
}

/// Per-layer verdict at a ratio threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordVerdict {
    pub threshold: f64,
    pub layer_pass: BTreeMap<String, bool>,
    /// Worst max/min activation ratio seen per layer.
    pub layer_worst_ratio: BTreeMap<String, f64>,
    pub pass: bool,
    pub diverged_widths: Vec<usize>,
}

struct Recorder {
    /// `(layer, step) -> summed rms over seeds`
    act: BTreeMap<(String, u64), f64>,
    upd: BTreeMap<(String, u64), f64>,
    init: BTreeMap<String, Vec<f64>>,
}

impl<R: Real> StepObserver<R> for Recorder {
    fn observe(
        &mut self,
        step: u64,
        tape: &Tape<R>,
        probes: &[(String, TensorId)],
        store: &crate::arch::WeightStore<R>,
    ) {
        for (name, id) in probes {
            let rms = tape.tensor(*id).rms();
            *self.act.entry((name.clone(), step)).or_insert(0.0) += rms;
        }
        for (name, tensor) in store.iter() {
            let init = &self.init[name];
            let mut ss = 0.0;
            for (x, x0) in tensor.data.iter().zip(init) {
                let d = x.to_f64() - x0;
                ss += d * d;
            }
            let rms = crate::real::sqrt64(ss / init.len() as f64);
            *self.upd.entry((String::from(name), step + 1)).or_insert(0.0) += rms;
        }
    }
}

/// Configuration of a coordinate check.
#[derive(Clone, Debug)]
pub struct CoordSpec {
    /// Template trial; its model width is replaced per run.
    pub train: TrainSpec,
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// Run one width cell: `steps` updates over the seed set, recording
/// seed-averaged statistics. Returns the per-seed trial results too so
/// divergence can be surfaced.
pub fn run_width<R: Real>(
    spec: &CoordSpec,
    width: usize,
) -> Result<(BTreeMap<(String, u64), f64>, BTreeMap<(String, u64), f64>, Vec<TrialResult>)> {
    if spec.train.steps == 0 {
        return Err(Error::Config(String::from("coordinate check needs at least one step")));
    }
    let mut rec = Recorder { act: BTreeMap::new(), upd: BTreeMap::new(), init: BTreeMap::new() };
    let mut results = Vec::new();
    for &seed in &spec.seeds {
        let mut train = spec.train.clone();
        train.model.widths = WidthSpec::new(spec.train.model.widths.n_base, width, spec.train.model.widths.head_dim)?;
        train.seed = seed;
        // capture initial weights for drift measurement
        let trainer: crate::task::Trainer<R> = crate::task::Trainer::new(train.clone())?;
        rec.init = trainer
            .store
            .iter()
            .map(|(n, t)| (String::from(n), t.data.iter().map(|x| x.to_f64()).collect()))
            .collect();
        drop(trainer);
        let result = train_run_observed::<R>(&train, Some(&mut rec))?;
        results.push(result);
    }
    let inv = 1.0 / spec.seeds.len() as f64;
    let act = rec.act.into_iter().map(|(k, v)| (k, v * inv)).collect();
    let upd = rec.upd.into_iter().map(|(k, v)| (k, v * inv)).collect();
    Ok((act, upd, results))
}

/// Run the full check across widths (sequentially; callers may instead
/// run [`run_width`] per width in parallel and assemble).
pub fn run_coordcheck<R: Real>(spec: &CoordSpec) -> Result<CoordReport> {
    let mut cells = Vec::new();
    for &w in &spec.widths {
        cells.push((w, run_width::<R>(spec, w)?));
    }
    assemble(spec, cells)
}

/// Deterministic reduction of per-width results into a report, ordered
/// by (width, layer, step).
pub fn assemble<A>(spec: &CoordSpec, cells: Vec<(usize, A)>) -> Result<CoordReport>
where
    A: Into<WidthCell>,
{
    let mut widths: Vec<usize> = spec.widths.clone();
    widths.sort_unstable();
    if widths.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config(String::from("duplicate widths in coordinate check")));
    }
    let mut report = CoordReport {
        widths,
        scheme_label: String::from(match spec.train.scheme {
            Scheme::Mup => "mup",
            Scheme::Sp => "sp",
        }),
        steps: spec.train.steps,
        ..CoordReport::default()
    };
    for (w, cell) in cells {
        let cell: WidthCell = cell.into();
        for ((layer, step), rms) in cell.act {
            if !report.act_layers.contains(&layer) {
                report.act_layers.push(layer.clone());
            }
            report.act.insert((w, layer, step), rms);
        }
        for ((layer, step), rms) in cell.upd {
            if !report.upd_layers.contains(&layer) {
                report.upd_layers.push(layer.clone());
            }
            report.upd.insert((w, layer, step), rms);
        }
        if cell.results.iter().any(|r| r.diverged) {
            report.diverged.push(w);
        }
    }
    report.act_layers.sort();
    report.upd_layers.sort();
    Ok(report)
}

/// One width's recorded statistics.
pub struct WidthCell {
    pub act: BTreeMap<(String, u64), f64>,
    pub upd: BTreeMap<(String, u64), f64>,
    pub results: Vec<TrialResult>,
}

impl From<(BTreeMap<(String, u64), f64>, BTreeMap<(String, u64), f64>, Vec<TrialResult>)> for WidthCell {
    fn from(t: (BTreeMap<(String, u64), f64>, BTreeMap<(String, u64), f64>, Vec<TrialResult>)) -> Self {
        WidthCell { act: t.0, upd: t.1, results: t.2 }
    }
}

/// A layer passes when its activation RMS ratio across widths stays
/// within `threshold` at every recorded step. Any diverged width fails
/// the whole check.
pub fn verdict(report: &CoordReport, threshold: f64) -> Result<CoordVerdict> {
    if threshold < 1.0 {
        return Err(Error::Config(String::from("ratio threshold must be at least 1")));
    }
    let mut layer_pass = BTreeMap::new();
    let mut layer_worst = BTreeMap::new();
    for layer in &report.act_layers {
        let mut worst: f64 = 1.0;
        for step in 0..report.steps {
            let mut lo = f64::INFINITY;
            let mut hi: f64 = 0.0;
            let mut seen = 0;
            for &w in &report.widths {
                if let Some(&rms) = report.act.get(&(w, layer.clone(), step)) {
                    lo = lo.min(rms);
                    hi = hi.max(rms);
                    seen += 1;
                }
            }
            if seen < report.widths.len() {
                return Err(Error::Config(alloc::format!(
                    "coordinate report has unfilled cells for layer {layer} step {step}"
                )));
            }
            let ratio = if lo == 0.0 {
                if hi == 0.0 {
                    1.0
                } else {
                    f64::INFINITY
                }
            } else {
                hi / lo
            };
            worst = worst.max(ratio);
        }
        layer_pass.insert(layer.clone(), worst <= threshold);
        layer_worst.insert(layer.clone(), worst);
    }
    let pass = report.diverged.is_empty() && layer_pass.values().all(|&p| p);
    Ok(CoordVerdict {
        threshold,
        layer_pass,
        layer_worst_ratio: layer_worst,
        pass,
        diverged_widths: report.diverged.clone(),
    })
}
