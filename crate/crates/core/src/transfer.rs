//! Sweep planning, hyperparameter search sampling, envelope selection,
//! and transfer verdicts. Everything here is a pure function over trial
//! outcomes; executing and persisting trials is the harness's job.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mup::BaseHps;
use crate::rng::SeededRng;

/// Which run dimension a sweep walks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Width,
    Batch,
    Steps,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Width => "width",
            Axis::Batch => "batch",
            Axis::Steps => "steps",
        }
    }
}

/// A sweepable base hyperparameter.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum HpName {
    Eta,
    Sigma,
    Phi,
    GradClip,
    WarmupSteps,
    WeightDecay,
    LossWeight(String),
}

impl HpName {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "eta" | "lr" => HpName::Eta,
            "sigma" => HpName::Sigma,
            "phi" => HpName::Phi,
            "grad_clip" => HpName::GradClip,
            "warmup_steps" => HpName::WarmupSteps,
            "weight_decay" => HpName::WeightDecay,
            other => {
                if let Some(name) = other.strip_prefix("loss_weight:") {
                    HpName::LossWeight(String::from(name))
                } else {
                    return Err(Error::Config(alloc::format!("unknown hyperparameter {other}")));
                }
            }
        })
    }

    pub fn label(&self) -> String {
        match self {
            HpName::Eta => String::from("eta"),
            HpName::Sigma => String::from("sigma"),
            HpName::Phi => String::from("phi"),
            HpName::GradClip => String::from("grad_clip"),
            HpName::WarmupSteps => String::from("warmup_steps"),
            HpName::WeightDecay => String::from("weight_decay"),
            HpName::LossWeight(n) => alloc::format!("loss_weight:{n}"),
        }
    }

    /// Substitute `value` into a base HP set.
    pub fn apply(&self, base: &mut BaseHps, value: f64) {
        match self {
            HpName::Eta => base.eta = value,
            HpName::Sigma => base.sigma = value,
            HpName::Phi => base.phi = value,
            HpName::GradClip => base.grad_clip = Some(value),
            HpName::WarmupSteps => base.warmup_steps = value as u64,
            HpName::WeightDecay => base.weight_decay = value,
            HpName::LossWeight(n) => {
                base.loss_weights.insert(n.clone(), value);
            }
        }
    }
}

/// One grid sweep: an axis, the hyperparameter under test, and seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub axis: Axis,
    pub points: Vec<u64>,
    pub hp: HpName,
    /// Sorted ascending.
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Maximum spread of argmin indices for a pass.
    pub tolerance: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::Config(String::from("a transfer verdict needs at least 2 axis points")));
        }
        if self.values.len() < 3 {
            return Err(Error::Config(String::from("a transfer verdict needs at least 3 hyperparameter values")));
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(String::from("hyperparameter values must be sorted ascending")));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config(String::from("at least one seed required")));
        }
        Ok(())
    }

    /// All `(axis index, value index, seed index)` triples.
    pub fn trials(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for a in 0..self.points.len() {
            for v in 0..self.values.len() {
                for s in 0..self.seeds.len() {
                    out.push((a, v, s));
                }
            }
        }
        out
    }
}

/// Outcome of one executed trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialOutcome {
    pub final_loss: f64,
    pub diverged: bool,
    pub diverged_at: Option<u64>,
}

/// Transfer verdict: per axis point, the argmin over hyperparameter
/// values with diverged cells excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferVerdict {
    /// Per axis point; `None` when every value diverged there.
    pub argmin_indices: Vec<Option<usize>>,
    pub pass: bool,
    pub tolerance: usize,
    pub reason: Option<String>,
}

/// Seed-mean loss per `(axis, value)` cell; a cell counts as diverged
/// when any of its seeds diverged.
pub fn aggregate_cells(
    grid: &GridSpec,
    outcomes: &BTreeMap<(usize, usize, usize), TrialOutcome>,
) -> Result<BTreeMap<(usize, usize), (f64, bool)>> {
    let mut cells = BTreeMap::new();
    for a in 0..grid.points.len() {
        for v in 0..grid.values.len() {
            let mut sum = 0.0;
            let mut diverged = false;
            for s in 0..grid.seeds.len() {
                let o = outcomes.get(&(a, v, s)).ok_or_else(|| {
                    Error::Config(alloc::format!("missing outcome for trial ({a},{v},{s})"))
                })?;
                diverged |= o.diverged;
                sum += o.final_loss;
            }
            let mean = if diverged { f64::INFINITY } else { sum / grid.seeds.len() as f64 };
            cells.insert((a, v), (mean, diverged));
        }
    }
    Ok(cells)
}

/// Compute the verdict from complete outcomes.
pub fn verdict(
    grid: &GridSpec,
    outcomes: &BTreeMap<(usize, usize, usize), TrialOutcome>,
) -> Result<TransferVerdict> {
    grid.validate()?;
    let cells = aggregate_cells(grid, outcomes)?;
    let mut argmins: Vec<Option<usize>> = Vec::with_capacity(grid.points.len());
    for a in 0..grid.points.len() {
        let mut best: Option<(usize, f64)> = None;
        for v in 0..grid.values.len() {
            let (mean, diverged) = cells[&(a, v)];
            if diverged {
                continue;
            }
            if best.map(|(_, b)| mean < b).unwrap_or(true) {
                best = Some((v, mean));
            }
        }
        argmins.push(best.map(|(v, _)| v));
    }
    let mut reason = None;
    let mut pass = true;
    if argmins.iter().any(|a| a.is_none()) {
        pass = false;
        reason = Some(String::from("every hyperparameter value diverged at some axis point"));
    } else {
        let idx: Vec<usize> = argmins.iter().map(|a| a.unwrap()).collect();
        let spread = idx.iter().max().unwrap() - idx.iter().min().unwrap();
        if spread > grid.tolerance {
            pass = false;
            reason = Some(alloc::format!(
                "argmin indices {idx:?} spread {spread} exceeds tolerance {}",
                grid.tolerance
            ));
        }
    }
    Ok(TransferVerdict { argmin_indices: argmins, pass, tolerance: grid.tolerance, reason })
}

/// Monotonicity warnings on a learning-rate grid: once a value diverges
/// for a seed and axis point, every larger value there should either
/// diverge too, and divergence should be flagged within the first 200
/// steps. Violations are reported, not fatal.
pub fn lr_divergence_warnings(
    grid: &GridSpec,
    outcomes: &BTreeMap<(usize, usize, usize), TrialOutcome>,
) -> Vec<String> {
    let mut warnings = Vec::new();
    if grid.hp != HpName::Eta {
        return warnings;
    }
    for a in 0..grid.points.len() {
        for s in 0..grid.seeds.len() {
            let mut first_diverged: Option<usize> = None;
            for v in 0..grid.values.len() {
                let Some(o) = outcomes.get(&(a, v, s)) else { continue };
                if o.diverged {
                    if first_diverged.is_none() {
                        first_diverged = Some(v);
                    }
                    if let Some(at) = o.diverged_at {
                        if at >= 200 {
                            warnings.push(alloc::format!(
                                "axis {a} seed {s}: value index {v} diverged late (step {at})"
                            ));
                        }
                    }
                } else if first_diverged.is_some() {
                    warnings.push(alloc::format!(
                        "axis {a} seed {s}: value index {v} converged above diverged index {}",
                        first_diverged.unwrap()
                    ));
                }
            }
        }
    }
    warnings
}

/// One random-search trial: sampled values per dimension plus outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchTrial {
    pub values: BTreeMap<String, f64>,
    pub final_loss: f64,
    pub diverged: bool,
}

/// One sampled dimension of a random search.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchDim {
    pub hp: HpName,
    pub low: f64,
    pub high: f64,
    pub log_scale: bool,
    pub integer: bool,
}

/// Random-search specification.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpec {
    pub n_trials: usize,
    pub dims: Vec<SearchDim>,
}

impl SearchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::Config(String::from("search needs at least one trial")));
        }
        if self.dims.is_empty() {
            return Err(Error::Config(String::from("search needs at least one dimension")));
        }
        for d in &self.dims {
            if !(d.low < d.high) {
                return Err(Error::Config(alloc::format!(
                    "search range for {} is empty",
                    d.hp.label()
                )));
            }
            if d.log_scale && d.low <= 0.0 {
                return Err(Error::Config(alloc::format!(
                    "log-scaled range for {} must be positive",
                    d.hp.label()
                )));
            }
        }
        Ok(())
    }

    /// Sample all trial value vectors; pure in `seed`.
    pub fn sample(&self, seed: u64) -> Result<Vec<BTreeMap<String, f64>>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.n_trials);
        for trial in 0..self.n_trials {
            let mut values = BTreeMap::new();
            for (di, d) in self.dims.iter().enumerate() {
                let mut rng = SeededRng::new(seed, &alloc::format!("search/{trial}/{di}"));
                let u = rng.uniform();
                let mut v = if d.log_scale {
                    crate::real::exp64(
                        crate::real::ln64(d.low) + u * (crate::real::ln64(d.high) - crate::real::ln64(d.low)),
                    )
                } else {
                    d.low + u * (d.high - d.low)
                };
                if d.integer {
                    v = libm_round(v).clamp(d.low, d.high);
                }
                values.insert(d.hp.label(), v);
            }
            out.push(values);
        }
        Ok(out)
    }
}

fn libm_round(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.round()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::round(x)
    }
}

/// Pick the best non-diverged trial by final smoothed loss; ties within
/// `delta` break toward the smaller learning rate (then toward smaller
/// values of the remaining dimensions). Returns the chosen index.
pub fn envelope_select(trials: &[SearchTrial]) -> Result<usize> {
    const DELTA: f64 = 1e-4;
    let mut min_loss = f64::INFINITY;
    for t in trials {
        if !t.diverged && t.final_loss < min_loss {
            min_loss = t.final_loss;
        }
    }
    if !min_loss.is_finite() {
        return Err(Error::Config(String::from("all trials diverged; nothing to select")));
    }
    let mut best: Option<usize> = None;
    for (i, t) in trials.iter().enumerate() {
        if t.diverged || t.final_loss > min_loss + DELTA {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(j) => {
                if tie_key(t) < tie_key(&trials[j]) {
                    best = Some(i);
                }
            }
        }
    }
    Ok(best.expect("at least one finite trial"))
}

/// Stability-preferring tie key: learning rate first, then the full
/// sorted value map.
fn tie_key(t: &SearchTrial) -> (f64, Vec<(String, f64)>) {
    let eta = t.values.get("eta").copied().unwrap_or(f64::INFINITY);
    (eta, t.values.iter().map(|(k, v)| (k.clone(), *v)).collect())
}
