//! Executable drivers: grid sweeps, random search, transfer, and
//! coordinate checks. Trials run on the worker pool; completed trials
//! land in the JSON-lines log in canonical order, and reruns over an
//! existing log skip every `(config hash, seed)` already present.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use mupdit_core::coord::{assemble, run_width, CoordReport, CoordSpec, CoordVerdict, WidthCell};
use mupdit_core::task::{train_run, TrainSpec, TrialResult};
use mupdit_core::transfer::{
    envelope_select, lr_divergence_warnings, verdict, Axis, GridSpec, SearchTrial, TransferVerdict,
    TrialOutcome,
};

use crate::config::{trial_hash, ExperimentConfig, TrialDescriptor};
use crate::pool::run_ordered;
use crate::runlog::{write_trace, RunLog, TrialRecord};
use crate::{LabError, Precision};

/// Run one trial at the requested precision.
pub fn run_trial(spec: &TrainSpec, precision: Precision) -> Result<TrialResult, LabError> {
    match precision {
        Precision::F32 => train_run::<f32>(spec),
        Precision::F64 => train_run::<f64>(spec),
    }
    .map_err(LabError::from_core)
}

/// Canonical descriptor of a resolved trial.
pub fn descriptor<'a>(
    cfg: &'a ExperimentConfig,
    spec: &'a TrainSpec,
    precision: Precision,
) -> TrialDescriptor<'a> {
    TrialDescriptor {
        variant: cfg.model.variant.as_str(),
        depth: spec.model.depth,
        width: spec.model.widths.n,
        head_dim: spec.model.widths.head_dim,
        n_base: spec.model.widths.n_base,
        image_side: spec.model.patch.image_side,
        patch_side: spec.model.patch.patch_side,
        channels: spec.model.patch.channels,
        num_classes: spec.model.num_classes,
        text_tokens: spec.model.text_tokens,
        text_dim: spec.model.text_dim,
        mlp_ratio: spec.model.mlp_ratio,
        freq_dim: spec.model.freq_dim,
        scheme: cfg.mup.scheme.as_str(),
        sigma_out_zero: cfg.mup.sigma_out_zero,
        adaln_zero_init: cfg.mup.adaln_zero_init,
        eta: spec.base.eta,
        sigma: spec.base.sigma,
        phi: spec.base.phi,
        grad_clip: spec.base.grad_clip,
        warmup_steps: spec.base.warmup_steps,
        weight_decay: spec.base.weight_decay,
        loss_weights: &spec.base.loss_weights,
        schedule: cfg.task.schedule.as_str(),
        blob_sigma: spec.dataset.blob_sigma,
        noise_std: spec.dataset.noise_std,
        jitter: spec.dataset.jitter,
        divergence_factor: spec.divergence_factor,
        steps: spec.steps,
        batch: spec.batch,
        precision: precision.bits(),
    }
}

struct PlannedTrial {
    cell: (usize, usize, usize),
    spec: TrainSpec,
    hash: String,
    axis_label: String,
    axis_point: u64,
    hps: BTreeMap<String, f64>,
}

/// Result of executing (or resuming) a grid sweep.
pub struct SweepOutcome {
    pub grid: GridSpec,
    pub verdict: TransferVerdict,
    pub records: Vec<TrialRecord>,
    pub scheduled: usize,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

fn plan_grid(
    cfg: &ExperimentConfig,
    grid: &GridSpec,
    precision: Precision,
) -> Result<Vec<PlannedTrial>, LabError> {
    let mut planned = Vec::new();
    for (a, v, s) in grid.trials() {
        let mut base = cfg.base_hps();
        grid.hp.apply(&mut base, grid.values[v]);
        let (width, batch, steps) = match grid.axis {
            Axis::Width => (grid.points[a] as usize, cfg.run.batch, cfg.run.steps),
            Axis::Batch => (cfg.model.width, grid.points[a] as usize, cfg.run.steps),
            Axis::Steps => (cfg.model.width, cfg.run.batch, grid.points[a]),
        };
        let spec = cfg.train_spec(width, base, steps, batch, grid.seeds[s])?;
        let hash = trial_hash(&descriptor(cfg, &spec, precision));
        planned.push(PlannedTrial {
            cell: (a, v, s),
            spec,
            hash,
            axis_label: grid.axis.as_str().to_string(),
            axis_point: grid.points[a],
            hps: [(grid.hp.label(), grid.values[v])].into_iter().collect(),
        });
    }
    Ok(planned)
}

fn execute_planned(
    planned: Vec<PlannedTrial>,
    log: &RunLog,
    out_dir: &Path,
    precision: Precision,
    workers: usize,
    resume: bool,
) -> Result<(Vec<TrialRecord>, BTreeMap<(String, u64), TrialRecord>, usize, usize), LabError> {
    let existing: BTreeSet<(String, u64)> = if resume {
        log.existing_keys()?
    } else if log.path().exists() {
        return Err(LabError::Config(format!(
            "trial log {} already exists; pass --resume to continue it",
            log.path().display()
        )));
    } else {
        BTreeSet::new()
    };

    let mut by_key: BTreeMap<(String, u64), TrialRecord> = log
        .load()?
        .into_iter()
        .map(|r| (r.key(), r))
        .collect();

    let todo: Vec<&PlannedTrial> = planned
        .iter()
        .filter(|p| !existing.contains(&(p.hash.clone(), p.spec.seed)))
        .collect();
    let scheduled = todo.len();
    let skipped = planned.len() - scheduled;

    let mut failure: Option<LabError> = None;
    run_ordered(
        todo.len(),
        workers,
        |i| {
            let p = todo[i];
            run_trial(&p.spec, precision)
        },
        |i, result| {
            if failure.is_some() {
                return;
            }
            let p = todo[i];
            match result {
                Ok(trial) => {
                    let trace_rel = format!("traces/{}-{}.csv", p.hash, p.spec.seed);
                    if let Err(e) = write_trace(&out_dir.join(&trace_rel), &trial.trace) {
                        failure = Some(e);
                        return;
                    }
                    let record = TrialRecord {
                        config_hash: p.hash.clone(),
                        axis: p.axis_label.clone(),
                        axis_point: p.axis_point,
                        hps: p.hps.clone(),
                        seed: p.spec.seed,
                        final_loss: if trial.diverged { None } else { Some(trial.final_loss) },
                        diverged: trial.diverged,
                        trace_path: trace_rel,
                    };
                    if let Err(e) = log.append(&record) {
                        failure = Some(e);
                        return;
                    }
                    by_key.insert(record.key(), record);
                }
                Err(e) => failure = Some(e),
            }
        },
    );
    if let Some(e) = failure {
        return Err(e);
    }

    let records = log.load()?;
    Ok((records, by_key, scheduled, skipped))
}

/// Execute (or resume) the grid sweep described by the config.
pub fn run_grid_sweep(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    precision: Precision,
    workers: usize,
    resume: bool,
) -> Result<SweepOutcome, LabError> {
    let grid = cfg.grid_spec()?;
    let planned = plan_grid(cfg, &grid, precision)?;
    let log = RunLog::at(out_dir.join("trials.jsonl"));
    let (records, by_key, scheduled, skipped) =
        execute_planned(planned, &log, out_dir, precision, workers, resume)?;

    // reassemble outcomes in grid order
    let planned = plan_grid(cfg, &grid, precision)?;
    let mut outcomes = BTreeMap::new();
    for p in &planned {
        let record = by_key.get(&(p.hash.clone(), p.spec.seed)).ok_or_else(|| {
            LabError::Runtime(format!("trial {} seed {} missing after execution", p.hash, p.spec.seed))
        })?;
        outcomes.insert(
            p.cell,
            TrialOutcome {
                final_loss: record.loss_or_inf(),
                diverged: record.diverged,
                diverged_at: None,
            },
        );
    }
    let verdict = verdict(&grid, &outcomes).map_err(LabError::from_core)?;
    let warnings = lr_divergence_warnings(&grid, &outcomes);
    Ok(SweepOutcome { grid, verdict, records, scheduled, skipped, warnings })
}

/// Result of a random search.
pub struct SearchOutcome {
    pub trials: Vec<SearchTrial>,
    pub selected: usize,
    pub selected_hps: BTreeMap<String, f64>,
    pub scheduled: usize,
    pub skipped: usize,
}

/// Execute (or resume) the random search described by the config.
pub fn run_search(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    precision: Precision,
    workers: usize,
    resume: bool,
) -> Result<SearchOutcome, LabError> {
    let (spec, search_seed) = cfg.search_spec()?;
    let samples = spec.sample(search_seed).map_err(LabError::from_core)?;
    let seed = *cfg.run.seeds.first().unwrap_or(&0);

    let mut planned = Vec::new();
    for (i, values) in samples.iter().enumerate() {
        let mut base = cfg.base_hps();
        for d in &spec.dims {
            d.hp.apply(&mut base, values[&d.hp.label()]);
        }
        let train = cfg.train_spec(cfg.model.width, base, cfg.run.steps, cfg.run.batch, seed)?;
        let hash = trial_hash(&descriptor(cfg, &train, precision));
        planned.push(PlannedTrial {
            cell: (i, 0, 0),
            spec: train,
            hash,
            axis_label: "search".to_string(),
            axis_point: i as u64,
            hps: values.clone(),
        });
    }
    let log = RunLog::at(out_dir.join("trials.jsonl"));
    let (_, by_key, scheduled, skipped) =
        execute_planned(planned, &log, out_dir, precision, workers, resume)?;

    let mut trials = Vec::new();
    for (i, values) in samples.iter().enumerate() {
        let mut base = cfg.base_hps();
        for d in &spec.dims {
            d.hp.apply(&mut base, values[&d.hp.label()]);
        }
        let train = cfg.train_spec(cfg.model.width, base, cfg.run.steps, cfg.run.batch, seed)?;
        let hash = trial_hash(&descriptor(cfg, &train, precision));
        let record = by_key
            .get(&(hash, seed))
            .ok_or_else(|| LabError::Runtime(format!("search trial {i} missing after execution")))?;
        trials.push(SearchTrial {
            values: values.clone(),
            final_loss: record.loss_or_inf(),
            diverged: record.diverged,
        });
    }
    let selected = envelope_select(&trials).map_err(|e| LabError::VerdictFail(e.to_string()))?;
    let selected_hps = trials[selected].values.clone();
    Ok(SearchOutcome { trials, selected, selected_hps, scheduled, skipped })
}

/// Result of a proxy-search-then-target-train transfer.
pub struct TransferOutcome {
    pub selected_hps: BTreeMap<String, f64>,
    pub proxy_trials: usize,
    pub target_hash: String,
    pub target_result: TrialResult,
    pub cost_ratio: f64,
}

/// Parameter count of the model at a width.
fn param_count(cfg: &ExperimentConfig, width: usize) -> Result<f64, LabError> {
    let spec = cfg.model_spec_at(width)?;
    let graph = mupdit_core::arch::build_graph(&spec).map_err(LabError::from_core)?;
    Ok(graph.weights.iter().map(|w| w.shape.iter().product::<usize>() as f64).sum())
}

/// Search base HPs on the proxy (the configured model width, batch, and
/// steps), resolve them at the target width, train the target, and
/// account the tuning cost.
pub fn run_transfer(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    precision: Precision,
    workers: usize,
    resume: bool,
) -> Result<TransferOutcome, LabError> {
    let t = cfg
        .transfer
        .clone()
        .ok_or_else(|| LabError::Config("config has no [transfer] section".into()))?;

    // proxy trials
    let (trials, n_proxy) = match t.source.as_str() {
        "search" => {
            let search = run_search(cfg, out_dir, precision, workers, resume)?;
            let n = search.trials.len();
            (search.trials, n)
        }
        "sweep" => {
            let sweep = cfg
                .sweep
                .as_ref()
                .ok_or_else(|| LabError::Config("[transfer] source=sweep needs a [sweep] section".into()))?;
            let hp = mupdit_core::transfer::HpName::parse(&sweep.hp).map_err(LabError::from_core)?;
            let log = RunLog::at(out_dir.join("trials.jsonl"));
            let mut planned = Vec::new();
            for (v, &value) in sweep.values.iter().enumerate() {
                for (s, &seed) in cfg.run.seeds.iter().enumerate() {
                    let mut base = cfg.base_hps();
                    hp.apply(&mut base, value);
                    let spec = cfg.train_spec(cfg.model.width, base, cfg.run.steps, cfg.run.batch, seed)?;
                    let hash = trial_hash(&descriptor(cfg, &spec, precision));
                    planned.push(PlannedTrial {
                        cell: (v, 0, s),
                        spec,
                        hash,
                        axis_label: "proxy".to_string(),
                        axis_point: v as u64,
                        hps: [(hp.label(), value)].into_iter().collect(),
                    });
                }
            }
            let total = planned.len();
            let (_, by_key, _, _) = execute_planned(planned, &log, out_dir, precision, workers, resume)?;
            // seed-mean per value
            let mut trials = Vec::new();
            for (v, &value) in sweep.values.iter().enumerate() {
                let mut sum = 0.0;
                let mut diverged = false;
                for &seed in &cfg.run.seeds {
                    let mut base = cfg.base_hps();
                    hp.apply(&mut base, value);
                    let spec = cfg.train_spec(cfg.model.width, base, cfg.run.steps, cfg.run.batch, seed)?;
                    let hash = trial_hash(&descriptor(cfg, &spec, precision));
                    let record = by_key.get(&(hash, seed)).ok_or_else(|| {
                        LabError::Runtime(format!("proxy trial {v} seed {seed} missing"))
                    })?;
                    diverged |= record.diverged;
                    sum += record.loss_or_inf();
                }
                trials.push(SearchTrial {
                    values: [(hp.label(), value)].into_iter().collect(),
                    final_loss: if diverged { f64::INFINITY } else { sum / cfg.run.seeds.len() as f64 },
                    diverged,
                });
            }
            (trials, total)
        }
        other => return Err(LabError::Config(format!("unknown transfer source {other}"))),
    };

    let selected = envelope_select(&trials).map_err(|e| LabError::VerdictFail(e.to_string()))?;
    let selected_hps = trials[selected].values.clone();

    // resolve the selected base HPs at the target and train it
    let mut base = cfg.base_hps();
    for (name, &value) in &selected_hps {
        mupdit_core::transfer::HpName::parse(name)
            .map_err(LabError::from_core)?
            .apply(&mut base, value);
    }
    let seed = *cfg.run.seeds.first().unwrap_or(&0);
    let target_spec = cfg.train_spec(t.target_width, base, t.target_steps, t.target_batch, seed)?;
    let target_hash = trial_hash(&descriptor(cfg, &target_spec, precision));
    let log = RunLog::at(out_dir.join("trials.jsonl"));
    let target_result = if resume && log.existing_keys()?.contains(&(target_hash.clone(), seed)) {
        let record = log
            .load()?
            .into_iter()
            .find(|r| r.config_hash == target_hash && r.seed == seed)
            .expect("key existed");
        TrialResult {
            trace: Vec::new(),
            final_loss: record.loss_or_inf(),
            diverged: record.diverged,
            diverged_at: None,
            steps_completed: 0,
            seed,
            wall_time_s: 0.0,
        }
    } else {
        let start = std::time::Instant::now();
        let mut result = run_trial(&target_spec, precision)?;
        result.wall_time_s = start.elapsed().as_secs_f64();
        let trace_rel = format!("traces/{target_hash}-{seed}.csv");
        write_trace(&out_dir.join(&trace_rel), &result.trace)?;
        log.append(&TrialRecord {
            config_hash: target_hash.clone(),
            axis: "target".to_string(),
            axis_point: t.target_width as u64,
            hps: selected_hps.clone(),
            seed,
            final_loss: if result.diverged { None } else { Some(result.final_loss) },
            diverged: result.diverged,
            trace_path: trace_rel,
        })?;
        result
    };

    // cost accounting: R proxy trials at proxy size vs one target run
    let s_proxy = param_count(cfg, cfg.model.width)?;
    let s_target = param_count(cfg, t.target_width)?;
    let inputs = mupdit_core::mup::CostInputs::iterations(
        n_proxy as f64,
        s_proxy,
        cfg.run.batch as f64,
        cfg.run.steps as f64,
        s_target,
        t.target_batch as f64,
        t.target_steps as f64,
    );
    let cost_ratio = mupdit_core::mup::cost_ratio(&inputs).map_err(LabError::from_core)?;

    Ok(TransferOutcome {
        selected_hps,
        proxy_trials: n_proxy,
        target_hash,
        target_result,
        cost_ratio,
    })
}

/// Coordinate check across widths (parallel over width cells).
pub fn run_coordcheck_parallel(
    cfg: &ExperimentConfig,
    precision: Precision,
    workers: usize,
) -> Result<(CoordReport, CoordVerdict), LabError> {
    let section = cfg
        .coordcheck
        .clone()
        .ok_or_else(|| LabError::Config("config has no [coordcheck] section".into()))?;
    let base = cfg.base_hps();
    let train = cfg.train_spec(
        cfg.model.width,
        base,
        section.steps,
        section.batch,
        *cfg.run.seeds.first().unwrap_or(&0),
    )?;
    let spec = CoordSpec { train, widths: section.widths.clone(), seeds: cfg.run.seeds.clone() };

    let spec_ref = &spec;
    let mut collected: Vec<(usize, Result<WidthCell, LabError>)> = Vec::new();
    run_ordered(
        spec.widths.len(),
        workers,
        |i| -> Result<WidthCell, LabError> {
            let w = spec_ref.widths[i];
            let cell = match precision {
                Precision::F32 => run_width::<f32>(spec_ref, w),
                Precision::F64 => run_width::<f64>(spec_ref, w),
            }
            .map_err(LabError::from_core)?;
            Ok(cell.into())
        },
        |i, r| collected.push((i, r)),
    );
    let mut assembled = Vec::new();
    for (i, r) in collected {
        assembled.push((spec.widths[i], r?));
    }
    let report = assemble(&spec, assembled).map_err(LabError::from_core)?;
    let verdict = mupdit_core::coord::verdict(&report, section.threshold).map_err(LabError::from_core)?;
    Ok((report, verdict))
}

/// Path of the trial log inside an output directory.
pub fn log_path(out_dir: &Path) -> PathBuf {
    out_dir.join("trials.jsonl")
}
