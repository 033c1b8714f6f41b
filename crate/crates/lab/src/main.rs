//! Command-line entry point.
//!
//! Exit codes: 0 success or verdict pass, 1 verdict fail, 2
//! configuration error, 3 unrecoverable runtime error. Divergence of
//! individual trials is recorded data, never an exit condition.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mupdit_lab::config::ExperimentConfig;
use mupdit_lab::pool::default_workers;
use mupdit_lab::report::{emit_report, VerdictJson};
use mupdit_lab::runlog::{write_trace, RunLog, TrialRecord};
use mupdit_lab::snapshot::write_snapshot;
use mupdit_lab::sweep::{
    descriptor, run_coordcheck_parallel, run_grid_sweep, run_search, run_transfer,
};
use mupdit_lab::{LabError, Precision};

#[derive(Parser)]
#[command(name = "mupdit", version, about = "Width-transfer laboratory for diffusion Transformers")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `[output] dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override for single-run commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: MUPDIT_WORKERS, then available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Numeric precision: 32 or 64 (overrides `[run] precision`).
    #[arg(long, global = true)]
    precision: Option<u8>,
    /// Continue an existing trial log instead of refusing to overwrite.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and snapshot its weights.
    Train,
    /// Activation/update magnitudes across widths; exit 1 on a failed verdict.
    Coordcheck,
    /// Grid sweep of one hyperparameter across an axis; exit 1 when the
    /// optimum does not transfer.
    Sweep,
    /// Random search over base hyperparameters.
    Search,
    /// Search on the proxy, resolve at the target width, train the target.
    Transfer,
    /// Check the instruction program against the direct forward pass.
    TpVerify,
    /// Tuning-cost ratio from the `[cost]` section.
    Cost,
    /// Re-emit CSV/SVG/verdict from an existing trial log.
    Report,
}

struct Ctx {
    cfg: ExperimentConfig,
    out_dir: PathBuf,
    precision: Precision,
    workers: usize,
    resume: bool,
    seed_override: Option<u64>,
}

fn load_ctx(cli: &Cli) -> Result<Ctx, LabError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| LabError::Config("--config is required for this command".into()))?;
    let cfg = ExperimentConfig::from_path(path)?;
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    let precision = Precision::parse(cli.precision.unwrap_or(cfg.run.precision))?;
    let workers = cli.workers.unwrap_or_else(default_workers);
    Ok(Ctx {
        cfg,
        out_dir,
        precision,
        workers,
        resume: cli.resume,
        seed_override: cli.seed,
    })
}

fn cmd_train(ctx: &Ctx) -> Result<(), LabError> {
    let cfg = &ctx.cfg;
    let seed = ctx.seed_override.unwrap_or(*cfg.run.seeds.first().unwrap_or(&0));
    let spec = cfg.train_spec(cfg.model.width, cfg.base_hps(), cfg.run.steps, cfg.run.batch, seed)?;
    let hash = mupdit_lab::config::trial_hash(&descriptor(cfg, &spec, ctx.precision));
    let start = std::time::Instant::now();
    let (result, dtype) = match ctx.precision {
        Precision::F32 => {
            let (result, trainer) =
                mupdit_core::task::train_run_capture::<f32>(&spec, None).map_err(LabError::from_core)?;
            write_snapshot(&trainer.store, &ctx.out_dir, "weights", "f32")?;
            (result, "f32")
        }
        Precision::F64 => {
            let (result, trainer) =
                mupdit_core::task::train_run_capture::<f64>(&spec, None).map_err(LabError::from_core)?;
            write_snapshot(&trainer.store, &ctx.out_dir, "weights", "f64")?;
            (result, "f64")
        }
    };
    let wall = start.elapsed().as_secs_f64();
    let trace_rel = format!("traces/{hash}-{seed}.csv");
    write_trace(&ctx.out_dir.join(&trace_rel), &result.trace)?;
    let log = RunLog::at(ctx.out_dir.join("trials.jsonl"));
    log.append(&TrialRecord {
        config_hash: hash.clone(),
        axis: "train".into(),
        axis_point: cfg.model.width as u64,
        hps: BTreeMap::new(),
        seed,
        final_loss: if result.diverged { None } else { Some(result.final_loss) },
        diverged: result.diverged,
        trace_path: trace_rel,
    })?;
    eprintln!("trained {} steps in {wall:.1}s ({dtype})", result.steps_completed);
    println!(
        "final_loss={} diverged={} hash={hash}",
        if result.diverged { "inf".to_string() } else { format!("{}", result.final_loss) },
        result.diverged
    );
    Ok(())
}

fn cmd_coordcheck(ctx: &Ctx) -> Result<(), LabError> {
    let (report, verdict) = run_coordcheck_parallel(&ctx.cfg, ctx.precision, ctx.workers)?;
    std::fs::create_dir_all(&ctx.out_dir)?;
    // CSV: width, layer, step, act_rms, upd_rms (two statistic families)
    let mut csv = String::from("width,layer,step,act_rms,upd_rms\n");
    for &w in &report.widths {
        for layer in &report.act_layers {
            for step in 0..report.steps {
                let rms = report.act[&(w, layer.clone(), step)];
                csv.push_str(&format!("{w},{layer},{step},{rms},\n"));
            }
        }
        for layer in &report.upd_layers {
            for step in 1..=report.steps {
                let rms = report.upd[&(w, layer.clone(), step)];
                csv.push_str(&format!("{w},{layer},{step},,{rms}\n"));
            }
        }
    }
    std::fs::write(ctx.out_dir.join("coordcheck.csv"), csv)?;
    let json = serde_json::json!({
        "scheme": report.scheme_label,
        "widths": report.widths,
        "threshold": verdict.threshold,
        "layer_pass": verdict.layer_pass,
        "layer_worst_ratio": verdict.layer_worst_ratio,
        "diverged_widths": verdict.diverged_widths,
        "pass": verdict.pass,
    });
    std::fs::write(
        ctx.out_dir.join("coord_verdict.json"),
        serde_json::to_string_pretty(&json).map_err(|e| LabError::Runtime(e.to_string()))? + "\n",
    )?;
    println!(
        "coordcheck {}: {}",
        report.scheme_label,
        if verdict.pass { "pass" } else { "fail" }
    );
    if verdict.pass {
        Ok(())
    } else {
        Err(LabError::VerdictFail("coordinate check failed".into()))
    }
}

fn sweep_verdict_json(outcome: &mupdit_lab::sweep::SweepOutcome) -> VerdictJson {
    VerdictJson {
        axis: outcome.grid.axis.as_str().to_string(),
        axis_points: outcome.grid.points.clone(),
        argmin_indices: outcome.verdict.argmin_indices.clone(),
        tolerance: outcome.verdict.tolerance,
        pass: outcome.verdict.pass,
        reason: outcome.verdict.reason.clone(),
        warnings: outcome.warnings.clone(),
    }
}

fn cmd_sweep(ctx: &Ctx) -> Result<(), LabError> {
    let outcome = run_grid_sweep(&ctx.cfg, &ctx.out_dir, ctx.precision, ctx.workers, ctx.resume)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    emit_report(&outcome.records, Some(&sweep_verdict_json(&outcome)), &ctx.out_dir)?;
    println!(
        "sweep {} over {:?}: scheduled {} trials, skipped {}, argmin {:?}, {}",
        outcome.grid.axis.as_str(),
        outcome.grid.points,
        outcome.scheduled,
        outcome.skipped,
        outcome.verdict.argmin_indices,
        if outcome.verdict.pass { "pass" } else { "fail" }
    );
    if outcome.verdict.pass {
        Ok(())
    } else {
        Err(LabError::VerdictFail(
            outcome.verdict.reason.clone().unwrap_or_else(|| "optimum did not transfer".into()),
        ))
    }
}

fn cmd_search(ctx: &Ctx) -> Result<(), LabError> {
    let outcome = run_search(&ctx.cfg, &ctx.out_dir, ctx.precision, ctx.workers, ctx.resume)?;
    let log = RunLog::at(ctx.out_dir.join("trials.jsonl"));
    emit_report(&log.load()?, None, &ctx.out_dir)?;
    let selection = serde_json::json!({
        "n_trials": outcome.trials.len(),
        "scheduled": outcome.scheduled,
        "skipped": outcome.skipped,
        "selected_index": outcome.selected,
        "selected_hps": outcome.selected_hps,
        "selected_loss": outcome.trials[outcome.selected].final_loss,
    });
    std::fs::write(
        ctx.out_dir.join("selection.json"),
        serde_json::to_string_pretty(&selection).map_err(|e| LabError::Runtime(e.to_string()))? + "\n",
    )?;
    println!(
        "search: {} trials, selected {:?} (loss {})",
        outcome.trials.len(),
        outcome.selected_hps,
        outcome.trials[outcome.selected].final_loss
    );
    Ok(())
}

fn cmd_transfer(ctx: &Ctx) -> Result<(), LabError> {
    let outcome = run_transfer(&ctx.cfg, &ctx.out_dir, ctx.precision, ctx.workers, ctx.resume)?;
    let json = serde_json::json!({
        "selected_hps": outcome.selected_hps,
        "proxy_trials": outcome.proxy_trials,
        "target_hash": outcome.target_hash,
        "target_final_loss": if outcome.target_result.diverged {
            None
        } else {
            Some(outcome.target_result.final_loss)
        },
        "target_diverged": outcome.target_result.diverged,
        "cost_ratio": outcome.cost_ratio,
    });
    std::fs::create_dir_all(&ctx.out_dir)?;
    std::fs::write(
        ctx.out_dir.join("transfer.json"),
        serde_json::to_string_pretty(&json).map_err(|e| LabError::Runtime(e.to_string()))? + "\n",
    )?;
    println!(
        "transfer: selected {:?}, target loss {}, tuning cost ratio {:.4}",
        outcome.selected_hps,
        if outcome.target_result.diverged {
            "inf".into()
        } else {
            format!("{}", outcome.target_result.final_loss)
        },
        outcome.cost_ratio
    );
    Ok(())
}

fn cmd_tp_verify(cli: &Cli) -> Result<(), LabError> {
    let ns = [4usize, 16, 64];
    let seeds: Vec<u64> = (0..10).collect();
    let diff = mupdit_core::tp::equivalence_check(&ns, &seeds, 0.0).map_err(LabError::from_core)?;
    if let Some(out) = &cli.out {
        std::fs::create_dir_all(out)?;
        let program = mupdit_core::tp::build_dit_program(0.0);
        let json = mupdit_lab::tpjson::program_to_json(&program);
        std::fs::write(
            out.join("dit_program.json"),
            serde_json::to_string_pretty(&json).map_err(|e| LabError::Runtime(e.to_string()))? + "\n",
        )?;
    }
    println!("tp-verify: max |diff| = {diff:e} over n in {ns:?} x {} seeds", seeds.len());
    if diff < 1e-9 {
        Ok(())
    } else {
        Err(LabError::VerdictFail(format!("program/direct divergence {diff:e} >= 1e-9")))
    }
}

fn cmd_cost(ctx: &Ctx) -> Result<(), LabError> {
    let inputs = ctx.cfg.cost_inputs()?;
    let ratio = mupdit_core::mup::cost_ratio(&inputs).map_err(LabError::from_core)?;
    println!("{ratio:.4} ({:.1}%)", ratio * 100.0);
    Ok(())
}

fn cmd_report(ctx: &Ctx) -> Result<(), LabError> {
    let log = RunLog::at(ctx.out_dir.join("trials.jsonl"));
    let records = log.load()?;
    // attach a verdict when the config carries a sweep grid the log covers
    let verdict = if ctx.cfg.sweep.is_some() {
        run_verdict_from_log(ctx, &records).ok()
    } else {
        None
    };
    let bundle = emit_report(&records, verdict.as_ref(), &ctx.out_dir)?;
    println!(
        "report: {} records -> {}{}{}",
        records.len(),
        bundle.csv_path.display(),
        bundle.verdict_path.map(|p| format!(", {}", p.display())).unwrap_or_default(),
        bundle.svg_path.map(|p| format!(", {}", p.display())).unwrap_or_default(),
    );
    Ok(())
}

/// Recompute the sweep verdict from log records alone.
fn run_verdict_from_log(ctx: &Ctx, records: &[TrialRecord]) -> Result<VerdictJson, LabError> {
    use mupdit_core::transfer::TrialOutcome;
    let grid = ctx.cfg.grid_spec()?;
    let by_cell: BTreeMap<(u64, u64, u64), &TrialRecord> = records
        .iter()
        .map(|r| {
            let hp_bits = r.hps.values().next().map(|v| v.to_bits()).unwrap_or(0);
            ((r.axis_point, hp_bits, r.seed), r)
        })
        .collect();
    let mut outcomes = BTreeMap::new();
    for (a, v, s) in grid.trials() {
        let key = (grid.points[a], grid.values[v].to_bits(), grid.seeds[s]);
        let r = by_cell
            .get(&key)
            .ok_or_else(|| LabError::Config("log does not cover the configured grid".into()))?;
        outcomes.insert(
            (a, v, s),
            TrialOutcome { final_loss: r.loss_or_inf(), diverged: r.diverged, diverged_at: None },
        );
    }
    let verdict = mupdit_core::transfer::verdict(&grid, &outcomes).map_err(LabError::from_core)?;
    let warnings = mupdit_core::transfer::lr_divergence_warnings(&grid, &outcomes);
    Ok(VerdictJson {
        axis: grid.axis.as_str().to_string(),
        axis_points: grid.points.clone(),
        argmin_indices: verdict.argmin_indices,
        tolerance: verdict.tolerance,
        pass: verdict.pass,
        reason: verdict.reason,
        warnings,
    })
}

fn run(cli: &Cli) -> Result<(), LabError> {
    match &cli.command {
        Command::TpVerify => cmd_tp_verify(cli),
        command => {
            let ctx = load_ctx(cli)?;
            match command {
                Command::Train => cmd_train(&ctx),
                Command::Coordcheck => cmd_coordcheck(&ctx),
                Command::Sweep => cmd_sweep(&ctx),
                Command::Search => cmd_search(&ctx),
                Command::Transfer => cmd_transfer(&ctx),
                Command::Cost => cmd_cost(&ctx),
                Command::Report => cmd_report(&ctx),
                Command::TpVerify => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
