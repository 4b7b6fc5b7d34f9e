//! The four experiment kinds behind the subcommands. Every run is a
//! pure function of (config, seed) except for wall-clock metrics.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use kfac_lab::curvature::exact_block_ggn;
use kfac_lab::error::Error;
use kfac_lab::kfac::{
    analytic_factors, analytic_factors_scaled, approximation_errors, grad_factors_expand,
    grad_factors_reduce, kron_assemble, ExpandScaling, Flavour,
};
use kfac_lab::net::{Batch, ModelSpec, Setting};
use kfac_lab::rng::Substream;
use kfac_lab::scenarios::{
    attention_moons, attention_scenario, deep_linear_regression, graph_motifs,
    linear_gaussian_split, random_spd, synthetic_grad_captures, DeepLinearScenario,
};
use kfac_lab::tensor::Tensor;
use kfac_lab::train::{
    factor_eigenvalues, fit_loss, gd_train, kfac_train, laplace_log_marglik, marglik_select_decay,
    total_nll, write_checkpoint, KfacTrainer, MargLikConfig, OptimizerConfig, TrainTrace,
};

use crate::config::ExperimentFile;
use crate::rows::{write_matrix_grid, ResultRow};

fn lab_err(e: Error) -> anyhow::Error {
    anyhow::Error::new(e)
}

fn parse_setting(s: &str) -> Result<Setting> {
    match s {
        "expand" => Ok(Setting::Expand),
        "reduce" => Ok(Setting::Reduce),
        other => Err(lab_err(Error::Configuration(format!(
            "unknown setting '{other}'"
        )))),
    }
}

pub fn parse_flavours(s: &str) -> Result<Vec<Flavour>> {
    match s {
        "both" => Ok(vec![Flavour::Expand, Flavour::Reduce]),
        other => Ok(vec![other.parse().map_err(lab_err)?]),
    }
}

// ---------------------------------------------------------------------------
// verify-exactness
// ---------------------------------------------------------------------------

fn require_positive(name: &str, values: &[usize]) -> Result<()> {
    if values.contains(&0) {
        return Err(lab_err(Error::Configuration(format!(
            "{name} entries must be positive"
        ))));
    }
    Ok(())
}

fn verify_scenario(cfg: &ExperimentFile, seed: u64) -> Result<(ModelSpec, Batch)> {
    let v = &cfg.verify;
    require_positive("verify.dims", &v.dims)?;
    require_positive("verify.r/n", &[v.r, v.n])?;
    let setting = parse_setting(&v.setting)?;
    let c = *v
        .dims
        .last()
        .ok_or_else(|| lab_err(Error::Configuration("verify.dims must be non-empty".into())))?;
    let sigma = match v.sigma.as_str() {
        "identity" => Tensor::identity(c),
        "random" => random_spd(c, &mut Substream::new(seed, "cli/verify/sigma")),
        other => {
            return Err(lab_err(Error::Configuration(format!(
                "unknown sigma kind '{other}'"
            ))))
        }
    };
    match v.model.as_str() {
        "deep-linear" => {
            let scenario = DeepLinearScenario {
                dims: v.dims.clone(),
                r: v.r,
                n: v.n,
                setting,
                agg_scale: v.agg_scale,
                weighted_agg: None,
            };
            scenario.build(sigma, seed).map_err(lab_err)
        }
        "attention" => {
            if v.dims.len() != 2 {
                return Err(lab_err(Error::Configuration(
                    "attention verify model takes dims = [d_in, d_out]".into(),
                )));
            }
            attention_scenario(v.dims[0], v.dims[1], c, v.r, v.n, sigma, setting, seed)
                .map_err(lab_err)
        }
        other => Err(lab_err(Error::Configuration(format!(
            "verify model '{other}' is not an exactness configuration"
        )))),
    }
}

pub fn run_verify_exactness(
    cfg: &ExperimentFile,
    seeds: &[u64],
    flavours: &[Flavour],
    out: &str,
) -> Result<Vec<ResultRow>> {
    let expand_scaling = match cfg.verify.expand_scaling.as_str() {
        "rows" => ExpandScaling::PerRow,
        "examples" => ExpandScaling::PerExample,
        other => {
            return Err(lab_err(Error::Configuration(format!(
                "unknown expand_scaling '{other}' (expected rows or examples)"
            ))))
        }
    };
    let mut rows = Vec::new();
    for &seed in seeds {
        let (model, batch) = verify_scenario(cfg, seed)?;
        let exact = exact_block_ggn(&model, &batch).map_err(lab_err)?;
        for &flavour in flavours {
            let factors = analytic_factors_scaled(&model, &batch, flavour, false, expand_scaling)
                .map_err(lab_err)?;
            let errors = approximation_errors(&factors, &exact);
            for (k, err) in errors.iter().enumerate() {
                rows.push(ResultRow::new(
                    "verify-exactness",
                    seed,
                    k as i64,
                    flavour.label(),
                    "rel_frob_error",
                    *err,
                    "ratio",
                ));
            }
            if cfg.verify.dump_matrices {
                let stem = PathBuf::from(out);
                let dir = stem.parent().map(PathBuf::from).unwrap_or_default();
                let base = stem
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "verify".into());
                for (k, lf) in factors.layers.iter().enumerate() {
                    let approx = kron_assemble(lf);
                    let error = approx.sub(&exact[k]).map_err(lab_err)?;
                    let abs_error =
                        Tensor::from_fn(error.rows(), error.cols(), |i, j| error.at(i, j).abs());
                    let grid = |tag: &str| {
                        dir.join(format!(
                            "{base}_seed{seed}_layer{k}_{}_{tag}.csv",
                            flavour.label()
                        ))
                    };
                    write_matrix_grid(&grid("oracle"), &exact[k])?;
                    write_matrix_grid(&grid("approx"), &approx)?;
                    write_matrix_grid(&grid("abs_error"), &abs_error)?;
                }
            }
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// time-factors
// ---------------------------------------------------------------------------

fn median_micros(repeats: usize, warmup: usize, mut run: impl FnMut()) -> f64 {
    for _ in 0..warmup {
        run();
    }
    let mut times: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            run();
            t.elapsed().as_secs_f64() * 1e6
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = times.len() / 2;
    if times.len().is_multiple_of(2) {
        0.5 * (times[mid - 1] + times[mid])
    } else {
        times[mid]
    }
}

pub fn run_time_factors(
    cfg: &ExperimentFile,
    seeds: &[u64],
    flavours: &[Flavour],
) -> Result<Vec<ResultRow>> {
    let t = &cfg.timing;
    if t.r_sweep.is_empty() {
        return Err(lab_err(Error::Configuration(
            "timing.r_sweep must be non-empty".into(),
        )));
    }
    require_positive("timing.r_sweep", &t.r_sweep)?;
    require_positive("timing.p/n", &[t.p, t.n])?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for &flavour in flavours {
            let mut sweep_times = Vec::new();
            for (i, &r) in t.r_sweep.iter().enumerate() {
                let (inputs, grads) =
                    synthetic_grad_captures(t.n, r, t.p, t.p, seed.wrapping_add(i as u64));
                let micros = match flavour {
                    Flavour::Expand => median_micros(t.repeats, t.warmup, || {
                        let _ = grad_factors_expand(&inputs, &grads);
                    }),
                    Flavour::Reduce => median_micros(t.repeats, t.warmup, || {
                        let _ = grad_factors_reduce(&inputs, &grads);
                    }),
                };
                sweep_times.push(micros);
                rows.push(ResultRow::new(
                    "time-factors",
                    seed,
                    r as i64,
                    flavour.label(),
                    "wall_micros",
                    micros,
                    "us",
                ));
                let captured_rows = match flavour {
                    Flavour::Expand => t.n * r,
                    Flavour::Reduce => t.n,
                };
                rows.push(ResultRow::new(
                    "time-factors",
                    seed,
                    r as i64,
                    flavour.label(),
                    "rows_captured",
                    captured_rows as f64,
                    "count",
                ));
            }
            let ratio = sweep_times.last().unwrap() / sweep_times.first().unwrap();
            rows.push(ResultRow::new(
                "time-factors",
                seed,
                -1,
                flavour.label(),
                "wall_ratio",
                ratio,
                "ratio",
            ));
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn build_task(task: &str, examples: usize, seed: u64) -> Result<(ModelSpec, Batch, bool)> {
    match task {
        "deep-linear" => {
            let (m, b) = deep_linear_regression(examples, 8, seed).map_err(lab_err)?;
            Ok((m, b, false))
        }
        "attention-moons" => {
            let (m, b) = attention_moons(examples, seed).map_err(lab_err)?;
            Ok((m, b, false))
        }
        "graph-motifs" => {
            let (m, b) = graph_motifs(examples, seed).map_err(lab_err)?;
            Ok((m, b, true))
        }
        other => Err(lab_err(Error::Configuration(format!(
            "unknown training task '{other}'"
        )))),
    }
}

struct TunedRun {
    trace: TrainTrace,
    steps: Option<usize>,
}

fn trace_rows(rows: &mut Vec<ResultRow>, kind: &str, seed: u64, flavour: &str, run: &TunedRun) {
    for (step, loss) in run.trace.losses.iter().enumerate() {
        rows.push(ResultRow::new(
            kind,
            seed,
            step as i64,
            flavour,
            "loss",
            *loss,
            "nats",
        ));
    }
    // budget exhaustion is a -1 row, not an error
    let steps_value = run.steps.map(|s| s as f64).unwrap_or(-1.0);
    rows.push(ResultRow::new(
        kind,
        seed,
        -1,
        flavour,
        "steps_to_target",
        steps_value,
        "steps",
    ));
}

fn better(candidate: &TunedRun, incumbent: &Option<TunedRun>) -> bool {
    match incumbent {
        None => true,
        Some(cur) => match (candidate.steps, cur.steps) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => {
                let ca = candidate
                    .trace
                    .losses
                    .last()
                    .copied()
                    .unwrap_or(f64::INFINITY);
                let cb = cur.trace.losses.last().copied().unwrap_or(f64::INFINITY);
                ca < cb
            }
        },
    }
}

pub fn run_train(
    cfg: &ExperimentFile,
    seeds: &[u64],
    flavours: &[Flavour],
) -> Result<Vec<ResultRow>> {
    let t = &cfg.train;
    let mut rows = Vec::new();
    for &seed in seeds {
        // gradient-descent baseline over its grid
        let mut best_gd: Option<TunedRun> = None;
        for &lr in &t.gd_grid {
            let (mut model, batch, _) = build_task(&t.task, t.examples, seed)?;
            let trace = gd_train(&mut model, &batch, lr, t.gd_budget, t.target).map_err(lab_err)?;
            let run = TunedRun {
                steps: trace.steps_to_target,
                trace,
            };
            if better(&run, &best_gd) {
                best_gd = Some(run);
            }
        }
        if let Some(run) = &best_gd {
            if t.trace {
                trace_rows(&mut rows, "train", seed, "gd", run);
            } else {
                let steps_value = run.steps.map(|s| s as f64).unwrap_or(-1.0);
                rows.push(ResultRow::new(
                    "train",
                    seed,
                    -1,
                    "gd",
                    "steps_to_target",
                    steps_value,
                    "steps",
                ));
            }
        }
        for &flavour in flavours {
            let mut best: Option<TunedRun> = None;
            for &lr in &t.kfac_lr_grid {
                for &damping in &t.kfac_damping_grid {
                    let (mut model, batch, ragged) = build_task(&t.task, t.examples, seed)?;
                    let config = OptimizerConfig {
                        learning_rate: lr,
                        damping,
                        ema_decay: 0.9,
                        ..OptimizerConfig::default()
                    };
                    let trace = kfac_train(
                        &mut model, &batch, config, flavour, ragged, seed, t.budget, t.target,
                    )
                    .map_err(lab_err)?;
                    let run = TunedRun {
                        steps: trace.steps_to_target,
                        trace,
                    };
                    if better(&run, &best) {
                        best = Some(run);
                    }
                }
            }
            if let Some(run) = &best {
                if t.trace {
                    trace_rows(&mut rows, "train", seed, flavour.label(), run);
                } else {
                    let steps_value = run.steps.map(|s| s as f64).unwrap_or(-1.0);
                    rows.push(ResultRow::new(
                        "train",
                        seed,
                        -1,
                        flavour.label(),
                        "steps_to_target",
                        steps_value,
                        "steps",
                    ));
                }
            }
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// marglik
// ---------------------------------------------------------------------------

pub fn run_marglik(
    cfg: &ExperimentFile,
    seeds: &[u64],
    flavours: &[Flavour],
    out: &str,
) -> Result<Vec<ResultRow>> {
    let m = &cfg.marglik;
    require_positive(
        "marglik.examples/input_dim",
        &[m.examples, m.val_examples, m.input_dim],
    )?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for &flavour in flavours {
            let (mut model, batch, _) =
                linear_gaussian_split(m.examples, m.input_dim, m.noise_std, seed, "train")
                    .map_err(lab_err)?;
            let (_, val_batch, _) =
                linear_gaussian_split(m.val_examples, m.input_dim, m.noise_std, seed, "val")
                    .map_err(lab_err)?;
            let mcfg = MargLikConfig {
                passes: m.passes,
                steps_per_pass: m.steps_per_pass,
                select_every: m.select_every,
                ascent_steps: m.ascent_steps,
                ascent_step_size: m.ascent_step_size,
                initial_delta: m.initial_delta,
                flavour,
                optimizer: OptimizerConfig {
                    learning_rate: 1.0,
                    damping: 1.0,
                    ..OptimizerConfig::default()
                },
            };
            let trace = marglik_select_decay(&mut model, &batch, &mcfg, seed).map_err(lab_err)?;
            for (event, value) in trace.events.iter().enumerate() {
                rows.push(ResultRow::new(
                    "marglik",
                    seed,
                    event as i64,
                    flavour.label(),
                    "marglik",
                    *value,
                    "nats",
                ));
            }
            for (event, deltas) in trace.delta_history.iter().enumerate() {
                let _ = event; // trajectory order is the row order
                for (layer, delta) in deltas.iter().enumerate() {
                    rows.push(ResultRow::new(
                        "marglik",
                        seed,
                        layer as i64,
                        flavour.label(),
                        "delta",
                        *delta,
                        "precision",
                    ));
                }
            }
            let val_loss = fit_loss(&model, &val_batch).map_err(lab_err)?;
            rows.push(ResultRow::new(
                "marglik",
                seed,
                -1,
                flavour.label(),
                "loss",
                val_loss,
                "nats",
            ));
            // checkpoint the selected parameters, factors and δ
            let factors = analytic_factors(&model, &batch, flavour, false).map_err(lab_err)?;
            let checkpoint = write_checkpoint(&model, &trace.deltas, Some(&factors));
            let path = format!("{out}.seed{seed}.{}.checkpoint.txt", flavour.label());
            std::fs::write(&path, checkpoint)
                .map_err(|e| anyhow::anyhow!("cannot write checkpoint {path}: {e}"))?;

            if m.control {
                // selection-off control: same training budget at the fixed
                // initial δ
                let (mut control_model, control_batch, _) =
                    linear_gaussian_split(m.examples, m.input_dim, m.noise_std, seed, "train")
                        .map_err(lab_err)?;
                let deltas = vec![m.initial_delta; control_model.param_layers().len()];
                let mut trainer = KfacTrainer::new(mcfg.optimizer.clone(), flavour, false, seed)
                    .map_err(lab_err)?;
                for _ in 0..m.passes * m.steps_per_pass {
                    trainer
                        .step_with_decay(&mut control_model, &control_batch, &deltas)
                        .map_err(lab_err)?;
                }
                let factors = analytic_factors(&control_model, &control_batch, flavour, false)
                    .map_err(lab_err)?;
                let eigs = factor_eigenvalues(&factors).map_err(lab_err)?;
                let infos = control_model.param_layers();
                let params: Vec<Tensor> = infos
                    .iter()
                    .map(|i| control_model.weight(i.layer, i.part).clone())
                    .collect();
                let nll = total_nll(&control_model, &control_batch).map_err(lab_err)?;
                let control_marglik =
                    laplace_log_marglik(nll, &params, &eigs, &deltas).map_err(lab_err)?;
                rows.push(ResultRow::new(
                    "marglik-control",
                    seed,
                    -1,
                    flavour.label(),
                    "marglik",
                    control_marglik,
                    "nats",
                ));
                let control_val = fit_loss(&control_model, &val_batch).map_err(lab_err)?;
                rows.push(ResultRow::new(
                    "marglik-control",
                    seed,
                    -1,
                    flavour.label(),
                    "loss",
                    control_val,
                    "nats",
                ));
            }
        }
    }
    Ok(rows)
}
