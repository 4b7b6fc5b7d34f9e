//! Preconditioned-gradient training and Kronecker Laplace evidence.
//!
//! The trainer refreshes Kronecker factors and the cached preconditioner
//! on their own intervals and applies `θ ← θ − α_t (B+λI)⁻¹ ∇_W (A+λI)⁻¹`
//! per layer. The Laplace routine turns the same factors into a log
//! marginal likelihood whose per-layer log-determinants come from
//! Kronecker eigenvalue grids, and ascends it in the per-layer prior
//! precisions (weight decay).

use crate::error::{Error, Result};
use crate::kfac::{ema_update, mc_factors, Flavour, KroneckerFactors};
use crate::net::{
    forward, loss_and_output_grads, loss_constant, loss_gradients, loss_term_count, Batch,
    ModelSpec,
};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// learning-rate schedules
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    Constant,
    /// Linear warmup from zero, then cosine decay to `end_factor · base`.
    WarmupCosine {
        warmup: usize,
        total: usize,
        end_factor: f64,
    },
    /// Linear warmup from zero, then `(1 − progress)^power` decay.
    WarmupPolynomial {
        warmup: usize,
        total: usize,
        power: f64,
        end_factor: f64,
    },
}

/// Deterministic learning rate at a step index.
pub fn lr_schedule(kind: &ScheduleKind, step: usize, base: f64) -> f64 {
    match kind {
        ScheduleKind::Constant => base,
        ScheduleKind::WarmupCosine {
            warmup,
            total,
            end_factor,
        } => {
            if step < *warmup {
                return base * step as f64 / *warmup as f64;
            }
            let progress = decay_progress(step, *warmup, *total);
            let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            base * (end_factor + (1.0 - end_factor) * cos)
        }
        ScheduleKind::WarmupPolynomial {
            warmup,
            total,
            power,
            end_factor,
        } => {
            if step < *warmup {
                return base * step as f64 / *warmup as f64;
            }
            let progress = decay_progress(step, *warmup, *total);
            base * (end_factor + (1.0 - end_factor) * (1.0 - progress).powf(*power))
        }
    }
}

fn decay_progress(step: usize, warmup: usize, total: usize) -> f64 {
    if total <= warmup {
        return 1.0;
    }
    ((step - warmup) as f64 / (total - warmup) as f64).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub damping: f64,
    /// Steps between factor recomputations.
    pub factor_interval: usize,
    /// Steps between preconditioner (Cholesky) rebuilds.
    pub precond_interval: usize,
    /// Moving-average decay for the factors; 0 replaces them outright.
    pub ema_decay: f64,
    pub schedule: ScheduleKind,
    /// Monte-Carlo samples per factor refresh.
    pub mc_samples: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            damping: 1e-3,
            factor_interval: 1,
            precond_interval: 1,
            ema_decay: 0.0,
            schedule: ScheduleKind::Constant,
            mc_samples: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Argument("learning rate must be positive".into()));
        }
        if self.damping < 0.0 {
            return Err(Error::Argument("damping must be non-negative".into()));
        }
        if self.factor_interval < 1 || self.precond_interval < 1 {
            return Err(Error::Argument("update intervals must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Argument("ema decay must lie in [0, 1)".into()));
        }
        if self.mc_samples < 1 {
            return Err(Error::Argument("mc sample count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Cached damped-inverse representation: the Cholesky factors of
/// `A + λI` and `B + λI` per layer.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    pub lambda: f64,
    layers: Vec<(Tensor, Tensor)>,
}

impl Preconditioner {
    pub fn build(factors: &KroneckerFactors, lambda: f64) -> Result<Self> {
        let layers = factors
            .layers
            .iter()
            .map(|lf| {
                let a = lf
                    .input
                    .add(&Tensor::identity(lf.input.rows()).scale(lambda))?;
                let b = lf
                    .output
                    .add(&Tensor::identity(lf.output.rows()).scale(lambda))?;
                Ok((a.cholesky()?, b.cholesky()?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { lambda, layers })
    }

    /// `(B+λI)⁻¹ grad (A+λI)⁻¹` through the cached factorisations.
    pub fn apply(&self, layer: usize, grad: &Tensor) -> Result<Tensor> {
        let (chol_a, chol_b) = &self.layers[layer];
        let left = chol_b.chol_solve(grad)?;
        Ok(chol_a.chol_solve(&left.transpose())?.transpose())
    }
}

/// One preconditioned update `W ← W − α · (B+λI)⁻¹ ∇_W (A+λI)⁻¹` on
/// every weight matrix.
pub fn step_params(
    model: &mut ModelSpec,
    grads: &[Tensor],
    precond: &Preconditioner,
    alpha: f64,
) -> Result<()> {
    let infos = model.param_layers();
    if grads.len() != infos.len() || precond.layers.len() != infos.len() {
        return Err(Error::Consistency(
            "gradient/preconditioner layer counts do not match the model".into(),
        ));
    }
    for (k, info) in infos.iter().enumerate() {
        let delta = precond.apply(k, &grads[k])?;
        let w = model.weight_mut(info.layer, info.part);
        w.add_scaled(&delta, -alpha);
    }
    Ok(())
}

/// Mean data-fit loss per term (negative log-likelihood minus its
/// additive constant).
pub fn fit_loss(model: &ModelSpec, batch: &Batch) -> Result<f64> {
    let tape = forward(model, batch)?;
    let (total, _) = loss_and_output_grads(model, &tape, batch)?;
    let terms = loss_term_count(model, batch) as f64;
    Ok((total - terms * loss_constant(&model.loss)?) / terms)
}

/// Total negative log-likelihood over the batch (constants included).
pub fn total_nll(model: &ModelSpec, batch: &Batch) -> Result<f64> {
    let tape = forward(model, batch)?;
    let (total, _) = loss_and_output_grads(model, &tape, batch)?;
    Ok(total)
}

/// Kronecker-preconditioned trainer with interval-based factor and
/// preconditioner refreshes.
pub struct KfacTrainer {
    pub config: OptimizerConfig,
    pub flavour: Flavour,
    pub ragged: bool,
    seed: u64,
    step_index: usize,
    factors: Option<KroneckerFactors>,
    precond: Option<Preconditioner>,
    last_factor_refresh: usize,
    last_precond_refresh: usize,
}

impl KfacTrainer {
    pub fn new(config: OptimizerConfig, flavour: Flavour, ragged: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            flavour,
            ragged,
            seed,
            step_index: 0,
            factors: None,
            precond: None,
            last_factor_refresh: 0,
            last_precond_refresh: 0,
        })
    }

    pub fn factors(&self) -> Option<&KroneckerFactors> {
        self.factors.as_ref()
    }

    /// One training step; returns the data-fit loss measured before the
    /// parameter update.
    pub fn step(&mut self, model: &mut ModelSpec, batch: &Batch) -> Result<f64> {
        self.step_with_decay(model, batch, &[])
    }

    /// One training step with per-layer weight decay added to the
    /// gradient (`∇ ← ∇ + δ_ℓ W_ℓ`). An empty slice disables decay.
    ///
    /// Gradients and the output factor are normalised by the number of
    /// loss terms, so the learning rate and damping are batch-size
    /// independent.
    pub fn step_with_decay(
        &mut self,
        model: &mut ModelSpec,
        batch: &Batch,
        decay: &[f64],
    ) -> Result<f64> {
        let t = self.step_index;
        let terms = loss_term_count(model, batch) as f64;
        if self.factors.is_none() || t - self.last_factor_refresh >= self.config.factor_interval {
            let tape = forward(model, batch)?;
            let mut fresh = mc_factors(
                model,
                &tape,
                self.flavour,
                self.ragged,
                self.config.mc_samples,
                self.seed.wrapping_add(t as u64),
            )?;
            for lf in &mut fresh.layers {
                lf.output = lf.output.scale(1.0 / terms);
            }
            let next = match (&self.factors, self.config.ema_decay) {
                (Some(old), d) if d > 0.0 => ema_update(old, &fresh, d)?,
                _ => fresh,
            };
            self.factors = Some(next);
            self.last_factor_refresh = t;
            self.precond = None;
        }
        if self.precond.is_none() || t - self.last_precond_refresh >= self.config.precond_interval {
            let factors = self.factors.as_ref().unwrap();
            self.precond = Some(Preconditioner::build(factors, self.config.damping)?);
            self.last_precond_refresh = t;
        }
        if t - self.last_factor_refresh >= self.config.factor_interval {
            return Err(Error::Consistency(format!(
                "factors stale at step {t} (last refresh {})",
                self.last_factor_refresh
            )));
        }
        let (total, mut grads) = loss_gradients(model, batch)?;
        if !decay.is_empty() {
            let infos = model.param_layers();
            if decay.len() != infos.len() {
                return Err(Error::Argument(
                    "per-layer decay length does not match the model".into(),
                ));
            }
            for (k, info) in infos.iter().enumerate() {
                let w = model.weight(info.layer, info.part).clone();
                grads[k].add_scaled(&w, decay[k]);
            }
        }
        for g in &mut grads {
            *g = g.scale(1.0 / terms);
        }
        let alpha = lr_schedule(&self.config.schedule, t, self.config.learning_rate);
        let precond = self.precond.as_ref().unwrap();
        step_params(model, &grads, precond, alpha)?;
        self.step_index += 1;
        Ok((total - terms * loss_constant(&model.loss)?) / terms)
    }
}

/// Loss trace of a training run plus the first step index at which the
/// fit loss dropped to the target.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub steps_to_target: Option<usize>,
}

/// Run the Kronecker-preconditioned trainer against a loss target.
#[allow(clippy::too_many_arguments)]
pub fn kfac_train(
    model: &mut ModelSpec,
    batch: &Batch,
    config: OptimizerConfig,
    flavour: Flavour,
    ragged: bool,
    seed: u64,
    budget: usize,
    target: f64,
) -> Result<TrainTrace> {
    let mut trainer = KfacTrainer::new(config, flavour, ragged, seed)?;
    let mut losses = Vec::with_capacity(budget);
    let mut steps_to_target = None;
    for step in 0..budget {
        // a diverged run is a budget-exhausted trace, not an error
        let loss = match trainer.step(model, batch) {
            Ok(loss) => loss,
            Err(Error::Numeric(_)) | Err(Error::NotPositiveDefinite { .. }) => break,
            Err(other) => return Err(other),
        };
        losses.push(loss);
        if !loss.is_finite() {
            break;
        }
        if loss <= target {
            steps_to_target = Some(step);
            break;
        }
    }
    if steps_to_target.is_none() && budget > 0 {
        if let Ok(final_loss) = fit_loss(model, batch) {
            if final_loss.is_finite() && final_loss <= target {
                steps_to_target = Some(budget);
            }
        }
    }
    Ok(TrainTrace {
        losses,
        steps_to_target,
    })
}

/// Plain gradient-descent baseline at a fixed rate.
pub fn gd_train(
    model: &mut ModelSpec,
    batch: &Batch,
    learning_rate: f64,
    budget: usize,
    target: f64,
) -> Result<TrainTrace> {
    let mut losses = Vec::with_capacity(budget);
    let mut steps_to_target = None;
    for step in 0..budget {
        let (total, grads) = loss_gradients(model, batch)?;
        let terms = loss_term_count(model, batch) as f64;
        let loss = (total - terms * loss_constant(&model.loss)?) / terms;
        losses.push(loss);
        if !loss.is_finite() {
            break;
        }
        if loss <= target {
            steps_to_target = Some(step);
            break;
        }
        let infos = model.param_layers();
        for (k, info) in infos.iter().enumerate() {
            let w = model.weight_mut(info.layer, info.part);
            w.add_scaled(&grads[k], -learning_rate / terms);
        }
    }
    if steps_to_target.is_none() && budget > 0 {
        let final_loss = fit_loss(model, batch)?;
        if final_loss.is_finite() && final_loss <= target {
            steps_to_target = Some(budget);
        }
    }
    Ok(TrainTrace {
        losses,
        steps_to_target,
    })
}

// ---------------------------------------------------------------------------
// Kronecker Laplace evidence
// ---------------------------------------------------------------------------

/// `log det(A ⊗ B + δI) = Σᵢⱼ log(λᵢ μⱼ + δ)` from the factor
/// eigenvalues. Slightly negative eigenvalues from PSD roundoff are
/// clamped at zero.
pub fn kron_logdet_shifted(eig_in: &[f64], eig_out: &[f64], delta: f64) -> f64 {
    let mut acc = 0.0;
    for &li in eig_in {
        let li = li.max(0.0);
        for &mj in eig_out {
            acc += (li * mj.max(0.0) + delta).ln();
        }
    }
    acc
}

/// Per-layer factor eigenvalues for the Laplace routine.
pub fn factor_eigenvalues(factors: &KroneckerFactors) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    factors
        .layers
        .iter()
        .map(|lf| {
            Ok((
                lf.input.sym_eig()?.eigenvalues,
                lf.output.sym_eig()?.eigenvalues,
            ))
        })
        .collect()
}

/// Laplace selection state: per-layer prior precisions, the factor
/// eigendecompositions they are scored against, and the current log
/// marginal likelihood.
#[derive(Debug, Clone)]
pub struct LaplaceState {
    pub deltas: Vec<f64>,
    pub factor_eigs: Vec<(Vec<f64>, Vec<f64>)>,
    pub log_marglik: f64,
}

impl LaplaceState {
    /// Score the given precisions against fresh factor eigenvalues.
    /// Fails on non-positive precisions or a non-finite evidence.
    pub fn evaluate(
        total_nll: f64,
        params: &[Tensor],
        factors: &KroneckerFactors,
        deltas: Vec<f64>,
    ) -> Result<Self> {
        let factor_eigs = factor_eigenvalues(factors)?;
        let log_marglik = laplace_log_marglik(total_nll, params, &factor_eigs, &deltas)?;
        if !log_marglik.is_finite() {
            return Err(Error::Numeric("marginal likelihood diverged".into()));
        }
        Ok(Self {
            deltas,
            factor_eigs,
            log_marglik,
        })
    }

    /// Ascend the evidence in the precisions; monotone per accepted step.
    pub fn ascend(
        &mut self,
        total_nll: f64,
        params: &[Tensor],
        steps: usize,
        step_size: f64,
    ) -> Result<f64> {
        self.log_marglik = marglik_ascent(
            total_nll,
            params,
            &self.factor_eigs,
            &mut self.deltas,
            steps,
            step_size,
        )?;
        Ok(self.log_marglik)
    }
}

/// Laplace log marginal likelihood
/// `log p(D) ≈ −NLL(θ*) + log p(θ*|δ) − ½ Σ_ℓ log det(A_ℓ⊗B_ℓ + δ_ℓ I) + (P/2) log 2π`.
/// The prior's own `(P/2) log 2π` cancels the Laplace volume term, so
/// only the δ-dependent pieces remain.
pub fn laplace_log_marglik(
    total_nll: f64,
    params: &[Tensor],
    factor_eigs: &[(Vec<f64>, Vec<f64>)],
    deltas: &[f64],
) -> Result<f64> {
    if deltas.iter().any(|&d| d <= 0.0) {
        return Err(Error::Argument("prior precisions must be positive".into()));
    }
    if params.len() != factor_eigs.len() || params.len() != deltas.len() {
        return Err(Error::Configuration(
            "marginal likelihood inputs disagree on layer count".into(),
        ));
    }
    let mut acc = -total_nll;
    for ((w, (eig_a, eig_b)), &delta) in params.iter().zip(factor_eigs).zip(deltas) {
        let p_l = (eig_a.len() * eig_b.len()) as f64;
        let norm2 = w.frobenius_norm().powi(2);
        acc += 0.5 * p_l * delta.ln() - 0.5 * delta * norm2;
        acc -= 0.5 * kron_logdet_shifted(eig_a, eig_b, delta);
    }
    Ok(acc)
}

fn marglik_delta_gradients(
    params: &[Tensor],
    factor_eigs: &[(Vec<f64>, Vec<f64>)],
    deltas: &[f64],
) -> Vec<f64> {
    params
        .iter()
        .zip(factor_eigs)
        .zip(deltas)
        .map(|((w, (eig_a, eig_b)), &delta)| {
            let p_l = (eig_a.len() * eig_b.len()) as f64;
            let mut trace = 0.0;
            for &li in eig_a {
                for &mj in eig_b {
                    trace += 1.0 / (li.max(0.0) * mj.max(0.0) + delta);
                }
            }
            0.5 * p_l / delta - 0.5 * w.frobenius_norm().powi(2) - 0.5 * trace
        })
        .collect()
}

/// Gradient ascent on `log δ` with backtracking halving; each accepted
/// step does not decrease the marginal likelihood. Returns the final
/// value. Divergence aborts the event and keeps the incoming δ.
pub fn marglik_ascent(
    total_nll: f64,
    params: &[Tensor],
    factor_eigs: &[(Vec<f64>, Vec<f64>)],
    deltas: &mut [f64],
    steps: usize,
    step_size: f64,
) -> Result<f64> {
    let mut current = laplace_log_marglik(total_nll, params, factor_eigs, deltas)?;
    if !current.is_finite() {
        return Err(Error::Numeric("marginal likelihood diverged".into()));
    }
    for _ in 0..steps {
        let grads = marglik_delta_gradients(params, factor_eigs, deltas);
        // chain rule onto log δ: d/d(log δ) = δ · d/dδ
        let log_grads: Vec<f64> = grads
            .iter()
            .zip(deltas.iter())
            .map(|(g, d)| g * d)
            .collect();
        let mut scale = step_size;
        let mut accepted = false;
        for _ in 0..24 {
            let proposal: Vec<f64> = deltas
                .iter()
                .zip(&log_grads)
                .map(|(d, g)| (d.ln() + scale * g).exp())
                .collect();
            match laplace_log_marglik(total_nll, params, factor_eigs, &proposal) {
                Ok(value) if value.is_finite() && value >= current => {
                    deltas.copy_from_slice(&proposal);
                    current = value;
                    accepted = true;
                    break;
                }
                _ => scale *= 0.5,
            }
        }
        if !accepted {
            break;
        }
    }
    Ok(current)
}

/// Configuration of the interleaved train/select loop.
#[derive(Debug, Clone)]
pub struct MargLikConfig {
    pub passes: usize,
    pub steps_per_pass: usize,
    /// Selection event frequency, in passes.
    pub select_every: usize,
    pub ascent_steps: usize,
    pub ascent_step_size: f64,
    pub initial_delta: f64,
    pub flavour: Flavour,
    pub optimizer: OptimizerConfig,
}

impl Default for MargLikConfig {
    fn default() -> Self {
        Self {
            passes: 30,
            steps_per_pass: 5,
            select_every: 5,
            ascent_steps: 10,
            ascent_step_size: 0.5,
            initial_delta: 1.0,
            flavour: Flavour::Reduce,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MargLikTrace {
    /// Final per-layer prior precisions.
    pub deltas: Vec<f64>,
    /// Marginal likelihood after each selection event.
    pub events: Vec<f64>,
    /// Marginal likelihood entering each selection event.
    pub events_before: Vec<f64>,
    /// δ snapshot after each selection event.
    pub delta_history: Vec<Vec<f64>>,
}

/// Interleaved MAP training and per-layer weight-decay selection by
/// evidence ascent. Factors for the Laplace step are accumulated over
/// the full batch with the analytic (loss-Hessian-weighted) path.
pub fn marglik_select_decay(
    model: &mut ModelSpec,
    batch: &Batch,
    cfg: &MargLikConfig,
    seed: u64,
) -> Result<MargLikTrace> {
    let infos = model.param_layers();
    let mut deltas = vec![cfg.initial_delta; infos.len()];
    let mut trainer = KfacTrainer::new(cfg.optimizer.clone(), cfg.flavour, false, seed)?;
    let mut events = Vec::new();
    let mut events_before = Vec::new();
    let mut delta_history = Vec::new();
    for pass in 0..cfg.passes {
        for _ in 0..cfg.steps_per_pass {
            trainer.step_with_decay(model, batch, &deltas)?;
        }
        if (pass + 1) % cfg.select_every == 0 {
            let factors = crate::kfac::analytic_factors(model, batch, cfg.flavour, false)?;
            let params: Vec<Tensor> = infos
                .iter()
                .map(|info| model.weight(info.layer, info.part).clone())
                .collect();
            let nll = total_nll(model, batch)?;
            let mut state = match LaplaceState::evaluate(nll, &params, &factors, deltas.clone()) {
                Ok(state) => state,
                // diverged evidence aborts the event; δ is retained
                Err(Error::Numeric(_)) => continue,
                Err(other) => return Err(other),
            };
            events_before.push(state.log_marglik);
            let value = state.ascend(nll, &params, cfg.ascent_steps, cfg.ascent_step_size)?;
            deltas = state.deltas;
            events.push(value);
            delta_history.push(deltas.clone());
        }
    }
    Ok(MargLikTrace {
        deltas,
        events,
        events_before,
        delta_history,
    })
}

// ---------------------------------------------------------------------------
// checkpoint text format
// ---------------------------------------------------------------------------

/// Versioned text checkpoint: parameters, per-layer δ, then the factor
/// block when present.
pub fn write_checkpoint(
    model: &ModelSpec,
    deltas: &[f64],
    factors: Option<&KroneckerFactors>,
) -> String {
    let infos = model.param_layers();
    let mut out = String::from("kfac-lab-checkpoint v1\n");
    out.push_str(&format!("params {}\n", infos.len()));
    for (k, info) in infos.iter().enumerate() {
        let w = model.weight(info.layer, info.part);
        out.push_str(&format!("param {k} {} {}\n", w.rows(), w.cols()));
        for r in 0..w.rows() {
            let row: Vec<String> = w.row(r).iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out.push_str(&format!("deltas {}\n", deltas.len()));
    if !deltas.is_empty() {
        let row: Vec<String> = deltas.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    match factors {
        Some(f) => {
            out.push_str("factors present\n");
            out.push_str(&crate::kfac::write_factors(f));
        }
        None => out.push_str("factors absent\n"),
    }
    out
}

/// Parse the checkpoint text format.
pub fn parse_checkpoint(text: &str) -> Result<(Vec<Tensor>, Vec<f64>, Option<KroneckerFactors>)> {
    let bad = |msg: &str| Error::Configuration(format!("checkpoint: {msg}"));
    let mut lines = text.lines();
    if lines.next() != Some("kfac-lab-checkpoint v1") {
        return Err(bad("missing or unsupported header"));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("params "))
        .ok_or_else(|| bad("malformed params line"))?
        .parse()
        .map_err(|_| bad("unparseable param count"))?;
    let mut params = Vec::with_capacity(count);
    for k in 0..count {
        let head = lines.next().ok_or_else(|| bad("truncated"))?;
        let rest = head
            .strip_prefix(&format!("param {k} "))
            .ok_or_else(|| bad("malformed param header"))?;
        let mut it = rest.split_whitespace();
        let rows: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("bad param rows"))?;
        let cols: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("bad param cols"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = lines.next().ok_or_else(|| bad("truncated param rows"))?;
            for tok in row.split_whitespace() {
                data.push(tok.parse().map_err(|_| bad("unparseable entry"))?);
            }
        }
        params.push(Tensor::matrix(rows, cols, data)?);
    }
    let dcount: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("deltas "))
        .ok_or_else(|| bad("malformed deltas line"))?
        .parse()
        .map_err(|_| bad("unparseable delta count"))?;
    let mut deltas = Vec::with_capacity(dcount);
    if dcount > 0 {
        let row = lines.next().ok_or_else(|| bad("truncated deltas"))?;
        for tok in row.split_whitespace() {
            deltas.push(tok.parse().map_err(|_| bad("unparseable delta"))?);
        }
        if deltas.len() != dcount {
            return Err(bad("delta count mismatch"));
        }
    }
    let factors = match lines.next() {
        Some("factors absent") => None,
        Some("factors present") => {
            let rest: Vec<&str> = lines.collect();
            Some(crate::kfac::parse_factors(&rest.join("\n"))?)
        }
        _ => return Err(bad("malformed factors line")),
    };
    Ok((params, deltas, factors))
}
