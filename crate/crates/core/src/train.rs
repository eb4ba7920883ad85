//! Mini-batch SGD on the hinge loss.
//!
//! Initialization: `W_B = W_C = δ · diag(1, …, 1, 0)` and `w ~ N(0, I/(d+1))`.
//! Each iteration draws a fresh batch of training prompts over the training
//! tasks and takes one step with the batch-mean gradient. Training stops at
//! `max_iters` or once the moving average of the last `window` batch losses
//! drops below `target_loss`.
//!
//! Batches are generated and differentiated in parallel. Each prompt draws
//! from its own stream, split from the run seed by iteration and batch slot,
//! and per-prompt gradients are summed in batch order, so results do not
//! depend on the number of worker threads.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{self, Gradients};
use crate::linalg::{Matrix, Vector};
use crate::model::{MambaParams, ModelKind};
use crate::patterns::{PatternBank, Task};
use crate::prompts::{sample_training_prompt, Label, Prompt, TrainPromptConfig};
use crate::rng::RngStream;

/// Stream tags, kept apart so that adding a consumer never shifts another's
/// draws.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_BATCHES: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub prompt: TrainPromptConfig,
    pub delta: f64,
    pub target_loss: f64,
    /// Moving-average window (in batches) for early stopping.
    pub window: usize,
    /// Spread each batch evenly over tasks and query labels.
    pub stratified: bool,
    /// History and snapshot interval, in iterations.
    pub checkpoint_every: usize,
    /// Keep a parameter snapshot at every checkpoint.
    pub keep_snapshots: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.05,
            batch_size: 60,
            max_iters: 20_000,
            prompt: TrainPromptConfig {
                l: 20,
                p_a: 0.6,
                k: 0.5,
                kappa_a: 2.0,
            },
            delta: 0.2,
            target_loss: 0.05,
            window: 100,
            stratified: true,
            checkpoint_every: 100,
            keep_snapshots: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta <= 1.0) {
            return Err(Error::config(
                "eta",
                format!("must lie in [0, 1], got {}", self.eta),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        check_delta(self.delta)?;
        if !(self.target_loss >= 0.0 && self.target_loss.is_finite()) {
            return Err(Error::config("target_loss", "must be non-negative"));
        }
        if self.window == 0 {
            return Err(Error::config("window", "must be at least 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        self.prompt.validate()
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta <= 0.2 {
        Ok(())
    } else {
        Err(Error::config(
            "delta",
            format!("must lie in (0, 0.2], got {delta}"),
        ))
    }
}

/// `δ · diag(1, …, 1, 0)` of size `d + 1`.
pub fn init_projection(d: usize, delta: f64) -> Matrix {
    let mut diag = vec![delta; d + 1];
    diag[d] = 0.0;
    Matrix::from_diag(&diag)
}

pub fn init_params(d: usize, delta: f64, rng: &mut RngStream) -> Result<MambaParams> {
    check_delta(delta)?;
    let w_b = init_projection(d, delta);
    Ok(MambaParams {
        w_c: w_b.clone(),
        w_b,
        w: rng.gaussian_vector(d + 1, 1.0 / ((d + 1) as f64).sqrt()),
    })
}

/// Which task and query label each batch slot gets. Stratified batches are
/// used when the batch size is a multiple of twice the task count;
/// otherwise slots are i.i.d. uniform.
pub fn batch_plan(
    n_tasks: usize,
    batch_size: usize,
    stratified: bool,
    rng: &mut RngStream,
) -> Vec<(usize, Option<Label>)> {
    assert!(n_tasks > 0, "empty task set");
    if stratified && batch_size.is_multiple_of(2 * n_tasks) {
        (0..batch_size)
            .map(|b| {
                let label = if (b / n_tasks).is_multiple_of(2) {
                    Label::Plus
                } else {
                    Label::Minus
                };
                (b % n_tasks, Some(label))
            })
            .collect()
    } else {
        (0..batch_size)
            .map(|_| (rng.below(n_tasks), None))
            .collect()
    }
}

/// Draws one batch. Slot `b` samples from `rng.split(b)`.
pub fn sample_batch(
    bank: &PatternBank,
    tasks: &[Task],
    prompt_cfg: &TrainPromptConfig,
    batch_size: usize,
    stratified: bool,
    rng: &mut RngStream,
) -> Result<Vec<Prompt>> {
    let plan = batch_plan(tasks.len(), batch_size, stratified, rng);
    let base = rng.clone();
    plan.into_par_iter()
        .enumerate()
        .map(|(b, (t, label))| {
            let mut stream = base.split(b as u64);
            sample_training_prompt(bank, tasks[t], prompt_cfg, label, &mut stream)
        })
        .collect()
}

/// Aggregate statistics of one batch at the pre-step parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub mean_abs_output: f64,
    pub active_fraction: f64,
}

/// Averages per-prompt statistics in batch order.
pub(crate) fn summarize(outputs: impl Iterator<Item = (f64, f64, bool)>) -> StepStats {
    let (mut loss, mut abs, mut active, mut n) = (0.0, 0.0, 0usize, 0usize);
    for (l, f, a) in outputs {
        loss += l;
        abs += f.abs();
        active += a as usize;
        n += 1;
    }
    let n = n.max(1) as f64;
    StepStats {
        loss: loss / n,
        mean_abs_output: abs / n,
        active_fraction: active as f64 / n,
    }
}

/// One SGD step with the batch-mean gradient.
pub fn sgd_step(
    kind: ModelKind,
    params: &mut MambaParams,
    batch: &[Prompt],
    eta: f64,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let grads: Vec<Gradients> = batch
        .par_iter()
        .map(|p| grad::grad_all(kind, params, p, p.z))
        .collect();
    let n = params.width();
    let mut d_wb = Matrix::zeros(n, n);
    let mut d_wc = Matrix::zeros(n, n);
    let mut d_w = Vector::zeros(n);
    for g in grads.iter().filter(|g| g.active) {
        d_wb.axpy(1.0, &g.d_wb);
        d_wc.axpy(1.0, &g.d_wc);
        d_w.axpy(1.0, &g.d_w);
    }
    if !(d_wb.is_finite() && d_wc.is_finite() && d_w.is_finite()) {
        return Err(Error::Numeric("batch gradient".into()));
    }
    let scale = -eta / batch.len() as f64;
    params.w_b.axpy(scale, &d_wb);
    params.w_c.axpy(scale, &d_wc);
    if kind == ModelKind::Mamba {
        params.w.axpy(scale, &d_w);
    }
    Ok(summarize(batch.iter().zip(&grads).map(|(p, g)| {
        (crate::model::hinge_loss(g.output, p.z), g.output, g.active)
    })))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub iteration: usize,
    /// Moving-average batch loss at this iteration.
    pub loss: f64,
    pub mean_abs_output: f64,
    pub active_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub points: Vec<HistoryPoint>,
    /// Iterations actually run.
    pub iterations: usize,
    /// First iteration count at which the moving average fell below the
    /// target, if it did.
    pub converged_at: Option<usize>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.points.last().map(|p| p.loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<P> {
    pub params: P,
    pub history: TrainHistory,
    /// `(iteration, parameters)` at each checkpoint, including iteration 0,
    /// when snapshots are enabled.
    pub snapshots: Vec<(usize, P)>,
}

/// The loop shared by the one-layer and stacked trainers. `step` draws no
/// randomness; all sampling happens here.
pub(crate) fn run_sgd<P: Clone>(
    mut params: P,
    bank: &PatternBank,
    tasks: &[Task],
    cfg: &TrainConfig,
    mut step: impl FnMut(&mut P, &[Prompt]) -> Result<StepStats>,
) -> Result<TrainOutcome<P>> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Capacity("no training tasks".into()));
    }
    let batches = RngStream::seeded(cfg.seed).split(TAG_BATCHES);
    let mut window: VecDeque<f64> = VecDeque::with_capacity(cfg.window);
    let mut history = TrainHistory::default();
    let mut snapshots = Vec::new();
    if cfg.keep_snapshots {
        snapshots.push((0, params.clone()));
    }
    for t in 0..cfg.max_iters {
        let mut rng = batches.split(t as u64);
        let batch = sample_batch(
            bank,
            tasks,
            &cfg.prompt,
            cfg.batch_size,
            cfg.stratified,
            &mut rng,
        )?;
        let stats = step(&mut params, &batch)?;
        window.push_back(stats.loss);
        if window.len() > cfg.window {
            window.pop_front();
        }
        let iteration = t + 1;
        // Summed afresh each time: a running sum drifts below zero once the
        // losses hit exactly 0.
        let avg = window.iter().sum::<f64>() / window.len() as f64;
        let converged = window.len() == cfg.window && avg < cfg.target_loss;
        if iteration % cfg.checkpoint_every == 0 || converged || iteration == cfg.max_iters {
            history.points.push(HistoryPoint {
                iteration,
                loss: avg,
                mean_abs_output: stats.mean_abs_output,
                active_fraction: stats.active_fraction,
            });
            if cfg.keep_snapshots {
                snapshots.push((iteration, params.clone()));
            }
        }
        history.iterations = iteration;
        if converged {
            history.converged_at = Some(iteration);
            break;
        }
    }
    Ok(TrainOutcome {
        params,
        history,
        snapshots,
    })
}

/// Initial one-layer parameters for a run, drawn from the run seed.
pub fn initial_params(d: usize, cfg: &TrainConfig) -> Result<MambaParams> {
    init_params(
        d,
        cfg.delta,
        &mut RngStream::seeded(cfg.seed).split(TAG_INIT),
    )
}

/// Trains the gated model.
pub fn train(
    bank: &PatternBank,
    tasks: &[Task],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<MambaParams>> {
    train_kind(ModelKind::Mamba, bank, tasks, cfg)
}

/// Trains the ungated model; `w` stays at its initial value.
pub fn train_linear_transformer(
    bank: &PatternBank,
    tasks: &[Task],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<MambaParams>> {
    train_kind(ModelKind::LinearTransformer, bank, tasks, cfg)
}

pub fn train_kind(
    kind: ModelKind,
    bank: &PatternBank,
    tasks: &[Task],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<MambaParams>> {
    let init = initial_params(bank.d, cfg)?;
    run_sgd(init, bank, tasks, cfg, |p, batch| {
        sgd_step(kind, p, batch, cfg.eta)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::identity_case;
    use crate::patterns::{build_pattern_bank, training_task_set, BankMode, BankShape};

    fn small_bank() -> PatternBank {
        let shape = BankShape {
            d: 12,
            m1: 3,
            m2: 4,
            v: 2,
            beta: 3.0,
        };
        build_pattern_bank(shape, BankMode::Canonical, &mut RngStream::seeded(0)).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 12,
            max_iters: 300,
            prompt: TrainPromptConfig {
                l: 8,
                p_a: 0.3,
                k: 0.5,
                kappa_a: 2.0,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn initialization_shape() {
        let p = init_params(2, 0.2, &mut RngStream::seeded(1)).unwrap();
        assert_eq!(p.w_b, Matrix::from_diag(&[0.2, 0.2, 0.0]));
        assert_eq!(p.w_b, p.w_c);
        assert!(matches!(
            init_params(2, 0.0, &mut RngStream::seeded(1)),
            Err(Error::Config { field: "delta", .. })
        ));
        assert!(init_params(2, 0.25, &mut RngStream::seeded(1)).is_err());
    }

    #[test]
    fn gate_init_has_unit_expected_square_norm() {
        // E‖w‖² = 1 and Var‖w‖² = 2/(d+1); the mean of 1000 draws has
        // std ≈ 0.008 at d = 30, far inside ±0.1.
        let root = RngStream::seeded(9);
        let mean = (0..1000)
            .map(|s| {
                let w = init_params(30, 0.2, &mut root.split(s)).unwrap().w;
                w.dot(&w)
            })
            .sum::<f64>()
            / 1000.0;
        assert!((mean - 1.0).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn stratified_batches_balance_tasks_and_labels() {
        let bank = small_bank();
        let tasks = training_task_set(6).unwrap();
        let bank6 = build_pattern_bank(
            BankShape {
                m1: 6,
                ..BankShape::STANDARD
            },
            BankMode::Canonical,
            &mut RngStream::seeded(0),
        )
        .unwrap();
        let cfg = TrainConfig::default().prompt;
        let batch =
            sample_batch(&bank6, &tasks, &cfg, 12, true, &mut RngStream::seeded(3)).unwrap();
        for t in &tasks {
            assert_eq!(batch.iter().filter(|p| p.task == *t).count(), 2);
        }
        let plus = batch.iter().filter(|p| p.z == Label::Plus).count();
        assert_eq!(plus, 6);
        let single = sample_batch(
            &bank,
            &training_task_set(3).unwrap(),
            &small_cfg().prompt,
            1,
            true,
            &mut RngStream::seeded(3),
        )
        .unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn uniform_batch_task_frequencies() {
        let plan = batch_plan(6, 10_000, false, &mut RngStream::seeded(4));
        let p: f64 = 1.0 / 6.0;
        let sigma = (p * (1.0 - p) / 10_000.0).sqrt();
        for t in 0..6 {
            let freq = plan.iter().filter(|(i, _)| *i == t).count() as f64 / 10_000.0;
            assert!((freq - p).abs() < 3.0 * sigma, "task {t}: {freq}");
        }
    }

    #[test]
    fn identity_step() {
        let (mut params, p) = identity_case();
        let before = params.clone();
        sgd_step(ModelKind::Mamba, &mut params, std::slice::from_ref(&p), 1.0).unwrap();
        // W_C' = W_C + 0.25 p_1 p_qᵀ
        let expect = before
            .w_c
            .add(&Matrix::outer(&p.column(0), &p.query_column()).scaled(0.25));
        assert!(params.w_c.sub(&expect).max_abs() < 1e-15);

        let mut frozen = before.clone();
        sgd_step(ModelKind::Mamba, &mut frozen, std::slice::from_ref(&p), 0.0).unwrap();
        assert_eq!(frozen, before);
        let mut lt = before.clone();
        sgd_step(
            ModelKind::LinearTransformer,
            &mut lt,
            std::slice::from_ref(&p),
            1.0,
        )
        .unwrap();
        assert_eq!(lt.w, before.w);
    }

    #[test]
    fn satisfied_margins_leave_params_unchanged() {
        let (mut params, p) = identity_case();
        params.w_b = params.w_b.scaled(8.0);
        let before = params.clone();
        let stats = sgd_step(ModelKind::Mamba, &mut params, &[p.clone(), p], 0.5).unwrap();
        assert_eq!(params, before);
        assert_eq!(stats.active_fraction, 0.0);
        assert_eq!(stats.loss, 0.0);
    }

    #[test]
    fn zero_iterations_return_the_initialization() {
        let bank = small_bank();
        let tasks = training_task_set(3).unwrap();
        let cfg = TrainConfig {
            max_iters: 0,
            ..small_cfg()
        };
        let out = train(&bank, &tasks, &cfg).unwrap();
        assert_eq!(out.params, initial_params(bank.d, &cfg).unwrap());
        assert_eq!(out.history.iterations, 0);
        let lt = train_linear_transformer(&bank, &tasks, &cfg).unwrap();
        assert_eq!(lt.params, out.params);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let bank = small_bank();
        let tasks = training_task_set(3).unwrap();
        let cfg = small_cfg();
        let a = train(&bank, &tasks, &cfg).unwrap();
        let b = train(&bank, &tasks, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        let first = a.history.points.first().unwrap().loss;
        let last = a.history.final_loss().unwrap();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn linear_transformer_keeps_gate_frozen() {
        let bank = small_bank();
        let tasks = training_task_set(3).unwrap();
        let cfg = small_cfg();
        let out = train_linear_transformer(&bank, &tasks, &cfg).unwrap();
        assert_eq!(out.params.w, initial_params(bank.d, &cfg).unwrap().w);
    }

    #[test]
    fn early_stop_and_snapshots() {
        let bank = small_bank();
        let tasks = training_task_set(3).unwrap();
        let cfg = TrainConfig {
            target_loss: 10.0,
            window: 5,
            keep_snapshots: true,
            ..small_cfg()
        };
        let out = train(&bank, &tasks, &cfg).unwrap();
        assert_eq!(out.history.converged_at, Some(5));
        assert_eq!(out.history.iterations, 5);
        assert_eq!(out.snapshots.len(), 2);
        assert_eq!(out.snapshots[0].0, 0);
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig {
                eta: 1.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                delta: 0.3,
                ..TrainConfig::default()
            },
            TrainConfig {
                window: 0,
                ..TrainConfig::default()
            },
        ];
        for cfg in bad {
            assert!(
                matches!(cfg.validate(), Err(Error::Config { .. })),
                "{cfg:?}"
            );
        }
        assert!(TrainConfig::default().validate().is_ok());
    }
}
