//! Training runs and their on-disk artifacts: final checkpoints, snapshot
//! checkpoints and history tables, all keyed by (model, depth, seed).

use std::fs;
use std::path::{Path, PathBuf};

use iclmb_core::checkpoint::{Checkpoint, Weights};
use iclmb_core::deep::{deep_train, DeepModel};
use iclmb_core::probes::{zero_one_error, OneLayer, Predictor};
use iclmb_core::train::{train_kind, TrainHistory};
use iclmb_core::{ModelKind, PatternBank, RngStream, Task, TestOutlier};
use serde_json::json;

use crate::config::{ExperimentConfig, RuleName, TAG_HISTORY};
use crate::error::{CliError, CliResult};
use crate::table::{write_file, Table};

/// Where a run's artifacts live below the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stem(kind: ModelKind, n_layers: usize, seed: u64) -> String {
        format!("{}-L{}-seed{}", kind.name(), n_layers, seed)
    }

    pub fn checkpoint(&self, kind: ModelKind, n_layers: usize, seed: u64) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("{}.json", Self::stem(kind, n_layers, seed)))
    }

    pub fn history(&self, kind: ModelKind, n_layers: usize, seed: u64) -> PathBuf {
        self.root
            .join("history")
            .join(format!("{}.csv", Self::stem(kind, n_layers, seed)))
    }

    pub fn snapshot_dir(&self, kind: ModelKind, n_layers: usize, seed: u64) -> PathBuf {
        self.root
            .join("snapshots")
            .join(Self::stem(kind, n_layers, seed))
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// Bank, training tasks and test outliers for one seed.
#[derive(Debug, Clone)]
pub struct Setting {
    pub bank: PatternBank,
    pub tasks: Vec<Task>,
    pub outliers: Vec<TestOutlier>,
}

impl Setting {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> CliResult<Self> {
        let bank = cfg.build_bank(seed)?;
        let outliers = cfg.test_outliers(&bank)?;
        Ok(Self {
            tasks: cfg.training_tasks()?,
            bank,
            outliers,
        })
    }
}

pub fn predictor(kind: ModelKind, weights: &Weights) -> Box<dyn Predictor> {
    match weights {
        Weights::OneLayer(params) => Box::new(OneLayer {
            kind,
            params: params.clone(),
        }),
        Weights::Deep(params) => Box::new(DeepModel {
            kind,
            params: params.clone(),
        }),
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub kind: ModelKind,
    pub seed: u64,
    pub checkpoint: Checkpoint,
    /// Parameters at iteration 0, every `snapshot_every` iterations and at
    /// the end.
    pub snapshots: Vec<Checkpoint>,
    pub history: TrainHistory,
    /// Clean-prompt test error at each history point.
    pub eval_errors: Vec<f64>,
}

impl TrainedRun {
    pub fn history_table(&self) -> Table {
        let mut t = Table::new(&[
            "iteration",
            "loss",
            "mean_abs_output",
            "active_fraction",
            "eval_error",
        ]);
        for (p, e) in self.history.points.iter().zip(&self.eval_errors) {
            t.push(vec![
                p.iteration.into(),
                p.loss.into(),
                p.mean_abs_output.into(),
                p.active_fraction.into(),
                (*e).into(),
            ]);
        }
        t
    }
}

fn make_checkpoint(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    seed: u64,
    weights: Weights,
    iteration: usize,
    history: &TrainHistory,
) -> Checkpoint {
    Checkpoint {
        kind,
        weights,
        train: cfg.train_config(seed),
        seed,
        iteration,
        context: json!({
            "train_key": cfg.train_key(kind, seed),
            "iterations": history.iterations,
            "converged_at": history.converged_at,
        }),
    }
}

/// Trains one model for one seed. Nothing is written.
pub fn train_run(cfg: &ExperimentConfig, kind: ModelKind, seed: u64) -> CliResult<TrainedRun> {
    let setting = Setting::new(cfg, seed)?;
    let tc = cfg.train_config(seed);
    let (history, snaps): (TrainHistory, Vec<(usize, Weights)>) = if cfg.model.n_layers == 1 {
        let out = train_kind(kind, &setting.bank, &setting.tasks, &tc)?;
        let snaps = out
            .snapshots
            .into_iter()
            .map(|(i, p)| (i, Weights::OneLayer(p)))
            .collect();
        (out.history, snaps)
    } else {
        let out = deep_train(
            kind,
            &setting.bank,
            &setting.tasks,
            &tc,
            cfg.architecture(),
        )?;
        let snaps = out
            .snapshots
            .into_iter()
            .map(|(i, p)| (i, Weights::Deep(p)))
            .collect();
        (out.history, snaps)
    };

    let clean = cfg.eval_config(
        &setting.outliers,
        0.0,
        RuleName::Clean,
        cfg.train.history_prompts,
        None,
    );
    let stream = RngStream::seeded(seed).split(TAG_HISTORY);
    let eval_errors = snaps
        .iter()
        .skip(1)
        .map(|(_, w)| {
            zero_one_error(predictor(kind, w).as_ref(), &setting.bank, &clean, &stream)
                .map(|p| p.rate)
        })
        .collect::<Result<Vec<f64>, _>>()?;

    let last = history.iterations;
    let final_weights = snaps.last().expect("snapshot at iteration 0").1.clone();
    let snapshots = snaps
        .into_iter()
        .filter(|(i, _)| i % cfg.train.snapshot_every == 0 || *i == last)
        .map(|(i, w)| make_checkpoint(cfg, kind, seed, w, i, &history))
        .collect();
    let checkpoint = make_checkpoint(cfg, kind, seed, final_weights, last, &history);
    Ok(TrainedRun {
        kind,
        seed,
        checkpoint,
        snapshots,
        history,
        eval_errors,
    })
}

/// Writes the checkpoint, history table and snapshot files. Stale snapshot
/// files from an earlier run are removed first.
pub fn save_run(cfg: &ExperimentConfig, layout: &Layout, run: &TrainedRun) -> CliResult<()> {
    let n = cfg.model.n_layers;
    write_file(
        &layout.checkpoint(run.kind, n, run.seed),
        &run.checkpoint.to_json(),
    )?;
    run.history_table()
        .write(&layout.history(run.kind, n, run.seed), &cfg.hash())?;
    let dir = layout.snapshot_dir(run.kind, n, run.seed);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(CliError::io(&dir))?;
    }
    for snap in &run.snapshots {
        write_file(&snapshot_path(&dir, snap.iteration), &snap.to_json())?;
    }
    Ok(())
}

fn snapshot_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("iter-{iteration:06}.json"))
}

/// Loads a checkpoint file, rejecting one produced under different training
/// settings.
pub fn load_checked(
    cfg: &ExperimentConfig,
    path: &Path,
    kind: ModelKind,
    seed: u64,
) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "{} (run `iclmb train` or pass --train-first)",
            path.display()
        )));
    }
    let ckpt =
        Checkpoint::load(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    let key = cfg.train_key(kind, seed);
    if ckpt.kind != kind || ckpt.context.get("train_key").and_then(|v| v.as_str()) != Some(&key) {
        return Err(CliError::Missing(format!(
            "{} was trained under different settings; retrain it",
            path.display()
        )));
    }
    Ok(ckpt)
}

pub fn load_checkpoint(
    cfg: &ExperimentConfig,
    layout: &Layout,
    kind: ModelKind,
    seed: u64,
) -> CliResult<Checkpoint> {
    let path = layout.checkpoint(kind, cfg.model.n_layers, seed);
    load_checked(cfg, &path, kind, seed)
}

/// All snapshot checkpoints of a run in iteration order.
pub fn load_snapshots(
    cfg: &ExperimentConfig,
    layout: &Layout,
    kind: ModelKind,
    seed: u64,
) -> CliResult<Vec<Checkpoint>> {
    let dir = layout.snapshot_dir(kind, cfg.model.n_layers, seed);
    let entries = fs::read_dir(&dir).map_err(|_| {
        CliError::Missing(format!(
            "{} (run `iclmb train` or pass --train-first)",
            dir.display()
        ))
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Missing(format!(
            "{} holds no snapshots",
            dir.display()
        )));
    }
    let mut snaps = paths
        .iter()
        .map(|p| load_checked(cfg, p, kind, seed))
        .collect::<CliResult<Vec<_>>>()?;
    snaps.sort_by_key(|c| c.iteration);
    Ok(snaps)
}

/// The final checkpoint, trained and saved first when `train_first`.
pub fn obtain(
    cfg: &ExperimentConfig,
    layout: &Layout,
    kind: ModelKind,
    seed: u64,
    train_first: bool,
) -> CliResult<Checkpoint> {
    if train_first {
        let run = train_run(cfg, kind, seed)?;
        save_run(cfg, layout, &run)?;
        Ok(run.checkpoint)
    } else {
        load_checkpoint(cfg, layout, kind, seed)
    }
}
