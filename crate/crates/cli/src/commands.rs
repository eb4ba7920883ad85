//! The subcommands. Each writes its CSVs under the output directory and
//! returns the tables it wrote.

use std::path::PathBuf;

use iclmb_core::checkpoint::Weights;
use iclmb_core::deep::{layer_probes, Architecture, Stacking};
use iclmb_core::grad::default_tolerance;
use iclmb_core::oracle::{deep_grad_suite, one_layer_grad_suite, SuiteReport};
use iclmb_core::probes::{
    arrangement_accuracy, attention_concentration, eval_prompt, gate_decay_slope, gate_records,
    gating_report, mean_gates, split_scores, zero_one_error, Concentration, GateRecord,
};
use iclmb_core::{Arrangement, ModelKind, Prompt, RngStream};
use rayon::prelude::*;

use crate::config::{sha256_hex, ExperimentConfig, RuleName, TAG_PROBE, TAG_SWEEP, TAG_TABLE};
use crate::error::{CliError, CliResult};
use crate::runs::{load_snapshots, obtain, predictor, save_run, train_run, Layout, Setting, TrainedRun};
use crate::table::{write_file, Cell, Table};

pub const BOTH_KINDS: [ModelKind; 2] = [ModelKind::Mamba, ModelKind::LinearTransformer];

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub h: f64,
    pub instances: usize,
    /// Depth of the stacked suites; 1 runs the one-layer suites only.
    pub layers: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            instances: 100,
            layers: 1,
            seed: 0,
            out: PathBuf::from("out/gradcheck"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradBlock {
    pub kind: ModelKind,
    pub layers: usize,
    pub stacking: Option<Stacking>,
    pub tol: f64,
    pub min_checked: usize,
    pub report: SuiteReport,
}

impl GradBlock {
    pub fn name(&self) -> String {
        match self.stacking {
            None => format!("one-layer {}", self.kind.name()),
            Some(s) => format!("{}-layer {} {}", self.layers, s.name(), self.kind.name()),
        }
    }

    pub fn passed(&self) -> bool {
        self.report.passed(self.min_checked)
    }
}

/// Tolerance for the stacked suites: one decade looser than the one-layer
/// table, since the chained products add roundoff.
pub fn deep_tolerance(h: f64) -> f64 {
    10.0 * default_tolerance(h)
}

/// Initial step of the stacked suites' extrapolation tableau.
pub fn deep_step(h: f64) -> f64 {
    (10.0 * h).min(1e-1)
}

/// Finite-difference suites for both model kinds. Fails with the worst
/// offending blocks after writing `gradcheck.csv`.
pub fn gradcheck(opts: &GradcheckOptions) -> CliResult<Vec<GradBlock>> {
    if !(opts.h > 0.0 && opts.h.is_finite()) {
        return Err(CliError::Config(format!("`h`: must be positive, got {}", opts.h)));
    }
    if opts.instances == 0 || opts.layers == 0 {
        return Err(CliError::Config("`instances` and `layers` must be at least 1".into()));
    }
    let min_checked = opts.instances - opts.instances / 10;
    let mut blocks = Vec::new();
    for kind in BOTH_KINDS {
        let tol = default_tolerance(opts.h);
        blocks.push(GradBlock {
            kind,
            layers: 1,
            stacking: None,
            tol,
            min_checked,
            report: one_layer_grad_suite(kind, opts.instances, opts.h, tol, opts.seed)?,
        });
    }
    if opts.layers > 1 {
        for stacking in [Stacking::Plain, Stacking::Residual] {
            for kind in BOTH_KINDS {
                let arch = Architecture {
                    n_layers: opts.layers,
                    stacking,
                };
                let tol = deep_tolerance(opts.h);
                blocks.push(GradBlock {
                    kind,
                    layers: opts.layers,
                    stacking: Some(stacking),
                    tol,
                    min_checked,
                    report: deep_grad_suite(
                        kind,
                        arch,
                        opts.instances,
                        deep_step(opts.h),
                        tol,
                        opts.seed,
                    )?,
                });
            }
        }
    }

    let mut t = Table::new(&[
        "model",
        "layers",
        "stacking",
        "instances",
        "checked",
        "skipped",
        "failed",
        "worst_wb",
        "worst_wc",
        "worst_gate",
        "tol",
        "passed",
    ]);
    for b in &blocks {
        let r = &b.report;
        t.push(vec![
            b.kind.name().into(),
            b.layers.into(),
            b.stacking.map(|s| s.name()).into(),
            r.instances.into(),
            r.checked.into(),
            r.skipped.into(),
            r.failed.into(),
            r.worst_wb.into(),
            r.worst_wc.into(),
            r.worst_gate.into(),
            b.tol.into(),
            b.passed().into(),
        ]);
    }
    let params = format!(
        "h={:e} instances={} layers={} seed={}",
        opts.h, opts.instances, opts.layers, opts.seed
    );
    t.write(&opts.out.join("gradcheck.csv"), &sha256_hex(params.as_bytes()))?;

    let failed: Vec<String> = blocks
        .iter()
        .filter(|b| !b.passed())
        .map(|b| {
            let r = &b.report;
            format!(
                "{}: {} of {} checked failed (need {} checked); worst W_B {:.3e}, W_C {:.3e}, gate {:.3e} vs tol {:.1e}",
                b.name(), r.failed, r.checked, b.min_checked, r.worst_wb, r.worst_wc, r.worst_gate, b.tol
            )
        })
        .collect();
    if failed.is_empty() {
        Ok(blocks)
    } else {
        Err(CliError::Failed(failed.join("\n")))
    }
}

/// Trains every `(kind, seed)` pair and writes its artifacts.
pub fn train(cfg: &ExperimentConfig, kinds: &[ModelKind]) -> CliResult<Vec<TrainedRun>> {
    let layout = Layout::new(&cfg.run.out);
    let jobs: Vec<(ModelKind, u64)> = kinds
        .iter()
        .flat_map(|&k| cfg.run.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(kind, seed)| train_run(cfg, kind, seed))
        .collect::<CliResult<Vec<_>>>()?;
    for run in &runs {
        save_run(cfg, &layout, run)?;
    }
    Ok(runs)
}

/// Final checkpoints for every `(kind, seed)`, in job order.
fn checkpoints(
    cfg: &ExperimentConfig,
    kinds: &[ModelKind],
    train_first: bool,
) -> CliResult<Vec<(ModelKind, u64, Weights)>> {
    let layout = Layout::new(&cfg.run.out);
    let jobs: Vec<(ModelKind, u64)> = kinds
        .iter()
        .flat_map(|&k| cfg.run.seeds.iter().map(move |&s| (k, s)))
        .collect();
    jobs.par_iter()
        .map(|&(kind, seed)| {
            obtain(cfg, &layout, kind, seed, train_first).map(|c| (kind, seed, c.weights))
        })
        .collect()
}

fn sweep_stream(seed: u64, rule: RuleName, alpha: f64) -> RngStream {
    RngStream::seeded(seed)
        .split(TAG_SWEEP)
        .split(rule.code())
        .split(alpha.to_bits())
}

/// Test error of both models over the configured α grid and label rules.
pub fn sweep_alpha(cfg: &ExperimentConfig, train_first: bool) -> CliResult<Table> {
    let models = checkpoints(cfg, &BOTH_KINDS, train_first)?;
    let settings = cfg
        .run
        .seeds
        .iter()
        .map(|&s| Setting::new(cfg, s).map(|st| (s, st)))
        .collect::<CliResult<Vec<_>>>()?;
    let setting = |seed: u64| &settings.iter().find(|(s, _)| *s == seed).expect("seed").1;
    let mut cells = Vec::new();
    for (kind, seed, weights) in &models {
        for &rule in &cfg.test.rules {
            for &alpha in &cfg.test.alphas {
                cells.push((*kind, *seed, weights, rule, alpha));
            }
        }
    }
    // Rows: model, then rule, then α, then seed.
    cells.sort_by(|a, b| {
        let rank = |k: ModelKind| BOTH_KINDS.iter().position(|x| *x == k);
        let rule_pos = |r: RuleName| cfg.test.rules.iter().position(|x| *x == r);
        (rank(a.0), rule_pos(a.3))
            .cmp(&(rank(b.0), rule_pos(b.3)))
            .then(a.4.total_cmp(&b.4))
            .then(a.1.cmp(&b.1))
    });
    let results = cells
        .par_iter()
        .map(|&(kind, seed, weights, rule, alpha)| {
            let st = setting(seed);
            let ec = cfg.eval_config(&st.outliers, alpha, rule, cfg.test.n_prompts, None);
            let model = predictor(kind, weights);
            zero_one_error(model.as_ref(), &st.bank, &ec, &sweep_stream(seed, rule, alpha))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut t = Table::new(&[
        "model", "layers", "rule", "alpha", "seed", "error", "ci_low", "ci_high", "n_prompts",
    ]);
    for ((kind, seed, _, rule, alpha), p) in cells.iter().zip(results) {
        t.push(vec![
            kind.name().into(),
            cfg.model.n_layers.into(),
            rule.name().into(),
            (*alpha).into(),
            (*seed).into(),
            p.rate.into(),
            p.ci_low.into(),
            p.ci_high.into(),
            p.n.into(),
        ]);
    }
    t.write(&Layout::new(&cfg.run.out).output("figure2.csv"), &cfg.hash())?;
    Ok(t)
}

/// Attention split and gate records of every layer on one prompt.
fn layer_views(kind: ModelKind, weights: &Weights, prompt: &Prompt) -> Vec<(Concentration, Vec<GateRecord>)> {
    match weights {
        Weights::OneLayer(params) => {
            let conc = attention_concentration(params, prompt);
            let gates = match kind {
                ModelKind::Mamba => gating_report(params, prompt),
                ModelKind::LinearTransformer => gate_records(&vec![1.0; prompt.len()], prompt),
            };
            vec![(conc, gates)]
        }
        Weights::Deep(params) => layer_probes(kind, params, prompt)
            .iter()
            .map(|lp| {
                (
                    split_scores(&lp.scores, &lp.unit_scores, prompt),
                    gate_records(&lp.gates, prompt),
                )
            })
            .collect(),
    }
}

/// Per-layer means of the attention split over a prompt set.
#[derive(Debug, Clone, Copy, Default)]
struct MeanSplit {
    s_same: f64,
    s_other: f64,
    s_same_unit: f64,
    s_other_unit: f64,
    n_same: f64,
    n_other: f64,
}

fn mean_splits(kind: ModelKind, weights: &Weights, prompts: &[Prompt]) -> Vec<MeanSplit> {
    let mut acc: Vec<MeanSplit> = Vec::new();
    for p in prompts {
        for (layer, (c, _)) in layer_views(kind, weights, p).into_iter().enumerate() {
            if acc.len() <= layer {
                acc.push(MeanSplit::default());
            }
            let a = &mut acc[layer];
            a.s_same += c.s_same;
            a.s_other += c.s_other;
            a.s_same_unit += c.s_same_unit;
            a.s_other_unit += c.s_other_unit;
            a.n_same += c.n_same as f64;
            a.n_other += c.n_other as f64;
        }
    }
    let n = prompts.len() as f64;
    for a in &mut acc {
        a.s_same /= n;
        a.s_other /= n;
        a.s_same_unit /= n;
        a.s_other_unit /= n;
        a.n_same /= n;
        a.n_other /= n;
    }
    acc
}

/// Tables written by [`probe`].
#[derive(Debug, Clone)]
pub struct ProbeReport {
    /// Attention split per snapshot and layer.
    pub attention: Table,
    /// One row per (seed, layer, prompt, context index) of the final model.
    pub gates: Table,
    /// One row per (seed, layer): trained vs initial attention, gate means
    /// and the gate-decay slope.
    pub summary: Table,
}

pub fn probe_prompts(cfg: &ExperimentConfig, setting: &Setting, seed: u64) -> CliResult<Vec<Prompt>> {
    let ec = cfg.eval_config(
        &setting.outliers,
        cfg.probe.alpha,
        cfg.probe.rule,
        cfg.probe.n_prompts,
        None,
    );
    let tasks = cfg.test.task_pool.tasks(cfg.bank.m1)?;
    let stream = RngStream::seeded(seed).split(TAG_PROBE);
    (0..cfg.probe.n_prompts)
        .map(|i| eval_prompt(&setting.bank, &tasks, &ec, &stream, i).map_err(Into::into))
        .collect()
}

/// Attention and gate probes over the saved snapshots of `kind`.
pub fn probe(cfg: &ExperimentConfig, kind: ModelKind, train_first: bool) -> CliResult<ProbeReport> {
    let layout = Layout::new(&cfg.run.out);
    if train_first {
        train(cfg, &[kind])?;
    }
    let mut attention = Table::new(&[
        "model",
        "layers",
        "seed",
        "iteration",
        "layer",
        "s_same",
        "s_other",
        "s_same_unit",
        "s_other_unit",
        "n_same",
        "n_other",
    ]);
    let mut gates = Table::new(&[
        "model",
        "layers",
        "seed",
        "layer",
        "prompt",
        "index",
        "gate",
        "outlier",
        "same_pattern",
        "clean_rank",
    ]);
    let mut summary = Table::new(&[
        "model",
        "layers",
        "seed",
        "layer",
        "iteration",
        "s_same",
        "s_other",
        "s_same_init",
        "s_other_init",
        "n_same",
        "n_other",
        "gate_outlier",
        "gate_clean",
        "gate_ratio",
        "decay_slope",
    ]);
    let n_layers = cfg.model.n_layers;
    for &seed in &cfg.run.seeds {
        let snaps = load_snapshots(cfg, &layout, kind, seed)?;
        let setting = Setting::new(cfg, seed)?;
        let prompts = probe_prompts(cfg, &setting, seed)?;
        let splits: Vec<Vec<MeanSplit>> = snaps
            .par_iter()
            .map(|s| mean_splits(kind, &s.weights, &prompts))
            .collect();
        for (snap, per_layer) in snaps.iter().zip(&splits) {
            for (layer, m) in per_layer.iter().enumerate() {
                attention.push(vec![
                    kind.name().into(),
                    n_layers.into(),
                    seed.into(),
                    snap.iteration.into(),
                    (layer + 1).into(),
                    m.s_same.into(),
                    m.s_other.into(),
                    m.s_same_unit.into(),
                    m.s_other_unit.into(),
                    m.n_same.into(),
                    m.n_other.into(),
                ]);
            }
        }

        let last = snaps.last().expect("nonempty");
        let views: Vec<Vec<(Concentration, Vec<GateRecord>)>> = prompts
            .par_iter()
            .map(|p| layer_views(kind, &last.weights, p))
            .collect();
        let n_model_layers = views[0].len();
        for layer in 0..n_model_layers {
            let mut records = Vec::new();
            for (pi, v) in views.iter().enumerate() {
                for r in &v[layer].1 {
                    gates.push(vec![
                        kind.name().into(),
                        n_layers.into(),
                        seed.into(),
                        (layer + 1).into(),
                        pi.into(),
                        r.index.into(),
                        r.gate.into(),
                        r.outlier.into(),
                        r.same_pattern.into(),
                        r.clean_rank.into(),
                    ]);
                }
                records.extend(v[layer].1.iter().copied());
            }
            let (g_out, g_clean) = mean_gates(&records);
            let ratio = match (g_out, g_clean) {
                (Some(o), Some(c)) if c > 0.0 => Some(o / c),
                _ => None,
            };
            let trained = splits.last().expect("nonempty")[layer];
            let init = splits[0][layer];
            summary.push(vec![
                kind.name().into(),
                n_layers.into(),
                seed.into(),
                (layer + 1).into(),
                last.iteration.into(),
                trained.s_same.into(),
                trained.s_other.into(),
                init.s_same.into(),
                init.s_other.into(),
                trained.n_same.into(),
                trained.n_other.into(),
                g_out.into(),
                g_clean.into(),
                ratio.into(),
                gate_decay_slope(&records, cfg.probe.max_rank).into(),
            ]);
        }
    }

    let hash = cfg.hash();
    attention.write(&layout.output("figure3.csv"), &hash)?;
    gates.write(&layout.output("figure4.csv"), &hash)?;
    summary.write(&layout.output("probe_summary.csv"), &hash)?;
    if n_layers > 1 {
        for layer in 1..=n_layers {
            let pick = |t: &Table| {
                let col = t.column("layer").expect("layer column");
                let mut out = Table::new(&t.header);
                for row in t.rows.iter().filter(|r| r[col] == Cell::Int(layer as i64)) {
                    out.push(row.clone());
                }
                out
            };
            pick(&attention).write(&layout.output(&format!("figure3_layer{layer}.csv")), &hash)?;
            pick(&gates).write(&layout.output(&format!("figure4_layer{layer}.csv")), &hash)?;
        }
    }
    Ok(ProbeReport {
        attention,
        gates,
        summary,
    })
}

/// Accuracy of both models under each arrangement policy on matched
/// prompts.
pub fn table2(cfg: &ExperimentConfig, train_first: bool) -> CliResult<Table> {
    let models = checkpoints(cfg, &BOTH_KINDS, train_first)?;
    let results = models
        .par_iter()
        .map(|(kind, seed, weights)| {
            let st = Setting::new(cfg, *seed)?;
            let ec = cfg.eval_config(
                &st.outliers,
                cfg.table2.alpha,
                cfg.table2.rule,
                cfg.table2.n_prompts,
                None,
            );
            let stream = RngStream::seeded(*seed).split(TAG_TABLE);
            let model = predictor(*kind, weights);
            Ok(arrangement_accuracy(
                model.as_ref(),
                &st.bank,
                &ec,
                &cfg.table2.policies,
                &stream,
            )?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut t = Table::new(&[
        "model", "layers", "seed", "policy", "accuracy", "ci_low", "ci_high", "n_prompts",
    ]);
    for ((kind, seed, _), rows) in models.iter().zip(results) {
        for (policy, p) in rows {
            t.push(vec![
                kind.name().into(),
                cfg.model.n_layers.into(),
                (*seed).into(),
                policy.short_name().into(),
                p.rate.into(),
                p.ci_low.into(),
                p.ci_high.into(),
                p.n.into(),
            ]);
        }
    }
    t.write(&Layout::new(&cfg.run.out).output("table2.csv"), &cfg.hash())?;
    Ok(t)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub kind: ModelKind,
    pub alpha: f64,
    pub rule: RuleName,
    pub arrangement: Option<Arrangement>,
    pub n_prompts: usize,
    pub train_first: bool,
}

/// One test distribution, one model, every seed. Prompts match the sweep's
/// at the same `(rule, α)`.
pub fn eval(cfg: &ExperimentConfig, opts: &EvalOptions) -> CliResult<Table> {
    if !(0.0..1.0).contains(&opts.alpha) {
        return Err(CliError::Config(format!(
            "`alpha`: must lie in [0, 1), got {}",
            opts.alpha
        )));
    }
    if opts.n_prompts == 0 {
        return Err(CliError::Config("`n_prompts`: must be at least 1".into()));
    }
    let models = checkpoints(cfg, &[opts.kind], opts.train_first)?;
    let mut t = Table::new(&[
        "model",
        "layers",
        "seed",
        "rule",
        "alpha",
        "arrangement",
        "error",
        "ci_low",
        "ci_high",
        "n_prompts",
    ]);
    for (kind, seed, weights) in &models {
        let st = Setting::new(cfg, *seed)?;
        let ec = cfg.eval_config(&st.outliers, opts.alpha, opts.rule, opts.n_prompts, opts.arrangement);
        let model = predictor(*kind, weights);
        let p = zero_one_error(
            model.as_ref(),
            &st.bank,
            &ec,
            &sweep_stream(*seed, opts.rule, opts.alpha),
        )?;
        t.push(vec![
            kind.name().into(),
            cfg.model.n_layers.into(),
            (*seed).into(),
            opts.rule.name().into(),
            opts.alpha.into(),
            opts.arrangement.map(|a| a.short_name()).into(),
            p.rate.into(),
            p.ci_low.into(),
            p.ci_high.into(),
            p.n.into(),
        ]);
    }
    t.write(&Layout::new(&cfg.run.out).output("eval.csv"), &cfg.hash())?;
    Ok(t)
}

/// Writes the resolved config next to the artifacts.
pub fn echo_config(cfg: &ExperimentConfig) -> CliResult<()> {
    let text = format!("# config_hash={}\n{}", cfg.hash(), cfg.to_toml());
    write_file(&Layout::new(&cfg.run.out).output("config.resolved.toml"), &text)
}
