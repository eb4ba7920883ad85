//! Exit criteria. Each check prints one `PASS`/`FAIL` line; the target
//! fails when any criterion does not hold. Training runs are shared between
//! the checks that read them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use iclmb_cli::commands::{self, deep_step, deep_tolerance, ProbeReport, BOTH_KINDS};
use iclmb_cli::runs::TrainedRun;
use iclmb_cli::table::{Cell, Table};
use iclmb_cli::{ExperimentConfig, Overrides};
use iclmb_core::deep::{Architecture, Stacking};
use iclmb_core::oracle::{
    deep_grad_suite, deep_reduction_suite, gating_suite, one_layer_grad_suite, recurrence_suite,
};
use iclmb_core::ModelKind;
use tempfile::TempDir;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn report(id: &str, passed: bool, detail: &str) -> bool {
    println!("{id} {}: {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn num(c: &Cell) -> f64 {
    match c {
        Cell::Float(v) => *v,
        Cell::Int(v) => *v as f64,
        other => panic!("not numeric: {other:?}"),
    }
}

fn text(c: &Cell) -> String {
    c.render()
}

fn col(t: &Table, name: &str) -> usize {
    t.column(name).unwrap_or_else(|| panic!("no column {name}"))
}

/// A config with its output directory moved into a fresh temp dir.
fn staged(name: &str) -> (TempDir, ExperimentConfig) {
    let dir = TempDir::new().unwrap();
    let overrides = Overrides {
        out: Some(dir.path().to_path_buf()),
        ..Overrides::default()
    };
    let cfg = ExperimentConfig::resolve(&config_path(name), &overrides).unwrap();
    (dir, cfg)
}

struct OneLayerRuns {
    _dir: TempDir,
    sweep: Table,
    probe: ProbeReport,
}

fn one_layer_runs() -> &'static OneLayerRuns {
    static RUNS: OnceLock<OneLayerRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let (dir, cfg) = staged("one_layer.toml");
        let start = Instant::now();
        commands::train(&cfg, &BOTH_KINDS).unwrap();
        println!(
            "trained one-layer models for {} seeds in {:.1} s",
            cfg.run.seeds.len(),
            start.elapsed().as_secs_f64()
        );
        OneLayerRuns {
            sweep: commands::sweep_alpha(&cfg, false).unwrap(),
            probe: commands::probe(&cfg, ModelKind::Mamba, false).unwrap(),
            _dir: dir,
        }
    })
}

fn a1_one_layer_gradients_match_finite_differences() -> bool {
    // Sized so that at least 100 remain after kink-adjacent skips.
    let (h, tol, n) = (1e-5, 1e-6, 120);
    let start = Instant::now();
    let mut worst = 0.0_f64;
    let mut ok = true;
    let mut detail = Vec::new();
    for kind in BOTH_KINDS {
        let r = one_layer_grad_suite(kind, n, h, tol, 0).unwrap();
        ok &= r.failed == 0 && r.checked >= 100;
        worst = worst.max(r.worst());
        detail.push(format!("{} {}/{} checked", kind.name(), r.checked, r.instances));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= worst < tol && secs < 10.0;
    report(
        "A1",
        ok,
        &format!("worst rel err {worst:.2e} < {tol:.0e}, {}, {secs:.2} s < 10 s", detail.join(", ")),
    )
}

fn a2_closed_form_matches_recurrence() -> bool {
    let start = Instant::now();
    let worst = recurrence_suite(100, 0);
    let secs = start.elapsed().as_secs_f64();
    report(
        "A2",
        worst < 1e-10 && secs < 5.0,
        &format!("max |closed - recurrence| {worst:.2e} < 1e-10 on 100 instances, {secs:.3} s < 5 s"),
    )
}

fn a3_gating_identity() -> bool {
    let g = gating_suite(100, 0);
    report(
        "A3",
        g.telescoping <= 1e-12 && g.halving <= 1e-12,
        &format!(
            "telescoping {:.2e} <= 1e-12, halving at w = 0 {:.2e} <= 1e-12",
            g.telescoping, g.halving
        ),
    )
}

fn a4_stack_reduces_and_matches_finite_differences() -> bool {
    let r = deep_reduction_suite(100, 0);
    let h = deep_step(1e-5);
    let tol = deep_tolerance(1e-5);
    let mut ok = r.value <= 1e-9 && r.gradient <= 1e-9;
    let mut worst = 0.0_f64;
    let mut counts = Vec::new();
    for stacking in [Stacking::Plain, Stacking::Residual] {
        for kind in BOTH_KINDS {
            let arch = Architecture {
                n_layers: 2,
                stacking,
            };
            let s = deep_grad_suite(kind, arch, 100, h, tol, 0).unwrap();
            ok &= s.passed(90);
            worst = worst.max(s.worst());
            counts.push(format!("{} {}: {}/{}", stacking.name(), kind.name(), s.checked, s.instances));
        }
    }
    ok &= worst < 1e-5;
    report(
        "A4",
        ok,
        &format!(
            "one-layer stack value {:.2e}, gradient {:.2e} <= 1e-9; two-layer worst rel err {worst:.2e} < 1e-5 ({})",
            r.value,
            r.gradient,
            counts.join(", ")
        ),
    )
}

fn a5_gated_model_tolerates_outliers_the_ungated_one_does_not() -> bool {
    let t = &one_layer_runs().sweep;
    let (m, r, a, s, e) = (
        col(t, "model"),
        col(t, "rule"),
        col(t, "alpha"),
        col(t, "seed"),
        col(t, "error"),
    );
    let mut mamba_worst = (0.0_f64, String::new());
    let mut lt_best = (f64::INFINITY, String::new());
    for row in &t.rows {
        let (alpha, err) = (num(&row[a]), num(&row[e]));
        let at = format!("{} alpha {alpha:.1} seed {}", text(&row[r]), text(&row[s]));
        match text(&row[m]).as_str() {
            "mamba" if alpha <= 0.7 + 1e-12 && err > mamba_worst.0 => mamba_worst = (err, at),
            "linear_transformer" if alpha >= 0.6 - 1e-12 && text(&row[r]) == "flip" && err < lt_best.0 => {
                lt_best = (err, at)
            }
            _ => {}
        }
    }
    report(
        "A5",
        mamba_worst.0 <= 0.05 && lt_best.0 >= 0.2,
        &format!(
            "Mamba worst error for alpha <= 0.7 {:.4} <= 0.05 ({}); LT least error for alpha >= 0.6 under flip {:.4} >= 0.2 ({})",
            mamba_worst.0, mamba_worst.1, lt_best.0, lt_best.1
        ),
    )
}

fn a6_training_concentrates_attention_on_the_query_pattern() -> bool {
    let t = &one_layer_runs().probe.summary;
    let get = |row: &[Cell], name: &str| num(&row[col(t, name)]);
    let mut trained_ok = true;
    let mut init_ok = true;
    let mut lines = Vec::new();
    for row in &t.rows {
        let (same, other) = (get(row, "s_same"), get(row, "s_other"));
        let init_ratio = get(row, "s_same_init") / get(row, "s_other_init");
        let count_ratio = get(row, "n_same") / get(row, "n_other");
        trained_ok &= same >= 10.0 * other;
        init_ok &= init_ratio > 0.0
            && init_ratio / count_ratio <= 2.0 && count_ratio / init_ratio <= 2.0;
        lines.push(format!(
            "seed {}: trained S_same {same:.3} vs 10 x S_other {:.3}; init ratio {init_ratio:.3} vs count ratio {count_ratio:.3}",
            text(&row[col(t, "seed")]),
            10.0 * other
        ));
    }
    report(
        "A6",
        trained_ok && init_ok,
        &format!(
            "trained {}, init within 2x of counts {} ({})",
            if trained_ok { "ok" } else { "violated" },
            if init_ok { "ok" } else { "violated" },
            lines.join("; ")
        ),
    )
}

fn a7_gates_suppress_outliers_and_decay_with_rank() -> bool {
    let t = &one_layer_runs().probe.summary;
    let get = |row: &[Cell], name: &str| num(&row[col(t, name)]);
    let mut ratio_ok = true;
    let mut slope_ok = true;
    let mut lines = Vec::new();
    for row in &t.rows {
        let ratio = get(row, "gate_ratio");
        let slope = get(row, "decay_slope");
        ratio_ok &= ratio <= 0.1;
        slope_ok &= (-1.5..=-0.5).contains(&slope);
        lines.push(format!(
            "seed {}: outlier/clean gate {ratio:.4} <= 0.1, log2 slope {slope:.3} in [-1.5, -0.5]",
            text(&row[col(t, "seed")])
        ));
    }
    report("A7", ratio_ok && slope_ok, &lines.join("; "))
}

fn a8_stacked_gated_model_is_order_sensitive() -> bool {
    let (_dir, cfg) = staged("three_layer.toml");
    let start = Instant::now();
    commands::train(&cfg, &BOTH_KINDS).unwrap();
    let t = commands::table2(&cfg, false).unwrap();
    let (m, p, acc) = (col(&t, "model"), col(&t, "policy"), col(&t, "accuracy"));
    let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for row in &t.rows {
        let e = sums.entry((text(&row[m]), text(&row[p]))).or_default();
        e.0 += num(&row[acc]);
        e.1 += 1;
    }
    let mean = |model: &str, policy: &str| {
        let (s, n) = sums[&(model.to_string(), policy.to_string())];
        s / n as f64
    };
    let (fq, r, cq) = (mean("mamba", "FQ"), mean("mamba", "R"), mean("mamba", "CQ"));
    let lt: Vec<f64> = ["FQ", "R", "CQ"]
        .iter()
        .map(|q| mean("linear_transformer", q))
        .collect();
    let spread = lt.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - lt.iter().cloned().fold(f64::INFINITY, f64::min);
    report(
        "A8",
        fq >= r && r >= cq && fq - cq >= 0.10 && spread <= 0.05,
        &format!(
            "Mamba FQ {fq:.4} >= R {r:.4} >= CQ {cq:.4}, gap {:.4} >= 0.10; LT FQ/R/CQ {:.4}/{:.4}/{:.4}, spread {spread:.4} <= 0.05 ({} seeds, {:.0} s)",
            fq - cq,
            lt[0],
            lt[1],
            lt[2],
            cfg.run.seeds.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn iterations_to_target(runs: &[TrainedRun], kind: ModelKind, seed: u64) -> Option<usize> {
    runs.iter()
        .find(|r| r.kind == kind && r.seed == seed)
        .and_then(|r| r.history.converged_at)
}

fn converge_both(p_a: f64, eps: f64) -> (Vec<u64>, Vec<TrainedRun>) {
    let (_dir, mut cfg) = staged("one_layer.toml");
    cfg.train.p_a = p_a;
    cfg.train.target_loss = eps;
    cfg.validate().unwrap();
    let runs = commands::train(&cfg, &BOTH_KINDS).unwrap();
    (cfg.run.seeds.clone(), runs)
}

fn a9_ungated_model_reaches_the_target_loss_sooner() -> bool {
    let eps = 0.05;
    let show = |v: Option<usize>| v.map_or("never".to_string(), |i| i.to_string());
    let (seeds, runs) = converge_both(0.4, eps);
    let mut ok = true;
    let mut lines = Vec::new();
    for &s in &seeds {
        let lt = iterations_to_target(&runs, ModelKind::LinearTransformer, s);
        let mamba = iterations_to_target(&runs, ModelKind::Mamba, s);
        ok &= matches!((lt, mamba), (Some(a), Some(b)) if a < b) || (lt.is_some() && mamba.is_none());
        lines.push(format!("seed {s}: LT {} < Mamba {}", show(lt), show(mamba)));
    }
    report(
        "A9",
        ok,
        &format!("p_a 0.4, eps {eps}: {}", lines.join("; ")),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.clone(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn a10_repeated_commands_write_identical_bytes() -> bool {
    let dir = TempDir::new().unwrap();
    let text = std::fs::read_to_string(config_path("one_layer.toml"))
        .unwrap()
        .replace("max_iters = 20000", "max_iters = 300")
        .replace("snapshot_every = 1000", "snapshot_every = 100")
        .replace("n_prompts = 1000", "n_prompts = 100")
        .replace("n_prompts = 2500", "n_prompts = 100");
    let cfg_path = dir.path().join("small.toml");
    std::fs::write(&cfg_path, text).unwrap();
    let out = dir.path().join("out");
    let bin = env!("CARGO_BIN_EXE_iclmb");
    let common = |cmd: &str| {
        vec![
            cmd.to_string(),
            "--config".into(),
            cfg_path.display().to_string(),
            "--out".into(),
            out.display().to_string(),
        ]
    };
    let commands: Vec<Vec<String>> = vec![
        common("train"),
        {
            let mut c = common("train");
            c.extend(["--model".into(), "linear_transformer".into()]);
            c
        },
        common("sweep-alpha"),
        common("probe"),
        common("table2"),
        {
            let mut c = common("eval");
            c.extend(["--alpha".into(), "0.3".into()]);
            c
        },
        vec![
            "gradcheck".into(),
            "--instances".into(),
            "20".into(),
            "--layers".into(),
            "2".into(),
            "--out".into(),
            out.join("gradcheck").display().to_string(),
        ],
    ];
    let run_all = || {
        for args in &commands {
            let status = Command::new(bin).args(args).output().unwrap();
            assert!(status.status.success(), "{args:?}: {}", String::from_utf8_lossy(&status.stderr));
        }
        snapshot(&out)
    };
    let first = run_all();
    let second = run_all();
    let differing: Vec<String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .map(|k| k.strip_prefix(&out).unwrap_or(k).display().to_string())
        .collect();
    report(
        "A10",
        differing.is_empty() && !first.is_empty(),
        &format!(
            "{} files over {} subcommand runs, differing: {}",
            first.len(),
            commands.len(),
            if differing.is_empty() { "none".to_string() } else { differing.join(", ") }
        ),
    )
}

fn main() {
    let checks: [fn() -> bool; 10] = [
        a1_one_layer_gradients_match_finite_differences,
        a2_closed_form_matches_recurrence,
        a3_gating_identity,
        a4_stack_reduces_and_matches_finite_differences,
        a5_gated_model_tolerates_outliers_the_ungated_one_does_not,
        a6_training_concentrates_attention_on_the_query_pattern,
        a7_gates_suppress_outliers_and_decay_with_rank,
        a8_stacked_gated_model_is_order_sensitive,
        a9_ungated_model_reaches_the_target_loss_sooner,
        a10_repeated_commands_write_identical_bytes,
    ];
    let failed = checks.iter().filter(|check| !check()).count();
    println!("acceptance: {} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
