use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iclmb_cli::commands::{self, EvalOptions, GradcheckOptions, BOTH_KINDS};
use iclmb_cli::{CliError, CliResult, ExperimentConfig, Overrides, RuleName};
use iclmb_core::{Arrangement, ModelKind};

#[derive(Parser)]
#[command(name = "iclmb", version, about = "Gated vs ungated linear attention on in-context classification with outliers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run this seed only, instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, instead of the config's.
    #[arg(long)]
    out: Option<PathBuf>,
    /// mamba or linear_transformer.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Number of stacked layers.
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference checks of the analytic and tape gradients.
    Gradcheck {
        /// Central-difference step; the tolerance follows from it.
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Also check stacks of this depth (both wirings).
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out/gradcheck")]
        out: PathBuf,
    },
    /// Train the configured model for every seed.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Test error of both models across the outlier fraction grid.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Train both models before evaluating.
        #[arg(long)]
        train_first: bool,
    },
    /// Attention concentration over snapshots and per-example gates.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_first: bool,
    },
    /// Accuracy of both models under each outlier arrangement.
    Table2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_first: bool,
    },
    /// One-off evaluation of the configured model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_first: bool,
        /// Outlier fraction.
        #[arg(long)]
        alpha: f64,
        /// clean, flip, targeted or random.
        #[arg(long, default_value = "flip")]
        rule: RuleName,
        /// FQ, R or CQ; none keeps the sampled order.
        #[arg(long, value_parser = parse_arrangement)]
        arrangement: Option<Arrangement>,
        /// Defaults to the config's test.n_prompts.
        #[arg(long)]
        n_prompts: Option<usize>,
    },
}

fn parse_arrangement(s: &str) -> Result<Arrangement, String> {
    Arrangement::ALL
        .into_iter()
        .find(|a| a.short_name() == s)
        .ok_or_else(|| format!("unknown arrangement `{s}` (expected FQ, R or CQ)"))
}

fn resolve(common: &Common, kinds: &[ModelKind]) -> CliResult<ExperimentConfig> {
    let overrides = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        model: common.model,
        layers: common.layers,
    };
    let cfg = ExperimentConfig::resolve(&common.config, &overrides)?;
    let kinds: Vec<ModelKind> = if kinds.is_empty() {
        vec![cfg.model.kind]
    } else {
        kinds.to_vec()
    };
    for w in cfg.warnings(&kinds) {
        eprintln!("warning: {w}");
    }
    commands::echo_config(&cfg)?;
    Ok(cfg)
}

fn set_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("ICLMB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("ICLMB_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("ICLMB_THREADS: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    set_threads()?;
    match cli.command {
        Command::Gradcheck {
            h,
            instances,
            layers,
            seed,
            out,
        } => {
            let opts = GradcheckOptions {
                h,
                instances,
                layers,
                seed,
                out,
            };
            let result = commands::gradcheck(&opts);
            if let Ok(blocks) = &result {
                for b in blocks {
                    let r = &b.report;
                    println!(
                        "{}: {} checked, {} skipped, worst {:.3e} (tol {:.1e}) ok",
                        b.name(),
                        r.checked,
                        r.skipped,
                        r.worst(),
                        b.tol
                    );
                }
            }
            result.map(|_| ())
        }
        Command::Train { common } => {
            let cfg = resolve(&common, &[])?;
            for run in commands::train(&cfg, &[cfg.model.kind])? {
                println!(
                    "{} seed {}: {} iterations, final loss {:.6}, converged at {}",
                    run.kind.name(),
                    run.seed,
                    run.history.iterations,
                    run.history.final_loss().unwrap_or(f64::NAN),
                    run.history
                        .converged_at
                        .map_or("-".to_string(), |i| i.to_string())
                );
            }
            Ok(())
        }
        Command::SweepAlpha {
            common,
            train_first,
        } => {
            let cfg = resolve(&common, &BOTH_KINDS)?;
            let t = commands::sweep_alpha(&cfg, train_first)?;
            println!("{} rows -> {}", t.rows.len(), cfg.run.out.join("figure2.csv").display());
            Ok(())
        }
        Command::Probe {
            common,
            train_first,
        } => {
            let cfg = resolve(&common, &[])?;
            let r = commands::probe(&cfg, cfg.model.kind, train_first)?;
            println!(
                "{} attention rows, {} gate rows -> {}",
                r.attention.rows.len(),
                r.gates.rows.len(),
                cfg.run.out.display()
            );
            Ok(())
        }
        Command::Table2 {
            common,
            train_first,
        } => {
            let cfg = resolve(&common, &BOTH_KINDS)?;
            let t = commands::table2(&cfg, train_first)?;
            println!("{} rows -> {}", t.rows.len(), cfg.run.out.join("table2.csv").display());
            Ok(())
        }
        Command::Eval {
            common,
            train_first,
            alpha,
            rule,
            arrangement,
            n_prompts,
        } => {
            let cfg = resolve(&common, &[])?;
            let opts = EvalOptions {
                kind: cfg.model.kind,
                alpha,
                rule,
                arrangement,
                n_prompts: n_prompts.unwrap_or(cfg.test.n_prompts),
                train_first,
            };
            let t = commands::eval(&cfg, &opts)?;
            let col = t.column("error").expect("error column");
            for row in &t.rows {
                println!("seed {}: error {}", row[2].render(), row[col].render());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
