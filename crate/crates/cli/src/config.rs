//! Experiment configuration: a strict TOML file with one table per concern.
//! Every field is required, so a shipped file documents the whole run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use iclmb_core::deep::{Architecture, Stacking};
use iclmb_core::patterns::{build_pattern_bank, make_test_outlier, training_task_set};
use iclmb_core::probes::{EvalConfig, TaskPool};
use iclmb_core::prompts::{Arrangement, Label, LabelRule, TestPromptConfig, TrainPromptConfig};
use iclmb_core::train::TrainConfig;
use iclmb_core::{BankMode, BankShape, ModelKind, PatternBank, RngStream, Task, TestOutlier};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Stream tags below the run seed, disjoint from the trainer's.
pub const TAG_BANK: u64 = 3;
pub const TAG_SWEEP: u64 = 4;
pub const TAG_HISTORY: u64 = 5;
pub const TAG_PROBE: u64 = 6;
pub const TAG_TABLE: u64 = 7;
pub const TAG_EVAL: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub bank: BankSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub test: TestSection,
    pub probe: ProbeSection,
    pub table2: Table2Section,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankSection {
    pub d: usize,
    pub m1: usize,
    pub m2: usize,
    pub v: usize,
    pub beta: f64,
    pub mode: BankMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub n_layers: usize,
    /// Ignored for one-layer models.
    pub stacking: Stacking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub eta: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub l: usize,
    pub p_a: f64,
    pub k: f64,
    pub kappa_a: f64,
    pub delta: f64,
    /// Early-stopping target for the moving-average loss; 0 runs the full
    /// budget.
    pub target_loss: f64,
    pub window: usize,
    pub stratified: bool,
    /// History interval, in iterations.
    pub checkpoint_every: usize,
    /// Snapshot-file interval; a multiple of `checkpoint_every`.
    pub snapshot_every: usize,
    /// Clean test prompts behind each history row's `eval_error`.
    pub history_prompts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleName {
    Clean,
    Flip,
    Targeted,
    Random,
}

impl RuleName {
    pub fn name(self) -> &'static str {
        match self {
            RuleName::Clean => "clean",
            RuleName::Flip => "flip",
            RuleName::Targeted => "targeted",
            RuleName::Random => "random",
        }
    }

    /// Stream tag for this rule's evaluation prompts.
    pub fn code(self) -> u64 {
        match self {
            RuleName::Clean => 0,
            RuleName::Flip => 1,
            RuleName::Targeted => 2,
            RuleName::Random => 3,
        }
    }
}

impl std::str::FromStr for RuleName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "clean" => Ok(RuleName::Clean),
            "flip" => Ok(RuleName::Flip),
            "targeted" => Ok(RuleName::Targeted),
            "random" => Ok(RuleName::Random),
            other => Err(format!(
                "unknown rule `{other}` (expected clean, flip, targeted or random)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSection {
    pub l: usize,
    pub k_prime: f64,
    pub kappa_a_prime: f64,
    /// One coefficient list per test outlier, over the training outlier
    /// directions.
    pub outlier_coeffs: Vec<Vec<f64>>,
    /// Membership threshold L on the normalized coefficient sum.
    pub min_sum: f64,
    pub task_pool: TaskPool,
    pub exact_alpha: bool,
    pub n_prompts: usize,
    pub alphas: Vec<f64>,
    pub rules: Vec<RuleName>,
    /// Label emitted by the targeted rule, +1 or -1.
    pub targeted_label: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub alpha: f64,
    pub rule: RuleName,
    pub n_prompts: usize,
    /// Largest clean rank in the gate-decay regression.
    pub max_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table2Section {
    pub alpha: f64,
    pub rule: RuleName,
    pub n_prompts: usize,
    pub policies: Vec<Arrangement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

/// Flag overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: Option<ModelKind>,
    pub layers: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// Loads, applies overrides and validates.
    pub fn resolve(path: &Path, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg = Self::load(path)?;
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.run.seeds = vec![seed];
        }
        if let Some(out) = &o.out {
            self.run.out = out.clone();
        }
        if let Some(kind) = o.model {
            self.model.kind = kind;
        }
        if let Some(n) = o.layers {
            self.model.n_layers = n;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, output directory excluded.
    pub fn hash(&self) -> String {
        let mut copy = self.clone();
        copy.run.out = PathBuf::new();
        sha256_hex(copy.to_toml().as_bytes())
    }

    /// Identifies everything a training run depends on besides its seed and
    /// model kind: a checkpoint is reusable when this matches.
    pub fn train_key(&self, kind: ModelKind, seed: u64) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            bank: &'a BankSection,
            kind: ModelKind,
            n_layers: usize,
            stacking: Option<Stacking>,
            train: &'a TrainSection,
            seed: u64,
        }
        let key = Key {
            bank: &self.bank,
            kind,
            n_layers: self.model.n_layers,
            stacking: (self.model.n_layers > 1).then_some(self.model.stacking),
            train: &self.train,
            seed,
        };
        sha256_hex(toml::to_string(&key).expect("key serializes").as_bytes())
    }

    pub fn shape(&self) -> BankShape {
        BankShape {
            d: self.bank.d,
            m1: self.bank.m1,
            m2: self.bank.m2,
            v: self.bank.v,
            beta: self.bank.beta,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            n_layers: self.model.n_layers,
            stacking: self.model.stacking,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            eta: t.eta,
            batch_size: t.batch_size,
            max_iters: t.max_iters,
            prompt: TrainPromptConfig {
                l: t.l,
                p_a: t.p_a,
                k: t.k,
                kappa_a: t.kappa_a,
            },
            delta: t.delta,
            target_loss: t.target_loss,
            window: t.window,
            stratified: t.stratified,
            checkpoint_every: t.checkpoint_every,
            keep_snapshots: true,
            seed,
        }
    }

    pub fn label_rule(&self, rule: RuleName) -> LabelRule {
        match rule {
            RuleName::Clean => LabelRule::Clean,
            RuleName::Flip => LabelRule::Flip,
            RuleName::Targeted => LabelRule::Targeted(if self.test.targeted_label > 0 {
                Label::Plus
            } else {
                Label::Minus
            }),
            RuleName::Random => LabelRule::Random,
        }
    }

    /// Test distribution at `(alpha, rule)` with the shared test settings.
    pub fn eval_config(
        &self,
        outliers: &[TestOutlier],
        alpha: f64,
        rule: RuleName,
        n_prompts: usize,
        arrangement: Option<Arrangement>,
    ) -> EvalConfig {
        EvalConfig {
            n_prompts,
            prompt: TestPromptConfig {
                l: self.test.l,
                alpha,
                k: self.test.k_prime,
                kappa_a: self.test.kappa_a_prime,
                rule: self.label_rule(rule),
                exact_alpha: self.test.exact_alpha,
            },
            arrangement,
            task_pool: self.test.task_pool,
            test_outliers: outliers.to_vec(),
        }
    }

    /// Hard range checks. Returns the first violation.
    pub fn validate(&self) -> CliResult<()> {
        let fail = |field: &str, msg: String| Err(CliError::Config(format!("`{field}`: {msg}")));
        if self.model.n_layers == 0 {
            return fail("model.n_layers", "must be at least 1".into());
        }
        if self.run.seeds.is_empty() {
            return fail("run.seeds", "must list at least one seed".into());
        }
        let t = &self.train;
        if t.snapshot_every == 0 || !t.snapshot_every.is_multiple_of(t.checkpoint_every.max(1)) {
            return fail(
                "train.snapshot_every",
                format!(
                    "must be a positive multiple of checkpoint_every = {}",
                    t.checkpoint_every
                ),
            );
        }
        if t.history_prompts == 0 {
            return fail("train.history_prompts", "must be at least 1".into());
        }
        self.train_config(0).validate().map_err(section("train"))?;
        let s = &self.test;
        if s.alphas.is_empty() {
            return fail("test.alphas", "must list at least one value".into());
        }
        if s.rules.is_empty() {
            return fail("test.rules", "must list at least one rule".into());
        }
        if s.targeted_label != 1 && s.targeted_label != -1 {
            return fail(
                "test.targeted_label",
                format!("must be 1 or -1, got {}", s.targeted_label),
            );
        }
        if s.n_prompts == 0 || self.probe.n_prompts == 0 || self.table2.n_prompts == 0 {
            return fail("n_prompts", "must be at least 1".into());
        }
        if self.probe.max_rank < 2 {
            return fail("probe.max_rank", "must be at least 2".into());
        }
        if self.table2.policies.is_empty() {
            return fail("table2.policies", "must list at least one policy".into());
        }
        let mut alphas: Vec<(&str, f64)> = s.alphas.iter().map(|&a| ("test.alphas", a)).collect();
        alphas.push(("probe.alpha", self.probe.alpha));
        alphas.push(("table2.alpha", self.table2.alpha));
        for (field, a) in alphas {
            if !(0.0..1.0).contains(&a) {
                return fail(field, format!("must lie in [0, 1), got {a}"));
            }
        }
        let bank = self.build_bank(0)?;
        let outliers = self.test_outliers(&bank)?;
        self.eval_config(&outliers, 0.5, RuleName::Flip, 1, None)
            .validate()
            .map_err(section("test"))?;
        self.test
            .task_pool
            .tasks(self.bank.m1)
            .map_err(section("test.task_pool"))?;
        training_task_set(self.bank.m1).map_err(section("bank"))?;
        Ok(())
    }

    /// Soft checks: settings outside the regime the theory covers. These
    /// never change what runs.
    pub fn warnings(&self, kinds: &[ModelKind]) -> Vec<String> {
        let mut out = Vec::new();
        let mut alphas = self.test.alphas.clone();
        alphas.extend([self.probe.alpha, self.table2.alpha]);
        let worst = alphas.iter().cloned().fold(0.0, f64::max);
        if kinds.contains(&ModelKind::LinearTransformer) && worst >= 0.5 {
            out.push(format!(
                "alpha = {worst} with linear_transformer is outside the guarantee 'α ∈ [0, 1/2)'"
            ));
        }
        if kinds.contains(&ModelKind::Mamba) && self.train.p_a == 0.0 {
            out.push(
                "p_a = 0 trains mamba without outliers; its robustness guarantee needs p_a > 0"
                    .into(),
            );
        }
        if self.model.n_layers > 1 {
            out.push(format!(
                "n_layers = {} lies outside the one-layer analysis",
                self.model.n_layers
            ));
        }
        if self.test.kappa_a_prime < self.train.kappa_a {
            out.push(format!(
                "kappa_a_prime = {} is below the training magnitude kappa_a = {}",
                self.test.kappa_a_prime, self.train.kappa_a
            ));
        }
        out
    }

    pub fn build_bank(&self, seed: u64) -> CliResult<PatternBank> {
        build_pattern_bank(
            self.shape(),
            self.bank.mode,
            &mut RngStream::seeded(seed).split(TAG_BANK),
        )
        .map_err(section("bank"))
    }

    pub fn test_outliers(&self, bank: &PatternBank) -> CliResult<Vec<TestOutlier>> {
        self.test
            .outlier_coeffs
            .iter()
            .map(|c| make_test_outlier(bank, c, self.test.min_sum))
            .collect::<Result<_, _>>()
            .map_err(section("test.outlier_coeffs"))
    }

    pub fn training_tasks(&self) -> CliResult<Vec<Task>> {
        training_task_set(self.bank.m1).map_err(section("bank"))
    }
}

fn section(name: &'static str) -> impl Fn(iclmb_core::Error) -> CliError {
    move |e| CliError::Config(format!("[{name}] {e}"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").expect("writing to a String");
    }
    s
}
