//! Training and testing prompt samplers, and outlier arrangement.
//!
//! A prompt is the `(d+1) × (l+1)` matrix whose first `l` columns are the
//! context examples `(x_i; y_i)` and whose last column is `(x_query; 0)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::patterns::{PatternBank, Task, TestOutlier};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Plus,
    Minus,
}

impl Label {
    pub fn value(self) -> f64 {
        match self {
            Label::Plus => 1.0,
            Label::Minus => -1.0,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Plus => Label::Minus,
            Label::Minus => Label::Plus,
        }
    }

    pub fn from_value(v: f64) -> Result<Label> {
        if v == 1.0 {
            Ok(Label::Plus)
        } else if v == -1.0 {
            Ok(Label::Minus)
        } else {
            Err(Error::Label(v))
        }
    }

    fn random(rng: &mut RngStream) -> Label {
        if rng.sign() > 0.0 {
            Label::Plus
        } else {
            Label::Minus
        }
    }
}

/// Which outlier direction was added to an example, and how strongly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierTag {
    /// Index into the training `vstar` list or the test-outlier list.
    pub index: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleMeta {
    pub relevant_idx: usize,
    pub irrelevant_idx: usize,
    pub kappa: f64,
    pub outlier: Option<OutlierTag>,
    pub clean_label: Label,
    pub emitted_label: Label,
}

impl ExampleMeta {
    pub fn is_outlier(&self) -> bool {
        self.outlier.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryMeta {
    pub relevant_idx: usize,
    pub irrelevant_idx: usize,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub matrix: Matrix,
    pub meta: Vec<ExampleMeta>,
    pub query: QueryMeta,
    pub z: Label,
    pub task: Task,
}

impl Prompt {
    /// Number of context examples.
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    /// Ambient input dimension `d` (the matrix has `d + 1` rows).
    pub fn dim(&self) -> usize {
        self.matrix.rows() - 1
    }

    /// Column `i` of the prompt matrix; `i = len()` is the query.
    pub fn column(&self, i: usize) -> Vector {
        self.matrix.column(i)
    }

    pub fn query_column(&self) -> Vector {
        self.matrix.column(self.len())
    }

    /// Context labels `y_1..y_l` as read from the matrix.
    pub fn labels(&self) -> Vec<f64> {
        self.matrix.row(self.dim())[..self.len()].to_vec()
    }

    pub fn outlier_flags(&self) -> Vec<bool> {
        self.meta.iter().map(ExampleMeta::is_outlier).collect()
    }

    pub fn outlier_count(&self) -> usize {
        self.meta.iter().filter(|m| m.is_outlier()).count()
    }
}

/// How labels are assigned to outlier-bearing test examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Keep the clean label.
    Clean,
    /// (A) Negate the clean label.
    Flip,
    /// (B) Always emit the given label.
    Targeted(Label),
    /// (C) Uniform over {+1, −1}.
    Random,
}

impl LabelRule {
    fn apply(self, clean: Label, rng: &mut RngStream) -> Label {
        match self {
            LabelRule::Clean => clean,
            LabelRule::Flip => clean.flipped(),
            LabelRule::Targeted(t) => t,
            LabelRule::Random => Label::random(rng),
        }
    }
}

/// Where outlier-bearing examples are placed among the context positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arrangement {
    /// All outliers at the lowest indices, farthest from the query.
    #[serde(rename = "FQ")]
    FarthestFromQuery,
    /// All outliers immediately before the query.
    #[serde(rename = "CQ")]
    ClosestToQuery,
    /// Uniformly random permutation.
    #[serde(rename = "R")]
    Random,
}

impl Arrangement {
    pub const ALL: [Arrangement; 3] = [
        Arrangement::FarthestFromQuery,
        Arrangement::Random,
        Arrangement::ClosestToQuery,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Arrangement::FarthestFromQuery => "FQ",
            Arrangement::ClosestToQuery => "CQ",
            Arrangement::Random => "R",
        }
    }
}

/// Training prompt distribution parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainPromptConfig {
    /// Context examples per prompt.
    pub l: usize,
    /// Probability that a context example carries an outlier.
    pub p_a: f64,
    /// Half-width of the irrelevant-pattern coefficient, `κ ~ U(−K, K)`.
    pub k: f64,
    /// Outlier magnitude.
    pub kappa_a: f64,
}

impl TrainPromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            return Err(Error::config("l_tr", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.p_a) {
            return Err(Error::config(
                "p_a",
                format!("must lie in [0, 1), got {}", self.p_a),
            ));
        }
        if !(self.k > 0.0 && self.k <= 0.5) {
            return Err(Error::config(
                "k",
                format!("must lie in (0, 1/2], got {}", self.k),
            ));
        }
        if !(self.kappa_a > 0.0 && self.kappa_a.is_finite()) {
            return Err(Error::config(
                "kappa_a",
                format!("must be positive, got {}", self.kappa_a),
            ));
        }
        Ok(())
    }
}

/// Testing prompt distribution parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPromptConfig {
    pub l: usize,
    /// Probability that a context example carries a test outlier.
    pub alpha: f64,
    /// Half-width of `κ' ~ U(−K', K')`.
    pub k: f64,
    pub kappa_a: f64,
    pub rule: LabelRule,
    /// Corrupt exactly `⌊α l⌋` uniformly chosen positions instead of
    /// flipping an α-coin per example.
    pub exact_alpha: bool,
}

impl TestPromptConfig {
    pub fn validate(&self, n_outliers: usize) -> Result<()> {
        if self.l == 0 {
            return Err(Error::config("l_ts", "must be at least 1"));
        }
        // α = 1 is a valid probability for the sampler; experiment configs
        // restrict it further.
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(
                "alpha",
                format!("must lie in [0, 1], got {}", self.alpha),
            ));
        }
        if !(self.k > 1.0 && self.k.is_finite()) {
            return Err(Error::config(
                "k_prime",
                format!("must exceed 1, got {}", self.k),
            ));
        }
        if !(self.kappa_a > 0.0 && self.kappa_a.is_finite()) {
            return Err(Error::config(
                "kappa_a_prime",
                format!("must be positive, got {}", self.kappa_a),
            ));
        }
        if self.alpha > 0.0 && n_outliers == 0 {
            return Err(Error::config(
                "test_outliers",
                "must be nonempty when alpha > 0",
            ));
        }
        Ok(())
    }
}

/// `x = mu[relevant] + kappa · nu[irrelevant] (+ magnitude · direction)`.
pub fn compose_input(
    bank: &PatternBank,
    relevant: usize,
    irrelevant: usize,
    kappa: f64,
    outlier: Option<(&Vector, f64)>,
) -> Vector {
    let mut x = bank.mu[relevant].clone();
    x.axpy(kappa, &bank.nu[irrelevant]);
    if let Some((dir, mag)) = outlier {
        x.axpy(mag, dir);
    }
    x
}

struct Draw {
    relevant: usize,
    irrelevant: usize,
    kappa: f64,
    clean_label: Label,
}

fn draw_clean_parts(
    bank: &PatternBank,
    task: Task,
    k: f64,
    label: Option<Label>,
    rng: &mut RngStream,
) -> Draw {
    let clean_label = label.unwrap_or_else(|| Label::random(rng));
    let relevant = match clean_label {
        Label::Plus => task.plus,
        Label::Minus => task.minus,
    };
    let irrelevant = rng.below(bank.m2());
    let kappa = rng.uniform_range(-k, k);
    Draw {
        relevant,
        irrelevant,
        kappa,
        clean_label,
    }
}

/// One training context input: the relevant pattern is `task.plus` or
/// `task.minus` with equal probability; with probability `p_a` a uniformly
/// chosen training outlier is added and the emitted label is a fair coin.
pub fn sample_context_input(
    bank: &PatternBank,
    task: Task,
    cfg: &TrainPromptConfig,
    rng: &mut RngStream,
) -> Result<(Vector, ExampleMeta)> {
    cfg.validate()?;
    Ok(draw_training_example(bank, task, cfg, rng))
}

fn draw_training_example(
    bank: &PatternBank,
    task: Task,
    cfg: &TrainPromptConfig,
    rng: &mut RngStream,
) -> (Vector, ExampleMeta) {
    let parts = draw_clean_parts(bank, task, cfg.k, None, rng);
    let outlier = if rng.bernoulli(cfg.p_a) {
        Some(OutlierTag {
            index: rng.below(bank.v()),
            magnitude: cfg.kappa_a,
        })
    } else {
        None
    };
    let x = compose_input(
        bank,
        parts.relevant,
        parts.irrelevant,
        parts.kappa,
        outlier.map(|o| (&bank.vstar[o.index], o.magnitude)),
    );
    let emitted_label = if outlier.is_some() {
        Label::random(rng)
    } else {
        parts.clean_label
    };
    let meta = ExampleMeta {
        relevant_idx: parts.relevant,
        irrelevant_idx: parts.irrelevant,
        kappa: parts.kappa,
        outlier,
        clean_label: parts.clean_label,
        emitted_label,
    };
    (x, meta)
}

fn assemble(
    d: usize,
    examples: Vec<(Vector, ExampleMeta)>,
    query_x: Vector,
    query: QueryMeta,
    z: Label,
    task: Task,
) -> Prompt {
    let l = examples.len();
    let mut matrix = Matrix::zeros(d + 1, l + 1);
    for (i, (x, meta)) in examples.iter().enumerate() {
        for r in 0..d {
            matrix[(r, i)] = x[r];
        }
        matrix[(d, i)] = meta.emitted_label.value();
    }
    for r in 0..d {
        matrix[(r, l)] = query_x[r];
    }
    Prompt {
        matrix,
        meta: examples.into_iter().map(|(_, m)| m).collect(),
        query,
        z,
        task,
    }
}

fn draw_query(
    bank: &PatternBank,
    task: Task,
    k: f64,
    z: Option<Label>,
    rng: &mut RngStream,
) -> (Vector, QueryMeta, Label) {
    let parts = draw_clean_parts(bank, task, k, z, rng);
    let x = compose_input(bank, parts.relevant, parts.irrelevant, parts.kappa, None);
    let meta = QueryMeta {
        relevant_idx: parts.relevant,
        irrelevant_idx: parts.irrelevant,
        kappa: parts.kappa,
    };
    (x, meta, parts.clean_label)
}

/// A training prompt. `query_label` forces the query's label (used for
/// stratified batches); `None` draws it uniformly.
pub fn sample_training_prompt(
    bank: &PatternBank,
    task: Task,
    cfg: &TrainPromptConfig,
    query_label: Option<Label>,
    rng: &mut RngStream,
) -> Result<Prompt> {
    cfg.validate()?;
    let examples: Vec<_> = (0..cfg.l)
        .map(|_| draw_training_example(bank, task, cfg, rng))
        .collect();
    let (qx, qmeta, z) = draw_query(bank, task, cfg.k, query_label, rng);
    Ok(assemble(bank.d, examples, qx, qmeta, z, task))
}

/// A testing prompt: irrelevant coefficients from `U(−K', K')`, outliers
/// drawn uniformly from `test_outliers` with magnitude `κ'_a`, and their
/// labels produced by `cfg.rule`. The query is always clean.
pub fn sample_testing_prompt(
    bank: &PatternBank,
    task: Task,
    test_outliers: &[TestOutlier],
    cfg: &TestPromptConfig,
    rng: &mut RngStream,
) -> Result<Prompt> {
    cfg.validate(test_outliers.len())?;
    let l = cfg.l;
    let corrupted: Vec<bool> = if cfg.exact_alpha {
        let count = ((cfg.alpha * l as f64).floor() as usize).min(l);
        let mut flags: Vec<bool> = (0..l).map(|i| i < count).collect();
        rng.shuffle(&mut flags);
        flags
    } else {
        (0..l).map(|_| rng.bernoulli(cfg.alpha)).collect()
    };
    let examples: Vec<_> = corrupted
        .iter()
        .map(|&is_outlier| {
            let parts = draw_clean_parts(bank, task, cfg.k, None, rng);
            let outlier = is_outlier.then(|| OutlierTag {
                index: rng.below(test_outliers.len()),
                magnitude: cfg.kappa_a,
            });
            let x = compose_input(
                bank,
                parts.relevant,
                parts.irrelevant,
                parts.kappa,
                outlier.map(|o| (&test_outliers[o.index].direction, o.magnitude)),
            );
            let emitted_label = if outlier.is_some() {
                cfg.rule.apply(parts.clean_label, rng)
            } else {
                parts.clean_label
            };
            let meta = ExampleMeta {
                relevant_idx: parts.relevant,
                irrelevant_idx: parts.irrelevant,
                kappa: parts.kappa,
                outlier,
                clean_label: parts.clean_label,
                emitted_label,
            };
            (x, meta)
        })
        .collect();
    let (qx, qmeta, z) = draw_query(bank, task, cfg.k, None, rng);
    Ok(assemble(bank.d, examples, qx, qmeta, z, task))
}

/// Reorders context columns according to `policy`. Outliers and clean
/// examples keep their relative order under FQ and CQ; the query column
/// never moves.
pub fn arrange(prompt: &Prompt, policy: Arrangement, rng: &mut RngStream) -> Prompt {
    let l = prompt.len();
    let order: Vec<usize> = match policy {
        Arrangement::FarthestFromQuery | Arrangement::ClosestToQuery => {
            let (outliers, clean): (Vec<usize>, Vec<usize>) =
                (0..l).partition(|&i| prompt.meta[i].is_outlier());
            if policy == Arrangement::FarthestFromQuery {
                outliers.into_iter().chain(clean).collect()
            } else {
                clean.into_iter().chain(outliers).collect()
            }
        }
        Arrangement::Random => {
            let mut o: Vec<usize> = (0..l).collect();
            rng.shuffle(&mut o);
            o
        }
    };
    permute(prompt, &order)
}

/// New prompt whose context position `i` holds the old position `order[i]`.
pub fn permute(prompt: &Prompt, order: &[usize]) -> Prompt {
    let l = prompt.len();
    assert_eq!(order.len(), l, "permutation length mismatch");
    let rows = prompt.matrix.rows();
    let mut matrix = prompt.matrix.clone();
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..rows {
            matrix[(r, dst)] = prompt.matrix[(r, src)];
        }
    }
    Prompt {
        matrix,
        meta: order.iter().map(|&i| prompt.meta[i].clone()).collect(),
        query: prompt.query,
        z: prompt.z,
        task: prompt.task,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{
        build_pattern_bank, make_test_outlier, BankMode, BankShape, STANDARD_TEST_OUTLIERS,
    };

    fn bank() -> PatternBank {
        build_pattern_bank(
            BankShape::STANDARD,
            BankMode::Canonical,
            &mut RngStream::seeded(0),
        )
        .unwrap()
    }

    fn train_cfg(p_a: f64) -> TrainPromptConfig {
        TrainPromptConfig {
            l: 20,
            p_a,
            k: 0.5,
            kappa_a: 2.0,
        }
    }

    fn test_outliers(bank: &PatternBank) -> Vec<TestOutlier> {
        STANDARD_TEST_OUTLIERS
            .iter()
            .map(|c| make_test_outlier(bank, c, 0.3).unwrap())
            .collect()
    }

    fn test_cfg(alpha: f64, rule: LabelRule) -> TestPromptConfig {
        TestPromptConfig {
            l: 20,
            alpha,
            k: 1.5,
            kappa_a: 2.0,
            rule,
            exact_alpha: false,
        }
    }

    fn assert_well_formed(p: &Prompt, task: Task) {
        let d = p.dim();
        assert_eq!(p.matrix[(d, p.len())], 0.0);
        for (i, m) in p.meta.iter().enumerate() {
            assert_eq!(m.clean_label == Label::Plus, m.relevant_idx == task.plus);
            if !m.is_outlier() {
                assert_eq!(m.emitted_label, m.clean_label);
            }
            assert_eq!(p.matrix[(d, i)], m.emitted_label.value());
        }
        assert_eq!(p.z == Label::Plus, p.query.relevant_idx == task.plus);
    }

    #[test]
    fn label_values() {
        assert_eq!(Label::from_value(1.0).unwrap(), Label::Plus);
        assert_eq!(Label::from_value(-1.0).unwrap(), Label::Minus);
        assert!(matches!(Label::from_value(0.5), Err(Error::Label(_))));
    }

    #[test]
    fn compose_input_readout() {
        let b = bank();
        let x = compose_input(&b, 0, 0, 0.3, None);
        let mut expect = Vector::zeros(30);
        expect[0] = 3.0;
        expect[6] = 0.3 * 3.0;
        assert!(x.sub(&expect).max_abs() < 1e-15);
    }

    #[test]
    fn no_outliers_when_p_a_is_zero() {
        let b = bank();
        let mut rng = RngStream::seeded(1);
        for _ in 0..200 {
            let (_, m) =
                sample_context_input(&b, Task::new(0, 1), &train_cfg(0.0), &mut rng).unwrap();
            assert!(m.outlier.is_none());
            assert_eq!(m.emitted_label, m.clean_label);
        }
    }

    #[test]
    fn training_k_above_half_is_rejected() {
        let b = bank();
        let mut cfg = train_cfg(0.6);
        cfg.k = 0.6;
        let r = sample_context_input(&b, Task::new(0, 1), &cfg, &mut RngStream::seeded(0));
        assert!(matches!(r, Err(Error::Config { field: "k", .. })));
    }

    #[test]
    fn outlier_frequency_matches_p_a() {
        // 3σ of a Bernoulli(0.6) mean over 1e5 draws: 3·sqrt(0.24/1e5) ≈ 0.0046.
        let b = bank();
        let mut rng = RngStream::seeded(2);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                sample_context_input(&b, Task::new(2, 4), &train_cfg(0.6), &mut rng)
                    .unwrap()
                    .1
                    .is_outlier()
            })
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.6).abs() < 0.005, "freq {freq}");
    }

    #[test]
    fn training_prompts_are_well_formed_and_balanced() {
        let b = bank();
        let mut rng = RngStream::seeded(3);
        let task = Task::new(1, 3);
        let n = 10_000;
        let mut corrupted = 0usize;
        let mut plus = 0usize;
        for _ in 0..n {
            let p = sample_training_prompt(&b, task, &train_cfg(0.6), None, &mut rng).unwrap();
            assert_well_formed(&p, task);
            corrupted += p.outlier_count();
            plus += (p.z == Label::Plus) as usize;
        }
        // mean corrupted count: 12, 3σ = 3·sqrt(20·0.24/1e4) ≈ 0.066
        let mean = corrupted as f64 / n as f64;
        assert!((mean - 12.0).abs() < 0.15, "mean corrupted {mean}");
        let frac = plus as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.015, "plus fraction {frac}");
    }

    #[test]
    fn clean_training_prompts_never_corrupt_labels() {
        let b = bank();
        let mut rng = RngStream::seeded(4);
        for _ in 0..100 {
            let p = sample_training_prompt(
                &b,
                Task::new(0, 5),
                &train_cfg(0.0),
                Some(Label::Minus),
                &mut rng,
            )
            .unwrap();
            assert_eq!(p.z, Label::Minus);
            assert!(p.meta.iter().all(|m| m.emitted_label == m.clean_label));
        }
    }

    #[test]
    fn flip_rule_negates_every_outlier_label() {
        let b = bank();
        let outs = test_outliers(&b);
        let mut rng = RngStream::seeded(5);
        let p = sample_testing_prompt(
            &b,
            Task::new(0, 1),
            &outs,
            &test_cfg(1.0, LabelRule::Flip),
            &mut rng,
        )
        .unwrap();
        assert_eq!(p.outlier_count(), 20);
        assert!(p
            .meta
            .iter()
            .all(|m| m.emitted_label == m.clean_label.flipped()));
    }

    #[test]
    fn targeted_rule_and_alpha_zero() {
        let b = bank();
        let outs = test_outliers(&b);
        let mut rng = RngStream::seeded(6);
        let cfg = test_cfg(0.5, LabelRule::Targeted(Label::Plus));
        let p = sample_testing_prompt(&b, Task::new(3, 2), &outs, &cfg, &mut rng).unwrap();
        assert_well_formed(&p, Task::new(3, 2));
        assert!(p
            .meta
            .iter()
            .filter(|m| m.is_outlier())
            .all(|m| m.emitted_label == Label::Plus));

        let p0 = sample_testing_prompt(
            &b,
            Task::new(3, 2),
            &[],
            &test_cfg(0.0, LabelRule::Flip),
            &mut rng,
        )
        .unwrap();
        assert_eq!(p0.outlier_count(), 0);
    }

    #[test]
    fn testing_corruption_mean() {
        let b = bank();
        let outs = test_outliers(&b);
        let mut rng = RngStream::seeded(7);
        let n = 10_000;
        let total: usize = (0..n)
            .map(|_| {
                let p = sample_testing_prompt(
                    &b,
                    Task::new(4, 0),
                    &outs,
                    &test_cfg(0.5, LabelRule::Random),
                    &mut rng,
                )
                .unwrap();
                assert_well_formed(&p, Task::new(4, 0));
                p.outlier_count()
            })
            .sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 10.0).abs() < 0.15, "mean {mean}");
    }

    #[test]
    fn exact_alpha_fixes_the_count() {
        let b = bank();
        let outs = test_outliers(&b);
        let mut rng = RngStream::seeded(8);
        let mut cfg = test_cfg(0.5, LabelRule::Flip);
        cfg.exact_alpha = true;
        for _ in 0..20 {
            let p = sample_testing_prompt(&b, Task::new(0, 1), &outs, &cfg, &mut rng).unwrap();
            assert_eq!(p.outlier_count(), 10);
        }
    }

    #[test]
    fn testing_config_errors() {
        let b = bank();
        let mut rng = RngStream::seeded(9);
        let r = sample_testing_prompt(
            &b,
            Task::new(0, 1),
            &[],
            &test_cfg(0.3, LabelRule::Flip),
            &mut rng,
        );
        assert!(matches!(
            r,
            Err(Error::Config {
                field: "test_outliers",
                ..
            })
        ));
        let mut cfg = test_cfg(0.3, LabelRule::Flip);
        cfg.k = 1.0;
        let r = sample_testing_prompt(&b, Task::new(0, 1), &test_outliers(&b), &cfg, &mut rng);
        assert!(matches!(
            r,
            Err(Error::Config {
                field: "k_prime",
                ..
            })
        ));
    }

    fn prompt_with_flags(flags: &[bool]) -> Prompt {
        let b = bank();
        let outs = test_outliers(&b);
        let mut rng = RngStream::seeded(10);
        let mut cfg = test_cfg(0.0, LabelRule::Flip);
        cfg.l = flags.len();
        let mut p = sample_testing_prompt(&b, Task::new(0, 1), &outs, &cfg, &mut rng).unwrap();
        for (m, &f) in p.meta.iter_mut().zip(flags) {
            if f {
                m.outlier = Some(OutlierTag {
                    index: 0,
                    magnitude: 2.0,
                });
            }
        }
        p
    }

    #[test]
    fn farthest_and_closest_arrangements() {
        let p = prompt_with_flags(&[false, true, false, true]);
        let mut rng = RngStream::seeded(0);
        let fq = arrange(&p, Arrangement::FarthestFromQuery, &mut rng);
        assert_eq!(fq.outlier_flags(), vec![true, true, false, false]);
        let cq = arrange(&p, Arrangement::ClosestToQuery, &mut rng);
        assert_eq!(cq.outlier_flags(), vec![false, false, true, true]);
        // group-internal order preserved, columns carried along with meta
        assert_eq!(fq.column(0), p.column(1));
        assert_eq!(fq.column(1), p.column(3));
        assert_eq!(cq.column(0), p.column(0));
        assert_eq!(fq.query_column(), p.query_column());
    }

    #[test]
    fn random_arrangement_is_uniform() {
        // Tag each of four columns by a distinct kappa and count orderings.
        let mut p = prompt_with_flags(&[false; 4]);
        for (i, m) in p.meta.iter_mut().enumerate() {
            m.irrelevant_idx = i;
        }
        let mut rng = RngStream::seeded(11);
        let n = 10_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            let r = arrange(&p, Arrangement::Random, &mut rng);
            let key: Vec<usize> = r.meta.iter().map(|m| m.irrelevant_idx).collect();
            *counts.entry(key).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 24);
        let expect = n as f64 / 24.0;
        let sigma = (n as f64 * (1.0 / 24.0) * (23.0 / 24.0)).sqrt();
        for c in counts.values() {
            assert!((*c as f64 - expect).abs() < 3.0 * sigma, "count {c}");
        }
    }
}
