//! The orthogonal pattern system and the binary task sets built on it.
//!
//! Indices are zero-based throughout: relevant pattern `j` is `mu[j]`, and a
//! [`Task`] `(a, b)` labels inputs containing `mu[a]` as `+1` and `mu[b]` as
//! `−1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orthonormal_columns, Vector};
use crate::rng::{gaussian_matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankMode {
    /// Scaled standard-basis vectors.
    Canonical,
    /// The canonical directions under one random rotation.
    Rotated,
}

/// Dimensions of a pattern bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankShape {
    pub d: usize,
    pub m1: usize,
    pub m2: usize,
    pub v: usize,
    pub beta: f64,
}

impl BankShape {
    /// d = 30, M1 = 6, M2 = 10, V = 3, β = 3.
    pub const STANDARD: BankShape = BankShape {
        d: 30,
        m1: 6,
        m2: 10,
        v: 3,
        beta: 3.0,
    };
}

/// Relevant patterns `mu` (norm β), irrelevant patterns `nu` (norm β) and
/// training outlier directions `vstar` (unit norm), all mutually orthogonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternBank {
    pub d: usize,
    pub beta: f64,
    pub mu: Vec<Vector>,
    pub nu: Vec<Vector>,
    pub vstar: Vec<Vector>,
}

pub fn build_pattern_bank(
    shape: BankShape,
    mode: BankMode,
    rng: &mut RngStream,
) -> Result<PatternBank> {
    let BankShape { d, m1, m2, v, beta } = shape;
    let total = m1 + m2 + v;
    if total > d {
        return Err(Error::Capacity(format!(
            "M1 + M2 + V = {total} directions do not fit in dimension d = {d}"
        )));
    }
    if !(beta >= 1.0 && beta.is_finite()) {
        return Err(Error::config("beta", format!("must be >= 1, got {beta}")));
    }
    if m1 < 2 {
        return Err(Error::Capacity(format!(
            "need at least 2 relevant patterns, got {m1}"
        )));
    }
    if m2 == 0 {
        return Err(Error::Capacity("need at least 1 irrelevant pattern".into()));
    }

    let directions: Vec<Vector> = match mode {
        BankMode::Canonical => (0..total).map(|i| Vector::basis(d, i)).collect(),
        BankMode::Rotated => {
            let g = gaussian_matrix(d, d, 1.0, rng)?;
            orthonormal_columns(&g).into_iter().take(total).collect()
        }
    };
    let mu = directions[..m1].iter().map(|u| u.scaled(beta)).collect();
    let nu = directions[m1..m1 + m2]
        .iter()
        .map(|u| u.scaled(beta))
        .collect();
    let vstar = directions[m1 + m2..].to_vec();
    Ok(PatternBank {
        d,
        beta,
        mu,
        nu,
        vstar,
    })
}

impl PatternBank {
    pub fn m1(&self) -> usize {
        self.mu.len()
    }

    pub fn m2(&self) -> usize {
        self.nu.len()
    }

    pub fn v(&self) -> usize {
        self.vstar.len()
    }

    /// All directions in bank order: `mu`, then `nu`, then `vstar`.
    pub fn directions(&self) -> impl Iterator<Item = &Vector> {
        self.mu.iter().chain(&self.nu).chain(&self.vstar)
    }

    /// Gram matrix of [`Self::directions`], row-major.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let dirs: Vec<&Vector> = self.directions().collect();
        dirs.iter()
            .map(|a| dirs.iter().map(|b| a.dot(b)).collect())
            .collect()
    }
}

/// A binary task: `mu[plus]` ↦ +1, `mu[minus]` ↦ −1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Task {
    pub plus: usize,
    pub minus: usize,
}

impl Task {
    pub fn new(plus: usize, minus: usize) -> Self {
        assert_ne!(plus, minus, "a task needs two distinct relevant patterns");
        Self { plus, minus }
    }
}

fn require_two(m1: usize) -> Result<()> {
    if m1 < 2 {
        return Err(Error::Capacity(format!(
            "need at least 2 relevant patterns for a task, got {m1}"
        )));
    }
    Ok(())
}

/// Every ordered pair of distinct relevant patterns.
pub fn full_task_set(m1: usize) -> Result<Vec<Task>> {
    require_two(m1)?;
    Ok((0..m1)
        .flat_map(|a| {
            (0..m1)
                .filter(move |&b| b != a)
                .map(move |b| Task::new(a, b))
        })
        .collect())
}

/// The cyclic training set `(0,1), (1,2), …, (M1−1, 0)`: each relevant
/// pattern is mapped to each label by exactly one task.
pub fn training_task_set(m1: usize) -> Result<Vec<Task>> {
    require_two(m1)?;
    Ok((0..m1).map(|i| Task::new(i, (i + 1) % m1)).collect())
}

/// Tasks in `full_task_set(m1)` that are not in `training_task_set(m1)`.
pub fn unseen_task_set(m1: usize) -> Result<Vec<Task>> {
    let train = training_task_set(m1)?;
    Ok(full_task_set(m1)?
        .into_iter()
        .filter(|t| !train.contains(t))
        .collect())
}

/// A unit-norm test outlier `Σ λ_i v*_i` with its (rescaled) coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct TestOutlier {
    pub direction: Vector,
    pub coeffs: Vec<f64>,
}

pub fn make_test_outlier(bank: &PatternBank, coeffs: &[f64], min_sum: f64) -> Result<TestOutlier> {
    if coeffs.len() != bank.v() {
        return Err(Error::config(
            "outlier_coeffs",
            format!("expected {} coefficients, got {}", bank.v(), coeffs.len()),
        ));
    }
    // The training directions are orthonormal, so the combination's norm is
    // the Euclidean norm of the coefficients.
    let norm = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate(
            "outlier coefficients are all zero".into(),
        ));
    }
    let scaled: Vec<f64> = coeffs.iter().map(|c| c / norm).collect();
    let sum: f64 = scaled.iter().sum();
    if sum < min_sum {
        return Err(Error::Membership { sum, min_sum });
    }
    let mut direction = Vector::zeros(bank.d);
    for (c, v) in scaled.iter().zip(&bank.vstar) {
        direction.axpy(*c, v);
    }
    Ok(TestOutlier {
        direction,
        coeffs: scaled,
    })
}

/// Coefficients of the three unseen test outliers of the standard experiments.
pub const STANDARD_TEST_OUTLIERS: [[f64; 3]; 3] =
    [[0.7, 0.6, -0.4], [0.4, 0.7, -0.6], [-0.7, 0.5, 0.5]];
