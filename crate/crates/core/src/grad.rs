//! Analytic hinge-loss gradients of the one-layer model and the
//! finite-difference harness that checks them.
//!
//! While the margin is violated (`zF < 1`):
//!
//! ```text
//! ∂ℓ/∂W_C = −z Σ_i G_i y_i W_B p_i p_queryᵀ
//! ∂ℓ/∂W_B = −z Σ_i G_i y_i W_C p_query p_iᵀ
//! ∂ℓ/∂w   =  z Σ_i y_i a_i G_i (Σ_{s=i+1}^{l+1} σ(w·p_s) p_s − (1 − σ(w·p_i)) p_i)
//! ```
//!
//! with `a_i = p_iᵀ W_Bᵀ W_C p_query`. Otherwise every block is zero, including
//! at the kink `zF = 1`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fd::{block_relative_error, central_diff};
use crate::linalg::{Matrix, Vector};
use crate::model::{self, ForwardTrace, MambaParams, ModelKind};
use crate::prompts::{Label, Prompt};

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub d_wb: Matrix,
    pub d_wc: Matrix,
    pub d_w: Vector,
    /// Whether the hinge margin was violated.
    pub active: bool,
    /// Forward output at the evaluation point.
    pub output: f64,
}

impl Gradients {
    pub fn zeros(width: usize, output: f64) -> Self {
        Self {
            d_wb: Matrix::zeros(width, width),
            d_wc: Matrix::zeros(width, width),
            d_w: Vector::zeros(width),
            active: false,
            output,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_wb.is_finite() && self.d_wc.is_finite() && self.d_w.is_finite()
    }
}

/// Weighted sum `Σ_i c_i p_i` over context columns, `c_i = G_i y_i`.
fn weighted_context(prompt: &Prompt, tr: &ForwardTrace) -> Vector {
    let l = prompt.len();
    let coeffs = Vector::from_fn(l + 1, |i| {
        if i < l {
            tr.gates[i] * tr.labels[i]
        } else {
            0.0
        }
    });
    prompt.matrix.matvec(&coeffs)
}

fn active(tr: &ForwardTrace, z: Label) -> bool {
    z.value() * tr.output < 1.0
}

fn wc_block(params: &MambaParams, prompt: &Prompt, tr: &ForwardTrace, z: Label) -> Matrix {
    // Σ_i c_i W_B p_i p_qᵀ = W_B (Σ_i c_i p_i) p_qᵀ
    let u = params.w_b.matvec(&weighted_context(prompt, tr));
    Matrix::outer(&u.scaled(-z.value()), &prompt.query_column())
}

fn wb_block(prompt: &Prompt, tr: &ForwardTrace, z: Label) -> Matrix {
    Matrix::outer(
        &tr.projected_query.scaled(-z.value()),
        &weighted_context(prompt, tr),
    )
}

fn w_block(prompt: &Prompt, tr: &ForwardTrace, z: Label) -> Vector {
    // Collect the coefficient of each column p_s over the double sum:
    // p_s gets σ_s Σ_{i<s} y_i a_i G_i from the inner sums and
    // −(1 − σ_s) y_s a_s G_s from its own term.
    let l = prompt.len();
    let mut coeffs = vec![0.0; l + 1];
    let mut prefix = 0.0;
    for s in 0..=l {
        coeffs[s] = tr.sigmas[s] * prefix;
        if s < l {
            let t = tr.labels[s] * tr.scores[s] * tr.gates[s];
            coeffs[s] -= (1.0 - tr.sigmas[s]) * t;
            prefix += t;
        }
    }
    prompt
        .matrix
        .matvec(&Vector::from_vec_unchecked(coeffs))
        .scaled(z.value())
}

/// `∂ℓ/∂W_C` for the gated model.
pub fn grad_wc(params: &MambaParams, prompt: &Prompt, z: Label) -> Matrix {
    let tr = model::trace(ModelKind::Mamba, params, prompt);
    if !active(&tr, z) {
        return Matrix::zeros(params.width(), params.width());
    }
    wc_block(params, prompt, &tr, z)
}

/// `∂ℓ/∂W_B` for the gated model.
pub fn grad_wb(params: &MambaParams, prompt: &Prompt, z: Label) -> Matrix {
    let tr = model::trace(ModelKind::Mamba, params, prompt);
    if !active(&tr, z) {
        return Matrix::zeros(params.width(), params.width());
    }
    wb_block(prompt, &tr, z)
}

/// `∂ℓ/∂w` for the gated model.
pub fn grad_w(params: &MambaParams, prompt: &Prompt, z: Label) -> Vector {
    let tr = model::trace(ModelKind::Mamba, params, prompt);
    if !active(&tr, z) {
        return Vector::zeros(params.width());
    }
    w_block(prompt, &tr, z)
}

/// All three blocks from one forward. For the linear Transformer the gates
/// are 1 and `∂ℓ/∂w` is identically zero.
pub fn grad_all(kind: ModelKind, params: &MambaParams, prompt: &Prompt, z: Label) -> Gradients {
    let tr = model::trace(kind, params, prompt);
    if !active(&tr, z) {
        return Gradients::zeros(params.width(), tr.output);
    }
    let d_w = match kind {
        ModelKind::Mamba => w_block(prompt, &tr, z),
        ModelKind::LinearTransformer => Vector::zeros(params.width()),
    };
    Gradients {
        d_wb: wb_block(prompt, &tr, z),
        d_wc: wc_block(params, prompt, &tr, z),
        d_w,
        active: true,
        output: tr.output,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// Too close to the hinge kink for central differences to be meaningful.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub rel_err_wb: f64,
    pub rel_err_wc: f64,
    pub rel_err_w: f64,
    pub verdict: Verdict,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err_wb.max(self.rel_err_wc).max(self.rel_err_w)
    }
}

/// Tolerance paired with a finite-difference step: central differences have
/// `O(h²)` truncation and `O(ε/h)` roundoff error.
pub fn default_tolerance(h: f64) -> f64 {
    if h <= 1e-5 {
        1e-6
    } else if h <= 1e-4 {
        1e-5
    } else {
        1e-3
    }
}

fn loss_at(kind: ModelKind, params: &MambaParams, prompt: &Prompt, z: Label) -> f64 {
    model::hinge_loss(model::forward(kind, params, prompt), z)
}

fn flat(m: &Matrix) -> Vector {
    Vector::from_vec_unchecked(m.as_slice().to_vec())
}

fn unflat(v: &Vector, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, v.as_slice().to_vec()).expect("shape preserved")
}

/// Compares `grad` (normally [`grad_all`]'s output) against central
/// differences of the hinge loss, block by block.
pub fn check_gradients(
    kind: ModelKind,
    params: &MambaParams,
    prompt: &Prompt,
    z: Label,
    grad: &Gradients,
    h: f64,
    tol: f64,
) -> Result<GradCheck> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::config(
            "h",
            format!("must lie in [1e-7, 1e-3], got {h}"),
        ));
    }
    let margin = z.value() * model::forward(kind, params, prompt);
    if (margin - 1.0).abs() < 10.0 * h * margin_scale(params, prompt) {
        return Ok(GradCheck {
            rel_err_wb: 0.0,
            rel_err_wc: 0.0,
            rel_err_w: 0.0,
            verdict: Verdict::Skip,
        });
    }
    let n = params.width();
    let num_wb = central_diff(
        |x| {
            let mut p = params.clone();
            p.w_b = unflat(x, n, n);
            loss_at(kind, &p, prompt, z)
        },
        &flat(&params.w_b),
        h,
    )?;
    let num_wc = central_diff(
        |x| {
            let mut p = params.clone();
            p.w_c = unflat(x, n, n);
            loss_at(kind, &p, prompt, z)
        },
        &flat(&params.w_c),
        h,
    )?;
    let num_w = central_diff(
        |x| {
            let mut p = params.clone();
            p.w = x.clone();
            loss_at(kind, &p, prompt, z)
        },
        &params.w,
        h,
    )?;
    let rel_err_wb = block_relative_error(grad.d_wb.as_slice(), num_wb.as_slice());
    let rel_err_wc = block_relative_error(grad.d_wc.as_slice(), num_wc.as_slice());
    let rel_err_w = block_relative_error(grad.d_w.as_slice(), num_w.as_slice());
    let verdict = if rel_err_wb < tol && rel_err_wc < tol && rel_err_w < tol {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(GradCheck {
        rel_err_wb,
        rel_err_wc,
        rel_err_w,
        verdict,
    })
}

/// `check_gradients` against the module's own analytic gradients.
pub fn check_grads(
    kind: ModelKind,
    params: &MambaParams,
    prompt: &Prompt,
    z: Label,
    h: f64,
    tol: f64,
) -> Result<GradCheck> {
    let grad = grad_all(kind, params, prompt, z);
    check_gradients(kind, params, prompt, z, &grad, h, tol)
}

/// Rough bound on how much one `h`-step in any parameter can move `F`,
/// used to decide when a perturbation may cross the kink.
fn margin_scale(params: &MambaParams, prompt: &Prompt) -> f64 {
    let col = prompt.matrix.max_abs().max(1.0);
    let w = params.w_b.max_abs().max(params.w_c.max_abs()).max(1.0);
    (col * col * w * prompt.len() as f64).max(1.0)
}
