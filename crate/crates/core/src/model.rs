//! One-layer forwards: the gated closed form, the underlying selective-scan
//! recurrence, the ungated linear-Transformer reduction, and the hinge loss.
//!
//! With prompt columns `p_1..p_l, p_query`, the closed form output is
//!
//! ```text
//! F = Σ_i G_i · y_i · p_iᵀ W_Bᵀ W_C p_query
//! G_i = σ(w·p_i) · Π_{j>i} (1 − σ(w·p_j))      (i ≤ l; the product runs through the query)
//! G_{l+1} = σ(w·p_query)
//! ```
//!
//! The query term never contributes since its label slot is 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::prompts::{Label, Prompt};

/// Above this many context examples the gate products are accumulated in
/// log space.
pub const LOG_SPACE_THRESHOLD: usize = 32;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Linear attention composed with sigmoid-product gating.
    Mamba,
    /// The same linear attention with every gate fixed to 1.
    LinearTransformer,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mamba => "mamba",
            ModelKind::LinearTransformer => "linear_transformer",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mamba" => Ok(ModelKind::Mamba),
            "linear_transformer" | "lt" => Ok(ModelKind::LinearTransformer),
            other => Err(format!(
                "unknown model kind `{other}` (expected mamba | linear_transformer)"
            )),
        }
    }
}

/// Trainable parameters of the one-layer model. `w_b` and `w_c` are square
/// `(d+1) × (d+1)`; only `W_Bᵀ W_C` enters the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MambaParams {
    pub w_b: Matrix,
    pub w_c: Matrix,
    pub w: Vector,
}

impl MambaParams {
    pub fn new(w_b: Matrix, w_c: Matrix, w: Vector) -> Result<Self> {
        let n = w.len();
        if w_b.shape() != (n, n) || w_c.shape() != (n, n) {
            return Err(Error::Degenerate(format!(
                "parameter shapes disagree: W_B {:?}, W_C {:?}, w {}",
                w_b.shape(),
                w_c.shape(),
                n
            )));
        }
        if !(w_b.is_finite() && w_c.is_finite() && w.is_finite()) {
            return Err(Error::Numeric("MambaParams".into()));
        }
        Ok(Self { w_b, w_c, w })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            w_b: Matrix::zeros(d + 1, d + 1),
            w_c: Matrix::zeros(d + 1, d + 1),
            w: Vector::zeros(d + 1),
        }
    }

    /// Row/column count `d + 1`.
    pub fn width(&self) -> usize {
        self.w.len()
    }

    pub fn is_finite(&self) -> bool {
        self.w_b.is_finite() && self.w_c.is_finite() && self.w.is_finite()
    }
}

/// Gates `G_1..G_{l+1}` for gate vector `w`.
pub fn gating_vector(w: &Vector, prompt: &Prompt) -> Vector {
    let pre = prompt.matrix.t_matvec(w);
    gates_from_preactivations(pre.as_slice())
}

/// Gates from `w·p_i`, `i = 1..l+1`. Also used per coordinate by the deep
/// model, so it works on plain slices.
pub(crate) fn gates_from_preactivations(pre: &[f64]) -> Vector {
    let m = pre.len();
    let mut g = vec![0.0; m];
    if m - 1 > LOG_SPACE_THRESHOLD {
        // log G_i = log σ(z_i) + Σ_{j>i} log(1 − σ(z_j)), with log(1−σ(z)) = −softplus(z)
        let mut tail = 0.0;
        for i in (0..m).rev() {
            g[i] = (-softplus(-pre[i]) + tail).exp();
            tail -= softplus(pre[i]);
        }
    } else {
        let mut tail = 1.0;
        for i in (0..m).rev() {
            let s = sigmoid(pre[i]);
            g[i] = s * tail;
            tail *= 1.0 - s;
        }
    }
    Vector::from_vec_unchecked(g)
}

/// Everything the forward computes that the gradients reuse.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `W_Bᵀ W_C p_query`
    pub key_query: Vector,
    /// `W_C p_query`
    pub projected_query: Vector,
    /// Attention scores `p_iᵀ W_Bᵀ W_C p_query` for all `l + 1` columns.
    pub scores: Vector,
    /// `σ(w·p_i)` for all columns (all ones-free: filled even for the
    /// linear Transformer, where they are unused).
    pub sigmas: Vector,
    /// Gates, or all ones for the linear Transformer.
    pub gates: Vector,
    /// Context labels.
    pub labels: Vec<f64>,
    pub output: f64,
}

pub fn trace(kind: ModelKind, params: &MambaParams, prompt: &Prompt) -> ForwardTrace {
    let l = prompt.len();
    let q = prompt.query_column();
    let projected_query = params.w_c.matvec(&q);
    let key_query = params.w_b.t_matvec(&projected_query);
    let scores = prompt.matrix.t_matvec(&key_query);
    let pre = prompt.matrix.t_matvec(&params.w);
    let sigmas = Vector::from_fn(l + 1, |i| sigmoid(pre[i]));
    let gates = match kind {
        ModelKind::Mamba => gates_from_preactivations(pre.as_slice()),
        ModelKind::LinearTransformer => Vector::from_fn(l + 1, |_| 1.0),
    };
    let labels = prompt.labels();
    let output = (0..l).map(|i| gates[i] * labels[i] * scores[i]).sum();
    ForwardTrace {
        key_query,
        projected_query,
        scores,
        sigmas,
        gates,
        labels,
        output,
    }
}

pub fn forward(kind: ModelKind, params: &MambaParams, prompt: &Prompt) -> f64 {
    let l = prompt.len();
    let q = prompt.query_column();
    let key_query = params.w_b.t_matvec(&params.w_c.matvec(&q));
    let scores = prompt.matrix.t_matvec(&key_query);
    let labels = prompt.matrix.row(prompt.dim());
    match kind {
        ModelKind::Mamba => {
            let gates = gating_vector(&params.w, prompt);
            (0..l).map(|i| gates[i] * labels[i] * scores[i]).sum()
        }
        ModelKind::LinearTransformer => (0..l).map(|i| labels[i] * scores[i]).sum(),
    }
}

/// Gated closed-form output `F(Ψ; P)`.
pub fn forward_mamba(params: &MambaParams, prompt: &Prompt) -> f64 {
    forward(ModelKind::Mamba, params, prompt)
}

/// Ungated output `Σ_i y_i p_iᵀ W_Bᵀ W_C p_query`.
pub fn forward_linear_transformer(params: &MambaParams, prompt: &Prompt) -> f64 {
    forward(ModelKind::LinearTransformer, params, prompt)
}

/// Per-position outputs of the explicit recurrence.
#[derive(Debug, Clone)]
pub struct RecurrenceOutput {
    /// `o_1..o_{l+1}`, each of length `d + 1`.
    pub outputs: Vec<Vector>,
    /// Readout `e_{d+1}ᵀ o_{l+1}`.
    pub output: f64,
}

/// Runs the selective-scan recurrence with `A = −I`:
///
/// ```text
/// Δ_{c,i} = softplus(w_c·u_i),  exp(−Δ) = 1 − σ(w_c·u_i)
/// h_i = diag(1 − σ(W_gate u_i)) h_{i−1} + (u_i ⊙ σ(W_gate u_i)) (W_B u_i)ᵀ
/// o_i = h_i W_C u_i
/// ```
///
/// Row `c` of `w_gate` is the gate vector of output coordinate `c`. The state
/// starts at zero: the closed form has no term for an initial state.
pub fn forward_recurrence(
    w_b: &Matrix,
    w_c: &Matrix,
    w_gate: &Matrix,
    prompt: &Prompt,
) -> RecurrenceOutput {
    let d0 = prompt.matrix.rows();
    let state_dim = w_b.rows();
    assert_eq!(w_b.cols(), d0, "W_B must have d+1 columns");
    assert_eq!(w_c.shape(), (state_dim, d0), "W_C shape must match W_B");
    assert_eq!(w_gate.shape(), (d0, d0), "W_gate must be (d+1)x(d+1)");

    let mut h = Matrix::zeros(d0, state_dim);
    let mut outputs = Vec::with_capacity(prompt.len() + 1);
    for i in 0..=prompt.len() {
        let u = prompt.column(i);
        let pre = w_gate.matvec(&u);
        // Δ = softplus(pre); the zero-order-hold discretization of A = −I gives
        // exp(−Δ) = 1 − σ(pre) for the decay and (1 − exp(−Δ)) = σ(pre) for the
        // input gate.
        let decay = Vector::from_fn(d0, |c| (-softplus(pre[c])).exp());
        let input_gate = Vector::from_fn(d0, |c| 1.0 - decay[c]);
        let b = w_b.matvec(&u);
        for c in 0..d0 {
            let row = h.row_mut(c);
            let a = u[c] * input_gate[c];
            for (hv, bv) in row.iter_mut().zip(b.iter()) {
                *hv = decay[c] * *hv + a * bv;
            }
        }
        let readout = w_c.matvec(&u);
        outputs.push(h.matvec(&readout));
    }
    let output = outputs.last().expect("at least the query")[d0 - 1];
    RecurrenceOutput { outputs, output }
}

/// `max(0, 1 − zF)`
pub fn hinge_loss(output: f64, z: Label) -> f64 {
    (1.0 - z.value() * output).max(0.0)
}

/// Hinge loss with a raw ±1 label.
pub fn hinge_loss_raw(output: f64, z: f64) -> Result<f64> {
    Ok(hinge_loss(output, Label::from_value(z)?))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    pub use crate::oracle::{prompt_from_columns, random_instance};

    /// d = 1, l = 1: p_1 = (1, 1), p_query = (1, 0).
    pub fn identity_case() -> (MambaParams, Prompt) {
        let params = MambaParams {
            w_b: Matrix::identity(2),
            w_c: Matrix::identity(2),
            w: Vector::zeros(2),
        };
        (
            params,
            prompt_from_columns(&[vec![1.0, 1.0], vec![1.0, 0.0]]),
        )
    }
}
