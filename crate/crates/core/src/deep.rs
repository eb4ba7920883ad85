//! Stacked gated layers.
//!
//! Layer `ℓ` maps a `(d+1) × (l+1)` sequence `U` to a sequence `O` of the
//! same shape, position by position:
//!
//! ```text
//! S[k, i]    = (W_B u_k) · (W_C u_i)
//! O[c, i]    = Σ_{k≤i} G[c, k, i] · U[c, k] · S[k, i]
//! G[c, k, i] = σ(g_c·u_k) · Π_{k<j≤i} (1 − σ(g_c·u_j))
//! ```
//!
//! where `g_c` is row `c` of the layer's `W_gate`; this is the selective
//! recurrence unrolled, with one gate per coordinate. The first layer reads
//! the prompt, every later layer reads the previous layer's outputs at all
//! positions. There is no normalization. With [`Stacking::Plain`] a layer
//! passes on `O` alone; with [`Stacking::Residual`] it passes on `U + O`.
//! The model output is the label coordinate of the last layer at the query
//! position. Since the query's label entry is 0, both wirings reduce to the
//! one-layer model for a single layer.
//! The linear-Transformer variant fixes `G ≡ 1`. With one layer this is
//! exactly the one-layer model with `w` as the label row of `W_gate`.
//!
//! Gradients come from the reverse-mode [`Tape`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::{ridders_diff, RIDDERS_MIN_STEP};
use crate::grad::{GradCheck, Verdict};
use crate::linalg::{Matrix, Vector};
use crate::model::{hinge_loss, MambaParams, ModelKind};
use crate::patterns::{PatternBank, Task};
use crate::probes::Predictor;
use crate::prompts::{Label, Prompt};
use crate::rng::RngStream;
use crate::tape::{causal_gates, causal_mix, Tape};
use crate::train::{
    init_projection, run_sgd, summarize, StepStats, TrainConfig, TrainOutcome, TAG_INIT,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w_b: Matrix,
    pub w_c: Matrix,
    pub w_gate: Matrix,
}

impl LayerParams {
    pub fn zeros(width: usize) -> Self {
        Self {
            w_b: Matrix::zeros(width, width),
            w_c: Matrix::zeros(width, width),
            w_gate: Matrix::zeros(width, width),
        }
    }

    /// The one-layer parameters with `w` copied into every row of `W_gate`.
    pub fn from_one_layer(params: &MambaParams) -> Self {
        let n = params.width();
        Self {
            w_b: params.w_b.clone(),
            w_c: params.w_c.clone(),
            w_gate: Matrix::from_fn(n, n, |_, c| params.w[c]),
        }
    }

    fn axpy(&mut self, s: f64, other: &LayerParams) {
        self.w_b.axpy(s, &other.w_b);
        self.w_c.axpy(s, &other.w_c);
        self.w_gate.axpy(s, &other.w_gate);
    }

    fn is_finite(&self) -> bool {
        self.w_b.is_finite() && self.w_c.is_finite() && self.w_gate.is_finite()
    }
}

/// How consecutive layers are wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stacking {
    /// Layer `ℓ+1` reads layer `ℓ`'s output.
    #[default]
    Plain,
    /// Layer `ℓ+1` reads layer `ℓ`'s input plus its output.
    Residual,
}

impl Stacking {
    pub fn name(self) -> &'static str {
        match self {
            Stacking::Plain => "plain",
            Stacking::Residual => "residual",
        }
    }
}

impl std::str::FromStr for Stacking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Stacking::Plain),
            "residual" => Ok(Stacking::Residual),
            _ => Err(Error::config(
                "stacking",
                format!("expected plain or residual, got {s:?}"),
            )),
        }
    }
}

/// Depth and wiring of a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub n_layers: usize,
    #[serde(default)]
    pub stacking: Stacking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepParams {
    pub layers: Vec<LayerParams>,
    pub stacking: Stacking,
}

impl DeepParams {
    pub fn new(layers: Vec<LayerParams>, stacking: Stacking) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::config("n_layers", "must be at least 1"));
        };
        let n = first.w_b.rows();
        for layer in &layers {
            for m in [&layer.w_b, &layer.w_c, &layer.w_gate] {
                if m.shape() != (n, n) {
                    return Err(Error::Degenerate(format!(
                        "layer matrices must all be {n}x{n}, got {:?}",
                        m.shape()
                    )));
                }
            }
            if !layer.is_finite() {
                return Err(Error::Numeric("layer parameters".into()));
            }
        }
        Ok(Self { layers, stacking })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.layers[0].w_b.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(LayerParams::is_finite)
    }
}

/// `W_B = W_C = δ · diag(1, …, 1, 0)` in every layer and i.i.d.
/// `N(0, 1/(d+1))` gate rows. Layer 0 draws its label row first from `rng`
/// itself, so a one-layer stack starts where the one-layer trainer does;
/// its other rows follow, and layer `ℓ > 0` draws from `rng.split(ℓ)`.
pub fn init_deep_params(
    d: usize,
    arch: Architecture,
    delta: f64,
    rng: &RngStream,
) -> Result<DeepParams> {
    let n_layers = arch.n_layers;
    if n_layers == 0 {
        return Err(Error::config("n_layers", "must be at least 1"));
    }
    if !(delta > 0.0 && delta <= 0.2) {
        return Err(Error::config(
            "delta",
            format!("must lie in (0, 0.2], got {delta}"),
        ));
    }
    let n = d + 1;
    let sd = 1.0 / (n as f64).sqrt();
    let layers = (0..n_layers)
        .map(|l| {
            let mut stream = if l == 0 {
                rng.clone()
            } else {
                rng.split(l as u64)
            };
            let mut w_gate = Matrix::zeros(n, n);
            for r in std::iter::once(d).chain(0..d) {
                let row = stream.gaussian_vector(n, sd);
                w_gate.row_mut(r).copy_from_slice(row.as_slice());
            }
            let w_b = init_projection(d, delta);
            LayerParams {
                w_c: w_b.clone(),
                w_b,
                w_gate,
            }
        })
        .collect();
    DeepParams::new(layers, arch.stacking)
}

/// Initial stacked parameters for a run, drawn from the run seed.
pub fn initial_deep_params(d: usize, arch: Architecture, cfg: &TrainConfig) -> Result<DeepParams> {
    init_deep_params(
        d,
        arch,
        cfg.delta,
        &RngStream::seeded(cfg.seed).split(TAG_INIT),
    )
}

/// Intermediate values of one layer.
#[derive(Debug, Clone)]
pub struct LayerValues {
    /// `S[k, i]`, `m × m`.
    pub scores: Matrix,
    /// `G[c, k, i]` at column `k·m + i`; `None` for the ungated variant.
    pub gates: Option<Matrix>,
    pub output: Matrix,
    /// What the next layer reads (`output`, plus the input when residual).
    pub passed_on: Matrix,
}

fn layer_forward(
    kind: ModelKind,
    stacking: Stacking,
    layer: &LayerParams,
    input: &Matrix,
) -> LayerValues {
    let b = layer.w_b.matmul(input);
    let c = layer.w_c.matmul(input);
    let scores = b.t_matmul(&c);
    let gates = match kind {
        ModelKind::Mamba => Some(causal_gates(&layer.w_gate.matmul(input))),
        ModelKind::LinearTransformer => None,
    };
    let output = causal_mix(gates.as_ref(), input, &scores);
    LayerValues {
        scores,
        gates,
        passed_on: next_input(stacking, input, &output),
        output,
    }
}

/// What the next layer reads.
fn next_input(stacking: Stacking, input: &Matrix, output: &Matrix) -> Matrix {
    match stacking {
        Stacking::Plain => output.clone(),
        Stacking::Residual => input.add(output),
    }
}

fn check_shape(params: &DeepParams, prompt: &Prompt) {
    assert_eq!(
        params.width(),
        prompt.matrix.rows(),
        "parameter width must match the prompt"
    );
}

/// All layers' values on `prompt`, first layer first.
pub fn deep_trace(kind: ModelKind, params: &DeepParams, prompt: &Prompt) -> Vec<LayerValues> {
    check_shape(params, prompt);
    let mut out: Vec<LayerValues> = Vec::with_capacity(params.n_layers());
    for layer in &params.layers {
        let input = out.last().map_or(&prompt.matrix, |v| &v.passed_on);
        let values = layer_forward(kind, params.stacking, layer, input);
        out.push(values);
    }
    out
}

/// The model output on `prompt`.
pub fn deep_forward(kind: ModelKind, params: &DeepParams, prompt: &Prompt) -> f64 {
    let last = deep_trace(kind, params, prompt)
        .pop()
        .expect("at least one layer");
    last.passed_on[(prompt.dim(), prompt.len())]
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepGradients {
    /// Per-layer adjoints in the shape of [`LayerParams`].
    pub layers: Vec<LayerParams>,
    pub active: bool,
    pub output: f64,
}

/// Hinge-loss gradient for every layer. Exactly zero when `zF ≥ 1`; the
/// ungated variant's `W_gate` block is always zero.
pub fn deep_backward(
    kind: ModelKind,
    params: &DeepParams,
    prompt: &Prompt,
    z: Label,
) -> DeepGradients {
    check_shape(params, prompt);
    let n = params.width();
    let mut tape = Tape::new();
    let mut leaves = Vec::with_capacity(params.n_layers());
    let mut x = tape.leaf(prompt.matrix.clone());
    for layer in &params.layers {
        let wb = tape.leaf(layer.w_b.clone());
        let wc = tape.leaf(layer.w_c.clone());
        let b = tape.matmul(wb, x);
        let c = tape.matmul(wc, x);
        let s = tape.t_matmul(b, c);
        let (gate_leaf, gates) = match kind {
            ModelKind::Mamba => {
                let wg = tape.leaf(layer.w_gate.clone());
                let pre = tape.matmul(wg, x);
                (Some(wg), Some(tape.causal_gate(pre)))
            }
            ModelKind::LinearTransformer => (None, None),
        };
        let o = tape.causal_mix(gates, x, s);
        x = match params.stacking {
            Stacking::Plain => o,
            Stacking::Residual => tape.add(x, o),
        };
        leaves.push((wb, wc, gate_leaf));
    }
    let out = tape.element(x, n - 1, prompt.len());
    let output = tape.value(out)[(0, 0)];
    let zv = z.value();
    if zv * output >= 1.0 {
        return DeepGradients {
            layers: vec![LayerParams::zeros(n); params.n_layers()],
            active: false,
            output,
        };
    }
    let mut adj = tape.backward(out, Matrix::from_fn(1, 1, |_, _| -zv));
    debug_assert!(adj.visits().iter().all(|&v| v == 1));
    let mut take = |id| adj.take(id).unwrap_or_else(|| Matrix::zeros(n, n));
    let layers = leaves
        .into_iter()
        .map(|(wb, wc, wg)| LayerParams {
            w_b: take(wb),
            w_c: take(wc),
            w_gate: wg.map_or_else(|| Matrix::zeros(n, n), &mut take),
        })
        .collect();
    DeepGradients {
        layers,
        active: true,
        output,
    }
}

/// Check of [`deep_backward`] against Ridders-extrapolated central
/// differences from initial step `h`, over every parameter. The three error
/// fields hold the worst block of each kind over layers.
///
/// An instance is skipped when any stencil point lands on the other side of
/// the hinge kink from the base point. An entry's discrepancy counts only
/// beyond twice the tableau's error estimate for it, and blocks whose scale
/// is below what the smallest difference quotient resolves
/// (`ε·max(|F|, 1)/h_min`) are compared in absolute terms: they must agree
/// to within ten roundoff units.
pub fn check_deep_grads(
    kind: ModelKind,
    params: &DeepParams,
    prompt: &Prompt,
    z: Label,
    h: f64,
    tol: f64,
) -> Result<GradCheck> {
    if !(1e-6..=1e-1).contains(&h) {
        return Err(Error::config(
            "h",
            format!("must lie in [1e-6, 1e-1], got {h}"),
        ));
    }
    let skip = GradCheck {
        rel_err_wb: 0.0,
        rel_err_wc: 0.0,
        rel_err_w: 0.0,
        verdict: Verdict::Skip,
    };
    let grads = deep_backward(kind, params, prompt, z);
    let crossed = std::cell::Cell::new(false);
    let n = params.width();
    let resolution = f64::EPSILON * grads.output.abs().max(1.0) / (h * RIDDERS_MIN_STEP);
    let floor = 10.0 * resolution / tol;
    let mut errs = [0.0_f64; 3];
    for (l, g) in grads.layers.iter().enumerate() {
        let blocks: [(&Matrix, BlockField); 3] = [
            (&g.w_b, |p| &mut p.w_b),
            (&g.w_c, |p| &mut p.w_c),
            (&g.w_gate, |p| &mut p.w_gate),
        ];
        for (slot, (analytic, field)) in blocks.into_iter().enumerate() {
            let mut base = params.clone();
            let x0 = Vector::from_fn(n * n, |i| field(&mut base.layers[l]).as_slice()[i]);
            let loss = |x: &Vector| {
                let mut p = params.clone();
                field(&mut p.layers[l])
                    .as_mut_slice()
                    .copy_from_slice(x.as_slice());
                let f = deep_forward(kind, &p, prompt);
                if (z.value() * f < 1.0) != grads.active {
                    crossed.set(true);
                }
                hinge_loss(f, z)
            };
            let (numeric, uncertainty) = ridders_diff(loss, &x0, h)?;
            errs[slot] = errs[slot].max(floored_error(
                analytic.as_slice(),
                numeric.as_slice(),
                uncertainty.as_slice(),
                floor,
            ));
        }
    }
    if crossed.get() {
        return Ok(skip);
    }
    let verdict = if errs.iter().all(|&e| e < tol) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(GradCheck {
        rel_err_wb: errs[0],
        rel_err_wc: errs[1],
        rel_err_w: errs[2],
        verdict,
    })
}

type BlockField = fn(&mut LayerParams) -> &mut Matrix;

/// Largest discrepancy beyond twice the numeric side's own error estimate,
/// relative to the block scale floored at `floor`.
fn floored_error(analytic: &[f64], numeric: &[f64], uncertainty: &[f64], floor: f64) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0_f64, |m, x| m.max(x.abs()));
    let excess = analytic
        .iter()
        .zip(numeric)
        .zip(uncertainty)
        .fold(0.0_f64, |m, ((a, n), u)| m.max((a - n).abs() - 2.0 * u));
    excess.max(0.0) / scale.max(floor)
}

/// One SGD step on every layer with the batch-mean gradient.
pub fn deep_sgd_step(
    kind: ModelKind,
    params: &mut DeepParams,
    batch: &[Prompt],
    eta: f64,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let grads: Vec<DeepGradients> = batch
        .par_iter()
        .map(|p| deep_backward(kind, params, p, p.z))
        .collect();
    let n = params.width();
    let mut total = vec![LayerParams::zeros(n); params.n_layers()];
    for g in grads.iter().filter(|g| g.active) {
        for (acc, layer) in total.iter_mut().zip(&g.layers) {
            acc.axpy(1.0, layer);
        }
    }
    if !total.iter().all(LayerParams::is_finite) {
        return Err(Error::Numeric("batch gradient".into()));
    }
    let scale = -eta / batch.len() as f64;
    for (layer, g) in params.layers.iter_mut().zip(&total) {
        layer.axpy(scale, g);
    }
    if !params.is_finite() {
        return Err(Error::Numeric("parameters after step".into()));
    }
    Ok(summarize(batch.iter().zip(&grads).map(|(p, g)| {
        (hinge_loss(g.output, p.z), g.output, g.active)
    })))
}

/// Trains a stack with the same sampling and stopping rules as
/// the one-layer trainer.
pub fn deep_train(
    kind: ModelKind,
    bank: &PatternBank,
    tasks: &[Task],
    cfg: &TrainConfig,
    arch: Architecture,
) -> Result<TrainOutcome<DeepParams>> {
    let init = initial_deep_params(bank.d, arch, cfg)?;
    run_sgd(init, bank, tasks, cfg, |p, batch| {
        deep_sgd_step(kind, p, batch, cfg.eta)
    })
}

/// A trained stack as a predictor.
#[derive(Debug, Clone)]
pub struct DeepModel {
    pub kind: ModelKind,
    pub params: DeepParams,
}

impl Predictor for DeepModel {
    fn predict(&self, prompt: &Prompt) -> f64 {
        deep_forward(self.kind, &self.params, prompt)
    }
}

/// What one layer does at the query position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    pub layer: usize,
    /// `S[k, l+1]` for each context position `k`.
    pub scores: Vec<f64>,
    /// The same with the layer's input columns scaled to unit norm.
    pub unit_scores: Vec<f64>,
    /// Label-coordinate gates `G[d, k, l+1]` for each context position
    /// (all ones for the ungated variant).
    pub gates: Vec<f64>,
    /// What the layer passes on at the query position.
    pub query_output: Vec<f64>,
}

pub fn layer_probes(kind: ModelKind, params: &DeepParams, prompt: &Prompt) -> Vec<LayerProbe> {
    let l = prompt.len();
    let m = l + 1;
    let d = prompt.dim();
    let trace = deep_trace(kind, params, prompt);
    let mut inputs = vec![&prompt.matrix];
    inputs.extend(trace.iter().map(|v| &v.passed_on));
    trace
        .iter()
        .zip(inputs)
        .enumerate()
        .map(|(layer, (v, input))| {
            let norms: Vec<f64> = (0..m).map(|k| input.column(k).norm()).collect();
            LayerProbe {
                layer,
                scores: (0..l).map(|k| v.scores[(k, l)]).collect(),
                unit_scores: (0..l)
                    .map(|k| v.scores[(k, l)] / (norms[k] * norms[l]))
                    .collect(),
                gates: (0..l)
                    .map(|k| v.gates.as_ref().map_or(1.0, |g| g[(d, k * m + l)]))
                    .collect(),
                query_output: v.passed_on.column(l).into_vec(),
            }
        })
        .collect()
}
