//! Random-instance suites that check the analytic machinery against
//! independent references: finite differences for every gradient, the
//! unrolled recurrence for the closed form, the telescoping identity for the
//! gates, and the one-layer modules for the stack.
//!
//! Instance `i` of a suite draws from `RngStream::seeded(seed).split(i)`.

use serde::Serialize;

use crate::deep::{
    check_deep_grads, deep_backward, deep_forward, deep_trace, Architecture, DeepParams, LayerParams,
};
use crate::error::Result;
use crate::grad::{check_grads, grad_all, Verdict};
use crate::linalg::{Matrix, Vector};
use crate::model::{
    forward, forward_mamba, forward_recurrence, gating_vector, sigmoid, MambaParams, ModelKind,
};
use crate::patterns::Task;
use crate::prompts::{ExampleMeta, Label, Prompt, QueryMeta};
use crate::rng::RngStream;

/// Prompt from explicit columns (each of length d+1, the last entry the
/// label). Metadata is filler.
pub fn prompt_from_columns(columns: &[Vec<f64>]) -> Prompt {
    let cols: Vec<Vector> = columns
        .iter()
        .map(|c| Vector::from_vec(c.clone()).expect("finite columns"))
        .collect();
    let matrix = Matrix::from_columns(&cols);
    let l = columns.len() - 1;
    let meta = (0..l)
        .map(|_| ExampleMeta {
            relevant_idx: 0,
            irrelevant_idx: 0,
            kappa: 0.0,
            outlier: None,
            clean_label: Label::Plus,
            emitted_label: Label::Plus,
        })
        .collect();
    Prompt {
        matrix,
        meta,
        query: QueryMeta {
            relevant_idx: 0,
            irrelevant_idx: 0,
            kappa: 0.0,
        },
        z: Label::Plus,
        task: Task::new(0, 1),
    }
}

/// Dense `N(0, 0.25)` projections, `N(0, 0.49)` gate vector, and a prompt
/// with standard normal features, ±1 context labels and a zero query label.
pub fn random_instance(d: usize, l: usize, rng: &mut RngStream) -> (MambaParams, Prompt) {
    let n = d + 1;
    let params = MambaParams {
        w_b: Matrix::from_fn(n, n, |_, _| rng.gaussian() * 0.5),
        w_c: Matrix::from_fn(n, n, |_, _| rng.gaussian() * 0.5),
        w: rng.gaussian_vector(n, 0.7),
    };
    let mut cols: Vec<Vec<f64>> = (0..=l)
        .map(|_| {
            let mut c: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
            c.push(rng.sign());
            c
        })
        .collect();
    cols[l][d] = 0.0;
    (params, prompt_from_columns(&cols))
}

/// Stack with `N(0, scale²)` projections and standard normal gate rows.
pub fn random_deep_params(
    d: usize,
    arch: Architecture,
    scale: f64,
    rng: &mut RngStream,
) -> Result<DeepParams> {
    let n = d + 1;
    let layers = (0..arch.n_layers)
        .map(|_| LayerParams {
            w_b: Matrix::from_fn(n, n, |_, _| scale * rng.gaussian()),
            w_c: Matrix::from_fn(n, n, |_, _| scale * rng.gaussian()),
            w_gate: Matrix::from_fn(n, n, |_, _| rng.gaussian()),
        })
        .collect();
    DeepParams::new(layers, arch.stacking)
}

fn random_label(rng: &mut RngStream) -> Label {
    if rng.sign() > 0.0 {
        Label::Plus
    } else {
        Label::Minus
    }
}

/// Outcome of a finite-difference suite. Worst errors are over checked
/// (non-skipped) instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteReport {
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub failed: usize,
    pub worst_wb: f64,
    pub worst_wc: f64,
    /// `w` for the one-layer model, `W_gate` for stacks.
    pub worst_gate: f64,
}

impl SuiteReport {
    fn new(instances: usize) -> Self {
        Self {
            instances,
            checked: 0,
            skipped: 0,
            failed: 0,
            worst_wb: 0.0,
            worst_wc: 0.0,
            worst_gate: 0.0,
        }
    }

    fn record(&mut self, check: &crate::grad::GradCheck) {
        match check.verdict {
            Verdict::Skip => self.skipped += 1,
            v => {
                self.checked += 1;
                self.failed += (v == Verdict::Fail) as usize;
                self.worst_wb = self.worst_wb.max(check.rel_err_wb);
                self.worst_wc = self.worst_wc.max(check.rel_err_wc);
                self.worst_gate = self.worst_gate.max(check.rel_err_w);
            }
        }
    }

    pub fn worst(&self) -> f64 {
        self.worst_wb.max(self.worst_wc).max(self.worst_gate)
    }

    /// No failures and at least `min_checked` instances away from the kink.
    pub fn passed(&self, min_checked: usize) -> bool {
        self.failed == 0 && self.checked >= min_checked
    }
}

/// One-layer gradients against central differences on instances with
/// `d ∈ [1, 6]`, `l ∈ [1, 5]`.
pub fn one_layer_grad_suite(
    kind: ModelKind,
    instances: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<SuiteReport> {
    let root = RngStream::seeded(seed);
    let mut report = SuiteReport::new(instances);
    for i in 0..instances {
        let mut rng = root.split(i as u64);
        let d = 1 + rng.below(6);
        let l = 1 + rng.below(5);
        let (params, prompt) = random_instance(d, l, &mut rng);
        let z = random_label(&mut rng);
        report.record(&check_grads(kind, &params, &prompt, z, h, tol)?);
    }
    Ok(report)
}

/// Shrinks each layer's `W_B` and `W_C` until the layer's output is no
/// larger than its input. Untempered random stacks grow doubly
/// exponentially with depth, and difference quotients of such outputs
/// lose every digit to cancellation.
pub fn temper_layers(kind: ModelKind, params: &mut DeepParams, prompt: &Prompt) {
    let max_abs = |m: &Matrix| m.as_slice().iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    for l in 0..params.n_layers() {
        let trace = deep_trace(kind, params, prompt);
        let input = if l == 0 {
            max_abs(&prompt.matrix)
        } else {
            max_abs(&trace[l - 1].passed_on)
        };
        let output = max_abs(&trace[l].output);
        if output > input {
            let c = (input / output).sqrt();
            let layer = &mut params.layers[l];
            layer.w_b = layer.w_b.scaled(c);
            layer.w_c = layer.w_c.scaled(c);
        }
    }
}

/// Stack gradients against Ridders-extrapolated central differences on
/// `d = 4`, `l = 3`, with tempered layers.
pub fn deep_grad_suite(
    kind: ModelKind,
    arch: Architecture,
    instances: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<SuiteReport> {
    let root = RngStream::seeded(seed);
    let mut report = SuiteReport::new(instances);
    for i in 0..instances {
        let mut rng = root.split(i as u64);
        let (_, prompt) = random_instance(4, 3, &mut rng);
        let mut params = random_deep_params(4, arch, 0.5, &mut rng)?;
        temper_layers(kind, &mut params, &prompt);
        let z = random_label(&mut rng);
        report.record(&check_deep_grads(kind, &params, &prompt, z, h, tol)?);
    }
    Ok(report)
}

/// Largest `|closed form − recurrence readout|`, with every row of the
/// recurrence's gate matrix set to `w`.
pub fn recurrence_suite(instances: usize, seed: u64) -> f64 {
    let root = RngStream::seeded(seed);
    (0..instances)
        .map(|i| {
            let mut rng = root.split(i as u64);
            let d = 1 + rng.below(6);
            let l = 1 + rng.below(8);
            let (params, prompt) = random_instance(d, l, &mut rng);
            let n = d + 1;
            let w_gate = Matrix::from_fn(n, n, |_, c| params.w[c]);
            let rec = forward_recurrence(&params.w_b, &params.w_c, &w_gate, &prompt);
            (forward_mamba(&params, &prompt) - rec.output).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GatingSuite {
    /// Largest `|Σ_{i≤l} G_i − (1 − σ(w·p_q) − Π_{i≤l+1}(1 − σ(w·p_i)))|`.
    pub telescoping: f64,
    /// Largest `|G_i − 2^{−(l+2−i)}|` at `w = 0` (1-based `i`).
    pub halving: f64,
}

pub fn gating_suite(instances: usize, seed: u64) -> GatingSuite {
    let root = RngStream::seeded(seed);
    let mut out = GatingSuite {
        telescoping: 0.0,
        halving: 0.0,
    };
    for i in 0..instances {
        let mut rng = root.split(i as u64);
        let d = 1 + rng.below(6);
        let l = 1 + rng.below(20);
        let (params, prompt) = random_instance(d, l, &mut rng);
        let g = gating_vector(&params.w, &prompt);
        let pre = prompt.matrix.t_matvec(&params.w);
        let prod: f64 = pre.iter().map(|&z| 1.0 - sigmoid(z)).product();
        let lhs: f64 = (0..l).map(|k| g[k]).sum();
        out.telescoping = out
            .telescoping
            .max((lhs - (1.0 - sigmoid(pre[l]) - prod)).abs());
        let g0 = gating_vector(&Vector::zeros(d + 1), &prompt);
        for k in 0..=l {
            let expect = 0.5_f64.powi((l + 1 - k) as i32);
            out.halving = out.halving.max((g0[k] - expect).abs());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReductionSuite {
    /// Largest output discrepancy, relative to `max(|F|, 1)`.
    pub value: f64,
    /// Largest gradient-entry discrepancy, relative to `max(block scale, 1)`.
    pub gradient: f64,
}

/// A one-layer stack against the one-layer closed form and gradients, over
/// both model kinds and both wirings.
pub fn deep_reduction_suite(instances: usize, seed: u64) -> ReductionSuite {
    use crate::deep::Stacking;
    let root = RngStream::seeded(seed);
    let mut out = ReductionSuite {
        value: 0.0,
        gradient: 0.0,
    };
    for i in 0..instances {
        let mut rng = root.split(i as u64);
        let d = 1 + rng.below(6);
        let l = 1 + rng.below(5);
        let (params, prompt) = random_instance(d, l, &mut rng);
        let z = random_label(&mut rng);
        for stacking in [Stacking::Plain, Stacking::Residual] {
            let deep = DeepParams::new(vec![LayerParams::from_one_layer(&params)], stacking)
                .expect("valid shapes");
            for kind in [ModelKind::Mamba, ModelKind::LinearTransformer] {
                let a = forward(kind, &params, &prompt);
                let b = deep_forward(kind, &deep, &prompt);
                out.value = out.value.max((a - b).abs() / a.abs().max(1.0));
                let g1 = grad_all(kind, &params, &prompt, z);
                let gd = deep_backward(kind, &deep, &prompt, z);
                let layer = &gd.layers[0];
                let label_row = Vector::from_fn(d + 1, |c| layer.w_gate[(d, c)]);
                for (x, y) in [
                    (layer.w_b.as_slice(), g1.d_wb.as_slice()),
                    (layer.w_c.as_slice(), g1.d_wc.as_slice()),
                    (label_row.as_slice(), g1.d_w.as_slice()),
                ] {
                    let scale = y.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
                    let diff = x
                        .iter()
                        .zip(y)
                        .fold(0.0_f64, |m, (p, q)| m.max((p - q).abs()));
                    out.gradient = out.gradient.max(diff / scale);
                }
                if g1.active != gd.active {
                    out.gradient = f64::INFINITY;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deep::Stacking;
    use crate::grad::default_tolerance;

    #[test]
    fn suites_pass_on_small_runs() {
        let r =
            one_layer_grad_suite(ModelKind::Mamba, 40, 1e-5, default_tolerance(1e-5), 1).unwrap();
        assert!(r.passed(30), "{r:?}");
        let arch = Architecture {
            n_layers: 2,
            stacking: Stacking::Plain,
        };
        let r = deep_grad_suite(ModelKind::Mamba, arch, 10, 1e-5, 1e-5, 1).unwrap();
        assert!(r.passed(8), "{r:?}");
        assert!(recurrence_suite(40, 1) < 1e-10);
        let g = gating_suite(40, 1);
        assert!(g.telescoping < 1e-12 && g.halving < 1e-12, "{g:?}");
        let red = deep_reduction_suite(20, 1);
        assert!(red.value < 1e-9 && red.gradient < 1e-9, "{red:?}");
    }

    #[test]
    fn suites_are_deterministic() {
        let a = one_layer_grad_suite(ModelKind::LinearTransformer, 10, 1e-5, 1e-6, 9).unwrap();
        let b = one_layer_grad_suite(ModelKind::LinearTransformer, 10, 1e-5, 1e-6, 9).unwrap();
        assert_eq!(a, b);
    }
}
