//! A small reverse-mode tape over whole-matrix operations.
//!
//! Nodes are appended in evaluation order and never removed; each records
//! its operation, the ids of its inputs and its value. `backward` walks the
//! nodes once in reverse insertion order, accumulating adjoints, and counts
//! the visits so the single-pass property can be checked.
//!
//! Besides products, the tape has two fused operations for gated causal
//! mixing. For preactivations `Z` (one row per channel, one column per
//! position) with `σ = σ(Z)`, [`Tape::causal_gate`] produces
//!
//! ```text
//! G[c, k, i] = σ[c, k] · Π_{k<j≤i} (1 − σ[c, j])      for k ≤ i, else 0
//! ```
//!
//! stored as a `channels × (m·m)` matrix at column `k·m + i`, and
//! [`Tape::causal_mix`] produces
//!
//! ```text
//! O[c, i] = Σ_{k≤i} G[c, k, i] · U[c, k] · S[k, i]
//! ```
//!
//! with `G ≡ 1` when no gate node is given. The gate backward pass uses
//! prefix sums instead of dividing by `1 − σ`, so saturated gates are safe.

use crate::linalg::Matrix;
use crate::model::sigmoid;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Leaf,
    /// `a + b`
    Add(NodeId, NodeId),
    /// `a · b`
    MatMul(NodeId, NodeId),
    /// `aᵀ · b`
    TMatMul(NodeId, NodeId),
    CausalGate(NodeId),
    CausalMix {
        gates: Option<NodeId>,
        input: NodeId,
        scores: NodeId,
    },
    /// The `1×1` matrix holding entry `(row, col)` of the input.
    Element(NodeId, usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints from one backward pass.
#[derive(Debug, Clone)]
pub struct Adjoints {
    grads: Vec<Option<Matrix>>,
    visits: Vec<usize>,
}

impl Adjoints {
    /// Adjoint of `id`, or `None` if no path leads from it to the output.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id).and_then(Option::take)
    }

    /// How often the backward pass processed each node.
    pub fn visits(&self) -> &[usize] {
        &self.visits
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn op(&self, id: NodeId) -> Op {
        self.nodes[id].op
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn t_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).t_matmul(self.value(b));
        self.push(Op::TMatMul(a, b), v)
    }

    pub fn causal_gate(&mut self, pre: NodeId) -> NodeId {
        let v = causal_gates(self.value(pre));
        self.push(Op::CausalGate(pre), v)
    }

    pub fn causal_mix(&mut self, gates: Option<NodeId>, input: NodeId, scores: NodeId) -> NodeId {
        let v = causal_mix(
            gates.map(|g| self.value(g)),
            self.value(input),
            self.value(scores),
        );
        self.push(
            Op::CausalMix {
                gates,
                input,
                scores,
            },
            v,
        )
    }

    pub fn element(&mut self, a: NodeId, row: usize, col: usize) -> NodeId {
        let x = self.value(a)[(row, col)];
        self.push(Op::Element(a, row, col), Matrix::from_fn(1, 1, |_, _| x))
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape as the
    /// output's value). Nodes after `output` are ignored; every node up to
    /// and including it is visited exactly once.
    pub fn backward(&self, output: NodeId, seed: Matrix) -> Adjoints {
        assert_eq!(
            seed.shape(),
            self.value(output).shape(),
            "seed shape mismatch"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut visits = vec![0usize; self.nodes.len()];
        grads[output] = Some(seed);
        for id in (0..=output).rev() {
            visits[id] += 1;
            let Some(g) = grads[id].take() else { continue };
            match self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(b));
                    let gb = self.value(a).t_matmul(&g);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::TMatMul(a, b) => {
                    let ga = self.value(b).matmul_t(&g);
                    let gb = self.value(a).matmul(&g);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::CausalGate(pre) => {
                    let gp = causal_gate_backward(self.value(pre), &g);
                    accumulate(&mut grads, pre, gp);
                }
                Op::CausalMix {
                    gates,
                    input,
                    scores,
                } => {
                    let (gg, gu, gs) = causal_mix_backward(
                        gates.map(|x| self.value(x)),
                        self.value(input),
                        self.value(scores),
                        &g,
                    );
                    if let (Some(gid), Some(gg)) = (gates, gg) {
                        accumulate(&mut grads, gid, gg);
                    }
                    accumulate(&mut grads, input, gu);
                    accumulate(&mut grads, scores, gs);
                }
                Op::Element(a, r, c) => {
                    let (rows, cols) = self.value(a).shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    ga[(r, c)] = g[(0, 0)];
                    accumulate(&mut grads, a, ga);
                }
            }
            // Leaves keep their adjoint for the caller.
            if self.nodes[id].op == Op::Leaf {
                grads[id] = Some(g);
            }
        }
        Adjoints { grads, visits }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

/// Forward value of [`Tape::causal_gate`].
pub fn causal_gates(pre: &Matrix) -> Matrix {
    let (channels, m) = pre.shape();
    let mut out = Matrix::zeros(channels, m * m);
    for c in 0..channels {
        let sig: Vec<f64> = pre.row(c).iter().map(|&x| sigmoid(x)).collect();
        let row = out.row_mut(c);
        for i in 0..m {
            for k in 0..i {
                row[k * m + i] = row[k * m + i - 1] * (1.0 - sig[i]);
            }
            row[i * m + i] = sig[i];
        }
    }
    out
}

/// Adjoint of the preactivations given the adjoint `g` of the gates.
///
/// For fixed `(c, i)` and `j ≤ i`, with `Q_j = Π_{j<t≤i}(1 − σ_t)`,
/// `∂L/∂σ_j = Q_j (g[j, i] − A_j)` where `A_0 = 0` and
/// `A_{j+1} = A_j (1 − σ_j) + g[j, i] σ_j`.
fn causal_gate_backward(pre: &Matrix, g: &Matrix) -> Matrix {
    let (channels, m) = pre.shape();
    let mut out = Matrix::zeros(channels, m);
    let mut suffix = vec![0.0; m];
    for c in 0..channels {
        let sig: Vec<f64> = pre.row(c).iter().map(|&x| sigmoid(x)).collect();
        let grow = g.row(c);
        let mut d_sig = vec![0.0; m];
        for i in 0..m {
            suffix[i] = 1.0;
            for j in (0..i).rev() {
                suffix[j] = suffix[j + 1] * (1.0 - sig[j + 1]);
            }
            let mut prefix = 0.0;
            for j in 0..=i {
                let gji = grow[j * m + i];
                d_sig[j] += suffix[j] * (gji - prefix);
                prefix = prefix * (1.0 - sig[j]) + gji * sig[j];
            }
        }
        for (o, (ds, s)) in out.row_mut(c).iter_mut().zip(d_sig.iter().zip(&sig)) {
            *o = ds * s * (1.0 - s);
        }
    }
    out
}

/// Forward value of [`Tape::causal_mix`].
pub fn causal_mix(gates: Option<&Matrix>, input: &Matrix, scores: &Matrix) -> Matrix {
    let (channels, m) = input.shape();
    assert_eq!(scores.shape(), (m, m), "scores must be m x m");
    if let Some(g) = gates {
        assert_eq!(g.shape(), (channels, m * m), "gates shape mismatch");
    }
    let mut out = Matrix::zeros(channels, m);
    for c in 0..channels {
        let u = input.row(c);
        let grow = gates.map(|g| g.row(c));
        let orow = out.row_mut(c);
        for k in 0..m {
            if u[k] == 0.0 {
                continue;
            }
            let srow = scores.row(k);
            for i in k..m {
                let gate = grow.map_or(1.0, |g| g[k * m + i]);
                orow[i] += gate * u[k] * srow[i];
            }
        }
    }
    out
}

fn causal_mix_backward(
    gates: Option<&Matrix>,
    input: &Matrix,
    scores: &Matrix,
    g: &Matrix,
) -> (Option<Matrix>, Matrix, Matrix) {
    let (channels, m) = input.shape();
    let mut d_gates = gates.map(|_| Matrix::zeros(channels, m * m));
    let mut d_input = Matrix::zeros(channels, m);
    let mut d_scores = Matrix::zeros(m, m);
    for c in 0..channels {
        let u = input.row(c);
        let go = g.row(c);
        if go.iter().all(|&x| x == 0.0) {
            continue;
        }
        let grow = gates.map(|x| x.row(c));
        for k in 0..m {
            let srow = scores.row(k);
            let mut du = 0.0;
            for i in k..m {
                if go[i] == 0.0 {
                    continue;
                }
                let gate = grow.map_or(1.0, |x| x[k * m + i]);
                du += go[i] * gate * srow[i];
                d_scores[(k, i)] += go[i] * gate * u[k];
                if let Some(dg) = d_gates.as_mut() {
                    dg[(c, k * m + i)] = go[i] * u[k] * srow[i];
                }
            }
            d_input[(c, k)] = du;
        }
    }
    (d_gates, d_input, d_scores)
}
