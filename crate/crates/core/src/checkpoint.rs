//! Checkpoint files.
//!
//! A checkpoint is a JSON object:
//!
//! ```text
//! {
//!   "format": "iclmb-checkpoint",
//!   "version": 1,
//!   "kind": "mamba" | "linear_transformer",
//!   "d": 30,
//!   "stacking": null | "plain" | "residual",   // null for the one-layer model
//!   "layers": [ { "w_b": M, "w_c": M, "w": V | null, "w_gate": M | null } ],
//!   "train": { ...training config... },
//!   "seed": 0,
//!   "iteration": 2000,
//!   "context": { ...whatever the writer attached... }
//! }
//! ```
//!
//! where a matrix `M` is `{"rows": r, "cols": c, "bits": [...]}` in row-major
//! order and a vector `V` is a list. Every weight is written as the 16 hex
//! digits of its IEEE-754 bit pattern, so a load returns exactly the saved
//! values. Config numbers are plain JSON numbers in shortest round-trip
//! form. Output is deterministic: same checkpoint, same bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::deep::{DeepParams, LayerParams, Stacking};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{MambaParams, ModelKind};
use crate::train::TrainConfig;

pub const FORMAT: &str = "iclmb-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    OneLayer(MambaParams),
    Deep(DeepParams),
}

impl Weights {
    pub fn width(&self) -> usize {
        match self {
            Weights::OneLayer(p) => p.width(),
            Weights::Deep(p) => p.width(),
        }
    }

    pub fn n_layers(&self) -> usize {
        match self {
            Weights::OneLayer(_) => 1,
            Weights::Deep(p) => p.n_layers(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub weights: Weights,
    pub train: TrainConfig,
    pub seed: u64,
    pub iteration: usize,
    /// Free-form metadata, e.g. the experiment config that produced the run.
    pub context: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireLayer {
    w_b: WireMatrix,
    w_c: WireMatrix,
    w: Option<Vec<String>>,
    w_gate: Option<WireMatrix>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Wire {
    format: String,
    version: u32,
    kind: ModelKind,
    d: usize,
    stacking: Option<Stacking>,
    layers: Vec<WireLayer>,
    train: TrainConfig,
    seed: u64,
    iteration: usize,
    context: Value,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn encode(xs: &[f64]) -> Vec<String> {
    xs.iter().map(|x| format!("{:016x}", x.to_bits())).collect()
}

fn decode(bits: &[String]) -> Result<Vec<f64>> {
    bits.iter()
        .map(|s| {
            if s.len() != 16 {
                return Err(bad(format!("weight {s:?} is not 16 hex digits")));
            }
            u64::from_str_radix(s, 16)
                .map(f64::from_bits)
                .map_err(|_| bad(format!("weight {s:?} is not hex")))
        })
        .collect()
}

fn wire_matrix(m: &Matrix) -> WireMatrix {
    WireMatrix {
        rows: m.rows(),
        cols: m.cols(),
        bits: encode(m.as_slice()),
    }
}

fn read_matrix(w: &WireMatrix, n: usize, name: &str) -> Result<Matrix> {
    if (w.rows, w.cols) != (n, n) {
        return Err(bad(format!(
            "{name} is {}x{}, expected {n}x{n}",
            w.rows, w.cols
        )));
    }
    Matrix::from_vec(w.rows, w.cols, decode(&w.bits)?).map_err(|e| bad(format!("{name}: {e}")))
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let (stacking, layers) = match &self.weights {
            Weights::OneLayer(p) => (
                None,
                vec![WireLayer {
                    w_b: wire_matrix(&p.w_b),
                    w_c: wire_matrix(&p.w_c),
                    w: Some(encode(p.w.as_slice())),
                    w_gate: None,
                }],
            ),
            Weights::Deep(p) => (
                Some(p.stacking),
                p.layers
                    .iter()
                    .map(|l| WireLayer {
                        w_b: wire_matrix(&l.w_b),
                        w_c: wire_matrix(&l.w_c),
                        w: None,
                        w_gate: Some(wire_matrix(&l.w_gate)),
                    })
                    .collect(),
            ),
        };
        let wire = Wire {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind,
            d: self.weights.width() - 1,
            stacking,
            layers,
            train: self.train.clone(),
            seed: self.seed,
            iteration: self.iteration,
            context: self.context.clone(),
        };
        let mut s = serde_json::to_string_pretty(&wire).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let wire: Wire = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if wire.format != FORMAT {
            return Err(bad(format!(
                "format {:?}, expected {FORMAT:?}",
                wire.format
            )));
        }
        if wire.version != VERSION {
            return Err(bad(format!(
                "version {}, this build reads {VERSION}",
                wire.version
            )));
        }
        let n = wire.d + 1;
        let weights = match wire.stacking {
            None => {
                let [layer] = <[WireLayer; 1]>::try_from(wire.layers)
                    .map_err(|l| bad(format!("one-layer checkpoint with {} layers", l.len())))?;
                let w = layer
                    .w
                    .ok_or_else(|| bad("one-layer checkpoint without w"))?;
                if layer.w_gate.is_some() {
                    return Err(bad("one-layer checkpoint with w_gate"));
                }
                let w = decode(&w)?;
                if w.len() != n {
                    return Err(bad(format!("w has {} entries, expected {n}", w.len())));
                }
                Weights::OneLayer(MambaParams::new(
                    read_matrix(&layer.w_b, n, "w_b")?,
                    read_matrix(&layer.w_c, n, "w_c")?,
                    Vector::from_vec(w).map_err(|e| bad(format!("w: {e}")))?,
                )?)
            }
            Some(stacking) => {
                let layers = wire
                    .layers
                    .iter()
                    .map(|l| {
                        if l.w.is_some() {
                            return Err(bad("stacked checkpoint with a one-layer w"));
                        }
                        let g = l
                            .w_gate
                            .as_ref()
                            .ok_or_else(|| bad("stacked layer without w_gate"))?;
                        Ok(LayerParams {
                            w_b: read_matrix(&l.w_b, n, "w_b")?,
                            w_c: read_matrix(&l.w_c, n, "w_c")?,
                            w_gate: read_matrix(g, n, "w_gate")?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Weights::Deep(DeepParams::new(layers, stacking)?)
            }
        };
        Ok(Self {
            kind: wire.kind,
            weights,
            train: wire.train,
            seed: wire.seed,
            iteration: wire.iteration,
            context: wire.context,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())
            .map_err(|e| bad(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
