//! One-layer and stacked Mamba as gated linear attention, a linear-Transformer
//! baseline, and the synthetic in-context classification setup they are
//! trained and probed on.

pub mod checkpoint;
pub mod deep;
pub mod error;
pub mod fd;
pub mod grad;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod patterns;
pub mod probes;
pub mod prompts;
pub mod rng;
pub mod tape;
pub mod train;

pub use error::{Error, LinalgError, Result};
pub use linalg::{Matrix, Vector};
pub use model::{MambaParams, ModelKind};
pub use patterns::{BankMode, BankShape, PatternBank, Task, TestOutlier};
pub use prompts::{Arrangement, Label, LabelRule, Prompt};
pub use rng::RngStream;
