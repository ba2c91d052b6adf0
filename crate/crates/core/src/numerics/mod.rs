//! Dense 64-bit linear algebra, reverse-mode differentiation, the layers of
//! the toy encoders, Adam, and a finite-difference gradient checker.

mod gradcheck;
mod layers;
mod matrix;
mod optim;
mod tape;

pub use gradcheck::{grad_check, relative_error, CoordCheck, GradCheckOptions, GradCheckReport, ParamCheck};
pub use layers::{
    linear_lora_forward, randn, AttentionBlock, LayerNorm, LoraLinear, LoraPair, LoraSpec, Mlp, TransformerBlock,
    LORA_A_INIT_STD,
};
pub use matrix::Matrix;
pub use optim::{adam_step, AdamConfig};
pub use tape::{Gradients, Param, ParamId, ParamStore, Tape, Var, LAYER_NORM_EPSILON, LOG_EPSILON};

use crate::error::{Error, Result};

/// Row-wise softmax of `logits / tau`.
pub fn softmax_rows(logits: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) {
        return Err(Error::arg(format!("softmax temperature must be > 0, got {tau}")));
    }
    Ok(tape::softmax_matrix(logits, tau))
}

/// Mean over rows of `-sum_j targets_ij * log softmax(logits / tau)_ij`.
pub fn cross_entropy_rows(logits: &Matrix, targets: &Matrix, tau: f64) -> Result<f64> {
    let mut t = Tape::new();
    let l = t.constant(logits.clone());
    let loss = t.cross_entropy_rows(l, targets, tau)?;
    Ok(t.value(loss).item())
}

pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut t = Tape::new();
    let x = t.constant(m.clone());
    let y = t.l2_normalize_rows(x)?;
    Ok(t.value(y).clone())
}

/// Mean row entropy of a row-stochastic matrix.
pub fn mean_entropy(p: &Matrix) -> f64 {
    let mut t = Tape::new();
    let x = t.constant(p.clone());
    let h = t.entropy_rows(x);
    t.value(h).item()
}
