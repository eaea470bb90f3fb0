//! Small composites built from tape primitives.

use super::{Tape, Var};
use crate::error::{dim_err, Result};

/// `x · w + b` over the last axis of `x` (any rank ≥ 2).
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let d_in = *shape.last().unwrap();
    let ws = tape.shape(w);
    if ws.len() != 2 || ws[0] != d_in {
        return Err(dim_err(format!("linear: input {shape:?} vs weight {ws:?}")));
    }
    let d_out = ws[1];
    let rows = tape.value(x).numel() / d_in;
    let flat = if shape.len() == 2 {
        x
    } else {
        tape.reshape(x, &[rows, d_in])?
    };
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = b {
        y = tape.add_bias(y, b)?;
    }
    if shape.len() == 2 {
        return Ok(y);
    }
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = d_out;
    tape.reshape(y, &out_shape)
}

/// `softmax(q·kᵀ/√d_k + bias) · v` for `q[n×d_k]`, `k[m×d_k]`, `v[m×d_v]`.
/// Returns the attended values and the attention weights `[n×m]`.
pub fn scaled_dot_product_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
) -> Result<(Var, Var)> {
    let dk = tape.shape(q)[1];
    if tape.shape(k)[1] != dk || tape.shape(k)[0] != tape.shape(v)[0] {
        return Err(dim_err(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            tape.shape(q),
            tape.shape(k),
            tape.shape(v)
        )));
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, 1.0 / (dk as f64).sqrt())?;
    if let Some(b) = bias {
        logits = tape.add(logits, b)?;
    }
    let weights = tape.softmax(logits, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}
