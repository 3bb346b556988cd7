//! Differentiable LSTM cell, batched over rows.
//!
//! Gate order is fixed as (input, forget, cell, output). A batch of N
//! rows through one step is bit-identical to N independent single-row
//! steps: the inner summation order of the matrix product is the same
//! either way.

use rand::Rng;

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Weights of one LSTM cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// [4H x D]
    pub input_weights: Tensor,
    /// [4H x H]
    pub recurrent_weights: Tensor,
    /// [4H]
    pub bias: Tensor,
}

impl LstmParams {
    /// Uniform init in +-sqrt(6/(fan_in+fan_out)); forget-gate bias 1.0.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        assert!(input_dim > 0 && hidden > 0);
        let iw = uniform_init(4 * hidden, input_dim, rng);
        let rw = uniform_init(4 * hidden, hidden, rng);
        let mut bias = vec![0.0; 4 * hidden];
        for b in bias.iter_mut().take(2 * hidden).skip(hidden) {
            *b = 1.0;
        }
        Self {
            input_weights: iw,
            recurrent_weights: rw,
            bias: Tensor::row(bias),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            input_weights: Tensor::zeros(vec![4 * hidden, input_dim]),
            recurrent_weights: Tensor::zeros(vec![4 * hidden, hidden]),
            bias: Tensor::zeros(vec![4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.recurrent_weights.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.input_weights.cols()
    }
}

pub fn uniform_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::unchecked(vec![rows, cols], data)
}

/// Leaves of one cell already placed on a tape, with the weight
/// transposes taken once so every step reuses them.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub input_weights: Var,
    pub recurrent_weights: Var,
    pub bias: Var,
    wx_t: Var,
    wh_t: Var,
    hidden: usize,
}

impl LstmVars {
    pub fn place(tape: &mut Tape, p: &LstmParams) -> Self {
        let hidden = p.hidden();
        let input_weights = tape.leaf(p.input_weights.clone());
        let recurrent_weights = tape.leaf(p.recurrent_weights.clone());
        let bias = tape.leaf(p.bias.clone());
        let wx_t = tape.transpose(input_weights);
        let wh_t = tape.transpose(recurrent_weights);
        Self {
            input_weights,
            recurrent_weights,
            bias,
            wx_t,
            wh_t,
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

/// One LSTM step over a batch: x [N x D], h and c [N x H].
/// Returns (h', c').
pub fn lstm_step(
    tape: &mut Tape,
    cell: &LstmVars,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let hd = cell.hidden;
    let n = tape.value(x).rows();
    if tape.value(h).cols() != hd || tape.value(c).cols() != hd {
        return Err(Error::ShapeMismatch {
            op: "lstm_step",
            left: tape.value(h).shape().to_vec(),
            right: vec![n, hd],
        });
    }
    let xg = tape.matmul(x, cell.wx_t)?;
    tape.tag(xg, "lstm_input_matmul");
    let hg = tape.matmul(h, cell.wh_t)?;
    let pre = tape.add(xg, hg)?;
    let b = tape.tile_rows(cell.bias, n)?;
    let gates = tape.add(pre, b)?;

    let i = tape.slice_cols(gates, 0, hd)?;
    let f = tape.slice_cols(gates, hd, hd)?;
    let g = tape.slice_cols(gates, 2 * hd, hd)?;
    let o = tape.slice_cols(gates, 3 * hd, hd)?;

    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);

    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}
