use rand::Rng;

use super::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Parameter ids of one LSTM layer. Gate rows are stacked as
/// input, forget, candidate, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        init: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            w_ih: store.add(
                format!("{prefix}.w_ih"),
                Tensor::uniform(&[4 * hidden, input], init, rng),
            )?,
            w_hh: store.add(
                format!("{prefix}.w_hh"),
                Tensor::uniform(&[4 * hidden, hidden], init, rng),
            )?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[4 * hidden]))?,
            input,
            hidden,
        })
    }

    pub fn weights(&self, bound: &Bound) -> LstmWeights {
        LstmWeights {
            w_ih: bound[self.w_ih],
            w_hh: bound[self.w_hh],
            bias: bound[self.bias],
        }
    }
}

/// Tape handles for one cell's weights; `w_hh` may be a masked copy.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// One LSTM step. Returns `(h, c)`.
pub fn lstm_cell(tape: &Tape, x: Var, h_prev: Var, c_prev: Var, w: &LstmWeights) -> Result<(Var, Var)> {
    let hidden = tape.shape(h_prev);
    if tape.shape(c_prev) != hidden || hidden.len() != 1 {
        return Err(Error::dim("lstm_cell", &hidden, &tape.shape(c_prev)));
    }
    let d = hidden[0];
    let gates = tape.add(
        tape.add(tape.matvec(w.w_ih, x)?, tape.matvec(w.w_hh, h_prev)?)?,
        w.bias,
    )?;
    if tape.shape(gates) != [4 * d] {
        return Err(Error::dim("lstm_cell", &tape.shape(gates), &[4 * d]));
    }
    let i = tape.sigmoid(tape.slice(gates, 0, d)?);
    let f = tape.sigmoid(tape.slice(gates, d, d)?);
    let g = tape.tanh(tape.slice(gates, 2 * d, d)?);
    let o = tape.sigmoid(tape.slice(gates, 3 * d, d)?);
    let c = tape.add(tape.mul(f, c_prev)?, tape.mul(i, g)?)?;
    let h = tape.mul(o, tape.tanh(c))?;
    Ok((h, c))
}
