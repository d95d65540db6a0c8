//! Embedding, LSTM/BiLSTM and dense layers.
//!
//! Sequences are batched as `[batch, length, features]`; validity masks are
//! flat `batch * length` boolean slices in the same order.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const PAD_INDEX: usize = 0;

/// Word-embedding table. Row [`PAD_INDEX`] is all zeros and never updated.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub table: Tensor,
    pub pad_index: usize,
    pub trainable: bool,
}

impl EmbeddingTable {
    /// Rows drawn from U(-a, a), a = sqrt(6 / (1 + dim)), padding row zeroed.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (1 + dim) as f64).sqrt();
        let mut data: Vec<f64> = (0..vocab_size * dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        data[PAD_INDEX * dim..(PAD_INDEX + 1) * dim].fill(0.0);
        EmbeddingTable {
            table: Tensor::new(&[vocab_size, dim], data).expect("shape"),
            pad_index: PAD_INDEX,
            trainable: true,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn row(&self, index: usize) -> &[f64] {
        let d = self.dim();
        &self.table.data()[index * d..(index + 1) * d]
    }
}

/// Looks up `tokens` (row-major `[batch, len]`) and returns `[batch, len, dim]`.
pub fn embed(
    tape: &mut Tape,
    table: Var,
    tokens: &[usize],
    batch: usize,
    len: usize,
) -> Result<Var> {
    if len == 0 || batch == 0 {
        return Err(Error::Input("empty token sequence".into()));
    }
    tape.lookup(table, tokens, &[batch, len])
}

/// Gate weights `[hidden, input + hidden]` and biases `[hidden]` of one LSTM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams<H> {
    pub w_input: H,
    pub w_forget: H,
    pub w_output: H,
    pub w_cell: H,
    pub b_input: H,
    pub b_forget: H,
    pub b_output: H,
    pub b_cell: H,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmParams<ParamId> {
    /// Glorot-initialized weights, zero biases except the forget gate (1.0).
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut w = |gate: &str, rng: &mut _| {
            store.add(
                format!("{prefix}.w_{gate}"),
                ParamKind::Weight,
                xavier_uniform(rng, &[hidden, input_dim + hidden]),
            )
        };
        let (w_input, w_forget, w_output, w_cell) = (
            w("input", rng),
            w("forget", rng),
            w("output", rng),
            w("cell", rng),
        );
        let mut b = |gate: &str, init: f64| {
            store.add(
                format!("{prefix}.b_{gate}"),
                ParamKind::Bias,
                Tensor::full(&[hidden], init),
            )
        };
        LstmParams {
            w_input,
            w_forget,
            w_output,
            w_cell,
            b_input: b("input", 0.0),
            b_forget: b("forget", 1.0),
            b_output: b("output", 0.0),
            b_cell: b("cell", 0.0),
            input_dim,
            hidden,
        }
    }

    pub fn bind(&self, vars: &[Var]) -> LstmParams<Var> {
        let v = |id: ParamId| vars[id.index()];
        LstmParams {
            w_input: v(self.w_input),
            w_forget: v(self.w_forget),
            w_output: v(self.w_output),
            w_cell: v(self.w_cell),
            b_input: v(self.b_input),
            b_forget: v(self.b_forget),
            b_output: v(self.b_output),
            b_cell: v(self.b_cell),
            input_dim: self.input_dim,
            hidden: self.hidden,
        }
    }
}

/// One LSTM step on a batch: `x [B, d]`, `h_prev, c_prev [B, h]` to `(h, c)`.
///
/// i, f, o = sigmoid(W [x; h_prev] + b), g = tanh(W_g [x; h_prev] + b_g),
/// c = f * c_prev + i * g, h = o * tanh(c).
pub fn lstm_step(
    tape: &mut Tape,
    p: &LstmParams<Var>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let (sx, sh) = (tape.shape(x), tape.shape(h_prev));
    if sx.len() != 2 || sx[1] != p.input_dim || sh != [sx[0], p.hidden] || tape.shape(c_prev) != sh
    {
        return Err(Error::Dimension {
            op: "lstm_step",
            lhs: sx.to_vec(),
            rhs: vec![p.input_dim, p.hidden],
        });
    }
    let z = tape.concat(&[x, h_prev], 1)?;
    let mut gate = |w: Var, b: Var| -> Result<Var> {
        let a = tape.matmul_ex(z, w, false, true)?;
        tape.add(a, b)
    };
    let (ai, af, ao, ag) = (
        gate(p.w_input, p.b_input)?,
        gate(p.w_forget, p.b_forget)?,
        gate(p.w_output, p.b_output)?,
        gate(p.w_cell, p.b_cell)?,
    );
    let i = tape.sigmoid(ai);
    let f = tape.sigmoid(af);
    let o = tape.sigmoid(ao);
    let g = tape.tanh(ag);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Runs one direction over `x [B, L, d]`, returning per-position hidden states
/// `[B, L, h]`. Where `mask` is false the state is carried through unchanged.
fn run_direction(
    tape: &mut Tape,
    x: Var,
    mask: &[bool],
    p: &LstmParams<Var>,
    reverse: bool,
) -> Result<Var> {
    let (b, l, d) = match tape.shape(x) {
        &[b, l, d] => (b, l, d),
        s => {
            return Err(Error::Dimension {
                op: "bilstm",
                lhs: s.to_vec(),
                rhs: vec![p.input_dim],
            })
        }
    };
    if mask.len() != b * l {
        return Err(Error::Dimension {
            op: "bilstm mask",
            lhs: vec![b, l],
            rhs: vec![mask.len()],
        });
    }
    let mut h = tape.constant(Tensor::zeros(&[b, p.hidden]));
    let mut c = tape.constant(Tensor::zeros(&[b, p.hidden]));
    let mut outputs = vec![h; l];
    let order: Vec<usize> = if reverse {
        (0..l).rev().collect()
    } else {
        (0..l).collect()
    };
    for t in order {
        let valid: Vec<bool> = (0..b).map(|i| mask[i * l + t]).collect();
        if valid.iter().any(|&v| v) {
            let xt = tape.slice(x, 1, t, 1)?;
            let xt = tape.reshape(xt, &[b, d])?;
            let (h_new, c_new) = lstm_step(tape, p, xt, h, c)?;
            if valid.iter().all(|&v| v) {
                h = h_new;
                c = c_new;
            } else {
                let on = Tensor::new(
                    &[b, 1],
                    valid.iter().map(|&v| f64::from(u8::from(v))).collect(),
                )?;
                let off = Tensor::new(
                    &[b, 1],
                    valid.iter().map(|&v| f64::from(u8::from(!v))).collect(),
                )?;
                let (on, off) = (tape.constant(on), tape.constant(off));
                h = blend(tape, on, off, h_new, h)?;
                c = blend(tape, on, off, c_new, c)?;
            }
        }
        outputs[t] = tape.reshape(h, &[b, 1, p.hidden])?;
    }
    tape.concat(&outputs, 1)
}

fn blend(tape: &mut Tape, on: Var, off: Var, new: Var, old: Var) -> Result<Var> {
    let a = tape.mul(new, on)?;
    let b = tape.mul(old, off)?;
    tape.add(a, b)
}

/// Bidirectional LSTM over `x [B, L, d]`: position t holds the forward state
/// after positions 1..=t concatenated with the backward state after L..=t,
/// giving `[B, L, 2h]`.
pub fn bilstm(
    tape: &mut Tape,
    x: Var,
    mask: &[bool],
    fwd: &LstmParams<Var>,
    bwd: &LstmParams<Var>,
) -> Result<Var> {
    let f = run_direction(tape, x, mask, fwd, false)?;
    let b = run_direction(tape, x, mask, bwd, true)?;
    tape.concat(&[f, b], 2)
}

/// Affine map `W x + b` applied to the rows of `x [B, in]`; `W` is `[out, in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense<H> {
    pub weight: H,
    pub bias: H,
}

impl Dense<ParamId> {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Dense {
            weight: store.add(
                format!("{prefix}.weight"),
                ParamKind::Weight,
                xavier_uniform(rng, &[output, input]),
            ),
            bias: store.add(
                format!("{prefix}.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[output]),
            ),
        }
    }

    pub fn bind(&self, vars: &[Var]) -> Dense<Var> {
        Dense {
            weight: vars[self.weight.index()],
            bias: vars[self.bias.index()],
        }
    }
}

pub fn dense(tape: &mut Tape, x: Var, layer: &Dense<Var>) -> Result<Var> {
    let y = tape.matmul_ex(x, layer.weight, false, true)?;
    tape.add(y, layer.bias)
}
