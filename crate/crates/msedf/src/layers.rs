//! Trainable layers: linear projections, token embedding, GRU cells, and
//! inverted dropout.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Whether a forward pass applies dropout. `Train` carries the mask stream so
/// the same model code serves both phases; `Eval` passes are pure functions.
#[derive(Clone, Copy)]
pub enum Mode<'a> {
    Eval,
    Train(&'a Dropout),
}

impl<'a> Mode<'a> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    fn apply(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        match self {
            Mode::Eval => Ok(x.clone()),
            Mode::Train(d) => d.apply(tape, x),
        }
    }
}

/// Inverted dropout: each component is zeroed with probability `rate` and
/// survivors are scaled by `1/(1-rate)`, so the expectation is unchanged.
/// Masks are drawn from a seeded stream, making training runs replayable.
pub struct Dropout {
    rate: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Result<Dropout> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        Ok(Dropout {
            rate,
            rng: RefCell::new(rand::SeedableRng::seed_from_u64(seed)),
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Draw a fresh mask and apply it. With rate 0 this is the identity.
    pub fn apply(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        if self.rate == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = {
            let mut rng = self.rng.borrow_mut();
            (0..x.len())
                .map(|_| {
                    if rng.gen::<f64>() < self.rate {
                        0.0
                    } else {
                        1.0 / keep
                    }
                })
                .collect()
        };
        let (rows, cols) = x.shape();
        let mask = Tensor::from_vec(rows, cols, mask)?;
        tape.hadamard(x, &mask)
    }
}

/// Standalone dropout application, mode-aware.
pub fn apply_dropout(tape: &Tape, mode: Mode, x: &Tensor) -> Result<Tensor> {
    mode.apply(tape, x)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Gelu,
    None,
}

/// Fully connected layer `activation(x W + b)` with `W: in x out`.
pub struct LinearLayer {
    w: Tensor,
    b: Tensor,
    activation: Activation,
}

impl LinearLayer {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut ChaCha8Rng) -> LinearLayer {
        LinearLayer {
            w: glorot_uniform(in_dim, out_dim, rng),
            b: Tensor::zeros(1, out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Tensor {
        &self.w
    }

    pub fn bias(&self) -> &Tensor {
        &self.b
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let lin = tape.matmul(x, &self.w)?;
        let lin = tape.add(&lin, &self.b)?;
        Ok(match self.activation {
            Activation::Gelu => tape.gelu(&lin),
            Activation::None => lin,
        })
    }

    pub fn deep_clone(&self) -> LinearLayer {
        LinearLayer {
            w: self.w.deep_clone(),
            b: self.b.deep_clone(),
            activation: self.activation,
        }
    }
}

/// Token embedding table. Row 0 is the reserved padding row.
pub struct EmbeddingLayer {
    table: Tensor,
}

impl EmbeddingLayer {
    pub fn new(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingLayer {
        EmbeddingLayer {
            table: glorot_uniform(rows, dim, rng),
        }
    }

    pub fn rows(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    /// Row view of the table; the gradient accumulates into that row only.
    pub fn lookup(&self, tape: &Tape, token_id: usize) -> Result<Tensor> {
        tape.lookup_row(&self.table, token_id)
    }

    pub fn deep_clone(&self) -> EmbeddingLayer {
        EmbeddingLayer {
            table: self.table.deep_clone(),
        }
    }
}

/// One GRU cell. Update gate `z`, reset gate `r`, candidate `h~`:
///
/// ```text
/// z  = sigmoid(x Wz + h Uz + bz)
/// r  = sigmoid(x Wr + h Ur + br)
/// h~ = tanh(x Wh + (r ⊙ h) Uh + bh)
/// h' = (1 - z) ⊙ h + z ⊙ h~
/// ```
///
/// The `(1-z) ⊙ h + z ⊙ h~` convention is fixed here; with all parameters
/// zero a step halves the hidden state exactly.
pub struct GruCell {
    pub wz: Tensor,
    pub wr: Tensor,
    pub wh: Tensor,
    pub uz: Tensor,
    pub ur: Tensor,
    pub uh: Tensor,
    pub bz: Tensor,
    pub br: Tensor,
    pub bh: Tensor,
}

impl GruCell {
    pub fn new(in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> GruCell {
        GruCell {
            wz: glorot_uniform(in_dim, hidden, rng),
            wr: glorot_uniform(in_dim, hidden, rng),
            wh: glorot_uniform(in_dim, hidden, rng),
            uz: glorot_uniform(hidden, hidden, rng),
            ur: glorot_uniform(hidden, hidden, rng),
            uh: glorot_uniform(hidden, hidden, rng),
            bz: Tensor::zeros(1, hidden),
            br: Tensor::zeros(1, hidden),
            bh: Tensor::zeros(1, hidden),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.wz.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.wz.cols()
    }

    pub fn step(&self, tape: &Tape, x: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
        let z = {
            let a = tape.matmul(x, &self.wz)?;
            let b = tape.matmul(h_prev, &self.uz)?;
            let s = tape.add(&tape.add(&a, &b)?, &self.bz)?;
            tape.sigmoid(&s)
        };
        let r = {
            let a = tape.matmul(x, &self.wr)?;
            let b = tape.matmul(h_prev, &self.ur)?;
            let s = tape.add(&tape.add(&a, &b)?, &self.br)?;
            tape.sigmoid(&s)
        };
        let candidate = {
            let a = tape.matmul(x, &self.wh)?;
            let gated = tape.hadamard(&r, h_prev)?;
            let b = tape.matmul(&gated, &self.uh)?;
            let s = tape.add(&tape.add(&a, &b)?, &self.bh)?;
            tape.tanh(&s)
        };
        let keep = tape.hadamard(&tape.one_minus(&z), h_prev)?;
        let update = tape.hadamard(&z, &candidate)?;
        tape.add(&keep, &update)
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("wz", &self.wz),
            ("uz", &self.uz),
            ("bz", &self.bz),
            ("wr", &self.wr),
            ("ur", &self.ur),
            ("br", &self.br),
            ("wh", &self.wh),
            ("uh", &self.uh),
            ("bh", &self.bh),
        ]
    }

    pub fn deep_clone(&self) -> GruCell {
        GruCell {
            wz: self.wz.deep_clone(),
            wr: self.wr.deep_clone(),
            wh: self.wh.deep_clone(),
            uz: self.uz.deep_clone(),
            ur: self.ur.deep_clone(),
            uh: self.uh.deep_clone(),
            bz: self.bz.deep_clone(),
            br: self.br.deep_clone(),
            bh: self.bh.deep_clone(),
        }
    }
}

/// Run a stack of GRU cells over an input sequence. Layer 0 consumes
/// `inputs`; layer i consumes layer i-1's output sequence, with dropout on
/// the inter-layer wires in train mode. Returns every layer's full output
/// sequence (`result[layer][t]`), which the stacking strategies need.
pub fn gru_sequence(
    tape: &Tape,
    cells: &[GruCell],
    inputs: &[Tensor],
    h0: &[Tensor],
    mode: Mode,
) -> Result<Vec<Vec<Tensor>>> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("gru_sequence inputs"));
    }
    if cells.len() != h0.len() {
        return Err(Error::ShapeMismatch {
            op: "gru_sequence h0",
            lhs: (cells.len(), 0),
            rhs: (h0.len(), 0),
        });
    }
    let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(cells.len());
    for (layer, cell) in cells.iter().enumerate() {
        let mut h = h0[layer].clone();
        let mut outs = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let x = if layer == 0 {
                inputs[t].clone()
            } else {
                mode.apply(tape, &per_layer[layer - 1][t])?
            };
            h = cell.step(tape, &x, &h)?;
            outs.push(h.clone());
        }
        per_layer.push(outs);
    }
    Ok(per_layer)
}

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
fn glorot_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let values: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::from_vec(rows, cols, values).expect("length matches shape")
}
