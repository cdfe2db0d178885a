//! The recurrent core: a single-layer LSTM cell with an explicit forward
//! pass and exact backpropagation through time. Sequences in the target
//! data are short, so the backward pass is untruncated.
//!
//! Gate blocks are stored in the order input / forget / candidate / output,
//! stacked along the rows of the weight matrices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// Input weights, 4H x X.
    pub w: Matrix,
    /// Recurrent weights, 4H x H.
    pub u: Matrix,
    /// Gate biases, length 4H.
    pub b: Vector,
    hidden: usize,
    input: usize,
}

/// The (hidden, cell) state pair carried across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Vector,
    pub c: Vector,
}

impl CellState {
    pub fn zeros(hidden: usize) -> Self {
        CellState {
            h: Vector::zeros(hidden),
            c: Vector::zeros(hidden),
        }
    }
}

/// Per-step values cached by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Vector,
    pub h_prev: Vector,
    pub c_prev: Vector,
    pub gate_i: Vector,
    pub gate_f: Vector,
    pub gate_g: Vector,
    pub gate_o: Vector,
    pub c_new: Vector,
}

/// Accumulated parameter gradients from a backward pass.
#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub dw: Matrix,
    pub du: Matrix,
    pub db: Vector,
}

impl LstmGrads {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        LstmGrads {
            dw: Matrix::zeros(4 * hidden, input),
            du: Matrix::zeros(4 * hidden, hidden),
            db: Vector::zeros(4 * hidden),
        }
    }

    pub fn add(&mut self, other: &LstmGrads) {
        self.dw.add_scaled(1.0, &other.dw);
        self.du.add_scaled(1.0, &other.du);
        self.db.add_scaled(1.0, &other.db);
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LstmParams {
    /// Draw all parameters uniformly from [-scale, scale], deterministically
    /// for a given seed. No bias offsets are applied here; callers that want
    /// a forget-gate boost add it on top.
    pub fn init(rng_seed: u64, hidden: usize, input: usize, scale: f64) -> Result<Self> {
        if hidden == 0 || input == 0 {
            return Err(Error::Config(format!(
                "lstm dimensions must be >= 1, got hidden={hidden} input={input}"
            )));
        }
        if !(scale >= 0.0) {
            return Err(Error::Config(format!(
                "init scale must be >= 0, got {scale}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if scale == 0.0 {
                        0.0
                    } else {
                        rng.random_range(-scale..=scale)
                    }
                })
                .collect()
        };
        let mut w = Matrix::zeros(4 * hidden, input);
        w.data_mut().copy_from_slice(&draw(4 * hidden * input));
        let mut u = Matrix::zeros(4 * hidden, hidden);
        u.data_mut().copy_from_slice(&draw(4 * hidden * hidden));
        let b = Vector::from_vec(draw(4 * hidden));
        Ok(LstmParams {
            w,
            u,
            b,
            hidden,
            input,
        })
    }

    pub fn from_parts(w: Matrix, u: Matrix, b: Vector) -> Result<Self> {
        let hidden = u.cols();
        let input = w.cols();
        if w.rows() != 4 * hidden || u.rows() != 4 * hidden || b.len() != 4 * hidden {
            return Err(Error::Dimension(format!(
                "inconsistent lstm shapes: w {}x{}, u {}x{}, b {}",
                w.rows(),
                w.cols(),
                u.rows(),
                u.cols(),
                b.len()
            )));
        }
        Ok(LstmParams {
            w,
            u,
            b,
            hidden,
            input,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input(&self) -> usize {
        self.input
    }

    /// Add `boost` to the forget-gate bias block.
    pub fn boost_forget_bias(&mut self, boost: f64) {
        let h = self.hidden;
        for idx in h..2 * h {
            self.b[idx] += boost;
        }
    }

    /// One forward step. Returns the new state and the cache needed by
    /// [`lstm_backward`].
    pub fn forward(&self, x: &Vector, state: &CellState) -> Result<(CellState, StepCache)> {
        lstm_forward(self, x, state)
    }
}

pub fn lstm_forward(
    p: &LstmParams,
    x: &Vector,
    state: &CellState,
) -> Result<(CellState, StepCache)> {
    let h = p.hidden;
    if x.len() != p.input || state.h.len() != h || state.c.len() != h {
        return Err(Error::Dimension(format!(
            "lstm_forward: expected x len {}, state len {}; got x {}, h {}, c {}",
            p.input,
            h,
            x.len(),
            state.h.len(),
            state.c.len()
        )));
    }
    let mut z = p.w.matvec(x)?;
    let uh = p.u.matvec(&state.h)?;
    z.add_scaled(1.0, &uh);
    z.add_scaled(1.0, &p.b);

    let mut gate_i = Vector::zeros(h);
    let mut gate_f = Vector::zeros(h);
    let mut gate_g = Vector::zeros(h);
    let mut gate_o = Vector::zeros(h);
    let mut c_new = Vector::zeros(h);
    let mut h_new = Vector::zeros(h);
    for j in 0..h {
        gate_i[j] = sigmoid(z[j]);
        gate_f[j] = sigmoid(z[h + j]);
        gate_g[j] = z[2 * h + j].tanh();
        gate_o[j] = sigmoid(z[3 * h + j]);
        c_new[j] = gate_f[j] * state.c[j] + gate_i[j] * gate_g[j];
        h_new[j] = gate_o[j] * c_new[j].tanh();
    }
    let cache = StepCache {
        x: x.clone(),
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        gate_i,
        gate_f,
        gate_g,
        gate_o,
        c_new: c_new.clone(),
    };
    Ok((CellState { h: h_new, c: c_new }, cache))
}

/// Exact reverse-mode gradients through a full forward tape.
///
/// `dh_per_step[t]` is the upstream gradient flowing into h_t from outside
/// the recurrence. Returns parameter gradients and the gradient w.r.t. each
/// step's input.
pub fn lstm_backward(
    p: &LstmParams,
    tape: &[StepCache],
    dh_per_step: &[Vector],
) -> Result<(LstmGrads, Vec<Vector>)> {
    if tape.len() != dh_per_step.len() {
        return Err(Error::State(format!(
            "backward tape has {} steps but {} upstream gradients were supplied",
            tape.len(),
            dh_per_step.len()
        )));
    }
    let h = p.hidden;
    let mut grads = LstmGrads::zeros(h, p.input);
    let mut dx = vec![Vector::zeros(p.input); tape.len()];
    let mut dh_rec = Vector::zeros(h);
    let mut dc_rec = Vector::zeros(h);

    for t in (0..tape.len()).rev() {
        let cache = &tape[t];
        if dh_per_step[t].len() != h {
            return Err(Error::Dimension(format!(
                "upstream gradient at step {t} has length {}, expected {}",
                dh_per_step[t].len(),
                h
            )));
        }
        let mut dz = Vector::zeros(4 * h);
        for j in 0..h {
            let dh = dh_per_step[t][j] + dh_rec[j];
            let tanh_c = cache.c_new[j].tanh();
            let o = cache.gate_o[j];
            let i = cache.gate_i[j];
            let f = cache.gate_f[j];
            let g = cache.gate_g[j];

            let d_o = dh * tanh_c;
            let dc = dc_rec[j] + dh * o * (1.0 - tanh_c * tanh_c);

            dz[j] = dc * g * i * (1.0 - i);
            dz[h + j] = dc * cache.c_prev[j] * f * (1.0 - f);
            dz[2 * h + j] = dc * i * (1.0 - g * g);
            dz[3 * h + j] = d_o * o * (1.0 - o);

            dc_rec[j] = dc * f;
        }
        grads.dw.add_outer_scaled(1.0, &dz, &cache.x);
        grads.du.add_outer_scaled(1.0, &dz, &cache.h_prev);
        grads.db.add_scaled(1.0, &dz);
        dh_rec = p.u.matvec_t(&dz)?;
        dx[t] = p.w.matvec_t(&dz)?;
    }
    Ok((grads, dx))
}
