//! Dense reference math: RNN and LSTM timesteps, input precomputation, and
//! activation functions. Every sparse execution path is validated against
//! these implementations, so they favor clarity and a fixed summation order
//! (ascending column index) over speed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported batch size.
pub const MAX_BATCH: usize = 1024;

/// Row-major matrix of 32-bit weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "matrix dimensions must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix data length {} does not equal {rows}x{cols}",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        DenseMatrix::new(rows, cols, vec![0.0; rows.checked_mul(cols).unwrap_or(0)])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = DenseMatrix::zeros(n, n)?;
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        Ok(m)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        DenseMatrix::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// H x B activation block, sample-interleaved: element (j, b) lives at
/// offset j*B + b, so one activation's samples are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    hidden: usize,
    batch: usize,
    data: Vec<f32>,
}

impl ActivationBatch {
    pub fn new(hidden: usize, batch: usize, data: Vec<f32>) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::shape("activation batch needs hidden >= 1".to_string()));
        }
        if !batch.is_power_of_two() || batch > MAX_BATCH {
            return Err(Error::parameter(format!(
                "batch must be a power of two in 1..={MAX_BATCH}, got {batch}"
            )));
        }
        if data.len() != hidden * batch {
            return Err(Error::shape(format!(
                "activation data length {} does not equal {hidden}x{batch}",
                data.len()
            )));
        }
        Ok(ActivationBatch { hidden, batch, data })
    }

    pub fn zeros(hidden: usize, batch: usize) -> Result<Self> {
        ActivationBatch::new(hidden, batch, vec![0.0; hidden * batch])
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, j: usize, b: usize) -> f32 {
        self.data[j * self.batch + b]
    }

    pub fn set(&mut self, j: usize, b: usize, v: f32) {
        self.data[j * self.batch + b] = v;
    }
}

/// Per-row additive term: either one value per row (broadcast over samples)
/// or a full rows x batch block. For gate-stacked cells the row count is 4H.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasTerm {
    rows: usize,
    batch: Option<usize>,
    data: Vec<f32>,
}

impl BiasTerm {
    /// One value per row, shared by every sample.
    pub fn broadcast(data: Vec<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::shape("bias needs at least one row".to_string()));
        }
        Ok(BiasTerm {
            rows: data.len(),
            batch: None,
            data,
        })
    }

    /// Distinct value per (row, sample), interleaved like ActivationBatch.
    pub fn per_sample(rows: usize, batch: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::shape("bias needs at least one row".to_string()));
        }
        if data.len() != rows * batch {
            return Err(Error::shape(format!(
                "bias data length {} does not equal {rows}x{batch}",
                data.len()
            )));
        }
        Ok(BiasTerm {
            rows,
            batch: Some(batch),
            data,
        })
    }

    pub fn zeros(rows: usize) -> Result<Self> {
        BiasTerm::broadcast(vec![0.0; rows])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// None means broadcast.
    pub fn batch(&self) -> Option<usize> {
        self.batch
    }

    pub fn at(&self, row: usize, sample: usize) -> f32 {
        match self.batch {
            None => self.data[row],
            Some(b) => self.data[row * b + sample],
        }
    }

    /// Checks this bias can feed a step with the given row count and batch.
    pub(crate) fn check(&self, rows: usize, batch: usize, what: &str) -> Result<()> {
        if self.rows != rows {
            return Err(Error::shape(format!(
                "{what}: bias covers {} rows, step needs {rows}",
                self.rows
            )));
        }
        if let Some(b) = self.batch {
            if b != batch {
                return Err(Error::shape(format!(
                    "{what}: bias batch {b} does not match activation batch {batch}"
                )));
            }
        }
        Ok(())
    }
}

/// Elementwise nonlinearity applied after the reduce stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationFn {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl ActivationFn {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            ActivationFn::Tanh => x.tanh(),
            ActivationFn::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            ActivationFn::Sigmoid => sigmoid(x),
            ActivationFn::Identity => x,
        }
    }
}

impl std::str::FromStr for ActivationFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(ActivationFn::Tanh),
            "relu" => Ok(ActivationFn::Relu),
            "sigmoid" => Ok(ActivationFn::Sigmoid),
            "identity" => Ok(ActivationFn::Identity),
            other => Err(Error::parameter(format!(
                "unknown activation '{other}' (expected tanh|relu|sigmoid|identity)"
            ))),
        }
    }
}

impl std::fmt::Display for ActivationFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ActivationFn::Tanh => "tanh",
            ActivationFn::Relu => "relu",
            ActivationFn::Sigmoid => "sigmoid",
            ActivationFn::Identity => "identity",
        };
        f.write_str(s)
    }
}

/// Numerically stable logistic function; split to avoid exp overflow.
fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Folds the input projection into the bias once per timestep:
/// returns W*x_t + b for every x_t. The recurrent loop then only needs the
/// per-step additive term.
pub fn precompute_input(
    w: &DenseMatrix,
    x_seq: &[ActivationBatch],
    b: &BiasTerm,
) -> Result<Vec<BiasTerm>> {
    b.check(w.rows(), x_seq.first().map_or(1, |x| x.batch()), "precompute_input")?;
    let mut out = Vec::with_capacity(x_seq.len());
    for (t, x) in x_seq.iter().enumerate() {
        if x.hidden() != w.cols() {
            return Err(Error::shape(format!(
                "precompute_input: x_{t} has width {}, W has {} columns",
                x.hidden(),
                w.cols()
            )));
        }
        if x.batch() != x_seq[0].batch() {
            return Err(Error::shape(format!(
                "precompute_input: x_{t} batch {} differs from x_0 batch {}",
                x.batch(),
                x_seq[0].batch()
            )));
        }
        let batch = x.batch();
        let mut data = vec![0.0f32; w.rows() * batch];
        for j in 0..w.rows() {
            let wrow = w.row(j);
            for s in 0..batch {
                let mut acc = 0.0f32;
                for (k, &wv) in wrow.iter().enumerate() {
                    acc += wv * x.get(k, s);
                }
                data[j * batch + s] = acc + b.at(j, s);
            }
        }
        out.push(BiasTerm::per_sample(w.rows(), batch, data)?);
    }
    Ok(out)
}

/// One recurrent step: h_t(j,b) = g(sum_k U[j,k]*h_prev(k,b) + bias(j,b)),
/// summed in ascending k order.
pub fn rnn_step_dense(
    u_r: &DenseMatrix,
    h_prev: &ActivationBatch,
    b_prime: &BiasTerm,
    g: ActivationFn,
) -> Result<ActivationBatch> {
    let h = h_prev.hidden();
    if u_r.rows() != h || u_r.cols() != h {
        return Err(Error::shape(format!(
            "rnn_step_dense: weights are {}x{}, hidden state has {h} elements",
            u_r.rows(),
            u_r.cols()
        )));
    }
    b_prime.check(h, h_prev.batch(), "rnn_step_dense")?;
    let batch = h_prev.batch();
    let mut out = ActivationBatch::zeros(h, batch)?;
    for j in 0..h {
        let urow = u_r.row(j);
        for s in 0..batch {
            let mut acc = 0.0f32;
            for (k, &uv) in urow.iter().enumerate() {
                acc += uv * h_prev.get(k, s);
            }
            out.set(j, s, g.apply(acc + b_prime.at(j, s)));
        }
    }
    Ok(out)
}

/// Gate block order within the stacked 4H-row weight matrix and bias.
/// Row j holds the input gate of unit j, row H+j the forget gate,
/// row 2H+j the cell candidate, row 3H+j the output gate.
pub const LSTM_GATES: usize = 4;

/// One LSTM step over a 4H x H stacked gate matrix. Gate rows use sigmoid
/// for input/forget/output and tanh for the cell candidate:
/// c_t = f*c_prev + i*g_cand, h_t = o*tanh(c_t).
pub fn lstm_step_dense(
    u_gates: &DenseMatrix,
    h_prev: &ActivationBatch,
    c_prev: &ActivationBatch,
    b_prime: &BiasTerm,
) -> Result<(ActivationBatch, ActivationBatch)> {
    let h = h_prev.hidden();
    if u_gates.rows() % LSTM_GATES != 0 {
        return Err(Error::shape(format!(
            "lstm_step_dense: gate matrix rows {} not divisible by {LSTM_GATES}",
            u_gates.rows()
        )));
    }
    if u_gates.rows() != LSTM_GATES * h || u_gates.cols() != h {
        return Err(Error::shape(format!(
            "lstm_step_dense: gate matrix is {}x{}, hidden state has {h} elements",
            u_gates.rows(),
            u_gates.cols()
        )));
    }
    if c_prev.hidden() != h || c_prev.batch() != h_prev.batch() {
        return Err(Error::shape(
            "lstm_step_dense: cell state shape differs from hidden state".to_string(),
        ));
    }
    b_prime.check(LSTM_GATES * h, h_prev.batch(), "lstm_step_dense")?;

    let batch = h_prev.batch();
    let mut h_t = ActivationBatch::zeros(h, batch)?;
    let mut c_t = ActivationBatch::zeros(h, batch)?;
    for j in 0..h {
        for s in 0..batch {
            let mut pre = [0.0f32; LSTM_GATES];
            for (gate, p) in pre.iter_mut().enumerate() {
                let row = u_gates.row(gate * h + j);
                let mut acc = 0.0f32;
                for (k, &uv) in row.iter().enumerate() {
                    acc += uv * h_prev.get(k, s);
                }
                *p = acc + b_prime.at(gate * h + j, s);
            }
            let i_gate = sigmoid(pre[0]);
            let f_gate = sigmoid(pre[1]);
            let g_cand = pre[2].tanh();
            let o_gate = sigmoid(pre[3]);
            let c_new = f_gate * c_prev.get(j, s) + i_gate * g_cand;
            c_t.set(j, s, c_new);
            h_t.set(j, s, o_gate * c_new.tanh());
        }
    }
    Ok((h_t, c_t))
}

/// Iterates rnn_step_dense over the bias sequence. Returns the final state
/// and, when `trace` is set, every intermediate h_t in order.
pub fn run_rnn_sequence_dense(
    u_r: &DenseMatrix,
    h0: &ActivationBatch,
    biases: &[BiasTerm],
    g: ActivationFn,
    trace: bool,
) -> Result<(ActivationBatch, Option<Vec<ActivationBatch>>)> {
    let mut h = h0.clone();
    let mut steps = trace.then(|| Vec::with_capacity(biases.len()));
    for b in biases {
        h = rnn_step_dense(u_r, &h, b, g)?;
        if let Some(s) = steps.as_mut() {
            s.push(h.clone());
        }
    }
    Ok((h, steps))
}

/// LSTM counterpart of run_rnn_sequence_dense; also returns the final cell
/// state.
pub fn run_lstm_sequence_dense(
    u_gates: &DenseMatrix,
    h0: &ActivationBatch,
    c0: &ActivationBatch,
    biases: &[BiasTerm],
    trace: bool,
) -> Result<(ActivationBatch, ActivationBatch, Option<Vec<ActivationBatch>>)> {
    let mut h = h0.clone();
    let mut c = c0.clone();
    let mut steps = trace.then(|| Vec::with_capacity(biases.len()));
    for b in biases {
        let (h_next, c_next) = lstm_step_dense(u_gates, &h, &c, b)?;
        h = h_next;
        c = c_next;
        if let Some(s) = steps.as_mut() {
            s.push(h.clone());
        }
    }
    Ok((h, c, steps))
}
