//! Temporal operators on one window.
//!
//! A window is an `L×d` tensor whose last row is the current frame. Weights
//! use the row-vector convention (`x·W`), so a per-frame linear map from
//! `d_in` to `d_out` is a `d_in×d_out` matrix.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::spec::RnnOutput;
use crate::tensor::{real, Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Training-time dropout: the RNG that draws masks and the drop probability.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply<T: Real>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let [r, c] = tape.shape(x);
        let keep: T = real(1.0 / (1.0 - self.rate));
        let data = (0..r * c)
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mask = tape.constant(Matrix::from_vec(r, c, data));
        tape.mul(x, mask)
    }
}

/// Average or maximum over the temporal axis, `L×d → 1×d`.
pub fn pool_forward<T: Real>(tape: &mut Tape<T>, kind: PoolKind, f: Var) -> Result<Var> {
    match kind {
        PoolKind::Avg => tape.mean_rows(f),
        PoolKind::Max => tape.max_rows(f),
    }
}

/// Causal dilated convolution with left zero padding of `(s-1)·rate` frames.
///
/// `w` stacks the `s` taps vertically: rows `i·d_in..(i+1)·d_in` weight the
/// frame `t - rate·i`. Output length equals input length.
pub fn tc_forward<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    rate: usize,
    kernel_size: usize,
    w: Var,
    b: Var,
) -> Result<Var> {
    if rate == 0 || kernel_size == 0 {
        return Err(Error::Config("dilation rate and kernel size must be positive".into()));
    }
    let taps: Vec<Var> = (0..kernel_size)
        .map(|i| if i == 0 { f } else { tape.shift_rows(f, rate * i) })
        .collect();
    let stacked = if taps.len() == 1 { f } else { tape.concat_cols(&taps)? };
    let out = tape.matmul(stacked, w)?;
    tape.add_row(out, b)
}

/// Parallel dilated branches, frame-wise concatenation, then a per-frame
/// linear map back to `d`.
pub fn pdc_forward<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    rates: &[usize],
    kernel_size: usize,
    branches: &[(Var, Var)],
    reduce: (Var, Var),
) -> Result<Var> {
    if rates.is_empty() || rates.len() != branches.len() {
        return Err(Error::Config(format!(
            "PDC needs one branch per rate ({} rates, {} branches)",
            rates.len(),
            branches.len()
        )));
    }
    let outs = rates
        .iter()
        .zip(branches)
        .map(|(&r, &(w, b))| tc_forward(tape, f, r, kernel_size, w, b))
        .collect::<Result<Vec<_>>>()?;
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let out = tape.matmul(cat, reduce.0)?;
    tape.add_row(out, reduce.1)
}

#[derive(Clone, Copy, Debug)]
pub struct DccLayer {
    pub conv_w: Var,
    pub conv_b: Var,
    pub res_w: Var,
    pub res_b: Var,
}

/// Stacked dilated causal convolutions with learned residual maps:
/// `h = ReLU(conv(x))`, then `x' = h + x·W_res + b_res`.
pub fn dcc_forward<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    rates: &[usize],
    kernel_size: usize,
    layers: &[DccLayer],
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    if rates.len() != layers.len() {
        return Err(Error::Config("DCC needs one rate per layer".into()));
    }
    let mut x = f;
    for (&rate, layer) in rates.iter().zip(layers) {
        let conv = tc_forward(tape, x, rate, kernel_size, layer.conv_w, layer.conv_b)?;
        let mut h = tape.relu(conv);
        if let Some(d) = dropout.as_deref_mut() {
            h = d.apply(tape, h)?;
        }
        let res = tape.matmul(x, layer.res_w)?;
        let res = tape.add_row(res, layer.res_b)?;
        x = tape.add(h, res)?;
    }
    Ok(x)
}

/// Gate order: input, forget, cell candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w: [Var; 4],
    pub u: [Var; 4],
    /// Diagonal peepholes for the input, forget and output gates.
    pub v: [Var; 3],
    pub b: [Var; 4],
}

fn gate<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    w: Var,
    h: Var,
    u: Var,
    extra: Option<Var>,
    b: Option<Var>,
) -> Result<Var> {
    let a = tape.matmul(f, w)?;
    let r = tape.matmul(h, u)?;
    let mut s = tape.add(a, r)?;
    if let Some(e) = extra {
        s = tape.add(s, e)?;
    }
    match b {
        Some(b) => tape.add_row(s, b),
        None => Ok(s),
    }
}

/// One peephole LSTM step on row vectors; returns `(h_t, c_t)`.
pub fn lstm_cell<T: Real>(
    tape: &mut Tape<T>,
    f_t: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmParams,
) -> Result<(Var, Var)> {
    let peep_i = tape.mul(p.v[0], c_prev)?;
    let pre_i = gate(tape, f_t, p.w[0], h_prev, p.u[0], Some(peep_i), Some(p.b[0]))?;
    let i = tape.sigmoid(pre_i);

    let peep_g = tape.mul(p.v[1], c_prev)?;
    let pre_g = gate(tape, f_t, p.w[1], h_prev, p.u[1], Some(peep_g), Some(p.b[1]))?;
    let g = tape.sigmoid(pre_g);

    let pre_c = gate(tape, f_t, p.w[2], h_prev, p.u[2], None, Some(p.b[2]))?;
    let cand = tape.tanh(pre_c);
    let keep = tape.mul(g, c_prev)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;

    // the output-gate peephole reads the updated cell
    let peep_o = tape.mul(p.v[2], c)?;
    let pre_o = gate(tape, f_t, p.w[3], h_prev, p.u[3], Some(peep_o), Some(p.b[3]))?;
    let o = tape.sigmoid(pre_o);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Gate order: reset, candidate, update.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w: [Var; 3],
    pub u: [Var; 3],
}

/// One GRU step: `h = (1 - z)⊙h_prev + z⊙h̃`.
pub fn gru_cell<T: Real>(tape: &mut Tape<T>, f_t: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    let pre_r = gate(tape, f_t, p.w[0], h_prev, p.u[0], None, None)?;
    let r = tape.sigmoid(pre_r);
    let rh = tape.mul(r, h_prev)?;
    let pre_h = gate(tape, f_t, p.w[1], rh, p.u[1], None, None)?;
    let cand = tape.tanh(pre_h);
    let pre_z = gate(tape, f_t, p.w[2], h_prev, p.u[2], None, None)?;
    let z = tape.sigmoid(pre_z);
    let one_minus_z = tape.affine(z, -T::one(), T::one());
    let keep = tape.mul(one_minus_z, h_prev)?;
    let write = tape.mul(z, cand)?;
    tape.add(keep, write)
}

#[derive(Clone, Debug)]
pub enum RnnParams {
    Lstm(Vec<LstmParams>),
    Gru(Vec<GruParams>),
}

impl RnnParams {
    fn num_layers(&self) -> usize {
        match self {
            RnnParams::Lstm(l) => l.len(),
            RnnParams::Gru(l) => l.len(),
        }
    }
}

/// Per-step hidden states of the top layer, one row vector per frame.
/// States start at zero and layer `j` reads the hidden sequence of layer `j-1`.
pub fn rnn_states<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    hidden: usize,
    params: &RnnParams,
) -> Result<Vec<Var>> {
    let steps = tape.shape(f)[0];
    if steps == 0 || params.num_layers() == 0 {
        return Err(Error::Contract("recurrent forward over an empty window".into()));
    }
    let mut inputs = (0..steps).map(|t| tape.row(f, t)).collect::<Result<Vec<_>>>()?;
    for layer in 0..params.num_layers() {
        let mut h = tape.constant(Matrix::zeros(1, hidden));
        let mut c = tape.constant(Matrix::zeros(1, hidden));
        let mut outs = Vec::with_capacity(steps);
        for &x in &inputs {
            match params {
                RnnParams::Lstm(ls) => {
                    let (h2, c2) = lstm_cell(tape, x, h, c, &ls[layer])?;
                    h = h2;
                    c = c2;
                }
                RnnParams::Gru(gs) => h = gru_cell(tape, x, h, &gs[layer])?,
            }
            outs.push(h);
        }
        inputs = outs;
    }
    Ok(inputs)
}

/// Hidden sequence as an `L×D_h` tensor.
pub fn rnn_sequence<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    hidden: usize,
    params: &RnnParams,
) -> Result<Var> {
    let states = rnn_states(tape, f, hidden, params)?;
    tape.concat_rows(&states)
}

/// Single representation from a recurrent pass: last or averaged hidden state.
pub fn rnn_forward<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    hidden: usize,
    params: &RnnParams,
    output: RnnOutput,
) -> Result<Var> {
    let states = rnn_states(tape, f, hidden, params)?;
    match output {
        RnnOutput::LastHidden => Ok(*states.last().expect("nonempty window")),
        RnnOutput::AverageHidden => {
            let seq = tape.concat_rows(&states)?;
            tape.mean_rows(seq)
        }
    }
}

/// Representation plus the attention weights that produced it.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Option<Var>,
}

fn attend_scores<T: Real>(tape: &mut Tape<T>, scores: Var, f: Var) -> Result<Attended> {
    let row = tape.transpose(scores);
    let a = tape.softmax_rows(row);
    let output = tape.matmul(a, f)?;
    Ok(Attended {
        output,
        weights: Some(a),
    })
}

/// `a = softmax(F·w + b)`, `S = a·F`.
pub fn naive_sa<T: Real>(tape: &mut Tape<T>, f: Var, w: Var, b: Var) -> Result<Attended> {
    let s = tape.matmul(f, w)?;
    let s = tape.add_row(s, b)?;
    attend_scores(tape, s, f)
}

/// `a = softmax(tanh(F·U1 + b1)·U2 + b2)`, `S = a·F`.
pub fn nonlinear_sa<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    u1: Var,
    b1: Var,
    u2: Var,
    b2: Var,
) -> Result<Attended> {
    let h = tape.matmul(f, u1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.tanh(h);
    let s = tape.matmul(h, u2)?;
    let s = tape.add_row(s, b2)?;
    attend_scores(tape, s, f)
}

/// Epsilon of the per-window feature standardization on Non-local projections.
pub const WINDOW_NORM_EPS: f64 = 1e-5;

/// Non-local block: `Q, K = ReLU(norm(F·W))`, `A = softmax(QKᵀ/√d_m)`,
/// `F' = A·F + F`, `S = mean_t F'_t`. Weights are the rows of `A` (`L×L`).
pub fn nonlocal_forward<T: Real>(tape: &mut Tape<T>, f: Var, wq: Var, wk: Var) -> Result<Attended> {
    let dm = tape.shape(wq)[1];
    let project = |tape: &mut Tape<T>, w: Var| -> Result<Var> {
        let p = tape.matmul(f, w)?;
        let p = tape.standardize_cols(p, real(WINDOW_NORM_EPS))?;
        Ok(tape.relu(p))
    };
    let q = project(tape, wq)?;
    let k = project(tape, wk)?;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, real(1.0 / (dm as f64).sqrt()));
    let a = tape.softmax_rows(scores);
    let af = tape.matmul(a, f)?;
    let fp = tape.add(af, f)?;
    let output = tape.mean_rows(fp)?;
    Ok(Attended {
        output,
        weights: Some(a),
    })
}

/// Current-frame query over the history: `a = softmax(q·K̄ᵀ/√d_m)`,
/// `S = a·F̄ + f_L`. A one-frame window has no history and returns `f_L`.
pub fn transformer_q<T: Real>(tape: &mut Tape<T>, f: Var, wq: Var, wk: Var) -> Result<Attended> {
    let steps = tape.shape(f)[0];
    if steps == 0 {
        return Err(Error::Contract("attention over an empty window".into()));
    }
    let current = tape.row(f, steps - 1)?;
    if steps == 1 {
        return Ok(Attended {
            output: current,
            weights: None,
        });
    }
    let dm = tape.shape(wq)[1];
    let history = tape.slice_rows(f, 0, steps - 1)?;
    let q = tape.matmul(current, wq)?;
    let k = tape.matmul(history, wk)?;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, real(1.0 / (dm as f64).sqrt()));
    let a = tape.softmax_rows(scores);
    let ctx = tape.matmul(a, history)?;
    let output = tape.add(ctx, current)?;
    Ok(Attended {
        output,
        weights: Some(a),
    })
}

/// Class logits `S·W + b`, index 0 being background.
pub fn classify<T: Real>(tape: &mut Tape<T>, s: Var, w: Var, b: Var) -> Result<Var> {
    let (sv, wv) = (tape.shape(s), tape.shape(w));
    if sv[1] != wv[0] {
        return Err(Error::Config(format!(
            "classifier expects a {}-wide representation, got {}",
            wv[0], sv[1]
        )));
    }
    let z = tape.matmul(s, w)?;
    tape.add_row(z, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check;
    use rand::SeedableRng;

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn leaf(tape: &mut Tape<f64>, rows: &[&[f64]]) -> Var {
        tape.leaf(Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()))
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::<f64>::new();
        let f = leaf(&mut tape, &[&[1.0, 4.0], &[3.0, 2.0]]);
        let avg = pool_forward(&mut tape, PoolKind::Avg, f).unwrap();
        let max = pool_forward(&mut tape, PoolKind::Max, f).unwrap();
        assert_eq!(tape.value(avg).as_slice(), &[2.0, 3.0]);
        assert_eq!(tape.value(max).as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn tc_sums_current_and_dilated_past() {
        // s=2, rate 2, identity taps: y_t = f_t + f_{t-2}
        let mut tape = Tape::<f64>::new();
        let f = leaf(&mut tape, &[&[1.0], &[2.0], &[3.0], &[4.0]]);
        let w = leaf(&mut tape, &[&[1.0], &[1.0]]);
        let b = leaf(&mut tape, &[&[0.0]]);
        let y = tc_forward(&mut tape, f, 2, 2, w, b).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn transformer_single_frame_is_identity() {
        let mut tape = Tape::<f64>::new();
        let f = leaf(&mut tape, &[&[0.5, -2.0]]);
        let wq = leaf(&mut tape, &[&[1.0], &[1.0]]);
        let wk = leaf(&mut tape, &[&[1.0], &[1.0]]);
        let a = transformer_q(&mut tape, f, wq, wk).unwrap();
        assert_eq!(tape.value(a.output).as_slice(), &[0.5, -2.0]);
        assert!(a.weights.is_none());
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(rand_matrix(&mut rng, 5, 3));
        let w = tape.leaf(rand_matrix(&mut rng, 3, 1));
        let b = tape.leaf(rand_matrix(&mut rng, 1, 1));
        let wq = tape.leaf(rand_matrix(&mut rng, 3, 2));
        let wk = tape.leaf(rand_matrix(&mut rng, 3, 2));
        let outs = [
            naive_sa(&mut tape, f, w, b).unwrap(),
            nonlocal_forward(&mut tape, f, wq, wk).unwrap(),
            transformer_q(&mut tape, f, wq, wk).unwrap(),
        ];
        for a in outs {
            let wts = tape.value(a.weights.unwrap()).clone();
            for r in 0..wts.rows() {
                assert!((wts.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classify_rejects_width_mismatch() {
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(Matrix::zeros(1, 3));
        let w = tape.leaf(Matrix::zeros(4, 2));
        let b = tape.leaf(Matrix::zeros(1, 2));
        assert!(matches!(classify(&mut tape, s, w, b), Err(Error::Config(_))));
    }

    #[test]
    fn gru_with_closed_update_gate_keeps_state() {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(Matrix::filled(1, 2, 1.0));
        let h = tape.leaf(Matrix::from_vec(1, 2, vec![0.3, -0.7]));
        let zero = |tape: &mut Tape<f64>| tape.leaf(Matrix::zeros(2, 2));
        let very_negative = tape.leaf(Matrix::filled(2, 2, -1e3));
        let p = GruParams {
            w: [zero(&mut tape), zero(&mut tape), very_negative],
            u: [zero(&mut tape), zero(&mut tape), zero(&mut tape)],
        };
        let out = gru_cell(&mut tape, f, h, &p).unwrap();
        assert_eq!(tape.value(out).as_slice(), &[0.3, -0.7]);
    }

    #[test]
    fn lstm_cell_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, h) = (3, 4);
        let mut inputs = vec![rand_matrix(&mut rng, 1, d), rand_matrix(&mut rng, 1, h), rand_matrix(&mut rng, 1, h)];
        for _ in 0..4 {
            inputs.push(rand_matrix(&mut rng, d, h));
        }
        for _ in 0..4 {
            inputs.push(rand_matrix(&mut rng, h, h));
        }
        for _ in 0..7 {
            inputs.push(rand_matrix(&mut rng, 1, h));
        }
        let report = check(&inputs, |tape, v| {
            let p = LstmParams {
                w: [v[3], v[4], v[5], v[6]],
                u: [v[7], v[8], v[9], v[10]],
                v: [v[11], v[12], v[13]],
                b: [v[14], v[15], v[16], v[17]],
            };
            let (hh, c) = lstm_cell(tape, v[0], v[1], v[2], &p)?;
            let both = tape.concat_cols(&[hh, c])?;
            let sq = tape.mul(both, both)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn gru_cell_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, h) = (3, 4);
        let mut inputs = vec![rand_matrix(&mut rng, 1, d), rand_matrix(&mut rng, 1, h)];
        for _ in 0..3 {
            inputs.push(rand_matrix(&mut rng, d, h));
        }
        for _ in 0..3 {
            inputs.push(rand_matrix(&mut rng, h, h));
        }
        let report = check(&inputs, |tape, v| {
            let p = GruParams { w: [v[2], v[3], v[4]], u: [v[5], v[6], v[7]] };
            let out = gru_cell(tape, v[0], v[1], &p)?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn nonlocal_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![rand_matrix(&mut rng, 4, 3), rand_matrix(&mut rng, 3, 2), rand_matrix(&mut rng, 3, 2)];
        let report = check(&inputs, |tape, v| {
            let a = nonlocal_forward(tape, v[0], v[1], v[2])?;
            let sq = tape.mul(a.output, a.output)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
