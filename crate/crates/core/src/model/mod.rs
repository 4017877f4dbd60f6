//! Temporal operators, hybrid chains and the classification head.

pub mod ops;
pub mod params;
pub mod spec;

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

pub use ops::{Attended, Dropout, PoolKind};
pub use params::{Bound, Param, ParamStore};
pub use spec::{HybridPreset, ModelKind, ModelSpec, ParamInfo, RnnOutput, Stage, MODEL_NAMES};

use ops::{DccLayer, GruParams, LstmParams, RnnParams};

fn lstm_params(bound: &Bound, prefix: &str, layers: usize) -> Result<RnnParams> {
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let p = |n: &str| bound.get(&format!("{prefix}.l{l}.{n}"));
        out.push(LstmParams {
            w: [p("W_i")?, p("W_g")?, p("W_c")?, p("W_o")?],
            u: [p("U_i")?, p("U_g")?, p("U_c")?, p("U_o")?],
            v: [p("V_i")?, p("V_g")?, p("V_o")?],
            b: [p("b_i")?, p("b_g")?, p("b_c")?, p("b_o")?],
        });
    }
    Ok(RnnParams::Lstm(out))
}

fn gru_params(bound: &Bound, prefix: &str, layers: usize) -> Result<RnnParams> {
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let p = |n: &str| bound.get(&format!("{prefix}.l{l}.{n}"));
        out.push(GruParams {
            w: [p("W_r")?, p("W_h")?, p("W_z")?],
            u: [p("U_r")?, p("U_h")?, p("U_z")?],
        });
    }
    Ok(RnnParams::Gru(out))
}

/// Applies stage `index` of the chain to `x`.
///
/// Convolutional stages map `L×d_in` to `L×d_out` and attention or pooling
/// stages aggregate to `1×d`. A recurrent stage returns its hidden sequence
/// unless `aggregate` is set, in which case it applies the model's output
/// strategy. `dropout` is only consulted by DCC stages.
pub fn apply_stage<T: Real>(
    spec: &ModelSpec,
    tape: &mut Tape<T>,
    bound: &Bound,
    index: usize,
    x: Var,
    aggregate: bool,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let stage = *spec
        .chain
        .get(index)
        .ok_or_else(|| Error::Config(format!("chain has no stage {index}")))?;
    let prefix = &spec.stage_prefixes()[index];
    let p = |n: &str| bound.get(&format!("{prefix}.{n}"));
    Ok(match stage {
        Stage::AvgPool => ops::pool_forward(tape, PoolKind::Avg, x)?,
        Stage::MaxPool => ops::pool_forward(tape, PoolKind::Max, x)?,
        Stage::Tc => ops::tc_forward(tape, x, spec.tc_rate, spec.kernel_size, p("W")?, p("b")?)?,
        Stage::Pdc => {
            let branches = (0..spec.dilation_rates.len())
                .map(|j| Ok((p(&format!("branch{j}.W"))?, p(&format!("branch{j}.b"))?)))
                .collect::<Result<Vec<_>>>()?;
            ops::pdc_forward(
                tape,
                x,
                &spec.dilation_rates,
                spec.kernel_size,
                &branches,
                (p("reduce.W")?, p("reduce.b")?),
            )?
        }
        Stage::Dcc => {
            let layers = (0..spec.dilation_rates.len())
                .map(|l| {
                    Ok(DccLayer {
                        conv_w: p(&format!("layer{l}.conv.W"))?,
                        conv_b: p(&format!("layer{l}.conv.b"))?,
                        res_w: p(&format!("layer{l}.res.W"))?,
                        res_b: p(&format!("layer{l}.res.b"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            ops::dcc_forward(tape, x, &spec.dilation_rates, spec.kernel_size, &layers, dropout)?
        }
        Stage::Lstm | Stage::Gru => {
            let params = if stage == Stage::Lstm {
                lstm_params(bound, prefix, spec.num_layers)?
            } else {
                gru_params(bound, prefix, spec.num_layers)?
            };
            if aggregate {
                ops::rnn_forward(tape, x, spec.hidden_size, &params, spec.rnn_output)?
            } else {
                ops::rnn_sequence(tape, x, spec.hidden_size, &params)?
            }
        }
        Stage::NaiveSa => ops::naive_sa(tape, x, p("W")?, p("b")?)?.output,
        Stage::NonlinearSa => ops::nonlinear_sa(tape, x, p("U1")?, p("b1")?, p("U2")?, p("b2")?)?.output,
        Stage::NonLocal => ops::nonlocal_forward(tape, x, p("W_q")?, p("W_k")?)?.output,
        Stage::TransformerQ => ops::transformer_q(tape, x, p("W_q")?, p("W_k")?)?.output,
    })
}

/// Runs the stage chain of `spec` over one `L×d` window and returns `S_out` (`1×D`).
///
/// Sequence stages keep the window length; the final stage aggregates.
/// `dropout` should be `None` at inference.
pub fn forward_repr<T: Real>(
    spec: &ModelSpec,
    tape: &mut Tape<T>,
    bound: &Bound,
    window: Var,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let [steps, width] = tape.shape(window);
    if steps == 0 {
        return Err(Error::Contract("empty window".into()));
    }
    if width != spec.feature_dim {
        return Err(Error::Validation(format!(
            "window has {width} features, model expects {}",
            spec.feature_dim
        )));
    }
    let last = spec.chain.len() - 1;
    let mut x = window;
    for i in 0..spec.chain.len() {
        x = apply_stage(spec, tape, bound, i, x, i == last, dropout.as_deref_mut())?;
    }
    Ok(x)
}

/// `S_out` followed by the linear head: `1×(K+1)` logits.
pub fn forward_logits<T: Real>(
    spec: &ModelSpec,
    tape: &mut Tape<T>,
    bound: &Bound,
    window: Var,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let s = forward_repr(spec, tape, bound, window, dropout)?;
    ops::classify(tape, s, bound.get("head.W")?, bound.get("head.b")?)
}

/// A spec with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = ParamStore::init(&spec, seed);
        Ok(Model { spec, params })
    }

    pub fn from_parts(spec: ModelSpec, params: ParamStore<T>) -> Result<Self> {
        spec.validate()?;
        params.check_layout(&spec)?;
        Ok(Model { spec, params })
    }

    /// Inference-mode representation of one window.
    pub fn represent(&self, window: &Matrix<T>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let w = tape.constant(window.clone());
        let s = forward_repr(&self.spec, &mut tape, &bound, w, None)?;
        Ok(tape.value(s).clone())
    }

    /// Inference-mode logits of one window.
    pub fn logits(&self, window: &Matrix<T>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let w = tape.constant(window.clone());
        let z = forward_logits(&self.spec, &mut tape, &bound, w, None)?;
        Ok(tape.value(z).clone())
    }

    /// Class probabilities of one window (row sums to 1).
    pub fn probabilities(&self, window: &Matrix<T>) -> Result<Vec<T>> {
        Ok(softmax_rows(&self.logits(window)?).into_vec())
    }
}
