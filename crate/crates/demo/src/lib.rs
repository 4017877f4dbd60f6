//! WebAssembly bindings for the static demo page in `www/`.

use oad_core::data::{generate_synthetic, SynthMode, SynthSpec};
use oad_core::infer::infer_stream;
use oad_core::metrics::{calibration_ratio, per_frame_ap, per_frame_cap};
use oad_core::model::{Model, ModelSpec};
use oad_core::train::{train, TrainConfig};
use oad_core::{Matrix, Result};
use wasm_bindgen::prelude::*;

const PROBE_DIM: usize = 8;

fn js(e: oad_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Logit change at the last frame when each window frame is nudged in turn.
pub fn influence(model: &str, seq_len: usize, seed: u64) -> Result<Vec<f64>> {
    let mut spec = ModelSpec::from_name(model, PROBE_DIM, 2)?.with_width_multiplier(1.0 / 64.0);
    spec.seq_len = seq_len;
    let model = Model::<f64>::init(spec, seed)?;
    let base: Vec<f64> = (0..seq_len * PROBE_DIM)
        .map(|i| (i as f64 * 0.7 + seed as f64).sin() * 0.5)
        .collect();
    let window = Matrix::from_vec(seq_len, PROBE_DIM, base);
    let reference = model.logits(&window)?;
    (0..seq_len)
        .map(|frame| {
            let mut nudged = window.clone();
            for v in nudged.row_mut(frame) {
                *v += 1.0;
            }
            Ok(model.logits(&nudged)?.max_abs_diff(&reference))
        })
        .collect()
}

#[wasm_bindgen]
pub fn receptive_field(model: &str, seq_len: usize, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    influence(model, seq_len, seed.into()).map_err(js)
}

/// `[AP, cAP, w]`; undefined values are NaN.
#[wasm_bindgen]
pub fn ap_cap(scores: &[f64], labels: &[u8]) -> std::result::Result<Vec<f64>, JsError> {
    let labels: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
    let ap = per_frame_ap(scores, &labels).map_err(js)?;
    let cap = per_frame_cap(scores, &labels).map_err(js)?;
    let w = calibration_ratio(&labels);
    Ok([ap, cap, w].iter().map(|v| v.unwrap_or(f64::NAN)).collect())
}

/// A held-out synthetic stream scored by a freshly trained model.
#[wasm_bindgen]
pub struct Timeline {
    probs: Vec<f64>,
    labels: Vec<u32>,
    losses: Vec<f64>,
    accuracy: f64,
}

#[wasm_bindgen]
impl Timeline {
    /// Row-major `T×3` probabilities for background, class 1 and class 2.
    pub fn probs(&self) -> Vec<f64> {
        self.probs.clone()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.labels.clone()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }

    /// Class-1 vs class-2 accuracy over action frames.
    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }
}

fn synth(num_streams: usize, first_index: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        num_streams,
        len: 128,
        feature_dim: 16,
        num_classes: 2,
        noise: 0.1,
        mode: SynthMode::OrderSensitive,
        seed,
        first_index,
    }
}

pub fn fit_and_score(model: &str, epochs: usize, seed: u64) -> Result<Timeline> {
    let train_set = generate_synthetic(&synth(16, 0, seed))?;
    let test = generate_synthetic(&synth(1, 16, seed))?.remove(0);
    let spec = ModelSpec::from_name(model, 16, 2)?.with_width_multiplier(1.0 / 64.0);
    let cfg = TrainConfig { epochs, batch_size: 4, seed, ..TrainConfig::default() };
    let (params, log) = train::<f64>(&spec, &train_set, &cfg)?;
    let model = Model::from_parts(spec, params)?;
    let tl = infer_stream(&model, &test)?;
    let (mut hit, mut n) = (0, 0);
    for (t, &label) in test.labels.iter().enumerate() {
        if label != 0 {
            let pick = if tl.probs.get(t, 1) >= tl.probs.get(t, 2) { 1 } else { 2 };
            hit += (pick == label) as usize;
            n += 1;
        }
    }
    Ok(Timeline {
        probs: tl.probs.into_vec(),
        labels: test.labels,
        losses: log.records.iter().map(|r| r.loss).collect(),
        accuracy: if n == 0 { f64::NAN } else { hit as f64 / n as f64 },
    })
}

#[wasm_bindgen]
pub fn train_and_score(model: &str, epochs: usize, seed: u32) -> std::result::Result<Timeline, JsError> {
    fit_and_score(model, epochs, seed.into()).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_outputs_see_every_frame() {
        for m in ["avgpool", "tc", "lstm"] {
            let probe = influence(m, 6, 1).unwrap();
            assert_eq!(probe.len(), 6);
            assert!(probe.iter().all(|&v| v > 0.0), "{m}: {probe:?}");
        }
    }

    #[test]
    fn avgpool_weighs_frames_equally() {
        let probe = influence("avgpool", 5, 2).unwrap();
        assert!(probe.iter().all(|&v| (v - probe[0]).abs() < 1e-12));
    }

    #[test]
    fn trained_timeline_has_one_row_per_frame() {
        let tl = fit_and_score("dcc", 2, 3).unwrap();
        assert_eq!(tl.probs.len(), 3 * tl.labels.len());
        assert_eq!(tl.losses.len(), 2);
        assert!(tl.losses.iter().all(|l| l.is_finite()));
    }
}
