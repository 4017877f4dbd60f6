//! Windowed minibatch training with momentum SGD and per-epoch learning-rate decay.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::FeatureStream;
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::model::{forward_logits, Dropout, ModelSpec, ParamStore};
use crate::tensor::{real, Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}` (expected f32 or f64)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            decay: 0.95,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            precision: Precision::F64,
            clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay rate {} must lie in (0, 1]", self.decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip threshold {c} must be > 0")));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during epoch `epoch` (0-based): `lr₀·decayⁿ`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.learning_rate;
        for _ in 0..epoch {
            lr *= self.decay;
        }
        lr
    }
}

/// One training window: `len` frames starting at `start`, supervised by its last frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingWindow {
    pub stream: usize,
    pub start: usize,
    pub len: usize,
    pub label: u32,
}

/// Non-overlapping windows at `0, L, 2L, …`; a trailing remainder shorter than `L` is dropped.
pub fn make_training_windows(stream: &FeatureStream, seq_len: usize) -> Vec<TrainingWindow> {
    window_layout(stream.labels.len(), seq_len)
        .map(|start| TrainingWindow {
            stream: 0,
            start,
            len: seq_len,
            label: stream.labels[start + seq_len - 1],
        })
        .collect()
}

fn window_layout(len: usize, seq_len: usize) -> impl Iterator<Item = usize> {
    let count = len.checked_div(seq_len).unwrap_or(0);
    (0..count).map(move |i| i * seq_len)
}

/// Momentum update `v ← μv + g; p ← p − lr·v`, then clears gradients.
///
/// Every gradient is checked before any parameter moves, so a non-finite
/// gradient leaves the store untouched.
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    lr: f64,
    momentum: f64,
    clip: Option<f64>,
) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| !p.grad.all_finite()) {
        return Err(Error::NonFiniteGradient { param: name.clone() });
    }
    let mut factor = T::one();
    if let Some(c) = clip {
        let norm = params
            .iter()
            .flat_map(|(_, p)| p.grad.as_slice().iter())
            .map(|g| g.to_f64().unwrap_or(0.0).powi(2))
            .sum::<f64>()
            .sqrt();
        if norm > c {
            factor = real(c / norm);
        }
    }
    let (lr, mu): (T, T) = (real(lr), real(momentum));
    for (_, p) in params.iter_mut() {
        let grad = &p.grad;
        p.momentum = p.momentum.zip_map(grad, |v, g| mu * v + factor * g);
        p.value = p.value.zip_map(&p.momentum, |w, v| w - lr * v);
    }
    params.zero_grad();
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "# epoch loss lr accuracy";

    /// One whitespace-separated record per epoch after a `#` header line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            let _ = writeln!(out, "{}", r.line());
        }
        out
    }
}

impl EpochRecord {
    pub fn line(&self) -> String {
        format!("{} {:.9e} {:.9e} {:.6}", self.epoch, self.loss, self.lr, self.accuracy)
    }
}

/// Forward, loss and backward over one minibatch; gradients accumulate into `params`.
/// Returns the mean loss and the number of correctly classified windows.
pub fn batch_gradient<T: Real>(
    spec: &ModelSpec,
    params: &mut ParamStore<T>,
    batch: &[(Matrix<T>, usize)],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut dropout = dropout_rng.map(|rng| Dropout { rate: spec.dropout, rng });
    let mut logits = Vec::with_capacity(batch.len());
    for (window, _) in batch {
        let w = tape.constant(window.clone());
        logits.push(forward_logits(spec, &mut tape, &bound, w, dropout.as_mut())?);
    }
    let stacked = tape.concat_rows(&logits)?;
    let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
    let loss = tape.cross_entropy(stacked, &labels)?;
    let loss_value = tape.value(loss).get(0, 0).to_f64().unwrap_or(f64::NAN);
    let correct = {
        let z = tape.value(stacked);
        (0..z.rows()).filter(|&r| argmax(z.row(r)) == labels[r]).count()
    };
    tape.backward(loss)?;
    params.accumulate_grads(&tape, &bound);
    Ok((loss_value, correct))
}

/// Trains from `init` on every stream's non-overlapping windows.
pub fn train_from<T: Real>(
    spec: &ModelSpec,
    mut params: ParamStore<T>,
    streams: &[FeatureStream],
    config: &TrainConfig,
) -> Result<(ParamStore<T>, TrainLog)> {
    spec.validate()?;
    config.validate()?;
    params.check_layout(spec)?;
    for s in streams {
        if s.feature_dim() != spec.feature_dim {
            return Err(Error::Validation(format!(
                "stream `{}` has d={}, model expects d={}",
                s.video_id,
                s.feature_dim(),
                spec.feature_dim
            )));
        }
        if s.num_classes != spec.num_classes {
            return Err(Error::Validation(format!(
                "stream `{}` has K={}, model expects K={}",
                s.video_id, s.num_classes, spec.num_classes
            )));
        }
    }
    let mut windows: Vec<TrainingWindow> = streams
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            make_training_windows(s, spec.seq_len)
                .into_iter()
                .map(move |w| TrainingWindow { stream: i, ..w })
        })
        .collect();
    let mut log = TrainLog::default();
    if config.epochs == 0 {
        return Ok((params, log));
    }
    if windows.is_empty() {
        return Err(Error::Validation(format!(
            "no stream is long enough for a window of {} units",
            spec.seq_len
        )));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xD40F_0D40_F0D4_0F0D);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        windows.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in windows.chunks(config.batch_size) {
            let batch: Vec<(Matrix<T>, usize)> = chunk
                .iter()
                .map(|w| {
                    let f = streams[w.stream].window(w.start, w.len).cast::<T>();
                    (f, w.label as usize)
                })
                .collect();
            let (loss, ok) = batch_gradient(spec, &mut params, &batch, Some(&mut dropout_rng))?;
            loss_sum += loss * chunk.len() as f64;
            correct += ok;
            sgd_step(&mut params, lr, config.momentum, config.clip)?;
        }
        log.records.push(EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / windows.len() as f64,
            lr,
            accuracy: correct as f64 / windows.len() as f64,
        });
    }
    Ok((params, log))
}

/// Initializes parameters from `config.seed` and trains.
pub fn train<T: Real>(
    spec: &ModelSpec,
    streams: &[FeatureStream],
    config: &TrainConfig,
) -> Result<(ParamStore<T>, TrainLog)> {
    spec.validate()?;
    train_from(spec, ParamStore::init(spec, config.seed), streams, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthMode, SynthSpec};
    use crate::model::ModelKind;

    fn stream(len: usize) -> FeatureStream {
        let labels = (0..len as u32).map(|t| t % 2).collect();
        FeatureStream::new("s", 1, Matrix::zeros(len, 2), labels).unwrap()
    }

    #[test]
    fn window_layout_examples() {
        let w = make_training_windows(&stream(10), 4);
        assert_eq!(w.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 4]);
        assert_eq!(w[0].label, 1);
        assert_eq!(make_training_windows(&stream(4), 4).len(), 1);
        assert!(make_training_windows(&stream(3), 4).is_empty());
    }

    fn store(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Matrix::filled(1, 1, value));
        s.get_mut("p").unwrap().grad = Matrix::filled(1, 1, grad);
        s
    }

    #[test]
    fn sgd_without_momentum() {
        let mut s = store(1.0, 0.1);
        sgd_step(&mut s, 0.1, 0.0, None).unwrap();
        assert!((s.value("p").unwrap().get(0, 0) - 0.99).abs() < 1e-15);
        assert_eq!(s.get("p").unwrap().grad.get(0, 0), 0.0);
    }

    #[test]
    fn two_momentum_steps() {
        let (lr, g) = (0.1, 0.5);
        let mut s = store(0.0, g);
        sgd_step(&mut s, lr, 0.9, None).unwrap();
        s.get_mut("p").unwrap().grad = Matrix::filled(1, 1, g);
        sgd_step(&mut s, lr, 0.9, None).unwrap();
        let moved = -s.value("p").unwrap().get(0, 0);
        assert!((moved - lr * g * 2.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(0.3, 0.0);
        sgd_step(&mut s, 0.1, 0.9, None).unwrap();
        assert_eq!(s.value("p").unwrap().get(0, 0), 0.3);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store(0.3, f64::NAN);
        match sgd_step(&mut s, 0.1, 0.9, None) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "p"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.value("p").unwrap().get(0, 0), 0.3);
    }

    #[test]
    fn clip_bounds_update() {
        let mut s = store(0.0, 100.0);
        sgd_step(&mut s, 1.0, 0.0, Some(1.0)).unwrap();
        assert!((s.value("p").unwrap().get(0, 0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_is_exact_power() {
        let c = TrainConfig::default();
        let mut expected = c.learning_rate;
        for n in 0..30 {
            assert_eq!(c.lr_at(n), expected);
            expected *= c.decay;
        }
    }

    #[test]
    fn config_bounds() {
        let bad = [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { decay: 0.0, ..Default::default() },
            TrainConfig { decay: 1.5, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    fn static_streams() -> Vec<FeatureStream> {
        generate_synthetic(&SynthSpec {
            num_streams: 4,
            len: 128,
            feature_dim: 8,
            num_classes: 2,
            noise: 0.1,
            mode: SynthMode::Static,
            seed: 3,
            first_index: 0,
        })
        .unwrap()
    }

    fn avg_spec() -> ModelSpec {
        ModelSpec::new(ModelKind::AvgPool, 8, 2)
    }

    #[test]
    fn zero_epochs_returns_init() {
        let cfg = TrainConfig { epochs: 0, seed: 9, ..Default::default() };
        let (p, log) = train::<f64>(&avg_spec(), &static_streams(), &cfg).unwrap();
        assert_eq!(p, ParamStore::init(&avg_spec(), 9));
        assert!(log.records.is_empty());
    }

    #[test]
    fn separable_loss_decreases_and_is_deterministic() {
        let cfg = TrainConfig { epochs: 5, batch_size: 8, learning_rate: 0.05, seed: 1, ..Default::default() };
        let (p1, log) = train::<f64>(&avg_spec(), &static_streams(), &cfg).unwrap();
        for pair in log.records.windows(2) {
            assert!(pair[1].loss < pair[0].loss, "{:?}", log.records);
        }
        let (p2, _) = train::<f64>(&avg_spec(), &static_streams(), &cfg).unwrap();
        assert_eq!(p1.to_checkpoint_bytes(0), p2.to_checkpoint_bytes(0));
        assert!(log.to_text().starts_with(TrainLog::HEADER));
    }

    #[test]
    fn dimension_mismatch_is_validation_error() {
        let spec = ModelSpec::new(ModelKind::AvgPool, 5, 2);
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(matches!(
            train::<f64>(&spec, &static_streams(), &cfg),
            Err(Error::Validation(_))
        ));
    }
}
