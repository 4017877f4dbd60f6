//! Stride-1 online scoring: every unit is classified from the window ending at it.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::data::FeatureStream;
use crate::error::{Error, FormatError, Result};
use crate::metrics::argmax;
use crate::model::params::ByteReader;
use crate::model::Model;
use crate::tensor::{Matrix, Real};

pub const TIMELINE_MAGIC: &[u8; 4] = b"OADT";
pub const TIMELINE_VERSION: u32 = 1;

/// Per-unit class probabilities (`T×(K+1)`) with their argmax labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTimeline {
    pub probs: Matrix<f64>,
    pub predicted: Vec<usize>,
    pub fingerprint: u64,
}

impl ScoreTimeline {
    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.probs.rows()).map(|t| self.probs.row(t).to_vec()).collect()
    }

    fn from_rows(rows: Vec<Vec<f64>>, fingerprint: u64) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let predicted = rows.iter().map(|r| argmax(r)).collect();
        ScoreTimeline {
            probs: Matrix::from_vec(rows.len(), cols, rows.concat()),
            predicted,
            fingerprint,
        }
    }

    /// `frame,p0,..,pK,argmax` per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame");
        for k in 0..self.probs.cols() {
            let _ = write!(out, ",p{k}");
        }
        out.push_str(",argmax\n");
        for t in 0..self.len() {
            let _ = write!(out, "{t}");
            for p in self.probs.row(t) {
                let _ = write!(out, ",{p}");
            }
            let _ = writeln!(out, ",{}", self.predicted[t]);
        }
        out
    }

    /// `OADT` table: magic, version u32, T u32, C u32, fingerprint u64,
    /// T·C f64 probabilities, T u32 argmax labels (little-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TIMELINE_MAGIC);
        out.extend_from_slice(&TIMELINE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.probs.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.probs.cols() as u32).to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        for p in self.probs.as_slice() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for &a in &self.predicted {
            out.extend_from_slice(&(a as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != TIMELINE_MAGIC {
            return Err(FormatError::BadMagic.into());
        }
        let version = r.u32()?;
        if version != TIMELINE_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let t = r.u32()? as usize;
        let c = r.u32()? as usize;
        let fingerprint = r.u64()?;
        let probs = r
            .take(t * c * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let predicted = r
            .take(t * 4)?
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect();
        if r.pos != bytes.len() {
            return Err(FormatError::Malformed.into());
        }
        Ok(ScoreTimeline {
            probs: Matrix::from_vec(t, c, probs),
            predicted,
            fingerprint,
        })
    }
}

fn check_dim<T: Real>(model: &Model<T>, d: usize) -> Result<()> {
    if d != model.spec.feature_dim {
        return Err(Error::Validation(format!(
            "frames have d={d}, model expects d={}",
            model.spec.feature_dim
        )));
    }
    Ok(())
}

fn score_window<T: Real>(model: &Model<T>, window: &Matrix<f32>) -> Result<Vec<f64>> {
    Ok(model
        .probabilities(&window.cast::<T>())?
        .into_iter()
        .map(|p| p.to_f64().unwrap_or(f64::NAN))
        .collect())
}

/// Scores every unit from frames `max(0, t−L+1)..=t`; early units see a shorter window.
pub fn infer_stream<T: Real>(model: &Model<T>, stream: &FeatureStream) -> Result<ScoreTimeline> {
    check_dim(model, stream.feature_dim())?;
    let l = model.spec.seq_len;
    let score = |t: usize| {
        let start = (t + 1).saturating_sub(l);
        score_window(model, &stream.window(start, t + 1 - start))
    };
    #[cfg(feature = "parallel")]
    let rows = (0..stream.len()).into_par_iter().map(score).collect::<Result<Vec<_>>>()?;
    #[cfg(not(feature = "parallel"))]
    let rows = (0..stream.len()).map(score).collect::<Result<Vec<_>>>()?;
    Ok(ScoreTimeline::from_rows(rows, model.spec.fingerprint()))
}

/// Frame-by-frame scorer holding at most `L−1` past frames.
pub struct Session<'a, T> {
    model: &'a Model<T>,
    past: VecDeque<Vec<f32>>,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(model: &'a Model<T>) -> Self {
        Session {
            model,
            past: VecDeque::with_capacity(model.spec.seq_len),
        }
    }

    pub fn buffered(&self) -> usize {
        self.past.len()
    }

    pub fn reset(&mut self) {
        self.past.clear();
    }

    /// Probability row for the next unit, identical to the matching [`infer_stream`] row.
    pub fn push(&mut self, frame: &[f32]) -> Result<Vec<f64>> {
        check_dim(self.model, frame.len())?;
        let mut data: Vec<f32> = Vec::with_capacity((self.past.len() + 1) * frame.len());
        for row in &self.past {
            data.extend_from_slice(row);
        }
        data.extend_from_slice(frame);
        let window = Matrix::from_vec(self.past.len() + 1, frame.len(), data);
        let probs = score_window(self.model, &window)?;
        if self.model.spec.seq_len > 1 {
            if self.past.len() == self.model.spec.seq_len - 1 {
                self.past.pop_front();
            }
            self.past.push_back(frame.to_vec());
        }
        Ok(probs)
    }
}

/// Wall-time per unit.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub frames: usize,
    pub p50: Duration,
    pub p99: Duration,
    pub mean: Duration,
}

impl LatencyReport {
    pub fn from_samples(mut samples: Vec<Duration>) -> Self {
        samples.sort();
        let n = samples.len();
        let pick = |q: f64| {
            if n == 0 {
                Duration::ZERO
            } else {
                samples[((q * n as f64).ceil() as usize).clamp(1, n) - 1]
            }
        };
        let total: Duration = samples.iter().sum();
        LatencyReport {
            frames: n,
            p50: pick(0.50),
            p99: pick(0.99),
            mean: if n == 0 { Duration::ZERO } else { total / n as u32 },
        }
    }
}

/// Sequential incremental scoring that records per-unit latency.
pub fn infer_timed<T: Real>(
    model: &Model<T>,
    stream: &FeatureStream,
) -> Result<(ScoreTimeline, LatencyReport)> {
    check_dim(model, stream.feature_dim())?;
    let mut session = Session::new(model);
    let mut rows = Vec::with_capacity(stream.len());
    let mut samples = Vec::with_capacity(stream.len());
    for t in 0..stream.len() {
        let start = Instant::now();
        rows.push(session.push(stream.features.row(t))?);
        samples.push(start.elapsed());
    }
    Ok((
        ScoreTimeline::from_rows(rows, model.spec.fingerprint()),
        LatencyReport::from_samples(samples),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthMode, SynthSpec};
    use crate::model::{ModelKind, ModelSpec};

    fn streams() -> Vec<FeatureStream> {
        generate_synthetic(&SynthSpec {
            num_streams: 2,
            len: 20,
            feature_dim: 4,
            num_classes: 2,
            noise: 0.3,
            mode: SynthMode::OrderSensitive,
            seed: 5,
            first_index: 0,
        })
        .unwrap()
    }

    fn model(kind: ModelKind) -> Model<f64> {
        let spec = ModelSpec::new(kind, 4, 2).with_width_multiplier(1.0 / 512.0);
        Model::init(spec, 11).unwrap()
    }

    #[test]
    fn rows_sum_to_one_and_cover_stream() {
        let s = &streams()[0];
        let tl = infer_stream(&model(ModelKind::Lstm), s).unwrap();
        assert_eq!(tl.len(), s.len());
        for row in tl.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn avgpool_matches_mean_of_last_frames() {
        let m = model(ModelKind::AvgPool);
        let s = &streams()[0];
        let tl = infer_stream(&m, s).unwrap();
        let l = m.spec.seq_len;
        let w = m.params.value("head.W").unwrap();
        let b = m.params.value("head.b").unwrap();
        for t in 0..s.len() {
            let start = (t + 1).saturating_sub(l);
            let n = (t + 1 - start) as f64;
            let mut mean = vec![0.0; 4];
            for r in start..=t {
                for (m, &x) in mean.iter_mut().zip(s.features.row(r)) {
                    *m += x as f64 / n;
                }
            }
            let z = Matrix::from_vec(1, 4, mean).matmul(w).zip_map(b, |a, c| a + c);
            let zmax = z.as_slice().iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.as_slice().iter().map(|v| (v - zmax).exp()).collect();
            let sum: f64 = e.iter().sum();
            for k in 0..3 {
                assert!((tl.probs.get(t, k) - e[k] / sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn session_matches_stream_and_reset() {
        let m = model(ModelKind::Gru);
        let s = &streams()[1];
        let tl = infer_stream(&m, s).unwrap();
        let mut sess = Session::new(&m);
        for t in 0..s.len() {
            assert_eq!(sess.push(s.features.row(t)).unwrap(), tl.probs.row(t));
            assert!(sess.buffered() < m.spec.seq_len);
        }
        sess.reset();
        assert_eq!(sess.push(s.features.row(0)).unwrap(), tl.probs.row(0));
    }

    #[test]
    fn dim_mismatch_is_validation_error() {
        let m = model(ModelKind::AvgPool);
        let mut sess = Session::new(&m);
        assert!(matches!(sess.push(&[0.0; 3]), Err(Error::Validation(_))));
    }

    #[test]
    fn binary_table_round_trip() {
        let m = model(ModelKind::MaxPool);
        let (tl, lat) = infer_timed(&m, &streams()[0]).unwrap();
        assert_eq!(lat.frames, 20);
        assert!(lat.p50 <= lat.p99);
        assert_eq!(ScoreTimeline::from_bytes(&tl.to_bytes()).unwrap(), tl);
        assert!(tl.to_csv().starts_with("frame,p0,p1,p2,argmax\n"));
    }
}
