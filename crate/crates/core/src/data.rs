//! Feature streams: validation, the `OADF` binary format, CSV, and synthetic generation.
//!
//! `OADF` layout (all little-endian):
//!
//! | field    | type            |
//! |----------|-----------------|
//! | magic    | `b"OADF"`       |
//! | version  | u32 (= 1)       |
//! | T        | u32             |
//! | d        | u32             |
//! | K        | u32             |
//! | features | T·d f32, row-major |
//! | labels   | T u32           |

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, FormatError, Result};
use crate::model::params::ByteReader;
use crate::tensor::Matrix;

pub const STREAM_MAGIC: &[u8; 4] = b"OADF";
pub const STREAM_VERSION: u32 = 1;
pub const DEFAULT_UNIT_DURATION: f64 = 0.25;

/// One video's unit-level features with per-unit labels (0 = background).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStream {
    pub video_id: String,
    pub num_classes: usize,
    pub features: Matrix<f32>,
    pub labels: Vec<u32>,
    pub unit_duration: f64,
}

impl FeatureStream {
    pub fn new(
        video_id: impl Into<String>,
        num_classes: usize,
        features: Matrix<f32>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let s = FeatureStream {
            video_id: video_id.into(),
            num_classes,
            features,
            labels,
            unit_duration: DEFAULT_UNIT_DURATION,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rows() == 0 {
            return Err(Error::Validation(format!("stream `{}` is empty", self.video_id)));
        }
        if self.labels.len() != self.features.rows() {
            return Err(Error::Validation(format!(
                "stream `{}` has {} labels for {} units",
                self.video_id,
                self.labels.len(),
                self.features.rows()
            )));
        }
        if let Some(index) = self.features.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFiniteFeature { index }.into());
        }
        if let Some((index, &label)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize > self.num_classes)
        {
            return Err(FormatError::LabelOutOfRange { index, label }.into());
        }
        Ok(())
    }

    /// Units `start..start + len` as an `len×d` window.
    pub fn window(&self, start: usize, len: usize) -> Matrix<f32> {
        self.features.slice_rows(start, len)
    }

    pub fn to_oadf_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.features.len() * 4 + self.labels.len() * 4);
        out.extend_from_slice(STREAM_MAGIC);
        out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.feature_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for v in self.features.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_oadf_bytes(video_id: &str, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4).map_err(|_| FormatError::TruncatedPayload)? != STREAM_MAGIC {
            return Err(FormatError::BadMagic.into());
        }
        let version = r.u32()?;
        if version != STREAM_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let t = r.u32()? as usize;
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let expected = t
            .checked_mul(d)
            .and_then(|n| n.checked_add(t))
            .and_then(|n| n.checked_mul(4))
            .ok_or(FormatError::Malformed)?;
        let payload = &bytes[r.pos..];
        if payload.len() < expected {
            return Err(FormatError::TruncatedPayload.into());
        }
        if payload.len() > expected {
            return Err(FormatError::Malformed.into());
        }
        let feats = r.take(t * d * 4)?;
        let features = feats
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = r
            .take(t * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureStream::new(video_id, k, Matrix::from_vec(t, d, features), labels)
    }

    /// CSV with header `t,label,f0,..,f{d-1}`; values use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,label");
        for j in 0..self.feature_dim() {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for t in 0..self.len() {
            let _ = write!(out, "{t},{}", self.labels[t]);
            for v in self.features.row(t) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses CSV. The format carries no class count; `num_classes` defaults
    /// to the largest label seen (at least 1).
    pub fn from_csv(video_id: &str, text: &str, num_classes: Option<usize>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(FormatError::TruncatedPayload)?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 3 || cols[0] != "t" || cols[1] != "label" {
            return Err(FormatError::Malformed.into());
        }
        let d = cols.len() - 2;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (row, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != d + 2 {
                return Err(FormatError::TruncatedPayload.into());
            }
            let t: usize = fields[0].parse().map_err(|_| FormatError::Malformed)?;
            if t != row {
                return Err(FormatError::Malformed.into());
            }
            labels.push(fields[1].parse::<u32>().map_err(|_| FormatError::Malformed)?);
            for f in &fields[2..] {
                features.push(f.parse::<f32>().map_err(|_| FormatError::Malformed)?);
            }
        }
        let t = labels.len();
        let k = num_classes.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(1).max(1) as usize);
        FeatureStream::new(video_id, k, Matrix::from_vec(t, d, features), labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamFormat {
    Binary,
    Csv,
}

impl StreamFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => StreamFormat::Csv,
            _ => StreamFormat::Binary,
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("stream")
        .to_string()
}

/// Reads and validates one stream; nothing is returned on any failure.
pub fn load_stream(path: &Path, format: StreamFormat) -> Result<FeatureStream> {
    match format {
        StreamFormat::Binary => FeatureStream::from_oadf_bytes(&stem(path), &fs::read(path)?),
        StreamFormat::Csv => FeatureStream::from_csv(&stem(path), &fs::read_to_string(path)?, None),
    }
}

pub fn save_stream(stream: &FeatureStream, path: &Path, format: StreamFormat) -> Result<()> {
    match format {
        StreamFormat::Binary => fs::write(path, stream.to_oadf_bytes())?,
        StreamFormat::Csv => fs::write(path, stream.to_csv())?,
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthMode {
    /// Paired classes share their frame content and differ only in order.
    OrderSensitive,
    /// One fixed prototype per class.
    Static,
}

/// Segment and gap length ranges of generated streams (inclusive).
pub const SEGMENT_LEN: (usize, usize) = (16, 48);
pub const GAP_LEN: (usize, usize) = (4, 16);

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_streams: usize,
    pub len: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub noise: f64,
    pub mode: SynthMode,
    /// Seeds the class prototypes and, with the stream index, each stream.
    pub seed: u64,
    /// Index of the first generated stream. Held-out sets reuse the seed
    /// (and hence the prototypes) with a disjoint index range.
    pub first_index: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.len == 0 || self.feature_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("T, d and K must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise level {} must be finite and >= 0", self.noise)));
        }
        match self.mode {
            SynthMode::OrderSensitive => {
                if self.num_classes < 2 {
                    return Err(Error::Config(
                        "order-sensitive streams need at least 2 classes".into(),
                    ));
                }
                let needed = 2 * self.num_classes.div_ceil(2);
                if self.feature_dim < needed {
                    return Err(Error::Config(format!(
                        "order-sensitive streams with K={} need d >= {needed}",
                        self.num_classes
                    )));
                }
            }
            SynthMode::Static => {
                if self.feature_dim < self.num_classes {
                    return Err(Error::Config(format!(
                        "static streams with K={} need d >= K",
                        self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-stream seed derived from the synthetic seed and the stream index.
pub fn stream_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` orthonormal vectors in `ℝ^d` by Gram–Schmidt on Gaussian draws.
fn orthonormal_basis(rng: &mut ChaCha8Rng, d: usize, count: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Class prototypes shared by every stream of one spec.
#[derive(Clone, Debug)]
pub struct Prototypes {
    mode: SynthMode,
    vectors: Vec<Vec<f64>>,
}

impl Prototypes {
    pub fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let count = match spec.mode {
            SynthMode::OrderSensitive => 2 * spec.num_classes.div_ceil(2),
            SynthMode::Static => spec.num_classes,
        };
        Prototypes {
            mode: spec.mode,
            vectors: orthonormal_basis(&mut rng, spec.feature_dim, count),
        }
    }

    /// The `(u, v)` plane of order-sensitive class pair `pair` (classes `2·pair+1`, `2·pair+2`).
    pub fn plane(&self, pair: usize) -> (&[f64], &[f64]) {
        (&self.vectors[2 * pair], &self.vectors[2 * pair + 1])
    }

    /// Noise-free frame of `class` at cycle position `phase`.
    ///
    /// Order-sensitive classes walk the cycle `u, v, -u, -v` (odd class) or
    /// `u, -v, -u, v` (even class): the same four frames, opposite rotation.
    pub fn frame(&self, class: u32, phase: usize) -> Vec<f64> {
        let d = self.vectors[0].len();
        if class == 0 {
            return vec![0.0; d];
        }
        let k = class as usize - 1;
        match self.mode {
            SynthMode::Static => self.vectors[k].clone(),
            SynthMode::OrderSensitive => {
                let (u, v) = self.plane(k / 2);
                let forward = k.is_multiple_of(2);
                let (src, sign) = match (phase % 4, forward) {
                    (0, _) => (u, 1.0),
                    (1, true) => (v, 1.0),
                    (1, false) => (v, -1.0),
                    (2, _) => (u, -1.0),
                    (3, true) => (v, -1.0),
                    (3, false) => (v, 1.0),
                    _ => unreachable!(),
                };
                src.iter().map(|x| sign * x).collect()
            }
        }
    }
}

/// Class of the mirrored stream: order-sensitive pairs `(2j+1, 2j+2)` swap,
/// an unpaired last class stays.
fn mirror_class(class: u32, num_classes: usize) -> u32 {
    if class == 0 {
        0
    } else if class % 2 == 1 {
        if (class as usize) < num_classes {
            class + 1
        } else {
            class
        }
    } else {
        class - 1
    }
}

/// Generates `spec.num_streams` streams of alternating background gaps and
/// single-class action segments, each frame perturbed by N(0, σ²) noise.
///
/// In order-sensitive mode streams come in mirrored pairs: stream `2i+1`
/// repeats the gap and segment layout of stream `2i` with each class swapped
/// for its reverse-rotation partner, under independent noise. Any even
/// number of streams therefore holds paired classes in exactly equal amounts.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<FeatureStream>> {
    spec.validate()?;
    let protos = Prototypes::new(spec);
    let normal = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    (spec.first_index..spec.first_index + spec.num_streams)
        .map(|i| {
            let (layout_index, mirrored) = match spec.mode {
                SynthMode::OrderSensitive => (i / 2, i % 2 == 1),
                SynthMode::Static => (i, false),
            };
            let mut layout = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, layout_index));
            let mut noise = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed ^ NOISE_SALT, i));
            let mut labels = Vec::with_capacity(spec.len);
            let mut clean: Vec<f64> = Vec::with_capacity(spec.len * spec.feature_dim);
            while labels.len() < spec.len {
                let gap = layout.random_range(GAP_LEN.0..=GAP_LEN.1);
                labels.resize(labels.len() + gap, 0);
                for _ in 0..gap {
                    clean.extend(protos.frame(0, 0));
                }
                let mut class = layout.random_range(1..=spec.num_classes as u32);
                if mirrored {
                    class = mirror_class(class, spec.num_classes);
                }
                let seg = layout.random_range(SEGMENT_LEN.0..=SEGMENT_LEN.1);
                let phase0 = layout.random_range(0..4usize);
                for j in 0..seg {
                    labels.push(class);
                    clean.extend(protos.frame(class, phase0 + j));
                }
            }
            labels.truncate(spec.len);
            clean.truncate(spec.len * spec.feature_dim);
            let features = clean
                .into_iter()
                .map(|x| {
                    let n = if spec.noise > 0.0 { normal.sample(&mut noise) } else { 0.0 };
                    (x + n) as f32
                })
                .collect();
            FeatureStream::new(
                format!("synth-{i:04}"),
                spec.num_classes,
                Matrix::from_vec(spec.len, spec.feature_dim, features),
                labels,
            )
        })
        .collect()
}

const NOISE_SALT: u64 = 0x6E6F_6973_6500_0000;

#[cfg(test)]
mod tests {
    use super::*;

    fn order_spec(noise: f64) -> SynthSpec {
        SynthSpec {
            num_streams: 3,
            len: 256,
            feature_dim: 16,
            num_classes: 2,
            noise,
            mode: SynthMode::OrderSensitive,
            seed: 7,
            first_index: 0,
        }
    }

    #[test]
    fn binary_round_trip_is_bit_identical() {
        let s = &generate_synthetic(&order_spec(0.1)).unwrap()[0];
        let bytes = s.to_oadf_bytes();
        let back = FeatureStream::from_oadf_bytes(&s.video_id, &bytes).unwrap();
        assert_eq!(back.to_oadf_bytes(), bytes);
        assert_eq!(&back, s);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let s = &generate_synthetic(&order_spec(0.1)).unwrap()[0];
        let bytes = s.to_oadf_bytes();
        for cut in [3, 10, 20, bytes.len() - 1] {
            let err = FeatureStream::from_oadf_bytes("x", &bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::Format(FormatError::TruncatedPayload)),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn header_errors_have_distinct_codes() {
        let s = &generate_synthetic(&order_spec(0.0)).unwrap()[0];
        let mut bytes = s.to_oadf_bytes();
        bytes[0] = b'Z';
        let magic = FeatureStream::from_oadf_bytes("x", &bytes).unwrap_err();
        let mut bytes = s.to_oadf_bytes();
        bytes[4] = 9;
        let version = FeatureStream::from_oadf_bytes("x", &bytes).unwrap_err();
        let mut bytes = s.to_oadf_bytes();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&7u32.to_le_bytes());
        let label = FeatureStream::from_oadf_bytes("x", &bytes).unwrap_err();
        let mut bytes = s.to_oadf_bytes();
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        let nan = FeatureStream::from_oadf_bytes("x", &bytes).unwrap_err();
        let codes: Vec<u32> = [magic, version, label, nan]
            .iter()
            .map(|e| match e {
                Error::Format(f) => f.code(),
                other => panic!("unexpected {other}"),
            })
            .collect();
        assert_eq!(codes, vec![10, 11, 13, 14]);
    }

    #[test]
    fn csv_and_binary_agree() {
        let s = &generate_synthetic(&order_spec(0.1)).unwrap()[1];
        let from_csv = FeatureStream::from_csv(&s.video_id, &s.to_csv(), Some(2)).unwrap();
        assert_eq!(&from_csv, s);
        assert!(s.to_csv().starts_with("t,label,f0,f1,"));
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let a = generate_synthetic(&order_spec(0.1)).unwrap();
        let b = generate_synthetic(&order_spec(0.1)).unwrap();
        assert_eq!(a, b);
        for s in &a {
            s.validate().unwrap();
            assert!(s.labels.contains(&1) || s.labels.contains(&2));
        }
    }

    #[test]
    fn offset_continues_the_same_sequence() {
        let all = generate_synthetic(&order_spec(0.1)).unwrap();
        let mut spec = order_spec(0.1);
        spec.num_streams = 1;
        spec.first_index = 2;
        assert_eq!(generate_synthetic(&spec).unwrap()[0], all[2]);
    }

    #[test]
    fn mirrored_pairs_balance_paired_classes() {
        let mut spec = order_spec(0.1);
        spec.num_streams = 6;
        spec.num_classes = 3;
        let streams = generate_synthetic(&spec).unwrap();
        let count = |c: u32| streams.iter().flat_map(|s| &s.labels).filter(|&&l| l == c).count();
        assert_eq!(count(1), count(2));
        for pair in streams.chunks(2) {
            assert_ne!(pair[0].features, pair[1].features);
            for (&a, &b) in pair[0].labels.iter().zip(&pair[1].labels) {
                assert_eq!(b, mirror_class(a, 3));
            }
        }
    }

    #[test]
    fn order_mode_needs_two_classes() {
        let mut spec = order_spec(0.0);
        spec.num_classes = 1;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn noise_free_order_rule_separates_classes() {
        let spec = order_spec(0.0);
        let protos = Prototypes::new(&spec);
        let (u, v) = protos.plane(0);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for class in [1u32, 2] {
            for phase in 0..4 {
                let a = protos.frame(class, phase);
                let b = protos.frame(class, phase + 1);
                // signed area swept from one frame to the next in the (u, v) plane
                let turn = dot(&a, u) * dot(&b, v) - dot(&a, v) * dot(&b, u);
                let predicted = if turn > 0.0 { 1 } else { 2 };
                assert_eq!(predicted, class);
            }
        }
    }

    #[test]
    fn noise_free_windows_share_multisets() {
        let spec = order_spec(0.0);
        let protos = Prototypes::new(&spec);
        let sorted = |frames: Vec<Vec<f64>>| {
            let mut f: Vec<Vec<u64>> =
                frames.into_iter().map(|v| v.iter().map(|x| x.to_bits()).collect()).collect();
            f.sort();
            f
        };
        for len in [4usize, 8, 12] {
            for p1 in 0..4 {
                for p2 in 0..4 {
                    let a = sorted((0..len).map(|j| protos.frame(1, p1 + j)).collect());
                    let b = sorted((0..len).map(|j| protos.frame(2, p2 + j)).collect());
                    assert_eq!(a, b);
                }
            }
        }
    }
}
