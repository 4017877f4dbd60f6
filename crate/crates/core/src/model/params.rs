use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, FormatError, Result};
use crate::model::spec::{ModelSpec, ParamRole};
use crate::tensor::{real, Matrix, Real};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OADP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    pub momentum: Matrix<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Matrix<T>) -> Self {
        let [r, c] = value.shape();
        Param {
            value,
            grad: Matrix::zeros(r, c),
            momentum: Matrix::zeros(r, c),
        }
    }
}

/// Named trainable tensors with their gradients and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

/// Parameters of one store recorded as leaves on a tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds arbitrary variables under parameter names.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    /// Xavier-uniform weights, zero biases. Draws follow the layout order.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for info in spec.param_layout() {
            let value = match info.role {
                ParamRole::Bias => Matrix::zeros(info.rows, info.cols),
                ParamRole::Weight => {
                    let limit = (6.0 / (info.rows + info.cols) as f64).sqrt();
                    let data = (0..info.rows * info.cols)
                        .map(|_| real(rng.random_range(-limit..=limit)))
                        .collect();
                    Matrix::from_vec(info.rows, info.cols, data)
                }
            };
            store.insert(info.name, value);
        }
        store
    }

    /// Every parameter set to zero.
    pub fn zeros(spec: &ModelSpec) -> Self {
        let mut store = Self::new();
        for info in spec.param_layout() {
            store.insert(info.name, Matrix::zeros(info.rows, info.cols));
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Matrix<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn set_value(&mut self, name: &str, value: Matrix<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set_value",
                left: p.value.shape(),
                right: value.shape(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(n, p)| (n.clone(), tape.leaf(p.value.clone())))
                .collect(),
        }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(n, p)| (n.clone(), tape.constant(p.value.clone())))
                .collect(),
        }
    }

    /// Adds the tape's gradients for `bound` onto the stored gradients.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (name, var) in bound.iter() {
            if let Some(p) = self.params.get_mut(name) {
                p.grad.add_assign(&tape.grad(*var));
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    /// Checks that names and shapes match the model layout.
    pub fn check_layout(&self, spec: &ModelSpec) -> Result<()> {
        let layout = spec.param_layout();
        if layout.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "parameter count {} does not match model ({})",
                self.params.len(),
                layout.len()
            )));
        }
        for info in layout {
            let p = self.params.get(&info.name).ok_or_else(|| {
                Error::Validation(format!("checkpoint lacks parameter `{}`", info.name))
            })?;
            if p.value.shape() != [info.rows, info.cols] {
                return Err(Error::Validation(format!(
                    "parameter `{}` has shape {:?}, model expects {:?}",
                    info.name,
                    p.value.shape(),
                    [info.rows, info.cols]
                )));
            }
        }
        Ok(())
    }

    /// Checkpoint bytes: magic, version, value width, fingerprint, then one
    /// record per parameter in name order.
    pub fn to_checkpoint_bytes(&self, fingerprint: u64) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        out.extend_from_slice(&fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
            for &v in p.value.as_slice() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn save<W: Write>(&self, fingerprint: u64, mut w: W) -> Result<()> {
        w.write_all(&self.to_checkpoint_bytes(fingerprint))?;
        Ok(())
    }

    /// Returns the store and the fingerprint recorded in the file.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, u64)> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic.into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let width = r.u32()? as usize;
        if width != T::BYTES {
            return Err(Error::Validation(format!(
                "checkpoint stores {width}-byte values, run precision is {}",
                T::NAME
            )));
        }
        let fingerprint = r.u64()?;
        let count = r.u32()? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format(FormatError::Malformed))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [m, n] => (*m, *n),
                _ => return Err(FormatError::Malformed.into()),
            };
            let raw = r.take(rows * cols * width)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            store.insert(name, Matrix::from_vec(rows, cols, data));
        }
        if r.pos != bytes.len() {
            return Err(FormatError::Malformed.into());
        }
        Ok((store, fingerprint))
    }

    pub fn load<R: Read>(mut r: R) -> Result<(Self, u64)> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Format(FormatError::TruncatedPayload))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::{ModelKind, ParamRole};

    fn desk(kind: ModelKind) -> ModelSpec {
        ModelSpec::new(kind, 16, 2).with_width_multiplier(1.0 / 64.0)
    }

    #[test]
    fn same_seed_gives_identical_stores() {
        let spec = desk(ModelKind::Lstm);
        assert_eq!(ParamStore::<f64>::init(&spec, 3), ParamStore::<f64>::init(&spec, 3));
        assert_ne!(ParamStore::<f64>::init(&spec, 3), ParamStore::<f64>::init(&spec, 4));
    }

    #[test]
    fn biases_start_at_zero() {
        let spec = desk(ModelKind::Dcc);
        let store = ParamStore::<f32>::init(&spec, 1);
        for info in spec.param_layout() {
            if info.role == ParamRole::Bias {
                assert!(store.value(&info.name).unwrap().as_slice().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn weight_mean_vanishes_for_large_tensors() {
        // 64×64 recurrent matrices hold 4096 entries
        let spec = desk(ModelKind::Lstm);
        for seed in 0..20 {
            let store = ParamStore::<f64>::init(&spec, seed);
            let u = store.value("lstm.l0.U_i").unwrap();
            assert_eq!(u.len(), 4096);
            let mean = u.sum() / u.len() as f64;
            assert!(mean.abs() < 0.01, "seed {seed}: mean {mean}");
            let limit = (6.0f64 / 128.0).sqrt();
            assert!(u.as_slice().iter().all(|v| v.abs() <= limit));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let spec = desk(ModelKind::TransformerQ);
        let store = ParamStore::<f32>::init(&spec, 9);
        let bytes = store.to_checkpoint_bytes(spec.fingerprint());
        assert_eq!(&bytes[..4], b"OADP");
        let (back, fp) = ParamStore::<f32>::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(fp, spec.fingerprint());
        for (name, p) in store.iter() {
            let q = back.get(name).unwrap();
            let a: Vec<u32> = p.value.as_slice().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = q.value.as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        back.check_layout(&spec).unwrap();
    }

    #[test]
    fn checkpoint_errors() {
        let spec = desk(ModelKind::AvgPool);
        let store = ParamStore::<f64>::init(&spec, 1);
        let bytes = store.to_checkpoint_bytes(1);
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            ParamStore::<f64>::from_checkpoint_bytes(truncated),
            Err(Error::Format(FormatError::TruncatedPayload))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ParamStore::<f64>::from_checkpoint_bytes(&bad),
            Err(Error::Format(FormatError::BadMagic))
        ));
        assert!(matches!(
            ParamStore::<f32>::from_checkpoint_bytes(&bytes),
            Err(Error::Validation(_))
        ));
    }
}
