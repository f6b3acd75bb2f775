//! Per-phase binary checkpoint. All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "CSCCTCKP"
//! version      u32      1
//! config_hash  32 bytes sha256
//! seed         u64
//! phase        u32      1-based
//! standardizer u32 dim, dim × f64 mean, dim × f64 std
//! data labels  u32 n, n × (i64 original, u32 internal)
//! label order  u32 n, n × u32 internal class
//! model        u8 feature_relu, u32 layer count, layers, u8 has_classifier, [classifier]
//!   layer      u32 in, u32 out, in·out × f64 weight (row-major), out × f64 bias
//! memory       u32 budget, u32 classes, per class: u32 class, u32 n, n × u64 id
//! ```
//!
//! Trailing bytes are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::learner::LabelMap;
use crate::memory::ExemplarMemory;
use crate::model::{Linear, Model};
use crate::stream::Standardizer;

pub const MAGIC: &[u8; 8] = b"CSCCTCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub phase: u32,
    pub standardizer: Standardizer,
    /// Original dataset label → internal class index (empty for synthetic data).
    pub data_labels: Vec<(i64, usize)>,
    pub labels: LabelMap,
    pub model: Model,
    pub memory: ExemplarMemory,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn linear(&mut self, l: &Linear) -> Result<()> {
        self.u32(l.input_dim())?;
        self.u32(l.output_dim())?;
        self.f64s(l.weight.data());
        self.f64s(l.bias.data());
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn linear(&mut self) -> Result<Linear> {
        let input = self.u32()?;
        let output = self.u32()?;
        let weight = Tensor::matrix(input, output, self.f64s(input * output)?)
            .map_err(|e| Error::Checkpoint(format!("weight: {e}")))?;
        let bias = Tensor::vector(self.f64s(output)?).map_err(|e| Error::Checkpoint(format!("bias: {e}")))?;
        Ok(Linear { weight, bias })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize)?;
        w.0.extend_from_slice(&self.config_hash);
        w.u64(self.seed);
        w.u32(self.phase as usize)?;

        let dim = self.standardizer.mean.len();
        if self.standardizer.std.len() != dim {
            return Err(Error::Checkpoint("standardizer mean/std lengths differ".into()));
        }
        w.u32(dim)?;
        w.f64s(&self.standardizer.mean);
        w.f64s(&self.standardizer.std);

        w.u32(self.data_labels.len())?;
        for &(orig, internal) in &self.data_labels {
            w.0.extend_from_slice(&orig.to_le_bytes());
            w.u32(internal)?;
        }
        w.u32(self.labels.len())?;
        for &c in self.labels.order() {
            w.u32(c)?;
        }

        w.u8(self.model.feature_relu() as u8);
        w.u32(self.model.layers().len())?;
        for l in self.model.layers() {
            w.linear(l)?;
        }
        match self.model.classifier() {
            Some(c) => {
                w.u8(1);
                w.linear(c)?;
            }
            None => w.u8(0),
        }

        w.u32(self.memory.per_class_budget)?;
        w.u32(self.memory.store().len())?;
        for (&class, ids) in self.memory.store() {
            w.u32(class)?;
            w.u32(ids.len())?;
            for &id in ids {
                w.u64(id);
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let seed = r.u64()?;
        let phase = r.u32()? as u32;

        let dim = r.u32()?;
        let mean = r.f64s(dim)?;
        let std = r.f64s(dim)?;

        let n = r.u32()?;
        let mut data_labels = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let orig = r.i64()?;
            data_labels.push((orig, r.u32()?));
        }
        let n = r.u32()?;
        let order = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let labels = LabelMap::from_order(order)?;

        let feature_relu = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad feature_relu flag {b}"))),
        };
        let n_layers = r.u32()?;
        let layers = (0..n_layers).map(|_| r.linear()).collect::<Result<Vec<_>>>()?;
        let classifier = match r.u8()? {
            0 => None,
            1 => Some(r.linear()?),
            b => return Err(Error::Checkpoint(format!("bad classifier flag {b}"))),
        };
        let model = Model::from_parts(layers, classifier, feature_relu)?;
        if model.input_dim() != dim {
            return Err(Error::Checkpoint("standardizer and model input widths differ".into()));
        }
        if model.num_classes() != labels.len() {
            return Err(Error::Checkpoint("classifier width differs from label map".into()));
        }

        let budget = r.u32()?;
        let classes = r.u32()?;
        let mut store = BTreeMap::new();
        for _ in 0..classes {
            let class = r.u32()?;
            let n = r.u32()?;
            let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            store.insert(class, ids);
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }

        Ok(Self {
            config_hash,
            seed,
            phase,
            standardizer: Standardizer { mean, std },
            data_labels,
            labels,
            model,
            memory: ExemplarMemory::from_parts(budget, store),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::stream_rng;

    fn sample() -> Checkpoint {
        let mut rng = stream_rng(3, "init");
        let mut model = Model::new(3, &ModelConfig::default(), &mut rng).unwrap();
        model.expand_classifier(2, &mut rng);
        let memory = ExemplarMemory::from_parts(2, [(4, vec![9, 1]), (7, vec![3])].into_iter().collect());
        Checkpoint {
            config_hash: [7; 32],
            seed: 42,
            phase: 1,
            standardizer: Standardizer {
                mean: vec![0.5, -1.0, 2.0],
                std: vec![1.0, 2.0, 0.25],
            },
            data_labels: vec![(-3, 0), (10, 1)],
            labels: LabelMap::from_order(vec![4, 7]).unwrap(),
            model,
            memory,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[8] = 2;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }
}
