//! `AFCK` checkpoints: magic, `u32` version, the config text, step counter,
//! best validation score, parameter tensors (rank, dims, `f64` values) and
//! the Adam moments. All little-endian.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use super::{AdamState, TrainConfig, TrainError};
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model and optimizer state after `step` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    /// Best validation score seen so far (`-inf` before any validation).
    pub best_score: f64,
    pub params: ModelParams,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&CHECKPOINT_MAGIC);
        let text = self.config.to_text();
        // Writes into a Vec cannot fail.
        b.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        b.write_u32::<LittleEndian>(text.len() as u32).unwrap();
        b.extend_from_slice(text.as_bytes());
        b.write_u64::<LittleEndian>(self.step).unwrap();
        b.write_f64::<LittleEndian>(self.best_score).unwrap();
        b.write_u32::<LittleEndian>(self.params.len() as u32).unwrap();
        for t in self.params.values() {
            b.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
            for d in t.shape() {
                b.write_u32::<LittleEndian>(*d as u32).unwrap();
            }
            write_values(&mut b, t);
        }
        b.write_u64::<LittleEndian>(self.adam.step).unwrap();
        for t in self.adam.m.iter().chain(&self.adam.v) {
            write_values(&mut b, t);
        }
        b
    }

    /// Decodes a checkpoint. With `expected`, the stored parameters must fit
    /// that config's architecture.
    pub fn from_bytes(bytes: &[u8], expected: Option<&TrainConfig>) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let len = r.u32()? as usize;
        let text =
            std::str::from_utf8(r.take(len)?).map_err(|e| TrainError::Checkpoint(format!("config text: {e}")))?;
        let config = TrainConfig::parse(text)?;
        let step = r.u64()?;
        let best_score = r.f64()?;
        let count = r.u32()? as usize;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            values.push(r.tensor(shape)?);
        }
        let target = expected.unwrap_or(&config);
        let params = ModelParams::from_values(target.arch(), values).map_err(|e| TrainError::Shape(e.to_string()))?;
        let adam_step = r.u64()?;
        let mut moments = Vec::with_capacity(2 * count);
        for i in 0..2 * count {
            moments.push(r.tensor(params.values()[i % count].shape().to_vec())?);
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let v = moments.split_off(count);
        Ok(Self {
            config,
            step,
            best_score,
            params,
            adam: AdamState {
                step: adam_step,
                m: moments,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes()).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path, expected: Option<&TrainConfig>) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, expected)
    }
}

fn write_values(b: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        b.write_f64::<LittleEndian>(*v).unwrap();
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.bytes.len() - self.pos < n {
            return Err(TrainError::Checkpoint(format!(
                "truncated at byte offset {} (need {n} more bytes)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor, TrainError> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw.chunks_exact(8).map(LittleEndian::read_f64).collect();
        Tensor::new(shape, data).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }
}
