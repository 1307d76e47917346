//! Binary checkpoint format (little endian):
//!
//! ```text
//! "SSCK" | version u32 | config_len u32 | config JSON
//! | tensor_count u32 | { name_len u32 | name | ndim u32 | dims u32 x ndim | f32 data }*
//! ```
//!
//! The JSON block holds `{"model": <ModelConfig>, "training_steps_completed": n}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::validate_shapes;
use super::{Model, ModelConfig, NnetError, Parameters, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub training_steps_completed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    training_steps_completed: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnetError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(NnetError::Truncated {
                offset: self.pos,
                needed: n - available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len_prefixed(&mut self) -> Result<&'a [u8], NnetError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

impl Checkpoint {
    pub fn new(model: Model<f32>, training_steps_completed: u64) -> Self {
        Self {
            model,
            training_steps_completed,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            model: self.model.config.clone(),
            training_steps_completed: self.training_steps_completed,
        })
        .expect("config serializes");
        put_u32(&mut out, header.len());
        out.extend_from_slice(&header);
        put_u32(&mut out, self.model.params.len());
        for (name, t) in self.model.params.iter() {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnetError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(NnetError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnetError::Version(version));
        }
        let header: Header = serde_json::from_slice(r.len_prefixed()?)?;
        header.model.validate()?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = String::from_utf8_lossy(r.len_prefixed()?).into_owned();
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or(NnetError::Truncated { offset: r.pos, needed: usize::MAX })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name, Tensor::new(dims, data));
        }
        validate_shapes(&header.model, tensors.iter().map(|(k, v)| (k.as_str(), v.shape())))?;
        Ok(Checkpoint {
            model: Model {
                config: header.model,
                params: Parameters::new(tensors),
            },
            training_steps_completed: header.training_steps_completed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnetError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnetError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
