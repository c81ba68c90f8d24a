//! Binary checkpoints: named f32 tensors, the center bank, and a trailing CRC32.

use std::path::Path;

use crate::bank::CenterBank;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::model::{ModelConfig, ModelParams, NamedTensor};

pub const MAGIC: &[u8; 4] = b"I2CK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub bank: CenterBank,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, bank: &CenterBank) -> Self {
        let mut tensors = params.named().to_vec();
        // gradient slots are training state, not part of the file
        tensors.iter_mut().for_each(|t| t.tensor.set_requires_grad(false));
        Checkpoint {
            tensors,
            bank: bank.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for nt in &self.tensors {
            out.extend_from_slice(&(nt.name.len() as u16).to_le_bytes());
            out.extend_from_slice(nt.name.as_bytes());
            out.push(nt.tensor.rank() as u8);
            for &d in nt.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in nt.tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.bank.to_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::format(bytes.len(), "checkpoint too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::format(
                body.len(),
                format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        let mut r = ByteReader::new(body);
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let at = r.offset();
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(at + 2, "tensor name is not UTF-8"))?
                .to_string();
            let rank_at = r.offset();
            let rank = r.u8()? as usize;
            if !(1..=4).contains(&rank) {
                return Err(Error::format(rank_at, format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            if n == 0 || n.checked_mul(4).is_none_or(|b| b > r.remaining()) {
                return Err(Error::format(rank_at, format!("tensor {name} {shape:?} exceeds the data")));
            }
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push(NamedTensor {
                name,
                tensor: Tensor::new(&shape, data)?,
            });
        }
        let bank_at = r.offset();
        let (bank, used) = CenterBank::restore(&body[bank_at..]).map_err(|e| match e {
            Error::Format { offset, msg } => Error::format(bank_at + offset, msg),
            other => other,
        })?;
        if bank_at + used != body.len() {
            return Err(Error::format(bank_at + used, "trailing bytes before checksum"));
        }
        Ok(Checkpoint { tensors, bank })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Parameters checked against `config`; any dimension mismatch is a
    /// configuration error.
    pub fn params(&self, config: &ModelConfig) -> Result<ModelParams> {
        if self.bank.num_classes() != config.num_classes || self.bank.dim() != config.feature_channels {
            return Err(Error::config(format!(
                "checkpoint bank is {}x{}, configuration expects {}x{}",
                self.bank.num_classes(),
                self.bank.dim(),
                config.num_classes,
                config.feature_channels
            )));
        }
        ModelParams::from_named(config, self.tensors.clone())
    }

    /// Model dimensions implied by the tensor shapes; the stride is not
    /// stored and must be supplied.
    pub fn infer_config(&self, input_size: usize, stride_total: usize) -> Result<ModelConfig> {
        let shape = |name: &str| {
            self.tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| t.tensor.shape().to_vec())
                .ok_or_else(|| Error::config(format!("checkpoint lacks tensor {name}")))
        };
        let (c1, c2, cls) = (shape("conv1.weight")?, shape("conv2.weight")?, shape("classifier.weight")?);
        let config = ModelConfig {
            input_size,
            num_classes: cls[0],
            feature_channels: cls[1],
            stride_total,
            widths: [c1[0], c2[0]],
        };
        config.validate()?;
        Ok(config)
    }
}
