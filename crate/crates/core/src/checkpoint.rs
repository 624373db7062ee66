//! Checkpoint files.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "TROICKPT" | u32 version | 32-byte SHA-256 of the model text
//! u32 text length | model text (UTF-8, `key = value` lines)
//! u64 epoch
//! u32 parameter count | per parameter: u32 name length, name, tensor
//! u32 velocity count  | tensors
//! ```
//!
//! Tensors use the [`crate::tensor::io`] encoding, so values are stored as
//! f32 whatever the training precision.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::TroiNet;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::{Real, Tensor};
use crate::train::{SgdState, TrainState};

const MAGIC: &[u8; 8] = b"TROICKPT";
const VERSION: u32 = 1;

pub fn config_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_text: String,
    pub epoch: usize,
    pub params: Vec<(String, Tensor<f32>)>,
    pub velocity: Vec<Tensor<f32>>,
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, limit: usize) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > limit {
        return Err(Error::Format(format!(
            "string of {len} bytes exceeds {limit}"
        )));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("string is not UTF-8".into()))
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

impl Checkpoint {
    pub fn capture<T: Real>(model_text: &str, net: &TroiNet<T>, state: &TrainState<T>) -> Self {
        Self {
            model_text: model_text.to_string(),
            epoch: state.epoch,
            params: net
                .store
                .iter()
                .map(|p| (p.name.clone(), p.value.cast()))
                .collect(),
            velocity: state.sgd.velocity.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&config_digest(&self.model_text))?;
        write_string(out, &self.model_text)?;
        out.write_all(&(self.epoch as u64).to_le_bytes())?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            write_string(out, name)?;
            write_tensor(out, t)?;
        }
        out.write_all(&(self.velocity.len() as u32).to_le_bytes())?;
        for t in &self.velocity {
            write_tensor(out, t)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(input)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut digest = [0u8; 32];
        input.read_exact(&mut digest)?;
        let model_text = read_string(input, 1 << 16)?;
        if config_digest(&model_text) != digest {
            return Err(Error::Format("checkpoint config digest mismatch".into()));
        }
        let mut epoch = [0u8; 8];
        input.read_exact(&mut epoch)?;
        let epoch = u64::from_le_bytes(epoch) as usize;
        let count = read_u32(input)? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 12));
        for _ in 0..count {
            let name = read_string(input, 1 << 10)?;
            params.push((name, read_tensor(input)?));
        }
        let count = read_u32(input)? as usize;
        let mut velocity = Vec::with_capacity(count.min(1 << 12));
        for _ in 0..count {
            velocity.push(read_tensor(input)?);
        }
        Ok(Self {
            model_text,
            epoch,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("partial");
        {
            let mut out = BufWriter::new(fs::File::create(&tmp)?);
            self.write(&mut out)?;
            out.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
        Self::read(&mut BufReader::new(file))
    }

    pub fn digest(&self) -> [u8; 32] {
        config_digest(&self.model_text)
    }

    /// The run configuration the checkpoint was trained with; non-model
    /// keys keep their defaults.
    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.model_text)
    }

    /// Rebuilds the network and copies the stored weights into it.
    pub fn build_model<T: Real>(&self) -> Result<TroiNet<T>> {
        let mut net = TroiNet::new(self.run_config()?.model_config(), 0)?;
        self.restore(&mut net)?;
        Ok(net)
    }

    /// Copies stored weights into `net`, which must have the same layout.
    pub fn restore<T: Real>(&self, net: &mut TroiNet<T>) -> Result<()> {
        if self.params.len() != net.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                net.store.len()
            )));
        }
        for ((name, t), p) in self.params.iter().zip(net.store.iter_mut()) {
            if *name != p.name || t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }

    pub fn train_state<T: Real>(&self, net: &TroiNet<T>) -> Result<TrainState<T>> {
        let sgd = if self.velocity.is_empty() {
            SgdState::new(&net.store)
        } else if self.velocity.len() == net.store.len() {
            SgdState {
                velocity: self.velocity.iter().map(Tensor::cast).collect(),
            }
        } else {
            return Err(Error::Format(
                "checkpoint velocity count does not match parameters".into(),
            ));
        };
        Ok(TrainState {
            epoch: self.epoch,
            sgd,
        })
    }
}
