//! Versioned binary container for an encoder, optionally with a prompt bank
//! and classifier.
//!
//! Layout (little-endian): magic `DELDCKPT`, `u32` version, `u64` header
//! length, JSON header, then every encoder parameter in declaration order as
//! raw `f64`s, then each prompt (`u32` id length, UTF-8 id, `u32` rows,
//! `u8` frozen flag, values), then `W` and `b` when present.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::prompt::{PositionMode, PromptBank, SoftPrompt};
use crate::tensor::{Parameter, Tensor};
use crate::trainer::{Classifier, ModelState};

const MAGIC: &[u8; 8] = b"DELDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    encoder_frozen: bool,
    position_mode: PositionMode,
    prompts: usize,
    classifier: bool,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub encoder: EncoderState,
    pub bank: PromptBank,
    pub classifier: Option<Classifier>,
}

impl From<ModelState> for Checkpoint {
    fn from(m: ModelState) -> Self {
        Checkpoint {
            encoder: m.encoder,
            bank: m.bank,
            classifier: Some(m.classifier),
        }
    }
}

impl Checkpoint {
    pub fn encoder_only(encoder: EncoderState) -> Self {
        Checkpoint {
            encoder,
            bank: PromptBank::default(),
            classifier: None,
        }
    }

    /// Rebuilds a model; a missing classifier starts at zero.
    pub fn into_model(self) -> ModelState {
        let d = self.encoder.d_model();
        ModelState {
            encoder: self.encoder,
            bank: self.bank,
            classifier: self.classifier.unwrap_or_else(|| Classifier::new(d)),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.encoder.config().clone(),
            encoder_frozen: self.encoder.is_frozen(),
            position_mode: self.bank.position_mode(),
            prompts: self.bank.len(),
            classifier: self.classifier.is_some(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.encoder.params() {
            put_values(&mut out, p.value());
        }
        for p in self.bank.prompts() {
            let id = p.generator_id().as_bytes();
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id);
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            out.push(u8::from(p.is_frozen()));
            put_values(&mut out, p.matrix.value());
        }
        if let Some(c) = &self.classifier {
            put_values(&mut out, c.w.value());
            put_values(&mut out, c.b.value());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)?;
        let mut encoder = EncoderState::init(header.config.clone())?;
        for p in encoder.params_mut() {
            r.fill(p.value_mut())?;
        }
        if header.encoder_frozen {
            encoder = encoder.freeze();
        }
        let d = header.config.d_model;
        let mut bank = PromptBank::new(header.position_mode);
        for _ in 0..header.prompts {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("prompt id is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let frozen = r.take(1)?[0] != 0;
            let mut value = Tensor::zeros(&[rows, d]);
            r.fill(&mut value)?;
            bank.push(SoftPrompt::from_parts(id, Parameter::new(value), frozen))?;
        }
        let classifier = if header.classifier {
            let mut c = Classifier::new(d);
            r.fill(c.w.value_mut())?;
            r.fill(c.b.value_mut())?;
            Some(c)
        } else {
            None
        };
        if r.at != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes in checkpoint",
                bytes.len() - r.at
            )));
        }
        Ok(Checkpoint {
            encoder,
            bank,
            classifier,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Raw parameter bytes of an encoder, for bit-exact comparisons.
pub fn encoder_bytes(encoder: &EncoderState) -> Vec<u8> {
    let mut out = Vec::new();
    for p in encoder.params() {
        put_values(&mut out, p.value());
    }
    out
}

pub fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * t.len());
    put_values(&mut out, t);
    out
}

fn put_values(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    at: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn fill(&mut self, t: &mut Tensor) -> Result<()> {
        let raw = self.take(8 * t.len())?;
        for (v, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}
