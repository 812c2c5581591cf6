//! Single-file binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "STRBCKPT" | version u32 | section count u32
//! { tag [u8; 4] | payload length u64 | payload }*
//! CRC32 of every preceding byte, u32
//! ```
//!
//! Sections: `CONF` encoder config (JSON), `VOCB` tokens (newline separated),
//! `PARM` named encoder tensors, `PROJ` projection (optional), `OPTM` AdamW
//! moments and step (optional), `RNGS` named random-stream states, `LADR`
//! ladder (JSON, optional).

use std::fs;
use std::path::Path;

use starbucks_tensor::{RngState, Tensor};

use crate::data::Vocab;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{CheckpointError, Error, Result};
use crate::optim::AdamState;
use crate::subnetworks::Ladder;

pub const MAGIC: [u8; 8] = *b"STRBCKPT";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 16;
const TRAILER_LEN: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub params: EncoderParams,
    pub projection: Option<Tensor>,
    pub optimizer: Option<AdamState>,
    pub rng_states: Vec<(String, RngState)>,
    pub ladder: Option<Ladder>,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Checkpoint(CheckpointError::Malformed(msg.into()))
}

impl<'b> Reader<'b> {
    fn new(bytes: &'b [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| malformed(format!("field of {n} bytes overruns its section")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| malformed("string is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(malformed(format!("tensor with {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = usize::try_from(self.u64()?).map_err(|_| malformed("dimension overflow"))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| malformed("tensor size overflow"))?;
            shape.push(d);
        }
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| malformed("tensor size overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| malformed(e.to_string()))
    }

    fn finish(&self, tag: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(malformed(format!("{} trailing bytes in section {tag}", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();
        sections.push((*b"CONF", serde_json::to_vec(&self.config).expect("config serializes")));
        sections.push((*b"VOCB", self.vocab.tokens().join("\n").into_bytes()));
        let mut w = Writer::default();
        let named = self.params.named();
        w.u32(named.len() as u32);
        for (name, t) in named {
            w.str(&name);
            w.tensor(t);
        }
        sections.push((*b"PARM", w.0));
        if let Some(p) = &self.projection {
            let mut w = Writer::default();
            w.tensor(p);
            sections.push((*b"PROJ", w.0));
        }
        if let Some(opt) = &self.optimizer {
            let mut w = Writer::default();
            w.u64(opt.step);
            w.u32(opt.m.len() as u32);
            for t in opt.m.iter().chain(&opt.v) {
                w.tensor(t);
            }
            sections.push((*b"OPTM", w.0));
        }
        let mut w = Writer::default();
        w.u32(self.rng_states.len() as u32);
        for (name, s) in &self.rng_states {
            w.str(name);
            w.u64(s.seed);
            w.u64(s.stream);
            w.0.extend_from_slice(&s.word_pos.to_le_bytes());
        }
        sections.push((*b"RNGS", w.0));
        if let Some(l) = &self.ladder {
            sections.push((*b"LADR", serde_json::to_vec(l).expect("ladder serializes")));
        }

        let mut out = Writer::default();
        out.0.extend_from_slice(&MAGIC);
        out.u32(FORMAT_VERSION);
        out.u32(sections.len() as u32);
        for (tag, payload) in sections {
            out.0.extend_from_slice(&tag);
            out.u64(payload.len() as u64);
            out.0.extend_from_slice(&payload);
        }
        let crc = crc32fast::hash(&out.0);
        out.u32(crc);
        out.0
    }

    /// Validates magic, version, section framing and CRC, in that order,
    /// then decodes every section.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let magic_len = bytes.len().min(MAGIC.len());
        if bytes[..magic_len] != MAGIC[..magic_len] {
            return Err(CheckpointError::BadMagic.into());
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Truncated.into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let count = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let mut sections: Vec<([u8; 4], &[u8])> = Vec::with_capacity(count.min(64));
        let mut pos = HEADER_LEN;
        for _ in 0..count {
            if bytes.len() < pos + 12 + TRAILER_LEN {
                return Err(CheckpointError::Truncated.into());
            }
            let tag: [u8; 4] = bytes[pos..pos + 4].try_into().expect("4 bytes");
            let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().expect("8 bytes"));
            let start = pos + 12;
            let end = usize::try_from(len)
                .ok()
                .and_then(|l| start.checked_add(l))
                .filter(|&e| e + TRAILER_LEN <= bytes.len())
                .ok_or(CheckpointError::Truncated)?;
            sections.push((tag, &bytes[start..end]));
            pos = end;
        }
        if bytes.len() < pos + TRAILER_LEN {
            return Err(CheckpointError::Truncated.into());
        }
        if bytes.len() > pos + TRAILER_LEN {
            return Err(malformed(format!(
                "{} unexpected bytes after the last section",
                bytes.len() - pos - TRAILER_LEN
            )));
        }
        let stored = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..pos]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed }.into());
        }

        let find = |tag: &[u8; 4]| sections.iter().find(|(t, _)| t == tag).map(|(_, p)| *p);
        let require = |tag: &[u8; 4]| {
            find(tag).ok_or_else(|| malformed(format!("missing section {}", String::from_utf8_lossy(tag))))
        };
        for (i, (tag, _)) in sections.iter().enumerate() {
            if sections[..i].iter().any(|(t, _)| t == tag) {
                return Err(malformed(format!("duplicate section {}", String::from_utf8_lossy(tag))));
            }
        }

        let config: EncoderConfig = serde_json::from_slice(require(b"CONF")?)
            .map_err(|e| malformed(format!("config: {e}")))?;
        config.validate().map_err(|e| malformed(e.to_string()))?;
        let vocab_text = std::str::from_utf8(require(b"VOCB")?).map_err(|_| malformed("vocabulary is not UTF-8"))?;
        let vocab = Vocab::from_tokens(vocab_text.split('\n').map(str::to_string).collect())
            .map_err(|e| malformed(e.to_string()))?;

        let mut r = Reader::new(require(b"PARM")?);
        let expected = EncoderParams::expected_shapes(&config);
        let n = r.u32()? as usize;
        if n != expected.len() {
            return Err(malformed(format!("{n} parameter tensors, config implies {}", expected.len())));
        }
        let mut tensors = Vec::with_capacity(n);
        for (name, shape) in &expected {
            let got = r.str()?;
            let t = r.tensor()?;
            if &got != name || t.shape() != shape.as_slice() {
                return Err(malformed(format!(
                    "expected {name} {shape:?}, found {got} {:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        r.finish("PARM")?;
        let params = EncoderParams::from_fields(tensors.into_iter(), config.num_layers)
            .ok_or_else(|| malformed("parameter layout"))?;

        let projection = match find(b"PROJ") {
            Some(p) => {
                let mut r = Reader::new(p);
                let t = r.tensor()?;
                r.finish("PROJ")?;
                if t.shape() != [config.hidden_dim, config.hidden_dim] {
                    return Err(malformed(format!("projection shape {:?}", t.shape())));
                }
                Some(t)
            }
            None => None,
        };

        let optimizer = match find(b"OPTM") {
            Some(p) => {
                let mut r = Reader::new(p);
                let step = r.u64()?;
                let n = r.u32()? as usize;
                let mut all = Vec::with_capacity(2 * n.min(4096));
                for _ in 0..2 * n {
                    all.push(r.tensor()?);
                }
                r.finish("OPTM")?;
                let v = all.split_off(n);
                Some(AdamState { step, m: all, v })
            }
            None => None,
        };

        let mut r = Reader::new(require(b"RNGS")?);
        let n = r.u32()? as usize;
        let mut rng_states = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let name = r.str()?;
            let seed = r.u64()?;
            let stream = r.u64()?;
            let word_pos = r.u128()?;
            rng_states.push((name, RngState { seed, stream, word_pos }));
        }
        r.finish("RNGS")?;

        let ladder = match find(b"LADR") {
            Some(p) => {
                let l: Ladder = serde_json::from_slice(p).map_err(|e| malformed(format!("ladder: {e}")))?;
                l.validate(&config).map_err(|e| malformed(e.to_string()))?;
                Some(l)
            }
            None => None,
        };

        Ok(Self {
            config,
            vocab,
            params,
            projection,
            optimizer,
            rng_states,
            ladder,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
