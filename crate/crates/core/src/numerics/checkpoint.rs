//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SEDL"
//! 4       1     format version (= 1)
//! 5       1     kind: 0 plain, 1 teacher, 2 student, 3 noise reference
//! 6       1     flags: bit 0 set when guidance ranges follow
//! 7       16    [flag bit 0] w_image_lo, w_image_hi, w_text_lo, w_text_hi (f32 LE)
//! ..      4     tensor count (u32 LE)
//!               per tensor: name length (u16 LE), UTF-8 name, rank (u8),
//!               rank x dim (u32 LE)
//! ..            payload: every tensor's elements in table order, f32 LE
//! ```
//!
//! Payloads are 32-bit, so saving an `f64` tensor rounds each element to the
//! nearest `f32`. Tensors whose elements are already `f32`-representable
//! round-trip bit-exactly.

use std::path::Path;

use thiserror::Error;

use super::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SEDL";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("bad magic: expected \"SEDL\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Plain = 0,
    Teacher = 1,
    Student = 2,
    NoiseReference = 3,
}

impl CheckpointKind {
    fn from_byte(b: u8) -> Result<Self, CheckpointError> {
        Ok(match b {
            0 => Self::Plain,
            1 => Self::Teacher,
            2 => Self::Student,
            3 => Self::NoiseReference,
            other => return Err(CheckpointError::Malformed(format!("unknown kind byte {other}"))),
        })
    }
}

/// Guidance-scale ranges a student was distilled over.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceRanges {
    pub image: (f32, f32),
    pub text: (f32, f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub guidance: Option<GuidanceRanges>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(kind: CheckpointKind, tensors: &[(String, &Tensor<T>)]) -> Self {
        Self {
            kind,
            guidance: None,
            tensors: tensors.iter().map(|(n, t)| (n.clone(), t.cast::<f32>())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.push(self.kind as u8);
        out.push(u8::from(self.guidance.is_some()));
        if let Some(g) = self.guidance {
            for v in [g.image.0, g.image.1, g.text.0, g.text.1] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| CheckpointError::Malformed("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| CheckpointError::Malformed(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank())
                .map_err(|_| CheckpointError::Malformed(format!("rank too large for {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| CheckpointError::Malformed(format!("dimension too large in {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let kind = CheckpointKind::from_byte(r.u8()?)?;
        let flags = r.u8()?;
        if flags & !1 != 0 {
            return Err(CheckpointError::Malformed(format!("unknown flag bits {flags:#04x}")));
        }
        let guidance = if flags & 1 == 1 {
            let v = [r.f32()?, r.f32()?, r.f32()?, r.f32()?];
            Some(GuidanceRanges { image: (v[0], v[1]), text: (v[2], v[3]) })
        } else {
            None
        };
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            table.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape) in table {
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| {
                CheckpointError::Malformed(format!("tensor {name} is implausibly large"))
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { kind, guidance, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.pos, needed: n, len: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.encode()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::decode(&std::fs::read(path)?)
}
