//! Fixed little-endian layout for channel values, shared by the episode
//! container and the policy wire protocol.
//!
//! Channels are written in descriptor order with no names or tags:
//!
//! | leaf      | bytes                                   |
//! |-----------|-----------------------------------------|
//! | scalar    | f64 LE                                  |
//! | vector    | `dim` × f64 LE                          |
//! | image u8  | `height·width·channels` raw bytes (HWC)  |
//! | image f32 | `height·width·channels` × f32 LE (HWC)   |
//! | discrete  | u64 LE                                  |
//! | dict      | nested entries in declaration order     |

use thiserror::Error;

use crate::space::{Channels, ElementKind, Image, ImageData, Leaf, SpaceDescriptor, Value};

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("channel {0} missing or of the wrong kind for its schema")]
    Shape(String),
    #[error("buffer ended while decoding {0}")]
    Truncated(String),
    #[error("{0} trailing bytes after decoding")]
    Trailing(usize),
}

pub fn encode_channels(space: &SpaceDescriptor, channels: &Channels, out: &mut Vec<u8>) -> Result<(), CodecError> {
    for (name, leaf) in space.iter() {
        let value = channels.get(name).ok_or_else(|| CodecError::Shape(name.clone()))?;
        encode_value(name, leaf, value, out)?;
    }
    Ok(())
}

fn encode_value(name: &str, leaf: &Leaf, value: &Value, out: &mut Vec<u8>) -> Result<(), CodecError> {
    match (leaf, value) {
        (Leaf::Scalar { .. }, Value::Scalar(x)) => out.extend_from_slice(&x.to_le_bytes()),
        (Leaf::Vector { dim, .. }, Value::Vector(v)) if v.len() == *dim => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        (Leaf::Image { height, width, channels, element }, Value::Image(img))
            if img.height == *height
                && img.width == *width
                && img.channels == *channels
                && img.data.kind() == *element
                && img.data.len() == height * width * channels =>
        {
            match &img.data {
                ImageData::U8(b) => out.extend_from_slice(b),
                ImageData::F32(f) => {
                    out.reserve(f.len() * 4);
                    for x in f {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        (Leaf::Discrete { .. }, Value::Discrete(k)) => out.extend_from_slice(&k.to_le_bytes()),
        (Leaf::Dict { entries }, Value::Dict(ch)) => encode_channels(entries, ch, out)?,
        _ => return Err(CodecError::Shape(name.to_string())),
    }
    Ok(())
}

/// Byte cursor over a borrowed buffer.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8, CodecError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn finish(self) -> Result<(), CodecError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(CodecError::Trailing(n)),
        }
    }
}

pub fn decode_channels(space: &SpaceDescriptor, reader: &mut Reader<'_>) -> Result<Channels, CodecError> {
    let mut out = Channels::new();
    for (name, leaf) in space.iter() {
        out.insert(name, decode_value(name, leaf, reader)?);
    }
    Ok(out)
}

fn decode_value(name: &str, leaf: &Leaf, r: &mut Reader<'_>) -> Result<Value, CodecError> {
    Ok(match leaf {
        Leaf::Scalar { .. } => Value::Scalar(r.f64(name)?),
        Leaf::Vector { dim, .. } => Value::Vector((0..*dim).map(|_| r.f64(name)).collect::<Result<_, _>>()?),
        Leaf::Image { height, width, channels, element } => {
            let n = height * width * channels;
            let raw = r.take(n * element.size(), name)?;
            let data = match element {
                ElementKind::U8 => ImageData::U8(raw.to_vec()),
                ElementKind::F32 => {
                    ImageData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                }
            };
            Value::Image(Image { height: *height, width: *width, channels: *channels, data })
        }
        Leaf::Discrete { .. } => Value::Discrete(r.u64(name)?),
        Leaf::Dict { entries } => Value::Dict(decode_channels(entries, r)?),
    })
}

/// Size in bytes of one encoded value set for `space`.
pub fn encoded_len(space: &SpaceDescriptor) -> usize {
    space
        .iter()
        .map(|(_, leaf)| match leaf {
            Leaf::Scalar { .. } | Leaf::Discrete { .. } => 8,
            Leaf::Vector { dim, .. } => 8 * dim,
            Leaf::Image { height, width, channels, element } => height * width * channels * element.size(),
            Leaf::Dict { entries } => encoded_len(entries),
        })
        .sum()
}
