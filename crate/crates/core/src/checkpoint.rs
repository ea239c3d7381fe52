//! Tagged binary envelope for model checkpoints.
//!
//! ```text
//! "MIAUG1"
//! u32 section_count
//! section_count x (4-byte ascii tag, u64 payload_len, payload)
//! ```
//!
//! Layer payloads are `u32 rows, u32 cols, rows*cols f64 (row major), rows f64 bias`;
//! metadata payloads are UTF-8 JSON.

use std::path::Path;

use crate::corpus::MAGIC;
use crate::error::{Error, Result};
use crate::numkit::{LinearLayer, Matrix};

use crate::corpus::io::Reader;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub tag: [u8; 4],
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_layer(&mut self, tag: &[u8; 4], layer: &LinearLayer) {
        let w = layer.weight();
        let mut payload = Vec::with_capacity(8 + 8 * (w.as_slice().len() + w.rows()));
        payload.extend_from_slice(&(w.rows() as u32).to_le_bytes());
        payload.extend_from_slice(&(w.cols() as u32).to_le_bytes());
        for v in w.as_slice().iter().chain(layer.bias()) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        self.sections.push(Section {
            tag: *tag,
            payload,
        });
    }

    pub fn push_json<T: serde::Serialize>(&mut self, tag: &[u8; 4], value: &T) -> Result<()> {
        self.sections.push(Section {
            tag: *tag,
            payload: serde_json::to_vec(value)?,
        });
        Ok(())
    }

    fn section(&self, tag: &[u8; 4]) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| &s.tag == tag)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("missing section {}", String::from_utf8_lossy(tag)),
            })
    }

    pub fn layer(&self, tag: &[u8; 4]) -> Result<LinearLayer> {
        let s = self.section(tag)?;
        let mut r = Reader::new(&s.payload);
        let rows = r.u32("layer rows")? as usize;
        let cols = r.u32("layer cols")? as usize;
        if r.remaining() != 8 * (rows * cols + rows) {
            return r.fail(format!(
                "layer {} declares {rows}x{cols} but carries {} bytes",
                String::from_utf8_lossy(tag),
                r.remaining()
            ));
        }
        let weight = (0..rows * cols)
            .map(|_| r.f64("weight"))
            .collect::<Result<Vec<_>>>()?;
        let bias = (0..rows).map(|_| r.f64("bias")).collect::<Result<Vec<_>>>()?;
        LinearLayer::new(Matrix::new(rows, cols, weight)?, bias)
    }

    pub fn json<T: serde::de::DeserializeOwned>(&self, tag: &[u8; 4]) -> Result<T> {
        Ok(serde_json::from_slice(&self.section(tag)?.payload)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&s.tag);
            out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&s.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic()?;
        let count = r.u32("section count")?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4, "section tag")?.try_into().unwrap();
            let len = r.u64("section length")? as usize;
            if len > r.remaining() {
                return r.fail(format!(
                    "section {} declares {len} bytes, {} left",
                    String::from_utf8_lossy(&tag),
                    r.remaining()
                ));
            }
            let payload = r.take(len, "section payload")?.to_vec();
            sections.push(Section { tag, payload });
        }
        if r.remaining() != 0 {
            return r.fail("trailing bytes after last section");
        }
        Ok(Self { sections })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn layers_and_metadata_round_trip() {
        let mut r = rng::from_seed(4);
        let a = LinearLayer::gaussian(5, 3, &mut r);
        let b = LinearLayer::gaussian(2, 1, &mut r);
        let mut ck = Checkpoint::new();
        ck.push_layer(b"AAAA", &a);
        ck.push_layer(b"BBBB", &b);
        ck.push_json(b"META", &vec![0.1f64, 1e-300, -3.25]).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.layer(b"AAAA").unwrap(), a);
        assert_eq!(back.layer(b"BBBB").unwrap(), b);
        assert_eq!(back.json::<Vec<f64>>(b"META").unwrap(), vec![0.1, 1e-300, -3.25]);
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.layer(b"CCCC").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
