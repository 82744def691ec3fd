//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SNFG" | version u16 | meta_len u32 | meta JSON
//! param_count u32 | { name_len u16 | name | rank u8 | dims u32* | f32* }*
//! [ "MASK" | entry_count u32 | { name_len u16 | name | rank u8 | dims u32* | bitmap }* ]
//! ```
//!
//! Bitmaps hold one bit per entry, LSB first within each byte, padded to a
//! whole byte. A set bit means the weight survives.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderConfig, Model};
use crate::prune::{Mask, MaskEntry};
use crate::tensor::{ParameterTree, Tensor};

pub const MAGIC: [u8; 4] = *b"SNFG";
pub const VERSION: u16 = 1;
const MASK_TAG: [u8; 4] = *b"MASK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub config: EncoderConfig,
    pub language: Option<String>,
    /// `base`, `upstream`, `downstream` or `mask`.
    pub stage: String,
    pub seed: u64,
    pub epoch: Option<usize>,
    #[serde(default)]
    pub sparsity: Option<f64>,
}

impl Metadata {
    pub fn new(config: EncoderConfig, stage: &str, seed: u64) -> Self {
        Self {
            config,
            language: None,
            stage: stage.to_string(),
            seed,
            epoch: None,
            sparsity: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Metadata,
    pub params: ParameterTree,
    pub mask: Option<Mask>,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model {
            config: self.metadata.config,
            params: self.params.clone(),
        }
    }
}

fn put_name(out: &mut Vec<u8>, name: &str, shape: &[usize]) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::Malformed(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let rank = u8::try_from(shape.len())
        .map_err(|_| Error::Malformed(format!("rank too high: {name}")))?;
    out.push(rank);
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::Malformed(format!("dimension too large: {name}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ckpt.metadata)?;
    let mut out = Vec::with_capacity(16 + meta.len() + 4 * ckpt.params.num_elements());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in ckpt.params.iter() {
        put_name(&mut out, name, t.shape())?;
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(mask) = &ckpt.mask {
        out.extend_from_slice(&MASK_TAG);
        out.extend_from_slice(&(mask.len() as u32).to_le_bytes());
        for (name, entry) in mask.iter() {
            put_name(&mut out, name, entry.shape())?;
            let mut bytes = vec![0u8; entry.keep().len().div_ceil(8)];
            for (i, &k) in entry.keep().iter().enumerate() {
                if k {
                    bytes[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&bytes);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn header(&mut self) -> Result<(String, Vec<usize>)> {
        let len = self.u16("name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| Error::Malformed("name is not UTF-8".into()))?
            .to_string();
        let rank = self.u8("rank")? as usize;
        if rank == 0 {
            return Err(Error::Malformed(format!("`{name}` has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = self.u32("dims")? as usize;
            if d == 0 {
                return Err(Error::Malformed(format!("`{name}` has a zero dimension")));
            }
            shape.push(d);
        }
        Ok((name, shape))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Malformed("element count overflows".into()))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = r.u32("metadata length")? as usize;
    let metadata: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)?;

    let count = r.u32("parameter count")?;
    let mut params = ParameterTree::new();
    for _ in 0..count {
        let (name, shape) = r.header()?;
        let n = element_count(&shape)?;
        let raw = r.take(
            n.checked_mul(4).ok_or(Error::Truncated("parameter data"))?,
            "parameter data",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if params.contains(&name) {
            return Err(Error::Malformed(format!("duplicate parameter `{name}`")));
        }
        params
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Malformed(e.to_string()))?;
    }

    let mask = if r.remaining() == 0 {
        None
    } else {
        let tag = r.take(4, "mask tag")?;
        if tag != MASK_TAG {
            return Err(Error::Malformed(
                "unexpected bytes after parameter table".into(),
            ));
        }
        let count = r.u32("mask entry count")?;
        let mut mask = Mask::new();
        let mut seen = BTreeMap::new();
        for _ in 0..count {
            let (name, shape) = r.header()?;
            let n = element_count(&shape)?;
            let bytes = r.take(n.div_ceil(8), "mask bitmap")?;
            let keep = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
            if seen.insert(name.clone(), ()).is_some() {
                return Err(Error::Malformed(format!("duplicate mask entry `{name}`")));
            }
            mask.insert(name, MaskEntry::new(shape, keep)?);
        }
        if r.remaining() != 0 {
            return Err(Error::Malformed("trailing bytes after mask section".into()));
        }
        Some(mask)
    };
    Ok(Checkpoint {
        metadata,
        params,
        mask,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_model;
    use crate::prune::global_l1_prune;

    fn sample(with_mask: bool) -> Checkpoint {
        let cfg = EncoderConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            ..Default::default()
        };
        let model = init_model(cfg, 3).unwrap();
        let mask = with_mask.then(|| global_l1_prune(&model.params, 0.37).unwrap());
        Checkpoint {
            metadata: Metadata::new(cfg, "base", 3),
            params: model.params,
            mask,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for with_mask in [false, true] {
            let c = sample(with_mask);
            let bytes = encode(&c).unwrap();
            let back = decode(&bytes).unwrap();
            assert!(back.params.bitwise_eq(&c.params));
            assert_eq!(back.mask, c.mask);
            assert_eq!(back.metadata, c.metadata);
            assert_eq!(encode(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn header_errors_are_distinct() {
        let bytes = encode(&sample(false)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode(&v2),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            decode(&bytes[..2]),
            Err(Error::Truncated("magic"))
        ));
    }

    #[test]
    fn every_truncation_point_fails() {
        let bytes = encode(&sample(true)).unwrap();
        // cutting exactly at the end of the parameter table leaves a valid
        // checkpoint without a mask section
        let boundary = encode(&sample(false)).unwrap().len();
        for cut in (0..bytes.len()).filter(|&c| c != boundary) {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        assert!(decode(&bytes[..boundary]).unwrap().mask.is_none());
    }

    #[test]
    fn bitmap_is_lsb_first() {
        let mut mask = Mask::new();
        mask.insert(
            "encoder/x/weight",
            MaskEntry::new(
                vec![1, 10],
                vec![
                    true, false, false, true, false, false, false, false, false, true,
                ],
            )
            .unwrap(),
        );
        let c = Checkpoint {
            mask: Some(mask),
            ..sample(false)
        };
        let bytes = encode(&c).unwrap();
        assert_eq!(&bytes[bytes.len() - 2..], &[0b0000_1001, 0b0000_0010]);
    }
}
