//! Named parameter archives (`ERFW` files).
//!
//! ```text
//! "ERFW" | u16 version = 1 | u32 features | u32 bands | u32 blocks | u32 entry count
//! entry: u16 name length | name (UTF-8) | u32 n | u32 c | u32 h | u32 w | n*c*h*w f32
//! ```
//! All integers and floats little-endian.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{bail, ErftError, Result};
use crate::raster::ByteReader;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"ERFW";
pub const WEIGHTS_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightArchive {
    pub features: u32,
    pub bands: u32,
    pub blocks: u32,
    entries: Vec<(String, Tensor)>,
}

impl WeightArchive {
    pub fn new(features: u32, bands: u32, blocks: u32) -> Self {
        WeightArchive { features, bands, blocks, entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            bail!(Validation, "duplicate weight name {name:?}");
        }
        if name.len() > u16::MAX as usize {
            bail!(Validation, "weight name too long ({} bytes)", name.len());
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`get`](Self::get) but a missing entry or wrong shape is a format error.
    pub fn require(&self, name: &str, shape: [usize; 4]) -> Result<Tensor> {
        let t = self.get(name).ok_or_else(|| ErftError::Format(format!("missing weight {name:?}")))?;
        if t.shape() != shape {
            bail!(Format, "weight {name:?} has shape {:?}, expected {shape:?}", t.shape());
        }
        Ok(t.clone())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        for (name, t) in &self.entries {
            if !seen.insert(name.as_str()) {
                bail!(Validation, "duplicate weight name {name:?}");
            }
            if !t.all_finite() {
                bail!(Validation, "weight {name:?} contains non-finite values");
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        for v in [self.features, self.bands, self.blocks, self.entries.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                let d = u32::try_from(d).map_err(|_| ErftError::Validation(format!("dimension {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != WEIGHTS_MAGIC {
            bail!(Format, "bad weights magic {magic:?}");
        }
        let version = r.u16()?;
        if version != WEIGHTS_VERSION {
            bail!(Format, "unsupported weights version {version}");
        }
        let mut archive = WeightArchive::new(r.u32()?, r.u32()?, r.u32()?);
        let count = r.u32()?;
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name =
                std::str::from_utf8(r.take(len)?).map_err(|e| ErftError::Format(format!("weight name is not UTF-8: {e}")))?.to_owned();
            let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| ErftError::Format(format!("weight {name:?} shape {shape:?} overflows")))?;
            if n == 0 {
                bail!(Format, "weight {name:?} has a zero dimension");
            }
            let data = r.f32s(n)?;
            if data.iter().any(|v| !v.is_finite()) {
                bail!(Validation, "weight {name:?} contains non-finite values");
            }
            archive.insert(name, Tensor::from_vec(shape, data)?)?;
        }
        r.finish()?;
        Ok(archive)
    }
}

pub fn write_weights(archive: &WeightArchive, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, archive.to_bytes()?)?;
    Ok(())
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<WeightArchive> {
    WeightArchive::from_bytes(&fs::read(path)?)
}
