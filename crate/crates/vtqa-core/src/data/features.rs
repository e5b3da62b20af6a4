//! Binary container for precomputed region features.
//!
//! Layout (all little-endian): magic `VTF1`, version u16, record count u32,
//! then per record: key length u16, key UTF-8 bytes, region count u32,
//! width u32, and region*width f32 values.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const FEATURE_MAGIC: [u8; 4] = *b"VTF1";
pub const FEATURE_VERSION: u16 = 1;

/// One keyed block of `regions x width` feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub key: String,
    pub regions: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureRecord {
    pub fn new(key: impl Into<String>, regions: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if regions * width != data.len() {
            return Err(Error::contract(format!(
                "feature record: {regions}x{width} does not match {} values",
                data.len()
            )));
        }
        Ok(FeatureRecord { key: key.into(), regions, width, data })
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(vec![self.regions, self.width]);
        for (dst, &src) in t.data_mut().iter_mut().zip(&self.data) {
            *dst = T::cast(src as f64);
        }
        t
    }
}

/// Indexed collection of feature records with O(1) key lookup.
#[derive(Clone, Debug, Default)]
pub struct FeatureContainer {
    records: Vec<FeatureRecord>,
    index: HashMap<String, usize>,
}

impl FeatureContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: FeatureRecord) -> Result<()> {
        if self.index.contains_key(&record.key) {
            return Err(Error::contract(format!("duplicate feature key `{}`", record.key)));
        }
        self.index.insert(record.key.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&FeatureRecord> {
        self.index
            .get(key)
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::contract(format!("feature key `{key}` not found")))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&FEATURE_MAGIC)?;
        w.write_all(&FEATURE_VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for rec in &self.records {
            let key = rec.key.as_bytes();
            if key.len() > u16::MAX as usize {
                return Err(Error::contract(format!("feature key `{}` too long", rec.key)));
            }
            w.write_all(&(key.len() as u16).to_le_bytes())?;
            w.write_all(key)?;
            w.write_all(&(rec.regions as u32).to_le_bytes())?;
            w.write_all(&(rec.width as u32).to_le_bytes())?;
            for v in &rec.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn write_path(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        fn read_exact_or_format(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
            r.read_exact(buf)
                .map_err(|_| Error::format(format!("feature container truncated reading {what}")))
        }

        let mut magic = [0u8; 4];
        read_exact_or_format(&mut r, &mut magic, "magic")?;
        if magic != FEATURE_MAGIC {
            return Err(Error::format(format!("bad feature magic {magic:?}")));
        }
        let mut u16b = [0u8; 2];
        read_exact_or_format(&mut r, &mut u16b, "version")?;
        let version = u16::from_le_bytes(u16b);
        if version != FEATURE_VERSION {
            return Err(Error::format(format!("unsupported feature version {version}")));
        }
        let mut u32b = [0u8; 4];
        read_exact_or_format(&mut r, &mut u32b, "record count")?;
        let count = u32::from_le_bytes(u32b) as usize;

        let mut out = FeatureContainer::new();
        for i in 0..count {
            read_exact_or_format(&mut r, &mut u16b, "key length")?;
            let key_len = u16::from_le_bytes(u16b) as usize;
            let mut key_bytes = vec![0u8; key_len];
            read_exact_or_format(&mut r, &mut key_bytes, "key")?;
            let key = String::from_utf8(key_bytes)
                .map_err(|_| Error::format(format!("record {i}: key is not UTF-8")))?;
            read_exact_or_format(&mut r, &mut u32b, "region count")?;
            let regions = u32::from_le_bytes(u32b) as usize;
            read_exact_or_format(&mut r, &mut u32b, "width")?;
            let width = u32::from_le_bytes(u32b) as usize;
            let mut data = vec![0f32; regions * width];
            for v in data.iter_mut() {
                read_exact_or_format(&mut r, &mut u32b, "feature values")?;
                *v = f32::from_le_bytes(u32b);
            }
            out.push(FeatureRecord { key, regions, width, data })
                .map_err(|_| Error::format(format!("record {i}: duplicate key")))?;
        }
        Ok(out)
    }

    pub fn read_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }
}
