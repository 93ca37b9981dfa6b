//! `SUNW` weight files.
//!
//! Layout (little-endian): magic `SUNW`, version `u32`, entry count `u32`,
//! then per entry: name length `u16`, UTF-8 name, rank `u8`, `u32` dims,
//! raw `f32` payload. Model tensors use their layout names; other entries
//! (optimizer moments, training bookkeeping) ride along under their own
//! prefixes and are ignored when only parameters are read.

use std::path::Path;

use crate::error::{Error, Result};
use crate::util::{read_file, write_atomic, ByteReader};

use super::{ModelParams, ModelSpec};

const MAGIC: &[u8; 4] = b"SUNW";
const VERSION: u32 = 1;
const KIND: &str = "SUNW weight";

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightEntry {
    pub fn scalar(name: impl Into<String>, value: f32) -> Self {
        Self {
            name: name.into(),
            dims: vec![1],
            data: vec![value],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightFile {
    pub entries: Vec<WeightEntry>,
}

impl WeightFile {
    pub fn from_params(params: &ModelParams<f32>) -> Self {
        let entries = (0..params.len())
            .map(|i| WeightEntry {
                name: params.names()[i].clone(),
                dims: params.dims(i),
                data: params.tensors()[i].data().to_vec(),
            })
            .collect();
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&WeightEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn scalar(&self, name: &str) -> Option<f32> {
        self.get(name).and_then(|e| e.data.first().copied())
    }

    /// Model parameters, shape-checked against `spec`.
    pub fn params(&self, spec: &ModelSpec) -> Result<ModelParams<f32>> {
        let names: Vec<String> = spec.layout().into_iter().map(|(n, _)| n).collect();
        let named = self
            .entries
            .iter()
            .filter(|e| names.contains(&e.name))
            .map(|e| (e.name.clone(), e.dims.clone(), e.data.clone()))
            .collect();
        ModelParams::from_named(spec, named)
    }

    /// Infers the base width from `enc1.conv1.weight` (`[base, in, 3, 3]`).
    pub fn infer_spec(&self) -> Result<ModelSpec> {
        let e = self
            .get("enc1.conv1.weight")
            .ok_or_else(|| Error::format(KIND, "no enc1.conv1.weight entry"))?;
        match e.dims[..] {
            [base, cin, 3, 3] => Ok(ModelSpec {
                base_channels: base,
                in_channels: cin,
                out_channels: 1,
            }),
            _ => Err(Error::format(KIND, format!("enc1.conv1.weight has dims {:?}", e.dims))),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.entries.len()).map_err(|_| Error::format(KIND, "too many entries"))?.to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::format(KIND, "name too long"))?;
            let rank = u8::try_from(e.dims.len()).map_err(|_| Error::format(KIND, "rank too large"))?;
            if e.dims.iter().product::<usize>() != e.data.len() {
                return Err(Error::format(KIND, format!("{}: dims {:?} vs {} values", e.name, e.dims, e.data.len())));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for &d in &e.dims {
                let d = u32::try_from(d).map_err(|_| Error::format(KIND, "dimension too large"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, KIND);
        if r.take(4)? != MAGIC {
            return Err(Error::format(KIND, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(KIND, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(KIND, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f32_vec(dims.iter().product())?;
            entries.push(WeightEntry { name, dims, data });
        }
        r.finish()?;
        Ok(Self { entries })
    }
}

/// Writes atomically (temporary file, then rename).
pub fn write_weight_file(path: impl AsRef<Path>, file: &WeightFile) -> Result<()> {
    write_atomic(path.as_ref(), &file.encode()?)
}

pub fn read_weight_file(path: impl AsRef<Path>) -> Result<WeightFile> {
    WeightFile::decode(&read_file(path.as_ref())?)
}

/// Reads model parameters; `spec` defaults to the one implied by the file.
pub fn read_params(path: impl AsRef<Path>, spec: Option<&ModelSpec>) -> Result<ModelParams<f32>> {
    let file = read_weight_file(path)?;
    let spec = match spec {
        Some(s) => *s,
        None => file.infer_spec()?,
    };
    file.params(&spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    #[test]
    fn round_trip_with_extra_entries() {
        let spec = ModelSpec::with_base(2);
        let params = init_params::<f32>(&spec, 5).unwrap();
        let mut file = WeightFile::from_params(&params);
        file.entries.push(WeightEntry::scalar("adam.step", 3.0));
        let bytes = file.encode().unwrap();
        assert_eq!(&bytes[..4], b"SUNW");
        let back = WeightFile::decode(&bytes).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.params(&spec).unwrap(), params);
        assert_eq!(back.infer_spec().unwrap(), spec);
        assert_eq!(back.scalar("adam.step"), Some(3.0));
    }

    #[test]
    fn header_layout() {
        let file = WeightFile {
            entries: vec![WeightEntry {
                name: "x".into(),
                dims: vec![2],
                data: vec![1.0, -2.0],
            }],
        };
        let bytes = file.encode().unwrap();
        let mut expected = b"SUNW".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'x');
        expected.push(1);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn corrupt_inputs() {
        let spec = ModelSpec::with_base(1);
        let bytes = WeightFile::from_params(&init_params::<f32>(&spec, 0).unwrap()).encode().unwrap();
        assert!(WeightFile::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(WeightFile::decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(WeightFile::decode(&magic).is_err());
        // shapes validated against the spec
        let file = WeightFile::decode(&bytes).unwrap();
        assert!(file.params(&ModelSpec::with_base(2)).is_err());
    }
}
