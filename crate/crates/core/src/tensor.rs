//! Flat named-tensor checkpoint container and the scalar abstraction the
//! numeric modules are generic over.
//!
//! On disk: a little-endian header (magic, version, config JSON, record
//! table of name/dtype/shape/offset) followed by raw row-major payloads.

use std::collections::HashMap;
use std::io::{Read, Write};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::{Error, Result};

/// Scalar type the numeric code is generic over: f32 for real checkpoints,
/// f64 where test oracles need headroom.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn cast_from(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64")
    }
    fn cast_f64(self) -> f64 {
        self.to_f64().expect("scalar fits f64")
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row slice of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let cols = self.shape[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset into the payload section.
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub records: Vec<TensorRecord>,
    pub config: ModelConfig,
    pub provenance: String,
}

/// In-memory checkpoint: config plus named tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub provenance: String,
    names: Vec<String>,
    tensors: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config: ModelConfig, provenance: impl Into<String>) -> Self {
        Checkpoint {
            config,
            provenance: provenance.into(),
            names: Vec::new(),
            tensors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        if !self.tensors.contains_key(&name) {
            self.names.push(name.clone());
        }
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn manifest(&self) -> CheckpointManifest {
        let mut records = Vec::with_capacity(self.names.len());
        let mut offset = 0u64;
        for name in &self.names {
            let t = &self.tensors[name];
            let byte_len = (t.numel() * T::DTYPE.size()) as u64;
            records.push(TensorRecord {
                name: name.clone(),
                dtype: T::DTYPE,
                shape: t.shape.clone(),
                offset,
                byte_len,
            });
            offset += byte_len;
        }
        CheckpointManifest {
            records,
            config: self.config.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        let meta = serde_json::to_vec(&HeaderMeta {
            config: self.config.clone(),
            provenance: self.provenance.clone(),
        })?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        let manifest = self.manifest();
        w.write_all(&(manifest.records.len() as u64).to_le_bytes())?;
        for rec in &manifest.records {
            w.write_all(&(rec.name.len() as u32).to_le_bytes())?;
            w.write_all(rec.name.as_bytes())?;
            w.write_all(&[rec.dtype.tag(), rec.shape.len() as u8])?;
            for &d in &rec.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&rec.offset.to_le_bytes())?;
            w.write_all(&rec.byte_len.to_le_bytes())?;
        }
        let mut payload = Vec::new();
        for name in &self.names {
            for &v in &self.tensors[name].data {
                v.write_le(&mut payload);
            }
        }
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".to_string()));
        }
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: HeaderMeta = serde_json::from_slice(&meta)?;
        let n_tensors = read_u64(&mut r)? as usize;
        let mut records = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Format(format!("tensor name not UTF-8: {e}")))?;
            let mut tags = [0u8; 2];
            r.read_exact(&mut tags)?;
            let dtype = Dtype::from_tag(tags[0])?;
            let mut shape = Vec::with_capacity(tags[1] as usize);
            for _ in 0..tags[1] {
                shape.push(read_u64(&mut r)? as usize);
            }
            let offset = read_u64(&mut r)?;
            let byte_len = read_u64(&mut r)?;
            records.push(TensorRecord {
                name,
                dtype,
                shape,
                offset,
                byte_len,
            });
        }
        let mut ckpt = Checkpoint::new(meta.config, meta.provenance);
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        for rec in records {
            if rec.dtype != T::DTYPE {
                return Err(Error::DtypeMismatch(rec.name));
            }
            let numel: usize = rec.shape.iter().product();
            let start = rec.offset as usize;
            let end = start + rec.byte_len as usize;
            if end > payload.len() || numel * T::DTYPE.size() != rec.byte_len as usize {
                return Err(Error::Format(format!("payload bounds for {}", rec.name)));
            }
            let data = payload[start..end]
                .chunks_exact(T::DTYPE.size())
                .map(T::read_le)
                .collect();
            ckpt.insert(
                rec.name,
                Tensor {
                    shape: rec.shape,
                    data,
                },
            );
        }
        Ok(ckpt)
    }
}

const MAGIC: &[u8; 4] = b"NTNS";

#[derive(Serialize, Deserialize)]
struct HeaderMeta {
    config: ModelConfig,
    provenance: String,
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
