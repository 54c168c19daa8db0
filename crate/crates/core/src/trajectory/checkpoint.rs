//! The `LTCK` parameter checkpoint format.

use std::path::Path;

use indexmap::IndexMap;

use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::model::{Architecture, ParameterSet};
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &str = "LTCK";
const VERSION: u16 = 1;

pub fn encode<T: Scalar>(params: &ParameterSet<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    codec::put_u16(&mut out, VERSION);
    codec::put_u32(&mut out, params.len() as u32);
    for (name, t) in params.tensors() {
        codec::put_name(&mut out, name)?;
        out.push(T::DTYPE as u8);
        codec::put_shape(&mut out, t.shape())?;
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

/// Decodes named tensors. Every tensor must be stored as `T`; no silent
/// conversion between widths.
pub fn decode_tensors<T: Scalar>(bytes: &[u8]) -> Result<IndexMap<String, Tensor<T>>> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(MAGIC)?;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint",
            version,
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = IndexMap::new();
    for _ in 0..count {
        let name = r.name()?;
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| r.malformed(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(r.malformed(format!("`{name}` stored as {dtype:?}, expected {:?}", T::DTYPE)));
        }
        let shape = r.shape()?;
        let n: usize = shape.iter().product();
        let width = dtype.size_in_bytes();
        let payload = r.take(n * width, "tensor payload")?;
        let data = payload.chunks_exact(width).map(T::read_le).collect();
        let t = Tensor::new(shape, data)?;
        if out.insert(name.clone(), t).is_some() {
            return Err(r.malformed(format!("duplicate tensor `{name}`")));
        }
    }
    r.finish()?;
    Ok(out)
}

pub fn decode<T: Scalar>(arch: &Architecture, bytes: &[u8]) -> Result<ParameterSet<T>> {
    ParameterSet::from_tensors(arch, decode_tensors(bytes)?)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, params: &ParameterSet<T>) -> Result<()> {
    codec::write_atomic(path.as_ref(), &encode(params)?)
}

pub fn load<T: Scalar>(path: impl AsRef<Path>, arch: &Architecture) -> Result<ParameterSet<T>> {
    decode(arch, &codec::read_file(path.as_ref())?)
}
