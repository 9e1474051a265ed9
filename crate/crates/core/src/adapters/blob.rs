//! Little-endian tensor container.
//!
//! ```text
//! "SGLR" | u32 version | u32 tensor_count
//! per tensor: u16 name_len | name (UTF-8) | u8 dtype | u8 ndims | u64 dims[ndims] | payload
//! ```
//!
//! dtype 0 is f32. dtype 1 (raw bytes) carries JSON headers inside model
//! files.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::Matrix;

use super::{AdapterSet, Layout, LoraModule};

pub const MAGIC: [u8; 4] = *b"SGLR";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(name: impl Into<String>, dims: Vec<u64>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims,
            data: TensorData::F32(data),
        }
    }

    pub fn bytes(name: impl Into<String>, data: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            dims: vec![data.len() as u64],
            data: TensorData::Bytes(data),
        }
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix<f32>) -> Self {
        Self::f32(name, vec![m.rows() as u64, m.cols() as u64], m.data().to_vec())
    }

    fn element_count(&self) -> Result<usize> {
        self.dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::Validation(format!("tensor {} is too large", self.name)))
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::Bytes(_) => Err(Error::Validation(format!(
                "tensor {} holds bytes, expected f32",
                self.name
            ))),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix<f32>> {
        match self.dims.as_slice() {
            [r, c] => Matrix::new(*r as usize, *c as usize, self.as_f32()?.to_vec()),
            [_] => Ok(Matrix::row_vector(self.as_f32()?.to_vec())),
            _ => Err(Error::shape(format!(
                "tensor {} has {} dims, expected 1 or 2",
                self.name,
                self.dims.len()
            ))),
        }
    }
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Validation(format!("tensor name too long: {}", t.name)))?;
        if t.dims.len() > u8::MAX as usize {
            return Err(Error::Validation(format!("tensor {} has too many dims", t.name)));
        }
        let count = t.element_count()?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name);
        match &t.data {
            TensorData::F32(v) => {
                if v.len() != count {
                    return Err(Error::shape(format!(
                        "tensor {}: {} values for dims {:?}",
                        t.name,
                        v.len(),
                        t.dims
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { tensor: t.name.clone() });
                }
                buf.push(DTYPE_F32);
                buf.push(t.dims.len() as u8);
                for d in &t.dims {
                    buf.extend_from_slice(&d.to_le_bytes());
                }
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::Bytes(v) => {
                if v.len() != count {
                    return Err(Error::shape(format!("tensor {}: byte count mismatch", t.name)));
                }
                buf.push(DTYPE_U8);
                buf.push(t.dims.len() as u8);
                for d in &t.dims {
                    buf.extend_from_slice(&d.to_le_bytes());
                }
                buf.extend_from_slice(v);
            }
        }
    }
    w.write_all(&buf).map_err(|e| Error::io("<blob stream>", e))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: impl FnOnce() -> String) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Truncated { what: what() }
        } else {
            Error::io("<blob stream>", e)
        }
    })
}

/// Reads `len` bytes without trusting `len` for the allocation up front.
fn read_payload<R: Read>(r: &mut R, len: usize, name: &str) -> Result<Vec<u8>> {
    let mut raw = Vec::with_capacity(len.min(1 << 20));
    r.take(len as u64)
        .read_to_end(&mut raw)
        .map_err(|e| Error::io("<blob stream>", e))?;
    if raw.len() != len {
        return Err(Error::Truncated {
            what: format!("tensor {name}"),
        });
    }
    Ok(raw)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<Tensor>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, || "magic".into())?;
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4, || "version".into())?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    read_exact(&mut r, &mut b4, || "tensor count".into())?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for idx in 0..count {
        let mut b2 = [0u8; 2];
        read_exact(&mut r, &mut b2, || format!("tensor #{idx} name length"))?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact(&mut r, &mut name, || format!("tensor #{idx} name"))?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Validation(format!("tensor #{idx} name is not UTF-8")))?;
        let mut head = [0u8; 2];
        read_exact(&mut r, &mut head, || format!("tensor {name} header"))?;
        let (dtype, ndims) = (head[0], head[1] as usize);
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            let mut b8 = [0u8; 8];
            read_exact(&mut r, &mut b8, || format!("tensor {name} dims"))?;
            dims.push(u64::from_le_bytes(b8));
        }
        let mut t = Tensor {
            name,
            dims,
            data: TensorData::Bytes(Vec::new()),
        };
        let n = t.element_count()?;
        match dtype {
            DTYPE_F32 => {
                let len = n
                    .checked_mul(4)
                    .ok_or_else(|| Error::Validation(format!("tensor {} is too large", t.name)))?;
                let raw = read_payload(&mut r, len, &t.name)?;
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { tensor: t.name });
                }
                t.data = TensorData::F32(v);
            }
            DTYPE_U8 => {
                let raw = read_payload(&mut r, n, &t.name)?;
                t.data = TensorData::Bytes(raw);
            }
            other => return Err(Error::DType(other)),
        }
        tensors.push(t);
    }
    Ok(tensors)
}

pub fn save_tensors(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensors(&mut w, tensors).map_err(|e| relabel_io(e, path))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors(BufReader::new(file)).map_err(|e| relabel_io(e, path))
}

fn relabel_io(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

/// Tensors `<placement>.A` and `<placement>.B` for every module.
pub fn adapter_tensors(set: &AdapterSet<f32>) -> Vec<Tensor> {
    set.modules()
        .iter()
        .flat_map(|m| {
            [
                Tensor::from_matrix(format!("{}.A", m.placement), &m.a),
                Tensor::from_matrix(format!("{}.B", m.placement), &m.b),
            ]
        })
        .collect()
}

/// Rebuilds an adapter set from its tensors. Scaling and order come from
/// `layout`, since the blob stores only the factors.
pub fn adapter_from_tensors(tensors: &[Tensor], layout: &Layout) -> Result<AdapterSet<f32>> {
    if tensors.len() != 2 * layout.modules.len() {
        return Err(Error::Layout(format!(
            "blob holds {} tensors, layout needs {}",
            tensors.len(),
            2 * layout.modules.len()
        )));
    }
    let mut modules = Vec::with_capacity(layout.modules.len());
    for (spec, pair) in layout.modules.iter().zip(tensors.chunks_exact(2)) {
        let (ta, tb) = (&pair[0], &pair[1]);
        let expect_a = format!("{}.A", spec.placement);
        let expect_b = format!("{}.B", spec.placement);
        if ta.name != expect_a || tb.name != expect_b {
            return Err(Error::Layout(format!(
                "expected tensors {expect_a}, {expect_b}; found {}, {}",
                ta.name, tb.name
            )));
        }
        let a = ta.to_matrix()?;
        let b = tb.to_matrix()?;
        if a.shape() != (spec.r, spec.n) || b.shape() != (spec.m, spec.r) {
            return Err(Error::Layout(format!(
                "{}: A {:?}, B {:?} do not match layout",
                spec.placement,
                a.shape(),
                b.shape()
            )));
        }
        modules.push(LoraModule::new(spec.placement.clone(), a, b, spec.alpha as f32)?);
    }
    let set = AdapterSet::new(modules)?;
    if set.layout() != layout {
        return Err(Error::Layout("adapter does not match layout".into()));
    }
    Ok(set)
}

pub fn save_adapter(set: &AdapterSet<f32>, path: impl AsRef<Path>) -> Result<()> {
    save_tensors(path, &adapter_tensors(set))
}

pub fn load_adapter(path: impl AsRef<Path>, layout: &Layout) -> Result<AdapterSet<f32>> {
    adapter_from_tensors(&load_tensors(path)?, layout)
}
