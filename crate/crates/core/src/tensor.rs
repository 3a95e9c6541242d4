//! Dense row-major tensors and the bit-exact binary tensor-file format.
//!
//! All compute runs at 64-bit precision; the on-disk format stores 32-bit
//! payloads (version 1). A 64-bit payload variant (version 2) exists for
//! run-state blobs that must round-trip bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::threads;

/// Magic bytes opening every tensor file.
pub const TENSOR_MAGIC: [u8; 4] = *b"HQDM";
/// Version byte for 32-bit payloads (the external checkpoint format).
pub const TENSOR_VERSION_F32: u8 = 1;
/// Version byte for 64-bit payloads (run-state blobs).
pub const TENSOR_VERSION_F64: u8 = 2;

/// Dense tensor of 64-bit reals in row-major order.
///
/// Immutable after construction; operations return fresh tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating shape/data agreement and finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::SizeMismatch {
                context: "Tensor::new",
                expected: numel,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Tensor::new",
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for values produced by already-validated math.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    /// Row slice of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Same flat data under a new shape. The flat sequence never changes.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        validate_shape(new_shape)?;
        let numel: usize = new_shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::SizeMismatch {
                context: "reshape",
                expected: self.data.len(),
                got: numel,
            });
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Standard 2-D matrix product. Rows are computed independently, so the
    /// result is bitwise identical for any worker count.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul lhs")?;
        let (k2, n) = dims2(rhs, "matmul rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "matmul",
                expected: vec![m, k],
                got: vec![k2, n],
            });
        }
        let mut out = vec![0.0f64; m * n];
        threads::pool().install(|| {
            out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| {
                let lhs_row = &self.data[i * k..(i + 1) * k];
                for (p, &a) in lhs_row.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let rhs_row = &rhs.data[p * n..(p + 1) * n];
                    for (o, &b) in out_row.iter_mut().zip(rhs_row.iter()) {
                        *o += a * b;
                    }
                }
            });
        });
        Ok(Tensor::from_raw(vec![m, n], out))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = dims2(self, "transpose")?;
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_raw(vec![n, m], out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn zip_with(
        &self,
        rhs: &Tensor,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.shape.clone(),
                got: rhs.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()))
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Squared L2 distance divided by element count.
    pub fn mse(&self, rhs: &Tensor) -> Result<f64> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                context: "mse",
                expected: self.shape.clone(),
                got: rhs.shape.clone(),
            });
        }
        let s: f64 = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(s / self.data.len() as f64)
    }
}

/// Dense integer tensor. Backs raw Hadamard matrices and quantized payloads;
/// all kernel accumulation happens in checked 64-bit arithmetic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<i64>,
}

impl IntTensor {
    pub fn new(shape: &[usize], data: Vec<i64>) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::SizeMismatch {
                context: "IntTensor::new",
                expected: numel,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<i64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<IntTensor> {
        validate_shape(new_shape)?;
        let numel: usize = new_shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::SizeMismatch {
                context: "IntTensor::reshape",
                expected: self.data.len(),
                got: numel,
            });
        }
        Ok(IntTensor {
            shape: new_shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Exact 2-D integer product. Overflow is a hard error, never wraparound.
    pub fn matmul_checked(&self, rhs: &IntTensor) -> Result<IntTensor> {
        let (m, k) = idims2(self, "int matmul lhs")?;
        let (k2, n) = idims2(rhs, "int matmul rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "int matmul",
                expected: vec![m, k],
                got: vec![k2, n],
            });
        }
        let mut out = vec![0i64; m * n];
        for i in 0..m {
            let lhs_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in lhs_row.iter().enumerate() {
                if a == 0 {
                    continue;
                }
                let rhs_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row.iter()) {
                    let prod = a.checked_mul(b).ok_or(Error::IntegerOverflow {
                        context: "int matmul",
                    })?;
                    *o = o.checked_add(prod).ok_or(Error::IntegerOverflow {
                        context: "int matmul",
                    })?;
                }
            }
        }
        Ok(IntTensor::from_raw(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<IntTensor> {
        let (m, n) = idims2(self, "IntTensor::transpose")?;
        let mut out = vec![0i64; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(IntTensor::from_raw(vec![n, m], out))
    }

    /// Elementwise conversion to reals, optionally scaled.
    pub fn to_tensor(&self, scale: f64) -> Tensor {
        Tensor::from_raw(
            self.shape.clone(),
            self.data.iter().map(|&v| v as f64 * scale).collect(),
        )
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::EmptyInput("tensor shape"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::SizeMismatch {
            context: "shape dimensions must be positive",
            expected: 1,
            got: 0,
        });
    }
    Ok(())
}

fn dims2(t: &Tensor, context: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::ShapeMismatch {
            context,
            expected: vec![0, 0],
            got: t.shape.clone(),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

fn idims2(t: &IntTensor, context: &'static str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            context,
            expected: vec![0, 0],
            got: t.shape.clone(),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

// ---------------------------------------------------------------------------
// Binary file format
//
// magic "HQDM" | version u8 | rank u8 | dims u32-LE per axis | payload
// version 1: f32-LE payload, row-major. version 2: f64-LE payload.
// ---------------------------------------------------------------------------

/// Writes `t` in the version-1 (32-bit payload) format.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_tensor_impl(path, t, TENSOR_VERSION_F32)
}

/// Writes `t` in the version-2 (64-bit payload) format used by run state.
pub fn write_tensor_f64(path: &Path, t: &Tensor) -> Result<()> {
    write_tensor_impl(path, t, TENSOR_VERSION_F64)
}

fn write_tensor_impl(path: &Path, t: &Tensor, version: u8) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&[version])?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::SizeMismatch {
        context: "tensor rank exceeds file format limit",
        expected: 255,
        got: t.rank(),
    })?;
    w.write_all(&[rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::SizeMismatch {
            context: "dimension exceeds u32",
            expected: u32::MAX as usize,
            got: d,
        })?;
        w.write_all(&d.to_le_bytes())?;
    }
    match version {
        TENSOR_VERSION_F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        TENSOR_VERSION_F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        v => return Err(Error::UnsupportedVersion(v)),
    }
    w.flush()?;
    Ok(())
}

/// Reads either payload version back into a 64-bit tensor.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::BadMagic);
    }
    let mut header = [0u8; 2];
    read_exact_or(&mut r, &mut header)?;
    let (version, rank) = (header[0], header[1] as usize);
    if version != TENSOR_VERSION_F32 && version != TENSOR_VERSION_F64 {
        return Err(Error::UnsupportedVersion(version));
    }
    if rank == 0 {
        return Err(Error::EmptyInput("tensor file rank"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 4];
        read_exact_or(&mut r, &mut dim)?;
        let d = u32::from_le_bytes(dim) as usize;
        if d == 0 {
            return Err(Error::SizeMismatch {
                context: "tensor file dimension must be positive",
                expected: 1,
                got: 0,
            });
        }
        shape.push(d);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match version {
        TENSOR_VERSION_F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                read_exact_or(&mut r, &mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
        _ => {
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                read_exact_or(&mut r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => {}
        _ => return Err(Error::TrailingBytes),
    }
    Tensor::new(&shape, data)
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated
        } else {
            Error::Io(e)
        }
    })
}
