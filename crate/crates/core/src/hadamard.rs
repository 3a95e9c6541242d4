//! Sylvester-Hadamard matrices, the fast Walsh-Hadamard transform, and
//! block-diagonal plans covering arbitrary dimensions.
//!
//! The normalized matrix splits as H_k = 2^(-k/2) * H_k_raw with raw entries
//! in {+1, -1}; the split is what lets quantized kernels stay in integer
//! arithmetic and absorb the normalization into their scalar prefactor.

use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

/// Largest supported base order (matrix size 2^k).
pub const MAX_ORDER: u32 = 12;

/// Block-diagonal transform plan: `m` blocks of size `2^k` covering `dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HadamardPlan {
    k: u32,
    m: usize,
    dim: usize,
    norm: f64,
}

impl HadamardPlan {
    /// Identity plan: no mixing, used when `dim` has no usable factor of two.
    pub fn identity(dim: usize) -> Self {
        Self {
            k: 0,
            m: dim,
            dim,
            norm: 1.0,
        }
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn block_count(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Normalization factor 2^(-k/2); `norm^2 * 2^k == 1` exactly.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn block_len(&self) -> usize {
        1usize << self.k
    }

    pub fn is_identity(&self) -> bool {
        self.k == 0
    }
}

/// 2^(-k/2) built from exact dyadic factors and the correctly rounded
/// 1/sqrt(2) constant, so scaling by powers of two stays bit-exact.
pub fn norm_factor(k: u32) -> f64 {
    let dyadic = 0.5f64.powi((k / 2) as i32);
    if k % 2 == 1 {
        dyadic * std::f64::consts::FRAC_1_SQRT_2
    } else {
        dyadic
    }
}

fn check_order(k: u32) -> Result<()> {
    if k > MAX_ORDER {
        return Err(Error::OrderOutOfRange { k, max: MAX_ORDER });
    }
    Ok(())
}

/// Unnormalized Sylvester matrix of order `k`, entries in {+1, -1}.
pub fn build_hadamard_raw(k: u32) -> Result<IntTensor> {
    check_order(k)?;
    let n = 1usize << k;
    let mut data = vec![0i64; n * n];
    data[0] = 1;
    // Sylvester recurrence: double the filled quadrant each step.
    let mut size = 1;
    while size < n {
        for i in 0..size {
            for j in 0..size {
                let v = data[i * n + j];
                data[i * n + (j + size)] = v;
                data[(i + size) * n + j] = v;
                data[(i + size) * n + (j + size)] = -v;
            }
        }
        size *= 2;
    }
    Ok(IntTensor::from_raw(vec![n, n], data))
}

/// Normalized Hadamard matrix: orthogonal, symmetric, involutive.
pub fn build_hadamard(k: u32) -> Result<Tensor> {
    let raw = build_hadamard_raw(k)?;
    Ok(raw.to_tensor(norm_factor(k)))
}

/// Picks the largest order `k <= k_preferred` whose block size divides `dim`;
/// degrades to the identity plan when `dim` has no factor of two.
pub fn make_plan(dim: usize, k_preferred: u32) -> HadamardPlan {
    let k_pref = k_preferred.min(MAX_ORDER);
    let mut k = k_pref;
    while k > 0 {
        let block = 1usize << k;
        if dim >= block && dim % block == 0 {
            return HadamardPlan {
                k,
                m: dim / block,
                dim,
                norm: norm_factor(k),
            };
        }
        k -= 1;
    }
    HadamardPlan::identity(dim)
}

/// In-place unnormalized butterfly over a buffer of length 2^k.
pub(crate) fn fwht_unnorm_in_place(buf: &mut [f64]) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(2 * h) {
            for i in start..start + h {
                let a = buf[i];
                let b = buf[i + h];
                buf[i] = a + b;
                buf[i + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Fast Walsh-Hadamard transform along the last axis (length must equal the
/// plan's block size). Equals `matmul(x, build_hadamard(k))` on that axis in
/// O(k * 2^k) butterfly passes plus one scaling pass.
pub fn fwht(x: &Tensor, plan: &HadamardPlan) -> Result<Tensor> {
    let block = plan.block_len();
    let last = *x.shape().last().expect("non-empty shape");
    if last != block {
        return Err(Error::ShapeMismatch {
            context: "fwht: last axis must equal 2^k",
            expected: vec![block],
            got: vec![last],
        });
    }
    let mut data = x.data().to_vec();
    if plan.k() > 0 {
        let norm = plan.norm();
        for row in data.chunks_mut(block) {
            fwht_unnorm_in_place(row);
            for v in row.iter_mut() {
                *v *= norm;
            }
        }
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), data))
}

/// Applies the normalized transform independently to each contiguous 2^k
/// segment of the last axis. The identity plan returns the input unchanged.
pub fn block_transform(x: &Tensor, plan: &HadamardPlan) -> Result<Tensor> {
    let last = *x.shape().last().expect("non-empty shape");
    if last != plan.dim() {
        return Err(Error::ShapeMismatch {
            context: "block_transform: last axis must equal plan dim",
            expected: vec![plan.dim()],
            got: vec![last],
        });
    }
    if plan.is_identity() {
        return Ok(x.clone());
    }
    let block = plan.block_len();
    let norm = plan.norm();
    let mut data = x.data().to_vec();
    for seg in data.chunks_mut(block) {
        fwht_unnorm_in_place(seg);
        for v in seg.iter_mut() {
            *v *= norm;
        }
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), data))
}

/// Block-diagonal transform of integer data via exact GEMM against the raw
/// matrix, keeping the chain auditable as plain integer products.
pub fn block_transform_int(x: &IntTensor, plan: &HadamardPlan) -> Result<IntTensor> {
    let shape = x.shape().to_vec();
    let last = *shape.last().expect("non-empty shape");
    if last != plan.dim() {
        return Err(Error::ShapeMismatch {
            context: "block_transform_int: last axis must equal plan dim",
            expected: vec![plan.dim()],
            got: vec![last],
        });
    }
    if plan.is_identity() {
        return Ok(x.clone());
    }
    let block = plan.block_len();
    let raw = build_hadamard_raw(plan.k())?;
    let raw_data = raw.data();
    let mut out = vec![0i64; x.numel()];
    for (seg_out, seg_in) in out.chunks_mut(block).zip(x.data().chunks(block)) {
        for (j, o) in seg_out.iter_mut().enumerate() {
            let mut acc = 0i64;
            for (i, &v) in seg_in.iter().enumerate() {
                let prod = v
                    .checked_mul(raw_data[i * block + j])
                    .ok_or(Error::IntegerOverflow {
                        context: "block_transform_int",
                    })?;
                acc = acc.checked_add(prod).ok_or(Error::IntegerOverflow {
                    context: "block_transform_int",
                })?;
            }
            *o = acc;
        }
    }
    Ok(IntTensor::from_raw(shape, out))
}

/// Dense block-diagonal matrix of the plan (normalized entries). Intended
/// for oracles and weight-side transforms, not hot paths.
pub fn plan_matrix(plan: &HadamardPlan) -> Result<Tensor> {
    let dim = plan.dim();
    let mut data = vec![0.0f64; dim * dim];
    if plan.is_identity() {
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
    } else {
        let h = build_hadamard(plan.k())?;
        let block = plan.block_len();
        for b in 0..plan.block_count() {
            let off = b * block;
            for i in 0..block {
                for j in 0..block {
                    data[(off + i) * dim + (off + j)] = h.data()[i * block + j];
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![dim, dim], data))
}
