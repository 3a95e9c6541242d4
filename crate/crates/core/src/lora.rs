//! Low-rank adapters over frozen weights: W' = W + scaling * B * A with
//! B [c_i x r] and A [r x c_o]. Only A and B ever receive gradients.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// Trainable [rank x c_o], zero-initialized so W' == W at step 0.
    a: Tensor,
    /// Trainable [c_i x rank], Gaussian-initialized with variance 1/rank.
    b: Tensor,
    rank: usize,
    scaling: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn c_i(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn c_o(&self) -> usize {
        self.a.shape()[1]
    }

    /// Trainable parameter count, r * (c_i + c_o).
    pub fn param_count(&self) -> usize {
        self.rank * (self.c_i() + self.c_o())
    }

    pub fn set_a(&mut self, a: Tensor) -> Result<()> {
        if a.shape() != self.a.shape() {
            return Err(Error::ShapeMismatch {
                context: "LoraAdapter::set_a",
                expected: self.a.shape().to_vec(),
                got: a.shape().to_vec(),
            });
        }
        self.a = a;
        Ok(())
    }

    pub fn set_b(&mut self, b: Tensor) -> Result<()> {
        if b.shape() != self.b.shape() {
            return Err(Error::ShapeMismatch {
                context: "LoraAdapter::set_b",
                expected: self.b.shape().to_vec(),
                got: b.shape().to_vec(),
            });
        }
        self.b = b;
        Ok(())
    }

    pub(crate) fn a_mut(&mut self) -> &mut Tensor {
        &mut self.a
    }

    pub(crate) fn b_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }
}

/// Fresh adapter for a [c_i x c_o] weight. A starts at zero, B at
/// Gaussian(0, 1/r); the effective weight equals the base weight exactly
/// until A moves.
pub fn lora_init(c_i: usize, c_o: usize, rank: usize, seed: u64) -> Result<LoraAdapter> {
    let max = c_i.min(c_o) / 2;
    if rank == 0 || rank > max {
        return Err(Error::InvalidRank { rank, max });
    }
    let mut rng = rng::stream(seed, "lora-init");
    let std = (1.0 / rank as f64).sqrt();
    let b = Tensor::from_fn(&[c_i, rank], |_| rng::normal(&mut rng) * std);
    let a = Tensor::zeros(&[rank, c_o]);
    Ok(LoraAdapter {
        a,
        b,
        rank,
        scaling: 1.0,
    })
}

/// W + scaling * (B * A).
pub fn lora_apply(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let delta = adapter.b.matmul(&adapter.a)?;
    if delta.shape() != w.shape() {
        return Err(Error::ShapeMismatch {
            context: "lora_apply",
            expected: w.shape().to_vec(),
            got: delta.shape().to_vec(),
        });
    }
    w.add(&delta.scale(adapter.scaling))
}

/// Adjoints of the update against the effective-weight gradient G:
/// gradA = scaling * B^T G, gradB = scaling * G A^T. The frozen base weight
/// receives no gradient and none is returned.
pub fn lora_backward(adapter: &LoraAdapter, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let expected = [adapter.c_i(), adapter.c_o()];
    if upstream.shape() != expected {
        return Err(Error::ShapeMismatch {
            context: "lora_backward",
            expected: expected.to_vec(),
            got: upstream.shape().to_vec(),
        });
    }
    let grad_a = adapter
        .b
        .transpose()?
        .matmul(upstream)?
        .scale(adapter.scaling);
    let grad_b = upstream
        .matmul(&adapter.a.transpose()?)?
        .scale(adapter.scaling);
    Ok((grad_a, grad_b))
}
