//! Float network primitives with hand-written adjoints: conv via im2col,
//! linear, SiLU, nearest upsampling, and the layout shuffles between
//! [B,C,h,w] tensors, token matrices, and patch matrices.
//!
//! Every backward here is exercised by central-difference tests; the
//! distillation loop composes these adjoints instead of running autodiff.

use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

/// Output spatial size of a convolution axis.
pub fn conv_out_size(n: usize, l: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - l) / stride + 1
}

fn expect_rank4(x: &Tensor, context: &'static str) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch {
            context,
            expected: vec![0, 0, 0, 0],
            got: x.shape().to_vec(),
        });
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// Gathers zero-padded conv patches: rows are output positions (b, oy, ox),
/// columns are kernel taps ordered (c, ky, kx).
fn im2col_generic<T: Copy + Default>(
    data: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    l: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, usize, usize) {
    let ho = conv_out_size(h, l, stride, pad);
    let wo = conv_out_size(w, l, stride, pad);
    let cols = c * l * l;
    let mut out = vec![T::default(); b * ho * wo * cols];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho + oy) * wo + ox;
                let base = row * cols;
                for ci in 0..c {
                    for ky in 0..l {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..l {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((bi * c + ci) * h + iy as usize) * w + ix as usize;
                            out[base + (ci * l + ky) * l + kx] = data[src];
                        }
                    }
                }
            }
        }
    }
    (out, ho, wo)
}

pub(crate) fn im2col(x: &Tensor, l: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let dims = expect_rank4(x, "im2col")?;
    let (data, ho, wo) = im2col_generic(x.data(), dims, l, stride, pad);
    Ok(Tensor::from_raw(
        vec![dims.0 * ho * wo, dims.1 * l * l],
        data,
    ))
}

pub(crate) fn im2col_int(
    x: &IntTensor,
    dims: (usize, usize, usize, usize),
    l: usize,
    stride: usize,
    pad: usize,
) -> IntTensor {
    let (data, ho, wo) = im2col_generic(x.data(), dims, l, stride, pad);
    IntTensor::from_raw(vec![dims.0 * ho * wo, dims.1 * l * l], data)
}

/// Scatter-add inverse of `im2col`; the adjoint of patch gathering.
pub(crate) fn col2im(
    cols: &Tensor,
    (b, c, h, w): (usize, usize, usize, usize),
    l: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let ho = conv_out_size(h, l, stride, pad);
    let wo = conv_out_size(w, l, stride, pad);
    let ncols = c * l * l;
    let mut out = vec![0.0f64; b * c * h * w];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho + oy) * wo + ox;
                let base = row * ncols;
                for ci in 0..c {
                    for ky in 0..l {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..l {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((bi * c + ci) * h + iy as usize) * w + ix as usize;
                            out[dst] += cols.data()[base + (ci * l + ky) * l + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_raw(vec![b, c, h, w], out)
}

/// [rows x c_out] GEMM output back to [b, c_out, ho, wo].
pub(crate) fn rows_to_bchw(rows: &Tensor, b: usize, c_out: usize, ho: usize, wo: usize) -> Tensor {
    let mut out = vec![0.0f64; b * c_out * ho * wo];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho + oy) * wo + ox;
                for co in 0..c_out {
                    out[((bi * c_out + co) * ho + oy) * wo + ox] = rows.data()[row * c_out + co];
                }
            }
        }
    }
    Tensor::from_raw(vec![b, c_out, ho, wo], out)
}

/// [B,C,h,w] to the token matrix [b*h*w x c]; also the gy layout step in
/// conv backward.
pub(crate) fn bchw_to_rows(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = expect_rank4(x, "bchw_to_rows")?;
    let mut out = vec![0.0f64; b * h * w * c];
    for bi in 0..b {
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    let row = (bi * h + yi) * w + xi;
                    out[row * c + ci] = x.data()[((bi * c + ci) * h + yi) * w + xi];
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![b * h * w, c], out))
}

/// Token matrix [b*h*w x c] back to [b, c, h, w].
pub(crate) fn rows_to_bchw_tokens(rows: &Tensor, b: usize, c: usize, h: usize, w: usize) -> Tensor {
    let mut out = vec![0.0f64; b * c * h * w];
    for bi in 0..b {
        for yi in 0..h {
            for xi in 0..w {
                let row = (bi * h + yi) * w + xi;
                for ci in 0..c {
                    out[((bi * c + ci) * h + yi) * w + xi] = rows.data()[row * c + ci];
                }
            }
        }
    }
    Tensor::from_raw(vec![b, c, h, w], out)
}

/// y = conv(x, w) + bias, weights in GEMM layout [c_in*l*l x c_out].
pub fn conv2d_forward(
    x: &Tensor,
    w_gemm: &Tensor,
    bias: Option<&[f64]>,
    c_out: usize,
    l: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (b, c_in, h, w) = expect_rank4(x, "conv2d_forward")?;
    if w_gemm.shape() != [c_in * l * l, c_out] {
        return Err(Error::ShapeMismatch {
            context: "conv2d_forward weight",
            expected: vec![c_in * l * l, c_out],
            got: w_gemm.shape().to_vec(),
        });
    }
    let patches = im2col(x, l, stride, pad)?;
    let mut rows = patches.matmul(w_gemm)?;
    if let Some(bias) = bias {
        let data = rows.data_mut();
        for chunk in data.chunks_mut(c_out) {
            for (v, &bv) in chunk.iter_mut().zip(bias.iter()) {
                *v += bv;
            }
        }
    }
    let ho = conv_out_size(h, l, stride, pad);
    let wo = conv_out_size(w, l, stride, pad);
    Ok(rows_to_bchw(&rows, b, c_out, ho, wo))
}

/// Adjoints of `conv2d_forward` wrt input, weight, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w_gemm: &Tensor,
    gy: &Tensor,
    l: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let dims = expect_rank4(x, "conv2d_backward")?;
    let (_, c_out_g, _, _) = expect_rank4(gy, "conv2d_backward grad")?;
    let c_out = w_gemm.shape()[1];
    if c_out_g != c_out {
        return Err(Error::ShapeMismatch {
            context: "conv2d_backward channels",
            expected: vec![c_out],
            got: vec![c_out_g],
        });
    }
    let gy_rows = bchw_to_rows(gy)?;
    let patches = im2col(x, l, stride, pad)?;
    let gw = patches.transpose()?.matmul(&gy_rows)?;
    let g_patches = gy_rows.matmul(&w_gemm.transpose()?)?;
    let gx = col2im(&g_patches, dims, l, stride, pad);
    let mut gb = vec![0.0f64; c_out];
    for chunk in gy_rows.data().chunks(c_out) {
        for (acc, &v) in gb.iter_mut().zip(chunk.iter()) {
            *acc += v;
        }
    }
    Ok((gx, gw, gb))
}

pub fn linear_forward(x: &Tensor, w: &Tensor, bias: Option<&[f64]>) -> Result<Tensor> {
    let mut y = x.matmul(w)?;
    if let Some(bias) = bias {
        let c = w.shape()[1];
        for chunk in y.data_mut().chunks_mut(c) {
            for (v, &bv) in chunk.iter_mut().zip(bias.iter()) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let gx = gy.matmul(&w.transpose()?)?;
    let gw = x.transpose()?.matmul(gy)?;
    let c = w.shape()[1];
    let mut gb = vec![0.0f64; c];
    for chunk in gy.data().chunks(c) {
        for (acc, &v) in gb.iter_mut().zip(chunk.iter()) {
            *acc += v;
        }
    }
    Ok((gx, gw, gb))
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// x * sigmoid(x).
pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Tensor, gy: &Tensor) -> Result<Tensor> {
    gy.zip_with(x, "silu_backward", |g, v| {
        let s = sigmoid(v);
        g * (s * (1.0 + v * (1.0 - s)))
    })
}

/// Nearest-neighbor 2x spatial upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = expect_rank4(x, "upsample2x")?;
    let mut out = vec![0.0f64; b * c * 4 * h * w];
    let (h2, w2) = (2 * h, 2 * w);
    for bi in 0..b {
        for ci in 0..c {
            for yi in 0..h2 {
                for xi in 0..w2 {
                    out[((bi * c + ci) * h2 + yi) * w2 + xi] =
                        x.data()[((bi * c + ci) * h + yi / 2) * w + xi / 2];
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![b, c, h2, w2], out))
}

/// Adjoint of nearest 2x upsampling: sums each 2x2 cell.
pub fn upsample2x_backward(gy: &Tensor) -> Result<Tensor> {
    let (b, c, h2, w2) = expect_rank4(gy, "upsample2x_backward")?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0f64; b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            for yi in 0..h2 {
                for xi in 0..w2 {
                    out[((bi * c + ci) * h + yi / 2) * w + xi / 2] +=
                        gy.data()[((bi * c + ci) * h2 + yi) * w2 + xi];
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![b, c, h, w], out))
}

/// Adds a per-channel bias over a [b, c, h, w] tensor.
pub fn add_channel_bias(x: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (b, c, h, w) = expect_rank4(x, "add_channel_bias")?;
    if bias.len() != c {
        return Err(Error::SizeMismatch {
            context: "add_channel_bias",
            expected: c,
            got: bias.len(),
        });
    }
    let mut data = x.data().to_vec();
    for bi in 0..b {
        for ci in 0..c {
            let base = ((bi * c + ci) * h) * w;
            for v in &mut data[base..base + h * w] {
                *v += bias[ci];
            }
        }
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), data))
}

/// Adjoint of the channel bias: sums the gradient over batch and space.
pub fn channel_bias_backward(gy: &Tensor) -> Result<Vec<f64>> {
    let (b, c, h, w) = expect_rank4(gy, "channel_bias_backward")?;
    let mut gb = vec![0.0f64; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = ((bi * c + ci) * h) * w;
            gb[ci] += gy.data()[base..base + h * w].iter().sum::<f64>();
        }
    }
    Ok(gb)
}

/// Mean squared error and its gradient wrt the first argument.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            context: "mse_loss",
            expected: pred.shape().to_vec(),
            got: target.shape().to_vec(),
        });
    }
    let n = pred.numel() as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(&a, &b)| {
            let d = a - b;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, Tensor::from_raw(pred.shape().to_vec(), grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen::<f64>() - 0.5)
    }

    /// Direct sliding-window convolution, independent of im2col.
    fn conv_naive(
        x: &Tensor,
        w_gemm: &Tensor,
        c_out: usize,
        l: usize,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let ho = conv_out_size(h, l, stride, pad);
        let wo = conv_out_size(w, l, stride, pad);
        let mut out = vec![0.0; b * c_out * ho * wo];
        for bi in 0..b {
            for co in 0..c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..l {
                                for kx in 0..l {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                    let wv = w_gemm.data()[((ci * l + ky) * l + kx) * c_out + co];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((bi * c_out + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_raw(vec![b, c_out, ho, wo], out)
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut rng = rng::stream(1, "conv-oracle");
        for &(stride, pad, l) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)] {
            let x = rand_tensor(&[2, 3, 6, 6], &mut rng);
            let w = rand_tensor(&[3 * l * l, 4], &mut rng);
            let got = conv2d_forward(&x, &w, None, 4, l, stride, pad).unwrap();
            let want = conv_naive(&x, &w, 4, l, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data().iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = rng::stream(2, "conv-fd");
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let w = rand_tensor(&[2 * 9, 3], &mut rng);
        let coeff = rand_tensor(&[1, 3, 3, 3], &mut rng);
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            let y = conv2d_forward(x, w, None, 3, 3, 2, 1).unwrap();
            y.data()
                .iter()
                .zip(coeff.data().iter())
                .map(|(a, c)| a * c)
                .sum()
        };
        let (gx, gw, _gb) = conv2d_backward(&x, &w, &coeff, 3, 2, 1).unwrap();
        let h = 1e-6;
        for idx in [0usize, 13, 31, 49] {
            let mut xp = x.data().to_vec();
            let mut xm = x.data().to_vec();
            xp[idx] += h;
            xm[idx] -= h;
            let fp = loss(&Tensor::from_raw(x.shape().to_vec(), xp), &w);
            let fm = loss(&Tensor::from_raw(x.shape().to_vec(), xm), &w);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - gx.data()[idx]).abs() < 1e-6,
                "gx[{idx}]: {fd} vs {}",
                gx.data()[idx]
            );
        }
        for idx in [0usize, 17, 41] {
            let mut wp = w.data().to_vec();
            let mut wm = w.data().to_vec();
            wp[idx] += h;
            wm[idx] -= h;
            let fp = loss(&x, &Tensor::from_raw(w.shape().to_vec(), wp));
            let fm = loss(&x, &Tensor::from_raw(w.shape().to_vec(), wm));
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - gw.data()[idx]).abs() < 1e-6,
                "gw[{idx}]: {fd} vs {}",
                gw.data()[idx]
            );
        }
    }

    #[test]
    fn silu_backward_matches_finite_differences() {
        let mut rng = rng::stream(3, "silu-fd");
        let x = rand_tensor(&[10], &mut rng).scale(4.0);
        let g = rand_tensor(&[10], &mut rng);
        let got = silu_backward(&x, &g).unwrap();
        let h = 1e-6;
        for i in 0..10 {
            let mut xp = x.data().to_vec();
            let mut xm = x.data().to_vec();
            xp[i] += h;
            xm[i] -= h;
            let f = |d: &[f64]| -> f64 {
                silu(&Tensor::from_raw(vec![10], d.to_vec()))
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(a, c)| a * c)
                    .sum()
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - got.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn upsample_round_trip_shapes_and_adjoint() {
        let mut rng = rng::stream(4, "up-fd");
        let x = rand_tensor(&[1, 2, 3, 3], &mut rng);
        let y = upsample2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 6]);
        // Adjoint identity: <up(x), g> == <x, up^T(g)>.
        let g = rand_tensor(&[1, 2, 6, 6], &mut rng);
        let lhs: f64 = y.data().iter().zip(g.data().iter()).map(|(a, b)| a * b).sum();
        let gt = upsample2x_backward(&g).unwrap();
        let rhs: f64 = x.data().iter().zip(gt.data().iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn token_layout_round_trips() {
        let mut rng = rng::stream(5, "tok");
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let rows = bchw_to_rows(&x).unwrap();
        assert_eq!(rows.shape(), &[32, 3]);
        let back = rows_to_bchw_tokens(&rows, 2, 3, 4, 4);
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = rng::stream(6, "mse-fd");
        let a = rand_tensor(&[7], &mut rng);
        let b = rand_tensor(&[7], &mut rng);
        let (_, grad) = mse_loss(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..7 {
            let mut ap = a.data().to_vec();
            let mut am = a.data().to_vec();
            ap[i] += h;
            am[i] -= h;
            let fp = mse_loss(&Tensor::from_raw(vec![7], ap), &b).unwrap().0;
            let fm = mse_loss(&Tensor::from_raw(vec![7], am), &b).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() < 1e-8);
        }
    }
}
