//! Desk-scale diffusion substrate: linear noise schedule, forward noising,
//! a small convolutional denoiser with per-timestep biases, full-precision
//! teacher training by manual backprop, and a deterministic DDIM sampler.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::optim::{AdamParams, AdamState};
use crate::rng;
use crate::tensor::{self, Tensor};

/// Image side length of the synthetic dataset.
pub const IMG_SIZE: usize = 16;

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

/// beta_t ramp and the cumulative alpha-bar products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_len(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.betas.get(t).copied().ok_or(Error::TimestepOutOfRange {
            t,
            len: self.betas.len(),
        })
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                t,
                len: self.alphas_bar.len(),
            })
    }
}

/// Linear beta ramp; alpha-bar products computed once.
pub fn make_schedule(t_len: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_len < 2 {
        return Err(Error::InvalidSchedule(format!(
            "need at least 2 steps, got {t_len}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let denom = (t_len - 1) as f64;
    let betas: Vec<f64> = (0..t_len)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / denom)
        .collect();
    let mut alphas_bar = Vec::with_capacity(t_len);
    let mut prod = 1.0;
    for &b in &betas {
        prod *= 1.0 - b;
        alphas_bar.push(prod);
    }
    Ok(NoiseSchedule { betas, alphas_bar })
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let abar = schedule.alpha_bar(t)?;
    let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
    x0.zip_with(eps, "forward_noise", |x, e| a * x + b * e)
}

/// Per-sample timesteps over a [B, ...] batch.
pub fn forward_noise_batch(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            context: "forward_noise_batch",
            expected: x0.shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    let b = x0.shape()[0];
    if ts.len() != b {
        return Err(Error::SizeMismatch {
            context: "forward_noise_batch timesteps",
            expected: b,
            got: ts.len(),
        });
    }
    let per = x0.numel() / b;
    let mut data = Vec::with_capacity(x0.numel());
    for (bi, &t) in ts.iter().enumerate() {
        let abar = schedule.alpha_bar(t)?;
        let (ca, cb) = (abar.sqrt(), (1.0 - abar).sqrt());
        for i in 0..per {
            let idx = bi * per + i;
            data.push(ca * x0.data()[idx] + cb * eps.data()[idx]);
        }
    }
    Ok(Tensor::from_raw(x0.shape().to_vec(), data))
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

/// 16x16 grayscale images: two random Gaussian blobs on a dark background
/// plus a fixed high-contrast stripe pair. The fixed stripes give the
/// teacher's activations a reproducible heavy-tailed width profile.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticDataset;

impl SyntheticDataset {
    pub const STRIPE_POS: usize = 11;
    pub const STRIPE_NEG: usize = 4;

    /// One [n, 1, 16, 16] batch from the supplied stream.
    pub fn batch(rng: &mut impl Rng, n: usize) -> Tensor {
        let mut data = Vec::with_capacity(n * IMG_SIZE * IMG_SIZE);
        for _ in 0..n {
            let mut img = [[-0.35f64; IMG_SIZE]; IMG_SIZE];
            for _ in 0..2 {
                let amp = 0.5 + 0.4 * rng.gen::<f64>();
                let cy = 3.0 + 10.0 * rng.gen::<f64>();
                let cx = 3.0 + 10.0 * rng.gen::<f64>();
                let sigma = 1.2 + 1.4 * rng.gen::<f64>();
                for (y, row) in img.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        *v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            for row in img.iter_mut() {
                row[Self::STRIPE_POS] += 0.95;
                row[Self::STRIPE_NEG] -= 0.5;
            }
            for row in img.iter() {
                for &v in row.iter() {
                    data.push(v.clamp(-1.0, 1.0));
                }
            }
        }
        Tensor::from_raw(vec![n, 1, IMG_SIZE, IMG_SIZE], data)
    }
}

// ---------------------------------------------------------------------------
// Toy denoiser
// ---------------------------------------------------------------------------

/// Convolution parameters in im2col GEMM layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParam {
    pub w_gemm: Tensor,
    pub bias: Vec<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub l: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinParam {
    pub w: Tensor,
    pub bias: Vec<f64>,
}

/// Small encoder-decoder noise predictor: conv(1->16), strided conv(16->32),
/// middle conv(32->32), a two-layer channel MLP bottleneck at 8x8, nearest
/// upsample, conv(32->16), conv(16->1). A learned per-timestep channel bias
/// follows each conv stage. The first-stage features are added back in
/// before the output conv; without that skip the full-resolution noise
/// cannot pass the 8x8 bottleneck and epsilon prediction fails at deep
/// timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub conv_in: ConvParam,
    pub down: ConvParam,
    pub mid: ConvParam,
    pub lin1: LinParam,
    pub lin2: LinParam,
    pub up: ConvParam,
    pub conv_out: ConvParam,
    /// Per-timestep channel biases after conv_in, down, mid, up.
    pub tb: [Tensor; 4],
    /// Learned per-timestep scalar gain on the direct input-to-output skip.
    /// Noise prediction at deep timesteps is dominated by a pass-through of
    /// x_t; giving that path an exact per-t scalar keeps the iterated
    /// sampler's gain neutral instead of compounding conv-stack error.
    pub in_gain: Tensor,
    /// Learned spatial embedding added after the first conv. The stack is
    /// otherwise translation-equivariant and cannot place the dataset's
    /// fixed stripes at an absolute column without it.
    pub pos: Tensor,
    pub t_len: usize,
}

/// Stage channel widths: input, encoder, bottleneck tokens.
pub const CH_IN: usize = 16;
pub const CH_MID: usize = 32;
pub const CH_MLP: usize = 96;

fn conv_init(
    rng: &mut impl Rng,
    c_in: usize,
    c_out: usize,
    l: usize,
    stride: usize,
    pad: usize,
    gain: f64,
) -> ConvParam {
    let fan_in = (c_in * l * l) as f64;
    let std = gain * (2.0 / fan_in).sqrt();
    ConvParam {
        w_gemm: Tensor::from_fn(&[c_in * l * l, c_out], |_| rng::normal(rng) * std),
        bias: vec![0.0; c_out],
        c_in,
        c_out,
        l,
        stride,
        pad,
    }
}

fn lin_init(rng: &mut impl Rng, c_i: usize, c_o: usize) -> LinParam {
    let std = (2.0 / c_i as f64).sqrt();
    LinParam {
        w: Tensor::from_fn(&[c_i, c_o], |_| rng::normal(rng) * std),
        bias: vec![0.0; c_o],
    }
}

/// Intermediate values retained for the backward pass.
pub struct TeacherTape {
    pub x: Tensor,
    pub h0: Tensor,
    pub a0: Tensor,
    pub h1: Tensor,
    pub a1: Tensor,
    pub h2: Tensor,
    pub a2: Tensor,
    pub tokens: Tensor,
    pub u: Tensor,
    pub au: Tensor,
    pub a3: Tensor,
    pub up_in: Tensor,
    pub h3: Tensor,
    pub a4: Tensor,
    pub out: Tensor,
    pub ts: Vec<usize>,
}

/// Per-parameter gradients, same shapes as the parameters.
pub struct TeacherGrads {
    pub conv_in: (Tensor, Vec<f64>),
    pub down: (Tensor, Vec<f64>),
    pub mid: (Tensor, Vec<f64>),
    pub lin1: (Tensor, Vec<f64>),
    pub lin2: (Tensor, Vec<f64>),
    pub up: (Tensor, Vec<f64>),
    pub conv_out: (Tensor, Vec<f64>),
    pub tb: [Tensor; 4],
    pub in_gain: Tensor,
    pub pos: Tensor,
}

fn add_timestep_bias(x: &Tensor, table: &Tensor, ts: &[usize]) -> Result<Tensor> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if table.shape()[1] != c {
        return Err(Error::ShapeMismatch {
            context: "add_timestep_bias",
            expected: vec![0, c],
            got: table.shape().to_vec(),
        });
    }
    let t_len = table.shape()[0];
    let mut data = x.data().to_vec();
    for (bi, &t) in ts.iter().enumerate() {
        if t >= t_len {
            return Err(Error::TimestepOutOfRange { t, len: t_len });
        }
        for ci in 0..c {
            let bias = table.data()[t * c + ci];
            let base = ((bi * c + ci) * h) * w;
            for v in &mut data[base..base + h * w] {
                *v += bias;
            }
        }
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), data))
}

fn timestep_bias_backward(gy: &Tensor, ts: &[usize], t_len: usize) -> Tensor {
    let (_, c, h, w) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    let mut grad = vec![0.0f64; t_len * c];
    for (bi, &t) in ts.iter().enumerate() {
        for ci in 0..c {
            let base = ((bi * c + ci) * h) * w;
            grad[t * c + ci] += gy.data()[base..base + h * w].iter().sum::<f64>();
        }
    }
    Tensor::from_raw(vec![t_len, c], grad)
}

impl ToyDenoiser {
    /// Fresh network with seed-reproducible initialization.
    pub fn init(t_len: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "teacher-init");
        let conv_in = conv_init(&mut r, 1, CH_IN, 3, 1, 1, 1.0);
        let down = conv_init(&mut r, CH_IN, CH_MID, 3, 2, 1, 1.0);
        let mid = conv_init(&mut r, CH_MID, CH_MID, 3, 1, 1, 1.0);
        let lin1 = lin_init(&mut r, CH_MID, CH_MLP);
        let lin2 = lin_init(&mut r, CH_MLP, CH_MID);
        let up = conv_init(&mut r, CH_MID, CH_IN, 3, 1, 1, 1.0);
        // Small output init keeps early noise predictions near zero.
        let conv_out = conv_init(&mut r, CH_IN, 1, 3, 1, 1, 0.1);
        let tb = [
            Tensor::zeros(&[t_len, CH_IN]),
            Tensor::zeros(&[t_len, CH_MID]),
            Tensor::zeros(&[t_len, CH_MID]),
            Tensor::zeros(&[t_len, CH_IN]),
        ];
        Self {
            conv_in,
            down,
            mid,
            lin1,
            lin2,
            up,
            conv_out,
            tb,
            in_gain: Tensor::filled(&[t_len], 1.0),
            pos: Tensor::zeros(&[CH_IN, IMG_SIZE, IMG_SIZE]),
            t_len,
        }
    }

    /// h + pos, broadcast over the batch axis.
    fn add_pos(&self, h: &Tensor) -> Tensor {
        let b = h.shape()[0];
        let per = self.pos.numel();
        let mut data = h.data().to_vec();
        for bi in 0..b {
            for i in 0..per {
                data[bi * per + i] += self.pos.data()[i];
            }
        }
        Tensor::from_raw(h.shape().to_vec(), data)
    }

    fn pos_backward(&self, gy: &Tensor) -> Tensor {
        let b = gy.shape()[0];
        let per = self.pos.numel();
        let mut grad = vec![0.0f64; per];
        for bi in 0..b {
            for i in 0..per {
                grad[i] += gy.data()[bi * per + i];
            }
        }
        Tensor::from_raw(self.pos.shape().to_vec(), grad)
    }

    /// out + gain[ts[b]] * x, per sample.
    fn apply_input_skip(&self, out: &Tensor, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let b = x.shape()[0];
        let per = x.numel() / b;
        let mut data = out.data().to_vec();
        for (bi, &t) in ts.iter().enumerate() {
            let g = self.in_gain.data()[t];
            for i in 0..per {
                data[bi * per + i] += g * x.data()[bi * per + i];
            }
        }
        Ok(Tensor::from_raw(out.shape().to_vec(), data))
    }

    /// Gradient of the loss wrt the per-t skip gains.
    fn input_skip_backward(&self, g_out: &Tensor, x: &Tensor, ts: &[usize]) -> Tensor {
        let b = x.shape()[0];
        let per = x.numel() / b;
        let mut grad = vec![0.0f64; self.t_len];
        for (bi, &t) in ts.iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..per {
                acc += g_out.data()[bi * per + i] * x.data()[bi * per + i];
            }
            grad[t] += acc;
        }
        Tensor::from_raw(vec![self.t_len], grad)
    }

    fn conv(&self, p: &ConvParam, x: &Tensor) -> Result<Tensor> {
        nn::conv2d_forward(x, &p.w_gemm, Some(&p.bias), p.c_out, p.l, p.stride, p.pad)
    }

    /// Forward pass retaining every intermediate needed by `backward`.
    pub fn forward_tape(&self, x: &Tensor, ts: &[usize]) -> Result<TeacherTape> {
        let b = x.shape()[0];
        if ts.len() != b {
            return Err(Error::SizeMismatch {
                context: "forward_tape timesteps",
                expected: b,
                got: ts.len(),
            });
        }
        let h0 = add_timestep_bias(&self.add_pos(&self.conv(&self.conv_in, x)?), &self.tb[0], ts)?;
        let a0 = nn::silu(&h0);
        let h1 = add_timestep_bias(&self.conv(&self.down, &a0)?, &self.tb[1], ts)?;
        let a1 = nn::silu(&h1);
        let h2 = add_timestep_bias(&self.conv(&self.mid, &a1)?, &self.tb[2], ts)?;
        let a2 = nn::silu(&h2);
        let tokens = nn::bchw_to_rows(&a2)?;
        let u = nn::linear_forward(&tokens, &self.lin1.w, Some(&self.lin1.bias))?;
        let au = nn::silu(&u);
        let v = nn::linear_forward(&au, &self.lin2.w, Some(&self.lin2.bias))?;
        let (hh, ww) = (a2.shape()[2], a2.shape()[3]);
        let a3 = nn::rows_to_bchw_tokens(&v, b, CH_MID, hh, ww);
        let up_in = nn::upsample2x(&a3)?;
        let h3 = add_timestep_bias(&self.conv(&self.up, &up_in)?, &self.tb[3], ts)?;
        let a4 = nn::silu(&h3).add(&a0)?;
        let out = self.apply_input_skip(&self.conv(&self.conv_out, &a4)?, x, ts)?;
        Ok(TeacherTape {
            x: x.clone(),
            h0,
            a0,
            h1,
            a1,
            h2,
            a2,
            tokens,
            u,
            au,
            a3,
            up_in,
            h3,
            a4,
            out,
            ts: ts.to_vec(),
        })
    }

    /// Noise prediction without tape retention.
    pub fn forward(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        Ok(self.forward_tape(x, ts)?.out)
    }

    /// Forward pass that also hands each kernel-view input matrix (the 2-D
    /// matrix the quantized kernels would see) to the observer.
    pub fn forward_observed(
        &self,
        x: &Tensor,
        ts: &[usize],
        obs: &mut dyn FnMut(&'static str, &Tensor),
    ) -> Result<Tensor> {
        let b = x.shape()[0];
        let view = |t: &Tensor| -> Tensor {
            let s = t.shape();
            t.reshape(&[s[0] * s[1] * s[2], s[3]]).expect("rank-4 view")
        };
        obs("conv_in", &view(x));
        let h0 = add_timestep_bias(&self.add_pos(&self.conv(&self.conv_in, x)?), &self.tb[0], ts)?;
        let a0 = nn::silu(&h0);
        obs("down", &view(&a0));
        let h1 = add_timestep_bias(&self.conv(&self.down, &a0)?, &self.tb[1], ts)?;
        let a1 = nn::silu(&h1);
        obs("mid", &view(&a1));
        let h2 = add_timestep_bias(&self.conv(&self.mid, &a1)?, &self.tb[2], ts)?;
        let a2 = nn::silu(&h2);
        let tokens = nn::bchw_to_rows(&a2)?;
        obs("lin1", &tokens);
        let u = nn::linear_forward(&tokens, &self.lin1.w, Some(&self.lin1.bias))?;
        let au = nn::silu(&u);
        obs("lin2", &au);
        let v = nn::linear_forward(&au, &self.lin2.w, Some(&self.lin2.bias))?;
        let (hh, ww) = (a2.shape()[2], a2.shape()[3]);
        let a3 = nn::rows_to_bchw_tokens(&v, b, CH_MID, hh, ww);
        let up_in = nn::upsample2x(&a3)?;
        obs("up", &view(&up_in));
        let h3 = add_timestep_bias(&self.conv(&self.up, &up_in)?, &self.tb[3], ts)?;
        let a4 = nn::silu(&h3).add(&a0)?;
        obs("conv_out", &view(&a4));
        self.apply_input_skip(&self.conv(&self.conv_out, &a4)?, x, ts)
    }

    /// Manual reverse pass through the fixed graph.
    pub fn backward(&self, tape: &TeacherTape, g_out: &Tensor) -> Result<TeacherGrads> {
        let g_in_gain = self.input_skip_backward(g_out, &tape.x, &tape.ts);
        let (g_a4, gw_out, gb_out) = nn::conv2d_backward(
            &tape.a4,
            &self.conv_out.w_gemm,
            g_out,
            self.conv_out.l,
            self.conv_out.stride,
            self.conv_out.pad,
        )?;
        // a4 = silu(h3) + a0: the gradient reaches both the decoder path and
        // the skip back to the first stage.
        let g_h3 = nn::silu_backward(&tape.h3, &g_a4)?;
        let g_skip = g_a4;
        let g_tb3 = timestep_bias_backward(&g_h3, &tape.ts, self.t_len);
        let (g_up_in, gw_up, gb_up) = nn::conv2d_backward(
            &tape.up_in,
            &self.up.w_gemm,
            &g_h3,
            self.up.l,
            self.up.stride,
            self.up.pad,
        )?;
        let g_a3 = nn::upsample2x_backward(&g_up_in)?;
        let g_v = nn::bchw_to_rows(&g_a3)?;
        let (g_au, gw_lin2, gb_lin2) = nn::linear_backward(&tape.au, &self.lin2.w, &g_v)?;
        let g_u = nn::silu_backward(&tape.u, &g_au)?;
        let (g_tokens, gw_lin1, gb_lin1) = nn::linear_backward(&tape.tokens, &self.lin1.w, &g_u)?;
        let b = tape.x.shape()[0];
        let (hh, ww) = (tape.a2.shape()[2], tape.a2.shape()[3]);
        let g_a2 = nn::rows_to_bchw_tokens(&g_tokens, b, CH_MID, hh, ww);
        let g_h2 = nn::silu_backward(&tape.h2, &g_a2)?;
        let g_tb2 = timestep_bias_backward(&g_h2, &tape.ts, self.t_len);
        let (g_a1, gw_mid, gb_mid) = nn::conv2d_backward(
            &tape.a1,
            &self.mid.w_gemm,
            &g_h2,
            self.mid.l,
            self.mid.stride,
            self.mid.pad,
        )?;
        let g_h1 = nn::silu_backward(&tape.h1, &g_a1)?;
        let g_tb1 = timestep_bias_backward(&g_h1, &tape.ts, self.t_len);
        let (g_a0, gw_down, gb_down) = nn::conv2d_backward(
            &tape.a0,
            &self.down.w_gemm,
            &g_h1,
            self.down.l,
            self.down.stride,
            self.down.pad,
        )?;
        let g_a0 = g_a0.add(&g_skip)?;
        let g_h0 = nn::silu_backward(&tape.h0, &g_a0)?;
        let g_tb0 = timestep_bias_backward(&g_h0, &tape.ts, self.t_len);
        let g_pos = self.pos_backward(&g_h0);
        let (_, gw_in, gb_in) = nn::conv2d_backward(
            &tape.x,
            &self.conv_in.w_gemm,
            &g_h0,
            self.conv_in.l,
            self.conv_in.stride,
            self.conv_in.pad,
        )?;
        Ok(TeacherGrads {
            conv_in: (gw_in, gb_in),
            down: (gw_down, gb_down),
            mid: (gw_mid, gb_mid),
            lin1: (gw_lin1, gb_lin1),
            lin2: (gw_lin2, gb_lin2),
            up: (gw_up, gb_up),
            conv_out: (gw_out, gb_out),
            tb: [g_tb0, g_tb1, g_tb2, g_tb3],
            in_gain: g_in_gain,
            pos: g_pos,
        })
    }
}

fn ema_update(shadow: &mut ToyDenoiser, net: &ToyDenoiser, decay: f64) {
    let lerp = |s: &mut Tensor, n: &Tensor| {
        for (a, b) in s.data_mut().iter_mut().zip(n.data().iter()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    };
    let lerp_vec = |s: &mut Vec<f64>, n: &Vec<f64>| {
        for (a, b) in s.iter_mut().zip(n.iter()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    };
    lerp(&mut shadow.conv_in.w_gemm, &net.conv_in.w_gemm);
    lerp_vec(&mut shadow.conv_in.bias, &net.conv_in.bias);
    lerp(&mut shadow.down.w_gemm, &net.down.w_gemm);
    lerp_vec(&mut shadow.down.bias, &net.down.bias);
    lerp(&mut shadow.mid.w_gemm, &net.mid.w_gemm);
    lerp_vec(&mut shadow.mid.bias, &net.mid.bias);
    lerp(&mut shadow.lin1.w, &net.lin1.w);
    lerp_vec(&mut shadow.lin1.bias, &net.lin1.bias);
    lerp(&mut shadow.lin2.w, &net.lin2.w);
    lerp_vec(&mut shadow.lin2.bias, &net.lin2.bias);
    lerp(&mut shadow.up.w_gemm, &net.up.w_gemm);
    lerp_vec(&mut shadow.up.bias, &net.up.bias);
    lerp(&mut shadow.conv_out.w_gemm, &net.conv_out.w_gemm);
    lerp_vec(&mut shadow.conv_out.bias, &net.conv_out.bias);
    for i in 0..4 {
        lerp(&mut shadow.tb[i], &net.tb[i]);
    }
    lerp(&mut shadow.in_gain, &net.in_gain);
    lerp(&mut shadow.pos, &net.pos);
}

/// Epsilon-prediction interface shared by the teacher and quantized students.
pub trait EpsModel {
    fn eps(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor>;
    fn t_len(&self) -> usize;
}

impl EpsModel for ToyDenoiser {
    fn eps(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.forward(x, ts)
    }

    fn t_len(&self) -> usize {
        self.t_len
    }
}

// ---------------------------------------------------------------------------
// Teacher training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub t_len: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub lr: f64,
    /// Exponential moving average decay for the returned weights; the EMA
    /// model samples noticeably better than the raw trajectory end.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            t_len: 100,
            beta_start: 1e-4,
            // Chosen so alpha_bar at the final step is ~2e-3: the forward
            // process must actually reach noise when T is only 100, or
            // sampling from a pure Gaussian start loses the data mean.
            beta_end: 0.12,
            epochs: 72,
            batch_size: 8,
            batches_per_epoch: 32,
            lr: 2e-3,
            ema_decay: 0.995,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherMetrics {
    pub epoch_losses: Vec<f64>,
}

impl TeacherMetrics {
    pub fn first_epoch_avg(&self) -> f64 {
        self.epoch_losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_epoch_avg(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

struct TeacherOpt {
    conv_in: (AdamState, AdamState),
    down: (AdamState, AdamState),
    mid: (AdamState, AdamState),
    lin1: (AdamState, AdamState),
    lin2: (AdamState, AdamState),
    up: (AdamState, AdamState),
    conv_out: (AdamState, AdamState),
    tb: [AdamState; 4],
    in_gain: AdamState,
    pos: AdamState,
}

impl TeacherOpt {
    fn new(net: &ToyDenoiser) -> Self {
        let pair = |p: &ConvParam| {
            (
                AdamState::new(p.w_gemm.numel()),
                AdamState::new(p.bias.len()),
            )
        };
        Self {
            conv_in: pair(&net.conv_in),
            down: pair(&net.down),
            mid: pair(&net.mid),
            lin1: (
                AdamState::new(net.lin1.w.numel()),
                AdamState::new(net.lin1.bias.len()),
            ),
            lin2: (
                AdamState::new(net.lin2.w.numel()),
                AdamState::new(net.lin2.bias.len()),
            ),
            up: pair(&net.up),
            conv_out: pair(&net.conv_out),
            tb: [
                AdamState::new(net.tb[0].numel()),
                AdamState::new(net.tb[1].numel()),
                AdamState::new(net.tb[2].numel()),
                AdamState::new(net.tb[3].numel()),
            ],
            in_gain: AdamState::new(net.in_gain.numel()),
            pos: AdamState::new(net.pos.numel()),
        }
    }
}

fn tensor_step(state: &mut AdamState, param: &mut Tensor, grad: &Tensor, cfg: &AdamParams) {
    state.step(param.data_mut(), grad.data(), cfg);
}

/// Minimizes the epsilon-prediction objective by stochastic gradient.
/// Deterministic under the config seed; a non-finite loss aborts.
pub fn train_teacher(cfg: &TeacherConfig) -> Result<(ToyDenoiser, NoiseSchedule, TeacherMetrics)> {
    let schedule = make_schedule(cfg.t_len, cfg.beta_start, cfg.beta_end)?;
    let mut net = ToyDenoiser::init(cfg.t_len, cfg.seed);
    let mut shadow = net.clone();
    let mut opt = TeacherOpt::new(&net);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        // Halved learning rate for the last third of training.
        let lr = if 3 * epoch >= 2 * cfg.epochs {
            cfg.lr * 0.5
        } else {
            cfg.lr
        };
        let adam = AdamParams::with_lr(lr);
        let mut epoch_loss = 0.0;
        for batch in 0..cfg.batches_per_epoch {
            let step_id = (epoch * cfg.batches_per_epoch + batch) as u64;
            let mut data_rng = rng::substream(cfg.seed, "teacher-data", step_id);
            let x0 = SyntheticDataset::batch(&mut data_rng, cfg.batch_size);
            let ts: Vec<usize> = (0..cfg.batch_size)
                .map(|_| data_rng.gen_range(0..cfg.t_len))
                .collect();
            // Per-sample amplitude jitter on the noise component (target
            // jittered identically): calibrates the model's radial response
            // so the iterated sampler's gain stays neutral off-manifold.
            let mut eps_data = rng::fill_normal(&mut data_rng, x0.numel());
            let per = x0.numel() / cfg.batch_size;
            for bi in 0..cfg.batch_size {
                let j = 0.9 + 0.25 * data_rng.gen::<f64>();
                for v in &mut eps_data[bi * per..(bi + 1) * per] {
                    *v *= j;
                }
            }
            let eps = Tensor::from_raw(x0.shape().to_vec(), eps_data);
            let x_t = forward_noise_batch(&x0, &ts, &eps, &schedule)?;
            let tape = net.forward_tape(&x_t, &ts)?;
            let (loss, g_out) = nn::mse_loss(&tape.out, &eps)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    layer: "teacher loss".into(),
                });
            }
            epoch_loss += loss;
            let grads = net.backward(&tape, &g_out)?;
            tensor_step(&mut opt.conv_in.0, &mut net.conv_in.w_gemm, &grads.conv_in.0, &adam);
            opt.conv_in.1.step(&mut net.conv_in.bias, &grads.conv_in.1, &adam);
            tensor_step(&mut opt.down.0, &mut net.down.w_gemm, &grads.down.0, &adam);
            opt.down.1.step(&mut net.down.bias, &grads.down.1, &adam);
            tensor_step(&mut opt.mid.0, &mut net.mid.w_gemm, &grads.mid.0, &adam);
            opt.mid.1.step(&mut net.mid.bias, &grads.mid.1, &adam);
            tensor_step(&mut opt.lin1.0, &mut net.lin1.w, &grads.lin1.0, &adam);
            opt.lin1.1.step(&mut net.lin1.bias, &grads.lin1.1, &adam);
            tensor_step(&mut opt.lin2.0, &mut net.lin2.w, &grads.lin2.0, &adam);
            opt.lin2.1.step(&mut net.lin2.bias, &grads.lin2.1, &adam);
            tensor_step(&mut opt.up.0, &mut net.up.w_gemm, &grads.up.0, &adam);
            opt.up.1.step(&mut net.up.bias, &grads.up.1, &adam);
            tensor_step(&mut opt.conv_out.0, &mut net.conv_out.w_gemm, &grads.conv_out.0, &adam);
            opt.conv_out.1.step(&mut net.conv_out.bias, &grads.conv_out.1, &adam);
            for i in 0..4 {
                tensor_step(&mut opt.tb[i], &mut net.tb[i], &grads.tb[i], &adam);
            }
            tensor_step(&mut opt.in_gain, &mut net.in_gain, &grads.in_gain, &adam);
            tensor_step(&mut opt.pos, &mut net.pos, &grads.pos, &adam);
            ema_update(&mut shadow, &net, cfg.ema_decay);
        }
        epoch_losses.push(epoch_loss / cfg.batches_per_epoch as f64);
    }
    Ok((shadow, schedule, TeacherMetrics { epoch_losses }))
}

// ---------------------------------------------------------------------------
// DDIM sampling
// ---------------------------------------------------------------------------

/// Uniform descending sub-schedule of `n_steps` timesteps over [0, t_total).
pub fn ddim_timesteps(t_total: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > t_total {
        return Err(Error::InvalidConfig(format!(
            "n_steps must lie in [1, {t_total}], got {n_steps}"
        )));
    }
    let mut ts: Vec<usize> = (0..n_steps).map(|i| i * t_total / n_steps).collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// One deterministic DDIM update (eta = 0). The predicted clean sample is
/// clipped to the data range [-1, 1]; without this, the 1/sqrt(abar_t)
/// amplification at deep timesteps lets model error blow up the trajectory.
pub fn ddim_step(x: &Tensor, eps_hat: &Tensor, abar_t: f64, abar_prev: f64) -> Result<Tensor> {
    let sa = abar_t.sqrt();
    let sb = (1.0 - abar_t).sqrt();
    let sa_prev = abar_prev.sqrt();
    let sb_prev = (1.0 - abar_prev).sqrt();
    // The clip range extends slightly past the data range: clipping exactly
    // at the range edge biases near-saturated features downward a little on
    // every step, which visibly erodes them over long trajectories.
    x.zip_with(eps_hat, "ddim_step", |xv, ev| {
        let x0 = ((xv - sb * ev) / sa).clamp(-1.1, 1.1);
        sa_prev * x0 + sb_prev * ev
    })
}

/// Per-pixel envelope of the true marginal at noise level `abar`: data lies
/// in [-1, 1] and the noise component is Gaussian, so mass beyond 4.5 sigma
/// is negligible. Trajectories are clamped to it after every step, which
/// keeps the sampler on the manifold the model was trained on.
fn marginal_bound(abar: f64) -> f64 {
    abar.sqrt() + 4.5 * (1.0 - abar).sqrt()
}

/// The per-sample RMS of the true marginal never exceeds 1 (pixel values in
/// [-1, 1], unit noise), so any trajectory beyond this cap has diverged;
/// rescaling preserves its structure where a pixel clamp would saturate it.
const TRAJECTORY_RMS_CAP: f64 = 1.25;

fn cap_sample_rms(x: &mut Tensor, b: usize) {
    let per = x.numel() / b;
    let data = x.data_mut();
    for bi in 0..b {
        let seg = &mut data[bi * per..(bi + 1) * per];
        let rms = (seg.iter().map(|v| v * v).sum::<f64>() / per as f64).sqrt();
        if rms > TRAJECTORY_RMS_CAP {
            let k = TRAJECTORY_RMS_CAP / rms;
            for v in seg.iter_mut() {
                *v *= k;
            }
        }
    }
}

/// Deterministic DDIM sampler: a pure function of (model, seed, n_steps).
pub fn ddim_sample(
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    n_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Tensor> {
    let ts = ddim_timesteps(schedule.t_len(), n_steps)?;
    let mut rng = rng::stream(seed, "sample-noise");
    let shape = vec![n_samples, 1, IMG_SIZE, IMG_SIZE];
    let numel = n_samples * IMG_SIZE * IMG_SIZE;
    let mut x = Tensor::from_raw(shape, rng::fill_normal(&mut rng, numel));
    for (i, &t) in ts.iter().enumerate() {
        let eps_hat = model.eps(&x, &vec![t; n_samples])?;
        let abar_t = schedule.alpha_bar(t)?;
        let abar_prev = if i + 1 < ts.len() {
            schedule.alpha_bar(ts[i + 1])?
        } else {
            1.0
        };
        x = ddim_step(&x, &eps_hat, abar_t, abar_prev)?;
        cap_sample_rms(&mut x, n_samples);
        let bound = marginal_bound(abar_prev);
        x = x.map(|v| v.clamp(-bound, bound));
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TeacherManifest {
    kind: String,
    t_len: usize,
    beta_start: f64,
    beta_end: f64,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

fn conv_params(p: &ConvParam) -> Vec<(String, Tensor)> {
    vec![
        ("w".into(), p.w_gemm.clone()),
        (
            "b".into(),
            Tensor::from_raw(vec![p.bias.len()], p.bias.clone()),
        ),
    ]
}

/// Every named parameter tensor of the teacher, in a stable order.
pub fn teacher_named_params(net: &ToyDenoiser) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (stage, p) in [
        ("conv_in", &net.conv_in),
        ("down", &net.down),
        ("mid", &net.mid),
        ("up", &net.up),
        ("conv_out", &net.conv_out),
    ] {
        for (suffix, t) in conv_params(p) {
            out.push((format!("{stage}.{suffix}"), t));
        }
    }
    for (stage, p) in [("lin1", &net.lin1), ("lin2", &net.lin2)] {
        out.push((format!("{stage}.w"), p.w.clone()));
        out.push((
            format!("{stage}.b"),
            Tensor::from_raw(vec![p.bias.len()], p.bias.clone()),
        ));
    }
    for (i, t) in net.tb.iter().enumerate() {
        out.push((format!("tb{i}"), t.clone()));
    }
    out.push(("in_gain".into(), net.in_gain.clone()));
    out.push(("pos".into(), net.pos.clone()));
    out
}

/// Writes the teacher and its schedule constants under `dir`: one tensor
/// file per parameter plus a manifest listing names and shapes.
pub fn save_teacher(dir: &Path, net: &ToyDenoiser, schedule: &NoiseSchedule) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = teacher_named_params(net);
    let manifest = TeacherManifest {
        kind: "teacher".into(),
        t_len: net.t_len,
        beta_start: schedule.beta(0)?,
        beta_end: schedule.beta(schedule.t_len() - 1)?,
        params: params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::InvalidConfig(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.toml"), text)?;
    for (name, t) in &params {
        tensor::write_tensor(&dir.join(format!("{}.hqdm", name.replace('.', "_"))), t)?;
    }
    Ok(())
}

fn param_map(dir: &Path, manifest: &TeacherManifest) -> Result<Vec<(String, Tensor)>> {
    manifest
        .params
        .iter()
        .map(|e| {
            let t = tensor::read_tensor(&dir.join(format!("{}.hqdm", e.name.replace('.', "_"))))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: "checkpoint parameter",
                    expected: e.shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
            Ok((e.name.clone(), t))
        })
        .collect()
}

/// Reads a teacher checkpoint saved by `save_teacher`.
pub fn load_teacher(dir: &Path) -> Result<(ToyDenoiser, NoiseSchedule)> {
    let text = fs::read_to_string(dir.join("manifest.toml"))?;
    let manifest: TeacherManifest =
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("manifest parse: {e}")))?;
    if manifest.kind != "teacher" {
        return Err(Error::InvalidConfig(format!(
            "expected a teacher checkpoint, found kind `{}`",
            manifest.kind
        )));
    }
    let params = param_map(dir, &manifest)?;
    let get = |name: &str| -> Result<Tensor> {
        params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))
    };
    let conv = |stage: &str, c_in: usize, c_out: usize, stride: usize| -> Result<ConvParam> {
        Ok(ConvParam {
            w_gemm: get(&format!("{stage}.w"))?,
            bias: get(&format!("{stage}.b"))?.into_data(),
            c_in,
            c_out,
            l: 3,
            stride,
            pad: 1,
        })
    };
    let net = ToyDenoiser {
        conv_in: conv("conv_in", 1, CH_IN, 1)?,
        down: conv("down", CH_IN, CH_MID, 2)?,
        mid: conv("mid", CH_MID, CH_MID, 1)?,
        lin1: LinParam {
            w: get("lin1.w")?,
            bias: get("lin1.b")?.into_data(),
        },
        lin2: LinParam {
            w: get("lin2.w")?,
            bias: get("lin2.b")?.into_data(),
        },
        up: conv("up", CH_MID, CH_IN, 1)?,
        conv_out: conv("conv_out", CH_IN, 1, 1)?,
        tb: [get("tb0")?, get("tb1")?, get("tb2")?, get("tb3")?],
        in_gain: get("in_gain")?,
        pos: get("pos")?,
        t_len: manifest.t_len,
    };
    let schedule = make_schedule(manifest.t_len, manifest.beta_start, manifest.beta_end)?;
    Ok((net, schedule))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_products() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(0).unwrap() - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar(1).unwrap() - 0.72).abs() < 1e-12);
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        for t in 1..1000 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let s = make_schedule(100, 1e-6, 0.9999999_f64.min(0.999999)).unwrap();
        let x0 = Tensor::new(&[4], vec![1.0, -0.5, 0.25, 0.0]).unwrap();
        let eps = Tensor::new(&[4], vec![0.3, 0.3, 0.3, 0.3]).unwrap();
        // Near t=0 with a tiny beta the sample is almost x0.
        let early = forward_noise(&x0, 0, &eps, &s).unwrap();
        for (a, b) in early.data().iter().zip(x0.data().iter()) {
            assert!((a - b).abs() < 2e-3);
        }
        // Late in a strong ramp it is almost pure noise.
        let late = forward_noise(&x0, 99, &eps, &s).unwrap();
        for (a, b) in late.data().iter().zip(eps.data().iter()) {
            assert!((a - b).abs() < 2e-2);
        }
    }

    #[test]
    fn forward_noise_variance_monte_carlo() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let t = 60;
        let abar = s.alpha_bar(t).unwrap();
        let mut rng = rng::stream(11, "fn-var");
        let n = 10_000;
        // x0 drawn from a +-1 coin: variance exactly 1.
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let x0v: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let e = rng::normal(&mut rng);
            let x0 = Tensor::new(&[1], vec![x0v]).unwrap();
            let eps = Tensor::new(&[1], vec![e]).unwrap();
            let xt = forward_noise(&x0, t, &eps, &s).unwrap().data()[0];
            acc += xt;
            acc2 += xt * xt;
        }
        let mean = acc / n as f64;
        let var = acc2 / n as f64 - mean * mean;
        let want = abar * 1.0 + (1.0 - abar);
        assert!((var - want).abs() / want < 0.05, "var {var} want {want}");
    }

    #[test]
    fn dataset_is_seeded_and_in_range() {
        let a = SyntheticDataset::batch(&mut rng::stream(3, "ds"), 4);
        let b = SyntheticDataset::batch(&mut rng::stream(3, "ds"), 4);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let c = SyntheticDataset::batch(&mut rng::stream(4, "ds"), 4);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn denoiser_shapes_round_trip() {
        let net = ToyDenoiser::init(10, 0);
        let x = Tensor::zeros(&[2, 1, IMG_SIZE, IMG_SIZE]);
        let y = net.forward(&x, &[3, 7]).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn teacher_backward_matches_finite_differences() {
        let mut rng = rng::stream(9, "teacher-fd");
        let net = ToyDenoiser::init(6, 1);
        let x = Tensor::from_fn(&[1, 1, IMG_SIZE, IMG_SIZE], |_| rng.gen::<f64>() - 0.5);
        let eps = Tensor::from_fn(&[1, 1, IMG_SIZE, IMG_SIZE], |_| rng.gen::<f64>() - 0.5);
        let ts = [2usize];
        let tape = net.forward_tape(&x, &ts).unwrap();
        let (_, g_out) = nn::mse_loss(&tape.out, &eps).unwrap();
        let grads = net.backward(&tape, &g_out).unwrap();
        let h = 1e-6;
        // Probe a few entries in distant parts of the graph.
        let probes: [(&str, usize); 4] =
            [("mid.w", 17), ("lin1.w", 40), ("conv_in.w", 3), ("tb1", 70)];
        for (name, idx) in probes {
            let loss_of = |net: &ToyDenoiser| -> f64 {
                let out = net.forward(&x, &ts).unwrap();
                nn::mse_loss(&out, &eps).unwrap().0
            };
            let mut plus = net.clone();
            let mut minus = net.clone();
            let (gslice, pplus, pminus): (&Tensor, &mut Tensor, &mut Tensor) = match name {
                "mid.w" => (&grads.mid.0, &mut plus.mid.w_gemm, &mut minus.mid.w_gemm),
                "lin1.w" => (&grads.lin1.0, &mut plus.lin1.w, &mut minus.lin1.w),
                "conv_in.w" => (
                    &grads.conv_in.0,
                    &mut plus.conv_in.w_gemm,
                    &mut minus.conv_in.w_gemm,
                ),
                "tb1" => (&grads.tb[1], &mut plus.tb[1], &mut minus.tb[1]),
                _ => unreachable!(),
            };
            pplus.data_mut()[idx] += h;
            pminus.data_mut()[idx] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let g = gslice.data()[idx];
            assert!(
                (fd - g).abs() / fd.abs().max(1e-7) < 1e-3,
                "{name}[{idx}]: fd {fd} vs {g}"
            );
        }
    }

    #[test]
    fn ddim_timestep_grid() {
        let ts = ddim_timesteps(100, 20).unwrap();
        assert_eq!(ts.len(), 20);
        assert_eq!(ts[0], 95);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ddim_timesteps(100, 0).is_err());
        assert!(ddim_timesteps(100, 101).is_err());
    }

    #[test]
    fn ddim_is_deterministic() {
        let net = ToyDenoiser::init(20, 2);
        let s = make_schedule(20, 1e-4, 0.02).unwrap();
        let a = ddim_sample(&net, &s, 5, 2, 99).unwrap();
        let b = ddim_sample(&net, &s, 5, 2, 99).unwrap();
        assert_eq!(a.data(), b.data());
        let c = ddim_sample(&net, &s, 5, 2, 100).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = ToyDenoiser::init(8, 5);
        let s = make_schedule(8, 1e-4, 0.02).unwrap();
        save_teacher(dir.path(), &net, &s).unwrap();
        let (back, s2) = load_teacher(dir.path()).unwrap();
        assert_eq!(s2.t_len(), 8);
        let x = Tensor::from_fn(&[1, 1, IMG_SIZE, IMG_SIZE], |i| (i % 7) as f64 * 0.1);
        let y1 = net.forward(&x, &[3]).unwrap();
        let y2 = back.forward(&x, &[3]).unwrap();
        // Storage is 32-bit; outputs agree to that precision.
        for (a, b) in y1.data().iter().zip(y2.data().iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
