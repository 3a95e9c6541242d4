//! Quantized linear and convolution kernels in three schemes.
//!
//! * `plain`: quantize activations and weights directly.
//! * `single_hadamard`: transform activations block-diagonally, quantize the
//!   transformed values, undo the transform with the raw sign matrix inside
//!   the integer chain, and leave weights untouched. The 2^(-k/2)
//!   normalization is absorbed into the scalar prefactor, so the inner chain
//!   (XH)_int * H_raw * W_int is pure integer arithmetic.
//! * `double_hadamard`: transform activations online and weights offline
//!   (H W materialized and quantized). Kept solely as a comparison baseline:
//!   it amplifies weight outliers and does not extend to strided
//!   convolution, so training paths never use it.
//!
//! Each kernel has a float reference path (the fake-quant composition used
//! in training) and an integer execution path that must agree with it;
//! integer accumulation is 64-bit with overflow as a hard error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hadamard::{self, HadamardPlan};
use crate::lora::{self, LoraAdapter};
use crate::nn;
use crate::quant::{self, QuantParams, ScaleTable};
use crate::tensor::{IntTensor, Tensor};

/// Kernel scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Plain,
    SingleHadamard,
    DoubleHadamard,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Plain => "plain",
            Scheme::SingleHadamard => "single_hadamard",
            Scheme::DoubleHadamard => "double_hadamard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Scheme::Plain),
            "single_hadamard" => Ok(Scheme::SingleHadamard),
            "double_hadamard" => Ok(Scheme::DoubleHadamard),
            other => Err(Error::InvalidConfig(format!("unknown scheme `{other}`"))),
        }
    }
}

/// Quantized linear layer over a frozen [c_i x c_o] weight.
#[derive(Debug, Clone)]
pub struct QLinearLayer {
    pub name: String,
    w: Tensor,
    pub lora: Option<LoraAdapter>,
    w_params: QuantParams,
    a_params: QuantParams,
    pub act_scales: ScaleTable,
    /// Weight scales; length 1 when shared across timesteps, T otherwise.
    pub w_scales: ScaleTable,
    plan: HadamardPlan,
    pub scheme: Scheme,
}

impl QLinearLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        w: Tensor,
        w_bits: u8,
        a_bits: u8,
        t_len: usize,
        k_preferred: u32,
        scheme: Scheme,
    ) -> Result<Self> {
        if w.rank() != 2 {
            return Err(Error::ShapeMismatch {
                context: "QLinearLayer weight must be 2-D",
                expected: vec![0, 0],
                got: w.shape().to_vec(),
            });
        }
        let c_i = w.shape()[0];
        let plan = hadamard::make_plan(c_i, k_preferred);
        Ok(Self {
            name: name.into(),
            w,
            lora: None,
            w_params: QuantParams::new(w_bits)?,
            a_params: QuantParams::new(a_bits)?,
            act_scales: ScaleTable::new(t_len, 1.0, true)?,
            w_scales: ScaleTable::new(1, 1.0, true)?,
            plan,
        scheme,
        })
    }

    pub fn c_i(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn c_o(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn base_weight(&self) -> &Tensor {
        &self.w
    }

    pub fn plan(&self) -> &HadamardPlan {
        self.plan
            .dim()
            .eq(&self.c_i())
            .then_some(&self.plan)
            .expect("plan dim matches c_i by construction")
    }

    pub fn w_params(&self) -> QuantParams {
        self.w_params
    }

    pub fn a_params(&self) -> QuantParams {
        self.a_params
    }

    /// Weight scale for timestep `t` (index 0 when shared).
    pub fn w_scale_at(&self, t: usize) -> Result<f64> {
        if self.w_scales.len() == 1 {
            self.w_scales.get(0)
        } else {
            self.w_scales.get(t)
        }
    }

    /// W' = W + scaling * B * A; LoRA materializes before weight quantization.
    pub fn weight_effective(&self) -> Result<Tensor> {
        match &self.lora {
            Some(ad) => lora::lora_apply(&self.w, ad),
            None => Ok(self.w.clone()),
        }
    }
}

/// Quantized convolution layer. The frozen kernel is stored in im2col GEMM
/// layout [c_in*l*l x c_out]; the transform plan runs over the activation
/// width and is recomputed per call because spatial size changes across
/// stages (identity fallback when the width has no factor of two).
#[derive(Debug, Clone)]
pub struct QConvLayer {
    pub name: String,
    w_gemm: Tensor,
    pub c_in: usize,
    pub c_out: usize,
    pub l: usize,
    pub stride: usize,
    pub padding: usize,
    pub lora: Option<LoraAdapter>,
    w_params: QuantParams,
    a_params: QuantParams,
    pub act_scales: ScaleTable,
    pub w_scales: ScaleTable,
    k_preferred: u32,
    pub scheme: Scheme,
}

impl QConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        w_gemm: Tensor,
        c_in: usize,
        c_out: usize,
        l: usize,
        stride: usize,
        padding: usize,
        w_bits: u8,
        a_bits: u8,
        t_len: usize,
        k_preferred: u32,
        scheme: Scheme,
    ) -> Result<Self> {
        if scheme == Scheme::DoubleHadamard {
            return Err(Error::InvalidConfig(
                "double_hadamard does not support convolution".into(),
            ));
        }
        if w_gemm.shape() != [c_in * l * l, c_out] {
            return Err(Error::ShapeMismatch {
                context: "QConvLayer weight (GEMM layout)",
                expected: vec![c_in * l * l, c_out],
                got: w_gemm.shape().to_vec(),
            });
        }
        Ok(Self {
            name: name.into(),
            w_gemm,
            c_in,
            c_out,
            l,
            stride,
            padding,
            lora: None,
            w_params: QuantParams::new(w_bits)?,
            a_params: QuantParams::new(a_bits)?,
            act_scales: ScaleTable::new(t_len, 1.0, true)?,
            w_scales: ScaleTable::new(1, 1.0, true)?,
            k_preferred,
            scheme,
        })
    }

    pub fn base_weight(&self) -> &Tensor {
        &self.w_gemm
    }

    pub fn k_preferred(&self) -> u32 {
        self.k_preferred
    }

    pub fn w_params(&self) -> QuantParams {
        self.w_params
    }

    pub fn a_params(&self) -> QuantParams {
        self.a_params
    }

    pub fn w_scale_at(&self, t: usize) -> Result<f64> {
        if self.w_scales.len() == 1 {
            self.w_scales.get(0)
        } else {
            self.w_scales.get(t)
        }
    }

    /// Plan over the current activation width.
    pub fn plan_for_width(&self, w: usize) -> HadamardPlan {
        match self.scheme {
            Scheme::Plain => HadamardPlan::identity(w),
            _ => hadamard::make_plan(w, self.k_preferred),
        }
    }

    pub fn weight_effective(&self) -> Result<Tensor> {
        match &self.lora {
            Some(ad) => lora::lora_apply(&self.w_gemm, ad),
            None => Ok(self.w_gemm.clone()),
        }
    }
}

fn check_timestep(table: &ScaleTable, t: usize) -> Result<()> {
    if t >= table.len() {
        return Err(Error::TimestepOutOfRange {
            t,
            len: table.len(),
        });
    }
    Ok(())
}

/// Float reference path of the quantized linear layer: the fake-quant
/// composition the training loop differentiates through.
pub fn qlinear_forward(layer: &QLinearLayer, x: &Tensor, t: usize) -> Result<Tensor> {
    check_timestep(&layer.act_scales, t)?;
    if x.rank() != 2 || x.cols() != layer.c_i() {
        return Err(Error::ShapeMismatch {
            context: "qlinear_forward input",
            expected: vec![0, layer.c_i()],
            got: x.shape().to_vec(),
        });
    }
    let s_a = layer.act_scales.get(t)?;
    let s_w = layer.w_scale_at(t)?;
    let w_eff = layer.weight_effective()?;
    match layer.scheme {
        Scheme::Plain => {
            let x_hat = quant::fake_quant(x, s_a, layer.a_params)?;
            let w_hat = quant::fake_quant(&w_eff, s_w, layer.w_params)?;
            x_hat.matmul(&w_hat)
        }
        Scheme::SingleHadamard => {
            let z = hadamard::block_transform(x, &layer.plan)?;
            let z_hat = quant::fake_quant(&z, s_a, layer.a_params)?;
            let u = hadamard::block_transform(&z_hat, &layer.plan)?;
            let w_hat = quant::fake_quant(&w_eff, s_w, layer.w_params)?;
            u.matmul(&w_hat)
        }
        Scheme::DoubleHadamard => double_hadamard_linear(layer, x, t),
    }
}

/// Integer execution path: quantized operands, 64-bit checked accumulation,
/// one real-valued prefactor at the end. Must agree with the float path.
pub fn qlinear_forward_int_path(layer: &QLinearLayer, x: &Tensor, t: usize) -> Result<Tensor> {
    check_timestep(&layer.act_scales, t)?;
    if x.rank() != 2 || x.cols() != layer.c_i() {
        return Err(Error::ShapeMismatch {
            context: "qlinear_forward_int_path input",
            expected: vec![0, layer.c_i()],
            got: x.shape().to_vec(),
        });
    }
    let s_a = layer.act_scales.get(t)?;
    let s_w = layer.w_scale_at(t)?;
    let w_eff = layer.weight_effective()?;
    match layer.scheme {
        Scheme::Plain => {
            let qx = quant::quantize(x, s_a, layer.a_params)?;
            let qw = quant::quantize(&w_eff, s_w, layer.w_params)?;
            let y_int = qx.ints().matmul_checked(qw.ints())?;
            Ok(y_int.to_tensor(s_a * s_w))
        }
        Scheme::SingleHadamard => {
            let z = hadamard::block_transform(x, &layer.plan)?;
            let qz = quant::quantize(&z, s_a, layer.a_params)?;
            // (XH)_int * H_raw stays exact in integers; the normalization
            // factor moves into the prefactor below.
            let mixed = hadamard::block_transform_int(qz.ints(), &layer.plan)?;
            let qw = quant::quantize(&w_eff, s_w, layer.w_params)?;
            let y_int = mixed.matmul_checked(qw.ints())?;
            Ok(y_int.to_tensor(s_a * s_w * layer.plan.norm()))
        }
        Scheme::DoubleHadamard => {
            let z = hadamard::block_transform(x, &layer.plan)?;
            let qz = quant::quantize(&z, s_a, layer.a_params)?;
            let w_h = transform_weight_rows(&w_eff, &layer.plan)?;
            let s_hw = quant::init_scale(&w_h, layer.w_params)?;
            let qwh = quant::quantize(&w_h, s_hw, layer.w_params)?;
            let y_int = qz.ints().matmul_checked(qwh.ints())?;
            Ok(y_int.to_tensor(s_a * s_hw))
        }
    }
}

/// Comparison baseline: quantizes XH online and HW offline (the offline
/// scale comes from the calibration initializer on the transformed weight).
/// With the identity plan this reduces to the plain scheme.
pub fn double_hadamard_linear(layer: &QLinearLayer, x: &Tensor, t: usize) -> Result<Tensor> {
    check_timestep(&layer.act_scales, t)?;
    let s_a = layer.act_scales.get(t)?;
    let w_eff = layer.weight_effective()?;
    let z = hadamard::block_transform(x, &layer.plan)?;
    let z_hat = quant::fake_quant(&z, s_a, layer.a_params)?;
    let w_h = transform_weight_rows(&w_eff, &layer.plan)?;
    let s_hw = if layer.plan.is_identity() {
        layer.w_scale_at(t)?
    } else {
        quant::init_scale(&w_h, layer.w_params)?
    };
    let wh_hat = quant::fake_quant(&w_h, s_hw, layer.w_params)?;
    z_hat.matmul(&wh_hat)
}

/// H * W for a [c_i x c_o] weight: the block transform applied down each
/// column (equivalently, transform the rows of W^T).
pub fn transform_weight_rows(w: &Tensor, plan: &HadamardPlan) -> Result<Tensor> {
    if plan.is_identity() {
        return Ok(w.clone());
    }
    let wt = w.transpose()?;
    let wth = hadamard::block_transform(&wt, plan)?;
    wth.transpose()
}

/// Float reference path of the quantized convolution. The transform runs
/// only along the width axis of the merged [(B*C*h) x w] view.
pub fn qconv_forward(layer: &QConvLayer, x: &Tensor, t: usize) -> Result<Tensor> {
    check_timestep(&layer.act_scales, t)?;
    let (b, c, h, w) = conv_input_dims(layer, x)?;
    let s_a = layer.act_scales.get(t)?;
    let s_w = layer.w_scale_at(t)?;
    let w_eff = layer.weight_effective()?;
    let w_hat = quant::fake_quant(&w_eff, s_w, layer.w_params)?;
    let plan = layer.plan_for_width(w);
    let u = match layer.scheme {
        Scheme::Plain => quant::fake_quant(x, s_a, layer.a_params)?,
        Scheme::SingleHadamard => {
            let x2 = x.reshape(&[b * c * h, w])?;
            let z = hadamard::block_transform(&x2, &plan)?;
            let z_hat = quant::fake_quant(&z, s_a, layer.a_params)?;
            let u2 = hadamard::block_transform(&z_hat, &plan)?;
            u2.reshape(&[b, c, h, w])?
        }
        Scheme::DoubleHadamard => unreachable!("rejected at construction"),
    };
    nn::conv2d_forward(
        &u,
        &w_hat,
        None,
        layer.c_out,
        layer.l,
        layer.stride,
        layer.padding,
    )
}

/// Integer execution path of the quantized convolution.
pub fn qconv_forward_int_path(layer: &QConvLayer, x: &Tensor, t: usize) -> Result<Tensor> {
    check_timestep(&layer.act_scales, t)?;
    let (b, c, h, w) = conv_input_dims(layer, x)?;
    let s_a = layer.act_scales.get(t)?;
    let s_w = layer.w_scale_at(t)?;
    let w_eff = layer.weight_effective()?;
    let qw = quant::quantize(&w_eff, s_w, layer.w_params)?;
    let plan = layer.plan_for_width(w);
    let (acts_int, prefactor) = match layer.scheme {
        Scheme::Plain => {
            let qx = quant::quantize(x, s_a, layer.a_params)?;
            (qx.ints().clone(), s_a * s_w)
        }
        Scheme::SingleHadamard => {
            let x2 = x.reshape(&[b * c * h, w])?;
            let z = hadamard::block_transform(&x2, &plan)?;
            let qz = quant::quantize(&z, s_a, layer.a_params)?;
            let mixed = hadamard::block_transform_int(qz.ints(), &plan)?;
            (mixed.reshape(&[b, c, h, w])?, s_a * s_w * plan.norm())
        }
        Scheme::DoubleHadamard => unreachable!("rejected at construction"),
    };
    let patches = nn::im2col_int(&acts_int, (b, c, h, w), layer.l, layer.stride, layer.padding);
    let y_int = patches.matmul_checked(qw.ints())?;
    let rows = y_int.to_tensor(prefactor);
    let ho = nn::conv_out_size(h, layer.l, layer.stride, layer.padding);
    let wo = nn::conv_out_size(w, layer.l, layer.stride, layer.padding);
    Ok(nn::rows_to_bchw(&rows, b, layer.c_out, ho, wo))
}

fn conv_input_dims(layer: &QConvLayer, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 || x.shape()[1] != layer.c_in {
        return Err(Error::ShapeMismatch {
            context: "qconv input",
            expected: vec![0, layer.c_in, 0, 0],
            got: x.shape().to_vec(),
        });
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn grid_tensor(shape: &[usize], s: f64, p: QuantParams, rng: &mut impl Rng) -> Tensor {
        let span = p.q_max();
        Tensor::from_fn(shape, |_| {
            (rng.gen_range(-span..=span)) as f64 * s
        })
    }

    fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen::<f64>() * (hi - lo) + lo)
    }

    fn make_linear(
        w: Tensor,
        bits: u8,
        scheme: Scheme,
        s_a: f64,
        s_w: f64,
    ) -> QLinearLayer {
        let mut layer = QLinearLayer::new("lin", w, bits, bits, 4, 5, scheme).unwrap();
        layer.act_scales = ScaleTable::new(4, s_a, true).unwrap();
        layer.w_scales = ScaleTable::new(1, s_w, true).unwrap();
        layer
    }

    #[test]
    fn grid_aligned_inputs_reproduce_fp_matmul_in_all_schemes() {
        let mut rng = rng::stream(7, "qlin-grid");
        let p = QuantParams::new(8).unwrap();
        let (s_a, s_w) = (0.03125, 0.0078125);
        // Weight grid-aligned for plain; for the transformed schemes the
        // activations are aligned in the transformed domain, so build X by
        // inverse-transforming a grid-aligned Z.
        let w = grid_tensor(&[32, 8], s_w, p, &mut rng);
        let plan = hadamard::make_plan(32, 5);
        let z = grid_tensor(&[6, 32], s_a, p, &mut rng);
        let x = hadamard::block_transform(&z, &plan).unwrap();
        for scheme in [Scheme::Plain, Scheme::SingleHadamard, Scheme::DoubleHadamard] {
            // Plain quantizes X directly: use the aligned Z as input instead.
            let input = if scheme == Scheme::Plain { &z } else { &x };
            let layer = make_linear(w.clone(), 8, scheme, s_a, s_w);
            let got = qlinear_forward(&layer, input, 0).unwrap();
            let want = input.matmul(&layer.weight_effective().unwrap()).unwrap();
            if scheme == Scheme::DoubleHadamard {
                // Offline HW quantization is not exact on this grid; only
                // check the activation side stayed lossless (up to the f64
                // roundoff of the transform round-trip).
                let z2 = hadamard::block_transform(input, layer.plan()).unwrap();
                let zq = quant::fake_quant(&z2, s_a, layer.a_params()).unwrap();
                for (a, b) in z2.data().iter().zip(zq.data().iter()) {
                    assert!((a - b).abs() < 1e-9);
                }
                continue;
            }
            let denom = want.norm2().max(1e-12);
            let err = got.sub(&want).unwrap().norm2() / denom;
            assert!(err < 1e-6, "{scheme:?}: rel err {err}");
        }
    }

    #[test]
    fn int_path_matches_float_path_linear() {
        let mut rng = rng::stream(8, "qlin-int");
        for &bits in &[3u8, 4, 8] {
            for scheme in [Scheme::Plain, Scheme::SingleHadamard, Scheme::DoubleHadamard] {
                let x = rand_tensor(&[16, 32], -2.0, 2.0, &mut rng);
                let w = rand_tensor(&[32, 8], -0.5, 0.5, &mut rng);
                let p_a = QuantParams::new(bits).unwrap();
                let p_w = QuantParams::new(bits).unwrap();
                let plan = hadamard::make_plan(32, 5);
                let calib = if scheme == Scheme::Plain {
                    x.clone()
                } else {
                    hadamard::block_transform(&x, &plan).unwrap()
                };
                let s_a = quant::init_scale(&calib, p_a).unwrap();
                let s_w = quant::init_scale(&w, p_w).unwrap();
                let layer = make_linear(w, bits, scheme, s_a, s_w);
                let float = qlinear_forward(&layer, &x, 1).unwrap();
                let int = qlinear_forward_int_path(&layer, &x, 1).unwrap();
                let denom = float.norm2().max(1e-12);
                let err = float.sub(&int).unwrap().norm2() / denom;
                assert!(err < 1e-4, "bits={bits} {scheme:?}: rel err {err}");
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = rng::stream(9, "qlin-zero");
        let w = rand_tensor(&[32, 8], -0.5, 0.5, &mut rng);
        let layer = make_linear(w, 4, Scheme::SingleHadamard, 0.1, 0.01);
        let x = Tensor::zeros(&[4, 32]);
        let y = qlinear_forward_int_path(&layer, &x, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn accumulator_worst_case_fits_i64() {
        // 8-bit operands, block size 2^k, reduction dim up to 2^20:
        // |partial| <= 2^7 * 2^k * 2^7 * 2^20 = 2^(34+k) < 2^63 for k <= 12.
        for k in 0..=hadamard::MAX_ORDER {
            let bound: u128 = (1u128 << 7) * (1u128 << k) * (1u128 << 7) * (1u128 << 20);
            assert!(bound < 1u128 << 63, "k={k}");
        }
    }

    #[test]
    fn spike_rows_quantize_better_under_single_hadamard() {
        let mut rng = rng::stream(10, "qlin-spike");
        let p = QuantParams::new(4).unwrap();
        let w = rand_tensor(&[32, 8], -0.5, 0.5, &mut rng);
        // One dominant spike contaminates the shared per-tensor scale; the
        // transform diffuses it across its block so the rest of the matrix
        // keeps a usable grid.
        let x = {
            let base = Tensor::from_fn(&[16, 32], |_| rng::normal(&mut rng));
            let mut data = base.into_data();
            data[3 * 32 + 5] += 100.0;
            Tensor::new(&[16, 32], data).unwrap()
        };
        let fp = x.matmul(&w).unwrap();
        let plan = hadamard::make_plan(32, 5);

        let s_plain = quant::init_scale(&x, p).unwrap();
        let s_single =
            quant::init_scale(&hadamard::block_transform(&x, &plan).unwrap(), p).unwrap();
        let s_w = quant::init_scale(&w, p).unwrap();

        let plain = make_linear(w.clone(), 4, Scheme::Plain, s_plain, s_w);
        let single = make_linear(w.clone(), 4, Scheme::SingleHadamard, s_single, s_w);
        let err_plain = qlinear_forward(&plain, &x, 0)
            .unwrap()
            .sub(&fp)
            .unwrap()
            .norm2();
        let err_single = qlinear_forward(&single, &x, 0)
            .unwrap()
            .sub(&fp)
            .unwrap()
            .norm2();
        assert!(
            err_single < err_plain,
            "single {err_single} vs plain {err_plain}"
        );
    }

    #[test]
    fn single_hadamard_never_touches_weight_ints() {
        let mut rng = rng::stream(11, "w-ints");
        let w = rand_tensor(&[32, 8], -0.5, 0.5, &mut rng);
        let p = QuantParams::new(4).unwrap();
        let s_w = quant::init_scale(&w, p).unwrap();
        let plain = make_linear(w.clone(), 4, Scheme::Plain, 0.1, s_w);
        let single = make_linear(w.clone(), 4, Scheme::SingleHadamard, 0.1, s_w);
        let qp = quant::quantize(&plain.weight_effective().unwrap(), s_w, p).unwrap();
        let qs = quant::quantize(&single.weight_effective().unwrap(), s_w, p).unwrap();
        assert_eq!(qp.ints().data(), qs.ints().data());
    }

    #[test]
    fn constant_columns_amplify_under_weight_transform() {
        // All-ones columns blow up by sqrt(2^k) inside each block.
        let k = 4u32;
        let plan = hadamard::make_plan(16, k);
        let w = Tensor::filled(&[16, 4], 1.0);
        let wh = transform_weight_rows(&w, &plan).unwrap();
        let want = (1u64 << k) as f64;
        assert!((wh.max_abs() - want.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn double_scheme_amplifies_weight_quant_error_on_constant_columns() {
        let mut rng = rng::stream(12, "dbl-mse");
        let p = QuantParams::new(4).unwrap();
        let plan = hadamard::make_plan(32, 5);
        // Gaussian-ish weight contaminated with constant columns.
        let w = Tensor::from_fn(&[32, 8], |i| {
            let col = i % 8;
            if col < 2 {
                0.8
            } else {
                (rng.gen::<f64>() - 0.5) * 0.2
            }
        });
        let mse_plain = {
            let s = quant::init_scale(&w, p).unwrap();
            quant::fake_quant(&w, s, p).unwrap().mse(&w).unwrap()
        };
        let wh = transform_weight_rows(&w, &plan).unwrap();
        let mse_double = {
            let s = quant::init_scale(&wh, p).unwrap();
            quant::fake_quant(&wh, s, p).unwrap().mse(&wh).unwrap()
        };
        assert!(
            mse_double > mse_plain,
            "double {mse_double} <= plain {mse_plain}"
        );
    }

    #[test]
    fn double_with_identity_plan_reduces_to_plain() {
        let mut rng = rng::stream(13, "dbl-id");
        // c_i = 7 has no factor of two, so the plan is the identity.
        let w = rand_tensor(&[7, 5], -0.5, 0.5, &mut rng);
        let x = rand_tensor(&[3, 7], -1.0, 1.0, &mut rng);
        let p = QuantParams::new(4).unwrap();
        let s_a = quant::init_scale(&x, p).unwrap();
        let s_w = quant::init_scale(&w, p).unwrap();
        let mut dbl = QLinearLayer::new("d", w.clone(), 4, 4, 2, 5, Scheme::DoubleHadamard).unwrap();
        dbl.act_scales = ScaleTable::new(2, s_a, true).unwrap();
        dbl.w_scales = ScaleTable::new(1, s_w, true).unwrap();
        let mut plain = QLinearLayer::new("p", w, 4, 4, 2, 5, Scheme::Plain).unwrap();
        plain.act_scales = ScaleTable::new(2, s_a, true).unwrap();
        plain.w_scales = ScaleTable::new(1, s_w, true).unwrap();
        let yd = qlinear_forward(&dbl, &x, 0).unwrap();
        let yp = qlinear_forward(&plain, &x, 0).unwrap();
        assert_eq!(yd.data(), yp.data());
    }

    fn make_conv(
        w_gemm: Tensor,
        c_in: usize,
        c_out: usize,
        l: usize,
        stride: usize,
        pad: usize,
        bits: u8,
        scheme: Scheme,
        s_a: f64,
        s_w: f64,
    ) -> QConvLayer {
        let mut layer = QConvLayer::new(
            "conv", w_gemm, c_in, c_out, l, stride, pad, bits, bits, 4, 5, scheme,
        )
        .unwrap();
        layer.act_scales = ScaleTable::new(4, s_a, true).unwrap();
        layer.w_scales = ScaleTable::new(1, s_w, true).unwrap();
        layer
    }

    #[test]
    fn one_by_one_conv_equals_linear() {
        let mut rng = rng::stream(14, "conv1x1");
        let p = QuantParams::new(4).unwrap();
        let (c_in, c_out) = (8usize, 6usize);
        let w = rand_tensor(&[c_in, c_out], -0.5, 0.5, &mut rng);
        let x = rand_tensor(&[2, c_in, 4, 8], -1.0, 1.0, &mut rng);
        let plan = hadamard::make_plan(8, 5);
        let x2 = x.reshape(&[2 * c_in * 4, 8]).unwrap();
        let s_a = quant::init_scale(&hadamard::block_transform(&x2, &plan).unwrap(), p).unwrap();
        let s_w = quant::init_scale(&w, p).unwrap();
        let conv = make_conv(
            w.clone(),
            c_in,
            c_out,
            1,
            1,
            0,
            4,
            Scheme::SingleHadamard,
            s_a,
            s_w,
        );
        let y = qconv_forward(&conv, &x, 0).unwrap();
        // Same arithmetic through the linear kernel on the token matrix,
        // with the transform running over the conv's width axis.
        let w_hat = quant::fake_quant(&w, s_w, p).unwrap();
        let z = hadamard::block_transform(&x2, &plan).unwrap();
        let z_hat = quant::fake_quant(&z, s_a, p).unwrap();
        let u = hadamard::block_transform(&z_hat, &plan)
            .unwrap()
            .reshape(&[2, c_in, 4, 8])
            .unwrap();
        let tokens = nn::bchw_to_rows(&u).unwrap();
        let want_rows = tokens.matmul(&w_hat).unwrap();
        let want = nn::rows_to_bchw_tokens(&want_rows, 2, c_out, 4, 8)
            .reshape(&[2, c_out, 4, 8])
            .unwrap();
        let err = y.sub(&want).unwrap().norm2() / want.norm2().max(1e-12);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn transform_insertion_is_lossless_without_quantization() {
        let mut rng = rng::stream(15, "conv-orth");
        let (b, c, h, w) = (2usize, 3usize, 6usize, 16usize);
        let x = rand_tensor(&[b, c, h, w], -1.0, 1.0, &mut rng);
        let wg = rand_tensor(&[c * 9, 4], -0.5, 0.5, &mut rng);
        let plan = hadamard::make_plan(w, 4);
        let x2 = x.reshape(&[b * c * h, w]).unwrap();
        let round_trip = hadamard::block_transform(
            &hadamard::block_transform(&x2, &plan).unwrap(),
            &plan,
        )
        .unwrap()
        .reshape(&[b, c, h, w])
        .unwrap();
        let direct = nn::conv2d_forward(&x, &wg, None, 4, 3, 1, 1).unwrap();
        let inserted = nn::conv2d_forward(&round_trip, &wg, None, 4, 3, 1, 1).unwrap();
        let err = direct.sub(&inserted).unwrap().norm2() / direct.norm2().max(1e-12);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn conv_int_path_matches_float_path() {
        let mut rng = rng::stream(16, "conv-int");
        for &(l, stride, pad) in &[(1usize, 1usize, 0usize), (3, 1, 1), (3, 2, 1)] {
            for &bits in &[3u8, 4, 8] {
                for scheme in [Scheme::Plain, Scheme::SingleHadamard] {
                    let (b, c_in, c_out, h, w) = (2usize, 3usize, 4usize, 6usize, 8usize);
                    let x = rand_tensor(&[b, c_in, h, w], -1.5, 1.5, &mut rng);
                    let wg = rand_tensor(&[c_in * l * l, c_out], -0.5, 0.5, &mut rng);
                    let p = QuantParams::new(bits).unwrap();
                    let plan = hadamard::make_plan(w, 5);
                    let x2 = x.reshape(&[b * c_in * h, w]).unwrap();
                    let calib = if scheme == Scheme::Plain {
                        x.clone()
                    } else {
                        hadamard::block_transform(&x2, &plan).unwrap()
                    };
                    let s_a = quant::init_scale(&calib, p).unwrap();
                    let s_w = quant::init_scale(&wg, p).unwrap();
                    let layer =
                        make_conv(wg, c_in, c_out, l, stride, pad, bits, scheme, s_a, s_w);
                    let float = qconv_forward(&layer, &x, 2).unwrap();
                    let int = qconv_forward_int_path(&layer, &x, 2).unwrap();
                    let err = float.sub(&int).unwrap().norm2() / float.norm2().max(1e-12);
                    assert!(
                        err < 1e-4,
                        "l={l} s={stride} bits={bits} {scheme:?}: rel err {err}"
                    );
                }
            }
        }
    }

    #[test]
    fn conv_identity_plan_equals_plain_bitwise() {
        let mut rng = rng::stream(17, "conv-idplan");
        // Width 7 has no factor of two: single_hadamard degrades to identity.
        let (b, c_in, c_out, h, w) = (1usize, 2usize, 3usize, 4usize, 7usize);
        let x = rand_tensor(&[b, c_in, h, w], -1.0, 1.0, &mut rng);
        let wg = rand_tensor(&[c_in * 9, c_out], -0.5, 0.5, &mut rng);
        let p = QuantParams::new(4).unwrap();
        let s_a = quant::init_scale(&x, p).unwrap();
        let s_w = quant::init_scale(&wg, p).unwrap();
        let plain = make_conv(wg.clone(), c_in, c_out, 3, 1, 1, 4, Scheme::Plain, s_a, s_w);
        let single = make_conv(wg, c_in, c_out, 3, 1, 1, 4, Scheme::SingleHadamard, s_a, s_w);
        let yp = qconv_forward(&plain, &x, 0).unwrap();
        let ys = qconv_forward(&single, &x, 0).unwrap();
        assert_eq!(yp.data(), ys.data());
        let ip = qconv_forward_int_path(&plain, &x, 0).unwrap();
        let is_ = qconv_forward_int_path(&single, &x, 0).unwrap();
        assert_eq!(ip.data(), is_.data());
    }

    #[test]
    fn post_transform_max_decreases_for_dominant_blocks() {
        // Dominance criterion: max|x| / l1(x) > 2^(-k/2) within a block
        // guarantees the transformed block max strictly drops.
        let mut rng = rng::stream(18, "dom");
        let plan = hadamard::make_plan(32, 5);
        for _ in 0..50 {
            let mut v: Vec<f64> = (0..32).map(|_| (rng.gen::<f64>() - 0.5) * 0.2).collect();
            v[7] = 10.0 * (1.0 + rng.gen::<f64>());
            let x = Tensor::new(&[32], v).unwrap();
            let l1: f64 = x.data().iter().map(|a| a.abs()).sum();
            let dominance = x.max_abs() / l1;
            if dominance <= plan.norm() {
                continue;
            }
            let y = hadamard::block_transform(&x, &plan).unwrap();
            assert!(y.max_abs() < x.max_abs());
        }
    }
}
