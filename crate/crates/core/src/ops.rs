//! Forward and backward kernels for every differentiable operation.
//!
//! These are plain functions over [`Tensor`]s; [`crate::autograd::Tape`]
//! records which kernel produced each node and dispatches to the matching
//! backward rule. Reduction order is fixed, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `c = alpha * a·b + beta * c` with explicit strides, row-major friendly.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers size `a`, `b`, `c` for the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (c, h, w) = x.dims3()?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::InvalidTensor(format!(
                "conv2d weight must be [C_out, C_in, k, k], got {ws:?}"
            )));
        }
        if ws[1] != c {
            return Err(Error::ChannelMismatch {
                input: x.shape().to_vec(),
                weight: ws.to_vec(),
            });
        }
        let k = ws[2];
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: ws.to_vec(),
            });
        }
        Ok(Self {
            in_channels: c,
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
            out_height: (h + 2 * padding - k) / stride + 1,
            out_width: (w + 2 * padding - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// 1x1 stride-1 unpadded convolutions read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - padding` is in bounds.
fn valid_columns(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.width + g.padding > kx {
        ((g.width + g.padding - kx - 1) / g.stride + 1).min(g.out_width)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (k, p) = (g.kernel, g.positions());
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_columns(g, kx);
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize || lo == hi {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let out = &mut dst[oy * g.out_width + lo..oy * g.out_width + hi];
                    let first = lo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        out.copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (o, v) in out.iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (k, p) = (g.kernel, g.positions());
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_columns(g, kx);
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize || lo == hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let inp = &src[oy * g.out_width + lo..oy * g.out_width + hi];
                    let first = lo * g.stride + kx - g.padding;
                    for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(inp) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [C_in, H, W]` with `weight: [C_out, C_in, k, k]`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(x, weight, stride, padding)?;
    let c_out = weight.shape()[0];
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: b.shape().to_vec(),
                rhs: vec![c_out],
            });
        }
    }
    let (kk, p) = (g.patch_len(), g.positions());
    let mut out = vec![0.0; c_out * p];
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(p).zip(b.data()) {
            row.fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(
            c_out,
            kk,
            p,
            weight.data(),
            kk,
            1,
            x.data(),
            p,
            1,
            beta,
            &mut out,
        );
    } else {
        let cols = im2col(x.data(), &g);
        gemm(
            c_out,
            kk,
            p,
            weight.data(),
            kk,
            1,
            &cols,
            p,
            1,
            beta,
            &mut out,
        );
    }
    Tensor::new(vec![c_out, g.out_height, g.out_width], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(x, weight, stride, padding)?;
    let c_out = weight.shape()[0];
    let (kk, p) = (g.patch_len(), g.positions());
    let dy = grad_out.data();

    let bias: Vec<f64> = dy.chunks(p).map(|row| row.iter().sum()).collect();

    let mut dw = vec![0.0; c_out * kk];
    let cols_owned;
    let cols: &[f64] = if g.is_pointwise() {
        x.data()
    } else {
        cols_owned = im2col(x.data(), &g);
        &cols_owned
    };
    // dW[Co, K] = dY[Co, P] · colsᵀ[P, K]
    gemm(c_out, p, kk, dy, p, 1, cols, 1, p, 0.0, &mut dw);

    let input = if need_input {
        // dcols[K, P] = Wᵀ[K, Co] · dY[Co, P]
        let mut dcols = vec![0.0; kk * p];
        gemm(
            kk,
            c_out,
            p,
            weight.data(),
            1,
            kk,
            dy,
            p,
            1,
            0.0,
            &mut dcols,
        );
        if g.is_pointwise() {
            Some(Tensor::new(x.shape().to_vec(), dcols)?)
        } else {
            let mut dx = vec![0.0; x.numel()];
            col2im(&dcols, &g, &mut dx);
            Some(Tensor::new(x.shape().to_vec(), dx)?)
        }
    } else {
        None
    };

    Ok(ConvGrads {
        input,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::from_vec(bias),
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Gradient of sigmoid given its forward output `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("shape preserved")
}

/// Per-channel statistics gathered by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_bn_params(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = x.dims3()?;
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: x.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    Ok((c, h * w))
}

/// Training-mode batch norm over the spatial extent of each channel.
///
/// Returns the output, the normalized input (`x̂`), per-channel `1/σ` and
/// the biased batch statistics used for the running-stat update.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>, BatchStats)> {
    let (c, n) = check_bn_params(x, gamma, beta)?;
    let mut y = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = Vec::with_capacity(c);
    let mut stats = BatchStats {
        mean: Vec::with_capacity(c),
        var: Vec::with_capacity(c),
    };
    for ch in 0..c {
        let xs = &x.data()[ch * n..(ch + 1) * n];
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for i in 0..n {
            let xh = (xs[i] - mean) * istd;
            xhat[ch * n + i] = xh;
            y[ch * n + i] = gm * xh + bt;
        }
        inv_std.push(istd);
        stats.mean.push(mean);
        stats.var.push(var);
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        Tensor::new(shape, xhat)?,
        inv_std,
        stats,
    ))
}

pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batch_norm_train_backward(
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<BatchNormGrads> {
    let (c, h, w) = xhat.dims3()?;
    let n = h * w;
    let nf = n as f64;
    let mut dx = vec![0.0; xhat.numel()];
    let mut dgamma = Vec::with_capacity(c);
    let mut dbeta = Vec::with_capacity(c);
    for ch in 0..c {
        let xh = &xhat.data()[ch * n..(ch + 1) * n];
        let dy = &grad_out.data()[ch * n..(ch + 1) * n];
        let sum_dy: f64 = dy.iter().sum();
        let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
        dgamma.push(sum_dy_xh);
        dbeta.push(sum_dy);
        let scale = gamma.data()[ch] * inv_std[ch] / nf;
        for i in 0..n {
            dx[ch * n + i] = scale * (nf * dy[i] - sum_dy - xh[i] * sum_dy_xh);
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(xhat.shape().to_vec(), dx)?,
        gamma: Tensor::from_vec(dgamma),
        beta: Tensor::from_vec(dbeta),
    })
}

/// Inference-mode batch norm with fixed statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<Tensor> {
    let (c, n) = check_bn_params(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm running stats",
            lhs: vec![c],
            rhs: vec![running_mean.len(), running_var.len()],
        });
    }
    let mut y = x.data().to_vec();
    for ch in 0..c {
        let istd = 1.0 / (running_var[ch] + BN_EPS).sqrt();
        let (gm, bt, mu) = (gamma.data()[ch], beta.data()[ch], running_mean[ch]);
        for v in &mut y[ch * n..(ch + 1) * n] {
            *v = gm * (*v - mu) * istd + bt;
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

pub fn avg_pool2d(x: &Tensor, rate: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if rate == 0 || h % rate != 0 || w % rate != 0 {
        return Err(Error::NotDivisible {
            op: "avg_pool2d",
            rate,
            height: h,
            width: w,
        });
    }
    if rate == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h / rate, w / rate);
    let norm = 1.0 / (rate * rate) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..rate {
                    let row = (ch * h + oy * rate + dy) * w + ox * rate;
                    acc += x.data()[row..row + rate].iter().sum::<f64>();
                }
                out[(ch * oh + oy) * ow + ox] = acc * norm;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn avg_pool2d_backward(
    input_shape: &[usize],
    rate: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    if rate == 1 {
        return Ok(grad_out.clone());
    }
    let (c, oh, ow) = grad_out.dims3()?;
    let (h, w) = (oh * rate, ow * rate);
    debug_assert_eq!(input_shape, [c, h, w]);
    let norm = 1.0 / (rate * rate) as f64;
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                dx[(ch * h + y) * w + x] =
                    grad_out.data()[(ch * oh + y / rate) * ow + x / rate] * norm;
            }
        }
    }
    Tensor::new(vec![c, h, w], dx)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let n = h * w;
    Ok(Tensor::from_vec(
        x.data()
            .chunks(n)
            .take(c)
            .map(|plane| plane.iter().sum::<f64>() / n as f64)
            .collect(),
    ))
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let n: usize = input_shape[1..].iter().product();
    let inv = 1.0 / n as f64;
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, n))
        .collect();
    Tensor::new(input_shape.to_vec(), data)
}

/// Source taps for one output coordinate along an axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-center source taps with edge clamping.
fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: s - lo as f64,
            }
        })
        .collect()
}

pub fn bilinear_upsample(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidTensor(
            "upsample target must be non-empty".into(),
        ));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &plane[a.lo * w..(a.lo + 1) * w];
            let r1 = &plane[a.hi * w..(a.hi + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                let top = r0[b.lo] * (1.0 - b.frac) + r0[b.hi] * b.frac;
                let bot = r1[b.lo] * (1.0 - b.frac) + r1[b.hi] * b.frac;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - a.frac) + bot * a.frac;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn bilinear_upsample_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (c, out_h, out_w) = grad_out.dims3()?;
    let (h, w) = (input_shape[1], input_shape[2]);
    if (out_h, out_w) == (h, w) {
        return Ok(grad_out.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = grad_out.data()[(ch * out_h + oy) * out_w + ox];
                let (gt, gb) = (g * (1.0 - a.frac), g * a.frac);
                plane[a.lo * w + b.lo] += gt * (1.0 - b.frac);
                plane[a.lo * w + b.hi] += gt * b.frac;
                plane[a.hi * w + b.lo] += gb * (1.0 - b.frac);
                plane[a.hi * w + b.hi] += gb * b.frac;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidTensor("concat_channels of an empty list".into()))?;
    let (_, h, w) = first.dims3()?;
    let mut channels = 0;
    for (index, x) in xs.iter().enumerate() {
        let (c, xh, xw) = x.dims3()?;
        if (xh, xw) != (h, w) {
            return Err(Error::SpatialMismatch {
                index,
                expected: (h, w),
                found: (xh, xw),
            });
        }
        channels += c;
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for x in xs {
        data.extend_from_slice(x.data());
    }
    Tensor::new(vec![channels, h, w], data)
}

pub fn fully_connected(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d_in = x.numel();
    let ws = weight.shape();
    if x.rank() != 1 || ws.len() != 2 || ws[0] != d_in || bias.shape() != [ws[1]] {
        return Err(Error::ShapeMismatch {
            op: "fully_connected",
            lhs: x.shape().to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let d_out = ws[1];
    let mut y = bias.data().to_vec();
    gemm(
        1,
        d_in,
        d_out,
        x.data(),
        d_in,
        1,
        weight.data(),
        d_out,
        1,
        1.0,
        &mut y,
    );
    Ok(Tensor::from_vec(y))
}

pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn fully_connected_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> LinearGrads {
    let (d_in, d_out) = (weight.shape()[0], weight.shape()[1]);
    let mut dx = vec![0.0; d_in];
    // dx[D_in] = W[D_in, D_out] · dy
    gemm(
        d_in,
        d_out,
        1,
        weight.data(),
        d_out,
        1,
        grad_out.data(),
        1,
        1,
        0.0,
        &mut dx,
    );
    let mut dw = vec![0.0; d_in * d_out];
    for (row, &xi) in dw.chunks_mut(d_out).zip(x.data()) {
        for (d, &g) in row.iter_mut().zip(grad_out.data()) {
            *d = xi * g;
        }
    }
    LinearGrads {
        input: Tensor::from_vec(dx),
        weight: Tensor::new(vec![d_in, d_out], dw).expect("weight shape"),
        bias: grad_out.clone(),
    }
}

/// Clamp range applied to probabilities inside the log of the BCE loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// `-β Σ_{y=1} ln s - (1-β) Σ_{y=0} ln(1-s)` with `s` clamped to `[1e-7, 1-1e-7]`.
pub fn weighted_bce(s: &Tensor, mask: &Tensor, beta: f64) -> Result<f64> {
    s.expect_same_shape("weighted_bce", mask)?;
    let mut loss = 0.0;
    for (&p, &y) in s.data().iter().zip(mask.data()) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        if y > 0.5 {
            loss -= beta * p.ln();
        } else {
            loss -= (1.0 - beta) * (1.0 - p).ln();
        }
    }
    Ok(loss)
}

pub fn weighted_bce_backward(s: &Tensor, mask: &Tensor, beta: f64, grad_out: f64) -> Tensor {
    let data = s
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&p, &y)| {
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                0.0
            } else if y > 0.5 {
                -grad_out * beta / p
            } else {
                grad_out * (1.0 - beta) / (1.0 - p)
            }
        })
        .collect();
    Tensor::new(s.shape().to_vec(), data).expect("shape preserved")
}
