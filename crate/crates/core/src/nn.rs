//! Small tensor building blocks shared by the network modules.
//!
//! Everything here works on NCHW tensors in either `f32` or `f64`; the
//! double-precision path exists so gradients can be checked against finite
//! differences.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, D};

use crate::error::{dim_err, Result};

/// Depthwise 2-D convolution, stride 1, zero "same" padding, odd kernel.
///
/// `x` is `(b, c, h, w)`, `weight` is `(c, k, k)`. Candle lowers grouped
/// convolutions to one convolution per channel, which is far too slow for
/// the 7x7 depthwise kernels used everywhere in the network, so this is a
/// direct loop with a hand-written backward pass.
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    let (wc, k0, k1) = weight.dims3()?;
    if wc != c || k0 != k1 || k0 % 2 == 0 {
        return Err(dim_err!(
            "depthwise kernel {:?} incompatible with input {:?}",
            weight.dims(),
            x.dims()
        ));
    }
    let x = x.contiguous()?;
    let weight = weight.contiguous()?;
    let y = x.apply_op2(&weight, DwConv)?;
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, c, 1, 1))?)?),
        None => Ok(y),
    }
}

struct DwConv;
struct DwConvGradInput;
struct DwConvGradWeight {
    k: usize,
}

#[derive(Clone, Copy)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Geometry {
    fn from_layouts(lx: &Layout, lk: &Layout) -> candle_core::Result<Self> {
        let (b, c, h, w) = lx.shape().dims4()?;
        let (_, k, _) = lk.shape().dims3()?;
        Ok(Self { b, c, h, w, k })
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("depthwise conv expects contiguous operands"),
    }
}

// out[b,c,y,x] = sum_{i,j} w[c,i,j] * in[b,c,y+i-p,x+j-p]
fn dw_forward<T: num_traits::Float>(input: &[T], kernel: &[T], g: Geometry) -> Vec<T> {
    let Geometry { b, c, h, w, k } = g;
    let p = (k / 2) as isize;
    let mut out = vec![T::zero(); b * c * h * w];
    for bc in 0..b * c {
        let ch = bc % c;
        let src = &input[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * h * w..(bc + 1) * h * w];
        let ker = &kernel[ch * k * k..(ch + 1) * k * k];
        for i in 0..k {
            let dy = i as isize - p;
            for j in 0..k {
                let dx = j as isize - p;
                let wv = ker[i * k + j];
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let srow = &src[sy * w..(sy + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for x in x0..x1 {
                        let sx = (x as isize + dx) as usize;
                        drow[x] = drow[x] + wv * srow[sx];
                    }
                }
            }
        }
    }
    out
}

// gin[b,c,y,x] = sum_{i,j} g[b,c,y-i+p,x-j+p] * w[c,i,j]
fn dw_grad_input<T: num_traits::Float>(grad: &[T], kernel: &[T], g: Geometry) -> Vec<T> {
    let Geometry { b, c, h, w, k } = g;
    let p = (k / 2) as isize;
    let mut out = vec![T::zero(); b * c * h * w];
    for bc in 0..b * c {
        let ch = bc % c;
        let src = &grad[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * h * w..(bc + 1) * h * w];
        let ker = &kernel[ch * k * k..(ch + 1) * k * k];
        for i in 0..k {
            let dy = p - i as isize;
            for j in 0..k {
                let dx = p - j as isize;
                let wv = ker[i * k + j];
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let srow = &src[sy * w..(sy + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for x in x0..x1 {
                        let sx = (x as isize + dx) as usize;
                        drow[x] = drow[x] + wv * srow[sx];
                    }
                }
            }
        }
    }
    out
}

// gw[c,i,j] = sum_{b,y,x} g[b,c,y,x] * in[b,c,y+i-p,x+j-p]
fn dw_grad_weight<T: num_traits::Float>(input: &[T], grad: &[T], g: Geometry) -> Vec<T> {
    let Geometry { b, c, h, w, k } = g;
    let p = (k / 2) as isize;
    let mut out = vec![T::zero(); c * k * k];
    for bc in 0..b * c {
        let ch = bc % c;
        let src = &input[bc * h * w..(bc + 1) * h * w];
        let gr = &grad[bc * h * w..(bc + 1) * h * w];
        for i in 0..k {
            let dy = i as isize - p;
            for j in 0..k {
                let dx = j as isize - p;
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                let mut acc = T::zero();
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    for x in x0..x1 {
                        let sx = (x as isize + dx) as usize;
                        acc = acc + gr[y * w + x] * src[sy * w + sx];
                    }
                }
                let slot = &mut out[ch * k * k + i * k + j];
                *slot = *slot + acc;
            }
        }
    }
    out
}

macro_rules! dispatch_float {
    ($name:expr, $a:expr, $la:expr, $b:expr, $lb:expr, $f:expr) => {
        match ($a, $b) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32($f(contiguous_slice(a, $la)?, contiguous_slice(b, $lb)?))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64($f(contiguous_slice(a, $la)?, contiguous_slice(b, $lb)?))
            }
            _ => candle_core::bail!("{} supports matching f32 or f64 operands only", $name),
        }
    };
}

impl CustomOp2 for DwConv {
    fn name(&self) -> &'static str {
        "depthwise-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::from_layouts(l1, l2)?;
        let out = dispatch_float!(self.name(), s1, l1, s2, l2, |x, k| dw_forward(x, k, g));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        input: &Tensor,
        kernel: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gi = grad.apply_op2_no_bwd(kernel, &DwConvGradInput)?;
        let gw = input.apply_op2_no_bwd(&grad, &DwConvGradWeight { k: kernel.dim(1)? })?;
        Ok((Some(gi), Some(gw)))
    }
}

impl CustomOp2 for DwConvGradInput {
    fn name(&self) -> &'static str {
        "depthwise-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::from_layouts(l1, l2)?;
        let out = dispatch_float!(self.name(), s1, l1, s2, l2, |gr, k| dw_grad_input(gr, k, g));
        Ok((out, l1.shape().clone()))
    }
}

impl CustomOp2 for DwConvGradWeight {
    fn name(&self) -> &'static str {
        "depthwise-conv2d-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let g = Geometry { b, c, h, w, k: self.k };
        let out = dispatch_float!(self.name(), s1, l1, s2, l2, |x, gr| dw_grad_weight(x, gr, g));
        Ok((out, Shape::from((c, self.k, self.k))))
    }
}

/// Pointwise (1x1) convolution: `weight` is `(c_out, c_in)`.
pub fn pointwise(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci) = weight.dims2()?;
    if ci != c {
        return Err(dim_err!("1x1 map expects {ci} channels, got {c}"));
    }
    let flat = x.reshape((b, c, h * w))?;
    let mut y = weight.broadcast_matmul(&flat)?;
    if let Some(bias) = bias {
        y = y.broadcast_add(&bias.reshape((1, co, 1))?)?;
    }
    Ok(y.reshape((b, co, h, w))?)
}

/// Dense map over the last dimension: `x` is `(n, in)`, `weight` is `(out, in)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(&weight.t()?)?.broadcast_add(bias)?)
}

/// LayerNorm across the channel dimension of an NCHW tensor, no affine terms.
pub fn channel_layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `|x|` whose gradient at exactly zero is zero (candle's own `abs` uses +1).
pub fn abs_zero_subgrad(x: &Tensor) -> Result<Tensor> {
    Ok(x.mul(&x.sign()?.detach())?)
}

/// Standard normal CDF.
pub fn normal_cdf(x: &Tensor) -> Result<Tensor> {
    Ok(((x * std::f64::consts::FRAC_1_SQRT_2)?.erf()? + 1.0)?.affine(0.5, 0.0)?)
}

/// `(b, c, h, w)` to `(b, c*r*r, h/r, w/r)`, the flattening order matching
/// [`depth_to_space`].
pub fn space_to_depth(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        return Err(dim_err!("spatial dims {h}x{w} not divisible by {r}"));
    }
    let t = x
        .reshape(&[b, c, h / r, r, w / r, r][..])?
        .permute([0, 1, 3, 5, 2, 4])?;
    Ok(t.reshape((b, c * r * r, h / r, w / r))?)
}

/// Pixel shuffle: `(b, c*r*r, h, w)` to `(b, c, h*r, w*r)`.
pub fn depth_to_space(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, crr, h, w) = x.dims4()?;
    if crr % (r * r) != 0 {
        return Err(dim_err!("{crr} channels not divisible by {}", r * r));
    }
    let c = crr / (r * r);
    let t = x
        .reshape(&[b, c, r, r, h, w][..])?
        .permute([0, 1, 4, 2, 5, 3])?;
    Ok(t.reshape((b, c, h * r, w * r))?)
}

/// Reads a rank-0 or single-element tensor as `f64`.
pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}
