//! Dense 4-D tensors (NCHW, contiguous row-major) and the numeric kernels the
//! network is built from: grouped 2-D convolution, 2-D max pooling, bilinear
//! upsampling, elementwise maps, global average pooling, and channel
//! concatenation. Every kernel has a matching backward function that maps an
//! upstream gradient to input/parameter gradients.
//!
//! Kernels are single-threaded by design; callers parallelize over independent
//! tensors (tiles, samples). The default element type is `f32`; everything is
//! generic over [`Scalar`] so gradient checking can run the same code in `f64`.

use crate::error::{Error, Result};

/// Element types the kernels operate on (`f32` for training/inference,
/// `f64` for finite-difference gradient checking).
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an `f64` literal to the active scalar type.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("scalar conversion of a finite literal cannot fail")
}

/// Dense 4-D array in NCHW order with an optional gradient buffer of the same
/// shape. The value type used throughout the crate: images, feature maps,
/// masks, and parameters are all `Tensor`s.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.iter().product()], grad: None }
    }

    /// Constant-filled tensor.
    pub fn filled(shape: [usize; 4], v: T) -> Self {
        Tensor { shape, data: vec![v; shape.iter().product()], grad: None }
    }

    /// Build from raw data; errors when the element count does not match.
    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::Data(format!(
                "tensor data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                want
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    /// Total element count.
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Flat index of `(n, c, h, w)`.
    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.shape[0] && c < self.shape[1] && h < self.shape[2] && w < self.shape[3]);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline(always)]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.idx(n, c, h, w);
        self.data[i] = v;
    }

    /// Apply `f` elementwise, producing a new tensor.
    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    /// Gradient buffer, if one has been accumulated.
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Drop any accumulated gradient.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Add `delta` into the gradient buffer, allocating zeros on first use.
    /// `delta` must have exactly as many elements as the tensor itself.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.data.len(), "gradient shape must match tensor shape");
        let g = self.grad.get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi = *gi + d;
        }
    }

    /// True when every element is finite (no NaN/Inf).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug-build guard used at kernel boundaries: non-finite values indicate
    /// an upstream bug and should fail fast during development and testing.
    #[inline]
    pub(crate) fn debug_check_finite(&self, context: &str) {
        debug_assert!(self.all_finite(), "non-finite values produced by {context}");
    }

    /// Convert elementwise into another scalar type (used to move `f32`
    /// weights into the `f64` gradient-checking mode and back).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
            grad: None,
        }
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Data(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Grouped 2-D convolution
// ---------------------------------------------------------------------------

struct ConvGeom {
    n: usize,
    c_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    cin_per_g: usize,
    cout_per_g: usize,
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvGeom> {
    let [n, c_in, h_in, w_in] = input.shape();
    let [c_out, wc, kh, kw] = weight.shape();
    if stride == 0 {
        return Err(Error::Config("conv2d: stride must be >= 1".into()));
    }
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::Config(format!(
            "conv2d: groups {groups} must divide both C_in {c_in} and C_out {c_out}"
        )));
    }
    if wc != c_in / groups {
        return Err(Error::Data(format!(
            "conv2d: weight shape {:?} expects C_in/groups = {wc}, but C_in {c_in} / groups {groups} = {}",
            weight.shape(),
            c_in / groups
        )));
    }
    if h_in + 2 * padding < kh || w_in + 2 * padding < kw {
        return Err(Error::Data(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h_in + 2 * padding,
            w_in + 2 * padding
        )));
    }
    let h_out = (h_in + 2 * padding - kh) / stride + 1;
    let w_out = (w_in + 2 * padding - kw) / stride + 1;
    Ok(ConvGeom {
        n,
        c_in,
        h_in,
        w_in,
        c_out,
        kh,
        kw,
        h_out,
        w_out,
        cin_per_g: c_in / groups,
        cout_per_g: c_out / groups,
    })
}

/// Grouped 2-D convolution with zero padding.
///
/// `weight` is laid out `[C_out, C_in/groups, kH, kW]`; output extents follow
/// `floor((H + 2*padding - kH)/stride) + 1`. `groups == C_in` with
/// `C_out == C_in` is a depthwise convolution; a 1x1 kernel with `groups == 1`
/// is a pointwise (channel-mixing) convolution. Both of those cases take
/// specialized fast paths; the general case is a direct loop.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weight, stride, padding, groups)?;
    let mut out = Tensor::zeros([g.n, g.c_out, g.h_out, g.w_out]);

    if g.kh == 1 && g.kw == 1 && stride == 1 && padding == 0 && groups == 1 {
        pointwise_forward(input, weight, &g, &mut out);
    } else if groups == g.c_in && g.c_out == g.c_in {
        depthwise_forward(input, weight, stride, padding, &g, &mut out);
    } else {
        general_conv_forward(input, weight, stride, padding, groups, &g, &mut out);
    }
    out.debug_check_finite("conv2d");
    Ok(out)
}

/// 1x1 stride-1 convolution as a per-image matrix product:
/// `out[co][p] = sum_ci w[co][ci] * in[ci][p]` over pixels `p`.
fn pointwise_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, g: &ConvGeom, out: &mut Tensor<T>) {
    let hw = g.h_in * g.w_in;
    let wdat = weight.data();
    for n in 0..g.n {
        let in_base = n * g.c_in * hw;
        let out_base = n * g.c_out * hw;
        for co in 0..g.c_out {
            let orow = &mut out.data_mut()[out_base + co * hw..out_base + (co + 1) * hw];
            for ci in 0..g.c_in {
                let k = wdat[co * g.c_in + ci];
                let irow = &input.data()[in_base + ci * hw..in_base + (ci + 1) * hw];
                for (o, &i) in orow.iter_mut().zip(irow) {
                    *o = i.mul_add(k, *o);
                }
            }
        }
    }
}

/// Depthwise convolution (`groups == C_in == C_out`). For each kernel tap the
/// valid output range is computed once, so the inner width loop is free of
/// bounds checks and vectorizes.
fn depthwise_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    g: &ConvGeom,
    out: &mut Tensor<T>,
) {
    let (ih, iw, oh, ow) = (g.h_in as isize, g.w_in as isize, g.h_out, g.w_out);
    let s = stride as isize;
    let p = padding as isize;
    for n in 0..g.n {
        for c in 0..g.c_in {
            let ibase = (n * g.c_in + c) * g.h_in * g.w_in;
            let obase = (n * g.c_out + c) * oh * ow;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let k = weight.data()[(c * g.kh + ky) * g.kw + kx];
                    if k == T::zero() {
                        continue;
                    }
                    // Input coordinate for output (y, x) is (y*s + ky - p, x*s + kx - p).
                    for y in 0..oh {
                        let sy = y as isize * s + ky as isize - p;
                        if sy < 0 || sy >= ih {
                            continue;
                        }
                        // Valid x range: 0 <= x*s + kx - p < iw.
                        let off = kx as isize - p;
                        let x_lo = ((-off + s - 1).max(0) / s) as usize;
                        let x_hi = (((iw - off - 1) / s) + 1).clamp(0, ow as isize) as usize;
                        if x_lo >= x_hi {
                            continue;
                        }
                        let irow = ibase + sy as usize * g.w_in;
                        let orow = obase + y * ow;
                        let (idat, odat) = (input.data(), out.data_mut());
                        if s == 1 {
                            let i0 = (irow as isize + off + x_lo as isize) as usize;
                            let src = &idat[i0..i0 + (x_hi - x_lo)];
                            let dst = &mut odat[orow + x_lo..orow + x_hi];
                            for (o, &i) in dst.iter_mut().zip(src) {
                                *o = i.mul_add(k, *o);
                            }
                        } else {
                            for x in x_lo..x_hi {
                                let sx = (x as isize * s + off) as usize;
                                odat[orow + x] = idat[irow + sx].mul_add(k, odat[orow + x]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Straightforward grouped convolution used for configurations outside the two
/// fast paths.
fn general_conv_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
    g: &ConvGeom,
    out: &mut Tensor<T>,
) {
    for n in 0..g.n {
        for grp in 0..groups {
            for co_g in 0..g.cout_per_g {
                let co = grp * g.cout_per_g + co_g;
                for y in 0..g.h_out {
                    for x in 0..g.w_out {
                        let mut acc = T::zero();
                        for ci_g in 0..g.cin_per_g {
                            let ci = grp * g.cin_per_g + ci_g;
                            for ky in 0..g.kh {
                                let sy = (y * stride + ky) as isize - padding as isize;
                                if sy < 0 || sy >= g.h_in as isize {
                                    continue;
                                }
                                for kx in 0..g.kw {
                                    let sx = (x * stride + kx) as isize - padding as isize;
                                    if sx < 0 || sx >= g.w_in as isize {
                                        continue;
                                    }
                                    let iv = input.at(n, ci, sy as usize, sx as usize);
                                    let wv = weight.data()[((co * g.cin_per_g + ci_g) * g.kh + ky) * g.kw + kx];
                                    acc = iv.mul_add(wv, acc);
                                }
                            }
                        }
                        let oi = out.idx(n, co, y, x);
                        out.data_mut()[oi] = acc;
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to its input and weight.
///
/// `grad_out` must have the exact output shape of the matching forward call.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = conv_geometry(input, weight, stride, padding, groups)?;
    if grad_out.shape() != [g.n, g.c_out, g.h_out, g.w_out] {
        return Err(Error::Data(format!(
            "conv2d_backward: upstream gradient shape {:?} does not match output shape {:?}",
            grad_out.shape(),
            [g.n, g.c_out, g.h_out, g.w_out]
        )));
    }
    let mut gin = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());

    if g.kh == 1 && g.kw == 1 && stride == 1 && padding == 0 && groups == 1 {
        pointwise_backward(input, weight, grad_out, &g, &mut gin, &mut gw);
    } else if groups == g.c_in && g.c_out == g.c_in {
        depthwise_backward(input, weight, grad_out, stride, padding, &g, &mut gin, &mut gw);
    } else {
        general_conv_backward(input, weight, grad_out, stride, padding, groups, &g, &mut gin, &mut gw);
    }
    gin.debug_check_finite("conv2d_backward (input gradient)");
    gw.debug_check_finite("conv2d_backward (weight gradient)");
    Ok((gin, gw))
}

fn pointwise_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeom,
    gin: &mut Tensor<T>,
    gw: &mut Tensor<T>,
) {
    let hw = g.h_in * g.w_in;
    for n in 0..g.n {
        let ibase = n * g.c_in * hw;
        let obase = n * g.c_out * hw;
        for co in 0..g.c_out {
            let gorow = &grad_out.data()[obase + co * hw..obase + (co + 1) * hw];
            for ci in 0..g.c_in {
                let k = weight.data()[co * g.c_in + ci];
                // d input: scatter the upstream gradient through the weight.
                let girow = &mut gin.data_mut()[ibase + ci * hw..ibase + (ci + 1) * hw];
                let mut dot = T::zero();
                let irow = &input.data()[ibase + ci * hw..ibase + (ci + 1) * hw];
                for ((gi, &go), &iv) in girow.iter_mut().zip(gorow).zip(irow) {
                    *gi = go.mul_add(k, *gi);
                    dot = go.mul_add(iv, dot);
                }
                gw.data_mut()[co * g.c_in + ci] = gw.data()[co * g.c_in + ci] + dot;
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    g: &ConvGeom,
    gin: &mut Tensor<T>,
    gw: &mut Tensor<T>,
) {
    let (ih, iw, oh, ow) = (g.h_in as isize, g.w_in as isize, g.h_out, g.w_out);
    let s = stride as isize;
    let p = padding as isize;
    for n in 0..g.n {
        for c in 0..g.c_in {
            let ibase = (n * g.c_in + c) * g.h_in * g.w_in;
            let obase = (n * g.c_out + c) * oh * ow;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = (c * g.kh + ky) * g.kw + kx;
                    let k = weight.data()[widx];
                    let mut kacc = T::zero();
                    for y in 0..oh {
                        let sy = y as isize * s + ky as isize - p;
                        if sy < 0 || sy >= ih {
                            continue;
                        }
                        let off = kx as isize - p;
                        let x_lo = ((-off + s - 1).max(0) / s) as usize;
                        let x_hi = (((iw - off - 1) / s) + 1).clamp(0, ow as isize) as usize;
                        if x_lo >= x_hi {
                            continue;
                        }
                        let irow = ibase + sy as usize * g.w_in;
                        let orow = obase + y * ow;
                        if s == 1 {
                            let i0 = (irow as isize + off + x_lo as isize) as usize;
                            let gos = &grad_out.data()[orow + x_lo..orow + x_hi];
                            let ins = &input.data()[i0..i0 + (x_hi - x_lo)];
                            let gis = &mut gin.data_mut()[i0..i0 + (x_hi - x_lo)];
                            for ((gi, &go), &iv) in gis.iter_mut().zip(gos).zip(ins) {
                                *gi = go.mul_add(k, *gi);
                                kacc = go.mul_add(iv, kacc);
                            }
                        } else {
                            for x in x_lo..x_hi {
                                let sx = (x as isize * s + off) as usize;
                                let go = grad_out.data()[orow + x];
                                let gi = &mut gin.data_mut()[irow + sx];
                                *gi = go.mul_add(k, *gi);
                                kacc = go.mul_add(input.data()[irow + sx], kacc);
                            }
                        }
                    }
                    gw.data_mut()[widx] = gw.data()[widx] + kacc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn general_conv_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
    g: &ConvGeom,
    gin: &mut Tensor<T>,
    gw: &mut Tensor<T>,
) {
    for n in 0..g.n {
        for grp in 0..groups {
            for co_g in 0..g.cout_per_g {
                let co = grp * g.cout_per_g + co_g;
                for y in 0..g.h_out {
                    for x in 0..g.w_out {
                        let go = grad_out.at(n, co, y, x);
                        if go == T::zero() {
                            continue;
                        }
                        for ci_g in 0..g.cin_per_g {
                            let ci = grp * g.cin_per_g + ci_g;
                            for ky in 0..g.kh {
                                let sy = (y * stride + ky) as isize - padding as isize;
                                if sy < 0 || sy >= g.h_in as isize {
                                    continue;
                                }
                                for kx in 0..g.kw {
                                    let sx = (x * stride + kx) as isize - padding as isize;
                                    if sx < 0 || sx >= g.w_in as isize {
                                        continue;
                                    }
                                    let widx = ((co * g.cin_per_g + ci_g) * g.kh + ky) * g.kw + kx;
                                    let iidx = input.idx(n, ci, sy as usize, sx as usize);
                                    gin.data_mut()[iidx] =
                                        go.mul_add(weight.data()[widx], gin.data()[iidx]);
                                    gw.data_mut()[widx] =
                                        go.mul_add(input.data()[iidx], gw.data()[widx]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

/// Indices recorded by [`max_pool2d`] so the backward pass can route gradients
/// to the winning input positions.
#[derive(Clone, Debug)]
pub struct PoolCache {
    in_shape: [usize; 4],
    /// Flat input index of the window maximum, one per output element.
    argmax: Vec<u32>,
}

/// 2-D max pooling. The architecture only ever pools with `k == s == 2`, and
/// window extents must tile the input exactly (`(H - k) % s == 0`); odd
/// extents with the default 2/2 configuration are therefore an error.
/// Ties inside a window resolve to the first maximum in row-major order.
pub fn max_pool2d<T: Scalar>(input: &Tensor<T>, k: usize, s: usize) -> Result<(Tensor<T>, PoolCache)> {
    let [n, c, h, w] = input.shape();
    if k == 0 || s == 0 {
        return Err(Error::Config("max_pool2d: kernel and stride must be >= 1".into()));
    }
    if h < k || w < k || !(h - k).is_multiple_of(s) || !(w - k).is_multiple_of(s) {
        return Err(Error::Data(format!(
            "max_pool2d: extents {h}x{w} are not tiled exactly by kernel {k} stride {s}"
        )));
    }
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let idat = input.data();
    for nc in 0..n * c {
        let ibase = nc * h * w;
        let obase = nc * oh * ow;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for ky in 0..k {
                    let row = ibase + (y * s + ky) * w + x * s;
                    for kx in 0..k {
                        let v = idat[row + kx];
                        if v > best {
                            best = v;
                            best_i = row + kx;
                        }
                    }
                }
                out.data_mut()[obase + y * ow + x] = best;
                argmax[obase + y * ow + x] = best_i as u32;
            }
        }
    }
    out.debug_check_finite("max_pool2d");
    Ok((out, PoolCache { in_shape: input.shape(), argmax }))
}

/// Route the upstream gradient to the recorded argmax positions.
pub fn max_pool2d_backward<T: Scalar>(cache: &PoolCache, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != cache.argmax.len() {
        return Err(Error::Data(format!(
            "max_pool2d_backward: upstream gradient has {} elements, pooling produced {}",
            grad_out.len(),
            cache.argmax.len()
        )));
    }
    let mut gin = Tensor::zeros(cache.in_shape);
    let gdat = gin.data_mut();
    for (&src, &go) in cache.argmax.iter().zip(grad_out.data()) {
        gdat[src as usize] = gdat[src as usize] + go;
    }
    Ok(gin)
}

// ---------------------------------------------------------------------------
// Bilinear upsampling
// ---------------------------------------------------------------------------

/// Per-axis interpolation plan: source indices and fractional weight.
fn bilinear_axis<T: Scalar>(in_len: usize, out_len: usize) -> Vec<(usize, usize, T)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            // Half-pixel centers (align_corners = false), clamped at borders.
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            (i0, i1, lit::<T>(frac.clamp(0.0, 1.0)))
        })
        .collect()
}

/// Bilinear upsampling to `(out_h, out_w)` using half-pixel source centers
/// (`align_corners = false`) with border clamping. Sampling an axis at its own
/// size is the identity.
pub fn bilinear_upsample<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("bilinear_upsample: output extents must be >= 1".into()));
    }
    let ys = bilinear_axis::<T>(h, out_h);
    let xs = bilinear_axis::<T>(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for nc in 0..n * c {
        let ibase = nc * h * w;
        let obase = nc * out_h * out_w;
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let r0 = ibase + y0 * w;
            let r1 = ibase + y1 * w;
            let orow = obase + oy * out_w;
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let one = T::one();
                let top = input.data()[r0 + x0] * (one - wx) + input.data()[r0 + x1] * wx;
                let bot = input.data()[r1 + x0] * (one - wx) + input.data()[r1 + x1] * wx;
                out.data_mut()[orow + ox] = top * (one - wy) + bot * wy;
            }
        }
    }
    out.debug_check_finite("bilinear_upsample");
    Ok(out)
}

/// Distribute the upstream gradient back through the interpolation weights of
/// a forward [`bilinear_upsample`] from `(in_h, in_w)`.
pub fn bilinear_upsample_backward<T: Scalar>(
    in_h: usize,
    in_w: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = grad_out.shape();
    let ys = bilinear_axis::<T>(in_h, oh);
    let xs = bilinear_axis::<T>(in_w, ow);
    let mut gin = Tensor::zeros([n, c, in_h, in_w]);
    for nc in 0..n * c {
        let ibase = nc * in_h * in_w;
        let obase = nc * oh * ow;
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let r0 = ibase + y0 * in_w;
            let r1 = ibase + y1 * in_w;
            let orow = obase + oy * ow;
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let one = T::one();
                let go = grad_out.data()[orow + ox];
                let g = gin.data_mut();
                g[r0 + x0] = g[r0 + x0] + go * (one - wy) * (one - wx);
                g[r0 + x1] = g[r0 + x1] + go * (one - wy) * wx;
                g[r1 + x0] = g[r1 + x0] + go * wy * (one - wx);
                g[r1 + x1] = g[r1 + x1] + go * wy * wx;
            }
        }
    }
    Ok(gin)
}

// ---------------------------------------------------------------------------
// Elementwise maps and reductions
// ---------------------------------------------------------------------------

/// `max(x, 0)` elementwise.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of [`relu`] given the forward *output*: the derivative at exactly
/// zero is taken as zero, so `y > 0` is the pass-through mask.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(output, grad_out, "relu_backward")?;
    let mut g = Tensor::zeros(output.shape());
    for ((gi, &y), &go) in g.data_mut().iter_mut().zip(output.data()).zip(grad_out.data()) {
        *gi = if y > T::zero() { go } else { T::zero() };
    }
    Ok(g)
}

/// Logistic sigmoid elementwise.
pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Backward of [`sigmoid`] given the forward output: `dy * y * (1 - y)`.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(output, grad_out, "sigmoid_backward")?;
    let mut g = Tensor::zeros(output.shape());
    for ((gi, &y), &go) in g.data_mut().iter_mut().zip(output.data()).zip(grad_out.data()) {
        *gi = go * y * (T::one() - y);
    }
    Ok(g)
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o + bv;
    }
    Ok(out)
}

/// Elementwise product of two same-shape tensors.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o * bv;
    }
    Ok(out)
}

/// Multiply every `(n, c)` plane of `x` by the scalar `s[n, c, 0, 0]`.
pub fn scale_by_channel<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if s.shape() != [n, c, 1, 1] {
        return Err(Error::Data(format!(
            "scale_by_channel: scale shape {:?} must be [{n}, {c}, 1, 1]",
            s.shape()
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    let hw = h * w;
    for nc in 0..n * c {
        let f = s.data()[nc];
        let src = &x.data()[nc * hw..(nc + 1) * hw];
        let dst = &mut out.data_mut()[nc * hw..(nc + 1) * hw];
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = v * f;
        }
    }
    Ok(out)
}

/// Backward of [`scale_by_channel`]: gradients for both the scaled tensor and
/// the per-channel factors.
pub fn scale_by_channel_backward<T: Scalar>(
    x: &Tensor<T>,
    s: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    same_shape(x, grad_out, "scale_by_channel_backward")?;
    let [n, c, h, w] = x.shape();
    if s.shape() != [n, c, 1, 1] {
        return Err(Error::Data(format!(
            "scale_by_channel_backward: scale shape {:?} must be [{n}, {c}, 1, 1]",
            s.shape()
        )));
    }
    let mut gx = Tensor::zeros(x.shape());
    let mut gs = Tensor::zeros(s.shape());
    let hw = h * w;
    for nc in 0..n * c {
        let f = s.data()[nc];
        let xs = &x.data()[nc * hw..(nc + 1) * hw];
        let gos = &grad_out.data()[nc * hw..(nc + 1) * hw];
        let gxs = &mut gx.data_mut()[nc * hw..(nc + 1) * hw];
        let mut acc = T::zero();
        for ((gxi, &go), &xv) in gxs.iter_mut().zip(gos).zip(xs) {
            *gxi = go * f;
            acc = go.mul_add(xv, acc);
        }
        gs.data_mut()[nc] = acc;
    }
    Ok((gx, gs))
}

/// Mean over the spatial extent of every `(n, c)` plane: `N x C x H x W`
/// becomes `N x C x 1 x 1`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let inv = T::one() / lit::<T>(hw as f64);
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for nc in 0..n * c {
        let mut acc = T::zero();
        for &v in &x.data()[nc * hw..(nc + 1) * hw] {
            acc = acc + v;
        }
        out.data_mut()[nc] = acc * inv;
    }
    out
}

/// Backward of [`global_avg_pool`]: spread each channel gradient uniformly.
pub fn global_avg_pool_backward<T: Scalar>(
    in_shape: [usize; 4],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = in_shape;
    if grad_out.shape() != [n, c, 1, 1] {
        return Err(Error::Data(format!(
            "global_avg_pool_backward: upstream gradient shape {:?} must be [{n}, {c}, 1, 1]",
            grad_out.shape()
        )));
    }
    let inv = T::one() / lit::<T>((h * w) as f64);
    let mut gin = Tensor::zeros(in_shape);
    let hw = h * w;
    for nc in 0..n * c {
        let g = grad_out.data()[nc] * inv;
        for v in &mut gin.data_mut()[nc * hw..(nc + 1) * hw] {
            *v = g;
        }
    }
    Ok(gin)
}

/// Concatenate tensors along the channel axis; batch and spatial extents must
/// agree.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Data("concat_channels: need at least one tensor".into()))?;
    let [n, _, h, w] = first.shape();
    let mut c_total = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.shape();
        if pn != n || ph != h || pw != w {
            return Err(Error::Data(format!(
                "concat_channels: shape {:?} incompatible with {:?} (batch/spatial extents must match)",
                p.shape(),
                first.shape()
            )));
        }
        c_total += pc;
    }
    let mut out = Tensor::zeros([n, c_total, h, w]);
    let hw = h * w;
    for ni in 0..n {
        let mut c_off = 0;
        for p in parts {
            let pc = p.c();
            let src = &p.data()[ni * pc * hw..(ni + 1) * pc * hw];
            let dst_start = (ni * c_total + c_off) * hw;
            out.data_mut()[dst_start..dst_start + pc * hw].copy_from_slice(src);
            c_off += pc;
        }
    }
    Ok(out)
}

/// Copy out the channel range `[from, from + count)` of `x`; the backward
/// counterpart of [`concat_channels`].
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, from: usize, count: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if from + count > c {
        return Err(Error::Data(format!(
            "slice_channels: range {from}..{} exceeds {c} channels",
            from + count
        )));
    }
    let hw = h * w;
    let mut out = Tensor::zeros([n, count, h, w]);
    for ni in 0..n {
        let src_start = (ni * c + from) * hw;
        let dst_start = ni * count * hw;
        out.data_mut()[dst_start..dst_start + count * hw]
            .copy_from_slice(&x.data()[src_start..src_start + count * hw]);
    }
    Ok(out)
}
