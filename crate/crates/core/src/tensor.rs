//! Dense NCHW tensors and the handful of primitives the filter network is
//! built from.
//!
//! Every differentiable primitive has a matching `*_backward` that maps an
//! upstream gradient back onto its inputs. Backward passes recompute whatever
//! they need from the forward inputs, so they are free functions of
//! `(inputs, grad_out)` and can be checked one by one against finite
//! differences.

use std::fmt;

use crate::error::{Error, Result};

/// Dense 4-D array in row-major `(n, c, h, w)` order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn fmt_shape(s: [usize; 4]) -> String {
    format!("({}, {}, {}, {})", s[0], s[1], s[2], s[3])
}

impl Tensor {
    /// All-zero tensor. Panics if any dimension is zero.
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        assert!(
            shape.iter().all(|&d| d >= 1),
            "tensor dimensions must be positive, got {}",
            fmt_shape(shape)
        );
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("zero-sized dimension in {}", fmt_shape(shape)),
            ));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {} needs {} samples, got {}",
                    fmt_shape(shape),
                    len,
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    /// One `h × w` channel plane.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape("add_assign", self, other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(
            op,
            format!(
                "operand shapes differ: {} vs {}",
                fmt_shape(a.shape),
                fmt_shape(b.shape)
            ),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Convolution weights `(out, in, kh, kw)` with optional per-output bias,
/// stride and symmetric zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub weights: Tensor,
    /// Shape `(out, 1, 1, 1)` when present.
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvKernel {
    /// Zero-initialised kernel.
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        ConvKernel {
            weights: Tensor::zeros([out_channels, in_channels, kernel, kernel]),
            bias: bias.then(|| Tensor::zeros([out_channels, 1, 1, 1])),
            stride,
            padding,
        }
    }

    /// 3×3, stride 1, "same" padding.
    pub fn same3(out_channels: usize, in_channels: usize, bias: bool) -> Self {
        Self::zeros(out_channels, in_channels, 3, 1, 1, bias)
    }

    /// 1×1 pointwise kernel.
    pub fn pointwise(out_channels: usize, in_channels: usize, bias: bool) -> Self {
        Self::zeros(out_channels, in_channels, 1, 1, 0, bias)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weights.shape[1]
    }

    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }
    pub fn bias_count(&self) -> usize {
        self.bias.as_ref().map_or(0, Tensor::len)
    }

    /// Output spatial size for an `h × w` input.
    ///
    /// Trailing positions a strided kernel cannot reach are accepted only when
    /// they lie entirely inside the zero padding; dropping real samples is an
    /// error.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let [_, _, kh, kw] = self.weights.shape;
        let axis = |len: usize, k: usize, name: &str| -> Result<usize> {
            if self.padding >= k {
                return Err(Error::shape(
                    "conv2d",
                    format!("padding {} must be smaller than kernel {k}", self.padding),
                ));
            }
            let span = len + 2 * self.padding;
            if span < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {k} larger than padded {name} {span}"),
                ));
            }
            let rem = (span - k) % self.stride;
            if rem > self.padding {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "non-integral output {name}: ({len} + 2*{} - {k}) / {} leaves {rem} unvisited input samples",
                        self.padding, self.stride
                    ),
                ));
            }
            Ok((span - k) / self.stride + 1)
        };
        Ok((axis(h, kh, "height")?, axis(w, kw, "width")?))
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        if x.c() != self.in_channels() {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {} has {} channels but kernel {} expects {}",
                    fmt_shape(x.shape),
                    x.c(),
                    fmt_shape(self.weights.shape),
                    self.in_channels()
                ),
            ));
        }
        self.output_size(x.h(), x.w())
    }
}

/// Copies one batch item into planes of size `(h + 2·pad) × (w + 2·pad)`
/// with a zero border.
fn padded_planes(planes: &[f64], c: usize, h: usize, w: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let src = &planes[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = (ch * hp + y + pad) * wp + pad;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    (out, hp, wp)
}

/// Sizes of one correlation over padded planes.
#[derive(Clone, Copy)]
struct Geom {
    /// Input channels and padded plane size.
    c: usize,
    hp: usize,
    wp: usize,
    /// Output channels, kernel size and stride.
    o: usize,
    kh: usize,
    kw: usize,
    s: usize,
    oh: usize,
    ow: usize,
}

/// Accumulates `N` adjacent outputs of one row, starting at `acc`'s contents.
#[inline(always)]
fn accumulate_run<const N: usize>(acc: &mut [f64; N], xp: &[f64], wo: &[f64], g: &Geom, oy: usize, x0: usize) {
    let ksize = g.kh * g.kw;
    for ic in 0..g.c {
        let plane = &xp[ic * g.hp * g.wp..(ic + 1) * g.hp * g.wp];
        let wk = &wo[ic * ksize..(ic + 1) * ksize];
        for ky in 0..g.kh {
            let row = &plane[(oy * g.s + ky) * g.wp..(oy * g.s + ky + 1) * g.wp];
            for kx in 0..g.kw {
                let wv = wk[ky * g.kw + kx];
                if g.s == 1 {
                    let src: &[f64; N] = row[x0 + kx..x0 + kx + N].try_into().unwrap();
                    for j in 0..N {
                        acc[j] += wv * src[j];
                    }
                } else {
                    for j in 0..N {
                        acc[j] += wv * row[(x0 + j) * g.s + kx];
                    }
                }
            }
        }
    }
}

/// Unpadded strided correlation of already padded planes `xp` into `out`
/// (`o × oh × ow`).
///
/// Each output sample starts at its bias and accumulates input channels,
/// then kernel rows, then kernel columns; zero padding contributes exact
/// zeros, so the result matches a loop that skips padded taps.
#[inline(always)]
fn correlate_impl(xp: &[f64], weights: &[f64], bias: Option<&[f64]>, g: &Geom, out: &mut [f64]) {
    let per_out = g.c * g.kh * g.kw;
    for oc in 0..g.o {
        let b = bias.map_or(0.0, |v| v[oc]);
        let wo = &weights[oc * per_out..(oc + 1) * per_out];
        for oy in 0..g.oh {
            let orow = &mut out[(oc * g.oh + oy) * g.ow..(oc * g.oh + oy + 1) * g.ow];
            let mut x0 = 0;
            while x0 < g.ow {
                let left = g.ow - x0;
                if left >= 32 {
                    let mut acc = [b; 32];
                    accumulate_run(&mut acc, xp, wo, g, oy, x0);
                    orow[x0..x0 + 32].copy_from_slice(&acc);
                    x0 += 32;
                } else if left >= 8 {
                    let mut acc = [b; 8];
                    accumulate_run(&mut acc, xp, wo, g, oy, x0);
                    orow[x0..x0 + 8].copy_from_slice(&acc);
                    x0 += 8;
                } else {
                    let mut acc = [b; 1];
                    accumulate_run(&mut acc, xp, wo, g, oy, x0);
                    orow[x0] = acc[0];
                    x0 += 1;
                }
            }
        }
    }
}

/// Weight gradient `Σ grad_out · input` for one batch item, accumulated into
/// `gw` (`o × c × kh × kw`). Row products are summed in 16 interleaved
/// partial sums.
#[inline(always)]
fn weight_grad_impl(xp: &[f64], grad_out: &[f64], g: &Geom, gw: &mut [f64]) {
    const L: usize = 16;
    let ksize = g.kh * g.kw;
    for oc in 0..g.o {
        let go = &grad_out[oc * g.oh * g.ow..(oc + 1) * g.oh * g.ow];
        for ic in 0..g.c {
            let plane = &xp[ic * g.hp * g.wp..(ic + 1) * g.hp * g.wp];
            let dst = &mut gw[(oc * g.c + ic) * ksize..(oc * g.c + ic + 1) * ksize];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let mut acc = [0.0; L];
                    let mut tail = 0.0;
                    for oy in 0..g.oh {
                        let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                        let row = &plane[(oy * g.s + ky) * g.wp..(oy * g.s + ky + 1) * g.wp];
                        if g.s == 1 {
                            let row = &row[kx..kx + g.ow];
                            let mut gc = grow.chunks_exact(L);
                            let mut rc = row.chunks_exact(L);
                            for (a, b) in (&mut gc).zip(&mut rc) {
                                for j in 0..L {
                                    acc[j] += a[j] * b[j];
                                }
                            }
                            for (a, b) in gc.remainder().iter().zip(rc.remainder()) {
                                tail += a * b;
                            }
                        } else {
                            for (ox, a) in grow.iter().enumerate() {
                                tail += a * row[ox * g.s + kx];
                            }
                        }
                    }
                    dst[ky * g.kw + kx] += acc.iter().sum::<f64>() + tail;
                }
            }
        }
    }
}

/// Generates a runtime dispatcher that runs `$imp` compiled with AVX2 when
/// the CPU supports it. Only plain multiplies and adds are used, so results
/// are identical on every path.
macro_rules! avx2_dispatch {
    ($name:ident, $wide:ident, $imp:ident, ($($arg:ident: $ty:ty),*)) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $wide($($arg: $ty),*) {
            $imp($($arg),*)
        }

        fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the required CPU feature was detected at runtime.
                return unsafe { $wide($($arg),*) };
            }
            $imp($($arg),*)
        }
    };
}

avx2_dispatch!(correlate, correlate_avx2, correlate_impl,
    (xp: &[f64], weights: &[f64], bias: Option<&[f64]>, g: &Geom, out: &mut [f64]));
avx2_dispatch!(weight_grad, weight_grad_avx2, weight_grad_impl,
    (xp: &[f64], grad_out: &[f64], g: &Geom, gw: &mut [f64]));

/// 2-D cross-correlation with zero padding.
///
/// Each output sample starts at its bias and accumulates input channels,
/// then kernel rows, then kernel columns, in that order.
pub fn conv2d(x: &Tensor, k: &ConvKernel) -> Result<Tensor> {
    let (oh, ow) = k.check_input(x)?;
    let [n, c, h, w] = x.shape;
    let [o, _, kh, kw] = k.weights.shape;
    let mut out = Tensor::zeros([n, o, oh, ow]);
    let bias = k.bias.as_ref().map(|t| t.data.as_slice());
    for b in 0..n {
        let item = &x.data[b * c * h * w..(b + 1) * c * h * w];
        let (xp, hp, wp) = padded_planes(item, c, h, w, k.padding);
        let g = Geom { c, hp, wp, o, kh, kw, s: k.stride, oh, ow };
        correlate(&xp, &k.weights.data, bias, &g, &mut out.data[b * o * oh * ow..(b + 1) * o * oh * ow]);
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub grad_x: Tensor,
    pub grad_weights: Tensor,
    pub grad_bias: Option<Tensor>,
}

pub fn conv2d_backward(x: &Tensor, k: &ConvKernel, grad_out: &Tensor) -> Result<ConvGrads> {
    let (oh, ow) = k.check_input(x)?;
    let [n, c, h, w] = x.shape;
    let [o, _, kh, kw] = k.weights.shape;
    if grad_out.shape != [n, o, oh, ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out {} does not match conv output {}",
                fmt_shape(grad_out.shape),
                fmt_shape([n, o, oh, ow])
            ),
        ));
    }
    let (s, p) = (k.stride, k.padding);
    let ksize = kh * kw;

    // The input gradient is a stride-1 correlation of the zero-dilated,
    // zero-padded output gradient with the flipped, transposed kernel.
    let mut flipped = vec![0.0; c * o * ksize];
    for oc in 0..o {
        for ic in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    flipped[(ic * o + oc) * ksize + (kh - 1 - ky) * kw + (kw - 1 - kx)] =
                        k.weights.data[(oc * c + ic) * ksize + ky * kw + kx];
                }
            }
        }
    }
    let (eh, ew) = (h + kh - 1, w + kw - 1);
    let (ty, tx) = (kh - 1 - p, kw - 1 - p);

    let mut grad_x = Tensor::zeros(x.shape);
    let mut grad_w = Tensor::zeros(k.weights.shape);
    for b in 0..n {
        let go = &grad_out.data[b * o * oh * ow..(b + 1) * o * oh * ow];
        let item = &x.data[b * c * h * w..(b + 1) * c * h * w];
        let (xp, hp, wp) = padded_planes(item, c, h, w, p);
        let g = Geom { c, hp, wp, o, kh, kw, s, oh, ow };
        weight_grad(&xp, go, &g, &mut grad_w.data);

        let mut e = vec![0.0; o * eh * ew];
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    e[(oc * eh + ty + oy * s) * ew + tx + ox * s] = go[(oc * oh + oy) * ow + ox];
                }
            }
        }
        let dst = &mut grad_x.data[b * c * h * w..(b + 1) * c * h * w];
        let g = Geom { c: o, hp: eh, wp: ew, o: c, kh, kw, s: 1, oh: h, ow: w };
        correlate(&e, &flipped, None, &g, dst);
    }
    let grad_bias = k.bias.as_ref().map(|_| {
        let mut gb = Tensor::zeros([o, 1, 1, 1]);
        for b in 0..n {
            for oc in 0..o {
                gb.data[oc] += grad_out.plane(b, oc).iter().sum::<f64>();
            }
        }
        gb
    });
    Ok(ConvGrads {
        grad_x,
        grad_weights: grad_w,
        grad_bias,
    })
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Depth-to-space: `(n, c·r², h, w) → (n, c, h·r, w·r)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{} channels not divisible by r²={}", c, r * r),
        ));
    }
    let oc = c / (r * r);
    let mut out = Tensor::zeros([n, oc, h * r, w * r]);
    let ow = w * r;
    for b in 0..n {
        for ch in 0..oc {
            for dy in 0..r {
                for dx in 0..r {
                    let src = x.plane(b, ch * r * r + dy * r + dx);
                    let base = (b * oc + ch) * h * r * ow;
                    for yy in 0..h {
                        let row = base + (yy * r + dy) * ow + dx;
                        for xx in 0..w {
                            out.data[row + xx * r] = src[yy * w + xx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Space-to-depth, the exact inverse of [`pixel_shuffle`].
pub fn space_to_depth(x: &Tensor, r: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape(
            "space_to_depth",
            format!("spatial size {h}×{w} not divisible by r={r}"),
        ));
    }
    let (oh, ow) = (h / r, w / r);
    let mut out = Tensor::zeros([n, c * r * r, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            for dy in 0..r {
                for dx in 0..r {
                    let dst = out.plane_mut(b, ch * r * r + dy * r + dx);
                    for yy in 0..oh {
                        for xx in 0..ow {
                            dst[yy * ow + xx] = src[(yy * r + dy) * w + xx * r + dx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The gradient of a pixel shuffle is the inverse permutation.
pub fn pixel_shuffle_backward(grad_out: &Tensor, r: usize) -> Result<Tensor> {
    space_to_depth(grad_out, r)
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

fn pool_dims(x: &Tensor, k: usize, stride: usize) -> Result<(usize, usize)> {
    let (h, w) = (x.h(), x.w());
    if k == 0 || stride == 0 || h < k || w < k {
        return Err(Error::shape(
            "max_pool2d",
            format!("window {k}×{k} larger than input {h}×{w}"),
        ));
    }
    if !(h - k).is_multiple_of(stride) || !(w - k).is_multiple_of(stride) {
        return Err(Error::shape(
            "max_pool2d",
            format!("input {h}×{w} not tiled by window {k} at stride {stride}"),
        ));
    }
    Ok(((h - k) / stride + 1, (w - k) / stride + 1))
}

/// Index (within the plane) of the first maximum of each pooling window.
fn pool_argmax(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (oh, ow) = pool_dims(x, k, stride)?;
    let [n, c, _, w] = x.shape;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(out.len());
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = (oy * stride + dy) * w + ox * stride + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    dst[oy * ow + ox] = src[best];
                    arg.push(best);
                }
            }
        }
    }
    Ok((out, arg))
}

/// Spatial max pooling. Inputs the window grid does not tile exactly are rejected.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    pool_argmax(x, k, stride).map(|(t, _)| t)
}

/// Routes each upstream gradient to the first maximum of its window.
pub fn max_pool2d_backward(x: &Tensor, k: usize, stride: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (out, arg) = pool_argmax(x, k, stride)?;
    same_shape("max_pool2d_backward", &out, grad_out)?;
    let mut gx = Tensor::zeros(x.shape);
    let plane_out = out.h() * out.w();
    for (j, &i) in arg.iter().enumerate() {
        let nc = j / plane_out;
        let hw = x.h() * x.w();
        gx.data[nc * hw + i] += grad_out.data[j];
    }
    Ok(gx)
}

/// Per-channel spatial mean, shape `(n, c, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape;
    let area = (h * w) as f64;
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            out.data[b * c + ch] = x.plane(b, ch).iter().sum::<f64>() / area;
        }
    }
    out
}

pub fn global_avg_pool_backward(input_shape: [usize; 4], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape;
    if grad_out.shape != [n, c, 1, 1] {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("grad_out {} for input {}", fmt_shape(grad_out.shape), fmt_shape(input_shape)),
        ));
    }
    let area = (h * w) as f64;
    let mut gx = Tensor::zeros(input_shape);
    for b in 0..n {
        for ch in 0..c {
            let g = grad_out.data[b * c + ch] / area;
            gx.plane_mut(b, ch).fill(g);
        }
    }
    Ok(gx)
}

/// Per-channel spatial max, shape `(n, c, 1, 1)`.
pub fn global_max_pool(x: &Tensor) -> Tensor {
    let [n, c, _, _] = x.shape;
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            out.data[b * c + ch] = x.plane(b, ch).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    out
}

pub fn global_max_pool_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, _, _] = x.shape;
    if grad_out.shape != [n, c, 1, 1] {
        return Err(Error::shape(
            "global_max_pool_backward",
            format!("grad_out {} for input {}", fmt_shape(grad_out.shape), fmt_shape(x.shape)),
        ));
    }
    let mut gx = Tensor::zeros(x.shape);
    for b in 0..n {
        for ch in 0..c {
            let p = x.plane(b, ch);
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            gx.plane_mut(b, ch)[best] = grad_out.data[b * c + ch];
        }
    }
    Ok(gx)
}

/// Mean across channels at every position, shape `(n, 1, h, w)`.
pub fn channel_mean(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape;
    let mut out = Tensor::zeros([n, 1, h, w]);
    for b in 0..n {
        let dst = out.plane_mut(b, 0);
        for ch in 0..c {
            for (d, s) in dst.iter_mut().zip(x.plane(b, ch)) {
                *d += s;
            }
        }
        dst.iter_mut().for_each(|v| *v /= c as f64);
    }
    out
}

pub fn channel_mean_backward(input_shape: [usize; 4], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape;
    if grad_out.shape != [n, 1, h, w] {
        return Err(Error::shape(
            "channel_mean_backward",
            format!("grad_out {} for input {}", fmt_shape(grad_out.shape), fmt_shape(input_shape)),
        ));
    }
    let mut gx = Tensor::zeros(input_shape);
    for b in 0..n {
        let g = grad_out.plane(b, 0);
        for ch in 0..c {
            for (d, s) in gx.plane_mut(b, ch).iter_mut().zip(g) {
                *d = s / c as f64;
            }
        }
    }
    Ok(gx)
}

fn channel_argmax(x: &Tensor) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = x.shape;
    let mut out = Tensor::zeros([n, 1, h, w]);
    let mut arg = vec![0usize; n * h * w];
    for b in 0..n {
        let dst = out.plane_mut(b, 0);
        dst.copy_from_slice(x.plane(b, 0));
        let a = &mut arg[b * h * w..(b + 1) * h * w];
        for ch in 1..c {
            for ((d, s), ai) in dst.iter_mut().zip(x.plane(b, ch)).zip(a.iter_mut()) {
                if *s > *d {
                    *d = *s;
                    *ai = ch;
                }
            }
        }
    }
    (out, arg)
}

/// Max across channels at every position, shape `(n, 1, h, w)`.
pub fn channel_max(x: &Tensor) -> Tensor {
    channel_argmax(x).0
}

pub fn channel_max_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let [n, _, h, w] = x.shape;
    if grad_out.shape != [n, 1, h, w] {
        return Err(Error::shape(
            "channel_max_backward",
            format!("grad_out {} for input {}", fmt_shape(grad_out.shape), fmt_shape(x.shape)),
        ));
    }
    let (_, arg) = channel_argmax(x);
    let mut gx = Tensor::zeros(x.shape);
    let hw = h * w;
    for b in 0..n {
        let g = grad_out.plane(b, 0);
        for i in 0..hw {
            let ch = arg[b * hw + i];
            gx.plane_mut(b, ch)[i] = g[i];
        }
    }
    Ok(gx)
}

/// Stacks tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no operands"))?;
    let [n, _, h, w] = first.shape;
    for p in parts {
        if p.n() != n || p.h() != h || p.w() != w {
            return Err(Error::shape(
                "concat_channels",
                format!("operand shapes differ: {} vs {}", fmt_shape(first.shape), fmt_shape(p.shape)),
            ));
        }
    }
    let c: usize = parts.iter().map(|p| p.c()).sum();
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        let mut ch = 0;
        for p in parts {
            for pc in 0..p.c() {
                out.plane_mut(b, ch).copy_from_slice(p.plane(b, pc));
                ch += 1;
            }
        }
    }
    Ok(out)
}

/// Splits along the channel axis into pieces of the given channel counts.
pub fn split_channels(x: &Tensor, counts: &[usize]) -> Result<Vec<Tensor>> {
    if counts.iter().sum::<usize>() != x.c() || counts.contains(&0) {
        return Err(Error::shape(
            "split_channels",
            format!("cannot split {} into {:?}", fmt_shape(x.shape), counts),
        ));
    }
    let [n, _, h, w] = x.shape;
    let mut out = Vec::with_capacity(counts.len());
    let mut start = 0;
    for &cnt in counts {
        let mut t = Tensor::zeros([n, cnt, h, w]);
        for b in 0..n {
            for pc in 0..cnt {
                t.plane_mut(b, pc).copy_from_slice(x.plane(b, start + pc));
            }
        }
        start += cnt;
        out.push(t);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

/// Logistic function, saturating at the representable values nearest to 0
/// and 1 so outputs stay strictly inside `(0, 1)`.
pub fn sigmoid(x: &Tensor) -> Tensor {
    const HI: f64 = 1.0 - f64::EPSILON / 2.0;
    x.map(|v| {
        let s = if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        };
        s.clamp(f64::MIN_POSITIVE, HI)
    })
}

/// Backward of [`sigmoid`] given its output `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape("sigmoid_backward", y, grad_out)?;
    Ok(Tensor {
        shape: y.shape,
        data: y
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(s, g)| g * s * (1.0 - s))
            .collect(),
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Backward of [`relu`] given its input `x`; the subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape("relu_backward", x, grad_out)?;
    Ok(Tensor {
        shape: x.shape,
        data: x
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
            .collect(),
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

/// Returns `(grad_a, grad_b)` of `a ⊙ b`.
pub fn mul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    same_shape("mul_backward", a, b)?;
    same_shape("mul_backward", a, grad_out)?;
    Ok((mul(b, grad_out)?, mul(a, grad_out)?))
}

fn check_spatial_mask(op: &'static str, features: &Tensor, mask: &Tensor) -> Result<()> {
    let [n, _, h, w] = features.shape;
    if mask.shape != [n, 1, h, w] {
        return Err(Error::shape(
            op,
            format!(
                "mask {} cannot broadcast over features {}",
                fmt_shape(mask.shape),
                fmt_shape(features.shape)
            ),
        ));
    }
    Ok(())
}

/// Spatial-wise product: `(n, c, h, w) ⊙ (n, 1, h, w)`.
pub fn broadcast_mul(features: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_spatial_mask("broadcast_mul", features, mask)?;
    let mut out = features.clone();
    for b in 0..features.n() {
        let m = mask.plane(b, 0);
        for ch in 0..features.c() {
            for (o, mv) in out.plane_mut(b, ch).iter_mut().zip(m) {
                *o *= mv;
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_features, grad_mask)`.
pub fn broadcast_mul_backward(
    features: &Tensor,
    mask: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_spatial_mask("broadcast_mul_backward", features, mask)?;
    same_shape("broadcast_mul_backward", features, grad_out)?;
    let gf = broadcast_mul(grad_out, mask)?;
    let mut gm = Tensor::zeros(mask.shape);
    for b in 0..features.n() {
        let dst = gm.plane_mut(b, 0);
        for ch in 0..features.c() {
            for ((d, f), g) in dst
                .iter_mut()
                .zip(features.plane(b, ch))
                .zip(grad_out.plane(b, ch))
            {
                *d += f * g;
            }
        }
    }
    Ok((gf, gm))
}

fn check_channel_weights(op: &'static str, features: &Tensor, weights: &Tensor) -> Result<()> {
    if weights.shape != [features.n(), features.c(), 1, 1] {
        return Err(Error::shape(
            op,
            format!(
                "channel weights {} cannot broadcast over features {}",
                fmt_shape(weights.shape),
                fmt_shape(features.shape)
            ),
        ));
    }
    Ok(())
}

/// Channel-wise product: `(n, c, h, w) ⊙ (n, c, 1, 1)`.
pub fn scale_channels(features: &Tensor, weights: &Tensor) -> Result<Tensor> {
    check_channel_weights("scale_channels", features, weights)?;
    let mut out = features.clone();
    let c = features.c();
    for b in 0..features.n() {
        for ch in 0..c {
            let s = weights.data[b * c + ch];
            out.plane_mut(b, ch).iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(out)
}

/// Returns `(grad_features, grad_weights)`.
pub fn scale_channels_backward(
    features: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_channel_weights("scale_channels_backward", features, weights)?;
    same_shape("scale_channels_backward", features, grad_out)?;
    let gf = scale_channels(grad_out, weights)?;
    let c = features.c();
    let mut gw = Tensor::zeros(weights.shape);
    for b in 0..features.n() {
        for ch in 0..c {
            gw.data[b * c + ch] = features
                .plane(b, ch)
                .iter()
                .zip(grad_out.plane(b, ch))
                .map(|(f, g)| f * g)
                .sum();
        }
    }
    Ok((gf, gw))
}

/// Two-way softmax per element: `s1 = e^a / (e^a + e^b)`, `s2 = e^b / (e^a + e^b)`.
pub fn softmax_pair(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    same_shape("softmax_pair", a, b)?;
    let mut s1 = Tensor::zeros(a.shape);
    let mut s2 = Tensor::zeros(a.shape);
    for i in 0..a.len() {
        let (x, y) = (a.data[i], b.data[i]);
        let m = x.max(y);
        let (ea, eb) = ((x - m).exp(), (y - m).exp());
        let z = ea + eb;
        s1.data[i] = ea / z;
        s2.data[i] = eb / z;
    }
    Ok((s1, s2))
}

/// Returns `(grad_a, grad_b)` given the forward outputs and their gradients.
pub fn softmax_pair_backward(
    s1: &Tensor,
    s2: &Tensor,
    grad_s1: &Tensor,
    grad_s2: &Tensor,
) -> Result<(Tensor, Tensor)> {
    same_shape("softmax_pair_backward", s1, s2)?;
    same_shape("softmax_pair_backward", s1, grad_s1)?;
    same_shape("softmax_pair_backward", s1, grad_s2)?;
    let mut ga = Tensor::zeros(s1.shape);
    for i in 0..s1.len() {
        ga.data[i] = s1.data[i] * s2.data[i] * (grad_s1.data[i] - grad_s2.data[i]);
    }
    let gb = ga.map(|v| -v);
    Ok((ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn random_kernel(o: usize, i: usize, k: usize, s: usize, p: usize, seed: u64) -> ConvKernel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kern = ConvKernel::zeros(o, i, k, s, p, true);
        kern.weights.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        kern.bias.as_mut().unwrap().data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        kern
    }

    /// Six nested loops, accumulating in the documented order.
    fn naive_conv(x: &Tensor, k: &ConvKernel) -> Tensor {
        let [n, c, h, w] = x.shape();
        let [o, _, kh, kw] = k.weights.shape();
        let (s, p) = (k.stride as isize, k.padding as isize);
        let oh = (h as isize + 2 * p - kh as isize) / s + 1;
        let ow = (w as isize + 2 * p - kw as isize) / s + 1;
        let mut out = Tensor::zeros([n, o, oh as usize, ow as usize]);
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = k.bias.as_ref().map_or(0.0, |t| t.data()[oc]);
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy * s + ky as isize - p;
                                    let ix = ox * s + kx as isize - p;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += k.weights.at(oc, ic, ky, kx)
                                        * x.at(b, ic, iy as usize, ix as usize);
                                }
                            }
                        }
                        let idx = out.index(b, oc, oy as usize, ox as usize);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central differences of `loss(x) = Σ g ⊙ f(x)` with step 1e-5.
    fn fd_input_grad(x: &Tensor, g: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> Tensor {
        let h = 1e-5;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let lp: f64 = f(&xp).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let lm: f64 = f(&xm).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            out.data_mut()[i] = (lp - lm) / (2.0 * h);
        }
        out
    }

    fn assert_grad_close(analytic: &Tensor, numeric: &Tensor, tol: f64) {
        assert_eq!(analytic.shape(), numeric.shape());
        for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            assert!(rel_err(*a, *n) <= tol, "index {i}: analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn conv_scalar_multiply() {
        let x = Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        let mut k = ConvKernel::pointwise(1, 1, true);
        k.weights.data_mut()[0] = 3.0;
        assert_eq!(conv2d(&x, &k).unwrap().data(), &[6.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = random([1, 1, 4, 4], 1);
        let mut k = ConvKernel::same3(1, 1, true);
        k.weights.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn conv_matches_naive_loop_exactly() {
        let x = random([1, 2, 4, 4], 11);
        let k = random_kernel(3, 2, 3, 1, 1, 12);
        assert_eq!(conv2d(&x, &k).unwrap(), naive_conv(&x, &k));
    }

    #[test]
    fn conv_grid_matches_naive_loop_exactly() {
        let mut seed = 100;
        for &(n, c, o, h, w) in &[(1, 1, 1, 5, 7), (2, 3, 4, 6, 6), (1, 4, 2, 8, 4), (2, 2, 3, 3, 9)] {
            for &(k, s, p) in &[(1, 1, 0), (3, 1, 1), (3, 2, 1), (5, 1, 2), (3, 1, 0), (2, 2, 0)] {
                seed += 1;
                let x = random([n, c, h, w], seed);
                let kern = random_kernel(o, c, k, s, p, seed + 1000);
                match conv2d(&x, &kern) {
                    Ok(y) => assert_eq!(y, naive_conv(&x, &kern), "k={k} s={s} p={p} {h}x{w}"),
                    Err(_) => assert!(kern.output_size(h, w).is_err()),
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = random([1, 2, 4, 4], 3);
        let k = ConvKernel::same3(1, 3, true);
        let err = conv2d(&x, &k).unwrap_err().to_string();
        assert!(err.contains("(1, 2, 4, 4)") && err.contains("(1, 3, 3, 3)"), "{err}");
    }

    #[test]
    fn conv_rejects_dropping_real_samples() {
        // 5 wide, k=2, s=2, p=0: the last column would be silently ignored.
        let x = random([1, 1, 4, 5], 3);
        let k = ConvKernel::zeros(1, 1, 2, 2, 0, false);
        assert!(conv2d(&x, &k).is_err());
        // Even size, k=3, s=2, p=1: only a padding row is unreachable.
        let x = random([1, 1, 8, 8], 3);
        let k = ConvKernel::zeros(1, 1, 3, 2, 1, false);
        assert_eq!(conv2d(&x, &k).unwrap().shape(), [1, 1, 4, 4]);
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let x = random([1, 2, 4, 4], 5);
        let k = random_kernel(3, 2, 3, 1, 1, 6);
        let g = conv2d_backward(&x, &k, &Tensor::zeros([1, 3, 4, 4])).unwrap();
        assert!(g.grad_x.data().iter().all(|v| *v == 0.0));
        assert!(g.grad_weights.data().iter().all(|v| *v == 0.0));
        assert!(g.grad_bias.unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_backward_scalar_product_rule() {
        let x = Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        let mut k = ConvKernel::pointwise(1, 1, true);
        k.weights.data_mut()[0] = 3.0;
        let g = conv2d_backward(&x, &k, &Tensor::filled([1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.grad_x.data(), &[3.0]);
        assert_eq!(g.grad_weights.data(), &[2.0]);
        assert_eq!(g.grad_bias.unwrap().data(), &[1.0]);
    }

    #[test]
    fn conv_backward_rejects_bad_upstream() {
        let x = random([1, 2, 4, 4], 5);
        let k = random_kernel(3, 2, 3, 1, 1, 6);
        assert!(conv2d_backward(&x, &k, &Tensor::zeros([1, 3, 4, 5])).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for &(s, p) in &[(1, 1), (2, 1), (1, 0)] {
            let x = random([2, 2, 6, 6], 20 + s as u64);
            let k = random_kernel(3, 2, 3, s, p, 30);
            let y = conv2d(&x, &k).unwrap();
            let g = random(y.shape(), 40);
            let grads = conv2d_backward(&x, &k, &g).unwrap();

            let num_x = fd_input_grad(&x, &g, |xx| conv2d(xx, &k).unwrap());
            assert_grad_close(&grads.grad_x, &num_x, 1e-5);

            let num_w = fd_input_grad(&k.weights, &g, |ww| {
                let mut kk = k.clone();
                kk.weights = ww.clone();
                conv2d(&x, &kk).unwrap()
            });
            assert_grad_close(&grads.grad_weights, &num_w, 1e-5);

            let bias = k.bias.clone().unwrap();
            let num_b = fd_input_grad(&bias, &g, |bb| {
                let mut kk = k.clone();
                kk.bias = Some(bb.clone());
                conv2d(&x, &kk).unwrap()
            });
            assert_grad_close(grads.grad_bias.as_ref().unwrap(), &num_b, 1e-5);
        }
    }

    #[test]
    fn pixel_shuffle_definition() {
        let x = Tensor::from_vec([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(space_to_depth(&y, 2).unwrap(), x);
    }

    #[test]
    fn resampling_with_unit_factor_is_identity() {
        let x = random([2, 3, 4, 5], 8);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        assert_eq!(space_to_depth(&x, 1).unwrap(), x);
    }

    #[test]
    fn pixel_shuffle_rejects_indivisible_channels() {
        assert!(pixel_shuffle(&random([1, 6, 2, 2], 1), 2).is_err());
        assert!(space_to_depth(&random([1, 1, 3, 4], 1), 2).is_err());
    }

    #[test]
    fn pixel_shuffle_is_a_bijection_on_indices() {
        // Label every element by its flat index; a permutation keeps each label exactly once.
        for &shape in &[[1, 4, 1, 1], [2, 8, 4, 4], [1, 8, 3, 2], [2, 4, 2, 3]] {
            let x = Tensor::from_fn(shape, |i| i as f64);
            let y = pixel_shuffle(&x, 2).unwrap();
            let mut seen = vec![false; x.len()];
            for v in y.data() {
                let i = *v as usize;
                assert!(!seen[i]);
                seen[i] = true;
            }
            assert_eq!(space_to_depth(&y, 2).unwrap(), x);
            let z = Tensor::from_fn([shape[0], shape[1] / 4, shape[2] * 2, shape[3] * 2], |i| i as f64);
            assert_eq!(pixel_shuffle(&space_to_depth(&z, 2).unwrap(), 2).unwrap(), z);
        }
    }

    #[test]
    fn max_pool_examples() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(max_pool2d(&x, 2, 2).unwrap().data(), &[7.0]);
        let c = Tensor::filled([1, 2, 4, 6], 2.5);
        assert!(max_pool2d(&c, 2, 2).unwrap().data().iter().all(|v| *v == 2.5));
        assert!(max_pool2d(&Tensor::zeros([1, 1, 1, 4]), 2, 2).is_err());
        assert!(max_pool2d(&Tensor::zeros([1, 1, 5, 4]), 2, 2).is_err());
    }

    #[test]
    fn max_pool_matches_loop_oracle() {
        let x = random([2, 3, 8, 8], 9);
        let y = max_pool2d(&x, 2, 2).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    for j in 0..4 {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(x.at(b, c, 2 * i + dy, 2 * j + dx));
                            }
                        }
                        assert_eq!(y.at(b, c, i, j), m);
                    }
                }
            }
        }
    }

    #[test]
    fn global_pools() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[4.0]);
        assert_eq!(global_max_pool(&x).data(), &[7.0]);
        let c = Tensor::filled([2, 3, 3, 3], -1.5);
        assert!(global_avg_pool(&c).data().iter().all(|v| *v == -1.5));
        assert!(global_max_pool(&c).data().iter().all(|v| *v == -1.5));

        let x = random([2, 3, 5, 4], 4);
        let (a, m) = (global_avg_pool(&x), global_max_pool(&x));
        for b in 0..2 {
            for ch in 0..3 {
                let mut s = 0.0;
                let mut mx = f64::NEG_INFINITY;
                for i in 0..5 {
                    for j in 0..4 {
                        s += x.at(b, ch, i, j);
                        mx = mx.max(x.at(b, ch, i, j));
                    }
                }
                assert!((a.at(b, ch, 0, 0) - s / 20.0).abs() < 1e-15);
                assert_eq!(m.at(b, ch, 0, 0), mx);
            }
        }
    }

    #[test]
    fn elementwise_examples() {
        let z = Tensor::zeros([1, 1, 1, 1]);
        assert_eq!(sigmoid(&z).data(), &[0.5]);
        let big = Tensor::from_vec([1, 1, 1, 4], vec![-1000.0, -40.0, 40.0, 1000.0]).unwrap();
        assert!(sigmoid(&big).data().iter().all(|v| *v > 0.0 && *v < 1.0));

        let f = random([2, 3, 4, 4], 1);
        assert_eq!(broadcast_mul(&f, &Tensor::filled([2, 1, 4, 4], 1.0)).unwrap(), f);
        let m = random([2, 1, 4, 4], 2);
        let y = broadcast_mul(&f, &m).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    for j in 0..4 {
                        assert_eq!(y.at(b, c, i, j), f.at(b, c, i, j) * m.at(b, 0, i, j));
                    }
                }
            }
        }
        assert!(broadcast_mul(&f, &random([2, 2, 4, 4], 3)).is_err());
        assert!(add(&f, &m).is_err());
        assert!(mul(&f, &m).is_err());
    }

    #[test]
    fn softmax_pair_examples() {
        let a = random([2, 4, 1, 1], 3);
        let (s1, s2) = softmax_pair(&a, &a).unwrap();
        assert!(s1.data().iter().chain(s2.data()).all(|v| *v == 0.5));

        let a = Tensor::filled([1, 1, 1, 1], 3f64.ln());
        let b = Tensor::zeros([1, 1, 1, 1]);
        let (s1, s2) = softmax_pair(&a, &b).unwrap();
        assert!((s1.data()[0] - 0.75).abs() < 1e-15);
        assert!((s2.data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn elementwise_backward_matches_finite_differences() {
        let x = random([2, 3, 4, 4], 50);
        let g = random(x.shape(), 51);
        assert_grad_close(
            &sigmoid_backward(&sigmoid(&x), &g).unwrap(),
            &fd_input_grad(&x, &g, sigmoid),
            1e-5,
        );
        assert_grad_close(&relu_backward(&x, &g).unwrap(), &fd_input_grad(&x, &g, relu), 1e-5);

        let m = random([2, 1, 4, 4], 52);
        let (gf, gm) = broadcast_mul_backward(&x, &m, &g).unwrap();
        assert_grad_close(&gf, &fd_input_grad(&x, &g, |t| broadcast_mul(t, &m).unwrap()), 1e-5);
        assert_grad_close(&gm, &fd_input_grad(&m, &g, |t| broadcast_mul(&x, t).unwrap()), 1e-5);

        let w = random([2, 3, 1, 1], 53);
        let (gf, gw) = scale_channels_backward(&x, &w, &g).unwrap();
        assert_grad_close(&gf, &fd_input_grad(&x, &g, |t| scale_channels(t, &w).unwrap()), 1e-5);
        assert_grad_close(&gw, &fd_input_grad(&w, &g, |t| scale_channels(&x, t).unwrap()), 1e-5);

        let y = random(x.shape(), 54);
        let (ga, gb) = mul_backward(&x, &y, &g).unwrap();
        assert_grad_close(&ga, &fd_input_grad(&x, &g, |t| mul(t, &y).unwrap()), 1e-5);
        assert_grad_close(&gb, &fd_input_grad(&y, &g, |t| mul(&x, t).unwrap()), 1e-5);
    }

    #[test]
    fn pooling_backward_matches_finite_differences() {
        let x = random([2, 3, 4, 6], 60);
        let g = random([2, 3, 2, 3], 61);
        assert_grad_close(
            &max_pool2d_backward(&x, 2, 2, &g).unwrap(),
            &fd_input_grad(&x, &g, |t| max_pool2d(t, 2, 2).unwrap()),
            1e-5,
        );
        let g = random([2, 3, 1, 1], 62);
        assert_grad_close(
            &global_avg_pool_backward(x.shape(), &g).unwrap(),
            &fd_input_grad(&x, &g, global_avg_pool),
            1e-5,
        );
        assert_grad_close(
            &global_max_pool_backward(&x, &g).unwrap(),
            &fd_input_grad(&x, &g, global_max_pool),
            1e-5,
        );
        let g = random([2, 1, 4, 6], 63);
        assert_grad_close(
            &channel_mean_backward(x.shape(), &g).unwrap(),
            &fd_input_grad(&x, &g, channel_mean),
            1e-5,
        );
        assert_grad_close(
            &channel_max_backward(&x, &g).unwrap(),
            &fd_input_grad(&x, &g, channel_max),
            1e-5,
        );
    }

    #[test]
    fn softmax_and_shuffle_backward_match_finite_differences() {
        let a = random([2, 5, 1, 1], 70);
        let b = random([2, 5, 1, 1], 71);
        let g1 = random(a.shape(), 72);
        let g2 = random(a.shape(), 73);
        let (s1, s2) = softmax_pair(&a, &b).unwrap();
        let (ga, gb) = softmax_pair_backward(&s1, &s2, &g1, &g2).unwrap();
        let g = concat_channels(&[&g1, &g2]).unwrap();
        let both = |x: &Tensor, y: &Tensor| {
            let (p, q) = softmax_pair(x, y).unwrap();
            concat_channels(&[&p, &q]).unwrap()
        };
        assert_grad_close(&ga, &fd_input_grad(&a, &g, |t| both(t, &b)), 1e-5);
        assert_grad_close(&gb, &fd_input_grad(&b, &g, |t| both(&a, t)), 1e-5);

        let x = random([1, 8, 2, 3], 74);
        let g = random([1, 2, 4, 6], 75);
        assert_grad_close(
            &pixel_shuffle_backward(&g, 2).unwrap(),
            &fd_input_grad(&x, &g, |t| pixel_shuffle(t, 2).unwrap()),
            1e-5,
        );
    }

    #[test]
    fn concat_split_round_trip() {
        let a = random([2, 1, 3, 3], 1);
        let b = random([2, 2, 3, 3], 2);
        let cat = concat_channels(&[&a, &b]).unwrap();
        let parts = split_channels(&cat, &[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_pair_sums_to_one(vals in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..32)) {
                let n = vals.len();
                let a = Tensor::from_vec([1, n, 1, 1], vals.iter().map(|v| v.0).collect()).unwrap();
                let b = Tensor::from_vec([1, n, 1, 1], vals.iter().map(|v| v.1).collect()).unwrap();
                let (s1, s2) = softmax_pair(&a, &b).unwrap();
                for (p, q) in s1.data().iter().zip(s2.data()) {
                    prop_assert!(*p >= 0.0 && *q >= 0.0);
                    prop_assert!((p + q - 1.0).abs() <= 1e-12);
                }
            }

            #[test]
            fn sigmoid_strictly_inside_unit_interval(v in proptest::num::f64::NORMAL) {
                let s = sigmoid(&Tensor::filled([1, 1, 1, 1], v)).data()[0];
                prop_assert!(s > 0.0 && s < 1.0);
            }

            #[test]
            fn shuffle_round_trip(n in 1usize..3, c in 1usize..3, h in 1usize..5, w in 1usize..5, r in 1usize..4, seed in 0u64..1000) {
                let x = random([n, c * r * r, h, w], seed);
                let y = pixel_shuffle(&x, r).unwrap();
                prop_assert_eq!(space_to_depth(&y, r).unwrap(), x);
            }
        }
    }
}
