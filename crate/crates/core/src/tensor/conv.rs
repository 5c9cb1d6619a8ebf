//! Plain strided 2-D convolution lowered to im2col + GEMM.
//!
//! Reduction index order inside every output element is (channel, row, col),
//! the row order of the im2col matrix, so results are reproducible bit for bit.

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Kernel window, stride and zero padding of one convolution.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeometry {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        ConvGeometry {
            kh: kernel.0,
            kw: kernel.1,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kh == 0 || self.kw == 0 {
            return Err(Error::config("convolution kernel dims must be >= 1"));
        }
        if self.sh == 0 || self.sw == 0 {
            return Err(Error::config("convolution stride must be >= 1"));
        }
        Ok(())
    }

    /// Output spatial size of the forward convolution.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (hp, wp) = (h + 2 * self.ph, w + 2 * self.pw);
        if hp < self.kh || wp < self.kw {
            return Err(Error::config(format!(
                "padded input {hp}x{wp} is smaller than the {}x{} kernel",
                self.kh, self.kw
            )));
        }
        Ok(((hp - self.kh) / self.sh + 1, (wp - self.kw) / self.sw + 1))
    }

    /// Output spatial size of the transposed convolution (no output padding).
    pub fn transposed_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let full_h = (h.max(1) - 1) * self.sh + self.kh;
        let full_w = (w.max(1) - 1) * self.sw + self.kw;
        if h == 0 || w == 0 || full_h <= 2 * self.ph || full_w <= 2 * self.pw {
            return Err(Error::config("transposed convolution output would be empty"));
        }
        Ok((full_h - 2 * self.ph, full_w - 2 * self.pw))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Weights `(C_out, C_in, k_h, k_w)`, optional bias `(1, C_out, 1, 1)`, stride
/// and padding. For the transposed direction the same array is read as
/// `(C_in, C_out, k_h, k_w)`, which makes it the adjoint of the forward op.
#[derive(Clone, Debug)]
pub struct ConvKernel<T> {
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl<T: Real> ConvKernel<T> {
    pub fn new(weights: Tensor<T>, bias: Option<Tensor<T>>) -> Self {
        ConvKernel {
            weights,
            bias,
            stride: (1, 1),
            padding: (0, 0),
        }
    }

    pub fn with_stride(mut self, sh: usize, sw: usize) -> Self {
        self.stride = (sh, sw);
        self
    }

    pub fn with_padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn geometry(&self) -> ConvGeometry {
        let s = self.weights.shape();
        ConvGeometry::new((s.h, s.w), self.stride, self.padding)
    }
}

pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    conv2d_forward(input, &kernel.weights, kernel.bias.as_ref(), &kernel.geometry())
}

pub fn conv2d_transposed<T: Real>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    conv2d_transposed_forward(input, &kernel.weights, kernel.bias.as_ref(), &kernel.geometry())
}

fn check_bias<T: Real>(bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        let want = Shape::new(1, channels, 1, 1);
        if b.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: b.shape(),
                right: want,
            });
        }
    }
    Ok(())
}

/// Output columns `lo..hi` whose tap `j` lands inside a row of width `w`.
fn valid_span(j: usize, sw: usize, pw: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if pw > j { (pw - j).div_ceil(sw) } else { 0 };
    let hi = if w + pw > j { ((w + pw - j - 1) / sw + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    g: &ConvGeometry,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.sh + i) as isize - g.ph as isize;
                    let seg = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_span(j, g.sw, g.pw, w, wo);
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    if g.sw == 1 {
                        let start = lo + j - g.pw;
                        seg[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, out) in seg.iter_mut().enumerate().take(hi).skip(lo) {
                            *out = src[ox * g.sw + j - g.pw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    g: &ConvGeometry,
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.sh + i) as isize - g.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_span(j, g.sw, g.pw, w, wo);
                    let row = &src[oy * wo..(oy + 1) * wo];
                    if g.sw == 1 {
                        let start = lo + j - g.pw;
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&row[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * g.sw + j - g.pw] += row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `weight` is `(C_out, C_in, k_h, k_w)`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.c != ws.c || (ws.h, ws.w) != (g.kh, g.kw) {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: xs,
            right: ws,
        });
    }
    check_bias(bias, ws.n)?;
    let (ho, wo) = g.output_dims(xs.h, xs.w)?;
    let (co, k, p) = (ws.n, xs.c * g.kh * g.kw, ho * wo);
    let mut out = Tensor::zeros(Shape::new(xs.n, co, ho, wo));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..xs.n {
        let xn = x.item(n);
        let b: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, (xs.c, xs.h, xs.w), g, (ho, wo), &mut cols);
            &cols
        };
        let on = out.item_mut(n);
        T::gemm(co, k, p, T::one(), weight.data(), k as isize, 1, b, p as isize, 1, T::zero(), on, p as isize, 1);
        if let Some(bias) = bias {
            for (oc, &bv) in bias.data().iter().enumerate() {
                on[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradient of `conv2d_forward` with respect to its input.
pub fn conv2d_grad_input<T: Real>(
    gout: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeometry,
    in_shape: Shape,
) -> Tensor<T> {
    let gs = gout.shape();
    let ws = weight.shape();
    let (co, k, p) = (ws.n, in_shape.c * g.kh * g.kw, gs.h * gs.w);
    let mut dx = Tensor::zeros(in_shape);
    let mut cols = vec![T::zero(); k * p];
    for n in 0..in_shape.n {
        let gn = gout.item(n);
        if g.is_pointwise() {
            T::gemm(k, co, p, T::one(), weight.data(), 1, k as isize, gn, p as isize, 1, T::zero(), dx.item_mut(n), p as isize, 1);
        } else {
            T::gemm(k, co, p, T::one(), weight.data(), 1, k as isize, gn, p as isize, 1, T::zero(), &mut cols, p as isize, 1);
            col2im(&cols, (in_shape.c, in_shape.h, in_shape.w), g, (gs.h, gs.w), dx.item_mut(n));
        }
    }
    dx
}

/// Gradient of `conv2d_forward` with respect to the weights.
pub fn conv2d_grad_weight<T: Real>(
    gout: &Tensor<T>,
    x: &Tensor<T>,
    g: &ConvGeometry,
    weight_shape: Shape,
) -> Tensor<T> {
    let gs = gout.shape();
    let xs = x.shape();
    let (co, k, p) = (weight_shape.n, xs.c * g.kh * g.kw, gs.h * gs.w);
    let mut dw = Tensor::zeros(weight_shape);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..xs.n {
        let xn = x.item(n);
        let b: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, (xs.c, xs.h, xs.w), g, (gs.h, gs.w), &mut cols);
            &cols
        };
        // dW (co x k) += gout_n (co x p) * cols^T (p x k)
        T::gemm(co, p, k, T::one(), gout.item(n), p as isize, 1, b, 1, p as isize, T::one(), dw.data_mut(), k as isize, 1);
    }
    dw
}

/// Per-channel sum of the output gradient, shaped like the bias.
pub fn conv2d_bias_grad<T: Real>(gout: &Tensor<T>) -> Tensor<T> {
    let s = gout.shape();
    let mut db = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    let p = s.plane();
    for n in 0..s.n {
        let gn = gout.item(n);
        for c in 0..s.c {
            let acc = gn[c * p..(c + 1) * p].iter().fold(T::zero(), |a, &v| a + v);
            db.data_mut()[c] += acc;
        }
    }
    db
}

/// Transposed convolution: the adjoint of `conv2d_forward` with the same
/// weight array, read as `(C_in, C_out, k_h, k_w)`. Output size is
/// `(H - 1) * s - 2p + k`; when the forward convolution drops trailing rows
/// (stride not dividing the padded extent) the adjoint identity only holds on
/// the forward input size this formula reproduces.
pub fn conv2d_transposed_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.c != ws.n || (ws.h, ws.w) != (g.kh, g.kw) {
        return Err(Error::ShapeMismatch {
            op: "conv2d_transposed",
            left: xs,
            right: ws,
        });
    }
    check_bias(bias, ws.c)?;
    let (ho, wo) = g.transposed_dims(xs.h, xs.w)?;
    let out_shape = Shape::new(xs.n, ws.c, ho, wo);
    let mut out = conv2d_grad_input(x, weight, g, out_shape);
    if let Some(bias) = bias {
        let p = ho * wo;
        for n in 0..xs.n {
            let on = out.item_mut(n);
            for (oc, &bv) in bias.data().iter().enumerate() {
                on[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}
