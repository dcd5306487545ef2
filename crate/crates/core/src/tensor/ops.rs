use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::traffic::PhaseScope;

use super::Tensor;

fn finite_out<T: Scalar>(t: Tensor<T>, op: &'static str) -> Result<Tensor<T>> {
    t.ensure_finite(op)?;
    Ok(t)
}

/// Matrix product `a (m x k) * b (k x n)`.
///
/// With a trace, charges `m*k + k*n` loads (operands de-duplicated within
/// the scope) and `m*n` stores.
pub fn matmul<'a, T: Scalar>(
    a: &'a Tensor<T>,
    b: &'a Tensor<T>,
    trace: Option<&mut PhaseScope<'_, 'a>>,
) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    a.ensure_finite("matmul")?;
    b.ensure_finite("matmul")?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    let out = finite_out(Tensor::new_unchecked(vec![m, n], out), "matmul")?;
    if let Some(tr) = trace {
        tr.load(a);
        tr.load(b);
        tr.store(&out);
    }
    Ok(out)
}

/// Row-wise `softmax(s / scale)` with per-row max subtraction.
///
/// The max and sum passes are not charged: a trace sees `len(s)` loads and
/// `len(s)` stores.
pub fn row_softmax<'a, T: Scalar>(
    s: &'a Tensor<T>,
    scale: T,
    trace: Option<&mut PhaseScope<'_, 'a>>,
) -> Result<Tensor<T>> {
    if scale <= T::zero() || !scale.is_finite() {
        return Err(Error::Parameter(format!(
            "softmax scale must be positive and finite, got {scale}"
        )));
    }
    let (r, c) = s.dims2("row_softmax")?;
    s.ensure_finite("row_softmax")?;
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = s.row(i);
        let max = row
            .iter()
            .fold(T::neg_infinity(), |m, &v| m.max(v / scale));
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v / scale - max).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    let out = finite_out(Tensor::new_unchecked(vec![r, c], out), "row_softmax")?;
    if let Some(tr) = trace {
        tr.load(s);
        tr.store(&out);
    }
    Ok(out)
}

fn check_dw<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    op: &'static str,
) -> Result<(usize, usize, usize, usize)> {
    let (h, w, c) = x.dims3(op)?;
    let (k, k2, kc) = kernels.dims3(op)?;
    if k != k2 {
        return Err(Error::Parameter(format!("{op}: kernel must be square, got {k}x{k2}")));
    }
    if k % 2 == 0 {
        return Err(Error::Parameter(format!("{op}: kernel size must be odd, got {k}")));
    }
    if kc != c {
        return Err(Error::dim(op, x.shape(), kernels.shape()));
    }
    Ok((h, w, c, k))
}

/// Depthwise 2-D convolution of an `H x W x C` map with `k x k x C` kernels.
///
/// Zero padding of `(k-1)/2` keeps the spatial extent; channel `c` of the
/// output only sees channel `c` of the input.
pub fn depthwise_conv2d<'a, T: Scalar>(
    x: &'a Tensor<T>,
    kernels: &'a Tensor<T>,
    trace: Option<&mut PhaseScope<'_, 'a>>,
) -> Result<Tensor<T>> {
    let (h, w, c, k) = check_dw(x, kernels, "depthwise_conv2d")?;
    x.ensure_finite("depthwise_conv2d")?;
    let pad = (k / 2) as isize;
    let (xd, kd) = (x.data(), kernels.data());
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * c..(y * w + xx + 1) * c];
            for a in 0..k {
                let iy = y as isize + a as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for b in 0..k {
                    let ix = xx as isize + b as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = &xd[(iy as usize * w + ix as usize) * c..][..c];
                    let ker = &kd[(a * k + b) * c..][..c];
                    for ((ov, &sv), &kv) in o.iter_mut().zip(src).zip(ker) {
                        *ov += sv * kv;
                    }
                }
            }
        }
    }
    let out = finite_out(Tensor::new_unchecked(vec![h, w, c], out), "depthwise_conv2d")?;
    if let Some(tr) = trace {
        tr.load(x);
        tr.load(kernels);
        tr.store(&out);
    }
    Ok(out)
}

/// Gradients of [`depthwise_conv2d`] with respect to its input and kernels.
pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, c, k) = check_dw(x, kernels, "depthwise_conv2d_backward")?;
    if d_out.shape() != x.shape() {
        return Err(Error::dim("depthwise_conv2d_backward", x.shape(), d_out.shape()));
    }
    let pad = (k / 2) as isize;
    let (xd, kd, gd) = (x.data(), kernels.data(), d_out.data());
    let mut dx = vec![T::zero(); h * w * c];
    let mut dk = vec![T::zero(); k * k * c];
    for y in 0..h {
        for xx in 0..w {
            let g = &gd[(y * w + xx) * c..][..c];
            for a in 0..k {
                let iy = y as isize + a as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for b in 0..k {
                    let ix = xx as isize + b as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (iy as usize * w + ix as usize) * c;
                    let kbase = (a * k + b) * c;
                    for ch in 0..c {
                        dx[base + ch] += g[ch] * kd[kbase + ch];
                        dk[kbase + ch] += g[ch] * xd[base + ch];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new_unchecked(vec![h, w, c], dx),
        Tensor::new_unchecked(vec![k, k, c], dk),
    ))
}

/// `x (N x p) * w (p x q) + bias`, bias broadcast over rows.
pub fn linear<'a, T: Scalar>(
    x: &'a Tensor<T>,
    w: &'a Tensor<T>,
    bias: Option<&'a Tensor<T>>,
    mut trace: Option<&mut PhaseScope<'_, 'a>>,
) -> Result<Tensor<T>> {
    let mut out = matmul(x, w, trace.as_deref_mut())?;
    if let Some(b) = bias {
        let (n, q) = out.dims2("linear")?;
        if b.shape() != [q] {
            return Err(Error::dim("linear", w.shape(), b.shape()));
        }
        let bd = b.data();
        for i in 0..n {
            for (o, &bv) in out.data_mut()[i * q..(i + 1) * q].iter_mut().zip(bd) {
                *o += bv;
            }
        }
        out = finite_out(out, "linear")?;
        if let Some(tr) = trace {
            tr.load(b);
        }
    }
    Ok(out)
}

fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Parameter("conv2d stride must be positive".into()));
    }
    if n + 2 * pad < k {
        return Err(Error::Parameter(format!(
            "conv2d kernel {k} larger than padded input {n}+2*{pad}"
        )));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

/// Dense strided 2-D convolution: `H x W x Cin` input, `k x k x Cin x Cout`
/// weights, optional `Cout` bias, zero padding `pad` on every side.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (h, w, cin) = x.dims3("conv2d")?;
    let (k, cout) = match weight.shape()[..] {
        [k, k2, ci, co] if k == k2 && ci == cin => (k, co),
        _ => return Err(Error::dim("conv2d", x.shape(), weight.shape())),
    };
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim("conv2d", weight.shape(), b.shape()));
        }
    }
    x.ensure_finite("conv2d")?;
    let oh = conv_out_extent(h, k, stride, pad)?;
    let ow = conv_out_extent(w, k, stride, pad)?;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![T::zero(); oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * cout..][..cout];
            if let Some(b) = bias {
                o.copy_from_slice(b.data());
            }
            for a in 0..k {
                let iy = (oy * stride + a) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for b in 0..k {
                    let ix = (ox * stride + b) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = &xd[(iy as usize * w + ix as usize) * cin..][..cin];
                    for (ci, &sv) in src.iter().enumerate() {
                        let wrow = &wd[((a * k + b) * cin + ci) * cout..][..cout];
                        for (ov, &wv) in o.iter_mut().zip(wrow) {
                            *ov += sv * wv;
                        }
                    }
                }
            }
        }
    }
    finite_out(Tensor::new_unchecked(vec![oh, ow, cout], out), "conv2d")
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d`] given the upstream gradient `d_out`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    d_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let (h, w, cin) = x.dims3("conv2d_backward")?;
    let (k, cout) = match weight.shape()[..] {
        [k, k2, ci, co] if k == k2 && ci == cin => (k, co),
        _ => return Err(Error::dim("conv2d_backward", x.shape(), weight.shape())),
    };
    let oh = conv_out_extent(h, k, stride, pad)?;
    let ow = conv_out_extent(w, k, stride, pad)?;
    if d_out.shape() != [oh, ow, cout] {
        return Err(Error::dim("conv2d_backward", &[oh, ow, cout], d_out.shape()));
    }
    let (xd, wd, gd) = (x.data(), weight.data(), d_out.data());
    let mut dx = vec![T::zero(); h * w * cin];
    let mut dw = vec![T::zero(); k * k * cin * cout];
    let mut db = vec![T::zero(); cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let g = &gd[(oy * ow + ox) * cout..][..cout];
            for (d, &gv) in db.iter_mut().zip(g) {
                *d += gv;
            }
            for a in 0..k {
                let iy = (oy * stride + a) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for b in 0..k {
                    let ix = (ox * stride + b) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xbase = (iy as usize * w + ix as usize) * cin;
                    for ci in 0..cin {
                        let wbase = ((a * k + b) * cin + ci) * cout;
                        let xv = xd[xbase + ci];
                        let mut acc = T::zero();
                        for co in 0..cout {
                            acc += g[co] * wd[wbase + co];
                            dw[wbase + co] += g[co] * xv;
                        }
                        dx[xbase + ci] += acc;
                    }
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::new_unchecked(vec![h, w, cin], dx),
        weight: Tensor::new_unchecked(weight.shape().to_vec(), dw),
        bias: Tensor::new_unchecked(vec![cout], db),
    })
}
