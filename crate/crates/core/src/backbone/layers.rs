//! Building blocks of the backbone, each with an explicit forward cache and
//! an analytic backward that accumulates into a same-shaped gradient value.

use crate::attention::{reuse_backward, reuse_forward, AttentionConfig, AttentionParams, ReuseCache};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, linear, matmul, Tensor};
use crate::traffic::TrafficRecorder;

/// Produces an initial tensor for a shape and fan-in.
pub(crate) type Init<'a, T> = dyn FnMut(&[usize], usize) -> Tensor<T> + 'a;

/// Parameter enumeration in declaration order.
pub(crate) trait Params<T> {
    fn collect<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor<T>)>);
    fn collect_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor<T>>);
}

fn relu<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.max(T::zero()))
}

/// Zeroes `grad` wherever the ReLU output `act` is not positive.
fn relu_mask<T: Scalar>(grad: &Tensor<T>, act: &Tensor<T>) -> Result<Tensor<T>> {
    grad.zip_map(act, |g, a| if a > T::zero() { g } else { T::zero() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv<T> {
    pub(crate) fn new(k: usize, cin: usize, cout: usize, stride: usize, init: &mut Init<'_, T>) -> Self {
        let fan_in = k * k * cin;
        Conv {
            weight: init(&[k, k, cin, cout], fan_in),
            bias: init(&[cout], fan_in),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, self.pad)
    }

    /// Returns `dL/dx`; `x` is the forward input.
    pub(crate) fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let g = conv2d_backward(x, &self.weight, self.stride, self.pad, dy)?;
        grad.weight.add_assign(&g.weight)?;
        grad.bias.add_assign(&g.bias)?;
        Ok(g.input)
    }
}

impl<T: Scalar> Params<T> for Conv<T> {
    fn collect<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }
    fn collect_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Residual 3x3 depthwise convolution with bias: `x + dw(x) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DwConv<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DwConv<T> {
    pub(crate) fn new(channels: usize, init: &mut Init<'_, T>) -> Self {
        DwConv {
            kernel: init(&[3, 3, channels], 9),
            bias: init(&[channels], 9),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
        let (n, c) = x.dims2("DwConv")?;
        let map = x.clone().reshape(&[grid.0, grid.1, c])?;
        let y = depthwise_conv2d(&map, &self.kernel, None)?.reshape(&[n, c])?;
        let mut out = x.add(&y)?;
        for i in 0..n {
            for j in 0..c {
                out.set(i, j, out.at(i, j) + self.bias.data()[j]);
            }
        }
        out.ensure_finite("DwConv")?;
        Ok(out)
    }

    pub(crate) fn backward(&self, x: &Tensor<T>, grid: (usize, usize), dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let (n, c) = x.dims2("DwConv")?;
        let map = x.clone().reshape(&[grid.0, grid.1, c])?;
        let dmap = dy.clone().reshape(&[grid.0, grid.1, c])?;
        let (dx, dk) = depthwise_conv2d_backward(&map, &self.kernel, &dmap)?;
        grad.kernel.add_assign(&dk)?;
        for i in 0..n {
            for (j, g) in grad.bias.data_mut().iter_mut().enumerate() {
                *g += dy.at(i, j);
            }
        }
        dy.add(&dx.reshape(&[n, c])?)
    }
}

impl<T: Scalar> Params<T> for DwConv<T> {
    fn collect<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor<T>)>) {
        out.push((format!("{prefix}.kernel"), &self.kernel));
        out.push((format!("{prefix}.bias"), &self.bias));
    }
    fn collect_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor<T>>) {
        out.push(&mut self.kernel);
        out.push(&mut self.bias);
    }
}

const LN_EPS: f64 = 1e-5;

/// Per-token layer normalisation over channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub(crate) fn new(channels: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerNormCache<T>)> {
        let (n, c) = x.dims2("LayerNorm")?;
        if self.gamma.len() != c {
            return Err(Error::dim("LayerNorm", self.gamma.shape(), x.shape()));
        }
        let cn = T::of_usize(c);
        let mut normalized = Tensor::zeros(&[n, c]);
        let mut out = Tensor::zeros(&[n, c]);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let inv = T::one() / (var + T::of(LN_EPS)).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                normalized.set(i, j, xh);
                out.set(i, j, xh * self.gamma.data()[j] + self.beta.data()[j]);
            }
        }
        out.ensure_finite("LayerNorm")?;
        Ok((out, LayerNormCache { normalized, inv_std }))
    }

    pub(crate) fn backward(&self, cache: &LayerNormCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let (n, c) = dy.dims2("LayerNorm")?;
        let cn = T::of_usize(c);
        let mut dx = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let xh = cache.normalized.row(i);
            let g = dy.row(i);
            let mut dxh = vec![T::zero(); c];
            for j in 0..c {
                grad.gamma.data_mut()[j] += g[j] * xh[j];
                grad.beta.data_mut()[j] += g[j];
                dxh[j] = g[j] * self.gamma.data()[j];
            }
            let mean_d = dxh.iter().copied().sum::<T>() / cn;
            let mean_dx = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / cn;
            for j in 0..c {
                dx.set(i, j, cache.inv_std[i] * (dxh[j] - mean_d - xh[j] * mean_dx));
            }
        }
        Ok(dx)
    }
}

impl<T: Scalar> Params<T> for LayerNorm<T> {
    fn collect<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor<T>)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }
    fn collect_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor<T>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub(crate) fn new(p: usize, q: usize, init: &mut Init<'_, T>) -> Self {
        Linear {
            weight: init(&[p, q], p),
            bias: init(&[q], p),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, &self.weight, Some(&self.bias), None)
    }

    pub(crate) fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        grad.weight.add_assign(&matmul(&x.transpose()?, dy, None)?)?;
        let (n, q) = dy.dims2("Linear")?;
        for i in 0..n {
            for j in 0..q {
                grad.bias.data_mut()[j] += dy.at(i, j);
            }
        }
        matmul(dy, &self.weight.transpose()?, None)
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn collect<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }
    fn collect_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Residual feed-forward: `x + fc2(relu(fc1(norm(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn<T> {
    pub norm: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct FfnCache<T> {
    norm: LayerNormCache<T>,
    normed: Tensor<T>,
    hidden: Tensor<T>,
}

impl<T: Scalar> Ffn<T> {
    pub(crate) fn new(channels: usize, ratio: usize, init: &mut Init<'_, T>) -> Self {
        Ffn {
            norm: LayerNorm::new(channels),
            fc1: Linear::new(channels, channels * ratio, init),
            fc2: Linear::new(channels * ratio, channels, init),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FfnCache<T>)> {
        let (normed, norm) = self.norm.forward(x)?;
        let hidden = relu(&self.fc1.forward(&normed)?);
        let out = x.add(&self.fc2.forward(&hidden)?)?;
        Ok((out, FfnCache { norm, normed, hidden }))
    }

    pub(crate) fn backward(&self, cache: &FfnCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let d_hidden = self.fc2.backward(&cache.hidden, dy, &mut grad.fc2)?;
        let d_pre = relu_mask(&d_hidden, &cache.hidden)?;
        let d_normed = self.fc1.backward(&cache.normed, &d_pre, &mut grad.fc1)?;
        dy.add(&self.norm.backward(&cache.norm, &d_normed, &mut grad.norm)?)
    }
}

impl<T: Scalar> Params<T> for Ffn<T> {
    fn collect<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor<T>)>) {
        self.norm.collect(&format!("{prefix}.norm"), out);
        self.fc1.collect(&format!("{prefix}.fc1"), out);
        self.fc2.collect(&format!("{prefix}.fc2"), out);
    }
    fn collect_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor<T>>) {
        self.norm.collect_mut(out);
        self.fc1.collect_mut(out);
        self.fc2.collect_mut(out);
    }
}

/// Residual Reuse Attention: `x + reuse(norm(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionUnit<T> {
    pub norm: LayerNorm<T>,
    pub params: AttentionParams<T>,
    pub cfg: AttentionConfig<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionUnitCache<T> {
    norm: LayerNormCache<T>,
    pub(crate) attn: ReuseCache<T>,
}

impl<T: Scalar> AttentionUnit<T> {
    pub(crate) fn new(cfg: AttentionConfig<T>, init: &mut Init<'_, T>) -> Self {
        let (c, d) = (cfg.dim(), cfg.head_dim());
        let params = AttentionParams {
            w_q: init(&[c, c], c),
            w_k: init(&[c, c], c),
            w_v: (0..cfg.heads()).map(|_| init(&[d, d], d)).collect(),
            dw_kernels: cfg.kernel_sizes().iter().map(|&k| init(&[k, k, d], k * k)).collect(),
            w_o: None,
        };
        AttentionUnit {
            norm: LayerNorm::new(c),
            params,
            cfg,
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, rec: Option<&mut TrafficRecorder>) -> Result<(Tensor<T>, AttentionUnitCache<T>)> {
        let (normed, norm) = self.norm.forward(x)?;
        let (y, attn) = reuse_forward(&normed, &self.params, &self.cfg, rec)?;
        Ok((x.add(&y)?, AttentionUnitCache { norm, attn }))
    }

    pub(crate) fn backward(&self, cache: &AttentionUnitCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let g = reuse_backward(&cache.attn, &self.params, dy, &self.cfg)?;
        for (acc, t) in grad.params.tensors_mut().into_iter().zip(g.params.tensors()) {
            acc.add_assign(t)?;
        }
        dy.add(&self.norm.backward(&cache.norm, &g.x, &mut grad.norm)?)
    }
}

impl<T: Scalar> Params<T> for AttentionUnit<T> {
    fn collect<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor<T>)>) {
        self.norm.collect(&format!("{prefix}.norm"), out);
        let p = &self.params;
        out.push((format!("{prefix}.w_q"), &p.w_q));
        out.push((format!("{prefix}.w_k"), &p.w_k));
        for (i, w) in p.w_v.iter().enumerate() {
            out.push((format!("{prefix}.w_v.{i}"), w));
        }
        for (i, k) in p.dw_kernels.iter().enumerate() {
            out.push((format!("{prefix}.dw_kernel.{i}"), k));
        }
    }
    fn collect_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor<T>>) {
        self.norm.collect_mut(out);
        out.extend(self.params.tensors_mut());
    }
}

/// DWConv -> FFN -> Reuse Attention -> DWConv -> FFN, each residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub dw1: DwConv<T>,
    pub ffn1: Ffn<T>,
    pub attn: AttentionUnit<T>,
    pub dw2: DwConv<T>,
    pub ffn2: Ffn<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache<T> {
    x0: Tensor<T>,
    ffn1: FfnCache<T>,
    pub(crate) attn: AttentionUnitCache<T>,
    x3: Tensor<T>,
    ffn2: FfnCache<T>,
}

impl<T: Scalar> Block<T> {
    pub(crate) fn new(cfg: AttentionConfig<T>, ffn_ratio: usize, init: &mut Init<'_, T>) -> Self {
        let c = cfg.dim();
        Block {
            dw1: DwConv::new(c, init),
            ffn1: Ffn::new(c, ffn_ratio, init),
            attn: AttentionUnit::new(cfg, init),
            dw2: DwConv::new(c, init),
            ffn2: Ffn::new(c, ffn_ratio, init),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, rec: Option<&mut TrafficRecorder>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let grid = self.attn.cfg.grid();
        let x1 = self.dw1.forward(x, grid)?;
        let (x2, ffn1) = self.ffn1.forward(&x1)?;
        let (x3, attn) = self.attn.forward(&x2, rec)?;
        let x4 = self.dw2.forward(&x3, grid)?;
        let (x5, ffn2) = self.ffn2.forward(&x4)?;
        Ok((
            x5,
            BlockCache {
                x0: x.clone(),
                ffn1,
                attn,
                x3,
                ffn2,
            },
        ))
    }

    pub(crate) fn backward(&self, cache: &BlockCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        let grid = self.attn.cfg.grid();
        let d4 = self.ffn2.backward(&cache.ffn2, dy, &mut grad.ffn2)?;
        let d3 = self.dw2.backward(&cache.x3, grid, &d4, &mut grad.dw2)?;
        let d2 = self.attn.backward(&cache.attn, &d3, &mut grad.attn)?;
        let d1 = self.ffn1.backward(&cache.ffn1, &d2, &mut grad.ffn1)?;
        self.dw1.backward(&cache.x0, grid, &d1, &mut grad.dw1)
    }
}

impl<T: Scalar> Params<T> for Block<T> {
    fn collect<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor<T>)>) {
        self.dw1.collect(&format!("{prefix}.dw1"), out);
        self.ffn1.collect(&format!("{prefix}.ffn1"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.dw2.collect(&format!("{prefix}.dw2"), out);
        self.ffn2.collect(&format!("{prefix}.ffn2"), out);
    }
    fn collect_mut<'s>(&'s mut self, out: &mut Vec<&'s mut Tensor<T>>) {
        self.dw1.collect_mut(out);
        self.ffn1.collect_mut(out);
        self.attn.collect_mut(out);
        self.dw2.collect_mut(out);
        self.ffn2.collect_mut(out);
    }
}
