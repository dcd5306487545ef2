use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{depthwise_conv2d, depthwise_conv2d_backward, linear, matmul, row_softmax, Tensor};
use crate::traffic::{TrafficRecorder, PHASE_AGGREGATE, PHASE_NORMALIZE, PHASE_SCORE};

use super::{softmax_backward, AttentionConfig, AttentionGrads, AttentionParams, Mechanism};

/// Intermediates of [`reuse_forward`] needed by [`reuse_backward`].
#[derive(Debug, Clone)]
pub struct ReuseCache<T> {
    cfg: AttentionConfig<T>,
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    scores: Tensor<T>,
    attention: Tensor<T>,
    // per head: channel slice of x, its projection laid out on the grid, and
    // the convolved values as an N x d matrix
    chunks: Vec<Tensor<T>>,
    projected: Vec<Tensor<T>>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ReuseCache<T> {
    /// The shared `N x N` attention matrix.
    pub fn attention(&self) -> &Tensor<T> {
        &self.attention
    }

    /// Pre-softmax scores `Q K^T` (unscaled).
    pub fn scores(&self) -> &Tensor<T> {
        &self.scores
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn config(&self) -> &AttentionConfig<T> {
        &self.cfg
    }
}

/// Reuse Attention forward pass.
///
/// `Q = X W_Q`, `K = X W_K` at full width; `A = softmax(Q K^T / sqrt(D))` is
/// computed once. Head `i` takes channel slice `X_i` of the input, projects it
/// with its own `d x d` matrix, reshapes the tokens onto the configured grid
/// and applies a `k_i x k_i` depthwise convolution to get `V_i`; the output is
/// the concatenation of `A V_i` over heads.
///
/// With a recorder, the `score`, `normalize` and `aggregate` phases are
/// charged; projections and the value convolutions are not.
pub fn reuse_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    cfg: &AttentionConfig<T>,
    mut rec: Option<&mut TrafficRecorder>,
) -> Result<(Tensor<T>, ReuseCache<T>)> {
    cfg.expect_mechanism(&[Mechanism::Reuse], "reuse_forward")?;
    cfg.validate()?;
    cfg.check_input(x, "reuse_forward")?;
    params.validate(cfg)?;
    let (n, d) = (cfg.tokens(), cfg.head_dim());
    let (gh, gw) = cfg.grid();

    let q = linear(x, &params.w_q, None, None)?;
    let k = linear(x, &params.w_k, None, None)?;
    let kt = k.transpose()?;

    let scores = {
        let mut sc = rec.as_deref_mut().map(|r| r.scope(PHASE_SCORE));
        matmul(&q, &kt, sc.as_mut())?
    };
    let attention = {
        let mut sc = rec.as_deref_mut().map(|r| r.scope(PHASE_NORMALIZE));
        row_softmax(&scores, cfg.scale(), sc.as_mut())?
    };

    let mut chunks = Vec::with_capacity(cfg.heads());
    let mut projected = Vec::with_capacity(cfg.heads());
    let mut values = Vec::with_capacity(cfg.heads());
    for (i, (w_v, kernel)) in params.w_v.iter().zip(&params.dw_kernels).enumerate() {
        let chunk = x.slice_cols(i * d, d)?;
        let proj = matmul(&chunk, w_v, None)?.reshape(&[gh, gw, d])?;
        let v = depthwise_conv2d(&proj, kernel, None)?.reshape(&[n, d])?;
        chunks.push(chunk);
        projected.push(proj);
        values.push(v);
    }

    let heads_out = {
        let mut sc = rec.map(|r| r.scope(PHASE_AGGREGATE));
        values
            .iter()
            .map(|v| matmul(&attention, v, sc.as_mut()))
            .collect::<Result<Vec<_>>>()?
    };
    let out = Tensor::concat_cols(&heads_out)?;

    let cache = ReuseCache {
        cfg: cfg.clone(),
        x: x.clone(),
        q,
        k,
        scores,
        attention,
        chunks,
        projected,
        values,
    };
    Ok((out, cache))
}

/// Analytic gradients of a scalar loss through [`reuse_forward`], given
/// `d_out = dL/d(out)`.
pub fn reuse_backward<T: Scalar>(
    cache: &ReuseCache<T>,
    params: &AttentionParams<T>,
    d_out: &Tensor<T>,
    cfg: &AttentionConfig<T>,
) -> Result<AttentionGrads<T>> {
    if &cache.cfg != cfg {
        return Err(Error::Config("reuse_backward: cache was produced by a different config".into()));
    }
    params.validate(cfg)?;
    let (n, dim, d) = (cfg.tokens(), cfg.dim(), cfg.head_dim());
    let (gh, gw) = cfg.grid();
    if d_out.shape() != [n, dim] {
        return Err(Error::dim("reuse_backward", &[n, dim], d_out.shape()));
    }

    let mut grads = params.zeros_like();
    let mut dx = Tensor::zeros(&[n, dim]);
    let mut d_attn = Tensor::zeros(&[n, n]);
    let attn_t = cache.attention.transpose()?;

    for i in 0..cfg.heads() {
        let d_head = d_out.slice_cols(i * d, d)?;
        let v_t = cache.values[i].transpose()?;
        d_attn.add_assign(&matmul(&d_head, &v_t, None)?)?;
        let d_v = matmul(&attn_t, &d_head, None)?.reshape(&[gh, gw, d])?;
        let (d_proj, d_kernel) =
            depthwise_conv2d_backward(&cache.projected[i], &params.dw_kernels[i], &d_v)?;
        grads.dw_kernels[i] = d_kernel;
        let d_proj = d_proj.reshape(&[n, d])?;
        grads.w_v[i] = matmul(&cache.chunks[i].transpose()?, &d_proj, None)?;
        let d_chunk = matmul(&d_proj, &params.w_v[i].transpose()?, None)?;
        dx.add_cols(i * d, &d_chunk)?;
    }

    let d_scores = softmax_backward(&cache.attention, &d_attn, cfg.scale())?;
    let d_q = matmul(&d_scores, &cache.k, None)?;
    let d_k = matmul(&d_scores.transpose()?, &cache.q, None)?;
    let x_t = cache.x.transpose()?;
    grads.w_q = matmul(&x_t, &d_q, None)?;
    grads.w_k = matmul(&x_t, &d_k, None)?;
    dx.add_assign(&matmul(&d_q, &params.w_q.transpose()?, None)?)?;
    dx.add_assign(&matmul(&d_k, &params.w_k.transpose()?, None)?)?;

    Ok(AttentionGrads { x: dx, params: grads })
}
