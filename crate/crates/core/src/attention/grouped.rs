use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{linear, matmul, row_softmax, Tensor};
use crate::traffic::{TrafficRecorder, PHASE_AGGREGATE, PHASE_NORMALIZE, PHASE_SCORE};

use super::{softmax_backward, AttentionConfig, AttentionGrads, AttentionParams, Mechanism};

/// Intermediates of [`mha_forward`].
#[derive(Debug, Clone)]
pub struct MhaCache<T> {
    cfg: AttentionConfig<T>,
    x: Tensor<T>,
    q_heads: Vec<Tensor<T>>,
    k_groups: Vec<Tensor<T>>,
    v_groups: Vec<Tensor<T>>,
    attention: Vec<Tensor<T>>,
    concat: Tensor<T>,
}

impl<T: Scalar> MhaCache<T> {
    /// One `N x N` attention matrix per head.
    pub fn attention(&self) -> &[Tensor<T>] {
        &self.attention
    }

    pub fn config(&self) -> &AttentionConfig<T> {
        &self.cfg
    }
}

/// Shared forward for every per-head-query mechanism. Head `h` reads the
/// key/value group `h / (heads / groups)`.
fn grouped_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    cfg: &AttentionConfig<T>,
    mut rec: Option<&mut TrafficRecorder>,
    op: &'static str,
) -> Result<(Tensor<T>, MhaCache<T>)> {
    cfg.validate()?;
    cfg.check_input(x, op)?;
    params.validate(cfg)?;
    let (heads, d, groups) = (cfg.heads(), cfg.head_dim(), cfg.kv_groups());
    let per_group = heads / groups;

    let q = linear(x, &params.w_q, None, None)?;
    let k = linear(x, &params.w_k, None, None)?;
    let q_heads = (0..heads)
        .map(|h| q.slice_cols(h * d, d))
        .collect::<Result<Vec<_>>>()?;
    let k_groups = (0..groups)
        .map(|g| k.slice_cols(g * d, d))
        .collect::<Result<Vec<_>>>()?;
    let kt_groups = k_groups
        .iter()
        .map(Tensor::transpose)
        .collect::<Result<Vec<_>>>()?;
    let v_groups = params
        .w_v
        .iter()
        .map(|w| matmul(x, w, None))
        .collect::<Result<Vec<_>>>()?;

    let scores = {
        let mut sc = rec.as_deref_mut().map(|r| r.scope(PHASE_SCORE));
        (0..heads)
            .map(|h| matmul(&q_heads[h], &kt_groups[h / per_group], sc.as_mut()))
            .collect::<Result<Vec<_>>>()?
    };
    let attention = {
        let mut sc = rec.as_deref_mut().map(|r| r.scope(PHASE_NORMALIZE));
        scores
            .iter()
            .map(|s| row_softmax(s, cfg.scale(), sc.as_mut()))
            .collect::<Result<Vec<_>>>()?
    };
    let heads_out = {
        let mut sc = rec.map(|r| r.scope(PHASE_AGGREGATE));
        (0..heads)
            .map(|h| matmul(&attention[h], &v_groups[h / per_group], sc.as_mut()))
            .collect::<Result<Vec<_>>>()?
    };
    let concat = Tensor::concat_cols(&heads_out)?;
    let w_o = params
        .w_o
        .as_ref()
        .ok_or_else(|| Error::Config("missing output projection".into()))?;
    let out = matmul(&concat, w_o, None)?;

    let cache = MhaCache {
        cfg: cfg.clone(),
        x: x.clone(),
        q_heads,
        k_groups,
        v_groups,
        attention,
        concat,
    };
    Ok((out, cache))
}

/// Multi-head attention: per-head queries, keys and values, softmax scale
/// `sqrt(d)`, concatenation then the `D x D` output projection.
///
/// Recorder phases are charged per head; the output projection is not
/// charged.
pub fn mha_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    cfg: &AttentionConfig<T>,
    rec: Option<&mut TrafficRecorder>,
) -> Result<(Tensor<T>, MhaCache<T>)> {
    cfg.expect_mechanism(&[Mechanism::MultiHead], "mha_forward")?;
    grouped_forward(x, params, cfg, rec, "mha_forward")
}

/// Grouped-query attention (forward only). With `groups == heads` this is
/// exactly [`mha_forward`]; with one group it is [`mqa_forward`].
pub fn gqa_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    cfg: &AttentionConfig<T>,
) -> Result<Tensor<T>> {
    cfg.expect_mechanism(&[Mechanism::GroupedQuery { groups: 1 }], "gqa_forward")?;
    Ok(grouped_forward(x, params, cfg, None, "gqa_forward")?.0)
}

/// Multi-query attention (forward only): one key/value pair for all heads.
pub fn mqa_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    cfg: &AttentionConfig<T>,
) -> Result<Tensor<T>> {
    cfg.expect_mechanism(&[Mechanism::MultiQuery], "mqa_forward")?;
    Ok(grouped_forward(x, params, cfg, None, "mqa_forward")?.0)
}

/// Analytic gradients through [`mha_forward`].
pub fn mha_backward<T: Scalar>(
    cache: &MhaCache<T>,
    params: &AttentionParams<T>,
    d_out: &Tensor<T>,
    cfg: &AttentionConfig<T>,
) -> Result<AttentionGrads<T>> {
    if &cache.cfg != cfg {
        return Err(Error::Config("mha_backward: cache was produced by a different config".into()));
    }
    params.validate(cfg)?;
    let (n, dim, d) = (cfg.tokens(), cfg.dim(), cfg.head_dim());
    let (heads, groups) = (cfg.heads(), cfg.kv_groups());
    let per_group = heads / groups;
    if d_out.shape() != [n, dim] {
        return Err(Error::dim("mha_backward", &[n, dim], d_out.shape()));
    }
    let w_o = params
        .w_o
        .as_ref()
        .ok_or_else(|| Error::Config("missing output projection".into()))?;

    let mut grads = params.zeros_like();
    grads.w_o = Some(matmul(&cache.concat.transpose()?, d_out, None)?);
    let d_concat = matmul(d_out, &w_o.transpose()?, None)?;

    let mut d_q = Tensor::zeros(&[n, dim]);
    let mut d_k = Tensor::zeros(&[n, groups * d]);
    let mut d_v: Vec<Tensor<T>> = (0..groups).map(|_| Tensor::zeros(&[n, d])).collect();
    for h in 0..heads {
        let g = h / per_group;
        let d_head = d_concat.slice_cols(h * d, d)?;
        let attn = &cache.attention[h];
        let d_attn = matmul(&d_head, &cache.v_groups[g].transpose()?, None)?;
        d_v[g].add_assign(&matmul(&attn.transpose()?, &d_head, None)?)?;
        let d_scores = softmax_backward(attn, &d_attn, cfg.scale())?;
        d_q.add_cols(h * d, &matmul(&d_scores, &cache.k_groups[g], None)?)?;
        d_k.add_cols(g * d, &matmul(&d_scores.transpose()?, &cache.q_heads[h], None)?)?;
    }

    let x_t = cache.x.transpose()?;
    grads.w_q = matmul(&x_t, &d_q, None)?;
    grads.w_k = matmul(&x_t, &d_k, None)?;
    let mut dx = matmul(&d_q, &params.w_q.transpose()?, None)?;
    dx.add_assign(&matmul(&d_k, &params.w_k.transpose()?, None)?)?;
    for (g, dv) in d_v.iter().enumerate() {
        grads.w_v[g] = matmul(&x_t, dv, None)?;
        dx.add_assign(&matmul(dv, &params.w_v[g].transpose()?, None)?)?;
    }
    Ok(AttentionGrads { x: dx, params: grads })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn two_token_hand_computation() {
        // N=2, D=d=1, h=1, identity projections, x = [0, 1]^T:
        // scores = x x^T = [[0,0],[0,1]], scale 1.
        // row 0: softmax(0,0) = (1/2, 1/2) -> out 0.5
        // row 1: softmax(0,1) = (1, e)/(1+e) -> out e/(1+e)
        let cfg = AttentionConfig::<f64>::multi_head(2, 1, 1).unwrap();
        let one = Tensor::eye(1);
        let params = AttentionParams {
            w_q: one.clone(),
            w_k: one.clone(),
            w_v: vec![one.clone()],
            dw_kernels: vec![],
            w_o: Some(one),
        };
        let x = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        let (out, _) = mha_forward(&x, &params, &cfg, None).unwrap();
        let e = 1f64.exp();
        assert!((out.data()[0] - 0.5).abs() < 1e-12);
        assert!((out.data()[1] - e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn gqa_with_one_group_per_head_is_mha() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mha = AttentionConfig::<f64>::multi_head(6, 8, 4).unwrap();
        let gqa = AttentionConfig::<f64>::grouped_query(6, 8, 4, 4).unwrap();
        let params = AttentionParams::init(&mha, &mut rng);
        let x = Tensor::uniform(&[6, 8], 1.0, &mut rng);
        let (a, _) = mha_forward(&x, &params, &mha, None).unwrap();
        assert_eq!(a, gqa_forward(&x, &params, &gqa).unwrap());
    }

    #[test]
    fn gqa_with_single_group_is_mqa() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gqa = AttentionConfig::<f64>::grouped_query(5, 8, 4, 1).unwrap();
        let mqa = AttentionConfig::<f64>::multi_query(5, 8, 4).unwrap();
        let params = AttentionParams::init(&mqa, &mut rng);
        let x = Tensor::uniform(&[5, 8], 1.0, &mut rng);
        assert_eq!(
            gqa_forward(&x, &params, &gqa).unwrap(),
            mqa_forward(&x, &params, &mqa).unwrap()
        );
    }

    #[test]
    fn gqa_shape_and_divisibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = AttentionConfig::<f64>::grouped_query(8, 8, 4, 2).unwrap();
        let params = AttentionParams::init(&cfg, &mut rng);
        let x = Tensor::uniform(&[8, 8], 1.0, &mut rng);
        assert_eq!(gqa_forward(&x, &params, &cfg).unwrap().shape(), &[8, 8]);
        assert!(matches!(
            AttentionConfig::<f64>::grouped_query(8, 8, 4, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn traffic_counts_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (n, dim, h) = (6, 8, 4);
        let cfg = AttentionConfig::<f64>::multi_head(n, dim, h).unwrap();
        let params = AttentionParams::init(&cfg, &mut rng);
        let x = Tensor::uniform(&[n, dim], 1.0, &mut rng);
        let mut rec = TrafficRecorder::new();
        mha_forward(&x, &params, &cfg, Some(&mut rec)).unwrap();
        let d = (dim / h) as u64;
        let (n, h) = (n as u64, h as u64);
        assert_eq!(rec.loads(PHASE_SCORE), 2 * n * d * h);
        assert_eq!(rec.stores(PHASE_SCORE), n * n * h);
        assert_eq!(rec.loads(PHASE_NORMALIZE), n * n * h);
        assert_eq!(rec.stores(PHASE_NORMALIZE), n * n * h);
        assert_eq!(rec.loads(PHASE_AGGREGATE), (n * n + n * d) * h);
        assert_eq!(rec.stores(PHASE_AGGREGATE), n * d * h);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cfg = AttentionConfig::<f64>::multi_head(5, 4, 2).unwrap();
        let params = AttentionParams::init(&cfg, &mut rng);
        let x = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let (_, cache) = mha_forward(&x, &params, &cfg, None).unwrap();
        let g = mha_backward(&cache, &params, &Tensor::zeros(&[5, 4]), &cfg).unwrap();
        assert!(g.x.data().iter().all(|&v| v == 0.0));
        for t in g.params.tensors() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }
}
