//! Attention mechanisms sharing one configuration type.
//!
//! [`reuse_forward`] computes a single `N x N` attention matrix from
//! full-width queries and keys and reuses it for every head; each head's
//! values come from its own channel slice of the input, projected and then
//! passed through a depthwise convolution whose kernel size differs per head.
//! [`mha_forward`] is the conventional per-head baseline with an output
//! projection, and [`gqa_forward`] / [`mqa_forward`] share keys and values
//! across groups of heads.

mod grouped;
mod reuse;

pub use grouped::{gqa_forward, mha_backward, mha_forward, mqa_forward, MhaCache};
pub use reuse::{reuse_backward, reuse_forward, ReuseCache};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    MultiHead,
    Reuse,
    GroupedQuery { groups: usize },
    MultiQuery,
}

impl Mechanism {
    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::MultiHead => "multi_head",
            Mechanism::Reuse => "reuse",
            Mechanism::GroupedQuery { .. } => "grouped_query",
            Mechanism::MultiQuery => "multi_query",
        }
    }

    /// Number of distinct key/value groups for `heads` query heads.
    pub fn kv_groups(&self, heads: usize) -> usize {
        match *self {
            Mechanism::MultiHead | Mechanism::Reuse => heads,
            Mechanism::GroupedQuery { groups } => groups,
            Mechanism::MultiQuery => 1,
        }
    }
}

const KERNEL_CYCLE: [usize; 4] = [3, 5, 7, 9];

/// Ascending odd kernel sizes for `heads` value heads: 3, 5, 7, 9, then
/// repeating from 3.
pub fn kernel_schedule(heads: usize) -> Result<Vec<usize>> {
    if heads == 0 {
        return Err(Error::Parameter("kernel schedule needs at least one head".into()));
    }
    Ok((0..heads).map(|i| KERNEL_CYCLE[i % KERNEL_CYCLE.len()]).collect())
}

/// Shape and mechanism of one attention layer.
///
/// Invariants, enforced by the constructors: `dim == heads * head_dim`,
/// `grid.0 * grid.1 == tokens`, kernel sizes odd (one per head for reuse),
/// `scale == sqrt(dim)` for reuse and `sqrt(head_dim)` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig<T> {
    tokens: usize,
    dim: usize,
    heads: usize,
    head_dim: usize,
    kernel_sizes: Vec<usize>,
    grid: (usize, usize),
    mechanism: Mechanism,
    scale: T,
}

/// Side length of a square token grid, if `tokens` is a perfect square.
pub fn square_grid(tokens: usize) -> Result<(usize, usize)> {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side == tokens {
        Ok((side, side))
    } else {
        Err(Error::Config(format!(
            "{tokens} tokens do not form a square grid; pass an explicit grid"
        )))
    }
}

impl<T: Scalar> AttentionConfig<T> {
    fn build(
        mechanism: Mechanism,
        tokens: usize,
        dim: usize,
        heads: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        if tokens == 0 || dim == 0 || heads == 0 {
            return Err(Error::Config(format!(
                "tokens, dim and heads must be positive (got {tokens}, {dim}, {heads})"
            )));
        }
        if !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let head_dim = dim / heads;
        let groups = mechanism.kv_groups(heads);
        if groups == 0 || !heads.is_multiple_of(groups) {
            return Err(Error::Config(format!("{groups} groups do not divide {heads} heads")));
        }
        let (kernel_sizes, scale_dim) = match mechanism {
            Mechanism::Reuse => (kernel_schedule(heads)?, dim),
            _ => (Vec::new(), head_dim),
        };
        let cfg = AttentionConfig {
            tokens,
            dim,
            heads,
            head_dim,
            kernel_sizes,
            grid,
            mechanism,
            scale: T::of_usize(scale_dim).sqrt(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reuse Attention over tokens laid out on an `H_s x W_s` grid.
    pub fn reuse(tokens: usize, dim: usize, heads: usize, grid: (usize, usize)) -> Result<Self> {
        Self::build(Mechanism::Reuse, tokens, dim, heads, grid)
    }

    pub fn multi_head(tokens: usize, dim: usize, heads: usize) -> Result<Self> {
        Self::build(Mechanism::MultiHead, tokens, dim, heads, (tokens, 1))
    }

    pub fn grouped_query(tokens: usize, dim: usize, heads: usize, groups: usize) -> Result<Self> {
        Self::build(Mechanism::GroupedQuery { groups }, tokens, dim, heads, (tokens, 1))
    }

    pub fn multi_query(tokens: usize, dim: usize, heads: usize) -> Result<Self> {
        Self::build(Mechanism::MultiQuery, tokens, dim, heads, (tokens, 1))
    }

    /// Replaces the default kernel schedule (reuse only).
    pub fn with_kernel_sizes(mut self, sizes: Vec<usize>) -> Result<Self> {
        if self.mechanism != Mechanism::Reuse {
            return Err(Error::Config("kernel sizes only apply to reuse attention".into()));
        }
        self.kernel_sizes = sizes;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads * self.head_dim != self.dim {
            return Err(Error::Config(format!(
                "dim {} != heads {} * head_dim {}",
                self.dim, self.heads, self.head_dim
            )));
        }
        if self.grid.0 * self.grid.1 != self.tokens {
            return Err(Error::Config(format!(
                "grid {}x{} does not hold {} tokens",
                self.grid.0, self.grid.1, self.tokens
            )));
        }
        if self.mechanism == Mechanism::Reuse {
            if self.kernel_sizes.len() != self.heads {
                return Err(Error::Config(format!(
                    "{} kernel sizes for {} heads",
                    self.kernel_sizes.len(),
                    self.heads
                )));
            }
            if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
                return Err(Error::Config(format!("kernel size {k} is not odd")));
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn kernel_sizes(&self) -> &[usize] {
        &self.kernel_sizes
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn mechanism(&self) -> Mechanism {
        self.mechanism
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn kv_groups(&self) -> usize {
        self.mechanism.kv_groups(self.heads)
    }

    pub(crate) fn expect_mechanism(&self, expected: &[Mechanism], op: &str) -> Result<()> {
        let ok = expected.iter().any(|m| {
            std::mem::discriminant(m) == std::mem::discriminant(&self.mechanism)
        });
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{op} called with a {} config",
                self.mechanism.name()
            )))
        }
    }

    pub(crate) fn check_input(&self, x: &Tensor<T>, op: &'static str) -> Result<()> {
        if x.shape() != [self.tokens, self.dim] {
            return Err(Error::dim(op, &[self.tokens, self.dim], x.shape()));
        }
        Ok(())
    }
}

/// Weights of one attention layer.
///
/// * reuse: `w_q`, `w_k` are `D x D`; `w_v` holds `h` matrices `d x d`;
///   `dw_kernels` holds `h` tensors `k_i x k_i x d`; no `w_o`.
/// * multi-head / grouped / multi-query: `w_q` is `D x D`, `w_k` is
///   `D x (g*d)`, `w_v` holds `g` matrices `D x d`, `w_o` is `D x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Vec<Tensor<T>>,
    pub dw_kernels: Vec<Tensor<T>>,
    pub w_o: Option<Tensor<T>>,
}

impl<T: Scalar> AttentionParams<T> {
    /// Uniform `+-1/sqrt(fan_in)` initialisation.
    pub fn init<R: Rng + ?Sized>(cfg: &AttentionConfig<T>, rng: &mut R) -> Self {
        let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let (dim, d) = (cfg.dim, cfg.head_dim);
        match cfg.mechanism {
            Mechanism::Reuse => AttentionParams {
                w_q: Tensor::uniform(&[dim, dim], bound(dim), rng),
                w_k: Tensor::uniform(&[dim, dim], bound(dim), rng),
                w_v: (0..cfg.heads)
                    .map(|_| Tensor::uniform(&[d, d], bound(d), rng))
                    .collect(),
                dw_kernels: cfg
                    .kernel_sizes
                    .iter()
                    .map(|&k| Tensor::uniform(&[k, k, d], bound(k * k), rng))
                    .collect(),
                w_o: None,
            },
            _ => {
                let g = cfg.kv_groups();
                AttentionParams {
                    w_q: Tensor::uniform(&[dim, dim], bound(dim), rng),
                    w_k: Tensor::uniform(&[dim, g * d], bound(dim), rng),
                    w_v: (0..g).map(|_| Tensor::uniform(&[dim, d], bound(dim), rng)).collect(),
                    dw_kernels: Vec::new(),
                    w_o: Some(Tensor::uniform(&[dim, dim], bound(dim), rng)),
                }
            }
        }
    }

    /// All-zero parameters with the same shapes.
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.shape());
        AttentionParams {
            w_q: z(&self.w_q),
            w_k: z(&self.w_k),
            w_v: self.w_v.iter().map(z).collect(),
            dw_kernels: self.dw_kernels.iter().map(z).collect(),
            w_o: self.w_o.as_ref().map(z),
        }
    }

    /// Every parameter tensor in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.w_q, &self.w_k];
        out.extend(&self.w_v);
        out.extend(&self.dw_kernels);
        out.extend(&self.w_o);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.w_q, &mut self.w_k];
        out.extend(&mut self.w_v);
        out.extend(&mut self.dw_kernels);
        out.extend(&mut self.w_o);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn validate(&self, cfg: &AttentionConfig<T>) -> Result<()> {
        let (dim, d) = (cfg.dim, cfg.head_dim);
        let want = |t: &Tensor<T>, shape: &[usize]| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::dim("AttentionParams", shape, t.shape()))
            }
        };
        want(&self.w_q, &[dim, dim])?;
        let count = |what: &str, got: usize, expect: usize| {
            if got == expect {
                Ok(())
            } else {
                Err(Error::Config(format!("expected {expect} {what}, got {got}")))
            }
        };
        match cfg.mechanism {
            Mechanism::Reuse => {
                want(&self.w_k, &[dim, dim])?;
                count("value projections", self.w_v.len(), cfg.heads)?;
                count("depthwise kernels", self.dw_kernels.len(), cfg.heads)?;
                for w in &self.w_v {
                    want(w, &[d, d])?;
                }
                for (kt, &k) in self.dw_kernels.iter().zip(&cfg.kernel_sizes) {
                    want(kt, &[k, k, d])?;
                }
                if self.w_o.is_some() {
                    return Err(Error::Config("reuse attention has no output projection".into()));
                }
            }
            _ => {
                let g = cfg.kv_groups();
                want(&self.w_k, &[dim, g * d])?;
                count("value projections", self.w_v.len(), g)?;
                for w in &self.w_v {
                    want(w, &[dim, d])?;
                }
                match &self.w_o {
                    Some(w) => want(w, &[dim, dim])?,
                    None => return Err(Error::Config("missing output projection".into())),
                }
            }
        }
        Ok(())
    }
}

/// Gradients of a scalar loss with respect to the layer input and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads<T> {
    pub x: Tensor<T>,
    pub params: AttentionParams<T>,
}

/// Backward of `a = row_softmax(s, scale)`: returns `dL/ds`.
pub(crate) fn softmax_backward<T: Scalar>(
    a: &Tensor<T>,
    d_a: &Tensor<T>,
    scale: T,
) -> Result<Tensor<T>> {
    let (r, c) = a.dims2("softmax_backward")?;
    if d_a.shape() != a.shape() {
        return Err(Error::dim("softmax_backward", a.shape(), d_a.shape()));
    }
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let (ar, gr) = (a.row(i), d_a.row(i));
        let dot: T = ar.iter().zip(gr).map(|(&p, &g)| p * g).sum();
        for j in 0..c {
            out.set(i, j, ar[j] * (gr[j] - dot) / scale);
        }
    }
    Ok(out)
}
