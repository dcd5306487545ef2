use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::traffic::TrafficRecorder;

use super::config::UniFormConfig;
use super::layers::{Block, BlockCache, Conv, Linear, Params};

/// A UniForm network: patch embedding, three stages of blocks with
/// downsampling in between, average pooling and a linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct UniFormModel<T> {
    cfg: UniFormConfig,
    pub patch_embed: Vec<Conv<T>>,
    pub stages: Vec<Vec<Block<T>>>,
    pub downsample: Vec<Conv<T>>,
    pub head: Linear<T>,
}

/// Per-block observations collected by [`UniFormModel::forward_probed`].
#[derive(Debug, Clone)]
pub struct BlockProbe {
    /// 1-based stage number.
    pub stage: usize,
    pub block: usize,
    pub tokens: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub traffic: TrafficRecorder,
    /// Largest `|row sum - 1|` of the attention matrix.
    pub row_sum_error: f64,
    /// Smallest attention entry.
    pub min_entry: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardProbe {
    pub blocks: Vec<BlockProbe>,
}

impl ForwardProbe {
    /// Attention traffic summed over all blocks.
    pub fn total_traffic(&self) -> TrafficRecorder {
        let mut all = TrafficRecorder::new();
        for b in &self.blocks {
            all.merge(&b.traffic);
        }
        all
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.row_sum_error).fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.blocks.iter().map(|b| b.min_entry).fold(f64::INFINITY, f64::min)
    }
}

struct Trace<T> {
    embed_inputs: Vec<Tensor<T>>,
    embed_outputs: Vec<Tensor<T>>,
    blocks: Vec<Vec<BlockCache<T>>>,
    down_inputs: Vec<Tensor<T>>,
    pooled: Tensor<T>,
}

impl<T: Scalar> UniFormModel<T> {
    /// Builds a model with weights drawn from `U(+-1/sqrt(fan_in))` using a
    /// ChaCha8 stream seeded by `seed`. Layer norms start at identity.
    pub fn build(cfg: &UniFormConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let grids = cfg.stage_grids(cfg.resolution)?;
        let schedules = cfg.kernel_schedules()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init =
            |shape: &[usize], fan_in: usize| Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), &mut rng);

        let mut patch_embed = Vec::new();
        let mut cin = 3;
        for w in cfg.patch_widths() {
            patch_embed.push(Conv::new(3, cin, w, 2, &mut init));
            cin = w;
        }

        let mut stages = Vec::with_capacity(3);
        let mut downsample = Vec::with_capacity(2);
        for s in 0..3 {
            let (c, h, grid) = (cfg.channels[s], cfg.heads[s], grids[s]);
            let mut blocks = Vec::with_capacity(cfg.depths[s]);
            for _ in 0..cfg.depths[s] {
                let acfg = AttentionConfig::reuse(grid.0 * grid.1, c, h, grid)?
                    .with_kernel_sizes(schedules[s].clone())?;
                blocks.push(Block::new(acfg, cfg.ffn_ratio, &mut init));
            }
            stages.push(blocks);
            if s < 2 {
                downsample.push(Conv::new(3, c, cfg.channels[s + 1], 2, &mut init));
            }
        }
        let head = Linear::new(cfg.channels[2], cfg.num_classes, &mut init);
        Ok(UniFormModel {
            cfg: cfg.clone(),
            patch_embed,
            stages,
            downsample,
            head,
        })
    }

    pub fn config(&self) -> &UniFormConfig {
        &self.cfg
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let (h, w, c) = image.dims3("patch_embed")?;
        if c != 3 {
            return Err(Error::dim("patch_embed", &[h, w, 3], image.shape()));
        }
        self.cfg.check_resolution(h)?;
        self.cfg.check_resolution(w)?;
        if h != self.cfg.resolution || w != self.cfg.resolution {
            return Err(Error::Config(format!(
                "input is {h}x{w}, model was built for {r}x{r}",
                r = self.cfg.resolution
            )));
        }
        Ok(())
    }

    /// Overlapping patch embedding of one `H x W x 3` image into `N x C1`
    /// tokens and their grid.
    pub fn patch_embed(&self, image: &Tensor<T>) -> Result<(Tensor<T>, (usize, usize))> {
        let (h, w, _) = image.dims3("patch_embed")?;
        self.cfg.check_resolution(h)?;
        self.cfg.check_resolution(w)?;
        let (tokens, grid, _, _) = self.embed_traced(image)?;
        Ok((tokens, grid))
    }

    #[allow(clippy::type_complexity)]
    fn embed_traced(&self, image: &Tensor<T>) -> Result<(Tensor<T>, (usize, usize), Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let mut inputs = Vec::with_capacity(self.patch_embed.len());
        let mut outputs = Vec::with_capacity(self.patch_embed.len());
        let mut x = image.clone();
        let last = self.patch_embed.len() - 1;
        for (i, conv) in self.patch_embed.iter().enumerate() {
            let mut y = conv.forward(&x)?;
            if i < last {
                y = y.map(|v| v.max(T::zero()));
            }
            inputs.push(x);
            outputs.push(y.clone());
            x = y;
        }
        let (gh, gw, c) = x.dims3("patch_embed")?;
        Ok((x.reshape(&[gh * gw, c])?, (gh, gw), inputs, outputs))
    }

    /// Stride-2 convolution from stage `stage` to `stage + 1` (1-based).
    pub fn downsample(&self, tokens: &Tensor<T>, grid: (usize, usize), stage: usize) -> Result<(Tensor<T>, (usize, usize))> {
        if stage == 0 || stage > self.downsample.len() {
            return Err(Error::Parameter(format!(
                "downsample stage must be 1..={}, got {stage}",
                self.downsample.len()
            )));
        }
        let (n, c) = tokens.dims2("downsample")?;
        if n != grid.0 * grid.1 {
            return Err(Error::dim("downsample", &[grid.0 * grid.1, c], tokens.shape()));
        }
        let y = self.downsample[stage - 1].forward(&tokens.clone().reshape(&[grid.0, grid.1, c])?)?;
        let (gh, gw, c2) = y.dims3("downsample")?;
        Ok((y.reshape(&[gh * gw, c2])?, (gh, gw)))
    }

    fn forward_one(&self, image: &Tensor<T>, mut probe: Option<&mut ForwardProbe>) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_image(image)?;
        let (mut x, mut grid, embed_inputs, embed_outputs) = self.embed_traced(image)?;
        let mut blocks = Vec::with_capacity(3);
        let mut down_inputs = Vec::with_capacity(2);
        for (s, stage) in self.stages.iter().enumerate() {
            let mut caches = Vec::with_capacity(stage.len());
            for (b, block) in stage.iter().enumerate() {
                let mut rec = probe.as_ref().map(|_| TrafficRecorder::new());
                let (y, cache) = block.forward(&x, rec.as_mut())?;
                if let Some(p) = probe.as_deref_mut() {
                    let a = cache.attn.attn.attention();
                    let (n, _) = a.dims2("probe")?;
                    let mut err = 0.0f64;
                    for i in 0..n {
                        let sum: T = a.row(i).iter().copied().sum();
                        err = err.max((sum.to_f64_lossy() - 1.0).abs());
                    }
                    let min = a.data().iter().map(|v| v.to_f64_lossy()).fold(f64::INFINITY, f64::min);
                    let acfg = &block.attn.cfg;
                    p.blocks.push(BlockProbe {
                        stage: s + 1,
                        block: b,
                        tokens: acfg.tokens(),
                        head_dim: acfg.head_dim(),
                        heads: acfg.heads(),
                        traffic: rec.unwrap_or_default(),
                        row_sum_error: err,
                        min_entry: min,
                    });
                }
                caches.push(cache);
                x = y;
            }
            blocks.push(caches);
            if s < self.downsample.len() {
                let c = x.shape()[1];
                down_inputs.push(x.clone().reshape(&[grid.0, grid.1, c])?);
                (x, grid) = self.downsample(&x, grid, s + 1)?;
            }
        }
        let (n, c) = x.dims2("pool")?;
        let inv = T::one() / T::of_usize(n);
        let pooled = Tensor::from_fn(&[1, c], |j| (0..n).map(|i| x.at(i, j)).sum::<T>() * inv);
        let logits = self.head.forward(&pooled)?;
        let trace = Trace {
            embed_inputs,
            embed_outputs,
            blocks,
            down_inputs,
            pooled,
        };
        Ok((logits.reshape(&[self.cfg.num_classes])?, trace))
    }

    /// Logits for a batch of `B x H x W x 3` images, shape `B x classes`.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_batch(images, None)
    }

    /// Like [`forward`](Self::forward), also recording per-block attention
    /// traffic and row-stochasticity of every attention matrix.
    pub fn forward_probed(&self, images: &Tensor<T>) -> Result<(Tensor<T>, ForwardProbe)> {
        let mut probe = ForwardProbe::default();
        let logits = self.forward_batch(images, Some(&mut probe))?;
        Ok((logits, probe))
    }

    fn forward_batch(&self, images: &Tensor<T>, mut probe: Option<&mut ForwardProbe>) -> Result<Tensor<T>> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::dim("forward", &[0, self.cfg.resolution, self.cfg.resolution, 3], shape));
        }
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let per = h * w * c;
        let k = self.cfg.num_classes;
        let mut out = Vec::with_capacity(b * k);
        for i in 0..b {
            let image = Tensor::new_unchecked(vec![h, w, c], images.data()[i * per..(i + 1) * per].to_vec());
            let (logits, _) = self.forward_one(&image, probe.as_deref_mut())?;
            out.extend_from_slice(logits.data());
        }
        Tensor::new(&[b, k], out)
    }

    /// Logits of one `H x W x 3` image and the gradient of a scalar loss with
    /// respect to every parameter, given `d_logits = dL/d(logits)`. The
    /// gradient is returned as a model of the same shape.
    pub fn backward(&self, image: &Tensor<T>, d_logits: &Tensor<T>) -> Result<(Tensor<T>, UniFormModel<T>)> {
        let (logits, trace) = self.forward_one(image, None)?;
        if d_logits.len() != self.cfg.num_classes {
            return Err(Error::dim("backward", logits.shape(), d_logits.shape()));
        }
        let mut grad = self.zeros_like();
        let dl = d_logits.clone().reshape(&[1, self.cfg.num_classes])?;
        let d_pooled = self.head.backward(&trace.pooled, &dl, &mut grad.head)?;

        let mut grid = self.cfg.stage_grids(self.cfg.resolution)?[2];
        let c3 = self.cfg.channels[2];
        let n3 = grid.0 * grid.1;
        let inv = T::one() / T::of_usize(n3);
        let mut dx = Tensor::from_fn(&[n3, c3], |i| d_pooled.data()[i % c3] * inv);

        for s in (0..self.stages.len()).rev() {
            if s < self.downsample.len() {
                let xin = &trace.down_inputs[s];
                let (gh, gw, c) = xin.dims3("backward")?;
                let (oh, ow) = grid;
                let dy = dx.reshape(&[oh, ow, self.cfg.channels[s + 1]])?;
                dx = self.downsample[s]
                    .backward(xin, &dy, &mut grad.downsample[s])?
                    .reshape(&[gh * gw, c])?;
                grid = (gh, gw);
            }
            for (b, block) in self.stages[s].iter().enumerate().rev() {
                dx = block.backward(&trace.blocks[s][b], &dx, &mut grad.stages[s][b])?;
            }
        }

        let last = self.patch_embed.len() - 1;
        let c1 = self.cfg.channels[0];
        let mut d = dx.reshape(&[grid.0, grid.1, c1])?;
        for i in (0..=last).rev() {
            if i < last {
                let act = &trace.embed_outputs[i];
                d = d.zip_map(act, |g, a| if a > T::zero() { g } else { T::zero() })?;
            }
            d = self.patch_embed[i].backward(&trace.embed_inputs[i], &d, &mut grad.patch_embed[i])?;
        }
        Ok((logits, grad))
    }

    /// Same structure with every parameter set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.parameters_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// Every parameter tensor with a dotted name, in declaration order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.patch_embed.iter().enumerate() {
            c.collect(&format!("patch_embed.{i}"), &mut out);
        }
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.collect(&format!("stage{}.{b}", s + 1), &mut out);
            }
            if let Some(d) = self.downsample.get(s) {
                d.collect(&format!("downsample{}", s + 1), &mut out);
            }
        }
        self.head.collect("head", &mut out);
        out
    }

    /// Mutable parameter tensors in the order of
    /// [`named_parameters`](Self::named_parameters).
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for c in &mut self.patch_embed {
            c.collect_mut(&mut out);
        }
        let mut down = self.downsample.iter_mut();
        for stage in &mut self.stages {
            for block in stage {
                block.collect_mut(&mut out);
            }
            if let Some(d) = down.next() {
                d.collect_mut(&mut out);
            }
        }
        self.head.collect_mut(&mut out);
        out
    }

    /// Exact number of scalar parameters.
    pub fn count_params(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }
}

/// A batch of `B x R x R x 3` images with entries drawn from `U(-1, 1)`.
pub fn synthetic_images<T: Scalar>(batch: usize, resolution: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[batch, resolution, resolution, 3], 1.0, &mut rng)
}
