//! Four-level Unet producing a per-pixel keypoint probability.
//!
//! Encoder level: two (conv3×3 → batch-norm → ReLU) blocks, then 2×2 max-pool.
//! Bottleneck: two blocks at twice the deepest width.
//! Decoder level: nearest upsample → conv3×3 → concat skip → two blocks.
//! Head: conv1×1 → sigmoid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, BnCache};
use super::tensor::Tensor4;
use crate::error::{Error, Result};
use crate::features::ScoreMap;
use crate::imaging::GrayImage;

pub const LEVELS: usize = 4;
/// Spatial dims must be divisible by this (one halving per level).
pub const DIVISOR: usize = 1 << LEVELS;

/// Encoder widths, shallowest first. The bottleneck doubles the last one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPlan(pub [usize; LEVELS]);

impl Default for ChannelPlan {
    fn default() -> Self {
        ChannelPlan([8, 16, 32, 64])
    }
}

impl ChannelPlan {
    pub const TOY: ChannelPlan = ChannelPlan([2, 4, 8, 16]);

    pub fn validate(&self) -> Result<()> {
        if self.0.contains(&0) {
            return Err(Error::invalid("channel widths must be positive"));
        }
        Ok(())
    }

    pub fn bottleneck(&self) -> usize {
        2 * self.0[LEVELS - 1]
    }
}

/// Trainable parameter count for the default plan (8, 16, 32, 64).
pub const DEFAULT_PARAMETER_COUNT: usize = 540_809;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    weight: usize,
    bias: Option<usize>,
    cout: usize,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockSpec {
    conv: ConvSpec,
    gamma: usize,
    beta: usize,
    /// Index into `buffers`; the running variance follows at `stats + 1`.
    stats: usize,
}

#[derive(Debug, Clone)]
struct DecoderSpec {
    up: ConvSpec,
    blocks: [BlockSpec; 2],
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<[BlockSpec; 2]>,
    bottleneck: [BlockSpec; 2],
    decoder: Vec<DecoderSpec>,
    head: ConvSpec,
}

impl Layout {
    /// Blocks in forward execution order.
    fn blocks_in_order(&self) -> Vec<BlockSpec> {
        let mut out: Vec<BlockSpec> = self.encoder.iter().flatten().copied().collect();
        out.extend(self.bottleneck);
        for l in (0..LEVELS).rev() {
            out.extend(self.decoder[l].blocks);
        }
        out
    }
}

struct Builder {
    params: Vec<Param>,
    buffers: Vec<Param>,
}

impl Builder {
    fn param(&mut self, name: String, dims: Vec<usize>, value: f64) -> usize {
        let len = dims.iter().product();
        self.params.push(Param {
            name,
            dims,
            data: vec![value; len],
        });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> ConvSpec {
        let weight = self.param(format!("{name}.weight"), vec![cout, cin, k, k], 0.0);
        let bias = bias.then(|| self.param(format!("{name}.bias"), vec![cout], 0.0));
        ConvSpec { weight, bias, cout, k }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> BlockSpec {
        // batch-norm follows, so a conv bias would be redundant
        let conv = self.conv(&format!("{name}.conv"), cin, cout, 3, false);
        let gamma = self.param(format!("{name}.bn.gamma"), vec![cout], 1.0);
        let beta = self.param(format!("{name}.bn.beta"), vec![cout], 0.0);
        let stats = self.buffers.len();
        self.buffers.push(Param {
            name: format!("{name}.bn.running_mean"),
            dims: vec![cout],
            data: vec![0.0; cout],
        });
        self.buffers.push(Param {
            name: format!("{name}.bn.running_var"),
            dims: vec![cout],
            data: vec![1.0; cout],
        });
        BlockSpec {
            conv,
            gamma,
            beta,
            stats,
        }
    }
}

/// Network weights plus batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct UnetParams {
    plan: ChannelPlan,
    pub params: Vec<Param>,
    pub buffers: Vec<Param>,
    layout: Layout,
}

pub type Grads = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct BlockCache {
    input: Tensor4,
    bn: BnCache,
    out: Tensor4,
}

/// Activations retained by a train-mode forward pass.
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    pools: Vec<(Vec<usize>, (usize, usize, usize, usize))>,
    ups: Vec<Tensor4>,
    head_in: Tensor4,
    scores: Tensor4,
}

impl ForwardCache {
    pub fn scores(&self) -> &Tensor4 {
        &self.scores
    }

    /// True when both passes took the same ReLU and max-pool branches.
    pub fn same_activation_pattern(&self, other: &ForwardCache) -> bool {
        self.pools.iter().zip(&other.pools).all(|(a, b)| a.0 == b.0)
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
                a.out
                    .data
                    .iter()
                    .zip(&b.out.data)
                    .all(|(x, y)| (*x > 0.0) == (*y > 0.0))
            })
    }
}

impl UnetParams {
    /// Builds the network with He-uniform weights, zero biases, γ = 1, β = 0.
    pub fn new<R: Rng + ?Sized>(plan: ChannelPlan, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeroed(plan)?;
        for p in &mut net.params {
            if p.name.ends_with(".weight") {
                let fan_in: usize = p.dims[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in &mut p.data {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        if plan == ChannelPlan::default() {
            assert_eq!(net.num_parameters(), DEFAULT_PARAMETER_COUNT);
        }
        Ok(net)
    }

    /// All weights zero; batch-norm at identity.
    pub fn zeroed(plan: ChannelPlan) -> Result<Self> {
        plan.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            buffers: Vec::new(),
        };
        let widths = plan.0;
        let mut encoder = Vec::with_capacity(LEVELS);
        let mut cin = 1;
        for (l, &c) in widths.iter().enumerate() {
            encoder.push([b.block(&format!("enc{l}.0"), cin, c), b.block(&format!("enc{l}.1"), c, c)]);
            cin = c;
        }
        let cb = plan.bottleneck();
        let bottleneck = [b.block("mid.0", cin, cb), b.block("mid.1", cb, cb)];
        let mut decoder: Vec<Option<DecoderSpec>> = vec![None; LEVELS];
        let mut below = cb;
        for l in (0..LEVELS).rev() {
            let c = widths[l];
            let up = b.conv(&format!("dec{l}.up"), below, c, 3, true);
            let blocks = [b.block(&format!("dec{l}.0"), 2 * c, c), b.block(&format!("dec{l}.1"), c, c)];
            decoder[l] = Some(DecoderSpec { up, blocks });
            below = c;
        }
        let head = b.conv("head", widths[0], 1, 1, true);
        Ok(UnetParams {
            plan,
            params: b.params,
            buffers: b.buffers,
            layout: Layout {
                encoder,
                bottleneck,
                decoder: decoder.into_iter().map(|d| d.expect("all levels built")).collect(),
                head,
            },
        })
    }

    pub fn plan(&self) -> ChannelPlan {
        self.plan
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }

    fn conv_fwd(&self, spec: &ConvSpec, x: &Tensor4) -> Tensor4 {
        let bias = spec.bias.map(|i| self.params[i].data.as_slice());
        layers::conv2d(x, &self.params[spec.weight].data, bias, spec.cout, spec.k)
    }

    fn block_fwd(&self, spec: &BlockSpec, x: Tensor4, cache: Option<&mut Vec<BlockCache>>) -> Tensor4 {
        let z = self.conv_fwd(&spec.conv, &x);
        let gamma = &self.params[spec.gamma].data;
        let beta = &self.params[spec.beta].data;
        match cache {
            Some(caches) => {
                let (mut y, bn) = layers::batchnorm_train(&z, gamma, beta);
                layers::relu_inplace(&mut y);
                caches.push(BlockCache {
                    input: x,
                    bn,
                    out: y.clone(),
                });
                y
            }
            None => {
                let rm = &self.buffers[spec.stats].data;
                let rv = &self.buffers[spec.stats + 1].data;
                let mut y = layers::batchnorm_eval(&z, gamma, beta, rm, rv);
                layers::relu_inplace(&mut y);
                y
            }
        }
    }

    /// Forward pass over an `n × 1 × h × w` batch. Train mode normalizes with
    /// batch statistics and returns the activation cache; it does not touch
    /// the running statistics (see [`UnetParams::update_running_stats`]).
    pub fn forward(&self, x: &Tensor4, mode: Mode) -> Result<(Tensor4, Option<ForwardCache>)> {
        if x.c != 1 {
            return Err(Error::dim(format!("expected 1 input channel, got {}", x.c)));
        }
        if x.h % DIVISOR != 0 || x.w % DIVISOR != 0 || x.h == 0 || x.w == 0 || x.n == 0 {
            return Err(Error::dim(format!(
                "input {}x{} not divisible by {DIVISOR}",
                x.w, x.h
            )));
        }
        let train = mode == Mode::Train;
        let mut blocks = Vec::new();
        let mut pools = Vec::new();
        let mut ups = Vec::new();
        let mut skips = Vec::with_capacity(LEVELS);

        let mut h = x.clone();
        for spec in &self.layout.encoder {
            h = self.block_fwd(&spec[0], h, train.then_some(&mut blocks));
            h = self.block_fwd(&spec[1], h, train.then_some(&mut blocks));
            let (p, arg) = layers::maxpool2(&h);
            if train {
                pools.push((arg, h.dims()));
            }
            skips.push(h);
            h = p;
        }
        for spec in &self.layout.bottleneck {
            h = self.block_fwd(spec, h, train.then_some(&mut blocks));
        }
        for l in (0..LEVELS).rev() {
            let spec = &self.layout.decoder[l];
            let u = layers::upsample2(&h);
            let up = self.conv_fwd(&spec.up, &u);
            if train {
                ups.push(u);
            }
            let cat = layers::concat(&up, &skips[l]);
            h = self.block_fwd(&spec.blocks[0], cat, train.then_some(&mut blocks));
            h = self.block_fwd(&spec.blocks[1], h, train.then_some(&mut blocks));
        }
        let mut s = self.conv_fwd(&self.layout.head, &h);
        for v in &mut s.data {
            *v = layers::sigmoid(*v);
        }
        let cache = train.then(|| ForwardCache {
            blocks,
            pools,
            ups,
            head_in: h,
            scores: s.clone(),
        });
        Ok((s, cache))
    }

    /// Folds the batch statistics of a train-mode pass into the running averages.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (spec, bc) in self.layout.blocks_in_order().iter().zip(&cache.blocks) {
            let (lo, hi) = self.buffers.split_at_mut(spec.stats + 1);
            layers::update_running_stats(&bc.bn, &mut lo[spec.stats].data, &mut hi[0].data);
        }
    }

    fn block_bwd(&self, spec: &BlockSpec, cache: &BlockCache, dy: &Tensor4, grads: &mut Grads) -> Tensor4 {
        let d = layers::relu_backward(dy, &cache.out);
        let (dz, dgamma, dbeta) = layers::batchnorm_backward(&d, &cache.bn, &self.params[spec.gamma].data);
        add_into(&mut grads[spec.gamma], &dgamma);
        add_into(&mut grads[spec.beta], &dbeta);
        let cg = layers::conv2d_backward(&cache.input, &self.params[spec.conv.weight].data, &dz, 3, false);
        add_into(&mut grads[spec.conv.weight], &cg.dweight);
        cg.dx
    }

    fn conv_bwd(&self, spec: &ConvSpec, input: &Tensor4, dy: &Tensor4, grads: &mut Grads) -> Tensor4 {
        let cg = layers::conv2d_backward(input, &self.params[spec.weight].data, dy, spec.k, spec.bias.is_some());
        add_into(&mut grads[spec.weight], &cg.dweight);
        if let (Some(b), Some(db)) = (spec.bias, cg.dbias) {
            add_into(&mut grads[b], &db);
        }
        cg.dx
    }

    /// Reverse-mode gradients of every parameter given dL/dS.
    pub fn backward(&self, cache: &ForwardCache, d_scores: &Tensor4) -> Result<Grads> {
        if d_scores.dims() != cache.scores.dims() {
            return Err(Error::dim(format!(
                "score gradient {:?} does not match scores {:?}",
                d_scores.dims(),
                cache.scores.dims()
            )));
        }
        let mut grads = self.zero_grads();
        let mut dz = d_scores.clone();
        for (d, s) in dz.data.iter_mut().zip(&cache.scores.data) {
            *d *= s * (1.0 - s);
        }
        let mut dh = self.conv_bwd(&self.layout.head, &cache.head_in, &dz, &mut grads);

        let mut bi = cache.blocks.len();
        let mut next_block = || {
            bi -= 1;
            bi
        };
        let mut dskips: Vec<Option<Tensor4>> = vec![None; LEVELS];
        for l in 0..LEVELS {
            let spec = &self.layout.decoder[l];
            let i1 = next_block();
            dh = self.block_bwd(&spec.blocks[1], &cache.blocks[i1], &dh, &mut grads);
            let i0 = next_block();
            dh = self.block_bwd(&spec.blocks[0], &cache.blocks[i0], &dh, &mut grads);
            let (dup, dskip) = layers::concat_backward(&dh, spec.up.cout);
            dskips[l] = Some(dskip);
            // decoder level l consumed ups[LEVELS - 1 - l]
            let du = self.conv_bwd(&spec.up, &cache.ups[LEVELS - 1 - l], &dup, &mut grads);
            dh = layers::upsample2_backward(&du);
        }
        for spec in self.layout.bottleneck.iter().rev() {
            let i = next_block();
            dh = self.block_bwd(spec, &cache.blocks[i], &dh, &mut grads);
        }
        for l in (0..LEVELS).rev() {
            let (arg, dims) = &cache.pools[l];
            let mut d = layers::maxpool2_backward(&dh, arg, *dims);
            add_into(&mut d.data, &dskips[l].take().expect("skip gradient").data);
            let spec = &self.layout.encoder[l];
            let i1 = next_block();
            d = self.block_bwd(&spec[1], &cache.blocks[i1], &d, &mut grads);
            let i0 = next_block();
            dh = self.block_bwd(&spec[0], &cache.blocks[i0], &d, &mut grads);
        }
        Ok(grads)
    }

    /// Eval-mode score map for an image of any size: reflect-pads to a
    /// multiple of 16 and crops the result back.
    pub fn predict(&self, img: &GrayImage) -> Result<ScoreMap> {
        let maps = self.predict_batch(std::slice::from_ref(img))?;
        Ok(maps.into_iter().next().expect("one map per image"))
    }

    pub fn predict_batch(&self, imgs: &[GrayImage]) -> Result<Vec<ScoreMap>> {
        let Some(first) = imgs.first() else {
            return Ok(Vec::new());
        };
        let (w, h) = (first.width(), first.height());
        if imgs.iter().any(|i| i.width() != w || i.height() != h) {
            return Err(Error::dim("batch images must share dimensions"));
        }
        let x = images_to_tensor(imgs, true)?;
        let (s, _) = self.forward(&x, Mode::Eval)?;
        Ok(tensor_to_maps(&s, w, h))
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn round_up(v: usize) -> usize {
    v.div_ceil(DIVISOR) * DIVISOR
}

/// Mirror index for reflect padding (edge pixel not repeated).
fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Stacks images into an `n × 1 × h × w` tensor, optionally reflect-padding
/// each to the next multiple of 16.
pub fn images_to_tensor(imgs: &[GrayImage], pad: bool) -> Result<Tensor4> {
    let Some(first) = imgs.first() else {
        return Err(Error::dim("empty image batch"));
    };
    let (w, h) = (first.width(), first.height());
    let (pw, ph) = if pad { (round_up(w), round_up(h)) } else { (w, h) };
    let mut t = Tensor4::zeros(imgs.len(), 1, ph, pw);
    for (n, img) in imgs.iter().enumerate() {
        if img.width() != w || img.height() != h {
            return Err(Error::dim("batch images must share dimensions"));
        }
        let plane = t.plane_mut(n, 0);
        for y in 0..ph {
            let sy = reflect(y, h);
            for x in 0..pw {
                plane[y * pw + x] = img.get(reflect(x, w), sy);
            }
        }
    }
    Ok(t)
}

/// Splits an `n × 1 × H × W` score tensor into maps cropped to `w × h`.
pub fn tensor_to_maps(s: &Tensor4, w: usize, h: usize) -> Vec<ScoreMap> {
    (0..s.n)
        .map(|n| {
            let plane = s.plane(n, 0);
            let mut data = Vec::with_capacity(w * h);
            for y in 0..h {
                data.extend_from_slice(&plane[y * s.w..y * s.w + w]);
            }
            ScoreMap::from_raw(w, h, data)
        })
        .collect()
}
