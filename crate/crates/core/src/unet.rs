//! A compact U-Net assembled from the `nn` primitives.
//!
//! Every level is a double-conv block (two 3x3 conv + ReLU). The encoder
//! max-pools between levels, the decoder upsamples by nearest neighbour and
//! concatenates the matching encoder output before its block. A final 1x1
//! conv and sigmoid produce a single-channel probability map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{batch_hybrid_loss, PROB_CLAMP};
use crate::nn::{self, AdamHyper, AdamState, PoolIndices};
use crate::par;
use crate::params::ModelParams;
use crate::tensor::Tensor;

const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            height: 64,
            width: 64,
            depth: 2,
            base_channels: 8,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::config("U-Net depth must be at least 1"));
        }
        if self.base_channels < 1 {
            return Err(Error::config("base_channels must be at least 1"));
        }
        let step = 1usize << self.depth;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(step) || !self.width.is_multiple_of(step) {
            return Err(Error::config(format!(
                "input {}x{} is not divisible by 2^{}",
                self.height, self.width, self.depth
            )));
        }
        Ok(())
    }

    /// Same architecture on a different input size.
    pub fn with_input(self, height: usize, width: usize) -> Self {
        UNetConfig { height, width, ..self }
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Optimizer used for local updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

struct ConvSpec {
    name: String,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
}

fn conv_plan(cfg: &UNetConfig) -> Vec<ConvSpec> {
    let mut plan = Vec::new();
    let block = |name: String, in_ch: usize, out_ch: usize, plan: &mut Vec<ConvSpec>| {
        plan.push(ConvSpec { name: format!("{name}.conv1"), in_ch, out_ch, kernel: KERNEL });
        plan.push(ConvSpec { name: format!("{name}.conv2"), in_ch: out_ch, out_ch, kernel: KERNEL });
    };
    let mut in_ch = 1;
    for level in 0..cfg.depth {
        block(format!("enc{level}"), in_ch, cfg.level_channels(level), &mut plan);
        in_ch = cfg.level_channels(level);
    }
    block("bottleneck".into(), in_ch, cfg.level_channels(cfg.depth), &mut plan);
    for level in (0..cfg.depth).rev() {
        let up = cfg.level_channels(level + 1);
        let skip = cfg.level_channels(level);
        block(format!("dec{level}"), up + skip, skip, &mut plan);
    }
    plan.push(ConvSpec { name: "head".into(), in_ch: cfg.base_channels, out_ch: 1, kernel: 1 });
    plan
}

/// He-initialized parameters (normal, sd `sqrt(2 / fan_in)`), zero biases.
pub fn init_params(cfg: &UNetConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::new();
    for spec in conv_plan(cfg) {
        let fan_in = spec.in_ch * spec.kernel * spec.kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive sd");
        let n = spec.out_ch * fan_in;
        let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
        params.push(
            format!("{}.weight", spec.name),
            Tensor::new(&[spec.out_ch, spec.in_ch, spec.kernel, spec.kernel], data)?,
        )?;
        params.push(format!("{}.bias", spec.name), Tensor::zeros(&[spec.out_ch]))?;
    }
    Ok(params)
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Tensor,
    z1: Tensor,
    a1: Tensor,
    z2: Tensor,
}

#[derive(Debug, Clone)]
struct SampleCache {
    encoder: Vec<BlockCache>,
    pools: Vec<PoolIndices>,
    bottleneck: BlockCache,
    decoder: Vec<(BlockCache, usize)>,
    head_input: Tensor,
    prob: Tensor,
}

/// Activations recorded by [`UNetModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    samples: Vec<SampleCache>,
}

#[derive(Debug, Clone)]
pub struct UNetModel {
    config: UNetConfig,
    params: ModelParams,
    adam: AdamState,
    version: u64,
}

fn param<'a>(params: &'a ModelParams, name: &str) -> &'a Tensor {
    params.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
}

fn conv(params: &ModelParams, name: &str, x: &Tensor) -> Result<Tensor> {
    nn::conv2d(
        x,
        param(params, &format!("{name}.weight")),
        param(params, &format!("{name}.bias")),
    )
}

fn conv_back(params: &ModelParams, name: &str, x: &Tensor, g: &Tensor, grads: &mut ModelParams) -> Result<Tensor> {
    let lg = nn::conv2d_grad(x, param(params, &format!("{name}.weight")), g)?;
    *grads.get_mut(&format!("{name}.weight")).expect("layout") = lg.weight_grad.expect("conv has weights");
    *grads.get_mut(&format!("{name}.bias")).expect("layout") = lg.bias_grad.expect("conv has bias");
    Ok(lg.input_grad)
}

fn block_forward(params: &ModelParams, name: &str, input: Tensor) -> Result<(Tensor, BlockCache)> {
    let z1 = conv(params, &format!("{name}.conv1"), &input)?;
    let a1 = nn::relu(&z1);
    let z2 = conv(params, &format!("{name}.conv2"), &a1)?;
    let a2 = nn::relu(&z2);
    Ok((a2, BlockCache { input, z1, a1, z2 }))
}

fn block_backward(params: &ModelParams, name: &str, cache: &BlockCache, g_out: &Tensor, grads: &mut ModelParams) -> Result<Tensor> {
    let g_z2 = nn::relu_grad(&cache.z2, g_out)?;
    let g_a1 = conv_back(params, &format!("{name}.conv2"), &cache.a1, &g_z2, grads)?;
    let g_z1 = nn::relu_grad(&cache.z1, &g_a1)?;
    conv_back(params, &format!("{name}.conv1"), &cache.input, &g_z1, grads)
}

fn sample_forward(cfg: &UNetConfig, params: &ModelParams, input: Tensor) -> Result<SampleCache> {
    let mut encoder = Vec::with_capacity(cfg.depth);
    let mut pools = Vec::with_capacity(cfg.depth);
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = input;
    for level in 0..cfg.depth {
        let (a, cache) = block_forward(params, &format!("enc{level}"), x)?;
        let (pooled, idx) = nn::maxpool2(&a)?;
        encoder.push(cache);
        pools.push(idx);
        skips.push(a);
        x = pooled;
    }
    let (mut x, bottleneck) = block_forward(params, "bottleneck", x)?;
    let mut decoder = Vec::with_capacity(cfg.depth);
    for level in (0..cfg.depth).rev() {
        let up = nn::upsample2(&x)?;
        let split = up.shape()[0];
        let cat = nn::concat_channels(&up, &skips[level])?;
        let (a, cache) = block_forward(params, &format!("dec{level}"), cat)?;
        decoder.push((cache, split));
        x = a;
    }
    let logits = conv(params, "head", &x)?;
    let prob = nn::sigmoid(&logits).map(|p| p.clamp(PROB_CLAMP as f32, (1.0 - PROB_CLAMP) as f32));
    Ok(SampleCache { encoder, pools, bottleneck, decoder, head_input: x, prob })
}

fn sample_backward(cfg: &UNetConfig, params: &ModelParams, cache: &SampleCache, g_prob: &Tensor) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    let g_logits = Tensor::new(
        g_prob.shape(),
        g_prob
            .data()
            .iter()
            .zip(cache.prob.data())
            .map(|(&g, &p)| g * p * (1.0 - p))
            .collect(),
    )?;
    let mut g = conv_back(params, "head", &cache.head_input, &g_logits, &mut grads)?;
    let mut skip_grads: Vec<Option<Tensor>> = vec![None; cfg.depth];
    // decoder blocks were recorded deepest first; undo them shallowest first
    for level in 0..cfg.depth {
        let (block, split) = &cache.decoder[cfg.depth - 1 - level];
        let g_cat = block_backward(params, &format!("dec{level}"), block, &g, &mut grads)?;
        let (g_up, g_skip) = nn::split_grad(&g_cat, *split)?;
        skip_grads[level] = Some(g_skip);
        g = nn::upsample2_grad(&g_up)?;
    }
    g = block_backward(params, "bottleneck", &cache.bottleneck, &g, &mut grads)?;
    for level in (0..cfg.depth).rev() {
        let g_pool = nn::maxpool2_grad(&cache.pools[level], &g)?;
        let g_skip = skip_grads[level].take().expect("decoder visited every level");
        let g_a = Tensor::new(
            g_pool.shape(),
            g_pool.data().iter().zip(g_skip.data()).map(|(&a, &b)| a + b).collect(),
        )?;
        g = block_backward(params, &format!("enc{level}"), &cache.encoder[level], &g_a, &mut grads)?;
    }
    Ok(grads)
}

/// Sums per-sample gradients in order with a 64-bit accumulator.
fn sum_grads(parts: &[ModelParams]) -> ModelParams {
    let mut out = parts[0].zeros_like();
    for (i, t) in out.tensors_mut().enumerate() {
        let mut acc = vec![0.0f64; t.len()];
        for p in parts {
            let src = p.tensors().nth(i).expect("same layout").data();
            for (a, &v) in acc.iter_mut().zip(src) {
                *a += v as f64;
            }
        }
        for (d, a) in t.data_mut().iter_mut().zip(acc) {
            *d = a as f32;
        }
    }
    out
}

impl UNetModel {
    pub fn build(config: UNetConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(Self::from_parts(config, params))
    }

    /// Model with externally supplied parameters; the layout must match `config`.
    pub fn with_params(config: UNetConfig, params: ModelParams) -> Result<Self> {
        let reference = init_params(&config)?;
        reference.check_layout(&params)?;
        Ok(Self::from_parts(config, params))
    }

    fn from_parts(config: UNetConfig, params: ModelParams) -> Self {
        let adam = AdamState::new(&params, AdamHyper::default());
        UNetModel { config, params, adam, version: 0 }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn set_params(&mut self, params: ModelParams) -> Result<()> {
        self.params.check_layout(&params)?;
        self.params = params;
        self.version += 1;
        Ok(())
    }

    /// Fresh optimizer state with the given hyper-parameters.
    pub fn reset_optimizer(&mut self, hyper: AdamHyper) {
        self.adam = AdamState::new(&self.params, hyper);
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        match batch.shape() {
            &[n, 1, h, w] if h == self.config.height && w == self.config.width => Ok(n),
            other => Err(Error::shape(format!(
                "expected Nx1x{}x{}, got {other:?}",
                self.config.height, self.config.width
            ))),
        }
    }

    /// Probabilities (Nx1xHxW) and the activations needed by [`Self::backward`].
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let n = self.check_batch(batch)?;
        let samples: Vec<SampleCache> = par::map_range(n, |i| {
            sample_forward(&self.config, &self.params, batch.sample(i)?)
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(batch.len());
        for s in &samples {
            out.extend_from_slice(s.prob.data());
        }
        let probs = Tensor::new(batch.shape(), out)?;
        probs.ensure_finite("forward output")?;
        Ok((probs, ForwardCache { version: self.version, samples }))
    }

    /// Forward pass without retaining activations.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch).map(|(p, _)| p)
    }

    /// Gradient of the batch loss with respect to every parameter, given its
    /// gradient with respect to the output probabilities.
    pub fn backward(&self, cache: &ForwardCache, loss_grad: &Tensor) -> Result<ModelParams> {
        if cache.version != self.version {
            return Err(Error::StaleCache { cache: cache.version, model: self.version });
        }
        let n = cache.samples.len();
        let (h, w) = (self.config.height, self.config.width);
        if loss_grad.shape() != [n, 1, h, w] {
            return Err(Error::shape(format!(
                "loss grad {:?} does not match forward output [{n}, 1, {h}, {w}]",
                loss_grad.shape()
            )));
        }
        let parts: Vec<ModelParams> = par::map_range(n, |i| {
            sample_backward(&self.config, &self.params, &cache.samples[i], &loss_grad.sample(i)?)
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let grads = sum_grads(&parts);
        for t in grads.tensors() {
            t.ensure_finite("parameter gradient")?;
        }
        Ok(grads)
    }

    /// Applies one optimizer update and invalidates outstanding caches.
    pub fn apply_grads(&mut self, grads: &ModelParams, optimizer: Optimizer) -> Result<()> {
        match optimizer {
            Optimizer::Adam => nn::adam_step(&mut self.params, grads, &mut self.adam)?,
            Optimizer::Sgd => nn::sgd_step(
                &mut self.params,
                grads,
                self.adam.hyper.learning_rate,
                self.adam.hyper.l2_lambda,
            )?,
        }
        self.version += 1;
        Ok(())
    }

    /// Forward, hybrid loss, backward and one update. Returns the batch loss.
    pub fn train_batch(&mut self, batch: &Tensor, targets: &[crate::mask::BinaryMask], omega: f64, optimizer: Optimizer) -> Result<f64> {
        let (probs, cache) = self.forward(batch)?;
        let loss = batch_hybrid_loss(&probs, targets, omega)?;
        let grads = self.backward(&cache, &loss.grad)?;
        self.apply_grads(&grads, optimizer)?;
        Ok(loss.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig { height: 8, width: 8, depth: 1, base_channels: 2, seed: 7 }
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig { height: 7, ..tiny() }.validate().is_err());
        assert!(UNetConfig { depth: 0, ..tiny() }.validate().is_err());
        assert!(UNetConfig { base_channels: 0, ..tiny() }.validate().is_err());
        assert!(UNetModel::build(UNetConfig { width: 10, depth: 2, ..tiny() }).is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn same_seed_same_params() {
        let a = UNetModel::build(tiny()).unwrap();
        let b = UNetModel::build(tiny()).unwrap();
        let bits = |m: &UNetModel| m.params().flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = UNetModel::build(UNetConfig { seed: 8, ..tiny() }).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn desk_param_count() {
        // conv sizes for depth 2, base 8 (weights + biases):
        // enc0 1->8: 80, 8->8: 584; enc1 8->16: 1168, 16->16: 2320
        // bottleneck 16->32: 4640, 32->32: 9248
        // dec1 48->16: 6928, 16->16: 2320; dec0 24->8: 1736, 8->8: 584
        // head 8->1 (1x1): 9
        let cfg = UNetConfig { height: 64, width: 64, depth: 2, base_channels: 8, seed: 1 };
        let m = UNetModel::build(cfg).unwrap();
        assert_eq!(m.params().param_count(), 29_617);
    }

    #[test]
    fn biases_start_at_zero() {
        let m = UNetModel::build(tiny()).unwrap();
        for (name, t) in m.params().iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn output_shape_and_zero_model() {
        let cfg = tiny();
        let zero = init_params(&cfg).unwrap().zeros_like();
        let m = UNetModel::with_params(cfg, zero).unwrap();
        let batch = Tensor::full(&[3, 1, 8, 8], 0.3);
        let p = m.predict(&batch).unwrap();
        assert_eq!(p.shape(), &[3, 1, 8, 8]);
        assert!(p.data().iter().all(|&v| v == 0.5));
        assert!(m.predict(&Tensor::zeros(&[1, 1, 8, 16])).is_err());
    }

    #[test]
    fn identical_frames_identical_outputs() {
        let m = UNetModel::build(tiny()).unwrap();
        let frame: Vec<f32> = (0..64).map(|i| ((i * 37) % 11) as f32 / 11.0).collect();
        let mut data = frame.clone();
        data.extend_from_slice(&frame);
        let p = m.predict(&Tensor::new(&[2, 1, 8, 8], data).unwrap()).unwrap();
        assert_eq!(p.data()[..64], p.data()[64..]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_loss_grad_gives_zero_grads_with_matching_names() {
        let m = UNetModel::build(tiny()).unwrap();
        let batch = Tensor::full(&[2, 1, 8, 8], 0.7);
        let (_, cache) = m.forward(&batch).unwrap();
        let g = m.backward(&cache, &Tensor::zeros(&[2, 1, 8, 8])).unwrap();
        assert_eq!(g.names(), m.params().names());
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut m = UNetModel::build(tiny()).unwrap();
        let batch = Tensor::full(&[1, 1, 8, 8], 0.7);
        let (_, cache) = m.forward(&batch).unwrap();
        let g = m.backward(&cache, &Tensor::full(&[1, 1, 8, 8], 0.1)).unwrap();
        m.apply_grads(&g, Optimizer::Adam).unwrap();
        assert!(matches!(
            m.backward(&cache, &Tensor::zeros(&[1, 1, 8, 8])),
            Err(Error::StaleCache { .. })
        ));
    }
}
