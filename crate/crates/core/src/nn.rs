//! Compact convolutional backbone with a trainable fully connected head.
//!
//! Every conv stage is a valid (unpadded) convolution followed by ReLU and a 2x2/2 max
//! pool. The head is `fc6` (optional, ReLU) then `fc7`, whose output is the feature
//! vector. Online learning only touches the head; [`Network::backward_full`] exists for
//! objectness pretraining, where the conv stack is trained too.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::container::{self, ContainerError, Tensor, TensorMap};
use crate::feature::FeatureVector;
use crate::image::ImageBuffer;
use crate::scalar::{all_finite, Scalar};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network config at {stage}: {reason}")]
    Config { stage: String, reason: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: String, found: String },
    #[error("forward cache was produced by a different network state")]
    StaleCache,
    #[error("non-finite gradient in {0}; update rejected")]
    NonFiniteGradient(String),
    #[error("update would make {0} non-finite; rejected")]
    NonFiniteParameters(String),
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStage {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

impl ConvStage {
    pub const fn new(kernel: usize, stride: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            stride,
            out_channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn code(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Identity => 1.0,
        }
    }

    fn from_code(v: f64) -> Option<Self> {
        match v as i64 {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Side of the square input patch in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    pub conv_spec: Vec<ConvStage>,
    /// Width of the hidden fc layer; 0 drops it so the head is a single linear layer.
    pub fc6_dim: usize,
    pub feature_dim: usize,
    pub fc7_activation: Activation,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            in_channels: 1,
            conv_spec: vec![ConvStage::new(5, 1, 8), ConvStage::new(3, 1, 16), ConvStage::new(3, 1, 32)],
            fc6_dim: 128,
            feature_dim: 64,
            fc7_activation: Activation::Relu,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct StageGeometry {
    in_channels: usize,
    in_size: usize,
    conv_size: usize,
    pooled_size: usize,
}

impl NetworkConfig {
    fn geometry(&self) -> Result<Vec<StageGeometry>, NnError> {
        let err = |stage: String, reason: String| NnError::Config { stage, reason };
        if self.input_size == 0 || self.in_channels == 0 {
            return Err(err("input".into(), "input size and channels must be >= 1".into()));
        }
        if self.feature_dim == 0 {
            return Err(err("fc7".into(), "feature_dim must be >= 1".into()));
        }
        let mut size = self.input_size;
        let mut channels = self.in_channels;
        let mut out = Vec::with_capacity(self.conv_spec.len());
        for (i, st) in self.conv_spec.iter().enumerate() {
            let stage = format!("conv{i}");
            if st.kernel == 0 || st.stride == 0 || st.out_channels == 0 {
                return Err(err(stage, "kernel, stride and out_channels must be >= 1".into()));
            }
            if size < st.kernel {
                return Err(err(stage, format!("kernel {} exceeds spatial size {size}", st.kernel)));
            }
            let conv_size = (size - st.kernel) / st.stride + 1;
            let pooled_size = conv_size / 2;
            if pooled_size == 0 {
                return Err(err(stage, format!("2x2 pool collapses spatial size {conv_size} below 1")));
            }
            out.push(StageGeometry {
                in_channels: channels,
                in_size: size,
                conv_size,
                pooled_size,
            });
            size = pooled_size;
            channels = st.out_channels;
        }
        Ok(out)
    }

    /// Length of the flattened conv output feeding the fc head.
    pub fn fc_input_dim(&self) -> Result<usize, NnError> {
        let geo = self.geometry()?;
        Ok(match (geo.last(), self.conv_spec.last()) {
            (Some(g), Some(st)) => g.pooled_size * g.pooled_size * st.out_channels,
            _ => self.input_size * self.input_size * self.in_channels,
        })
    }

    pub fn validate(&self) -> Result<(), NnError> {
        self.geometry().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    in_size: usize,
    conv_size: usize,
    pooled_size: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> DenseGrad<T> {
    fn zeros(weights: usize, biases: usize) -> Self {
        Self {
            weight: vec![T::zero(); weights],
            bias: vec![T::zero(); biases],
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.weight.iter_mut().zip(&other.weight) {
            *a = *a + b;
        }
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a = *a + b;
        }
    }

    fn is_finite(&self) -> bool {
        all_finite(&self.weight) && all_finite(&self.bias)
    }

    fn sum_sq(&self) -> T {
        self.weight.iter().chain(&self.bias).map(|&v| v * v).sum()
    }

    fn scale(&mut self, factor: T) {
        for v in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            *v = *v * factor;
        }
    }
}

/// Gradients of the fc head, one entry per fc layer in forward order.
#[derive(Debug, Clone, PartialEq)]
pub struct FcGradients<T> {
    pub layers: Vec<DenseGrad<T>>,
}

impl<T: Scalar> FcGradients<T> {
    pub fn zeros_for(net: &Network<T>) -> Self {
        Self {
            layers: net.fc.iter().map(|d| DenseGrad::zeros(d.weight.len(), d.bias.len())).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseGrad::is_finite)
    }

    /// Euclidean norm over every fc parameter gradient.
    pub fn norm(&self) -> T {
        self.layers.iter().map(DenseGrad::sum_sq).sum::<T>().sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for l in &mut self.layers {
            l.scale(factor);
        }
    }

    /// Rescales so the norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: T) -> T {
        let n = self.norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
        n
    }
}

/// Gradients for every layer, used by objectness pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGradients<T> {
    pub conv: Vec<DenseGrad<T>>,
    pub fc: FcGradients<T>,
}

impl<T: Scalar> NetworkGradients<T> {
    pub fn zeros_for(net: &Network<T>) -> Self {
        Self {
            conv: net.conv.iter().map(|c| DenseGrad::zeros(c.weight.len(), c.bias.len())).collect(),
            fc: FcGradients::zeros_for(net),
        }
    }

    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.conv.iter_mut().zip(&other.conv) {
            a.add_assign(b);
        }
        self.fc.accumulate(&other.fc);
    }

    pub fn norm(&self) -> T {
        (self.conv.iter().map(DenseGrad::sum_sq).sum::<T>() + self.fc.layers.iter().map(DenseGrad::sum_sq).sum::<T>()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.conv.iter().all(DenseGrad::is_finite) && self.fc.is_finite()
    }

    pub fn clip_norm(&mut self, max_norm: T) -> T {
        let n = self.norm();
        if n > max_norm {
            let f = max_norm / n;
            for l in &mut self.conv {
                l.scale(f);
            }
            self.fc.scale(f);
        }
        n
    }
}

/// Activations of the fc head recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    generation: u64,
    fc_input: Vec<T>,
    hidden: Vec<T>,
    output_pre: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn fc_input(&self) -> &[T] {
        &self.fc_input
    }
}

/// Forward activations of the whole network.
#[derive(Debug, Clone)]
pub struct FullCache<T> {
    stage_inputs: Vec<Vec<T>>,
    stage_pre: Vec<Vec<T>>,
    pool_argmax: Vec<Vec<u32>>,
    pub head: ForwardCache<T>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    config: NetworkConfig,
    pub(crate) conv: Vec<ConvLayer<T>>,
    pub(crate) fc: Vec<Dense<T>>,
    generation: u64,
}

/// Parameters and config compare equal; the internal cache generation does not take part.
impl<T: PartialEq> PartialEq for Network<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.conv == other.conv && self.fc == other.fc
    }
}

/// Deterministic fan-in-scaled initialization with zero biases.
pub fn init_network<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<Network<T>, NnError> {
    let mut config = config.clone();
    config.seed = seed;
    Network::init(config)
}

impl<T: Scalar> Network<T> {
    pub fn init(config: NetworkConfig) -> Result<Self, NnError> {
        let geo = config.geometry()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<T> {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
        };
        let mut conv = Vec::with_capacity(geo.len());
        for (st, g) in config.conv_spec.iter().zip(&geo) {
            let fan_in = g.in_channels * st.kernel * st.kernel;
            conv.push(ConvLayer {
                kernel: st.kernel,
                stride: st.stride,
                in_channels: g.in_channels,
                out_channels: st.out_channels,
                in_size: g.in_size,
                conv_size: g.conv_size,
                pooled_size: g.pooled_size,
                weight: uniform(st.out_channels * fan_in, fan_in),
                bias: vec![T::zero(); st.out_channels],
            });
        }
        let mut inputs = config.fc_input_dim()?;
        let mut fc = Vec::with_capacity(2);
        for outputs in [config.fc6_dim, config.feature_dim] {
            if outputs == 0 {
                continue;
            }
            fc.push(Dense {
                inputs,
                outputs,
                weight: uniform(inputs * outputs, inputs),
                bias: vec![T::zero(); outputs],
            });
            inputs = outputs;
        }
        Ok(Self {
            config,
            conv,
            fc,
            generation: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn conv_layers(&self) -> &[ConvLayer<T>] {
        &self.conv
    }

    pub fn fc_layers(&self) -> &[Dense<T>] {
        &self.fc
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn conv_layers_mut(&mut self) -> &mut [ConvLayer<T>] {
        self.generation += 1;
        &mut self.conv
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn fc_layers_mut(&mut self) -> &mut [Dense<T>] {
        self.generation += 1;
        &mut self.fc
    }

    pub fn is_finite(&self) -> bool {
        self.conv.iter().all(|c| all_finite(&c.weight) && all_finite(&c.bias))
            && self.fc.iter().all(|d| all_finite(&d.weight) && all_finite(&d.bias))
    }

    /// Converts a patch to the planar input tensor: samples scaled to [0,1] then the
    /// patch mean is subtracted.
    pub fn prepare_input(&self, patch: &ImageBuffer) -> Result<Vec<T>, NnError> {
        let s = self.config.input_size;
        let c = self.config.in_channels;
        if patch.width() != s || patch.height() != s || patch.channels() != c {
            return Err(NnError::Dimension {
                expected: format!("{s}x{s}x{c} patch"),
                found: format!("{}x{}x{}", patch.width(), patch.height(), patch.channels()),
            });
        }
        let data = patch.data();
        let inv = 1.0 / 255.0;
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() * inv / data.len() as f64;
        let mut out = vec![T::zero(); data.len()];
        for (i, &v) in data.iter().enumerate() {
            let (px, ch) = (i / c, i % c);
            out[ch * s * s + px] = T::lit(v as f64 * inv - mean);
        }
        Ok(out)
    }

    /// Runs the frozen conv stack and returns the flattened input of the fc head.
    pub fn conv_features(&self, patch: &ImageBuffer) -> Result<Vec<T>, NnError> {
        let mut act = self.prepare_input(patch)?;
        let mut pre = Vec::new();
        for layer in &self.conv {
            pre.resize(layer.out_channels * layer.conv_size * layer.conv_size, T::zero());
            layer.convolve(&act, &mut pre);
            act = layer.relu_pool(&pre, None);
        }
        Ok(act)
    }

    pub fn forward_features(&self, patch: &ImageBuffer) -> Result<(FeatureVector<T>, ForwardCache<T>), NnError> {
        let fc_input = self.conv_features(patch)?;
        self.forward_head(fc_input)
    }

    /// Runs the fc head on a precomputed conv output.
    pub fn forward_head(&self, fc_input: Vec<T>) -> Result<(FeatureVector<T>, ForwardCache<T>), NnError> {
        let first = &self.fc[0];
        if fc_input.len() != first.inputs {
            return Err(NnError::Dimension {
                expected: format!("fc input of length {}", first.inputs),
                found: fc_input.len().to_string(),
            });
        }
        let (hidden, output_pre) = if self.fc.len() == 2 {
            let mut h = first.apply(&fc_input);
            h.iter_mut().for_each(|v| *v = v.max(T::zero()));
            let out = self.fc[1].apply(&h);
            (h, out)
        } else {
            (Vec::new(), first.apply(&fc_input))
        };
        let features = match self.config.fc7_activation {
            Activation::Relu => output_pre.iter().map(|v| v.max(T::zero())).collect(),
            Activation::Identity => output_pre.clone(),
        };
        Ok((
            FeatureVector::new(features),
            ForwardCache {
                generation: self.generation,
                fc_input,
                hidden,
                output_pre,
            },
        ))
    }

    fn check_cache(&self, cache: &ForwardCache<T>, grad_x: &[T]) -> Result<(), NnError> {
        if cache.generation != self.generation || cache.output_pre.len() != self.feature_dim() {
            return Err(NnError::StaleCache);
        }
        if grad_x.len() != self.feature_dim() {
            return Err(NnError::Dimension {
                expected: format!("gradient of length {}", self.feature_dim()),
                found: grad_x.len().to_string(),
            });
        }
        Ok(())
    }

    /// Backpropagates `grad_x` (dL/dx) through the fc head only.
    pub fn backward_fc(&self, cache: &ForwardCache<T>, grad_x: &[T]) -> Result<FcGradients<T>, NnError> {
        let mut grads = FcGradients::zeros_for(self);
        self.backward_fc_accumulate(cache, grad_x, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Network::backward_fc`] but adds into `grads`, which avoids one allocation
    /// per sample when summing over a batch.
    pub fn backward_fc_accumulate(&self, cache: &ForwardCache<T>, grad_x: &[T], grads: &mut FcGradients<T>) -> Result<(), NnError> {
        self.check_cache(cache, grad_x)?;
        let shapes_match = grads.layers.len() == self.fc.len()
            && grads.layers.iter().zip(&self.fc).all(|(g, d)| g.weight.len() == d.weight.len() && g.bias.len() == d.bias.len());
        if !shapes_match {
            return Err(NnError::Dimension {
                expected: "gradient buffers shaped like the fc head".into(),
                found: format!("{} layers", grads.layers.len()),
            });
        }
        self.backward_head(cache, grad_x, false, grads);
        Ok(())
    }

    fn backward_head(&self, cache: &ForwardCache<T>, grad_x: &[T], want_input: bool, grads: &mut FcGradients<T>) -> Vec<T> {
        let d_out: Vec<T> = match self.config.fc7_activation {
            Activation::Relu => grad_x
                .iter()
                .zip(&cache.output_pre)
                .map(|(&g, &z)| if z > T::zero() { g } else { T::zero() })
                .collect(),
            Activation::Identity => grad_x.to_vec(),
        };
        if self.fc.len() == 2 {
            let (fc6, fc7) = (&self.fc[0], &self.fc[1]);
            fc7.grad_into(&cache.hidden, &d_out, &mut grads.layers[1]);
            let mut d_hidden = fc7.input_grad(&d_out);
            for (d, &h) in d_hidden.iter_mut().zip(&cache.hidden) {
                if h <= T::zero() {
                    *d = T::zero();
                }
            }
            fc6.grad_into(&cache.fc_input, &d_hidden, &mut grads.layers[0]);
            if want_input {
                fc6.input_grad(&d_hidden)
            } else {
                Vec::new()
            }
        } else {
            let fc = &self.fc[0];
            fc.grad_into(&cache.fc_input, &d_out, &mut grads.layers[0]);
            if want_input {
                fc.input_grad(&d_out)
            } else {
                Vec::new()
            }
        }
    }

    /// Forward pass keeping everything needed to backpropagate into the conv stack.
    pub fn forward_full(&self, patch: &ImageBuffer) -> Result<(FeatureVector<T>, FullCache<T>), NnError> {
        let mut act = self.prepare_input(patch)?;
        let mut stage_inputs = Vec::with_capacity(self.conv.len());
        let mut stage_pre = Vec::with_capacity(self.conv.len());
        let mut pool_argmax = Vec::with_capacity(self.conv.len());
        for layer in &self.conv {
            let mut pre = vec![T::zero(); layer.out_channels * layer.conv_size * layer.conv_size];
            layer.convolve(&act, &mut pre);
            let mut argmax = Vec::new();
            let pooled = layer.relu_pool(&pre, Some(&mut argmax));
            stage_inputs.push(std::mem::replace(&mut act, pooled));
            stage_pre.push(pre);
            pool_argmax.push(argmax);
        }
        let (features, head) = self.forward_head(act)?;
        Ok((
            features,
            FullCache {
                stage_inputs,
                stage_pre,
                pool_argmax,
                head,
            },
        ))
    }

    pub fn backward_full(&self, cache: &FullCache<T>, grad_x: &[T]) -> Result<NetworkGradients<T>, NnError> {
        self.check_cache(&cache.head, grad_x)?;
        let mut fc = FcGradients::zeros_for(self);
        let mut upstream = self.backward_head(&cache.head, grad_x, !self.conv.is_empty(), &mut fc);
        let mut conv = vec![DenseGrad::zeros(0, 0); self.conv.len()];
        for (i, layer) in self.conv.iter().enumerate().rev() {
            let (g, d_in) = layer.backward(&cache.stage_inputs[i], &cache.stage_pre[i], &cache.pool_argmax[i], &upstream, i > 0);
            conv[i] = g;
            upstream = d_in;
        }
        Ok(NetworkGradients { conv, fc })
    }

    /// `param -= learning_rate * grad` on the fc head. Conv parameters are never touched.
    pub fn apply_sgd(&mut self, grads: &FcGradients<T>, learning_rate: f64) -> Result<(), NnError> {
        check_lr(learning_rate)?;
        if grads.layers.len() != self.fc.len() {
            return Err(NnError::Dimension {
                expected: format!("{} fc gradient layers", self.fc.len()),
                found: grads.layers.len().to_string(),
            });
        }
        let lr = T::lit(learning_rate);
        for (i, (d, g)) in self.fc.iter().zip(&grads.layers).enumerate() {
            check_update(&format!("fc layer {i}"), &d.weight, &d.bias, g, lr)?;
        }
        for (d, g) in self.fc.iter_mut().zip(&grads.layers) {
            sgd_step(&mut d.weight, &g.weight, lr);
            sgd_step(&mut d.bias, &g.bias, lr);
        }
        self.generation += 1;
        Ok(())
    }

    /// SGD step on every layer, conv included.
    pub fn apply_sgd_full(&mut self, grads: &NetworkGradients<T>, learning_rate: f64) -> Result<(), NnError> {
        check_lr(learning_rate)?;
        let lr = T::lit(learning_rate);
        for (i, (c, g)) in self.conv.iter().zip(&grads.conv).enumerate() {
            check_update(&format!("conv layer {i}"), &c.weight, &c.bias, g, lr)?;
        }
        for (i, (d, g)) in self.fc.iter().zip(&grads.fc.layers).enumerate() {
            check_update(&format!("fc layer {i}"), &d.weight, &d.bias, g, lr)?;
        }
        for (c, g) in self.conv.iter_mut().zip(&grads.conv) {
            sgd_step(&mut c.weight, &g.weight, lr);
            sgd_step(&mut c.bias, &g.bias, lr);
        }
        for (d, g) in self.fc.iter_mut().zip(&grads.fc.layers) {
            sgd_step(&mut d.weight, &g.weight, lr);
            sgd_step(&mut d.bias, &g.bias, lr);
        }
        self.generation += 1;
        Ok(())
    }

    /// Serializes config and parameters as GDTW tensors under `prefix`.
    pub fn to_tensors(&self, prefix: &str) -> Vec<Tensor> {
        let c = &self.config;
        let mut meta = vec![c.input_size as f64, c.in_channels as f64, c.conv_spec.len() as f64];
        for st in &c.conv_spec {
            meta.extend([st.kernel as f64, st.stride as f64, st.out_channels as f64]);
        }
        meta.extend([
            c.fc6_dim as f64,
            c.feature_dim as f64,
            c.fc7_activation.code(),
            (c.seed & 0xffff_ffff) as f64,
            (c.seed >> 32) as f64,
        ]);
        let to64 = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
        let mut out = vec![Tensor::vector(format!("{prefix}meta"), meta)];
        for (i, l) in self.conv.iter().enumerate() {
            let dims = vec![l.out_channels as u32, l.in_channels as u32, l.kernel as u32, l.kernel as u32];
            out.push(Tensor::new(format!("{prefix}conv{i}/weight"), dims, to64(&l.weight)));
            out.push(Tensor::vector(format!("{prefix}conv{i}/bias"), to64(&l.bias)));
        }
        for (name, d) in self.fc_names().into_iter().zip(&self.fc) {
            let dims = vec![d.outputs as u32, d.inputs as u32];
            out.push(Tensor::new(format!("{prefix}{name}/weight"), dims, to64(&d.weight)));
            out.push(Tensor::vector(format!("{prefix}{name}/bias"), to64(&d.bias)));
        }
        out
    }

    fn fc_names(&self) -> Vec<&'static str> {
        if self.fc.len() == 2 {
            vec!["fc6", "fc7"]
        } else {
            vec!["fc7"]
        }
    }

    pub fn from_tensors(map: &TensorMap, prefix: &str) -> Result<Self, NnError> {
        let meta_name = format!("{prefix}meta");
        let meta = &map.get(&meta_name)?.values;
        let bad = |reason: &str| {
            NnError::Container(ContainerError::Section {
                section: meta_name.clone(),
                reason: reason.to_owned(),
            })
        };
        let int = |i: usize| -> Result<usize, NnError> {
            let v = *meta.get(i).ok_or_else(|| bad("too short"))?;
            if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(bad("non-integral entry"));
            }
            Ok(v as usize)
        };
        let n_stages = int(2)?;
        if meta.len() != 3 + 3 * n_stages + 5 {
            return Err(bad("length does not match stage count"));
        }
        let conv_spec = (0..n_stages)
            .map(|s| Ok(ConvStage::new(int(3 + 3 * s)?, int(4 + 3 * s)?, int(5 + 3 * s)?)))
            .collect::<Result<Vec<_>, NnError>>()?;
        let tail = 3 + 3 * n_stages;
        let config = NetworkConfig {
            input_size: int(0)?,
            in_channels: int(1)?,
            conv_spec,
            fc6_dim: int(tail)?,
            feature_dim: int(tail + 1)?,
            fc7_activation: Activation::from_code(meta[tail + 2]).ok_or_else(|| bad("unknown activation"))?,
            seed: int(tail + 3)? as u64 | ((int(tail + 4)? as u64) << 32),
        };
        let mut net = Network::<T>::init(config)?;
        let from64 = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        for (i, l) in net.conv.iter_mut().enumerate() {
            let dims = [l.out_channels as u32, l.in_channels as u32, l.kernel as u32, l.kernel as u32];
            l.weight = from64(map.get_shaped(&format!("{prefix}conv{i}/weight"), &dims)?);
            l.bias = from64(map.get_shaped(&format!("{prefix}conv{i}/bias"), &[l.out_channels as u32])?);
        }
        let names = net.fc_names();
        for (name, d) in names.into_iter().zip(net.fc.iter_mut()) {
            d.weight = from64(map.get_shaped(&format!("{prefix}{name}/weight"), &[d.outputs as u32, d.inputs as u32])?);
            d.bias = from64(map.get_shaped(&format!("{prefix}{name}/bias"), &[d.outputs as u32])?);
        }
        if !net.is_finite() {
            return Err(bad("network parameters are not finite"));
        }
        Ok(net)
    }
}

pub fn save_weights<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<(), NnError> {
    Ok(container::write_file(path, &net.to_tensors("net/"))?)
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>, NnError> {
    let map = TensorMap::new(container::read_file(path)?);
    Network::from_tensors(&map, "net/")
}

fn check_lr(lr: f64) -> Result<(), NnError> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(NnError::LearningRate(lr))
    }
}

fn check_update<T: Scalar>(what: &str, w: &[T], b: &[T], g: &DenseGrad<T>, lr: T) -> Result<(), NnError> {
    if g.weight.len() != w.len() || g.bias.len() != b.len() {
        return Err(NnError::Dimension {
            expected: format!("{what} gradient with {} weights", w.len()),
            found: g.weight.len().to_string(),
        });
    }
    if !g.is_finite() {
        return Err(NnError::NonFiniteGradient(what.to_owned()));
    }
    let ok = w.iter().zip(&g.weight).chain(b.iter().zip(&g.bias)).all(|(&p, &d)| (p - lr * d).is_finite());
    if ok {
        Ok(())
    } else {
        Err(NnError::NonFiniteParameters(what.to_owned()))
    }
}

fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], lr: T) {
    for (p, &g) in params.iter_mut().zip(grads) {
        *p = *p - lr * g;
    }
}

impl<T: Scalar> Dense<T> {
    fn apply(&self, input: &[T]) -> Vec<T> {
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, &b)| b + dot(row, input))
            .collect()
    }

    fn grad_into(&self, input: &[T], d_out: &[T], acc: &mut DenseGrad<T>) {
        for (row, &d) in acc.weight.chunks_exact_mut(self.inputs).zip(d_out) {
            if d != T::zero() {
                axpy(row, input, d);
            }
        }
        for (b, &d) in acc.bias.iter_mut().zip(d_out) {
            *b = *b + d;
        }
    }

    fn input_grad(&self, d_out: &[T]) -> Vec<T> {
        let mut d_in = vec![T::zero(); self.inputs];
        for (row, &d) in self.weight.chunks_exact(self.inputs).zip(d_out) {
            if d != T::zero() {
                axpy(&mut d_in, row, d);
            }
        }
        d_in
    }
}

impl<T: Scalar> ConvLayer<T> {
    /// Valid convolution into `out` (`[oc][conv][conv]`), bias included.
    fn convolve(&self, input: &[T], out: &mut [T]) {
        let (k, s, is, cs) = (self.kernel, self.stride, self.in_size, self.conv_size);
        let in_plane = is * is;
        for (oc, plane) in out.chunks_exact_mut(cs * cs).enumerate() {
            plane.fill(self.bias[oc]);
            for ic in 0..self.in_channels {
                let src = &input[ic * in_plane..(ic + 1) * in_plane];
                let wbase = (oc * self.in_channels + ic) * k * k;
                for ky in 0..k {
                    let taps = &self.weight[wbase + ky * k..wbase + (ky + 1) * k];
                    for (oy, row) in plane.chunks_exact_mut(cs).enumerate() {
                        let start = (oy * s + ky) * is;
                        let line = &src[start..start + (cs - 1) * s + k];
                        match (s, k) {
                            (1, 3) => conv_row::<T, 3>(row, line, taps),
                            (1, 5) => conv_row::<T, 5>(row, line, taps),
                            _ => {
                                for (ox, o) in row.iter_mut().enumerate() {
                                    let win = &line[ox * s..ox * s + k];
                                    *o = *o + dot(win, taps);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// ReLU followed by 2x2/2 max pooling, optionally recording the winning index.
    fn relu_pool(&self, pre: &[T], mut argmax: Option<&mut Vec<u32>>) -> Vec<T> {
        let (cs, ps) = (self.conv_size, self.pooled_size);
        let mut out = Vec::with_capacity(self.out_channels * ps * ps);
        for oc in 0..self.out_channels {
            let base = oc * cs * cs;
            for py in 0..ps {
                for px in 0..ps {
                    let mut best_idx = base + (2 * py) * cs + 2 * px;
                    let mut best = pre[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * py + dy) * cs + 2 * px + dx;
                        if pre[idx] > best {
                            best = pre[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best.max(T::zero()));
                    if let Some(a) = argmax.as_deref_mut() {
                        a.push(best_idx as u32);
                    }
                }
            }
        }
        out
    }

    fn backward(&self, input: &[T], pre: &[T], argmax: &[u32], d_pooled: &[T], want_input: bool) -> (DenseGrad<T>, Vec<T>) {
        let (k, s, is, cs) = (self.kernel, self.stride, self.in_size, self.conv_size);
        let mut d_conv = vec![T::zero(); pre.len()];
        for (&idx, &d) in argmax.iter().zip(d_pooled) {
            if pre[idx as usize] > T::zero() {
                d_conv[idx as usize] = d_conv[idx as usize] + d;
            }
        }
        let mut g = DenseGrad::zeros(self.weight.len(), self.bias.len());
        let mut d_in = if want_input { vec![T::zero(); input.len()] } else { Vec::new() };
        let in_plane = is * is;
        for (oc, plane) in d_conv.chunks_exact(cs * cs).enumerate() {
            g.bias[oc] = plane.iter().copied().sum();
            for ic in 0..self.in_channels {
                let src = &input[ic * in_plane..(ic + 1) * in_plane];
                let wbase = (oc * self.in_channels + ic) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let w = self.weight[wbase + ky * k + kx];
                        let mut acc = T::zero();
                        for (oy, row) in plane.chunks_exact(cs).enumerate() {
                            let start = (oy * s + ky) * is + kx;
                            if s == 1 {
                                acc = acc + dot(row, &src[start..start + cs]);
                                if want_input {
                                    axpy(&mut d_in[ic * in_plane + start..ic * in_plane + start + cs], row, w);
                                }
                            } else {
                                for (ox, &d) in row.iter().enumerate() {
                                    acc = acc + d * src[start + ox * s];
                                    if want_input {
                                        let j = ic * in_plane + start + ox * s;
                                        d_in[j] = d_in[j] + w * d;
                                    }
                                }
                            }
                        }
                        g.weight[wbase + ky * k + kx] = acc;
                    }
                }
            }
        }
        (g, d_in)
    }
}

/// One output row of a stride-1 convolution with a kernel row of width `K`.
#[inline]
fn conv_row<T: Scalar, const K: usize>(row: &mut [T], line: &[T], taps: &[T]) {
    let taps: [T; K] = taps.try_into().expect("kernel width");
    for (ox, o) in row.iter_mut().enumerate() {
        let win = &line[ox..ox + K];
        let mut acc = *o;
        for j in 0..K {
            acc = acc + taps[j] * win[j];
        }
        *o = acc;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // four accumulators let the compiler keep independent add chains in flight
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for (j, slot) in acc.iter_mut().enumerate() {
            *slot = *slot + a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        total = total + a[i] * b[i];
    }
    total
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], x: &[T], a: T) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            input_size: 12,
            in_channels: 1,
            conv_spec: vec![ConvStage::new(3, 1, 3), ConvStage::new(2, 1, 4)],
            fc6_dim: 6,
            feature_dim: 5,
            fc7_activation: Activation::Relu,
            seed: 3,
        }
    }

    fn patch(size: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::new(size, size, 1, (0..size * size).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_network::<f64>(&NetworkConfig::default(), 11).unwrap();
        let b = init_network::<f64>(&NetworkConfig::default(), 11).unwrap();
        assert_eq!(a, b);
        let c = init_network::<f64>(&NetworkConfig::default(), 12).unwrap();
        assert_ne!(a, c);
        assert!(a.conv.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn default_geometry() {
        assert_eq!(NetworkConfig::default().fc_input_dim().unwrap(), 6 * 6 * 32);
    }

    #[test]
    fn spatial_collapse_names_stage() {
        let cfg = NetworkConfig {
            input_size: 16,
            conv_spec: vec![ConvStage::new(3, 1, 4), ConvStage::new(3, 1, 4), ConvStage::new(3, 1, 4)],
            ..NetworkConfig::default()
        };
        match Network::<f64>::init(cfg) {
            Err(NnError::Config { stage, .. }) => assert_eq!(stage, "conv2"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn zero_patch_gives_zero_features() {
        let net = init_network::<f64>(&NetworkConfig::default(), 1).unwrap();
        let (x, _) = net.forward_features(&ImageBuffer::filled(64, 64, 1, 0).unwrap()).unwrap();
        assert_eq!(x.len(), 64);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn features_have_contract_shape() {
        let net = init_network::<f64>(&NetworkConfig::default(), 2).unwrap();
        let (x, _) = net.forward_features(&patch(64, 5)).unwrap();
        assert_eq!(x.len(), 64);
        assert!(x.is_finite());
        assert!(x.iter().all(|&v| v >= 0.0));
        assert!(net.forward_features(&patch(32, 5)).is_err());
    }

    #[test]
    fn hand_computed_miniature_net() {
        // 4x4 input, one 3x3 conv with one filter, pool 2x2 -> 1x1, single fc 1 -> 2
        let cfg = NetworkConfig {
            input_size: 4,
            in_channels: 1,
            conv_spec: vec![ConvStage::new(3, 1, 1)],
            fc6_dim: 0,
            feature_dim: 2,
            fc7_activation: Activation::Identity,
            seed: 0,
        };
        let mut net = Network::<f64>::init(cfg).unwrap();
        let kernel = [1.0, 0.0, -1.0, 2.0, 0.0, -2.0, 1.0, 0.0, -1.0];
        net.conv_layers_mut()[0].weight = kernel.to_vec();
        net.conv_layers_mut()[0].bias = vec![0.1];
        net.fc_layers_mut()[0].weight = vec![2.0, -1.0];
        net.fc_layers_mut()[0].bias = vec![0.5, 0.25];
        let pixels: [u8; 16] = [0, 51, 102, 153, 204, 255, 0, 51, 102, 153, 204, 255, 0, 51, 102, 153];
        let img = ImageBuffer::new(4, 4, 1, pixels.to_vec()).unwrap();

        // oracle: explicit arithmetic on the normalized, mean-centered input
        let mean = pixels.iter().map(|&p| p as f64 / 255.0).sum::<f64>() / 16.0;
        let inp: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0 - mean).collect();
        let mut conv = [0.0; 4];
        for oy in 0..2 {
            for ox in 0..2 {
                let mut acc = 0.1;
                for ky in 0..3 {
                    for kx in 0..3 {
                        acc += kernel[ky * 3 + kx] * inp[(oy + ky) * 4 + ox + kx];
                    }
                }
                conv[oy * 2 + ox] = acc;
            }
        }
        let pooled = conv.iter().map(|v: &f64| v.max(0.0)).fold(f64::MIN, f64::max);
        let expected = [2.0 * pooled + 0.5, -pooled + 0.25];

        let (x, _) = net.forward_features(&img).unwrap();
        for (a, b) in x.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_grad_gives_zero_fc_gradients() {
        let net = init_network::<f64>(&tiny_config(), 4).unwrap();
        let (_, cache) = net.forward_features(&patch(12, 1)).unwrap();
        let g = net.backward_fc(&cache, &[0.0; 5]).unwrap();
        assert!(g.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|&v| v == 0.0)));
    }

    #[test]
    fn single_linear_layer_gradient_is_outer_product() {
        let cfg = NetworkConfig {
            input_size: 3,
            conv_spec: vec![],
            fc6_dim: 0,
            feature_dim: 2,
            fc7_activation: Activation::Identity,
            ..NetworkConfig::default()
        };
        let net = Network::<f64>::init(cfg).unwrap();
        let (_, cache) = net.forward_features(&patch(3, 9)).unwrap();
        let grad_x = [0.7, -1.3];
        let g = net.backward_fc(&cache, &grad_x).unwrap();
        let input = cache.fc_input();
        for i in 0..2 {
            for j in 0..9 {
                assert_eq!(g.layers[0].weight[i * 9 + j], grad_x[i] * input[j]);
            }
            assert_eq!(g.layers[0].bias[i], grad_x[i]);
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut net = init_network::<f64>(&tiny_config(), 4).unwrap();
        let (_, cache) = net.forward_features(&patch(12, 1)).unwrap();
        let grads = net.backward_fc(&cache, &[1.0; 5]).unwrap();
        net.apply_sgd(&grads, 0.01).unwrap();
        assert!(matches!(net.backward_fc(&cache, &[1.0; 5]), Err(NnError::StaleCache)));
        let (_, fresh) = net.forward_features(&patch(12, 1)).unwrap();
        assert!(matches!(net.backward_fc(&fresh, &[1.0; 4]), Err(NnError::Dimension { .. })));
    }

    #[test]
    fn sgd_examples() {
        let cfg = NetworkConfig {
            input_size: 1,
            conv_spec: vec![],
            fc6_dim: 0,
            feature_dim: 1,
            fc7_activation: Activation::Identity,
            ..NetworkConfig::default()
        };
        let mut net = Network::<f64>::init(cfg).unwrap();
        net.fc_layers_mut()[0].weight = vec![1.0];
        let zero = FcGradients::zeros_for(&net);
        let before = net.clone();
        net.apply_sgd(&zero, 0.1).unwrap();
        assert_eq!(net, before);
        let grads = FcGradients {
            layers: vec![DenseGrad {
                weight: vec![2.0],
                bias: vec![0.0],
            }],
        };
        net.apply_sgd(&grads, 0.1).unwrap();
        assert_eq!(net.fc_layers()[0].weight[0], 1.0 - 0.1 * 2.0);
        assert!((net.fc_layers()[0].weight[0] - 0.8).abs() < 1e-15);
        assert!(matches!(net.apply_sgd(&grads, 0.0), Err(NnError::LearningRate(_))));
        let nan = FcGradients {
            layers: vec![DenseGrad {
                weight: vec![f64::NAN],
                bias: vec![0.0],
            }],
        };
        let snapshot = net.clone();
        assert!(matches!(net.apply_sgd(&nan, 0.1), Err(NnError::NonFiniteGradient(_))));
        assert_eq!(net, snapshot);
    }

    #[test]
    fn weights_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.gdtw");
        let net = init_network::<f64>(&tiny_config(), 77).unwrap();
        save_weights(&net, &p).unwrap();
        let back: Network<f64> = load_weights(&p).unwrap();
        assert_eq!(back, net);
        let bits = |n: &Network<f64>| -> Vec<u64> {
            n.to_tensors("").iter().flat_map(|t| t.values.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&net));

        let net32 = init_network::<f32>(&tiny_config(), 77).unwrap();
        save_weights(&net32, &p).unwrap();
        assert_eq!(load_weights::<f32>(&p).unwrap(), net32);
    }

    #[test]
    fn truncated_and_bad_magic_weights() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.gdtw");
        save_weights(&init_network::<f64>(&tiny_config(), 1).unwrap(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        match load_weights::<f64>(&p) {
            Err(NnError::Container(ContainerError::Truncated { offset, .. })) => assert!(offset > 12),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(
            load_weights::<f64>(&p),
            Err(NnError::Container(ContainerError::BadMagic { .. }))
        ));
    }

    #[test]
    fn shape_mismatch_against_header() {
        let net = init_network::<f64>(&tiny_config(), 1).unwrap();
        let mut tensors = net.to_tensors("net/");
        let idx = tensors.iter().position(|t| t.name == "net/fc7/weight").unwrap();
        tensors[idx] = Tensor::new("net/fc7/weight", vec![5, 5], vec![0.0; 25]);
        let err = Network::<f64>::from_tensors(&TensorMap::new(tensors), "net/").unwrap_err();
        assert!(matches!(err, NnError::Container(ContainerError::Shape { .. })), "{err}");
    }
}
