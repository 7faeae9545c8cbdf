//! U-Net style fully convolutional network.
//!
//! Six encode blocks of two 3x3 conv + ReLU layers, with 2x2 max pooling
//! after each of the first five; five decode blocks of a stride-2 transposed
//! conv, a skip concatenation with the matching encode block's output, and two
//! 3x3 conv + ReLU layers; then a 1x1 conv to one channel and a sigmoid.
//! Encode block `i` has `min(base * 2^i, cap)` output channels.

mod checkpoint;
mod network;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, Scalar, Shape4, Tensor4};

pub use checkpoint::{load_params, save_params, CheckpointFile, NamedTensor, TensorData, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{backward, forward, predict, Tape};

pub const ENCODE_BLOCKS: usize = 6;
pub const DECODE_BLOCKS: usize = 5;
/// Number of 2x2 poolings between input and bottleneck.
pub const POOLING_STAGES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
}

impl NetworkConfig {
    /// 192x192 RGBNir input, 32 to 1024 channels.
    pub const FULL: NetworkConfig =
        NetworkConfig { input_size: 192, in_channels: 4, base_channels: 32, channel_cap: 1024 };

    pub fn new(input_size: usize, in_channels: usize, base_channels: usize, channel_cap: usize) -> Result<Self> {
        let cfg = Self { input_size, in_channels, base_channels, channel_cap };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1 << POOLING_STAGES;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {div}",
                self.input_size
            )));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.channel_cap < self.base_channels {
            return Err(Error::Config(format!(
                "channel_cap {} below base_channels {}",
                self.channel_cap, self.base_channels
            )));
        }
        Ok(())
    }

    /// Output channels of each encode block.
    pub fn encode_channels(&self) -> [usize; ENCODE_BLOCKS] {
        std::array::from_fn(|i| (self.base_channels << i).min(self.channel_cap))
    }

    /// Encode level whose output decode block `j` concatenates.
    pub fn decode_level(j: usize) -> usize {
        DECODE_BLOCKS - 1 - j
    }

    /// Spatial size at encode block `i`.
    pub fn spatial(&self, i: usize) -> usize {
        self.input_size >> i
    }
}

/// How weights are drawn. Biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitMode {
    /// Every weight i.i.d. uniform on `[-scale, scale]`.
    Uniform { scale: f64 },
    /// Uniform on `[-s, s]` with `s = sqrt(1 / fan_in)` per layer.
    FanIn,
    /// Uniform on `[-s, s]` with `s = sqrt(6 / fan_in)` per layer, which
    /// keeps ReLU activation variance roughly constant with depth.
    He,
}

impl InitMode {
    fn bound(&self, fan_in: usize) -> f64 {
        match *self {
            InitMode::Uniform { scale } => scale,
            InitMode::FanIn => (1.0 / fan_in as f64).sqrt(),
            InitMode::He => (6.0 / fan_in as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<T> {
    pub conv1: ConvKernel<T>,
    pub conv2: ConvKernel<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock<T> {
    /// `(in_channels, out_channels, 2, 2)`.
    pub up: Tensor4<T>,
    pub conv1: ConvKernel<T>,
    pub conv2: ConvKernel<T>,
}

/// All trainable tensors of one network. Also used for gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub encoders: Vec<EncoderBlock<T>>,
    pub decoders: Vec<DecoderBlock<T>>,
    pub head: ConvKernel<T>,
}

/// Borrowed view of one named parameter tensor.
pub struct ParamView<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [T],
}

impl<T: Scalar> Weights<T> {
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        let ch = cfg.encode_channels();
        let encoders = (0..ENCODE_BLOCKS)
            .map(|i| {
                let cin = if i == 0 { cfg.in_channels } else { ch[i - 1] };
                EncoderBlock { conv1: ConvKernel::zeros(ch[i], cin, 3), conv2: ConvKernel::zeros(ch[i], ch[i], 3) }
            })
            .collect();
        let decoders = (0..DECODE_BLOCKS)
            .map(|j| {
                let level = NetworkConfig::decode_level(j);
                let cin = ch[level + 1];
                let cout = ch[level];
                DecoderBlock {
                    up: Tensor4::zeros(Shape4::new(cin, cout, 2, 2)),
                    conv1: ConvKernel::zeros(cout, 2 * cout, 3),
                    conv2: ConvKernel::zeros(cout, cout, 3),
                }
            })
            .collect();
        Self { encoders, decoders, head: ConvKernel::zeros(1, ch[0], 1) }
    }

    /// Every parameter tensor in a fixed order.
    pub fn views(&self) -> Vec<ParamView<'_, T>> {
        fn conv<'a, T: Scalar>(out: &mut Vec<ParamView<'a, T>>, name: String, k: &'a ConvKernel<T>) {
            let ConvKernel { weight, bias } = k;
            out.push(ParamView { name: format!("{name}.weight"), dims: weight.shape().dims().to_vec(), data: weight.data() });
            out.push(ParamView { name: format!("{name}.bias"), dims: vec![bias.len()], data: bias });
        }
        let mut out = Vec::new();
        for (i, e) in self.encoders.iter().enumerate() {
            conv(&mut out, format!("enc{i}.conv1"), &e.conv1);
            conv(&mut out, format!("enc{i}.conv2"), &e.conv2);
        }
        for (j, d) in self.decoders.iter().enumerate() {
            out.push(ParamView { name: format!("dec{j}.up.weight"), dims: d.up.shape().dims().to_vec(), data: d.up.data() });
            conv(&mut out, format!("dec{j}.conv1"), &d.conv1);
            conv(&mut out, format!("dec{j}.conv2"), &d.conv2);
        }
        conv(&mut out, "head".into(), &self.head);
        out
    }

    /// Mutable slices in the same order as [`Weights::views`].
    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for e in &mut self.encoders {
            for k in [&mut e.conv1, &mut e.conv2] {
                out.push(k.weight.data_mut());
                out.push(&mut k.bias);
            }
        }
        for d in &mut self.decoders {
            out.push(d.up.data_mut());
            for k in [&mut d.conv1, &mut d.conv2] {
                out.push(k.weight.data_mut());
                out.push(&mut k.bias);
            }
        }
        out.push(self.head.weight.data_mut());
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.views().iter().map(|v| v.data.len()).sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.views().iter().all(|v| v.data.iter().all(|x| x.is_zero()))
    }
}

/// A network's weights with the config and provenance they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    cfg: NetworkConfig,
    seed: u64,
    init: InitMode,
    generation: u64,
    pub(crate) weights: Weights<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_weights(cfg: NetworkConfig, seed: u64, init: InitMode, weights: Weights<T>) -> Result<Self> {
        cfg.validate()?;
        let expected = Weights::<T>::zeros(&cfg);
        if expected.views().len() != weights.views().len() {
            return Err(Error::Config("tensor count does not match config".into()));
        }
        for (a, b) in expected.views().iter().zip(weights.views().iter()) {
            if a.name != b.name || a.dims != b.dims {
                return Err(Error::Config(format!("tensor {} has dims {:?}, config needs {:?}", b.name, b.dims, a.dims)));
            }
        }
        Ok(Self { cfg, seed, init, generation: 0, weights })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn init_mode(&self) -> InitMode {
        self.init
    }

    pub fn weights(&self) -> &Weights<T> {
        &self.weights
    }

    /// Bumps the generation so that tapes recorded before the edit are
    /// rejected by [`backward`].
    pub fn weights_mut(&mut self) -> &mut Weights<T> {
        self.generation += 1;
        &mut self.weights
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }
}

/// Draws every weight uniformly on `[-scale, scale]`.
pub fn init_params<T: Scalar>(cfg: &NetworkConfig, seed: u64, scale: f64) -> Result<ModelParams<T>> {
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::Domain(format!("init scale must be positive, got {scale}")));
    }
    init_params_with(cfg, seed, InitMode::Uniform { scale })
}

pub fn init_params_with<T: Scalar>(cfg: &NetworkConfig, seed: u64, init: InitMode) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Weights::<T>::zeros(cfg);
    let mut fill = |t: &mut Tensor4<T>, fan_in: usize| {
        let b = init.bound(fan_in);
        for v in t.data_mut() {
            *v = T::of(rng.gen_range(-b..=b));
        }
    };
    for e in &mut weights.encoders {
        for k in [&mut e.conv1, &mut e.conv2] {
            let fan_in = k.in_channels() * 9;
            fill(&mut k.weight, fan_in);
        }
    }
    for d in &mut weights.decoders {
        let fan_in = d.up.shape().n;
        fill(&mut d.up, fan_in);
        for k in [&mut d.conv1, &mut d.conv2] {
            let fan_in = k.in_channels() * 9;
            fill(&mut k.weight, fan_in);
        }
    }
    let fan_in = weights.head.in_channels();
    fill(&mut weights.head.weight, fan_in);
    Ok(ModelParams { cfg: *cfg, seed, init, generation: 0, weights })
}
