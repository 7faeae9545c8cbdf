//! Soft Jaccard loss, Adam, augmentation and the epoch loop.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patch::sample_bilinear;
use crate::tensor::{Scalar, Shape4, Tensor4};
use crate::unet::{
    backward, forward, init_params_with, CheckpointFile, InitMode, ModelParams, NamedTensor, NetworkConfig, Weights,
};

pub const DEFAULT_LOSS_EPS: f64 = 1e-7;

/// Loss value and its gradient with respect to the prediction.
#[derive(Clone, Debug)]
pub struct LossValue<T> {
    pub value: f64,
    pub grad_y: Tensor4<T>,
}

/// How the loss is reduced over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossReduction {
    /// One intersection and union over every pixel of the batch.
    #[default]
    Batch,
    /// Loss per sample, then averaged.
    PerSample,
}

/// Soft Jaccard loss
/// `-(sum h y + eps) / (sum h + sum y - sum h y + eps)` of binary target `h`
/// and prediction `y`.
pub fn jaccard_loss<T: Scalar>(h: &Tensor4<T>, y: &Tensor4<T>, eps: f64) -> Result<LossValue<T>> {
    y.expect_shape(h.shape(), "loss prediction")?;
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Domain(format!("loss eps must be positive, got {eps}")));
    }
    let (mut sh, mut sy, mut shy) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in h.data().iter().zip(y.data()) {
        let (a, b) = (a.as_f64(), b.as_f64());
        if a != 0.0 && a != 1.0 {
            return Err(Error::Domain(format!("target values must be 0 or 1, got {a}")));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::Domain(format!("prediction values must lie in [0, 1], got {b}")));
        }
        sh += a;
        sy += b;
        shy += a * b;
    }
    let s = shy + eps;
    let u = sh + sy - shy + eps;
    let u2 = u * u;
    let grad_y = Tensor4::from_vec(
        h.shape(),
        h.data().iter().map(|&a| T::of(-(a.as_f64() * u - s * (1.0 - a.as_f64())) / u2)).collect(),
    )?;
    Ok(LossValue { value: -s / u, grad_y })
}

/// Loss over a batch under the given reduction.
pub fn batch_loss<T: Scalar>(h: &Tensor4<T>, y: &Tensor4<T>, eps: f64, reduction: LossReduction) -> Result<LossValue<T>> {
    match reduction {
        LossReduction::Batch => jaccard_loss(h, y, eps),
        LossReduction::PerSample => {
            y.expect_shape(h.shape(), "loss prediction")?;
            let n = h.shape().n;
            let mut value = 0.0;
            let mut grad = Vec::with_capacity(h.shape().len());
            for i in 0..n {
                let l = jaccard_loss(&h.sample(i), &y.sample(i), eps)?;
                value += l.value;
                grad.extend(l.grad_y.into_vec());
            }
            let scale = T::of(1.0 / n as f64);
            let grad_y = Tensor4::from_vec(h.shape(), grad.into_iter().map(|g| g * scale).collect())?;
            Ok(LossValue { value: value / n as f64, grad_y })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter tensor, in [`Weights::views`]
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(cfg: AdamConfig, lens: impl IntoIterator<Item = usize>) -> Self {
        let lens: Vec<usize> = lens.into_iter().collect();
        Self {
            cfg,
            t: 0,
            m: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_weights(cfg: AdamConfig, w: &Weights<T>) -> Self {
        Self::new(cfg, w.views().iter().map(|v| v.data.len()))
    }

    /// One Adam update of `params` (one slice per tensor) from `grads`.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Length { expected: self.m[i].len(), found: p.len().min(g.len()) });
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (ob1, ob2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = b1 * m[k] + ob1 * gk;
                v[k] = b2 * v[k] + ob2 * gk * gk;
                let m_hat = m[k].as_f64() / c1;
                let v_hat = v[k].as_f64() / c2;
                p[k] -= T::of(lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

/// Adam update of a network's parameters.
pub fn adam_step<T: Scalar>(params: &mut ModelParams<T>, grads: &Weights<T>, state: &mut AdamState<T>) -> Result<()> {
    let g = grads.views();
    let g: Vec<&[T]> = g.iter().map(|v| v.data).collect();
    let mut p = params.weights_mut().slices_mut();
    state.step(&mut p, &g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub hflip: bool,
    /// Rotation by a uniformly drawn multiple of 90 degrees.
    pub rotate90: bool,
    /// Rotation by a uniform angle in `[0, 360)`; masks use nearest neighbour.
    pub rotate_any: bool,
    /// Zoom factor range; `None` disables zoom.
    pub zoom: Option<(f64, f64)>,
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig { hflip: false, rotate90: false, rotate_any: false, zoom: None };

    pub fn validate(&self) -> Result<()> {
        if let Some((lo, hi)) = self.zoom {
            if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::Config(format!("zoom range must satisfy 1 <= lo <= hi, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { hflip: true, rotate90: true, rotate_any: false, zoom: Some((1.0, 1.2)) }
    }
}

/// One concrete geometric transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub flip: bool,
    /// Quarter turns, counter-clockwise.
    pub quarter_turns: u8,
    /// Extra rotation in radians.
    pub angle: f64,
    pub zoom: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { flip: false, quarter_turns: 0, angle: 0.0, zoom: 1.0 };

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let flip = cfg.hflip && rng.gen_bool(0.5);
        let quarter_turns = if cfg.rotate90 { rng.gen_range(0..4u8) } else { 0 };
        let angle = if cfg.rotate_any { rng.gen_range(0.0..std::f64::consts::TAU) } else { 0.0 };
        let zoom = match cfg.zoom {
            Some((lo, hi)) if hi > lo => rng.gen_range(lo..=hi),
            Some((lo, _)) => lo,
            None => 1.0,
        };
        Self { flip, quarter_turns, angle, zoom }
    }

    /// Source position, relative to the centre, read by output position
    /// `(u, v)` relative to the centre.
    fn source(&self, u: f64, v: f64) -> (f64, f64) {
        // undo zoom (centre crop of the enlarged image)
        let (mut u, mut v) = (u / self.zoom, v / self.zoom);
        if self.angle != 0.0 {
            let (s, c) = self.angle.sin_cos();
            (u, v) = (c * u + s * v, -s * u + c * v);
        }
        for _ in 0..self.quarter_turns {
            (u, v) = (v, -u);
        }
        if self.flip {
            u = -u;
        }
        (u, v)
    }

    fn apply<T: Scalar>(&self, t: &Tensor4<T>, nearest: bool) -> Tensor4<T> {
        let s = t.shape();
        let (cx, cy) = ((s.w as f64 - 1.0) / 2.0, (s.h as f64 - 1.0) / 2.0);
        let map: Vec<(f64, f64)> = (0..s.h)
            .flat_map(|y| (0..s.w).map(move |x| (x, y)))
            .map(|(x, y)| {
                let (u, v) = self.source(x as f64 - cx, y as f64 - cy);
                (u + cx, v + cy)
            })
            .collect();
        let mut out = Tensor4::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let src = t.plane(n, c);
                for (dst, &(x, y)) in out.plane_mut(n, c).iter_mut().zip(&map) {
                    *dst = if nearest {
                        let xi = x.round().clamp(0.0, (s.w - 1) as f64) as usize;
                        let yi = y.round().clamp(0.0, (s.h - 1) as f64) as usize;
                        src[yi * s.w + xi]
                    } else {
                        sample_bilinear(src, s.w, s.h, x, y)
                    };
                }
            }
        }
        out
    }
}

/// Applies one transform to an image and its mask. Images are resampled
/// bilinearly, masks by nearest neighbour.
pub fn apply_transform<T: Scalar>(x: &Tensor4<T>, h: &Tensor4<T>, tf: &Transform) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let (sx, sh) = (x.shape(), h.shape());
    if (sx.n, sx.h, sx.w) != (sh.n, sh.h, sh.w) {
        return Err(Error::shape(format!("image {sx} and mask {sh} differ")));
    }
    if (tf.quarter_turns % 2 == 1 || tf.angle != 0.0) && sx.h != sx.w {
        return Err(Error::shape(format!("rotation needs square patches, got {sx}")));
    }
    if *tf == Transform::IDENTITY {
        return Ok((x.clone(), h.clone()));
    }
    Ok((tf.apply(x, false), tf.apply(h, true)))
}

/// Draws a transform from `rng` and applies it to `x` and `h`.
pub fn augment<T: Scalar>(
    x: &Tensor4<T>,
    h: &Tensor4<T>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    apply_transform(x, h, &Transform::sample(cfg, rng))
}

/// One training example: `1 x C x S x S` image and `1 x 1 x S x S` binary
/// mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub x: Tensor4<T>,
    pub h: Tensor4<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointPolicy {
    pub path: PathBuf,
    /// Write after every `every` epochs and after the last one.
    pub every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss_eps: f64,
    pub reduction: LossReduction,
    pub augment: AugmentConfig,
    pub init: InitMode,
    pub checkpoint: Option<CheckpointPolicy>,
    /// Record elapsed seconds in the loss log; when off the column is 0 and
    /// logs are byte-identical across runs.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            batch_size: 4,
            seed: 0,
            adam: AdamConfig::default(),
            loss_eps: DEFAULT_LOSS_EPS,
            reduction: LossReduction::Batch,
            augment: AugmentConfig::default(),
            init: InitMode::FanIn,
            checkpoint: None,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.loss_eps.is_nan() || self.loss_eps <= 0.0 {
            return Err(Error::Config(format!("loss eps must be positive, got {}", self.loss_eps)));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        if let InitMode::Uniform { scale } = self.init {
            if scale.is_nan() || scale <= 0.0 {
                return Err(Error::Config(format!("init scale must be positive, got {scale}")));
            }
        }
        if matches!(&self.checkpoint, Some(c) if c.every == 0) {
            return Err(Error::Config("checkpoint cadence must be at least 1".into()));
        }
        self.augment.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

/// Loss log text: one `epoch,mean_loss,wall_seconds` line per epoch.
pub fn format_loss_log(records: &[EpochRecord]) -> String {
    records
        .iter()
        .map(|r| format!("{},{:.10},{:.3}\n", r.epoch, r.mean_loss, r.wall_seconds))
        .collect()
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    pub log: Vec<EpochRecord>,
}

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

impl<T: Scalar> TrainState<T> {
    pub fn fresh(net: &NetworkConfig, cfg: &TrainConfig) -> Result<Self> {
        let params = init_params_with(net, cfg.seed, cfg.init)?;
        let adam = AdamState::for_weights(cfg.adam, params.weights());
        Ok(Self { params, adam, log: Vec::new() })
    }

    pub fn epochs_done(&self) -> usize {
        self.log.len()
    }

    pub fn to_checkpoint(&self) -> CheckpointFile {
        let mut file = CheckpointFile::from_params(&self.params);
        file.epoch = self.log.len() as u64;
        file.step = self.adam.t;
        file.losses = self.log.iter().map(|r| r.mean_loss).collect();
        let views = self.params.weights().views();
        for (prefix, moments) in [(M_PREFIX, &self.adam.m), (V_PREFIX, &self.adam.v)] {
            for (v, m) in views.iter().zip(moments) {
                file.tensors.push(NamedTensor::new(format!("{prefix}{}", v.name), v.dims.clone(), m));
            }
        }
        file
    }

    /// Restores parameters, optimizer moments and the loss history. Wall
    /// times of restored epochs are not stored and come back as 0.
    pub fn from_checkpoint(file: &CheckpointFile, adam: AdamConfig) -> Result<Self> {
        let params: ModelParams<T> = file.to_params()?;
        let views = params.weights().views();
        let mut state = AdamState::for_weights(adam, params.weights());
        state.t = file.step;
        for (prefix, moments) in [(M_PREFIX, &mut state.m), (V_PREFIX, &mut state.v)] {
            for (v, m) in views.iter().zip(moments.iter_mut()) {
                let name = format!("{prefix}{}", v.name);
                let t = file
                    .tensor(&name)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer tensor {name}")))?;
                if t.dims != v.dims {
                    return Err(Error::Config(format!("optimizer tensor {name} has dims {:?}", t.dims)));
                }
                *m = t.data.to_vec();
            }
        }
        if file.losses.len() as u64 != file.epoch {
            return Err(Error::format("checkpoint loss history does not match its epoch count"));
        }
        let log = file
            .losses
            .iter()
            .enumerate()
            .map(|(i, &l)| EpochRecord { epoch: i + 1, mean_loss: l, wall_seconds: 0.0 })
            .collect();
        Ok(Self { params, adam: state, log })
    }
}

fn check_dataset<T: Scalar>(data: &[Sample<T>], net: &NetworkConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let xs = Shape4::new(1, net.in_channels, net.input_size, net.input_size);
    let hs = Shape4::new(1, 1, net.input_size, net.input_size);
    for (i, s) in data.iter().enumerate() {
        if s.x.shape() != xs || s.h.shape() != hs {
            return Err(Error::Input(format!(
                "sample {i} has image {} and mask {}, expected {xs} and {hs}",
                s.x.shape(),
                s.h.shape()
            )));
        }
    }
    Ok(())
}

/// Generator for one epoch's shuffle and augmentation draws. Depends only on
/// the seed and the epoch, so resumed runs replay the same draws.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Runs one epoch (1-based `epoch`) and returns its mean batch loss.
fn run_epoch<T: Scalar>(state: &mut TrainState<T>, data: &[Sample<T>], cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        let mut xs = Vec::with_capacity(idx.len());
        let mut hs = Vec::with_capacity(idx.len());
        for &i in idx {
            let (x, h) = augment(&data[i].x, &data[i].h, &cfg.augment, &mut rng)?;
            xs.push(x);
            hs.push(h);
        }
        let x = Tensor4::stack_batch(&xs)?;
        let h = Tensor4::stack_batch(&hs)?;
        let (prob, tape) = forward(&state.params, &x)?;
        let loss = batch_loss(&h, &prob, cfg.loss_eps, cfg.reduction)?;
        if !loss.value.is_finite() {
            return Err(Error::Divergence { epoch, batch: b, loss: loss.value });
        }
        let grads = backward(&state.params, &tape, &loss.grad_y)?;
        if grads.views().iter().any(|v| v.data.iter().any(|g| !g.is_finite())) {
            return Err(Error::Divergence { epoch, batch: b, loss: loss.value });
        }
        adam_step(&mut state.params, &grads, &mut state.adam)?;
        total += loss.value;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Trains from a fresh initialisation.
pub fn train<T: Scalar>(data: &[Sample<T>], cfg: &TrainConfig, net: &NetworkConfig) -> Result<TrainState<T>> {
    cfg.validate()?;
    net.validate()?;
    let state = TrainState::fresh(net, cfg)?;
    resume(state, data, cfg, |_| Ok(()))
}

/// Continues `state` up to `cfg.epochs` total epochs, calling `on_epoch`
/// after each one.
pub fn resume<T: Scalar>(
    mut state: TrainState<T>,
    data: &[Sample<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState<T>) -> Result<()>,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    check_dataset(data, state.params.config())?;
    if state.epochs_done() > cfg.epochs {
        return Err(Error::Config(format!(
            "state already has {} epochs, more than the configured {}",
            state.epochs_done(),
            cfg.epochs
        )));
    }
    state.adam.cfg = cfg.adam;
    for epoch in state.epochs_done() + 1..=cfg.epochs {
        let start = Instant::now();
        let mean_loss = run_epoch(&mut state, data, cfg, epoch)?;
        let wall_seconds = if cfg.log_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
        state.log.push(EpochRecord { epoch, mean_loss, wall_seconds });
        if let Some(policy) = &cfg.checkpoint {
            if epoch % policy.every == 0 || epoch == cfg.epochs {
                state.to_checkpoint().write(&policy.path)?;
            }
        }
        on_epoch(&state)?;
    }
    Ok(state)
}
