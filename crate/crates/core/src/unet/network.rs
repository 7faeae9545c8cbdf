use super::{ModelParams, NetworkConfig, Weights, DECODE_BLOCKS, ENCODE_BLOCKS};
use crate::error::{Error, Result};
use crate::tensor::{
    concat_channels, conv2d_backward, conv2d_forward, conv_transpose2_backward, conv_transpose2_forward,
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, sigmoid_backward, sigmoid_forward,
    split_channels, ConvKernel, PoolIndices, Scalar, Tensor4,
};

struct EncodeRecord<T> {
    input: Tensor4<T>,
    act1: Tensor4<T>,
    /// Block output; also the skip tensor for the matching decoder.
    act2: Tensor4<T>,
    pool: Option<PoolIndices>,
}

struct DecodeRecord<T> {
    up_input: Tensor4<T>,
    cat: Tensor4<T>,
    act1: Tensor4<T>,
    act2: Tensor4<T>,
}

/// Activations recorded by [`forward`] for one call to [`backward`].
pub struct Tape<T> {
    generation: u64,
    cfg: NetworkConfig,
    encode: Vec<EncodeRecord<T>>,
    decode: Vec<DecodeRecord<T>>,
    prob: Tensor4<T>,
}

impl<T: Scalar> Tape<T> {
    pub fn prob(&self) -> &Tensor4<T> {
        &self.prob
    }

    /// Spatial size of every encode block output, then every decode block
    /// output.
    pub fn spatial_ladder(&self) -> Vec<usize> {
        self.encode.iter().map(|e| e.act2.shape().h).chain(self.decode.iter().map(|d| d.act2.shape().h)).collect()
    }

    /// Channel count of every encode block output, then every decode block
    /// output.
    pub fn channel_ladder(&self) -> Vec<usize> {
        self.encode.iter().map(|e| e.act2.shape().c).chain(self.decode.iter().map(|d| d.act2.shape().c)).collect()
    }
}

fn conv_relu<T: Scalar>(x: &Tensor4<T>, k: &ConvKernel<T>) -> Result<Tensor4<T>> {
    Ok(relu_forward(&conv2d_forward(x, k)?))
}

fn check_input<T: Scalar>(cfg: &NetworkConfig, x: &Tensor4<T>) -> Result<()> {
    let s = x.shape();
    if s.c != cfg.in_channels || s.h != cfg.input_size || s.w != cfg.input_size || s.n == 0 {
        return Err(Error::Shape(format!(
            "network expects Nx{}x{}x{}, got {s}",
            cfg.in_channels, cfg.input_size, cfg.input_size
        )));
    }
    Ok(())
}

fn run<T: Scalar>(params: &ModelParams<T>, x: &Tensor4<T>, record: bool) -> Result<(Tensor4<T>, Option<Tape<T>>)> {
    let cfg = params.config();
    check_input(cfg, x)?;
    let w = params.weights();
    let mut encode = Vec::with_capacity(ENCODE_BLOCKS);
    let mut skips = Vec::with_capacity(ENCODE_BLOCKS - 1);
    let mut cur = x.clone();
    for (i, block) in w.encoders.iter().enumerate() {
        let act1 = conv_relu(&cur, &block.conv1)?;
        let act2 = conv_relu(&act1, &block.conv2)?;
        debug_assert_eq!(act2.shape().h, cfg.spatial(i));
        let (next, pool) = if i + 1 < ENCODE_BLOCKS {
            let (p, idx) = maxpool2_forward(&act2)?;
            skips.push(act2.clone());
            (p, Some(idx))
        } else {
            (act2.clone(), None)
        };
        if record {
            encode.push(EncodeRecord { input: cur, act1, act2, pool });
        }
        cur = next;
    }

    let mut decode = Vec::with_capacity(DECODE_BLOCKS);
    for (j, block) in w.decoders.iter().enumerate() {
        let skip = &skips[NetworkConfig::decode_level(j)];
        let up = conv_transpose2_forward(&cur, &block.up)?;
        let cat = concat_channels(skip, &up)?;
        let act1 = conv_relu(&cat, &block.conv1)?;
        let act2 = conv_relu(&act1, &block.conv2)?;
        let next = act2.clone();
        if record {
            decode.push(DecodeRecord { up_input: cur, cat, act1, act2 });
        }
        cur = next;
    }

    let prob = sigmoid_forward(&conv2d_forward(&cur, &w.head)?);
    let tape = record.then(|| Tape {
        generation: params.generation(),
        cfg: *cfg,
        encode,
        decode,
        prob: prob.clone(),
    });
    Ok((prob, tape))
}

/// Runs the network on `x` (`N x in_channels x input_size x input_size`) and
/// returns the probability map together with the tape needed by
/// [`backward`].
pub fn forward<T: Scalar>(params: &ModelParams<T>, x: &Tensor4<T>) -> Result<(Tensor4<T>, Tape<T>)> {
    let (prob, tape) = run(params, x, true)?;
    Ok((prob, tape.expect("recorded")))
}

/// Inference only: same output as [`forward`] without keeping activations.
pub fn predict<T: Scalar>(params: &ModelParams<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    Ok(run(params, x, false)?.0)
}

/// Backpropagates `grad_prob` (dL/d prob) through the recorded forward pass.
pub fn backward<T: Scalar>(params: &ModelParams<T>, tape: &Tape<T>, grad_prob: &Tensor4<T>) -> Result<Weights<T>> {
    if tape.generation != params.generation() || tape.cfg != *params.config() {
        return Err(Error::Contract(format!(
            "tape recorded at generation {} but parameters are at generation {}",
            tape.generation,
            params.generation()
        )));
    }
    grad_prob.expect_shape(tape.prob.shape(), "probability gradient")?;
    let w = params.weights();
    let mut grads = Weights::zeros(params.config());

    let g_logit = sigmoid_backward(&tape.prob, grad_prob)?;
    let head_in = &tape.decode.last().expect("five decode blocks").act2;
    let hg = conv2d_backward(head_in, &w.head, &g_logit)?;
    grads.head.weight = hg.weight;
    grads.head.bias = hg.bias;
    let mut g = hg.x;

    let mut skip_grads: Vec<Option<Tensor4<T>>> = vec![None; ENCODE_BLOCKS - 1];
    for j in (0..DECODE_BLOCKS).rev() {
        let rec = &tape.decode[j];
        let block = &w.decoders[j];
        let g2 = relu_backward(&rec.act2, &g)?;
        let c2 = conv2d_backward(&rec.act1, &block.conv2, &g2)?;
        let g1 = relu_backward(&rec.act1, &c2.x)?;
        let c1 = conv2d_backward(&rec.cat, &block.conv1, &g1)?;
        let level = NetworkConfig::decode_level(j);
        let skip_channels = tape.encode[level].act2.shape().c;
        let (g_skip, g_up) = split_channels(&c1.x, skip_channels)?;
        let (g_in, g_k) = conv_transpose2_backward(&rec.up_input, &block.up, &g_up)?;

        let dst = &mut grads.decoders[j];
        dst.up = g_k;
        dst.conv1.weight = c1.weight;
        dst.conv1.bias = c1.bias;
        dst.conv2.weight = c2.weight;
        dst.conv2.bias = c2.bias;
        skip_grads[level] = Some(g_skip);
        g = g_in;
    }

    for i in (0..ENCODE_BLOCKS).rev() {
        let rec = &tape.encode[i];
        let block = &w.encoders[i];
        // g is the gradient w.r.t. this block's pooled output (or the
        // bottleneck output for the last block)
        let mut g_out = match &rec.pool {
            Some(idx) => maxpool2_backward(idx, &g)?,
            None => g,
        };
        if let Some(s) = skip_grads.get(i).and_then(Option::as_ref) {
            g_out.add_assign(s)?;
        }
        let g2 = relu_backward(&rec.act2, &g_out)?;
        let c2 = conv2d_backward(&rec.act1, &block.conv2, &g2)?;
        let g1 = relu_backward(&rec.act1, &c2.x)?;
        let c1 = conv2d_backward(&rec.input, &block.conv1, &g1)?;
        let dst = &mut grads.encoders[i];
        dst.conv1.weight = c1.weight;
        dst.conv1.bias = c1.bias;
        dst.conv2.weight = c2.weight;
        dst.conv2.bias = c2.bias;
        g = c1.x;
    }
    Ok(grads)
}
