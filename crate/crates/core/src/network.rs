//! Single-band residual pansharpening network.
//!
//! Three convolutions `2 → 48 → 32 → 1` with kernels 7, 5, 3 and ReLU between
//! them. The input is the PAN stacked with the interpolated band (in that
//! order) and the interpolated band is added back to the last layer's output.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvLayer;
use crate::error::{Error, Result};
use crate::tensor::{relu, relu_backward, Shape, Tensor};

/// `(in, out, kernel)` for each layer.
pub const LAYER_SHAPES: [(usize, usize, usize); 3] = [(2, 48, 7), (48, 32, 5), (32, 1, 3)];

pub const PARAM_COUNT: usize = 43_473;

const CHECKPOINT_MAGIC: &[u8; 4] = b"RPNN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub layers: [ConvLayer; 3],
}

impl NetParams {
    pub fn zeros() -> Self {
        let make =
            |(i, o, k): (usize, usize, usize)| ConvLayer::zeros(i, o, k).expect("static shapes");
        NetParams {
            layers: LAYER_SHAPES.map(make),
        }
    }

    /// He-uniform kernels (bound `√(6/fan_in)`), zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros();
        for layer in params.layers.iter_mut() {
            let fan_in = layer.in_channels() * layer.kernel_size() * layer.kernel_size();
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in layer.weight_mut() {
                *w = rng.gen_range(-bound..bound);
            }
        }
        params
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    /// Layer 1→3, kernel then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight());
            out.extend_from_slice(l.bias());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                "NetParams::set_flat",
                self.param_count(),
                flat.len(),
            ));
        }
        let mut off = 0;
        for l in self.layers.iter_mut() {
            let nw = l.weight().len();
            l.weight_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias().len();
            l.bias_mut().copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros();
        p.set_flat(flat)?;
        Ok(p)
    }

    /// Checkpoint layout: `"RPNN"`, version `u32`, parameter count `u64`,
    /// then every parameter as little-endian `f32` in [`to_flat`](Self::to_flat) order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let flat = self.to_flat();
        let mut buf = Vec::with_capacity(16 + 4 * flat.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        for v in flat {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("checkpoint: missing RPNN magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint: unsupported version {version}"
            )));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if count != PARAM_COUNT {
            return Err(Error::Format(format!(
                "checkpoint: header declares {count} parameters, network has {PARAM_COUNT}"
            )));
        }
        let payload = &bytes[16..];
        if payload.len() != 4 * count {
            return Err(Error::Format(format!(
                "checkpoint: expected {} payload bytes, found {}",
                4 * count,
                payload.len()
            )));
        }
        let flat: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_flat(&flat)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Tensor,
    hidden1: Tensor,
    hidden2: Tensor,
}

#[derive(Clone, Debug)]
pub struct NetGrads {
    /// Flat, same order as [`NetParams::to_flat`].
    pub params: Vec<f64>,
    pub pan: Option<Tensor>,
    pub band_interp: Option<Tensor>,
}

fn check_pair(pan: &Tensor, band_interp: &Tensor) -> Result<()> {
    if pan.channels() != 1 {
        return Err(Error::shape(
            "network input pan",
            "1 channel",
            pan.channels(),
        ));
    }
    band_interp.ensure_shape("network input band", pan.shape())
}

pub fn forward(pan: &Tensor, band_interp: &Tensor, params: &NetParams) -> Result<Tensor> {
    forward_with_cache(pan, band_interp, params).map(|(out, _)| out)
}

pub fn forward_with_cache(
    pan: &Tensor,
    band_interp: &Tensor,
    params: &NetParams,
) -> Result<(Tensor, ForwardCache)> {
    check_pair(pan, band_interp)?;
    let input = Tensor::concat_channels(&[pan, band_interp])?;
    let [c1, c2, c3] = &params.layers;
    let hidden1 = relu(&c1.forward(&input)?);
    let hidden2 = relu(&c2.forward(&hidden1)?);
    let mut out = c3.forward(&hidden2)?;
    out.axpy(1.0, band_interp)?;
    Ok((
        out,
        ForwardCache {
            input,
            hidden1,
            hidden2,
        },
    ))
}

/// Backpropagates `grad_fused = dL/dfused` through the network.
pub fn backward(
    params: &NetParams,
    cache: &ForwardCache,
    grad_fused: &Tensor,
    with_input_grad: bool,
) -> Result<NetGrads> {
    let (h, w) = (cache.input.height(), cache.input.width());
    grad_fused.ensure_shape("network backward", Shape::new(1, h, w))?;
    let [c1, c2, c3] = &params.layers;

    let b3 = c3.backward(&cache.hidden2, grad_fused, true)?;
    let g2 = relu_backward(&cache.hidden2, b3.input.as_ref().expect("requested"))?;
    let b2 = c2.backward(&cache.hidden1, &g2, true)?;
    let g1 = relu_backward(&cache.hidden1, b2.input.as_ref().expect("requested"))?;
    let b1 = c1.backward(&cache.input, &g1, with_input_grad)?;

    let mut flat = Vec::with_capacity(PARAM_COUNT);
    for g in [&b1.params, &b2.params, &b3.params] {
        flat.extend_from_slice(&g.weight);
        flat.extend_from_slice(&g.bias);
    }
    let (pan, band_interp) = match b1.input {
        Some(gi) => {
            let mut band = gi.channel(1);
            band.axpy(1.0, grad_fused)?;
            (Some(gi.channel(0)), Some(band))
        }
        None => (None, None),
    };
    Ok(NetGrads {
        params: flat,
        pan,
        band_interp,
    })
}

/// Rectifier masks of both hidden layers, used by gradient checks to detect
/// finite-difference steps that cross a ReLU kink.
pub fn activation_signature(cache: &ForwardCache) -> Vec<bool> {
    cache
        .hidden1
        .data()
        .iter()
        .chain(cache.hidden2.data())
        .map(|&v| v > 0.0)
        .collect()
}
