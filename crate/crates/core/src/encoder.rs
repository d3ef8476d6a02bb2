//! Two small convolutional backbones that map a `3×H×W` image to a
//! `C×H/4×W/4` feature grid.
//!
//! The `sam` stack downsamples in its first two layers and then refines at
//! full width; the `res` stack keeps full resolution for its first, narrow
//! layer and downsamples later. Inputs are centred on `INPUT_MEAN`. Every layer is a 3×3 convolution with
//! padding 1; all but the last are followed by ReLU.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, VineError};
use crate::params::{Bound, VineParams};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
pub const DOWNSAMPLE: usize = 4;
/// Subtracted from every pixel before the first convolution.
pub const INPUT_MEAN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    Sam,
    Res,
}

impl EncoderKind {
    pub fn prefix(self) -> &'static str {
        match self {
            EncoderKind::Sam => "encoder_sam",
            EncoderKind::Res => "encoder_res",
        }
    }

    /// `(out_channels, stride)` per layer for feature width `c`.
    pub fn layout(self, c: usize) -> Vec<(usize, usize)> {
        match self {
            EncoderKind::Sam => vec![(c / 2, 2), (c, 2), (c, 1), (c, 1), (c, 1)],
            EncoderKind::Res => vec![(c / 4, 1), (c / 2, 2), (c, 2), (c, 1)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `C_out × C_in × 3 × 3`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub kind: EncoderKind,
    pub layers: Vec<ConvLayer>,
}

impl EncoderParams {
    /// He-uniform weights, zero biases. `channels` must be a positive
    /// multiple of 4.
    pub fn init<R: Rng + ?Sized>(kind: EncoderKind, channels: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(4) {
            return Err(VineError::InvalidArgument(format!(
                "encoder width {channels} must be a positive multiple of 4"
            )));
        }
        let mut c_in = 3;
        let layers = kind
            .layout(channels)
            .into_iter()
            .map(|(c_out, stride)| {
                let fan_in = (c_in * KERNEL * KERNEL) as f64;
                let s = (6.0 / fan_in).sqrt();
                let weight = Tensor::from_fn(&[c_out, c_in, KERNEL, KERNEL], |_| rng.gen_range(-s..=s));
                c_in = c_out;
                ConvLayer {
                    weight,
                    bias: Tensor::zeros(&[c_out]),
                    stride,
                }
            })
            .collect();
        Ok(Self { kind, layers })
    }

    pub fn register(&self, params: &mut VineParams) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("{}.conv{i}", self.kind.prefix());
            params.insert(format!("{p}.weight"), l.weight.clone());
            params.insert(format!("{p}.bias"), l.bias.clone());
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    layers: Vec<(Var, Var, usize)>,
}

impl EncoderVars {
    pub fn bind(tape: &mut Tape, p: &EncoderParams) -> Self {
        Self {
            layers: p
                .layers
                .iter()
                .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()), l.stride))
                .collect(),
        }
    }

    pub fn from_bound(bound: &Bound, kind: EncoderKind) -> Self {
        let layers = kind
            .layout(4)
            .iter()
            .enumerate()
            .map(|(i, &(_, stride))| {
                let p = format!("{}.conv{i}", kind.prefix());
                (bound.get(&format!("{p}.weight")), bound.get(&format!("{p}.bias")), stride)
            })
            .collect();
        Self { layers }
    }
}

pub fn encoder_forward_var(tape: &mut Tape, image: Var, p: &EncoderVars) -> Result<Var> {
    match *tape.shape(image) {
        [3, h, w] if h % DOWNSAMPLE == 0 && w % DOWNSAMPLE == 0 && h > 0 && w > 0 => {}
        _ => {
            return Err(VineError::InvalidArgument(format!(
                "encoder input must be 3×H×W with H, W divisible by {DOWNSAMPLE}, got {:?}",
                tape.shape(image)
            )))
        }
    }
    let half = tape.constant(Tensor::full(tape.shape(image), INPUT_MEAN));
    let mut x = tape.sub(image, half)?;
    let last = p.layers.len() - 1;
    for (i, &(w, b, stride)) in p.layers.iter().enumerate() {
        x = tape.conv2d(x, w, b, stride, KERNEL / 2)?;
        if i < last {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

pub fn encoder_forward(image: &Tensor, p: &EncoderParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let vars = EncoderVars::bind(&mut tape, p);
    let out = encoder_forward_var(&mut tape, x, &vars)?;
    Ok(tape.value(out).clone())
}
