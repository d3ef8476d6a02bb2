//! Discriminative foreground modulation.
//!
//! Foreground/background prototypes come from masked average pooling of the
//! support features. The query prior is `ReLU(cos(F_Q, p_fg) − cos(F_Q, p_bg))`.
//! Both branches are then re-projected by a 1×1 convolution over
//! `[features | broadcast p_fg | mask-or-prior]`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::{Bound, VineParams};
use crate::tensor::Tensor;

/// Area floor for masked pooling.
pub const AREA_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Res,
    Sam,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Res, Modality::Sam];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Res => "res",
            Modality::Sam => "sam",
        }
    }
}

/// Per-location linear map with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1x1 {
    /// `C_out × C_in`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv1x1 {
    /// Xavier-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let s = (6.0 / (c_in + c_out) as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[c_out, c_in], |_| rng.gen_range(-s..=s)),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c_out, c_in]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn register(&self, prefix: &str, params: &mut VineParams) {
        params.insert(format!("{prefix}.weight"), self.weight.clone());
        params.insert(format!("{prefix}.bias"), self.bias.clone());
    }
}

/// `(weight, bias)` handles of a bound 1×1 convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

impl ConvVars {
    pub fn bind(tape: &mut Tape, c: &Conv1x1) -> Self {
        Self {
            weight: tape.constant(c.weight.clone()),
            bias: tape.constant(c.bias.clone()),
        }
    }

    pub fn from_bound(bound: &Bound, prefix: &str) -> Self {
        Self {
            weight: bound.get(&format!("{prefix}.weight")),
            bias: bound.get(&format!("{prefix}.bias")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DfmPriors<V> {
    pub fg_proto: V,
    pub bg_proto: V,
    pub fg_map: V,
    pub bg_map: V,
    pub disc_prior: V,
}

/// Masked means `Σ(f ⊙ m)/max(Σm, ε)` and `Σ(f ⊙ (1−m))/max(Σ(1−m), ε)`.
/// `mask` must already be at feature resolution.
pub fn masked_prototypes_var(tape: &mut Tape, feat: Var, mask: &Tensor) -> Result<(Var, Var)> {
    let (c, h, w) = match *tape.shape(feat) {
        [c, h, w] if mask.shape() == [h, w] => (c, h, w),
        _ => return Err(shape_err("masked_prototypes", tape.shape(feat), mask.shape())),
    };
    let n = h * w;
    let area: f64 = mask.data().iter().sum();
    if area == 0.0 {
        log::warn!("degenerate episode: support mask is empty at feature resolution");
    }
    let flat = tape.reshape(feat, &[c, n])?;
    let pool = |tape: &mut Tape, weights: Vec<f64>| -> Result<Var> {
        let area: f64 = weights.iter().sum();
        let col = tape.constant(Tensor::new(&[n, 1], weights)?);
        let s = tape.matmul(flat, col)?;
        let s = tape.scale(s, 1.0 / area.max(AREA_EPS));
        tape.reshape(s, &[c])
    };
    let fg = pool(tape, mask.data().to_vec())?;
    let bg = pool(tape, mask.data().iter().map(|m| 1.0 - m).collect())?;
    Ok((fg, bg))
}

pub fn discriminative_prior_var(tape: &mut Tape, query_feat: Var, fg: Var, bg: Var) -> Result<DfmPriors<Var>> {
    let fg_map = tape.cosine_map(query_feat, fg)?;
    let bg_map = tape.cosine_map(query_feat, bg)?;
    let diff = tape.sub(fg_map, bg_map)?;
    let disc_prior = tape.relu(diff);
    Ok(DfmPriors {
        fg_proto: fg,
        bg_proto: bg,
        fg_map,
        bg_map,
        disc_prior,
    })
}

fn modulate(tape: &mut Tape, feat: Var, fg: Var, third: Var, conv: ConvVars) -> Result<Var> {
    let (h, w) = match *tape.shape(feat) {
        [_, h, w] => (h, w),
        _ => return Err(shape_err("modulate", tape.shape(feat), tape.shape(third))),
    };
    if tape.shape(third) != [h, w] {
        return Err(shape_err("modulate", tape.shape(feat), tape.shape(third)));
    }
    let fg_map = tape.broadcast_hw(fg, h, w)?;
    let third = tape.reshape(third, &[1, h, w])?;
    let cat = tape.concat(&[feat, fg_map, third], 0)?;
    tape.conv1x1(cat, conv.weight, conv.bias)
}

/// `Conv1x1(Concat(F_S, p_fg, M_S))`.
pub fn modulate_support_var(tape: &mut Tape, feat: Var, fg: Var, mask: Var, conv: ConvVars) -> Result<Var> {
    modulate(tape, feat, fg, mask, conv)
}

/// `Conv1x1(Concat(F_Q, p_fg, P_disc))`.
pub fn modulate_query_var(tape: &mut Tape, feat: Var, fg: Var, disc: Var, conv: ConvVars) -> Result<Var> {
    modulate(tape, feat, fg, disc, conv)
}

pub fn masked_prototypes(feat: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let f = tape.constant(feat.clone());
    let (fg, bg) = masked_prototypes_var(&mut tape, f, mask)?;
    Ok((tape.value(fg).clone(), tape.value(bg).clone()))
}

pub fn discriminative_prior(query_feat: &Tensor, fg: &Tensor, bg: &Tensor) -> Result<DfmPriors<Tensor>> {
    let mut tape = Tape::new();
    let q = tape.constant(query_feat.clone());
    let fv = tape.constant(fg.clone());
    let bv = tape.constant(bg.clone());
    let p = discriminative_prior_var(&mut tape, q, fv, bv)?;
    let v = |x: Var| tape.value(x).clone();
    Ok(DfmPriors {
        fg_proto: v(p.fg_proto),
        bg_proto: v(p.bg_proto),
        fg_map: v(p.fg_map),
        bg_map: v(p.bg_map),
        disc_prior: v(p.disc_prior),
    })
}

fn modulate_tensors(feat: &Tensor, fg: &Tensor, third: &Tensor, conv: &Conv1x1) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(feat.clone());
    let p = tape.constant(fg.clone());
    let t = tape.constant(third.clone());
    let cv = ConvVars::bind(&mut tape, conv);
    let out = modulate(&mut tape, f, p, t, cv)?;
    Ok(tape.value(out).clone())
}

pub fn modulate_support(feat: &Tensor, fg: &Tensor, mask: &Tensor, conv: &Conv1x1) -> Result<Tensor> {
    modulate_tensors(feat, fg, mask, conv)
}

pub fn modulate_query(feat: &Tensor, fg: &Tensor, disc: &Tensor, conv: &Conv1x1) -> Result<Tensor> {
    modulate_tensors(feat, fg, disc, conv)
}
