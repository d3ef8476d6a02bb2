//! Reference prompt formation, prompt fusion, the mask decoder and the
//! segmentation losses.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ResampleTable, Tape, Var};
use crate::dfm::{Conv1x1, ConvVars};
use crate::error::{shape_err, Result, VineError};
use crate::geometry::upsample_table;
use crate::params::{Bound, VineParams};
use crate::tensor::Tensor;

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

/// Projections of one single-head attention block, each `C × C` and applied
/// on the right (`x · W`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttnParams {
    pub fn init<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let s = (3.0 / c as f64).sqrt();
        let mut m = || Tensor::from_fn(&[c, c], |_| rng.gen_range(-s..=s));
        Self {
            wq: m(),
            wk: m(),
            wv: m(),
            wo: m(),
        }
    }

    /// All four projections set to the identity.
    pub fn identity(c: usize) -> Self {
        Self {
            wq: Tensor::eye(c),
            wk: Tensor::eye(c),
            wv: Tensor::eye(c),
            wo: Tensor::eye(c),
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn register(&self, prefix: &str, params: &mut VineParams) {
        for (name, t) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            params.insert(format!("{prefix}.{name}"), t.clone());
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl AttnVars {
    pub fn bind(tape: &mut Tape, p: &AttnParams) -> Self {
        Self {
            wq: tape.constant(p.wq.clone()),
            wk: tape.constant(p.wk.clone()),
            wv: tape.constant(p.wv.clone()),
            wo: tape.constant(p.wo.clone()),
        }
    }

    pub fn from_bound(bound: &Bound, prefix: &str) -> Self {
        let g = |n: &str| bound.get(&format!("{prefix}.{n}"));
        Self {
            wq: g("wq"),
            wk: g("wk"),
            wv: g("wv"),
            wo: g("wo"),
        }
    }
}

/// Flattens `C×H×W` into `(H·W)×C` rows.
pub fn feature_rows(tape: &mut Tape, feat: Var) -> Result<Var> {
    let (c, n) = match *tape.shape(feat) {
        [c, h, w] => (c, h * w),
        _ => return Err(shape_err("feature_rows", tape.shape(feat), &[0, 0, 0])),
    };
    let flat = tape.reshape(feat, &[c, n])?;
    tape.transpose(flat)
}

/// Stacks the feature rows of several maps.
pub fn stacked_rows(tape: &mut Tape, feats: &[Var]) -> Result<Var> {
    let rows = feats
        .iter()
        .map(|&f| feature_rows(tape, f))
        .collect::<Result<Vec<_>>>()?;
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat(&rows, 0)
    }
}

/// `tokens + softmax(mask(q kᵀ/√C)) v · W_o` with `q = tokens·W_q`,
/// `k = keys·W_k`, `v = values·W_v`. Positions with `mask == 0` are excluded;
/// an all-zero mask falls back to no masking.
pub fn masked_cross_attn_var(
    tape: &mut Tape,
    tokens: Var,
    keys: Var,
    values: Var,
    mask: Option<&[f64]>,
    p: &AttnVars,
) -> Result<Var> {
    let (t_shape, k_shape, v_shape) = (tape.shape(tokens), tape.shape(keys), tape.shape(values));
    let c = match *t_shape {
        [_, c] if k_shape.len() == 2 && k_shape[1] == c && v_shape == k_shape => c,
        _ => return Err(shape_err("cross_attn", t_shape, k_shape)),
    };
    let n = k_shape[0];
    let keep: Option<Arc<[bool]>> = match mask {
        None => None,
        Some(m) if m.len() != n => return Err(shape_err("masked_cross_attn", &[m.len()], &[n])),
        Some(m) if m.iter().all(|&x| x <= 0.5) => {
            log::warn!("attention mask is empty; attending to all positions");
            None
        }
        Some(m) => Some(m.iter().map(|&x| x > 0.5).collect()),
    };
    let q = tape.matmul(tokens, p.wq)?;
    let k = tape.matmul(keys, p.wk)?;
    let v = tape.matmul(values, p.wv)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (c as f64).sqrt());
    let attn = tape.softmax_masked(logits, keep)?;
    let read = tape.matmul(attn, v)?;
    let out = tape.matmul(read, p.wo)?;
    tape.add(tokens, out)
}

pub fn cross_attn_var(tape: &mut Tape, tokens: Var, keys: Var, values: Var, p: &AttnVars) -> Result<Var> {
    masked_cross_attn_var(tape, tokens, keys, values, None, p)
}

/// Two mask-guided stages: sam→sam, then sam keys with res values.
/// Several shots are handled by stacking their rows and masks.
pub fn build_support_prompt_var(
    tape: &mut Tape,
    tokens: Var,
    f_sam: &[Var],
    f_res: &[Var],
    masks: &[Tensor],
    stage1: &AttnVars,
    stage2: &AttnVars,
) -> Result<Var> {
    if f_sam.is_empty() || f_sam.len() != f_res.len() || f_sam.len() != masks.len() {
        return Err(VineError::InvalidArgument(format!(
            "support prompt needs matching shots: {} sam, {} res, {} masks",
            f_sam.len(),
            f_res.len(),
            masks.len()
        )));
    }
    let ks = stacked_rows(tape, f_sam)?;
    let vr = stacked_rows(tape, f_res)?;
    let mask: Vec<f64> = masks.iter().flat_map(|m| m.data().iter().copied()).collect();
    let p1 = masked_cross_attn_var(tape, tokens, ks, ks, Some(&mask), stage1)?;
    masked_cross_attn_var(tape, p1, ks, vr, Some(&mask), stage2)
}

pub fn build_query_prompt_var(
    tape: &mut Tape,
    tokens: Var,
    f_sam: Var,
    f_res: Var,
    stage1: &AttnVars,
    stage2: &AttnVars,
) -> Result<Var> {
    let ks = feature_rows(tape, f_sam)?;
    let vr = feature_rows(tape, f_res)?;
    let p1 = cross_attn_var(tape, tokens, ks, ks, stage1)?;
    cross_attn_var(tape, p1, ks, vr, stage2)
}

pub fn fuse_vrp_var(tape: &mut Tape, p_support: Var, p_query: Var, p: &AttnVars) -> Result<Var> {
    if tape.shape(p_support) != tape.shape(p_query) {
        return Err(shape_err("fuse_vrp", tape.shape(p_support), tape.shape(p_query)));
    }
    cross_attn_var(tape, p_support, p_query, p_query, p)
}

/// Affinity head: `[vrp·F/√C | F] → conv1x1 → ReLU → conv1x1 → upsample`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub conv0: Conv1x1,
    pub conv1: Conv1x1,
    pub upsample: usize,
}

impl DecoderParams {
    /// The output stage starts at zero, so an untrained decoder emits logit 0.
    pub fn init<R: Rng + ?Sized>(tokens: usize, c: usize, hidden: usize, upsample: usize, rng: &mut R) -> Self {
        Self {
            conv0: Conv1x1::init(tokens + c, hidden, rng),
            conv1: Conv1x1::zeros(hidden, 1),
            upsample,
        }
    }

    pub fn register(&self, prefix: &str, params: &mut VineParams) {
        self.conv0.register(&format!("{prefix}.conv0"), params);
        self.conv1.register(&format!("{prefix}.conv1"), params);
    }
}

#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub conv0: ConvVars,
    pub conv1: ConvVars,
    pub upsample: Arc<ResampleTable>,
}

impl DecoderVars {
    pub fn bind(tape: &mut Tape, p: &DecoderParams, feat_hw: (usize, usize)) -> Self {
        Self {
            conv0: ConvVars::bind(tape, &p.conv0),
            conv1: ConvVars::bind(tape, &p.conv1),
            upsample: Arc::new(upsample_table(feat_hw.0, feat_hw.1, p.upsample)),
        }
    }

    pub fn from_bound(bound: &Bound, prefix: &str, upsample: Arc<ResampleTable>) -> Self {
        Self {
            conv0: ConvVars::from_bound(bound, &format!("{prefix}.conv0")),
            conv1: ConvVars::from_bound(bound, &format!("{prefix}.conv1")),
            upsample,
        }
    }
}

/// Per-token affinity maps `T×H×W`, scaled by `1/√C`.
pub fn affinity_var(tape: &mut Tape, vrp: Var, feat: Var) -> Result<Var> {
    let (c, h, w) = match (tape.shape(vrp), tape.shape(feat)) {
        (&[_, c], &[c2, h, w]) if c == c2 => (c, h, w),
        (a, b) => return Err(shape_err("affinity", a, b)),
    };
    let t = tape.shape(vrp)[0];
    let flat = tape.reshape(feat, &[c, h * w])?;
    let a = tape.matmul(vrp, flat)?;
    let a = tape.scale(a, 1.0 / (c as f64).sqrt());
    tape.reshape(a, &[t, h, w])
}

/// Logits at image resolution, shape `H_img × W_img`.
pub fn decode_mask_var(tape: &mut Tape, vrp: Var, query_feat: Var, p: &DecoderVars) -> Result<Var> {
    let aff = affinity_var(tape, vrp, query_feat)?;
    let cat = tape.concat(&[aff, query_feat], 0)?;
    let hid = tape.conv1x1(cat, p.conv0.weight, p.conv0.bias)?;
    let hid = tape.relu(hid);
    let low = tape.conv1x1(hid, p.conv1.weight, p.conv1.bias)?;
    let up = tape.resample(low, p.upsample.clone())?;
    let (h, w) = p.upsample.out_hw;
    tape.reshape(up, &[h, w])
}

/// Loss handles of one prediction.
#[derive(Clone, Copy, Debug)]
pub struct PredictionLoss {
    pub total: Var,
    pub bce: Var,
    pub dice: Var,
}

pub fn prediction_loss_var(tape: &mut Tape, logits: Var, gt: Arc<Tensor>) -> Result<PredictionLoss> {
    let bce = tape.bce_with_logits(logits, gt.clone())?;
    let probs = tape.sigmoid(logits);
    let dice = tape.dice(probs, gt, DICE_EPS)?;
    let total = tape.add(bce, dice)?;
    Ok(PredictionLoss { total, bce, dice })
}

pub fn total_loss_var(tape: &mut Tape, proto: Var, pred: Var, lambda_proto: f64, lambda_pred: f64) -> Result<Var> {
    let a = tape.scale(proto, lambda_proto);
    let b = tape.scale(pred, lambda_pred);
    tape.add(a, b)
}

pub fn total_loss(proto: f64, pred: f64, lambda_proto: f64, lambda_pred: f64) -> f64 {
    lambda_proto * proto + lambda_pred * pred
}

pub fn masked_cross_attn(
    tokens: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: Option<&[f64]>,
    p: &AttnParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = tape.constant(tokens.clone());
    let k = tape.constant(keys.clone());
    let v = tape.constant(values.clone());
    let pv = AttnVars::bind(&mut tape, p);
    let out = masked_cross_attn_var(&mut tape, t, k, v, mask, &pv)?;
    Ok(tape.value(out).clone())
}

pub fn cross_attn(tokens: &Tensor, keys: &Tensor, values: &Tensor, p: &AttnParams) -> Result<Tensor> {
    masked_cross_attn(tokens, keys, values, None, p)
}

pub fn build_support_prompt(
    tokens: &Tensor,
    f_sam: &Tensor,
    f_res: &Tensor,
    mask: &Tensor,
    stage1: &AttnParams,
    stage2: &AttnParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = tape.constant(tokens.clone());
    let s = tape.constant(f_sam.clone());
    let r = tape.constant(f_res.clone());
    let (a, b) = (AttnVars::bind(&mut tape, stage1), AttnVars::bind(&mut tape, stage2));
    let out = build_support_prompt_var(&mut tape, t, &[s], &[r], std::slice::from_ref(mask), &a, &b)?;
    Ok(tape.value(out).clone())
}

pub fn build_query_prompt(
    tokens: &Tensor,
    f_sam: &Tensor,
    f_res: &Tensor,
    stage1: &AttnParams,
    stage2: &AttnParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = tape.constant(tokens.clone());
    let s = tape.constant(f_sam.clone());
    let r = tape.constant(f_res.clone());
    let (a, b) = (AttnVars::bind(&mut tape, stage1), AttnVars::bind(&mut tape, stage2));
    let out = build_query_prompt_var(&mut tape, t, s, r, &a, &b)?;
    Ok(tape.value(out).clone())
}

pub fn fuse_vrp(p_support: &Tensor, p_query: &Tensor, p: &AttnParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.constant(p_support.clone());
    let q = tape.constant(p_query.clone());
    let pv = AttnVars::bind(&mut tape, p);
    let out = fuse_vrp_var(&mut tape, s, q, &pv)?;
    Ok(tape.value(out).clone())
}

pub fn decode_mask(vrp: &Tensor, query_feat: &Tensor, p: &DecoderParams) -> Result<Tensor> {
    let (h, w) = match *query_feat.shape() {
        [_, h, w] => (h, w),
        _ => return Err(shape_err("decode_mask", vrp.shape(), query_feat.shape())),
    };
    let mut tape = Tape::new();
    let v = tape.constant(vrp.clone());
    let f = tape.constant(query_feat.clone());
    let pv = DecoderVars::bind(&mut tape, p, (h, w));
    let out = decode_mask_var(&mut tape, v, f, &pv)?;
    Ok(tape.value(out).clone())
}

/// `(bce + dice, bce, dice)`.
pub fn prediction_loss(logits: &Tensor, gt: &Tensor) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let pl = prediction_loss_var(&mut tape, l, Arc::new(gt.clone()))?;
    Ok((
        tape.value(pl.total).item(),
        tape.value(pl.bce).item(),
        tape.value(pl.dice).item(),
    ))
}
