//! Parameter layout and the end-to-end forward pass of one episode.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{InNeighborhoods, ResampleTable, Tape, Var};
use crate::config::Config;
use crate::dfm::{
    discriminative_prior_var, masked_prototypes_var, modulate_query_var, modulate_support_var, Conv1x1, ConvVars,
    Modality,
};
use crate::encoder::{encoder_forward_var, EncoderKind, EncoderParams, EncoderVars, DOWNSAMPLE};
use crate::episodes::Episode;
use crate::error::Result;
use crate::gat::{gat_init, GatVars};
use crate::geometry::{downsample_nearest, upsample_table};
use crate::graph::{full_view_graph, knn_spatial_graph, star_view_graph, Graph};
use crate::params::{Bound, VineParams};
use crate::svga::{make_pseudo_views, svga_forward, svga_forward_kshot, GraphToggles, SvgaGraphs, SvgaVars};
use crate::tensor::Tensor;
use crate::vrp::{
    build_query_prompt_var, build_support_prompt_var, decode_mask_var, fuse_vrp_var, prediction_loss_var,
    total_loss_var, AttnParams, AttnVars, DecoderParams, DecoderVars, PredictionLoss,
};

const PSEUDO_VIEW_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const ATTN_BLOCKS: [&str; 5] = ["support_stage1", "support_stage2", "query_stage1", "query_stage2", "fuse"];

/// Fresh parameters for `cfg`, drawn from a generator seeded with
/// `cfg.seed`. Every component is registered whatever the ablation flags say.
pub fn init_params(cfg: &Config) -> Result<VineParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.channels;
    let mut params = VineParams::new();
    for kind in [EncoderKind::Sam, EncoderKind::Res] {
        EncoderParams::init(kind, c, &mut rng)?.register(&mut params);
    }
    gat_init(c, c / cfg.svga_spatial_heads, cfg.svga_spatial_heads, &mut rng).register("svga.gat_space", &mut params);
    gat_init(c, c / cfg.svga_view_heads, cfg.svga_view_heads, &mut rng).register("svga.gat_view", &mut params);
    for m in Modality::ALL {
        for side in ["support", "query"] {
            Conv1x1::init(2 * c + 1, c, &mut rng).register(&format!("dfm.{}.{side}", m.name()), &mut params);
        }
    }
    let s = (3.0 / c as f64).sqrt();
    for side in ["support", "query"] {
        let t = Tensor::from_fn(&[cfg.tokens, c], |_| rng.gen_range(-s..=s));
        params.insert(format!("prompt_tokens.{side}"), t);
    }
    for block in ATTN_BLOCKS {
        AttnParams::init(c, &mut rng).register(&format!("vrp.{block}"), &mut params);
    }
    DecoderParams::init(cfg.tokens, c, cfg.decoder_hidden, DOWNSAMPLE, &mut rng).register("decoder", &mut params);
    Ok(params)
}

/// Graphs and resampling tables that depend only on the configuration.
#[derive(Clone, Debug)]
pub struct Topology {
    pub spatial: Graph,
    spatial_nbr: Arc<InNeighborhoods>,
    pseudo_view: Arc<InNeighborhoods>,
    shot_view: Arc<InNeighborhoods>,
    single_view: Arc<InNeighborhoods>,
    upsample: Arc<ResampleTable>,
    toggles: GraphToggles,
}

impl Topology {
    pub fn new(cfg: &Config) -> Result<Self> {
        let f = cfg.feature_size();
        let mut spatial = knn_spatial_graph(f, f, cfg.svga_knn_k)?;
        if !cfg.svga_spatial_graph {
            spatial = spatial.self_loops_only();
        }
        Ok(Self {
            spatial_nbr: spatial.in_neighborhoods(),
            spatial,
            pseudo_view: star_view_graph(cfg.svga_num_views + 1)?.in_neighborhoods(),
            shot_view: full_view_graph(cfg.k_shot)?.in_neighborhoods(),
            single_view: full_view_graph(1)?.in_neighborhoods(),
            upsample: Arc::new(upsample_table(f, f, DOWNSAMPLE)),
            toggles: GraphToggles {
                spatial: cfg.svga_spatial_graph,
                view: cfg.svga_view_graph,
            },
        })
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Query logits at image resolution.
    pub logits: Var,
    pub proto_loss: Var,
    pub pred: PredictionLoss,
    pub total: Var,
    /// Query prior of the semantic branch (or the shared prior), when DFM is on.
    pub disc_prior: Option<Var>,
}

struct Branches {
    sam: Vec<Var>,
    res: Vec<Var>,
}

/// Builds the whole episode computation on `tape` from bound parameters.
pub fn forward(tape: &mut Tape, bound: &Bound, cfg: &Config, topo: &Topology, ep: &Episode) -> Result<Forward> {
    let k = ep.supports.len();
    let masks: Vec<Tensor> = ep
        .supports
        .iter()
        .map(|(_, m)| downsample_nearest(m, DOWNSAMPLE))
        .collect::<Result<_>>()?;

    let enc_sam = cfg.use_sam.then(|| EncoderVars::from_bound(bound, EncoderKind::Sam));
    let enc_res = cfg.use_res.then(|| EncoderVars::from_bound(bound, EncoderKind::Res));
    // With one branch off, the other encoder plays both roles.
    let sam_enc = enc_sam.as_ref().or(enc_res.as_ref()).expect("validated config");
    let res_enc = enc_res.as_ref().or(enc_sam.as_ref()).expect("validated config");

    // Support shots first, query last.
    let images: Vec<&Tensor> = ep.supports.iter().map(|(i, _)| i).chain([&ep.query_image]).collect();
    let encode = |tape: &mut Tape, enc: &EncoderVars| -> Result<Vec<Var>> {
        images
            .iter()
            .map(|&img| {
                let x = tape.constant(img.clone());
                encoder_forward_var(tape, x, enc)
            })
            .collect()
    };
    let res = encode(tape, res_enc)?;
    let sam = if cfg.use_sam && cfg.use_res { encode(tape, sam_enc)? } else { res.clone() };
    let mut feats = Branches { sam, res };

    let proto_loss = if cfg.svga_enabled {
        let svga = SvgaVars {
            spatial: GatVars::from_bound(bound, "svga.gat_space", cfg.svga_spatial_heads),
            view: GatVars::from_bound(bound, "svga.gat_view", cfg.svga_view_heads),
        };
        let query_res = feats.res[k];
        let out = if k == 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(ep.spec.seed ^ PSEUDO_VIEW_STREAM);
            let (img, mask) = &ep.supports[0];
            let views = make_pseudo_views(img, mask, cfg.svga_num_views, cfg.svga_delta_max, &mut rng)?;
            let mut support = vec![feats.res[0]];
            for (v, _) in &views[1..] {
                let x = tape.constant(v.clone());
                support.push(encoder_forward_var(tape, x, res_enc)?);
            }
            let graphs = SvgaGraphs {
                spatial: topo.spatial_nbr.clone(),
                view: topo.pseudo_view.clone(),
            };
            svga_forward(tape, &support, query_res, &graphs, &svga, topo.toggles)?
        } else {
            let graphs = SvgaGraphs {
                spatial: topo.spatial_nbr.clone(),
                view: topo.shot_view.clone(),
            };
            svga_forward_kshot(tape, &feats.res[..k], &[query_res], &graphs, &topo.single_view, &svga, topo.toggles)?
        };
        feats.res[..k].copy_from_slice(&out.support_refined);
        feats.res[k] = out.query_refined;
        out.proto_loss
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let disc_prior = if cfg.dfm_enabled {
        Some(modulate(tape, bound, cfg, &mut feats, &masks)?)
    } else {
        None
    };

    let attn = |name: &str| AttnVars::from_bound(bound, &format!("vrp.{name}"));
    let tokens_s = bound.get("prompt_tokens.support");
    let tokens_q = bound.get("prompt_tokens.query");
    let p_s = build_support_prompt_var(
        tape,
        tokens_s,
        &feats.sam[..k],
        &feats.res[..k],
        &masks,
        &attn("support_stage1"),
        &attn("support_stage2"),
    )?;
    let p_q = build_query_prompt_var(
        tape,
        tokens_q,
        feats.sam[k],
        feats.res[k],
        &attn("query_stage1"),
        &attn("query_stage2"),
    )?;
    let vrp = fuse_vrp_var(tape, p_s, p_q, &attn("fuse"))?;
    let decoder = DecoderVars::from_bound(bound, "decoder", topo.upsample.clone());
    let logits = decode_mask_var(tape, vrp, feats.sam[k], &decoder)?;

    let pred = prediction_loss_var(tape, logits, Arc::new(ep.query_mask.clone()))?;
    let total = total_loss_var(tape, proto_loss, pred.total, cfg.lambda_proto, cfg.lambda_pred)?;
    Ok(Forward {
        logits,
        proto_loss,
        pred,
        total,
        disc_prior,
    })
}

/// Foreground modulation of both branches in place; returns the query prior
/// of the semantic branch, or the shared prior.
fn modulate(tape: &mut Tape, bound: &Bound, cfg: &Config, feats: &mut Branches, masks: &[Tensor]) -> Result<Var> {
    let k = masks.len();
    let mut protos = Vec::with_capacity(2);
    let mut priors = Vec::with_capacity(2);
    for m in Modality::ALL {
        let maps = match m {
            Modality::Res => &feats.res,
            Modality::Sam => &feats.sam,
        };
        let (mut fg, mut bg) = masked_prototypes_var(tape, maps[0], &masks[0])?;
        for (r, mask) in masks.iter().enumerate().skip(1) {
            let (f, b) = masked_prototypes_var(tape, maps[r], mask)?;
            fg = tape.add(fg, f)?;
            bg = tape.add(bg, b)?;
        }
        if k > 1 {
            fg = tape.scale(fg, 1.0 / k as f64);
            bg = tape.scale(bg, 1.0 / k as f64);
        }
        priors.push(discriminative_prior_var(tape, maps[k], fg, bg)?.disc_prior);
        protos.push(fg);
    }
    if cfg.dfm_shared_prior {
        let s = tape.add(priors[0], priors[1])?;
        let shared = tape.scale(s, 0.5);
        priors = vec![shared, shared];
    }
    for (i, m) in Modality::ALL.into_iter().enumerate() {
        let sup = ConvVars::from_bound(bound, &format!("dfm.{}.support", m.name()));
        let qry = ConvVars::from_bound(bound, &format!("dfm.{}.query", m.name()));
        let maps = match m {
            Modality::Res => &mut feats.res,
            Modality::Sam => &mut feats.sam,
        };
        for (r, mask) in masks.iter().enumerate() {
            let mv = tape.constant(mask.clone());
            maps[r] = modulate_support_var(tape, maps[r], protos[i], mv, sup)?;
        }
        maps[k] = modulate_query_var(tape, maps[k], protos[i], priors[i], qry)?;
    }
    Ok(priors[1])
}

/// Binary prediction: sigmoid above 0.5, i.e. a strictly positive logit.
pub fn binarize(logits: &Tensor) -> Tensor {
    logits.map(|x| if x > 0.0 { 1.0 } else { 0.0 })
}

/// Values produced by a parameter-free (all constants) forward pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor,
    pub mask: Tensor,
    pub disc_prior: Option<Tensor>,
    pub total: f64,
    pub proto_loss: f64,
    pub pred_loss: f64,
}

/// Forward pass with every parameter held constant.
pub fn predict(params: &VineParams, cfg: &Config, topo: &Topology, ep: &Episode) -> Result<Prediction> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let f = forward(&mut tape, &bound, cfg, topo, ep)?;
    let logits = tape.value(f.logits).clone();
    Ok(Prediction {
        mask: binarize(&logits),
        logits,
        disc_prior: f.disc_prior.map(|v| tape.value(v).clone()),
        total: tape.value(f.total).item(),
        proto_loss: tape.value(f.proto_loss).item(),
        pred_loss: tape.value(f.pred.total).item(),
    })
}
