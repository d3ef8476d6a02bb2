//! Spatial–view graph alignment.
//!
//! Every structural feature map is flattened into `N = H·W` patch embeddings
//! and refined by the spatial GAT. Each support view is summarized by the mean
//! of its refined patches; those view nodes pass through the view GAT, and the
//! original view's aggregated vector is added back to its patches. Prototypes
//! are spatial means of the refined maps and their MSE is the prototype loss.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{InNeighborhoods, Tape, Var};
use crate::error::{shape_err, Result, VineError};
use crate::gat::{gat_forward_var, GatParams, GatVars};
use crate::geometry::{perturb_corners, warp, warp_mask};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Which graphs participate; both off leaves only the prototype loss over
/// raw features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphToggles {
    pub spatial: bool,
    pub view: bool,
}

impl Default for GraphToggles {
    fn default() -> Self {
        Self {
            spatial: true,
            view: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvgaParams {
    pub spatial: GatParams,
    pub view: GatParams,
}

#[derive(Clone, Debug)]
pub struct SvgaVars {
    pub spatial: GatVars,
    pub view: GatVars,
}

impl SvgaVars {
    pub fn bind(tape: &mut Tape, p: &SvgaParams, trainable: bool) -> Self {
        Self {
            spatial: GatVars::bind(tape, &p.spatial, trainable),
            view: GatVars::bind(tape, &p.view, trainable),
        }
    }
}

/// Graph topology in the form the GAT layers consume.
#[derive(Clone, Debug)]
pub struct SvgaGraphs {
    pub spatial: Arc<InNeighborhoods>,
    pub view: Arc<InNeighborhoods>,
}

impl SvgaGraphs {
    pub fn new(spatial: &Graph, view: &Graph) -> Self {
        Self {
            spatial: spatial.in_neighborhoods(),
            view: view.in_neighborhoods(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SvgaOutput<V> {
    /// One refined map per real support shot; index 0 is the original support.
    pub support_refined: Vec<V>,
    pub query_refined: V,
    pub proto_support: V,
    pub proto_query: V,
    pub proto_loss: V,
}

fn to_patches(tape: &mut Tape, f: Var) -> Result<(Var, [usize; 3])> {
    let (c, h, w) = match *tape.shape(f) {
        [c, h, w] => (c, h, w),
        _ => return Err(shape_err("svga", tape.shape(f), &[0, 0, 0])),
    };
    let flat = tape.reshape(f, &[c, h * w])?;
    Ok((tape.transpose(flat)?, [c, h, w]))
}

fn from_patches(tape: &mut Tape, x: Var, dims: [usize; 3]) -> Result<Var> {
    let t = tape.transpose(x)?;
    tape.reshape(t, &dims)
}

struct Branch {
    /// Spatially refined patch embeddings per view, `N×C`.
    patches: Vec<Var>,
    /// View-graph output per view, `C`, when the view graph is on.
    view_vectors: Option<Vec<Var>>,
    dims: [usize; 3],
}

fn run_branch(
    tape: &mut Tape,
    views: &[Var],
    graphs: &SvgaGraphs,
    view_nbr: &Arc<InNeighborhoods>,
    p: &SvgaVars,
    toggles: GraphToggles,
) -> Result<Branch> {
    let mut patches = Vec::with_capacity(views.len());
    let mut dims = None;
    for &f in views {
        let (x, d) = to_patches(tape, f)?;
        if *dims.get_or_insert(d) != d {
            return Err(shape_err("svga", &dims.unwrap(), &d));
        }
        if d[1] * d[2] != graphs.spatial.num_nodes() {
            return Err(shape_err("svga spatial graph", &d, &[graphs.spatial.num_nodes()]));
        }
        let x = if toggles.spatial {
            gat_forward_var(tape, x, &graphs.spatial, &p.spatial)?
        } else {
            x
        };
        patches.push(x);
    }
    let dims = dims.ok_or_else(|| VineError::InvalidArgument("svga needs at least one view".into()))?;
    let view_vectors = if toggles.view {
        if view_nbr.num_nodes() != views.len() {
            return Err(VineError::InvalidArgument(format!(
                "view graph has {} nodes but {} views were given",
                view_nbr.num_nodes(),
                views.len()
            )));
        }
        let mut nodes = Vec::with_capacity(views.len());
        for &x in &patches {
            let v = tape.mean_axis(x, 0)?;
            nodes.push(tape.reshape(v, &[1, dims[0]])?);
        }
        let stacked = if nodes.len() == 1 { nodes[0] } else { tape.concat(&nodes, 0)? };
        let out = gat_forward_var(tape, stacked, view_nbr, &p.view)?;
        let mut vs = Vec::with_capacity(views.len());
        for r in 0..views.len() {
            let row = tape.rows(out, r, 1)?;
            vs.push(tape.reshape(row, &[dims[0]])?);
        }
        Some(vs)
    } else {
        None
    };
    Ok(Branch {
        patches,
        view_vectors,
        dims,
    })
}

/// Refined map for view `r` of a branch, with its view vector added when
/// `fuse` is set.
fn refined(tape: &mut Tape, b: &Branch, r: usize, fuse: bool) -> Result<Var> {
    let map = from_patches(tape, b.patches[r], b.dims)?;
    match (&b.view_vectors, fuse) {
        (Some(vs), true) => {
            let bc = tape.broadcast_hw(vs[r], b.dims[1], b.dims[2])?;
            tape.add(map, bc)
        }
        _ => Ok(map),
    }
}

fn prototype_loss(tape: &mut Tape, support: &[Var], query: Var) -> Result<(Var, Var, Var)> {
    let mut protos = Vec::with_capacity(support.len());
    for &s in support {
        protos.push(tape.global_avg_pool(s)?);
    }
    let mut ps = protos[0];
    for &p in &protos[1..] {
        ps = tape.add(ps, p)?;
    }
    if protos.len() > 1 {
        ps = tape.scale(ps, 1.0 / protos.len() as f64);
    }
    let pq = tape.global_avg_pool(query)?;
    let loss = tape.mse(pq, ps)?;
    Ok((ps, pq, loss))
}

/// One-shot alignment. `support_feats[0]` is the original support view, the
/// rest are pseudo-views; `view_graph` should be the star over them. The
/// query is refined spatially only.
pub fn svga_forward(
    tape: &mut Tape,
    support_feats: &[Var],
    query_feat: Var,
    graphs: &SvgaGraphs,
    p: &SvgaVars,
    toggles: GraphToggles,
) -> Result<SvgaOutput<Var>> {
    let support = run_branch(tape, support_feats, graphs, &graphs.view, p, toggles)?;
    let query = run_branch(tape, &[query_feat], graphs, &graphs.view, p, GraphToggles { view: false, ..toggles })?;
    if query.dims != support.dims {
        return Err(shape_err("svga", &support.dims, &query.dims));
    }
    let s0 = refined(tape, &support, 0, true)?;
    let q = refined(tape, &query, 0, false)?;
    let (ps, pq, loss) = prototype_loss(tape, &[s0], q)?;
    Ok(SvgaOutput {
        support_refined: vec![s0],
        query_refined: q,
        proto_support: ps,
        proto_query: pq,
        proto_loss: loss,
    })
}

/// K-shot alignment: both branches hold real views and each uses a fully
/// connected view graph (`support_graphs.view` over the K shots,
/// `query_view` over the query views). Every real view gets its own view
/// vector; the support prototype averages the K shot prototypes.
pub fn svga_forward_kshot(
    tape: &mut Tape,
    support_feats: &[Var],
    query_feats: &[Var],
    support_graphs: &SvgaGraphs,
    query_view: &Arc<InNeighborhoods>,
    p: &SvgaVars,
    toggles: GraphToggles,
) -> Result<SvgaOutput<Var>> {
    if support_feats.len() < 2 {
        return Err(VineError::InvalidArgument("k-shot alignment needs K >= 2".into()));
    }
    let support = run_branch(tape, support_feats, support_graphs, &support_graphs.view, p, toggles)?;
    let query = run_branch(tape, query_feats, support_graphs, query_view, p, toggles)?;
    if query.dims != support.dims {
        return Err(shape_err("svga", &support.dims, &query.dims));
    }
    let mut shots = Vec::with_capacity(support_feats.len());
    for r in 0..support_feats.len() {
        shots.push(refined(tape, &support, r, true)?);
    }
    let q = refined(tape, &query, 0, true)?;
    let (ps, pq, loss) = prototype_loss(tape, &shots, q)?;
    Ok(SvgaOutput {
        support_refined: shots,
        query_refined: q,
        proto_support: ps,
        proto_query: pq,
        proto_loss: loss,
    })
}

/// Tape-free one-shot alignment on plain tensors.
pub fn svga_forward_tensors(
    support_feats: &[Tensor],
    query_feat: &Tensor,
    spatial_g: &Graph,
    view_g: &Graph,
    p: &SvgaParams,
    toggles: GraphToggles,
) -> Result<SvgaOutput<Tensor>> {
    let mut tape = Tape::new();
    let s: Vec<Var> = support_feats.iter().map(|t| tape.constant(t.clone())).collect();
    let q = tape.constant(query_feat.clone());
    let vars = SvgaVars::bind(&mut tape, p, false);
    let out = svga_forward(&mut tape, &s, q, &SvgaGraphs::new(spatial_g, view_g), &vars, toggles)?;
    Ok(materialize(&tape, out))
}

/// Tape-free K-shot alignment on plain tensors.
pub fn svga_forward_kshot_tensors(
    support_feats: &[Tensor],
    query_feats: &[Tensor],
    spatial_g: &Graph,
    p: &SvgaParams,
    toggles: GraphToggles,
) -> Result<SvgaOutput<Tensor>> {
    let mut tape = Tape::new();
    let s: Vec<Var> = support_feats.iter().map(|t| tape.constant(t.clone())).collect();
    let q: Vec<Var> = query_feats.iter().map(|t| tape.constant(t.clone())).collect();
    let vars = SvgaVars::bind(&mut tape, p, false);
    let graphs = SvgaGraphs::new(spatial_g, &crate::graph::full_view_graph(s.len())?);
    let qv = crate::graph::full_view_graph(q.len())?.in_neighborhoods();
    let out = svga_forward_kshot(&mut tape, &s, &q, &graphs, &qv, &vars, toggles)?;
    Ok(materialize(&tape, out))
}

fn materialize(tape: &Tape, out: SvgaOutput<Var>) -> SvgaOutput<Tensor> {
    SvgaOutput {
        support_refined: out.support_refined.iter().map(|&v| tape.value(v).clone()).collect(),
        query_refined: tape.value(out.query_refined).clone(),
        proto_support: tape.value(out.proto_support).clone(),
        proto_query: tape.value(out.proto_query).clone(),
        proto_loss: tape.value(out.proto_loss).clone(),
    }
}

/// The original `(image, mask)` pair followed by `r` homography-warped
/// copies, each under an independent corner perturbation.
pub fn make_pseudo_views<R: Rng + ?Sized>(
    support_img: &Tensor,
    support_mask: &Tensor,
    r: usize,
    delta_max: f64,
    rng: &mut R,
) -> Result<Vec<(Tensor, Tensor)>> {
    let mut views = Vec::with_capacity(r + 1);
    views.push((support_img.clone(), support_mask.clone()));
    for _ in 0..r {
        let h = perturb_corners(delta_max, rng)?;
        views.push((warp(support_img, &h)?, warp_mask(support_mask, &h)?));
    }
    Ok(views)
}
