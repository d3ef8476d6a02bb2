//! Multi-head additive graph attention.
//!
//! Per head `h`: `z_i = W_h x_i`, logits `e_ij = LeakyReLU(a_src·z_j + a_dst·z_i)`
//! for every edge `j → i`, `α_ij` the softmax of `e_ij` over the in-neighbourhood
//! of `i`, and `out_i = Σ_j α_ij z_j`. Heads are concatenated; there is no bias.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{edge_softmax, InNeighborhoods, Tape, Var};
use crate::error::{shape_err, Result};
use crate::graph::Graph;
use crate::params::{Bound, VineParams};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct GatHead {
    /// `C_out × C_in`
    pub weight: Tensor,
    pub attn_src: Tensor,
    pub attn_dst: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatParams {
    pub heads: Vec<GatHead>,
    pub leaky_slope: f64,
}

impl GatParams {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn c_in(&self) -> usize {
        self.heads[0].weight.shape()[1]
    }

    pub fn c_out_per_head(&self) -> usize {
        self.heads[0].weight.shape()[0]
    }

    /// All-zero weights and attention vectors.
    pub fn zeros(c_in: usize, c_out: usize, heads: usize) -> Self {
        let head = GatHead {
            weight: Tensor::zeros(&[c_out, c_in]),
            attn_src: Tensor::zeros(&[c_out]),
            attn_dst: Tensor::zeros(&[c_out]),
        };
        Self {
            heads: vec![head; heads],
            leaky_slope: LEAKY_SLOPE,
        }
    }

    /// Head `h` projects onto input channels `h·C_out .. (h+1)·C_out`, so the
    /// concatenated projection is the identity. Attention stays learnable.
    pub fn identity(c: usize, heads: usize) -> Self {
        assert_eq!(c % heads, 0);
        let co = c / heads;
        let heads = (0..heads)
            .map(|h| GatHead {
                weight: Tensor::from_fn(&[co, c], |k| if k % c == h * co + k / c { 1.0 } else { 0.0 }),
                attn_src: Tensor::zeros(&[co]),
                attn_dst: Tensor::zeros(&[co]),
            })
            .collect();
        Self {
            heads,
            leaky_slope: LEAKY_SLOPE,
        }
    }

    pub fn register(&self, prefix: &str, params: &mut VineParams) {
        for (h, head) in self.heads.iter().enumerate() {
            params.insert(format!("{prefix}.head{h}.weight"), head.weight.clone());
            params.insert(format!("{prefix}.head{h}.attn_src"), head.attn_src.clone());
            params.insert(format!("{prefix}.head{h}.attn_dst"), head.attn_dst.clone());
        }
    }
}

/// Xavier-uniform initialization with `s = sqrt(6 / (c_in + c_out))` applied
/// to every weight and attention entry; `c_out` is the per-head width.
pub fn gat_init<R: Rng + ?Sized>(c_in: usize, c_out: usize, heads: usize, rng: &mut R) -> GatParams {
    let s = (6.0 / (c_in + c_out) as f64).sqrt();
    let mut u = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-s..=s));
    let heads = (0..heads)
        .map(|_| GatHead {
            weight: u(&[c_out, c_in]),
            attn_src: u(&[c_out]),
            attn_dst: u(&[c_out]),
        })
        .collect();
    GatParams {
        heads,
        leaky_slope: LEAKY_SLOPE,
    }
}

/// Tape handles for one GAT layer.
#[derive(Clone, Debug)]
pub struct GatVars {
    heads: Vec<[Var; 3]>,
    slope: f64,
}

impl GatVars {
    pub fn bind(tape: &mut Tape, p: &GatParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        Self {
            heads: p
                .heads
                .iter()
                .map(|h| [leaf(&h.weight), leaf(&h.attn_src), leaf(&h.attn_dst)])
                .collect(),
            slope: p.leaky_slope,
        }
    }

    pub fn from_bound(bound: &Bound, prefix: &str, heads: usize) -> Self {
        Self {
            heads: (0..heads)
                .map(|h| {
                    [
                        bound.get(&format!("{prefix}.head{h}.weight")),
                        bound.get(&format!("{prefix}.head{h}.attn_src")),
                        bound.get(&format!("{prefix}.head{h}.attn_dst")),
                    ]
                })
                .collect(),
            slope: LEAKY_SLOPE,
        }
    }
}

/// GAT layer on a tape: `x: N×C_in` → `N×(C_out·heads)`.
pub fn gat_forward_var(tape: &mut Tape, x: Var, nbr: &Arc<InNeighborhoods>, p: &GatVars) -> Result<Var> {
    let n = tape.shape(x)[0];
    if tape.shape(x).len() != 2 || n != nbr.num_nodes() {
        return Err(shape_err("gat_forward", tape.shape(x), &[nbr.num_nodes()]));
    }
    let mut outs = Vec::with_capacity(p.heads.len());
    for &[w, a_src, a_dst] in &p.heads {
        let co = tape.shape(w)[0];
        let wt = tape.transpose(w)?;
        let z = tape.matmul(x, wt)?;
        let a_src = tape.reshape(a_src, &[co, 1])?;
        let a_dst = tape.reshape(a_dst, &[co, 1])?;
        let s_src = tape.matmul(z, a_src)?;
        let s_dst = tape.matmul(z, a_dst)?;
        outs.push(tape.graph_attention(z, s_src, s_dst, nbr.clone(), p.slope)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

/// Tape-free GAT forward.
pub fn gat_forward(x: &Tensor, g: &Graph, p: &GatParams) -> Result<Tensor> {
    check_input(x, g, p)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = GatVars::bind(&mut tape, p, false);
    let out = gat_forward_var(&mut tape, xv, &g.in_neighborhoods(), &vars)?;
    Ok(tape.value(out).clone())
}

/// Attention coefficients per head: for each destination node, the
/// `(source, α)` pairs of its in-neighbourhood.
pub fn gat_attention(x: &Tensor, g: &Graph, p: &GatParams) -> Result<Vec<Vec<Vec<(usize, f64)>>>> {
    check_input(x, g, p)?;
    let nbr = g.in_neighborhoods();
    let (n, cin) = (x.shape()[0], x.shape()[1]);
    let mut per_head = Vec::new();
    for head in &p.heads {
        let co = head.weight.shape()[0];
        let mut wt = vec![0.0; cin * co];
        for o in 0..co {
            for i in 0..cin {
                wt[i * co + o] = head.weight.data()[o * cin + i];
            }
        }
        let z = crate::autodiff::matmul_kernel(x.data(), &wt, n, cin, co);
        let s_src = crate::autodiff::matmul_kernel(&z, head.attn_src.data(), n, co, 1);
        let s_dst = crate::autodiff::matmul_kernel(&z, head.attn_dst.data(), n, co, 1);
        let alpha = edge_softmax(&s_src, &s_dst, &nbr, p.leaky_slope);
        let mut e = 0;
        let mut nodes = Vec::with_capacity(n);
        for i in 0..n {
            let srcs = nbr.sources(i);
            nodes.push(srcs.iter().enumerate().map(|(k, &j)| (j, alpha[e + k])).collect());
            e += srcs.len();
        }
        per_head.push(nodes);
    }
    Ok(per_head)
}

fn check_input(x: &Tensor, g: &Graph, p: &GatParams) -> Result<()> {
    match *x.shape() {
        [n, c] if n == g.num_nodes() && c == p.c_in() => Ok(()),
        _ => Err(shape_err("gat_forward", x.shape(), &[g.num_nodes(), p.c_in()])),
    }
}
