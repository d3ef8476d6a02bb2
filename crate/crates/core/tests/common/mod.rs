//! Independent scalar-loop reference implementations and randomized
//! comparison drivers. Nothing here calls the library's kernels; inputs are
//! plain nested loops over `Vec<f64>`.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vine::dfm::{masked_prototypes, Conv1x1};
use vine::episodes::miou;
use vine::gat::{gat_forward, gat_init, GatParams};
use vine::geometry::{perturb_corners, warp, Homography};
use vine::graph::{full_view_graph, knn_spatial_graph, star_view_graph, Graph};
use vine::svga::{svga_forward_kshot_tensors, svga_forward_tensors, GraphToggles, SvgaParams};
use vine::vrp::{masked_cross_attn, prediction_loss, AttnParams};
use vine::Tensor;

pub const INSTANCES: usize = 60;
pub const ORACLE_TOL: f64 = 1e-10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn rand_mask(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `x[n][c]` rows through a multi-head GAT; heads concatenated per node.
pub fn gat_oracle(x: &[Vec<f64>], edges: &[(usize, usize)], p: &GatParams) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut out = vec![Vec::new(); n];
    for head in &p.heads {
        let (co, ci) = (head.weight.shape()[0], head.weight.shape()[1]);
        let w = head.weight.data();
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|xi| (0..co).map(|o| (0..ci).map(|k| w[o * ci + k] * xi[k]).sum()).collect())
            .collect();
        let dot = |a: &[f64], v: &[f64]| a.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
        for i in 0..n {
            let srcs: Vec<usize> = edges.iter().filter(|e| e.1 == i).map(|e| e.0).collect();
            let scores: Vec<f64> = srcs
                .iter()
                .map(|&j| leaky(dot(head.attn_src.data(), &z[j]) + dot(head.attn_dst.data(), &z[i]), p.leaky_slope))
                .collect();
            let alpha = softmax(&scores);
            for o in 0..co {
                out[i].push(srcs.iter().zip(&alpha).map(|(&j, a)| a * z[j][o]).sum());
            }
        }
    }
    out
}

/// `C×H×W` map to `N×C` patch rows.
pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (c, n) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    (0..n).map(|i| (0..c).map(|ch| t.data()[ch * n + i]).collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>], h: usize, w: usize) -> Tensor {
    let c = rows[0].len();
    Tensor::from_fn(&[c, h, w], |k| rows[k % (h * w)][k / (h * w)])
}

fn matvec_rows(x: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
    // x·W with W stored C_in×C_out row-major
    let (ci, co) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|r| (0..co).map(|o| (0..ci).map(|k| r[k] * w.data()[k * co + o]).sum()).collect())
        .collect()
}

pub fn attention_oracle(tokens: &[Vec<f64>], keys: &[Vec<f64>], values: &[Vec<f64>], mask: Option<&[f64]>, p: &AttnParams) -> Vec<Vec<f64>> {
    let c = tokens[0].len();
    let (q, k, v) = (matvec_rows(tokens, &p.wq), matvec_rows(keys, &p.wk), matvec_rows(values, &p.wv));
    let keep: Vec<bool> = match mask {
        Some(m) if m.iter().any(|&x| x > 0.5) => m.iter().map(|&x| x > 0.5).collect(),
        _ => vec![true; keys.len()],
    };
    let mut reads = Vec::new();
    for qi in &q {
        let idx: Vec<usize> = (0..keys.len()).filter(|&j| keep[j]).collect();
        let logits: Vec<f64> = idx
            .iter()
            .map(|&j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let a = softmax(&logits);
        reads.push((0..c).map(|ch| idx.iter().zip(&a).map(|(&j, w)| w * v[j][ch]).sum()).collect::<Vec<f64>>());
    }
    let o = matvec_rows(&reads, &p.wo);
    tokens.iter().zip(o).map(|(t, r)| t.iter().zip(r).map(|(a, b)| a + b).collect()).collect()
}

/// Per-location `f·p / max(|f||p|, 1e-8)` over a `C×H×W` map.
pub fn cosine_oracle(feat: &Tensor, proto: &[f64]) -> Vec<f64> {
    let rows = to_rows(feat);
    let pn = proto.iter().map(|x| x * x).sum::<f64>().sqrt();
    rows.iter()
        .map(|r| {
            let d: f64 = r.iter().zip(proto).map(|(a, b)| a * b).sum();
            let fnorm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (fnorm * pn).max(1e-8)
        })
        .collect()
}

pub fn prototype_oracle(feat: &Tensor, mask: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let rows = to_rows(feat);
    let c = feat.shape()[0];
    let (mut fg, mut bg) = (vec![0.0; c], vec![0.0; c]);
    let (mut af, mut ab) = (0.0, 0.0);
    for (r, &m) in rows.iter().zip(mask.data()) {
        for ch in 0..c {
            fg[ch] += m * r[ch];
            bg[ch] += (1.0 - m) * r[ch];
        }
        af += m;
        ab += 1.0 - m;
    }
    let fg = fg.iter().map(|x| x / f64::max(af, 1e-6)).collect();
    let bg = bg.iter().map(|x| x / f64::max(ab, 1e-6)).collect();
    (fg, bg)
}

/// `(bce, dice)` written directly from the definitions.
pub fn loss_oracle(logits: &[f64], gt: &[f64]) -> (f64, f64) {
    let n = logits.len() as f64;
    let mut bce = 0.0;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&x, &t) in logits.iter().zip(gt) {
        let p = sigmoid(x);
        bce -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        inter += p * t;
        sp += p;
        sg += t;
    }
    (bce / n, 1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0))
}

fn inv3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            r[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    r
}

/// Inverse warp with per-pixel bilinear interpolation; reads outside the
/// image are zero.
pub fn warp_oracle(img: &Tensor, m: &[[f64; 3]; 3]) -> Vec<f64> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let inv = inv3(m);
    let px = |ch: usize, r: i64, col: i64| -> f64 {
        if r < 0 || col < 0 || r >= h as i64 || col >= w as i64 {
            0.0
        } else {
            img.data()[ch * h * w + r as usize * w + col as usize]
        }
    };
    let mut out = vec![0.0; c * h * w];
    for i in 0..h {
        for j in 0..w {
            let (x, y) = ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
            let d = inv[2][0] * x + inv[2][1] * y + inv[2][2];
            let sx = (inv[0][0] * x + inv[0][1] * y + inv[0][2]) / d;
            let sy = (inv[1][0] * x + inv[1][1] * y + inv[1][2]) / d;
            let (u, v) = (sx * w as f64 - 0.5, sy * h as f64 - 0.5);
            let (u0, v0) = (u.floor(), v.floor());
            let (fu, fv) = (u - u0, v - v0);
            let (u0, v0) = (u0 as i64, v0 as i64);
            for ch in 0..c {
                out[ch * h * w + i * w + j] = (1.0 - fv) * (1.0 - fu) * px(ch, v0, u0)
                    + (1.0 - fv) * fu * px(ch, v0, u0 + 1)
                    + fv * (1.0 - fu) * px(ch, v0 + 1, u0)
                    + fv * fu * px(ch, v0 + 1, u0 + 1);
            }
        }
    }
    out
}

pub fn miou_oracle(pred: &[f64], gt: &[f64]) -> f64 {
    let iou = |cls: f64| {
        let (mut i, mut u) = (0.0, 0.0);
        for (&p, &g) in pred.iter().zip(gt) {
            let (a, b) = (p == cls, g == cls);
            if a && b {
                i += 1.0;
            }
            if a || b {
                u += 1.0;
            }
        }
        if u == 0.0 {
            1.0
        } else {
            i / u
        }
    };
    (iou(1.0) + iou(0.0)) / 2.0
}

fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> Graph {
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    for s in 0..n {
        for d in 0..n {
            if s != d && rng.gen_bool(0.3) {
                edges.push((s, d));
            }
        }
    }
    Graph::new(n, edges, true).unwrap()
}

pub fn check_gat(seed: u64) -> f64 {
    let mut rng = rng(seed);
    (0..INSTANCES)
        .map(|_| {
            let (n, ci, co, heads) = (rng.gen_range(1..9), rng.gen_range(1..6), rng.gen_range(1..5), rng.gen_range(1..4));
            let g = random_graph(n, &mut rng);
            let p = gat_init(ci, co, heads, &mut rng);
            let x = rand_tensor(&[n, ci], &mut rng);
            let rows: Vec<Vec<f64>> = x.data().chunks(ci).map(|r| r.to_vec()).collect();
            let got = gat_forward(&x, &g, &p).unwrap();
            let want: Vec<f64> = gat_oracle(&rows, g.edges(), &p).concat();
            max_diff(got.data(), &want)
        })
        .fold(0.0, f64::max)
}

pub fn check_attention(seed: u64, masked: bool) -> f64 {
    let mut rng = rng(seed);
    (0..INSTANCES)
        .map(|_| {
            let (t, n, c) = (rng.gen_range(1..5), rng.gen_range(1..10), rng.gen_range(1..6));
            let p = AttnParams::init(c, &mut rng);
            let tok = rand_tensor(&[t, c], &mut rng);
            let keys = rand_tensor(&[n, c], &mut rng);
            let vals = rand_tensor(&[n, c], &mut rng);
            let mask = rand_mask(&[n], 0.5, &mut rng);
            let m = masked.then(|| mask.data());
            let got = masked_cross_attn(&tok, &keys, &vals, m, &p).unwrap();
            let rows = |x: &Tensor| x.data().chunks(c).map(|r| r.to_vec()).collect::<Vec<_>>();
            let want = attention_oracle(&rows(&tok), &rows(&keys), &rows(&vals), m, &p).concat();
            max_diff(got.data(), &want)
        })
        .fold(0.0, f64::max)
}

pub fn check_cosine(seed: u64) -> f64 {
    let mut rng = rng(seed);
    (0..INSTANCES)
        .map(|i| {
            let (c, h, w) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
            let mut feat = rand_tensor(&[c, h, w], &mut rng);
            if i % 5 == 0 {
                // a zero location exercises the norm clamp
                for ch in 0..c {
                    feat.data_mut()[ch * h * w] = 0.0;
                }
            }
            let proto = rand_tensor(&[c], &mut rng);
            let bg = rand_tensor(&[c], &mut rng);
            let got = vine::dfm::discriminative_prior(&feat, &proto, &bg).unwrap();
            let want = cosine_oracle(&feat, proto.data());
            let want_bg = cosine_oracle(&feat, bg.data());
            max_diff(got.fg_map.data(), &want).max(max_diff(got.bg_map.data(), &want_bg))
        })
        .fold(0.0, f64::max)
}

pub fn check_prototypes(seed: u64) -> f64 {
    let mut rng = rng(seed);
    (0..INSTANCES)
        .map(|i| {
            let (c, h, w) = (rng.gen_range(1..6), rng.gen_range(1..7), rng.gen_range(1..7));
            let feat = rand_tensor(&[c, h, w], &mut rng);
            let p = [0.0, 1.0, 0.3][i % 3];
            let mask = rand_mask(&[h, w], p, &mut rng);
            let (fg, bg) = masked_prototypes(&feat, &mask).unwrap();
            let (wf, wb) = prototype_oracle(&feat, &mask);
            max_diff(fg.data(), &wf).max(max_diff(bg.data(), &wb))
        })
        .fold(0.0, f64::max)
}

pub fn check_losses(seed: u64) -> f64 {
    let mut rng = rng(seed);
    (0..INSTANCES)
        .map(|_| {
            let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
            let logits = Tensor::from_fn(&[h, w], |_| rng.gen_range(-6.0..6.0));
            let gt = rand_mask(&[h, w], 0.4, &mut rng);
            let (total, bce, dice) = prediction_loss(&logits, &gt).unwrap();
            let (wb, wd) = loss_oracle(logits.data(), gt.data());
            (bce - wb).abs().max((dice - wd).abs()).max((total - wb - wd).abs())
        })
        .fold(0.0, f64::max)
}

pub fn check_warp(seed: u64) -> f64 {
    let mut rng = rng(seed);
    (0..INSTANCES)
        .map(|_| {
            let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(2..12), rng.gen_range(2..12));
            let img = rand_tensor(&[c, h, w], &mut rng);
            let hm: Homography = perturb_corners(rng.gen_range(0.0..0.2), &mut rng).unwrap();
            let got = warp(&img, &hm).unwrap();
            max_diff(got.data(), &warp_oracle(&img, hm.matrix()))
        })
        .fold(0.0, f64::max)
}

pub fn check_miou(seed: u64) -> f64 {
    let mut rng = rng(seed);
    (0..INSTANCES)
        .map(|i| {
            let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
            let pp = [0.0, 1.0, 0.5][i % 3];
            let pred = rand_mask(&[h, w], pp, &mut rng);
            let gt = rand_mask(&[h, w], 0.5, &mut rng);
            (miou(&pred, &gt).unwrap() - miou_oracle(pred.data(), gt.data())).abs()
        })
        .fold(0.0, f64::max)
}

fn svga_params(c: usize, hs: usize, rng: &mut ChaCha8Rng) -> SvgaParams {
    SvgaParams {
        spatial: gat_init(c, c / hs, hs, rng),
        view: gat_init(c, c, 1, rng),
    }
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let c = rows[0].len();
    (0..c).map(|ch| rows.iter().map(|r| r[ch]).sum::<f64>() / rows.len() as f64).collect()
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn add_vec(rows: &[Vec<f64>], v: &[f64]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().zip(v).map(|(a, b)| a + b).collect()).collect()
}

/// One-shot alignment with the star view graph over `1 + pseudo` views.
/// Returns the max deviation of (refined support, refined query, loss).
pub fn check_svga(seed: u64, instances: usize) -> f64 {
    let mut rng = rng(seed);
    (0..instances)
        .map(|_| {
            let (c, h, w, views) = (4, rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(1..4));
            let k = rng.gen_range(1..(h * w).min(6));
            let p = svga_params(c, 2, &mut rng);
            let spatial = knn_spatial_graph(h, w, k).unwrap();
            let view = star_view_graph(views).unwrap();
            let supports: Vec<Tensor> = (0..views).map(|_| rand_tensor(&[c, h, w], &mut rng)).collect();
            let query = rand_tensor(&[c, h, w], &mut rng);
            let got = svga_forward_tensors(&supports, &query, &spatial, &view, &p, GraphToggles::default()).unwrap();

            let refined: Vec<Vec<Vec<f64>>> = supports.iter().map(|s| gat_oracle(&to_rows(s), spatial.edges(), &p.spatial)).collect();
            let means: Vec<Vec<f64>> = refined.iter().map(|r| mean_rows(r)).collect();
            let view_out = gat_oracle(&means, view.edges(), &p.view);
            let s0 = add_vec(&refined[0], &view_out[0]);
            let q = gat_oracle(&to_rows(&query), spatial.edges(), &p.spatial);
            let loss = mse(&mean_rows(&q), &mean_rows(&s0));
            max_diff(got.support_refined[0].data(), from_rows(&s0, h, w).data())
                .max(max_diff(got.query_refined.data(), from_rows(&q, h, w).data()))
                .max((got.proto_loss.item() - loss).abs())
        })
        .fold(0.0, f64::max)
}

/// Three-shot alignment over a fully connected view graph.
pub fn check_svga_kshot(seed: u64, instances: usize) -> f64 {
    let mut rng = rng(seed);
    (0..instances)
        .map(|_| {
            let (c, h, w, shots) = (4, rng.gen_range(2..5), rng.gen_range(2..5), 3);
            let k = rng.gen_range(1..(h * w).min(6));
            let p = svga_params(c, 2, &mut rng);
            let spatial = knn_spatial_graph(h, w, k).unwrap();
            let supports: Vec<Tensor> = (0..shots).map(|_| rand_tensor(&[c, h, w], &mut rng)).collect();
            let query = rand_tensor(&[c, h, w], &mut rng);
            let got = svga_forward_kshot_tensors(&supports, std::slice::from_ref(&query), &spatial, &p, GraphToggles::default()).unwrap();

            let full = full_view_graph(shots).unwrap();
            let refined: Vec<Vec<Vec<f64>>> = supports.iter().map(|s| gat_oracle(&to_rows(s), spatial.edges(), &p.spatial)).collect();
            let means: Vec<Vec<f64>> = refined.iter().map(|r| mean_rows(r)).collect();
            let view_out = gat_oracle(&means, full.edges(), &p.view);
            let shots_out: Vec<Vec<Vec<f64>>> = refined.iter().zip(&view_out).map(|(r, v)| add_vec(r, v)).collect();
            let qr = gat_oracle(&to_rows(&query), spatial.edges(), &p.spatial);
            let qv = gat_oracle(&[mean_rows(&qr)], &[(0, 0)], &p.view);
            let q = add_vec(&qr, &qv[0]);
            let protos: Vec<Vec<f64>> = shots_out.iter().map(|s| mean_rows(s)).collect();
            let ps = mean_rows(&protos);
            let loss = mse(&mean_rows(&q), &ps);
            let mut err = (got.proto_loss.item() - loss).abs();
            for (g, s) in got.support_refined.iter().zip(&shots_out) {
                err = err.max(max_diff(g.data(), from_rows(s, h, w).data()));
            }
            err.max(max_diff(got.query_refined.data(), from_rows(&q, h, w).data()))
        })
        .fold(0.0, f64::max)
}

/// Per-location query modulation: prototypes, cosine priors, ReLU gap and
/// a 1×1 convolution over `[feature, fg prototype, prior]`.
pub fn check_dfm(seed: u64, instances: usize) -> f64 {
    let mut rng = rng(seed);
    (0..instances)
        .map(|_| {
            let (c, h, w) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
            let support = rand_tensor(&[c, h, w], &mut rng);
            let mask = rand_mask(&[h, w], 0.4, &mut rng);
            let query = rand_tensor(&[c, h, w], &mut rng);
            let conv = Conv1x1 {
                weight: rand_tensor(&[c, 2 * c + 1], &mut rng),
                bias: rand_tensor(&[c], &mut rng),
            };
            let (fg, bg) = masked_prototypes(&support, &mask).unwrap();
            let pri = vine::dfm::discriminative_prior(&query, &fg, &bg).unwrap();
            let got = vine::dfm::modulate_query(&query, &fg, &pri.disc_prior, &conv).unwrap();

            let (ofg, obg) = prototype_oracle(&support, &mask);
            let cf = cosine_oracle(&query, &ofg);
            let cb = cosine_oracle(&query, &obg);
            let rows = to_rows(&query);
            let mut want = vec![0.0; c * h * w];
            let mut disc_err = 0.0f64;
            for (loc, r) in rows.iter().enumerate() {
                let d = (cf[loc] - cb[loc]).max(0.0);
                disc_err = disc_err.max((pri.disc_prior.data()[loc] - d).abs());
                let input: Vec<f64> = r.iter().chain(&ofg).cloned().chain(std::iter::once(d)).collect();
                for o in 0..c {
                    let wrow = &conv.weight.data()[o * (2 * c + 1)..(o + 1) * (2 * c + 1)];
                    want[o * h * w + loc] = conv.bias.data()[o] + wrow.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            disc_err.max(max_diff(got.data(), &want))
        })
        .fold(0.0, f64::max)
}

/// Named pass/fail checks of the exact identities: identity warp, zero-shift
/// pseudo-views, attention normalization, prior sign, zero prototype loss on
/// identical inputs and the all-ones mask equivalence.
pub fn exactness_checks(seed: u64) -> Vec<(&'static str, bool, String)> {
    use vine::dfm::discriminative_prior;
    use vine::svga::make_pseudo_views;
    use vine::vrp::cross_attn;

    let mut rng = rng(seed);
    let mut out = Vec::new();

    let warp_ok = (0..INSTANCES).all(|_| {
        let img = rand_tensor(&[rng.gen_range(1..4), rng.gen_range(2..10), rng.gen_range(2..10)], &mut rng);
        warp(&img, &Homography::identity()).unwrap() == img
    });
    out.push(("identity warp is bit-exact", warp_ok, String::new()));

    let views_ok = (0..20).all(|_| {
        let img = rand_tensor(&[3, 8, 8], &mut rng);
        let mask = rand_mask(&[8, 8], 0.5, &mut rng);
        make_pseudo_views(&img, &mask, 3, 0.0, &mut rng)
            .unwrap()
            .iter()
            .all(|(i, m)| *i == img && *m == mask)
    });
    out.push(("zero-shift pseudo-views are bit-identical", views_ok, String::new()));

    // With one-hot values and identity projections the attention output
    // minus the residual is the attention matrix itself.
    let mut worst_row = 0.0f64;
    let mut min_weight = f64::INFINITY;
    for i in 0..INSTANCES {
        let (t, n) = (rng.gen_range(1..5), rng.gen_range(1..9));
        let mut p = AttnParams::init(n, &mut rng);
        p.wv = Tensor::eye(n);
        p.wo = Tensor::eye(n);
        let tok = rand_tensor(&[t, n], &mut rng);
        let keys = rand_tensor(&[n, n], &mut rng);
        let mask = rand_mask(&[n], 0.5, &mut rng);
        let m = (i % 2 == 0).then(|| mask.data());
        let y = masked_cross_attn(&tok, &keys, &Tensor::eye(n), m, &p).unwrap();
        for (row_y, row_t) in y.data().chunks(n).zip(tok.data().chunks(n)) {
            let w: Vec<f64> = row_y.iter().zip(row_t).map(|(a, b)| a - b).collect();
            worst_row = worst_row.max((w.iter().sum::<f64>() - 1.0).abs());
            min_weight = min_weight.min(w.iter().cloned().fold(f64::INFINITY, f64::min));
        }
    }
    for _ in 0..INSTANCES {
        let n = rng.gen_range(1..8);
        let g = random_graph(n, &mut rng);
        let p = gat_init(3, 2, 2, &mut rng);
        let x = rand_tensor(&[n, 3], &mut rng);
        for head in vine::gat::gat_attention(&x, &g, &p).unwrap() {
            for node in head {
                worst_row = worst_row.max((node.iter().map(|e| e.1).sum::<f64>() - 1.0).abs());
                min_weight = min_weight.min(node.iter().map(|e| e.1).fold(f64::INFINITY, f64::min));
            }
        }
    }
    out.push((
        "attention rows sum to 1",
        worst_row <= 1e-12 && min_weight >= -1e-12,
        format!("max |row sum - 1| = {worst_row:.1e}"),
    ));

    let mut min_prior = f64::INFINITY;
    for _ in 0..INSTANCES {
        let (c, h, w) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
        let q = rand_tensor(&[c, h, w], &mut rng);
        let pr = discriminative_prior(&q, &rand_tensor(&[c], &mut rng), &rand_tensor(&[c], &mut rng)).unwrap();
        min_prior = pr.disc_prior.data().iter().cloned().fold(min_prior, f64::min);
    }
    out.push(("disc_prior is nonnegative", min_prior >= 0.0, format!("min = {min_prior:e}")));

    let mut max_loss = 0.0f64;
    for _ in 0..20 {
        let (c, h, w) = (4, rng.gen_range(2..5), rng.gen_range(2..5));
        let q = rand_tensor(&[c, h, w], &mut rng);
        let p = SvgaParams {
            spatial: gat_init(c, 2, 2, &mut rng),
            view: GatParams::zeros(c, c, 1),
        };
        let spatial = knn_spatial_graph(h, w, 2).unwrap();
        let out = svga_forward_tensors(std::slice::from_ref(&q), &q, &spatial, &star_view_graph(1).unwrap(), &p, GraphToggles::default()).unwrap();
        max_loss = max_loss.max(out.proto_loss.item());
    }
    out.push(("proto_loss is 0 on identical features", max_loss == 0.0, format!("max = {max_loss:e}")));

    let ones_ok = (0..INSTANCES).all(|_| {
        let (t, n, c) = (rng.gen_range(1..5), rng.gen_range(1..9), rng.gen_range(1..6));
        let p = AttnParams::init(c, &mut rng);
        let tok = rand_tensor(&[t, c], &mut rng);
        let keys = rand_tensor(&[n, c], &mut rng);
        let vals = rand_tensor(&[n, c], &mut rng);
        let ones = vec![1.0; n];
        masked_cross_attn(&tok, &keys, &vals, Some(&ones), &p).unwrap() == cross_attn(&tok, &keys, &vals, &p).unwrap()
    });
    out.push(("all-ones mask equals plain attention bit-for-bit", ones_ok, String::new()));
    out
}
