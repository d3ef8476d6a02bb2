//! Corner-perturbed homographies and bilinear resampling.
//!
//! Coordinates are normalized to the unit square: the centre of pixel
//! `(row, col)` of an `H×W` image sits at `((col + 0.5)/W, (row + 0.5)/H)`.
//! Warping is inverse: each output pixel reads the input at `h⁻¹(p)`.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ResampleTable, Tape, Var};
use crate::error::{shape_err, Result, VineError};
use crate::tensor::Tensor;

const MAX_REDRAWS: usize = 8;
/// Sample positions within this many pixels of a grid point snap onto it.
const SNAP: f64 = 1e-9;

pub const UNIT_CORNERS: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];

#[derive(Clone, Debug, PartialEq)]
pub struct Homography {
    matrix: [[f64; 3]; 3],
    delta_max: f64,
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            delta_max: 0.0,
        }
    }

    /// Normalizes so that `matrix[2][2] == 1` and checks invertibility.
    pub fn from_matrix(m: [[f64; 3]; 3], delta_max: f64) -> Result<Self> {
        if m[2][2].abs() < 1e-15 {
            return Err(VineError::Degenerate("homography has m22 == 0".into()));
        }
        let s = m[2][2];
        let mut matrix = m;
        for row in &mut matrix {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        matrix[2][2] = 1.0;
        let h = Self { matrix, delta_max };
        if h.det().abs() <= 1e-12 {
            return Err(VineError::Degenerate("homography is singular".into()));
        }
        Ok(h)
    }

    /// Translation by `(dx, dy)` in normalized units.
    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            matrix: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]],
            delta_max: 0.0,
        }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.matrix
    }

    pub fn delta_max(&self) -> f64 {
        self.delta_max
    }

    pub fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn is_identity(&self) -> bool {
        *self == Self { delta_max: self.delta_max, ..Self::identity() }
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    pub fn apply(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let m = &self.matrix;
        let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
        if w.abs() < 1e-15 {
            return None;
        }
        Some([
            (m[0][0] * p[0] + m[0][1] * p[1] + m[0][2]) / w,
            (m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]) / w,
        ])
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.matrix;
        let det = self.det();
        if det.abs() <= 1e-12 {
            return Err(VineError::Degenerate("homography is not invertible".into()));
        }
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        Self::from_matrix(adj, self.delta_max)
    }

    /// Exact projective map taking `src[i]` to `dst[i]` for four point pairs,
    /// solved as an 8×8 linear system with `m22 = 1`.
    pub fn from_correspondences(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4], delta_max: f64) -> Result<Self> {
        let mut a = [[0.0f64; 9]; 8];
        for k in 0..4 {
            let [x, y] = src[k];
            let [u, v] = dst[k];
            a[2 * k] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * k + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        let h = solve8(a).ok_or_else(|| VineError::Degenerate("corner correspondences are singular".into()))?;
        Self::from_matrix([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]], delta_max)
    }
}

/// Gaussian elimination with partial pivoting on an augmented 8×9 system.
fn solve8(mut a: [[f64; 9]; 8]) -> Option<[f64; 8]> {
    for col in 0..8 {
        let piv = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, piv);
        for row in col + 1..8 {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut x = [0.0; 8];
    for row in (0..8).rev() {
        let s: f64 = (row + 1..8).map(|k| a[row][k] * x[k]).sum();
        x[row] = (a[row][8] - s) / a[row][row];
    }
    Some(x)
}

fn is_convex_quad(q: &[[f64; 2]; 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let a = q[i];
        let b = q[(i + 1) % 4];
        let c = q[(i + 2) % 4];
        let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if cross.abs() < 1e-9 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Displaces each unit-square corner by independent uniform offsets in
/// `[-delta_max, delta_max]²` and returns the homography onto the displaced
/// quadrilateral together with the sampled corners.
pub fn perturb_corners_with_corners<R: Rng + ?Sized>(
    delta_max: f64,
    rng: &mut R,
) -> Result<(Homography, [[f64; 2]; 4])> {
    if !(0.0..0.25).contains(&delta_max) {
        return Err(VineError::InvalidArgument(format!(
            "delta_max must lie in [0, 0.25), got {delta_max}"
        )));
    }
    for _ in 0..MAX_REDRAWS {
        let mut dst = UNIT_CORNERS;
        for corner in &mut dst {
            for v in corner.iter_mut() {
                *v += rng.gen_range(-delta_max..=delta_max);
            }
        }
        if dst == UNIT_CORNERS {
            return Ok((Homography { delta_max, ..Homography::identity() }, dst));
        }
        if !is_convex_quad(&dst) {
            continue;
        }
        if let Ok(h) = Homography::from_correspondences(&UNIT_CORNERS, &dst, delta_max) {
            return Ok((h, dst));
        }
    }
    Err(VineError::Degenerate(format!(
        "no valid corner perturbation after {MAX_REDRAWS} draws"
    )))
}

pub fn perturb_corners<R: Rng + ?Sized>(delta_max: f64, rng: &mut R) -> Result<Homography> {
    perturb_corners_with_corners(delta_max, rng).map(|(h, _)| h)
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < SNAP {
        r
    } else {
        x
    }
}

/// Bilinear taps at fractional pixel position `(v, u)` (row, col); taps
/// outside the image are dropped, which reads them as zero.
fn bilinear_taps(v: f64, u: f64, h: usize, w: usize) -> Vec<(usize, f64)> {
    let (v, u) = (snap(v), snap(u));
    let (v0, u0) = (v.floor(), u.floor());
    let (fv, fu) = (v - v0, u - u0);
    let mut taps = Vec::with_capacity(4);
    for (dv, wv) in [(0.0, 1.0 - fv), (1.0, fv)] {
        for (du, wu) in [(0.0, 1.0 - fu), (1.0, fu)] {
            let wt = wv * wu;
            let (r, c) = (v0 + dv, u0 + du);
            if wt == 0.0 || r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
                continue;
            }
            taps.push((r as usize * w + c as usize, wt));
        }
    }
    taps
}

/// Sampling table for inverse-warping an `H×W` image under `h`.
pub fn warp_table(h: &Homography, height: usize, width: usize) -> Result<ResampleTable> {
    if height < 2 || width < 2 {
        return Err(VineError::InvalidArgument("warp needs H, W >= 2".into()));
    }
    let inv = h.inverse()?;
    let mut rows = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let p = [(j as f64 + 0.5) / width as f64, (i as f64 + 0.5) / height as f64];
            let taps = match inv.apply(p) {
                Some([x, y]) => bilinear_taps(y * height as f64 - 0.5, x * width as f64 - 0.5, height, width),
                None => Vec::new(),
            };
            rows.push(taps);
        }
    }
    Ok(ResampleTable::from_rows((height, width), (height, width), rows))
}

/// Table for bilinear upsampling by an integer factor (half-pixel centres,
/// edge-clamped).
pub fn upsample_table(height: usize, width: usize, factor: usize) -> ResampleTable {
    let (oh, ow) = (height * factor, width * factor);
    let src = |o: usize, n: usize| ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let mut rows = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            rows.push(bilinear_taps(src(i, height), src(j, width), height, width));
        }
    }
    ResampleTable::from_rows((height, width), (oh, ow), rows)
}

/// Inverse bilinear warp of a `C×H×W` image; out-of-bounds reads are zero.
pub fn warp(image: &Tensor, h: &Homography) -> Result<Tensor> {
    let (hh, ww) = spatial(image)?;
    warp_table(h, hh, ww)?.apply(image)
}

/// Differentiable warp on a tape.
pub fn warp_var(tape: &mut Tape, image: Var, h: &Homography) -> Result<Var> {
    let (hh, ww) = spatial(tape.value(image))?;
    let table = Arc::new(warp_table(h, hh, ww)?);
    tape.resample(image, table)
}

/// Warps a binary `H×W` mask and re-binarizes at 0.5.
pub fn warp_mask(mask: &Tensor, h: &Homography) -> Result<Tensor> {
    if mask.rank() != 2 {
        return Err(shape_err("warp_mask", mask.shape(), &[0, 0]));
    }
    Ok(warp(mask, h)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

fn spatial(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [_, h, w] | [h, w] => Ok((h, w)),
        _ => Err(shape_err("warp", t.shape(), &[0, 0])),
    }
}

/// Nearest-neighbour reduction of an `H×W` mask by an integer factor; each
/// output cell takes the input pixel nearest to its centre.
pub fn downsample_nearest(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w) = match *mask.shape() {
        [h, w] if h % factor == 0 && w % factor == 0 => (h, w),
        _ => return Err(shape_err("downsample_nearest", mask.shape(), &[factor])),
    };
    let (oh, ow) = (h / factor, w / factor);
    let off = factor / 2;
    Ok(Tensor::from_fn(&[oh, ow], |k| {
        let (i, j) = (k / ow, k % ow);
        mask.data()[(i * factor + off) * w + j * factor + off]
    }))
}
