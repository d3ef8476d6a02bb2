//! Synthetic few-shot episodes: twelve parametric silhouette classes on
//! low-frequency noise textures, viewed through random homographies.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VineError};
use crate::geometry::{perturb_corners, Homography};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 12;
pub const BASE_CLASSES: [usize; 9] = [0, 1, 3, 4, 5, 6, 8, 9, 10];
pub const NOVEL_CLASSES: [usize; 3] = [2, 7, 11];
pub const MIN_IMAGE_SIZE: usize = 16;
const MAX_ATTEMPTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Base,
    Novel,
}

impl Split {
    pub fn classes(self) -> &'static [usize] {
        match self {
            Split::Base => &BASE_CLASSES,
            Split::Novel => &NOVEL_CLASSES,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Base => "base",
            Split::Novel => "novel",
        })
    }
}

impl FromStr for Split {
    type Err = VineError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "novel" => Ok(Split::Novel),
            _ => Err(VineError::Format {
                what: "split",
                msg: format!("expected base or novel, got {s:?}"),
            }),
        }
    }
}

/// Panics if the base and novel pools overlap or leave a class out.
pub fn assert_disjoint_splits() {
    let mut seen = [0u8; NUM_CLASSES];
    for &c in BASE_CLASSES.iter().chain(&NOVEL_CLASSES) {
        seen[c] += 1;
    }
    assert!(seen.iter().all(|&n| n == 1), "class pools must partition the class set");
}

#[derive(Clone, Debug)]
enum Family {
    Polygon(Vec<[f64; 2]>),
    Disk,
    Ellipse(f64),
    Ring(f64),
    Crescent { offset: f64, cut: f64 },
}

fn regular_polygon(n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / n as f64 - PI / 2.0;
            [a.cos(), a.sin()]
        })
        .collect()
}

fn star(points: usize, inner: f64) -> Vec<[f64; 2]> {
    (0..2 * points)
        .map(|k| {
            let r = if k % 2 == 0 { 1.0 } else { inner };
            let a = PI * k as f64 / points as f64 - PI / 2.0;
            [r * a.cos(), r * a.sin()]
        })
        .collect()
}

fn cross(arm: f64) -> Vec<[f64; 2]> {
    let a = arm;
    vec![
        [-a, -1.0], [a, -1.0], [a, -a], [1.0, -a], [1.0, a], [a, a],
        [a, 1.0], [-a, 1.0], [-a, a], [-1.0, a], [-1.0, -a], [-a, -a],
    ]
}

/// Silhouette family of a class, in local coordinates spanning `[-1, 1]²`.
fn family(class_id: usize) -> Family {
    match class_id {
        0 => Family::Polygon(regular_polygon(3)),
        1 => Family::Polygon(regular_polygon(4)),
        2 => Family::Polygon(regular_polygon(5)),
        3 => Family::Polygon(regular_polygon(6)),
        4 => Family::Disk,
        5 => Family::Ellipse(0.5),
        6 => Family::Ring(0.55),
        7 => Family::Polygon(cross(0.33)),
        8 => Family::Polygon(star(5, 0.45)),
        9 => Family::Polygon(vec![[-1.0, -1.0], [-0.3, -1.0], [-0.3, 0.4], [1.0, 0.4], [1.0, 1.0], [-1.0, 1.0]]),
        10 => Family::Crescent { offset: 0.5, cut: 0.85 },
        11 => Family::Polygon(vec![
            [-1.0, -1.0], [1.0, -1.0], [1.0, -0.45], [0.3, -0.45], [0.3, 1.0], [-0.3, 1.0], [-0.3, -0.45], [-1.0, -0.45],
        ]),
        _ => unreachable!("class ids are validated by callers"),
    }
}

fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

impl Family {
    fn contains(&self, p: [f64; 2]) -> bool {
        let r2 = p[0] * p[0] + p[1] * p[1];
        match self {
            Family::Polygon(v) => point_in_polygon(p, v),
            Family::Disk => r2 <= 1.0,
            Family::Ellipse(b) => p[0] * p[0] + (p[1] / b).powi(2) <= 1.0,
            Family::Ring(inner) => r2 <= 1.0 && r2 >= inner * inner,
            Family::Crescent { offset, cut } => {
                r2 <= 1.0 && (p[0] - offset).powi(2) + p[1] * p[1] > cut * cut
            }
        }
    }
}

/// A shape class: id plus silhouette family.
#[derive(Clone, Debug)]
pub struct ShapeClass {
    pub class_id: usize,
    family: Family,
}

impl ShapeClass {
    pub fn new(class_id: usize) -> Result<Self> {
        if class_id >= NUM_CLASSES {
            return Err(VineError::InvalidArgument(format!("class id {class_id} out of range")));
        }
        Ok(Self {
            class_id,
            family: family(class_id),
        })
    }
}

/// Rigid-plus-scale placement of a silhouette in scene coordinates.
#[derive(Clone, Copy, Debug)]
struct Placement {
    center: [f64; 2],
    radius: f64,
    cos: f64,
    sin: f64,
}

impl Placement {
    fn random<R: Rng + ?Sized>(rng: &mut R, center: (f64, f64), radius: (f64, f64), max_rot: f64) -> Self {
        let a = rng.gen_range(-max_rot..=max_rot);
        Self {
            center: [rng.gen_range(center.0..=center.1), rng.gen_range(center.0..=center.1)],
            radius: rng.gen_range(radius.0..=radius.1),
            cos: a.cos(),
            sin: a.sin(),
        }
    }

    #[cfg(test)]
    fn to_scene(&self, l: [f64; 2]) -> [f64; 2] {
        let (x, y) = (self.cos * l[0] - self.sin * l[1], self.sin * l[0] + self.cos * l[1]);
        [self.center[0] + self.radius * x, self.center[1] + self.radius * y]
    }

    fn to_local(&self, q: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = ((q[0] - self.center[0]) / self.radius, (q[1] - self.center[1]) / self.radius);
        [self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy]
    }
}

/// Per-channel base colour plus a few low-frequency sinusoids.
#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    waves: [[(f64, f64, f64, f64); 3]; 3],
}

impl Texture {
    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut base = [0.0; 3];
        let mut waves = [[(0.0, 0.0, 0.0, 0.0); 3]; 3];
        for c in 0..3 {
            base[c] = rng.gen_range(0.15..0.85);
            for w in &mut waves[c] {
                *w = (
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(0.0..2.0 * PI),
                    rng.gen_range(0.0..0.06),
                );
            }
        }
        Self { base, waves }
    }

    fn eval(&self, c: usize, q: [f64; 2]) -> f64 {
        let v = self.waves[c]
            .iter()
            .map(|&(fx, fy, ph, amp)| amp * (2.0 * PI * (fx * q[0] + fy * q[1]) + ph).sin())
            .sum::<f64>();
        (self.base[c] + v).clamp(0.0, 1.0)
    }
}

struct Scene {
    background: Texture,
    layers: Vec<(Family, Placement, Texture)>,
    fg_place: Placement,
    fg_tex: Texture,
}

impl Scene {
    fn draw<R: Rng + ?Sized>(distractors: &[usize], rng: &mut R) -> Result<Self> {
        let background = Texture::random(rng);
        let layers = distractors
            .iter()
            .map(|&d| ShapeClass::new(d).map(|c| c.family))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .map(|f| (f, Placement::random(rng, (0.1, 0.9), (0.08, 0.16), PI), Texture::random(rng)))
            .collect();
        let fg_place = Placement::random(rng, (0.35, 0.65), (0.18, 0.28), 0.5);
        let fg_tex = Texture::random(rng);
        Ok(Self {
            background,
            layers,
            fg_place,
            fg_tex,
        })
    }
}

fn min_foreground_area(size: usize) -> usize {
    (size * size / 64).clamp(1, 16)
}

/// Renders one foreground instance of `class`, seen through `view`, over a
/// textured background with `distractors.len()` clutter shapes. Returns the
/// `3×S×S` image and the binary `S×S` foreground mask.
pub fn render_sample<R: Rng + ?Sized>(
    class: &ShapeClass,
    view: &Homography,
    distractors: &[usize],
    size: usize,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    if size < MIN_IMAGE_SIZE || !size.is_multiple_of(4) {
        return Err(VineError::InvalidArgument(format!(
            "image size {size} must be a multiple of 4 and at least {MIN_IMAGE_SIZE}"
        )));
    }
    let Scene {
        background,
        layers,
        fg_place,
        fg_tex,
    } = Scene::draw(distractors, rng)?;

    let inv = view.inverse()?;
    let n = size * size;
    let mut image = Tensor::zeros(&[3, size, size]);
    let mut mask = Tensor::zeros(&[size, size]);
    for k in 0..n {
        let p = [((k % size) as f64 + 0.5) / size as f64, ((k / size) as f64 + 0.5) / size as f64];
        let Some(q) = inv.apply(p) else { continue };
        let mut tex = &background;
        for (f, pl, t) in &layers {
            if f.contains(pl.to_local(q)) {
                tex = t;
            }
        }
        if class.family.contains(fg_place.to_local(q)) {
            tex = &fg_tex;
            mask.data_mut()[k] = 1.0;
        }
        for c in 0..3 {
            image.data_mut()[c * n + k] = tex.eval(c, q);
        }
    }
    let area = mask.data().iter().filter(|&&m| m > 0.5).count();
    if area < min_foreground_area(size) {
        return Err(VineError::Degenerate(format!("foreground area {area} px after warp")));
    }
    Ok((image, mask))
}

/// Generation knobs shared by every episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub image_size: usize,
    pub clutter: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            clutter: 2,
        }
    }
}

/// Everything needed to regenerate an episode; one manifest line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub seed: u64,
    pub class_id: usize,
    pub split: Split,
    pub k: usize,
    pub view_shift: f64,
}

impl fmt::Display for EpisodeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {}", self.seed, self.class_id, self.split, self.k, self.view_shift)
    }
}

impl FromStr for EpisodeSpec {
    type Err = VineError;
    fn from_str(line: &str) -> Result<Self> {
        let bad = |msg: String| VineError::Format { what: "manifest line", msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [seed, class_id, split, k, view_shift] = fields[..] else {
            return Err(bad(format!("expected 5 fields, got {}: {line:?}", fields.len())));
        };
        let spec = Self {
            seed: seed.parse().map_err(|e| bad(format!("seed: {e}")))?,
            class_id: class_id.parse().map_err(|e| bad(format!("class_id: {e}")))?,
            split: split.parse()?,
            k: k.parse().map_err(|e| bad(format!("k: {e}")))?,
            view_shift: view_shift.parse().map_err(|e| bad(format!("view_shift: {e}")))?,
        };
        if !spec.split.classes().contains(&spec.class_id) {
            return Err(bad(format!("class {} is not in the {} split", spec.class_id, spec.split)));
        }
        Ok(spec)
    }
}

impl EpisodeSpec {
    pub fn generate(&self, cfg: &EpisodeConfig) -> Result<Episode> {
        Episode::generate(self, cfg)
    }
}

#[derive(Clone, Debug)]
pub struct Episode {
    /// `(image 3×H×W, mask H×W)` per shot.
    pub supports: Vec<(Tensor, Tensor)>,
    pub query_image: Tensor,
    pub query_mask: Tensor,
    pub class_id: usize,
    pub spec: EpisodeSpec,
}

fn draw_distractors<R: Rng + ?Sized>(spec: &EpisodeSpec, n: usize, rng: &mut R) -> Vec<usize> {
    let others: Vec<usize> = spec.split.classes().iter().copied().filter(|&c| c != spec.class_id).collect();
    (0..n).map(|_| others[rng.gen_range(0..others.len())]).collect()
}

fn render_with_retries<R: Rng + ?Sized>(
    spec: &EpisodeSpec,
    class: &ShapeClass,
    view_shift: f64,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let mut last = None;
    for _ in 0..MAX_ATTEMPTS {
        let view = perturb_corners(view_shift, rng)?;
        let distractors = draw_distractors(spec, cfg.clutter, rng);
        let mut render_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        match render_sample(class, &view, &distractors, cfg.image_size, &mut render_rng) {
            Err(e @ VineError::Degenerate(_)) => last = Some(e),
            other => return other,
        }
    }
    Err(last.expect("at least one attempt"))
}

impl Episode {
    /// Supports are rendered under the identity view, the query under a
    /// corner perturbation of magnitude `view_shift`.
    pub fn generate(spec: &EpisodeSpec, cfg: &EpisodeConfig) -> Result<Self> {
        if spec.k == 0 {
            return Err(VineError::InvalidArgument("episodes need k >= 1".into()));
        }
        let class = ShapeClass::new(spec.class_id)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let supports = (0..spec.k)
            .map(|_| render_with_retries(spec, &class, 0.0, cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (query_image, query_mask) = render_with_retries(spec, &class, spec.view_shift, cfg, &mut rng)?;
        Ok(Self {
            supports,
            query_image,
            query_mask,
            class_id: spec.class_id,
            spec: *spec,
        })
    }
}

/// Draws episode specs for a split.
pub fn sample_spec<R: Rng + ?Sized>(split: Split, k: usize, view_shift: f64, rng: &mut R) -> Result<EpisodeSpec> {
    let pool = split.classes();
    if pool.is_empty() {
        return Err(VineError::EmptySplit(match split {
            Split::Base => "base",
            Split::Novel => "novel",
        }));
    }
    Ok(EpisodeSpec {
        seed: rng.gen(),
        class_id: pool[rng.gen_range(0..pool.len())],
        split,
        k,
        view_shift,
    })
}

pub fn sample_episode<R: Rng + ?Sized>(
    split: Split,
    k: usize,
    view_shift: f64,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode> {
    sample_spec(split, k, view_shift, rng)?.generate(cfg)
}

pub fn write_manifest<W: Write>(w: &mut W, specs: &[EpisodeSpec]) -> Result<()> {
    for s in specs {
        writeln!(w, "{s}")?;
    }
    Ok(())
}

pub fn read_manifest<R: Read>(r: &mut R) -> Result<Vec<EpisodeSpec>> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect()
}

fn check_binary(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(VineError::InvalidArgument(format!("{what} mask is not binary")))
    }
}

/// Pixel counts `(tp, fp, fn, tn)` of two binary masks.
pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<[usize; 4]> {
    if pred.shape() != gt.shape() {
        return Err(crate::error::shape_err("confusion", pred.shape(), gt.shape()));
    }
    check_binary(pred, "predicted")?;
    check_binary(gt, "ground-truth")?;
    let mut c = [0usize; 4];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let idx = match (p == 1.0, g == 1.0) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        c[idx] += 1;
    }
    Ok(c)
}

fn iou(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn foreground_iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let [tp, fp, fnn, _] = confusion(pred, gt)?;
    Ok(iou(tp, tp + fp + fnn))
}

/// Mean of foreground and background IoU. A class absent from both masks
/// scores 1.
pub fn miou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let [tp, fp, fnn, tn] = confusion(pred, gt)?;
    Ok(0.5 * (iou(tp, tp + fp + fnn) + iou(tn, tn + fp + fnn)))
}

pub fn precision(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let [tp, fp, fnn, _] = confusion(pred, gt)?;
    Ok(match tp + fp {
        0 if fnn == 0 => 1.0,
        0 => 0.0,
        n => tp as f64 / n as f64,
    })
}

/// Binary P5 greymap of an `H×W` map with values in `[0, 1]`; a `C×H×W`
/// input is averaged over channels first.
pub fn write_pgm<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let (c, h, wd) = match *t.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(crate::error::shape_err("write_pgm", t.shape(), &[0, 0])),
    };
    let n = h * wd;
    let bytes: Vec<u8> = (0..n)
        .map(|k| {
            let v = (0..c).map(|ch| t.data()[ch * n + k]).sum::<f64>() / c as f64;
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    write!(w, "P5\n{wd} {h}\n255\n")?;
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a P5 greymap with maxval 255 into an `H×W` tensor scaled to `[0, 1]`.
pub fn read_pgm<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let bad = |msg: &str| VineError::Format {
        what: "pgm",
        msg: msg.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&buf[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = buf.get(pos + 1..pos + 1 + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Tensor::new(&[h, w], data.iter().map(|&b| b as f64 / 255.0).collect())
}
